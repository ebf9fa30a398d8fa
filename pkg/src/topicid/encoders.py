"""Audio and text encoders and the feed-forward projection heads."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .features import FeatureMatrix
from .numcore import Conv1d, Conv2d, Linear, ParameterSet, ShapeError, Tensor

UNK = "<unk>"
TEXT_TABLE_MAGIC = b"TIDTEXT\x00"


class EmptyTextError(ValueError):
    pass


@dataclass
class Embedding:
    vector: np.ndarray
    modality: str
    utterance_id: str = ""

    def __post_init__(self):
        if self.modality not in ("audio", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")


def pad_batch(mats: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack (T_i, F) matrices into a zero-padded (B, T_max, F) array plus lengths."""
    lengths = np.array([m.shape[0] for m in mats], dtype=np.int64)
    out = np.zeros((len(mats), int(lengths.max()), mats[0].shape[1]), dtype=mats[0].dtype)
    for i, m in enumerate(mats):
        out[i, : len(m)] = m
    return out, lengths


def length_mask(lengths, max_len: int) -> np.ndarray:
    return (np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]).astype(np.float32)


# -- CRDNN ---------------------------------------------------------------------
@dataclass
class AudioEncoderConfig:
    num_filters: int = 40
    conv_channels: tuple = (16, 32)
    conv_kernel: tuple = (3, 3)
    conv_stride: tuple = (2, 2)  # (time, frequency)
    rnn_hidden: int = 64
    rnn_layers: int = 1
    bidirectional: bool = True
    dense_layers: int = 1
    dense_width: int = 128

    def __post_init__(self):
        sizes = [self.num_filters, *self.conv_channels, *self.conv_kernel, *self.conv_stride, self.rnn_hidden]
        if any(int(s) <= 0 for s in sizes) or self.rnn_layers < 1 or self.dense_layers < 0:
            raise ValueError("all encoder sizes must be positive")
        if self.dense_layers and self.dense_width <= 0:
            raise ValueError("dense_width must be positive")

    @property
    def embedding_dim(self) -> int:
        if self.dense_layers:
            return self.dense_width
        return self.rnn_hidden * (2 if self.bidirectional else 1)

    def output_length(self, n_frames: int) -> int:
        for _ in self.conv_channels:
            n_frames = Conv2d.out_len(n_frames, self.conv_stride[0])
        return n_frames


class CRDNNEncoder:
    """Conv blocks -> (bi)GRU -> dense; frame states plus their masked temporal mean."""

    def __init__(self, params: ParameterSet, name: str, cfg: AudioEncoderConfig, rng):
        self.cfg = cfg
        self.convs = []
        channels, freq = 1, cfg.num_filters
        for k, ch in enumerate(cfg.conv_channels):
            self.convs.append(Conv2d(params, f"{name}.conv{k}", channels, ch, cfg.conv_kernel, cfg.conv_stride, rng))
            channels = ch
            freq = Conv2d.out_len(freq, cfg.conv_stride[1])
        self.rnns = []
        in_dim = channels * freq
        for k in range(cfg.rnn_layers):
            rnn = nc.GRU(params, f"{name}.rnn{k}", in_dim, cfg.rnn_hidden, rng, bidirectional=cfg.bidirectional)
            self.rnns.append(rnn)
            in_dim = rnn.out_dim
        self.dense = []
        for k in range(cfg.dense_layers):
            self.dense.append(Linear(params, f"{name}.dense{k}", in_dim, cfg.dense_width, rng))
            in_dim = cfg.dense_width
        self.out_dim = in_dim

    def __call__(self, feats, lengths):
        """feats (B, T, F) -> (frame_states (B, T', E), lengths', utterance (B, E))."""
        x = nc.as_tensor(feats)
        if x.ndim != 3 or x.shape[-1] != self.cfg.num_filters:
            raise ShapeError(f"CRDNN expects (B, T, {self.cfg.num_filters}) features, got {x.shape}")
        lengths = np.asarray(lengths)
        h = x.reshape(x.shape[0], x.shape[1], x.shape[2], 1)
        for conv in self.convs:
            h = nc.relu(conv(h))
            lengths = -(-lengths // self.cfg.conv_stride[0])
            # zero the padded tail so batched and single-utterance outputs agree
            h = h * length_mask(lengths, h.shape[1])[:, :, None, None]
        b, t, f, c = h.shape
        h = h.reshape(b, t, f * c)
        mask = length_mask(lengths, t)
        for rnn in self.rnns:
            h, _ = rnn(h, mask)
        for dense in self.dense:
            h = nc.relu(dense(h))
        return h, lengths, nc.masked_mean(h, mask)


def crdnn_encode(feat: FeatureMatrix, encoder: CRDNNEncoder, utterance_id: str = ""):
    """Single-utterance convenience: (frame_states (T', E) array, utterance Embedding)."""
    with nc.no_grad():
        states, _, utt = encoder(feat.frames[None], [feat.num_frames])
    return states.data[0], Embedding(utt.data[0], "audio", utterance_id)


# -- TDNN baseline -----------------------------------------------------------------
@dataclass
class TDNNConfig:
    num_filters: int = 40
    widths: tuple = (64, 64, 64, 64, 128)
    kernels: tuple = (5, 3, 3, 1, 1)
    dilations: tuple = (1, 2, 3, 1, 1)
    linear_widths: tuple = (128, 64)

    @property
    def embedding_dim(self) -> int:
        return self.linear_widths[-1]


class TDNNEncoder:
    """Five dilated 1-D convolutions, statistics pooling, two linear layers."""

    def __init__(self, params: ParameterSet, name: str, cfg: TDNNConfig, rng):
        if not len(cfg.widths) == len(cfg.kernels) == len(cfg.dilations):
            raise ValueError("TDNN widths, kernels and dilations must have equal length")
        self.cfg = cfg
        self.layers = []
        in_dim = cfg.num_filters
        for k, (w, ks, d) in enumerate(zip(cfg.widths, cfg.kernels, cfg.dilations)):
            self.layers.append(Conv1d(params, f"{name}.tdnn{k}", in_dim, w, ks, d, rng))
            in_dim = w
        self.linears = []
        in_dim *= 2
        for k, w in enumerate(cfg.linear_widths):
            self.linears.append(Linear(params, f"{name}.linear{k}", in_dim, w, rng))
            in_dim = w
        self.out_dim = in_dim

    def pooled(self, feats, lengths) -> Tensor:
        x = nc.as_tensor(feats)
        if x.ndim != 3 or x.shape[-1] != self.cfg.num_filters:
            raise ShapeError(f"TDNN expects (B, T, {self.cfg.num_filters}) features, got {x.shape}")
        mask = length_mask(lengths, x.shape[1])
        h = x
        for layer in self.layers:
            h = nc.relu(layer(h)) * mask[:, :, None]
        return nc.statistics_pooling(h, mask)

    def __call__(self, feats, lengths) -> Tensor:
        h = self.pooled(feats, lengths)
        for k, lin in enumerate(self.linears):
            h = lin(h)
            if k < len(self.linears) - 1:
                h = nc.relu(h)
        return h


def tdnn_baseline_encode(feat: FeatureMatrix, encoder: TDNNEncoder, utterance_id: str = "") -> Embedding:
    with nc.no_grad():
        out = encoder(feat.frames[None], [feat.num_frames])
    return Embedding(out.data[0], "audio", utterance_id)


# -- text ------------------------------------------------------------------------
def text_tokens(text: str) -> list[str]:
    """Uncased whitespace tokenization."""
    return text.lower().split()


class TextEmbedderTable:
    """Static word-embedding lookup standing in for a pretrained text model."""

    def __init__(self, vocabulary: dict[str, int], matrix: np.ndarray, trainable: bool = False):
        if UNK not in vocabulary:
            raise ValueError(f"vocabulary needs an {UNK!r} row")
        if matrix.shape[0] != len(vocabulary):
            raise ValueError(f"table has {matrix.shape[0]} rows for {len(vocabulary)} tokens")
        self.vocabulary = dict(vocabulary)
        self.matrix = np.asarray(matrix, dtype=np.float32)
        self.trainable = trainable

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.vocabulary)

    @classmethod
    def build(cls, transcripts, dim: int = 64, seed: int = 0, trainable: bool = False) -> "TextEmbedderTable":
        vocab = {UNK: 0}
        for text in transcripts:
            for tok in text_tokens(text):
                vocab.setdefault(tok, len(vocab))
        rng = np.random.default_rng(seed)
        matrix = rng.standard_normal((len(vocab), dim)).astype(np.float32) / np.sqrt(dim)
        matrix[0] = 0.0
        return cls(vocab, matrix, trainable)

    def ids(self, tokens) -> np.ndarray:
        unk = self.vocabulary[UNK]
        return np.array([self.vocabulary.get(t, unk) for t in tokens], dtype=np.int64)

    def save(self, path):
        tokens = sorted(self.vocabulary, key=self.vocabulary.get)
        with open(path, "wb") as fh:
            fh.write(TEXT_TABLE_MAGIC)
            fh.write(struct.pack("<II", len(tokens), self.dim))
            for tok in tokens:
                raw = tok.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, trainable: bool = False) -> "TextEmbedderTable":
        blob = Path(path).read_bytes()
        if not blob.startswith(TEXT_TABLE_MAGIC):
            raise ValueError(f"{path}: not a text embedding table")
        pos = len(TEXT_TABLE_MAGIC)
        v, e = struct.unpack_from("<II", blob, pos)
        pos += 8
        vocab = {}
        for i in range(v):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            vocab[blob[pos : pos + n].decode("utf-8")] = i
            pos += n
        matrix = np.frombuffer(blob[pos : pos + 4 * v * e], dtype="<f4").reshape(v, e).astype(np.float32)
        return cls(vocab, matrix, trainable)


def _token_batch(table: TextEmbedderTable, token_lists) -> tuple[np.ndarray, np.ndarray]:
    ids = []
    for k, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise EmptyTextError(f"empty transcript at batch position {k}")
        ids.append(table.ids(toks))
    lengths = np.array([len(i) for i in ids])
    out = np.zeros((len(ids), int(lengths.max())), dtype=np.int64)
    for k, i in enumerate(ids):
        out[k, : len(i)] = i
    return out, lengths


class TextEncoder:
    """Mean of token rows; the table lives in the parameter set (frozen unless trainable)."""

    def __init__(self, params: ParameterSet, name: str, table: TextEmbedderTable):
        self.table = table
        self.weight = params.add(f"{name}.table", table.matrix.astype(nc.get_default_dtype()), trainable=table.trainable)
        self.out_dim = table.dim

    def sync_table(self):
        self.table.matrix = self.weight.data.astype(np.float32)

    def rows(self, token_lists):
        ids, lengths = _token_batch(self.table, token_lists)
        return nc.getitem(self.weight, ids), lengths

    def __call__(self, token_lists) -> Tensor:
        rows, lengths = self.rows(token_lists)
        return nc.masked_mean(rows, length_mask(lengths, rows.shape[1]))


def text_encode(tokens, table: TextEmbedderTable, utterance_id: str = "") -> Embedding:
    if len(tokens) == 0:
        raise EmptyTextError("cannot embed an empty transcript")
    return Embedding(table.matrix[table.ids(tokens)].mean(axis=0), "text", utterance_id)


class BLSTMTextEncoder:
    """Token rows through a bidirectional LSTM; final forward and backward states concatenated."""

    def __init__(self, params: ParameterSet, name: str, table_encoder: TextEncoder, hidden: int, rng):
        self.text = table_encoder
        self.lstm = nc.LSTM(params, f"{name}.blstm", table_encoder.out_dim, hidden, rng, bidirectional=True)
        self.out_dim = 2 * hidden

    def __call__(self, token_lists) -> Tensor:
        rows, lengths = self.text.rows(token_lists)
        _, final = self.lstm(rows, length_mask(lengths, rows.shape[1]))
        return final


def blstm_text_encode(tokens, encoder: BLSTMTextEncoder, utterance_id: str = "") -> Embedding:
    with nc.no_grad():
        out = encoder([tokens])
    return Embedding(out.data[0], "text", utterance_id)


# -- projections ------------------------------------------------------------------
class Projection(Linear):
    """Single affine map used to match audio embeddings to another space's dimension."""


def project_up(audio_emb, proj: Projection) -> Tensor:
    """Audio embedding -> text-embedding dimension."""
    return proj(nc.as_tensor(audio_emb))


def project_down(audio_emb, proj: Projection) -> Tensor:
    """Audio embedding -> filter-bank dimension."""
    return proj(nc.as_tensor(audio_emb))
