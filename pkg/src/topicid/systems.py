"""Build, train, checkpoint, and run every topic ID system in the lineup."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import SystemConfig, parse_config
from .corpus import CorpusView, TopicLabelMap, UtteranceRecord, read_wav
from .encoders import (
    UNK,
    BLSTMTextEncoder,
    CRDNNEncoder,
    Projection,
    TDNNEncoder,
    TextEmbedderTable,
    TextEncoder,
    pad_batch,
    text_tokens,
)
from .evaluation import PredictionSet, micro_f1, uar
from .features import FbankConfig, Waveform, extract_fbank, normalize_utterance
from .numcore import Linear, ParameterSet, Tensor, derive_seed
from .objectives import (
    CtcSchedule,
    LossBundle,
    acoustic_reconstruction_loss,
    format_log_line,
    interpolate,
    linguistic_alignment_loss,
    merge_bundles,
    nll_loss,
)
from .seq2seq import (
    AttentionDecoder,
    CharTokenizer,
    corpus_wer,
    ctc_loss,
    decode_utterance,
    greedy_decode_batch,
)

log = logging.getLogger(__name__)

EVAL_BATCH = 32


class DataProvenanceError(ValueError):
    """A record's transcript source is not legal for the system being trained."""


class ModalityError(ValueError):
    """The data lacks a modality (audio or transcript) the system needs."""


# -- architecture table -------------------------------------------------------------
@dataclass(frozen=True)
class Architecture:
    audio: str | None  # "crdnn", "tdnn" or None
    text: str | None  # "mean", "blstm" or None
    classifier: bool = True
    asr: bool = False
    transfer: bool = False


def architecture(cfg: SystemConfig) -> Architecture:
    name = cfg.name
    if name.startswith("text_"):
        return Architecture(None, "mean")
    if name == "audio_only" or (name == "emb_transfer" and cfg.stage == "finetune"):
        return Architecture("crdnn", None)
    if name == "emb_transfer":
        return Architecture("crdnn", None, transfer=True)
    if name == "audio_text_concat":
        return Architecture("crdnn", "mean")
    if name == "multi_task":
        return Architecture("crdnn", "mean", asr=True)
    if name == "audio_bl":
        return Architecture("tdnn", None)
    if name == "audio_text_bl":
        return Architecture("tdnn", "blstm")
    return Architecture("crdnn", None, classifier=False, asr=True)


# -- features and examples ------------------------------------------------------------
class FeatureStore:
    """Per-utterance normalized fbank plus the time-averaged raw fbank, computed once."""

    def __init__(self, cfg: FbankConfig = FbankConfig()):
        self.cfg = cfg
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, record: UtteranceRecord) -> tuple[np.ndarray, np.ndarray]:
        key = record.audio_path
        if key not in self._cache:
            samples, sr = read_wav(record.audio_path)
            raw = extract_fbank(Waveform(samples, sr), self.cfg)
            self._cache[key] = (normalize_utterance(raw).frames, raw.frames.mean(axis=0).astype(np.float32))
        return self._cache[key]


DEFAULT_STORE = FeatureStore()


@dataclass
class Example:
    record: UtteranceRecord
    label: int
    feats: np.ndarray | None = None
    summary: np.ndarray | None = None
    words: list[str] | None = None
    chars: list[int] | None = None

    @property
    def size(self) -> int:
        if self.feats is not None:
            return len(self.feats)
        return len(self.words or ())


@dataclass
class Batch:
    examples: list[Example]
    labels: np.ndarray
    feats: np.ndarray | None
    lengths: np.ndarray | None
    summaries: np.ndarray | None
    words: list[list[str]] | None
    chars: list[list[int]] | None

    def __len__(self):
        return len(self.examples)

    @property
    def ids(self) -> list[str]:
        return [e.record.id for e in self.examples]


def collate(examples: list[Example]) -> Batch:
    feats = lengths = summaries = None
    if examples[0].feats is not None:
        feats, lengths = pad_batch([e.feats for e in examples])
        summaries = np.stack([e.summary for e in examples])
    words = [e.words for e in examples] if examples[0].words is not None else None
    chars = [e.chars for e in examples] if examples[0].chars is not None else None
    return Batch(examples, np.array([e.label for e in examples]), feats, lengths, summaries, words, chars)


def make_batches(examples: list[Example], batch_size: int, seed: int | None = None) -> list[Batch]:
    """Bucket by length (ties by id); shuffle bucket order when ``seed`` is given."""
    order = sorted(range(len(examples)), key=lambda i: (examples[i].size, examples[i].record.id))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if seed is not None:
        chunks = [chunks[k] for k in np.random.default_rng(seed).permutation(len(chunks))]
    return [collate([examples[i] for i in chunk]) for chunk in chunks]


def _words(record: UtteranceRecord) -> list[str]:
    toks = text_tokens(record.transcript or "")
    return toks or [UNK]  # failed ASR output embeds as the zero unk row


# -- model --------------------------------------------------------------------------
class SystemModel:
    """All components of one system sharing a single ParameterSet.

    Parameter prefixes: ``encoder.`` (audio), ``text.`` (table / BLSTM),
    ``classifier.``, ``decoder.``, ``ctc.``, ``proj_up.``, ``proj_down.``.
    """

    def __init__(self, cfg: SystemConfig, num_classes: int, table: TextEmbedderTable | None = None):
        self.cfg = cfg
        self.arch = arch = architecture(cfg)
        self.num_classes = num_classes
        self.table = table
        self.params = ParameterSet(seed=cfg.seed, version=f"{cfg.name}:{cfg.stage}")
        self.tokenizer = CharTokenizer()

        def rng(component):
            return np.random.default_rng(derive_seed(cfg.seed, component))

        self.audio = None
        audio_dim = 0
        if arch.audio == "crdnn":
            self.audio = CRDNNEncoder(self.params, "encoder", cfg.audio_encoder, rng("encoder"))
            audio_dim = self.audio.out_dim
        elif arch.audio == "tdnn":
            self.audio = TDNNEncoder(self.params, "encoder", cfg.tdnn, rng("encoder"))
            audio_dim = self.audio.out_dim

        self.text = None
        text_dim = 0
        if arch.text or arch.transfer:
            if table is None:
                raise ValueError(f"{cfg.name} needs a text embedding table")
        if arch.text == "mean":
            self.text = TextEncoder(self.params, "text", table)
            text_dim = self.text.out_dim
        elif arch.text == "blstm":
            self.text = BLSTMTextEncoder(
                self.params, "text", TextEncoder(self.params, "text", table), cfg.text.blstm_hidden, rng("text")
            )
            text_dim = self.text.out_dim

        self.classifier_dim = audio_dim + text_dim
        self.classifier = None
        if arch.classifier:
            self.classifier = Linear(self.params, "classifier", self.classifier_dim, num_classes, rng("classifier"))

        self.decoder = self.ctc = None
        if arch.asr:
            v = self.tokenizer.vocab_size
            self.decoder = AttentionDecoder(self.params, "decoder", v, audio_dim, cfg.decoder, rng("decoder"))
            self.ctc = Linear(self.params, "ctc", audio_dim, v, rng("ctc"))

        self.proj_up = self.proj_down = None
        if arch.transfer:
            self.proj_up = Projection(self.params, "proj_up", audio_dim, table.dim, rng("proj_up"))
            self.proj_down = Projection(
                self.params, "proj_down", audio_dim, cfg.audio_encoder.num_filters, rng("proj_down")
            )
        self.schedule = CtcSchedule(cfg.objectives.ctc_weight, cfg.objectives.ctc_cutoff_epoch)

    # ---- what the model consumes
    @property
    def needs_audio(self) -> bool:
        return self.audio is not None

    @property
    def needs_text(self) -> bool:
        return self.text is not None

    @property
    def embedding_dim(self) -> int:
        return self.classifier_dim if self.classifier is not None else self.audio.out_dim

    # ---- forward pieces
    def encode_audio(self, batch: Batch):
        """-> (frame states or None, frame lengths or None, utterance embedding)."""
        if isinstance(self.audio, CRDNNEncoder):
            return self.audio(batch.feats, batch.lengths)
        return None, None, self.audio(batch.feats, batch.lengths)

    def classifier_input(self, batch: Batch, audio_utt: Tensor | None = None, zero_text: bool = False) -> Tensor:
        parts = []
        if self.audio is not None:
            parts.append(audio_utt if audio_utt is not None else self.encode_audio(batch)[2])
        if self.text is not None:
            t = self.text(batch.words)
            parts.append(t * 0.0 if zero_text else t)
        return parts[0] if len(parts) == 1 else nc.concat(parts, axis=-1)

    def class_log_probs(self, batch: Batch, zero_text: bool = False) -> Tensor:
        return nc.log_softmax(self.classifier(self.classifier_input(batch, zero_text=zero_text)), axis=-1)

    def asr_components(self, batch: Batch, states: Tensor, enc_len: np.ndarray, epoch: int) -> LossBundle:
        comps = {}
        if self.schedule.active(epoch):
            lp = nc.log_softmax(self.ctc(states), axis=-1)
            comps["ctc"] = ctc_loss(lp, batch.chars, enc_len)
        mem = self.decoder.memory(states, enc_len)
        comps["seq2seq"], _ = self.decoder.forced_loss(mem, batch.chars)
        counts = {k: len(batch) for k in comps}
        return interpolate(comps, self.schedule, epoch=epoch, counts=counts)

    def loss(self, batch: Batch, epoch: int) -> LossBundle:
        cfg, arch = self.cfg, self.arch
        if arch.asr and not arch.classifier:
            states, enc_len, _ = self.encode_audio(batch)
            return self.asr_components(batch, states, enc_len, epoch)
        if arch.transfer:
            _, _, utt = self.encode_audio(batch)
            lp = nc.log_softmax(self.classifier(utt), axis=-1)
            comps = {"nll": nll_loss(lp, batch.labels)}
            rows = [i for i, e in enumerate(batch.examples) if e.words is not None and e.words != [UNK]]
            if rows:
                text = np.stack([self._table_embedding(batch.words[i]) for i in rows])
                comps["align_l1"] = linguistic_alignment_loss(nc.getitem(utt, np.array(rows)), text, self.proj_up)
            else:
                comps["align_l1"] = Tensor(np.zeros((), dtype=np.float32))
            comps["recon_l1"] = acoustic_reconstruction_loss(utt, batch.summaries, self.proj_down)
            counts = {"nll": len(batch), "align_l1": len(rows), "recon_l1": len(batch)}
            return interpolate(comps, "equal", mean_weights=cfg.objectives.mean_weights, counts=counts)
        if arch.asr and cfg.stage != "finetune":
            states, enc_len, utt = self.encode_audio(batch)
            lp = nc.log_softmax(self.classifier(self.classifier_input(batch, utt)), axis=-1)
            asr = self.asr_components(batch, states, enc_len, epoch)
            w = 1.0 / 2 if cfg.objectives.mean_weights else 1.0
            bundle = merge_bundles({"topic_nll": w, "asr": w}, {"asr": asr}, {"topic_nll": nll_loss(lp, batch.labels)})
            bundle.counts["topic_nll"] = len(batch)
            return bundle
        key = "topic_nll" if arch.asr else "nll"
        comps = {key: nll_loss(self.class_log_probs(batch), batch.labels)}
        return interpolate(comps, "equal", counts={key: len(batch)})

    def inactive_prefixes(self, epoch: int, bundle: LossBundle) -> tuple[str, ...]:
        skip = []
        if self.ctc is not None and "ctc" not in bundle.components:
            skip.append("ctc.")
        if self.arch.asr and self.cfg.stage == "finetune":
            skip += ["decoder.", "ctc."]
        if self.proj_up is not None and bundle.counts.get("align_l1", 1) == 0:
            skip.append("proj_up.")
        return tuple(dict.fromkeys(skip))

    def _table_embedding(self, words: list[str]) -> np.ndarray:
        return self.table.matrix[self.table.ids(words)].mean(axis=0)

    # ---- inference helpers
    def transcribe(self, batch: Batch, beam_size: int, max_len: int) -> list[tuple[str, bool]]:
        """Decode each utterance -> (text, ok)."""
        with nc.no_grad():
            states, enc_len, _ = self.encode_audio(batch)
        out = []
        for b in range(len(batch)):
            try:
                hyp = decode_utterance(
                    self.decoder, states.data[b, : enc_len[b]], beam_size, max_len, self.cfg.decode.length_normalize
                )
                out.append((self.tokenizer.detokenize(hyp.ids), True))
            except (ValueError, FloatingPointError) as exc:
                log.warning("decoding failed for %s: %s", batch.ids[b], exc)
                out.append(("", False))
        return out


# -- trained system and run directory ---------------------------------------------------
@dataclass
class TrainedSystem:
    model: SystemModel
    config: SystemConfig
    label_map: TopicLabelMap
    history: list[dict] = field(default_factory=list)
    stage_tag: str = "trained"
    log_lines: list[str] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)
    selected_epoch: int | None = None
    asr: "TrainedSystem | None" = None
    run_dir: Path | None = None
    train_ids: list[str] = field(default_factory=list)

    @property
    def params(self) -> ParameterSet:
        return self.model.params

    @property
    def name(self) -> str:
        return self.config.name


class RunRecorder:
    """Collects log lines, provenance, per-epoch metrics; mirrors them to a run directory."""

    def __init__(self, run_dir=None, save_every_epoch: bool = True, config: SystemConfig | None = None):
        self.run_dir = Path(run_dir) if run_dir else None
        self.save_every_epoch = save_every_epoch
        self.config = config
        self.log_lines: list[str] = []
        self.provenance: list[str] = []
        self.history: list[dict] = []
        self.train_ids: list[str] = []
        if self.run_dir:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            (self.run_dir / "train_log.tsv").write_text("")
            (self.run_dir / "provenance.tsv").write_text("stage\tutterance_id\tsource\tuse\n")
            if config is not None:
                (self.run_dir / "config.ini").write_text(config.to_ini())

    def log(self, line: str):
        self.log_lines.append(line)
        if self.run_dir:
            with open(self.run_dir / "train_log.tsv", "a") as fh:
                fh.write(line + "\n")

    def read(self, stage: str, record: UtteranceRecord, use: str):
        line = f"{stage}\t{record.id}\t{record.transcript_source}\t{use}"
        self.provenance.append(line)
        if self.run_dir:
            with open(self.run_dir / "provenance.tsv", "a") as fh:
                fh.write(line + "\n")

    def epoch_done(self, row: dict, params: ParameterSet):
        self.history.append(row)
        if not self.run_dir:
            return
        write_metric_history(self.run_dir / "metrics.tsv", self.history)
        if self.save_every_epoch:
            nc.save_checkpoint(
                params,
                self.run_dir / "checkpoints" / f"epoch_{row['epoch']:03d}.ckpt",
                self.config.digest() if self.config else "",
                {"epoch": row["epoch"]},
            )


METRIC_TAIL = ("total", "dev_loss", "dev_micro_f1", "dev_uar", "dev_wer")


def write_metric_history(path, history: list[dict]):
    keys = ["epoch"]
    for row in history:
        keys += [k for k in row if k not in keys and k not in METRIC_TAIL]
    keys += [k for k in METRIC_TAIL if any(k in r for r in history)]
    with open(path, "w") as fh:
        fh.write("\t".join(keys) + "\n")
        for row in history:
            cells = []
            for k in keys:
                v = row.get(k)
                cells.append("NA" if v is None else (str(v) if k == "epoch" else f"{v:.6f}"))
            fh.write("\t".join(cells) + "\n")


def read_metric_history(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    keys = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        row = {}
        for k, v in zip(keys, line.split("\t")):
            if v != "NA":
                row[k] = int(v) if k == "epoch" else float(v)
        out.append(row)
    return out


def save_system(system: TrainedSystem, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(system.config.to_ini())
    (run_dir / "label_map.json").write_text(json.dumps(system.label_map.to_dict(), indent=1))
    if system.model.table is not None:
        if system.model.text is not None:
            enc = system.model.text.text if isinstance(system.model.text, BLSTMTextEncoder) else system.model.text
            enc.sync_table()
        system.model.table.save(run_dir / "text_table.bin")
    nc.save_checkpoint(system.params, run_dir / "final.ckpt", system.config.digest(), {"stage": system.stage_tag})
    meta = {
        "system": system.name,
        "stage": system.config.stage,
        "stage_tag": system.stage_tag,
        "selected_epoch": system.selected_epoch,
        "history": system.history,
        "has_asr": system.asr is not None,
    }
    (run_dir / "meta.json").write_text(json.dumps(meta, indent=1))
    write_metric_history(run_dir / "metrics.tsv", system.history)
    if system.asr is not None:
        save_system(system.asr, run_dir / "asr")
    system.run_dir = run_dir


def load_system(run_dir) -> TrainedSystem:
    run_dir = Path(run_dir)
    for name in ("config.ini", "label_map.json", "final.ckpt", "meta.json"):
        if not (run_dir / name).exists():
            raise FileNotFoundError(f"{run_dir}: missing {name}")
    cfg = parse_config((run_dir / "config.ini").read_text())
    label_map = TopicLabelMap.from_dict(json.loads((run_dir / "label_map.json").read_text()))
    table = None
    if (run_dir / "text_table.bin").exists():
        table = TextEmbedderTable.load(run_dir / "text_table.bin", trainable=cfg.text.trainable)
    model = SystemModel(cfg, label_map.num_classes, table)
    nc.load_checkpoint(model.params, run_dir / "final.ckpt")
    meta = json.loads((run_dir / "meta.json").read_text())
    asr = load_system(run_dir / "asr") if meta.get("has_asr") else None
    return TrainedSystem(
        model, cfg, label_map, meta["history"], meta["stage_tag"],
        selected_epoch=meta.get("selected_epoch"), asr=asr, run_dir=run_dir,
    )


# -- data selection -------------------------------------------------------------------
def _examples(model: SystemModel, records, label_map: TopicLabelMap, recorder: RunRecorder | None,
              stage: str, chars: bool = False, text: bool | None = None,
              store: FeatureStore = DEFAULT_STORE) -> list[Example]:
    text = model.needs_text if text is None else text
    out = []
    for r in records:
        ex = Example(r, label_map.index(r.topic))
        if model.needs_audio:
            ex.feats, ex.summary = store.get(r)
        if text or chars:
            if r.transcript is None:
                raise ModalityError(f"{r.id}: {model.cfg.name} needs a transcript but the record has none")
            if recorder is not None:
                recorder.read(stage, r, "text" if text else "asr_target")
        if text:
            ex.words = _words(r)
        if chars:
            ex.chars = model.tokenizer.tokenize(r.transcript).ids
        out.append(ex)
    return out


def _require_sources(records, allowed: set[str], system: str):
    for r in records:
        if r.transcript_source not in allowed:
            raise DataProvenanceError(
                f"{system} may only read {'/'.join(sorted(allowed))} transcripts; "
                f"record {r.id} has source {r.transcript_source!r}"
            )


def _build_table(cfg: SystemConfig, records) -> TextEmbedderTable:
    if cfg.text.table_path:
        return TextEmbedderTable.load(cfg.text.table_path, trainable=cfg.text.trainable)
    transcripts = [r.transcript for r in records if r.transcript]
    return TextEmbedderTable.build(transcripts, cfg.text.dim, derive_seed(cfg.seed, "text_table"), cfg.text.trainable)


# -- evaluation during training ------------------------------------------------------
def _eval_batches(examples: list[Example]) -> list[Batch]:
    return make_batches(examples, EVAL_BATCH, seed=None)


def _class_scores(model: SystemModel, examples: list[Example], zero_text: bool = False):
    """-> (ids, log-prob matrix) in example order."""
    pos = {e.record.id: i for i, e in enumerate(examples)}
    out = np.zeros((len(examples), model.num_classes))
    with nc.no_grad():
        for batch in _eval_batches(examples):
            lp = model.class_log_probs(batch, zero_text=zero_text).data
            out[[pos[i] for i in batch.ids]] = lp
    return [e.record.id for e in examples], out


def _dev_metrics(model: SystemModel, dev: list[Example] | None) -> dict:
    if not dev:
        return {}
    row = {}
    if model.classifier is not None:
        ids, lp = _class_scores(model, dev)
        labels = np.array([e.label for e in dev])
        preds = dict(zip(ids, lp.argmax(axis=1).tolist()))
        truth = dict(zip(ids, labels.tolist()))
        row["dev_loss"] = float(-lp[np.arange(len(dev)), labels].mean())
        row["dev_micro_f1"] = micro_f1(preds, truth)
        row["dev_uar"] = uar(preds, truth, model.num_classes)
    if model.decoder is not None and not (model.classifier is not None and model.cfg.stage == "finetune"):
        scored = [e for e in dev if e.record.transcript is not None]
        if scored:
            hyps = _decode(model, scored, model.cfg.decode.monitor_beam_size)
            row["dev_wer"] = corpus_wer([e.record.transcript for e in scored], [h for h, _ in hyps])
    return row


def _decode(model: SystemModel, examples: list[Example], beam_size: int) -> list[tuple[str, bool]]:
    pos = {e.record.id: i for i, e in enumerate(examples)}
    out: list = [None] * len(examples)
    max_len = model.cfg.decode.max_len
    for batch in _eval_batches(examples):
        if beam_size == 1:
            with nc.no_grad():
                states, enc_len, _ = model.encode_audio(batch)
            seqs = greedy_decode_batch(model.decoder, states.data, enc_len, max_len)
            texts = [(model.tokenizer.detokenize(s), True) for s in seqs]
        else:
            texts = model.transcribe(batch, beam_size, max_len)
        for i, t in zip(batch.ids, texts):
            out[pos[i]] = t
    return out


# -- training loop ----------------------------------------------------------------------
def _fit(model: SystemModel, train: list[Example], dev: list[Example] | None, recorder: RunRecorder,
         select_by_wer: bool = False) -> int | None:
    cfg = model.cfg
    if not train:
        raise ModalityError(f"{cfg.name}: no training records after data selection")
    recorder.train_ids = [e.record.id for e in train]
    opt = nc.make_optimizer(cfg.optimizer)
    best = (np.inf, None, None)
    best_f1, stale = -np.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = defaultdict(float)
        batches = make_batches(train, cfg.batch_size, seed=derive_seed(cfg.seed, f"batches:{cfg.stage}:{epoch}"))
        for step, batch in enumerate(batches, 1):
            model.params.zero_grad()
            bundle = model.loss(batch, epoch)
            bundle.total.backward()
            opt.step(model.params, skip=model.inactive_prefixes(epoch, bundle))
            recorder.log(format_log_line(epoch, step, bundle))
            for k, v in bundle.values().items():
                sums[k] += v
            sums["total"] += float(bundle.total.data)
        row = {"epoch": epoch, **{k: v / len(train) for k, v in sums.items()}}
        row.update(_dev_metrics(model, dev))
        recorder.epoch_done(row, model.params)
        log.info("%s epoch %d: %s", cfg.name, epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
        if select_by_wer and row.get("dev_wer", np.inf) < best[0]:
            best = (row["dev_wer"], epoch, {k: v.copy() for k, v in model.params.arrays().items()})
        if cfg.early_stopping_patience and "dev_micro_f1" in row:
            if row["dev_micro_f1"] > best_f1:
                best_f1, stale = row["dev_micro_f1"], 0
            else:
                stale += 1
                if stale >= cfg.early_stopping_patience:
                    log.info("early stop after epoch %d", epoch)
                    break
    if select_by_wer and best[1] is not None:
        model.params.load_arrays(best[2])
        return best[1]
    return None


def _finish(model, cfg, label_map, recorder, stage_tag, selected=None, asr=None) -> TrainedSystem:
    system = TrainedSystem(
        model, cfg, label_map, recorder.history, stage_tag, recorder.log_lines, recorder.provenance,
        selected_epoch=selected, asr=asr, train_ids=recorder.train_ids,
    )
    if recorder.run_dir:
        save_system(system, recorder.run_dir)
    return system


def _dev_examples(model: SystemModel, dev: CorpusView | None, chars: bool = False) -> list[Example] | None:
    if dev is None or len(dev) == 0:
        return None
    recs = list(dev.records)
    if model.needs_text:
        recs = [r for r in recs if r.transcript is not None]
    if chars:
        recs = [r for r in recs if r.transcript is not None or model.needs_audio]
    return _examples(model, recs, dev.label_map, None, "dev", text=model.needs_text)


# -- the systems ----------------------------------------------------------------------
def train_asr_standalone(corpus: CorpusView, cfg: SystemConfig, dev: CorpusView | None = None,
                         run_dir=None) -> TrainedSystem:
    cfg = replace(cfg, name="asr_standalone", stage="single")
    for r in corpus:
        if r.transcript_source == "none":
            raise ModalityError(f"asr_standalone needs transcripts; record {r.id} is untranscribed")
    _require_sources(corpus, {"manual"} | ({"asr"} if cfg.data.include_asr else set()), cfg.name)
    model = SystemModel(cfg, corpus.label_map.num_classes)
    rec = RunRecorder(run_dir, cfg.save_every_epoch, cfg)
    train = _examples(model, corpus, corpus.label_map, rec, "train", chars=True)
    _fit(model, train, _dev_examples(model, dev), rec)
    return _finish(model, cfg, corpus.label_map, rec, "trained")


def _asr_model(system: TrainedSystem) -> SystemModel:
    if system.model.decoder is None:
        raise ModalityError(f"{system.name} has no ASR head")
    return system.model


def generate_transcripts(system: TrainedSystem, corpus: CorpusView, beam_size: int | None = None,
                         only_missing: bool = False) -> CorpusView:
    """Copy of ``corpus`` with beam-search transcripts (source ``asr``).  Utterances that fail
    to decode get an empty transcript and are listed in ``flagged``.  With ``only_missing``
    records that already carry a transcript are kept unchanged."""
    model = _asr_model(system)
    beam = beam_size or system.config.decode.beam_size
    todo = [r for r in corpus if not (only_missing and r.transcript is not None)]
    texts = {}
    if todo:
        examples = _examples(model, todo, corpus.label_map, None, "decode", text=False)
        for e, (text, ok) in zip(examples, _decode(model, examples, beam)):
            texts[e.record.id] = (text, ok)
    records, flagged = [], []
    for r in corpus:
        if r.id in texts:
            text, ok = texts[r.id]
            if not ok:
                flagged.append(r.id)
            r = r.with_transcript(text, "asr")
        records.append(r)
    if flagged:
        log.warning("%d utterances failed to decode", len(flagged))
    out = corpus.with_records(records)
    out.flagged = flagged
    return out


def corrupt_transcripts(corpus: CorpusView, vocabulary: list[str], seed: int, source: str = "asr") -> CorpusView:
    """Replace every transcript with uniformly random tokens (same token count, at least 2)."""
    rng = np.random.default_rng(seed)
    records = []
    for r in corpus:
        n = max(len(text_tokens(r.transcript or "")), 2)
        records.append(r.with_transcript(" ".join(rng.choice(vocabulary, size=n)), source))
    return corpus.with_records(records)


TEXT_SOURCES = {"text_man_trn": {"manual"}, "text_semi_sup": {"manual", "asr"}, "text_pipeline": {"asr"}}


def _select_text_records(variant: str, view: CorpusView, asr_system: TrainedSystem | None) -> CorpusView:
    """Apply a text variant's source rules, transcribing with ``asr_system`` where allowed."""
    if variant == "text_man_trn":
        _require_sources([r for r in view if r.transcript_source != "none"], {"manual"}, variant)
        return view.with_records(r for r in view if r.transcript_source == "manual")
    if variant == "text_semi_sup":
        if any(r.transcript_source == "none" for r in view):
            if asr_system is None:
                missing = next(r.id for r in view if r.transcript_source == "none")
                raise DataProvenanceError(f"text_semi_sup: record {missing} is untranscribed and no ASR system was given")
            view = generate_transcripts(asr_system, view, only_missing=True)
        return view
    # pipeline: every transcript must come from ASR
    if any(r.transcript_source != "asr" for r in view):
        if asr_system is None:
            bad = next(r for r in view if r.transcript_source != "asr")
            raise DataProvenanceError(
                f"text_pipeline may only read asr transcripts; record {bad.id} has source "
                f"{bad.transcript_source!r} and no ASR system was given"
            )
        keep = [r for r in view if r.transcript_source == "asr"]
        redo = generate_transcripts(asr_system, view.with_records(r for r in view if r.transcript_source != "asr"))
        by_id = {r.id: r for r in keep + redo.records}
        view = view.with_records(by_id[r.id] for r in view)
    return view


def train_text_classifier(corpus: CorpusView, variant: str, cfg: SystemConfig, table: TextEmbedderTable | None = None,
                          dev: CorpusView | None = None, asr_system: TrainedSystem | None = None,
                          run_dir=None) -> TrainedSystem:
    if variant not in TEXT_SOURCES:
        raise ValueError(f"unknown text variant {variant!r}")
    cfg = replace(cfg, name=variant, stage="single")
    view = _select_text_records(variant, corpus, asr_system)
    table = table or _build_table(cfg, view)
    model = SystemModel(cfg, corpus.label_map.num_classes, table)
    rec = RunRecorder(run_dir, cfg.save_every_epoch, cfg)
    train = _examples(model, view, view.label_map, rec, "train")
    if dev is not None and variant == "text_pipeline":
        dev = _select_text_records(variant, dev, asr_system)
    _fit(model, train, _dev_examples(model, dev), rec)
    keep_asr = asr_system if variant in ("text_pipeline", "text_semi_sup") else None
    return _finish(model, cfg, corpus.label_map, rec, "trained", asr=keep_asr)


def train_audio_only(corpus: CorpusView, cfg: SystemConfig, init=None, dev: CorpusView | None = None,
                     run_dir=None) -> TrainedSystem:
    """All records, transcripts ignored.  ``init`` (ParameterSet or TrainedSystem) seeds the encoder."""
    if cfg.name not in ("audio_only", "emb_transfer"):
        cfg = replace(cfg, name="audio_only", stage="single")
    model = SystemModel(cfg, corpus.label_map.num_classes)
    if init is not None:
        src = init.params if isinstance(init, TrainedSystem) else init
        model.params.load_arrays(src.arrays(), prefix="encoder.")
    rec = RunRecorder(run_dir, cfg.save_every_epoch, cfg)
    train = _examples(model, corpus, corpus.label_map, rec, "train")
    _fit(model, train, _dev_examples(model, dev), rec)
    tag = "fine-tuned" if init is not None else "trained"
    return _finish(model, cfg, corpus.label_map, rec, tag)


def pretrain_embedding_transfer(corpus: CorpusView, cfg: SystemConfig, dev: CorpusView | None = None,
                                run_dir=None) -> TrainedSystem:
    cfg = replace(cfg, name="emb_transfer", stage="pretrain")
    allowed = {"manual"} | ({"asr"} if cfg.data.include_asr else set())
    view = corpus.with_records(r for r in corpus if r.transcript_source in allowed)
    model = SystemModel(cfg, corpus.label_map.num_classes, _build_table(cfg, view))
    rec = RunRecorder(run_dir, cfg.save_every_epoch, cfg)
    train = _examples(model, view, view.label_map, rec, "train", text=True)
    dev_ex = _dev_examples(model, dev)
    _fit(model, train, dev_ex, rec)
    return _finish(model, cfg, corpus.label_map, rec, "pretrained")


def finetune_embedding_transfer(pretrained: TrainedSystem, corpus: CorpusView, cfg: SystemConfig,
                                dev: CorpusView | None = None, run_dir=None) -> TrainedSystem:
    cfg = replace(cfg, name="emb_transfer", stage="finetune")
    return train_audio_only(corpus, cfg, init=pretrained, dev=dev, run_dir=run_dir)


def transfer_distances(system: TrainedSystem, corpus: CorpusView) -> dict[str, float]:
    """Mean per-utterance L1 of (projected audio vs text embedding) and (projected audio vs
    time-averaged fbank) over transcribed records of ``corpus``."""
    model = system.model
    if model.proj_up is None:
        raise ModalityError(f"{system.name} has no transfer projections")
    recs = [r for r in corpus if r.transcript]
    examples = _examples(model, recs, corpus.label_map, None, "probe", text=True)
    align = recon = 0.0
    with nc.no_grad():
        for batch in _eval_batches(examples):
            _, _, utt = model.encode_audio(batch)
            text = np.stack([model._table_embedding(w) for w in batch.words])
            align += float(linguistic_alignment_loss(utt, text, model.proj_up).data)
            recon += float(acoustic_reconstruction_loss(utt, batch.summaries, model.proj_down).data)
    return {"align_l1": align / len(examples), "recon_l1": recon / len(examples)}


def train_audio_text_concat(corpus: CorpusView, cfg: SystemConfig, dev: CorpusView | None = None,
                            run_dir=None, table: TextEmbedderTable | None = None) -> TrainedSystem:
    """Transcribed records only; classifier input concat(audio, text)."""
    name = cfg.name if cfg.name in ("audio_text_concat", "audio_text_bl") else "audio_text_concat"
    cfg = replace(cfg, name=name, stage="single")
    allowed = {"manual"} | ({"asr"} if cfg.data.include_asr else set())
    view = corpus.with_records(r for r in corpus if r.transcript_source in allowed)
    model = SystemModel(cfg, corpus.label_map.num_classes, table or _build_table(cfg, view))
    rec = RunRecorder(run_dir, cfg.save_every_epoch, cfg)
    train = _examples(model, view, view.label_map, rec, "train")
    _fit(model, train, _dev_examples(model, dev), rec)
    return _finish(model, cfg, corpus.label_map, rec, "trained")


def train_audio_baseline(corpus: CorpusView, cfg: SystemConfig, dev: CorpusView | None = None,
                         run_dir=None) -> TrainedSystem:
    cfg = replace(cfg, name="audio_bl", stage="single")
    model = SystemModel(cfg, corpus.label_map.num_classes)
    rec = RunRecorder(run_dir, cfg.save_every_epoch, cfg)
    train = _examples(model, corpus, corpus.label_map, rec, "train")
    _fit(model, train, _dev_examples(model, dev), rec)
    return _finish(model, cfg, corpus.label_map, rec, "trained")


def train_audio_text_baseline(corpus: CorpusView, cfg: SystemConfig, dev: CorpusView | None = None,
                              run_dir=None) -> TrainedSystem:
    return train_audio_text_concat(corpus, replace(cfg, name="audio_text_bl"), dev, run_dir)


def train_multi_task(corpus: CorpusView, cfg: SystemConfig, dev: CorpusView | None = None,
                     run_dir=None) -> TrainedSystem:
    """Stage 1: shared CRDNN feeding the topic head (with text) and the ASR head.
    The returned parameters are those of the epoch with the lowest dev WER."""
    cfg = replace(cfg, name="multi_task", stage="pretrain")
    view = corpus.with_records(r for r in corpus if r.transcript_source == "manual")
    model = SystemModel(cfg, corpus.label_map.num_classes, _build_table(cfg, view))
    rec = RunRecorder(run_dir, cfg.save_every_epoch, cfg)
    train = _examples(model, view, view.label_map, rec, "train", chars=True)
    selected = _fit(model, train, _dev_examples(model, dev), rec, select_by_wer=True)
    return _finish(model, cfg, corpus.label_map, rec, "pretrained", selected=selected)


def select_epoch(history: list[dict], key: str = "dev_wer") -> int:
    """1-based epoch with the smallest ``key``; earliest on ties."""
    values = [row.get(key, np.inf) for row in history]
    return int(np.argmin(values)) + 1


def finetune_multi_task(pretrained: TrainedSystem, corpus: CorpusView, cfg: SystemConfig,
                        dev: CorpusView | None = None, run_dir=None) -> TrainedSystem:
    """Stage 2: transcripts generated once for untranscribed records, then topic NLL only."""
    cfg = replace(cfg, name="multi_task", stage="finetune")
    full = generate_transcripts(pretrained, corpus, only_missing=True)
    missing = [r.id for r in full if r.transcript is None]
    if missing:
        raise ModalityError(f"multi_task finetune: records without transcripts: {missing[:10]}")
    model = SystemModel(cfg, corpus.label_map.num_classes, pretrained.model.table)
    model.params.load_arrays(pretrained.params.arrays())
    rec = RunRecorder(run_dir, cfg.save_every_epoch, cfg)
    train = _examples(model, full, full.label_map, rec, "train")
    _fit(model, train, _dev_examples(model, dev), rec)
    return _finish(model, cfg, corpus.label_map, rec, "fine-tuned")


def train_system(cfg: SystemConfig, corpus: CorpusView, init: TrainedSystem | None = None,
                 asr_system: TrainedSystem | None = None, run_dir=None) -> TrainedSystem:
    """Dispatch on ``cfg.name`` / ``cfg.stage`` using the train and dev splits of ``corpus``."""
    train, dev = corpus.split("train"), corpus.split("dev")
    name, stage = cfg.name, cfg.stage
    if name in ("emb_transfer", "multi_task") and stage == "finetune" and init is None:
        raise ValueError(f"{name} finetune needs an initial (pretrained) system")
    if name == "asr_standalone":
        return train_asr_standalone(train.with_records(r for r in train if r.transcript_source != "none"),
                                    cfg, dev, run_dir)
    if name in TEXT_SOURCES:
        return train_text_classifier(train, name, cfg, dev=dev, asr_system=asr_system, run_dir=run_dir)
    if name == "audio_only":
        return train_audio_only(train, cfg, init=init, dev=dev, run_dir=run_dir)
    if name == "emb_transfer":
        if stage == "finetune":
            return finetune_embedding_transfer(init, train, cfg, dev, run_dir)
        return pretrain_embedding_transfer(train, cfg, dev, run_dir)
    if name == "audio_text_concat":
        return train_audio_text_concat(train, cfg, dev, run_dir)
    if name == "multi_task":
        if stage == "finetune":
            return finetune_multi_task(init, train, cfg, dev, run_dir)
        return train_multi_task(train, cfg, dev, run_dir)
    if name == "audio_bl":
        return train_audio_baseline(train, cfg, dev, run_dir)
    return train_audio_text_baseline(train, cfg, dev, run_dir)


# -- inference ---------------------------------------------------------------------------
def _inference_view(system: TrainedSystem, corpus: CorpusView) -> CorpusView:
    """Fill in whatever transcripts the system needs for prediction."""
    model = system.model
    if not model.needs_text:
        return corpus
    if system.name == "text_pipeline":
        if all(r.transcript_source == "asr" for r in corpus):
            return corpus
        if system.asr is None:
            raise ModalityError("text_pipeline needs asr transcripts or an attached ASR system")
        redo = corpus.with_records(r for r in corpus if r.transcript_source != "asr")
        # inference always decodes with beam 10
        by_id = {r.id: r for r in generate_transcripts(system.asr, redo, beam_size=10)}
        return corpus.with_records(by_id.get(r.id, r) for r in corpus)
    if any(r.transcript is None for r in corpus):
        source = system if model.decoder is not None else system.asr
        if source is None:
            bad = next(r.id for r in corpus if r.transcript is None)
            raise ModalityError(f"{system.name} needs a transcript for {bad}")
        return generate_transcripts(source, corpus, only_missing=True)
    return corpus


def predict(system: TrainedSystem, corpus: CorpusView, zero_text: bool = False, split: str = "") -> PredictionSet:
    """Argmax topic per utterance (lowest index on ties)."""
    model = system.model
    if model.classifier is None:
        raise ModalityError(f"{system.name} has no topic classifier")
    view = _inference_view(system, corpus)
    examples = _examples(model, view, view.label_map, None, "predict")
    ids, lp = _class_scores(model, examples, zero_text=zero_text)
    hyps = {r.id: r.transcript for r in view} if model.needs_text else None
    split = split or (view.records[0].split if len(view) else "")
    return PredictionSet(system.name, split, dict(zip(ids, lp.argmax(axis=1).tolist())), hyps)


def class_log_probs(system: TrainedSystem, corpus: CorpusView) -> tuple[list[str], np.ndarray]:
    view = _inference_view(system, corpus)
    return _class_scores(system.model, _examples(system.model, view, view.label_map, None, "predict"))


def embed(system: TrainedSystem, corpus: CorpusView) -> tuple[list[str], np.ndarray]:
    """Utterance-level embeddings (the classifier input; audio embedding for pure ASR systems)."""
    model = system.model
    view = _inference_view(system, corpus)
    examples = _examples(model, view, view.label_map, None, "embed")
    pos = {e.record.id: i for i, e in enumerate(examples)}
    out = np.zeros((len(examples), model.embedding_dim), dtype=np.float32)
    with nc.no_grad():
        for batch in _eval_batches(examples):
            vec = model.classifier_input(batch) if model.classifier is not None else model.encode_audio(batch)[2]
            out[[pos[i] for i in batch.ids]] = vec.data
    return [e.record.id for e in examples], out


def dev_metrics(system: TrainedSystem, corpus: CorpusView) -> dict:
    """The per-epoch dev metrics recomputed for ``corpus`` with the current parameters."""
    return _dev_metrics(system.model, _dev_examples(system.model, corpus))


def transcribe(system: TrainedSystem, corpus: CorpusView, beam_size: int | None = None) -> dict[str, str]:
    view = generate_transcripts(system, corpus, beam_size)
    return {r.id: r.transcript for r in view}
