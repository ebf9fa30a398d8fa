"""ASR head: character tokenizer, CTC, attention GRU decoder, search, error rates."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import GRUCell, Linear, ParameterSet, Tensor
from .numcore.tensor import _node

ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 '"
SPECIALS = ("<blank>", "<bos>", "<eos>", "<unk>")
BLANK, BOS, EOS, UNK = range(4)


class InfeasibleAlignmentError(ValueError):
    pass


@dataclass
class TokenSequence:
    ids: list[int]
    tokenizer: str = "char"

    def __len__(self):
        return len(self.ids)


class CharTokenizer:
    """Characters of ``ALPHABET`` plus reserved blank/bos/eos/unk ids.

    Out-of-alphabet characters map to ``<unk>`` and are tallied in
    ``unknown_counts``.
    """

    tag = "char"

    def __init__(self, alphabet: str = ALPHABET):
        self.alphabet = alphabet
        self.symbols = list(SPECIALS) + list(alphabet)
        self.index = {c: i for i, c in enumerate(self.symbols) if i >= len(SPECIALS)}
        self.unknown_counts: dict[str, int] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    def tokenize(self, text: str) -> TokenSequence:
        ids = []
        for ch in text:
            i = self.index.get(ch)
            if i is None:
                self.unknown_counts[ch] = self.unknown_counts.get(ch, 0) + 1
                i = UNK
            ids.append(i)
        return TokenSequence(ids, self.tag)

    def detokenize(self, seq) -> str:
        ids = seq.ids if isinstance(seq, TokenSequence) else seq
        out = []
        for i in ids:
            if i in (BLANK, BOS, EOS):
                continue
            out.append("?" if i == UNK else self.symbols[i])
        return "".join(out)


# -- CTC ---------------------------------------------------------------------------
def _collapse(path, blank=BLANK) -> tuple:
    return tuple(k for k, _ in itertools.groupby(path) if k != blank)


def ctc_min_frames(target) -> int:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _logsumexp(*xs):
    m = np.maximum.reduce(xs)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(sum(np.exp(x - safe) for x in xs))


def _shift_right(a, k):
    out = np.full_like(a, -np.inf)
    if k < a.shape[1]:
        out[:, k:] = a[:, : a.shape[1] - k]
    return out


def _shift_left(a, k):
    out = np.full_like(a, -np.inf)
    if k < a.shape[1]:
        out[:, : a.shape[1] - k] = a[:, k:]
    return out


def ctc_loss(log_probs, targets, lengths=None, blank: int = BLANK) -> Tensor:
    """Negative log-likelihood of ``targets`` under CTC, summed over the batch.

    ``log_probs`` is (T, V) for one utterance or (B, T, V) with ``lengths``.
    ``targets`` is one id sequence or a list of them.  Raises
    :class:`InfeasibleAlignmentError` if an utterance has too few frames.
    """
    lp = nc.as_tensor(log_probs)
    single = lp.ndim == 2
    if single:
        lp_data = lp.data[None]
        targets = [list(targets)]
        lengths = [lp.shape[0]]
    else:
        lp_data = lp.data
        if lengths is None:
            lengths = [lp.shape[1]] * lp.shape[0]
    x = lp_data.astype(np.float64)
    batch, steps, vocab = x.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    for b, tgt in enumerate(targets):
        need = ctc_min_frames(tgt)
        if lengths[b] < need:
            raise InfeasibleAlignmentError(f"utterance {b}: {lengths[b]} frames cannot emit {len(tgt)} labels (need {need})")
    s_max = 2 * max(len(t) for t in targets) + 1
    ext = np.full((batch, s_max), blank, dtype=np.int64)
    s_len = np.zeros(batch, dtype=np.int64)
    allow_skip = np.zeros((batch, s_max), dtype=bool)
    for b, tgt in enumerate(targets):
        ext[b, 1 : 2 * len(tgt) : 2] = tgt
        s_len[b] = 2 * len(tgt) + 1
        for s in range(3, s_len[b], 2):
            allow_skip[b, s] = ext[b, s] != ext[b, s - 2]
    valid_s = np.arange(s_max)[None, :] < s_len[:, None]
    emit = np.take_along_axis(x, np.broadcast_to(ext[:, None, :], (batch, steps, s_max)), axis=2)
    emit = np.where(valid_s[:, None, :], emit, -np.inf)
    neg = -np.inf

    alpha = np.full((batch, steps, s_max), neg)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 0, 1] = np.where(s_len > 1, emit[:, 0, 1], neg)
    for t in range(1, steps):
        prev = alpha[:, t - 1]
        shift1 = _shift_right(prev, 1)
        shift2 = np.where(allow_skip, _shift_right(prev, 2), neg)
        new = _logsumexp(prev, shift1, shift2) + emit[:, t]
        alpha[:, t] = np.where((t < lengths)[:, None], new, prev)

    rows = np.arange(batch)
    last = alpha[rows, steps - 1]
    end_a = last[rows, s_len - 1]
    end_b = np.where(s_len > 1, last[rows, np.maximum(s_len - 2, 0)], neg)
    log_like = _logsumexp(end_a, end_b)

    # beta excludes the emission at t
    beta_init = np.full((batch, s_max), neg)
    beta_init[rows, s_len - 1] = 0.0
    beta_init[rows, np.maximum(s_len - 2, 0)] = np.where(s_len > 1, 0.0, beta_init[rows, np.maximum(s_len - 2, 0)])
    beta = np.full((batch, steps, s_max), neg)
    beta[:, steps - 1] = beta_init
    for t in range(steps - 2, -1, -1):
        nxt = beta[:, t + 1] + emit[:, t + 1]
        shift1 = _shift_left(nxt, 1)
        skip_from = _shift_left(np.where(allow_skip, 0.0, neg), 2)
        shift2 = _shift_left(nxt, 2) + skip_from
        new = _logsumexp(nxt, shift1, shift2)
        beta[:, t] = np.where((t >= lengths - 1)[:, None], beta_init, new)

    loss = -float(log_like.sum())

    def backward(g):
        occupancy = np.exp(alpha + beta - log_like[:, None, None])
        occupancy = np.where(np.isfinite(occupancy), occupancy, 0.0)
        occupancy *= (np.arange(steps)[None, :] < lengths[:, None])[:, :, None]
        grad = np.zeros_like(x)
        for b in range(batch):
            np.add.at(grad[b].T, ext[b, : s_len[b]], occupancy[b, :, : s_len[b]].T)
        grad = -float(g) * grad
        grad = grad.astype(lp.dtype)
        return (grad[0] if single else grad,)

    return _node(np.asarray(loss, dtype=lp.dtype), (lp,), backward)


def ctc_loss_bruteforce(log_probs: np.ndarray, target, blank: int = BLANK) -> float:
    """-log P(target) by enumerating every frame-level path (V^T of them)."""
    steps, vocab = log_probs.shape
    target = tuple(target)
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=steps):
        if _collapse(path, blank) == target:
            total = np.logaddexp(total, sum(log_probs[t, k] for t, k in enumerate(path)))
    return float(-total)


# -- attention decoder ----------------------------------------------------------------
@dataclass
class DecoderConfig:
    embed_dim: int = 32
    hidden: int = 128
    attention_dim: int = 64


@dataclass
class EncoderMemory:
    states: Tensor  # (B, T', E)
    proj: Tensor  # (B, T', A)
    mask: np.ndarray  # (B, T')
    additive_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.additive_mask = (self.mask - 1.0) * 1e9


class AttentionDecoder:
    """Additive (content-based) attention over encoder frames feeding a GRU cell."""

    def __init__(self, params: ParameterSet, name: str, vocab_size: int, enc_dim: int, cfg: DecoderConfig, rng):
        self.vocab_size = vocab_size
        self.cfg = cfg
        self.embed = params.add(
            f"{name}.embed", nc.glorot_uniform(rng, vocab_size, cfg.embed_dim, (vocab_size, cfg.embed_dim))
        )
        self.att_enc = Linear(params, f"{name}.att_enc", enc_dim, cfg.attention_dim, rng)
        self.att_dec = Linear(params, f"{name}.att_dec", cfg.hidden, cfg.attention_dim, rng, bias=False)
        self.att_v = params.add(
            f"{name}.att_v", nc.glorot_uniform(rng, cfg.attention_dim, 1, (cfg.attention_dim, 1))
        )
        self.init = Linear(params, f"{name}.init", enc_dim, cfg.hidden, rng)
        self.cell = GRUCell(params, f"{name}.gru", cfg.embed_dim + enc_dim, cfg.hidden, rng)
        self.out = Linear(params, f"{name}.out", cfg.hidden + enc_dim, vocab_size, rng)

    def memory(self, enc_states, lengths) -> EncoderMemory:
        states = nc.as_tensor(enc_states)
        mask = (np.arange(states.shape[1])[None, :] < np.asarray(lengths)[:, None]).astype(states.dtype)
        return EncoderMemory(states, self.att_enc(states), mask)

    def initial_state(self, mem: EncoderMemory) -> Tensor:
        return nc.tanh(self.init(nc.masked_mean(mem.states, mem.mask)))

    def attend(self, h: Tensor, mem: EncoderMemory):
        query = self.att_dec(h)
        k = query.shape[0]
        energy = nc.tanh(mem.proj + query.reshape(k, 1, query.shape[-1])) @ self.att_v
        scores = energy.reshape(k, energy.shape[1]) + mem.additive_mask
        weights = nc.softmax(scores, axis=-1)
        context = nc.tsum(weights.reshape(k, weights.shape[1], 1) * mem.states, axis=1)
        return context, weights

    def step(self, h: Tensor, mem: EncoderMemory, prev_tokens):
        """One decoder step -> (next state, log-probs (B, V), attention weights (B, T'))."""
        context, weights = self.attend(h, mem)
        emb = nc.getitem(self.embed, np.asarray(prev_tokens, dtype=np.int64))
        h_new = self.cell(nc.concat([emb, context], axis=-1), h)
        logits = self.out(nc.concat([h_new, context], axis=-1))
        return h_new, nc.log_softmax(logits, axis=-1), weights

    def forced_loss(self, mem: EncoderMemory, targets) -> tuple[Tensor, int]:
        """Teacher-forced token NLL (targets followed by eos), summed over tokens."""
        batch = len(targets)
        steps = max(len(t) for t in targets) + 1
        inputs = np.full((batch, steps), EOS, dtype=np.int64)
        outputs = np.full((batch, steps), EOS, dtype=np.int64)
        tok_mask = np.zeros((batch, steps), dtype=np.float32)
        for b, tgt in enumerate(targets):
            inputs[b, 0] = BOS
            inputs[b, 1 : len(tgt) + 1] = tgt
            outputs[b, : len(tgt)] = tgt
            tok_mask[b, : len(tgt) + 1] = 1.0
        h = self.initial_state(mem)
        picked = []
        rows = np.arange(batch)
        for t in range(steps):
            h, logp, _ = self.step(h, mem, inputs[:, t])
            picked.append(nc.getitem(logp, (rows, outputs[:, t])))
        gathered = nc.stack(picked, axis=1)
        return -nc.tsum(gathered * tok_mask), int(tok_mask.sum())


def attn_decode_step(decoder: AttentionDecoder, state: Tensor, memory: EncoderMemory, prev_token):
    return decoder.step(state, memory, prev_token)


# -- search ----------------------------------------------------------------------------
@dataclass
class Hypothesis:
    ids: list[int]
    log_prob: float
    finished: bool

    def __post_init__(self):
        if not np.isfinite(self.log_prob):
            raise ValueError("hypothesis log-prob must be finite")


def greedy_search(step_fn, init_state, max_len: int, bos: int = BOS, eos: int = EOS, banned=()) -> Hypothesis:
    state, prev, ids, score = init_state, np.array([bos]), [], 0.0
    for _ in range(max_len):
        state, logp = step_fn(state, prev)
        logp = np.array(logp[0], dtype=np.float64)
        logp[list(banned)] = -np.inf
        tok = int(np.argmax(logp))
        score += float(logp[tok])
        ids.append(tok)
        if tok == eos:
            return Hypothesis(ids, score, True)
        prev = np.array([tok])
    return Hypothesis(ids, score, False)


def beam_search(step_fn, init_state, beam_size: int, max_len: int, bos: int = BOS, eos: int = EOS,
                banned=(), select=None, length_normalize: bool = False) -> Hypothesis:
    """Length-bounded beam search without length normalisation by default.

    ``step_fn(states, prev_tokens)`` returns (new_states, log_probs (K, V)) for
    K live hypotheses; ``select(states, rows)`` gathers states (defaults to
    row indexing).  Returns the best finished hypothesis, or the best
    unfinished one (``finished=False``) if none ends within ``max_len``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    select = select or (lambda s, rows: s[rows])
    scores = np.zeros(1)
    seqs: list[list[int]] = [[]]
    state, prev = init_state, np.array([bos])
    finished: list[Hypothesis] = []

    def rank(h: Hypothesis) -> float:
        return h.log_prob / max(len(h.ids), 1) if length_normalize else h.log_prob

    for _ in range(max_len):
        new_state, logp = step_fn(state, prev)
        logp = np.array(logp, dtype=np.float64)
        if banned:
            logp[:, list(banned)] = -np.inf
        vocab = logp.shape[1]
        cand = (scores[:, None] + logp).ravel()
        order = np.argsort(-cand, kind="stable")[:beam_size]
        keep_rows, keep_tok, keep_scores = [], [], []
        for idx in order:
            if not np.isfinite(cand[idx]):
                break
            row, tok = divmod(int(idx), vocab)
            if tok == eos:
                finished.append(Hypothesis(seqs[row] + [tok], float(cand[idx]), True))
            else:
                keep_rows.append(row)
                keep_tok.append(tok)
                keep_scores.append(cand[idx])
        if not keep_rows:
            break
        best_done = max((h.log_prob for h in finished), default=-np.inf)
        if not length_normalize and best_done >= max(keep_scores):
            break
        seqs = [seqs[r] + [t] for r, t in zip(keep_rows, keep_tok)]
        scores = np.array(keep_scores)
        state = select(new_state, np.array(keep_rows))
        prev = np.array(keep_tok)
    if finished:
        return max(finished, key=rank)
    best = int(np.argmax(scores))
    return Hypothesis(seqs[best], float(scores[best]), False)


def decoder_step_fn(decoder: AttentionDecoder, mem: EncoderMemory):
    """Adapt a decoder + single-utterance memory to the ``step_fn`` protocol (numpy states)."""

    def step(states, prev):
        with nc.no_grad():
            h, logp, _ = decoder.step(nc.as_tensor(states), mem, prev)
        return h.data, logp.data

    return step


def decode_utterance(decoder: AttentionDecoder, enc_states: np.ndarray, beam_size: int = 10,
                     max_len: int = 100, length_normalize: bool = False) -> Hypothesis:
    with nc.no_grad():
        mem = decoder.memory(enc_states[None], [enc_states.shape[0]])
        h0 = decoder.initial_state(mem).data
    step = decoder_step_fn(decoder, mem)
    banned = (BLANK, BOS, UNK)
    if beam_size == 1:
        return greedy_search(step, h0, max_len, banned=banned)
    return beam_search(step, h0, beam_size, max_len, banned=banned, length_normalize=length_normalize)


def greedy_decode_batch(decoder: AttentionDecoder, enc_states, lengths, max_len: int) -> list[list[int]]:
    """Batched greedy decoding (used for per-epoch monitoring)."""
    with nc.no_grad():
        mem = decoder.memory(enc_states, lengths)
        h = decoder.initial_state(mem)
        batch = h.shape[0]
        prev = np.full(batch, BOS)
        out = [[] for _ in range(batch)]
        done = np.zeros(batch, dtype=bool)
        for _ in range(max_len):
            h, logp, _ = decoder.step(h, mem, prev)
            lp = logp.data.copy()
            lp[:, [BLANK, BOS, UNK]] = -np.inf
            prev = lp.argmax(axis=1)
            for b in np.flatnonzero(~done):
                if prev[b] == EOS:
                    done[b] = True
                else:
                    out[b].append(int(prev[b]))
            if done.all():
                break
    return out


# -- error rates ---------------------------------------------------------------------
def edit_distance(ref, hyp) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref, hyp) -> float:
    """Word error rate in percent; strings are split on whitespace."""
    ref = ref.split() if isinstance(ref, str) else list(ref)
    hyp = hyp.split() if isinstance(hyp, str) else list(hyp)
    if not ref:
        raise ValueError("reference is empty")
    return 100.0 * edit_distance(ref, hyp) / len(ref)


def cer(ref: str, hyp: str) -> float:
    if not ref:
        raise ValueError("reference is empty")
    return 100.0 * edit_distance(list(ref), list(hyp)) / len(ref)


def corpus_wer(refs, hyps) -> float:
    """Total word edits over total reference words, in percent."""
    errors = words = 0
    for r, h in zip(refs, hyps):
        errors += edit_distance(r.split(), h.split())
        words += len(r.split())
    if words == 0:
        raise ValueError("references are empty")
    return 100.0 * errors / words


def write_hypotheses(path, rows):
    """rows: (utterance id, text, log-prob)."""
    with open(path, "w", encoding="utf-8") as fh:
        for uid, text, lp in rows:
            fh.write(f"{uid}\t{text}\t{lp:.6f}\n")
