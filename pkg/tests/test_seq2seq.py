import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topicid import numcore as nc
from topicid.seq2seq import (
    ALPHABET,
    BLANK,
    UNK,
    AttentionDecoder,
    CharTokenizer,
    DecoderConfig,
    InfeasibleAlignmentError,
    beam_search,
    cer,
    corpus_wer,
    ctc_loss,
    ctc_loss_bruteforce,
    decode_utterance,
    edit_distance,
    greedy_decode_batch,
    greedy_search,
    wer,
)


def _log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _collapse(path, blank=0):
    out, last = [], None
    for k in path:
        if k != last and k != blank:
            out.append(k)
        last = k
    return tuple(out)


def _brute(lp, target):
    """Independent enumeration: sum of exp path scores in probability space."""
    steps, vocab = lp.shape
    total = 0.0
    for path in itertools.product(range(vocab), repeat=steps):
        if _collapse(path) == tuple(target):
            total += math.exp(sum(lp[t, k] for t, k in enumerate(path)))
    return -math.log(total)


# -- tokenizer ------------------------------------------------------------------------
def test_tokenize_empty():
    tok = CharTokenizer()
    seq = tok.tokenize("")
    assert len(seq) == 0 and tok.detokenize(seq) == ""


def test_tokenize_round_trip():
    tok = CharTokenizer()
    seq = tok.tokenize("ab a")
    assert len(seq) == 4
    assert tok.detokenize(seq) == "ab a"


def test_one_unknown_glyph():
    tok = CharTokenizer()
    seq = tok.tokenize("café ok")
    assert seq.ids.count(UNK) == 1
    assert tok.unknown_counts == {"é": 1}


@given(st.text(alphabet=ALPHABET, max_size=40))
def test_tokenize_round_trip_property(text):
    tok = CharTokenizer()
    assert tok.detokenize(tok.tokenize(text)) == text


# -- CTC ----------------------------------------------------------------------------------
def test_ctc_single_frame():
    lp = np.log(np.array([[0.1, 0.6, 0.3]]))
    assert float(ctc_loss(lp, [1]).data) == pytest.approx(-math.log(0.6), abs=1e-9)


def test_ctc_two_frames_by_hand():
    p = np.array([[0.3, 0.7], [0.6, 0.4]])  # columns: blank, a
    expected = p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1]
    got = float(ctc_loss(np.log(p), [1]).data)
    assert got == pytest.approx(-math.log(expected), abs=1e-6)
    assert got == pytest.approx(_brute(np.log(p), [1]), abs=1e-6)


@pytest.mark.parametrize("seed", range(100))
def test_ctc_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    steps, vocab = int(rng.integers(1, 7)), int(rng.integers(2, 5))
    length = int(rng.integers(0, 4))
    target = rng.integers(1, vocab, size=length).tolist()
    repeats = sum(a == b for a, b in zip(target, target[1:]))
    lp = _log_softmax(rng.standard_normal((steps, vocab)) * 2)
    if length + repeats > steps:
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(lp, target)
        return
    got = float(ctc_loss(lp, target).data)
    assert got == pytest.approx(_brute(lp, target), abs=1e-6)
    assert got == pytest.approx(ctc_loss_bruteforce(lp, target), abs=1e-6)


def test_ctc_batch_is_sum_of_singles():
    rng = np.random.default_rng(5)
    lp = _log_softmax(rng.standard_normal((2, 6, 4)))
    targets, lengths = [[1, 2], [3]], [6, 4]
    batch = float(ctc_loss(lp, targets, lengths).data)
    singles = sum(float(ctc_loss(lp[b, : lengths[b]], targets[b]).data) for b in range(2))
    assert batch == pytest.approx(singles, abs=1e-6)


# -- attention decoder -------------------------------------------------------------------
def _decoder(vocab=6, enc_dim=5, seed=0):
    cfg = DecoderConfig(embed_dim=4, hidden=8, attention_dim=6)
    return AttentionDecoder(nc.ParameterSet(), "dec", vocab, enc_dim, cfg, np.random.default_rng(seed))


def test_attention_weights_normalised():
    dec = _decoder()
    enc = np.random.default_rng(1).standard_normal((2, 7, 5)).astype(np.float32)
    with nc.no_grad():
        mem = dec.memory(enc, [7, 4])
        _, logp, w = dec.step(dec.initial_state(mem), mem, [1, 1])
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(np.exp(logp.data).sum(axis=1), 1.0, atol=1e-5)
    assert np.all(w.data[1, 4:] < 1e-12)


def test_attention_single_frame():
    dec = _decoder()
    with nc.no_grad():
        mem = dec.memory(np.ones((1, 1, 5), np.float32), [1])
        _, _, w = dec.step(dec.initial_state(mem), mem, [1])
    assert w.data[0, 0] == 1.0


# -- search -----------------------------------------------------------------------------------
def _toy_step(dec, enc):
    with nc.no_grad():
        mem = dec.memory(enc[None], [enc.shape[0]])
        h0 = dec.initial_state(mem).data

    def step(states, prev):
        k = states.shape[0]
        rep = type(mem)(
            nc.as_tensor(np.repeat(mem.states.data, k, 0)), nc.as_tensor(np.repeat(mem.proj.data, k, 0)),
            np.repeat(mem.mask, k, 0),
        )
        with nc.no_grad():
            h, logp, _ = dec.step(nc.as_tensor(states), rep, prev)
        return h.data, logp.data

    return step, h0


def _exhaustive(step, h0, vocab, max_len, bos, eos):
    best = (-np.inf, None)
    for n in range(1, max_len + 1):
        for body in itertools.product([v for v in range(vocab) if v != eos], repeat=n - 1):
            seq = list(body) + [eos]
            state, prev, score = h0, np.array([bos]), 0.0
            for tok in seq:
                state, lp = step(state, prev)
                score += float(lp[0, tok])
                prev = np.array([tok])
            best = max(best, (score, seq), key=lambda x: x[0])
    return best


@pytest.mark.parametrize("seed", range(20))
def test_beam_equals_exhaustive(seed):
    vocab, max_len, bos, eos = 4, 3, 0, 3
    dec = _decoder(vocab=vocab, seed=seed)
    # sharpen and discourage eos so the optimum is often longer than one token
    dec.out.weight.data *= 3
    dec.out.bias.data[eos] -= 2.5
    step, h0 = _toy_step(dec, np.random.default_rng(seed + 100).standard_normal((5, 5)).astype(np.float32))
    hyp = beam_search(step, h0, beam_size=vocab**max_len, max_len=max_len, bos=bos, eos=eos)
    score, seq = _exhaustive(step, h0, vocab, max_len, bos, eos)
    assert hyp.finished
    assert hyp.ids == seq
    assert hyp.log_prob == pytest.approx(score, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_is_greedy(seed):
    dec = _decoder(vocab=8, seed=seed)
    step, h0 = _toy_step(dec, np.random.default_rng(seed).standard_normal((4, 5)).astype(np.float32))
    a = beam_search(step, h0, beam_size=1, max_len=12, bos=0, eos=3)
    b = greedy_search(step, h0, max_len=12, bos=0, eos=3)
    assert a.ids == b.ids and a.finished == b.finished
    assert a.log_prob == pytest.approx(b.log_prob)


def test_fixed_chain_returns_argmax():
    target = [5, 6, 4, 2]
    table = np.full((len(target), 7), np.log(0.05))
    for t, tok in enumerate(target):
        table[t, tok] = np.log(0.7)

    def step(states, prev):
        t = states[:, 0].astype(int)
        return states + 1, table[np.minimum(t, len(target) - 1)]

    hyp = beam_search(step, np.zeros((1, 1)), beam_size=5, max_len=10, bos=0, eos=2)
    assert hyp.ids == target and hyp.finished


def test_beam_rejects_zero_width():
    with pytest.raises(ValueError):
        beam_search(lambda s, p: (s, np.zeros((1, 3))), np.zeros((1, 1)), 0, 3)


def test_batched_greedy_matches_single():
    dec = _decoder(vocab=CharTokenizer().vocab_size)
    rng = np.random.default_rng(3)
    enc = rng.standard_normal((2, 6, 5)).astype(np.float32)
    batch = greedy_decode_batch(dec, enc, [6, 4], max_len=8)
    for b, n in enumerate([6, 4]):
        single = decode_utterance(dec, enc[b, :n], beam_size=1, max_len=8)
        ids = [i for i in single.ids if i != 2]
        assert batch[b] == ids
    assert all(BLANK not in ids for ids in batch)


# -- error rates ------------------------------------------------------------------------------
def test_error_rate_examples():
    assert wer("a b c", "a b c") == 0.0
    assert wer("a b c", "a c") == pytest.approx(100 / 3, abs=0.005)
    assert round(wer("a b c", "a c"), 2) == 33.33
    assert cer("ab", "ba") == 100.0
    assert corpus_wer(["a b", "c d e f"], ["a", "c d e f"]) == pytest.approx(100 / 6)
    with pytest.raises(ValueError):
        wer("", "a")


words = st.lists(st.sampled_from("abcd"), max_size=7)


@settings(max_examples=200)
@given(words, words, words)
def test_edit_distance_is_metric(a, b, c):
    assert edit_distance(a, a) == 0
    assert edit_distance(a, b) == edit_distance(b, a)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    assert abs(len(a) - len(b)) <= edit_distance(a, b) <= max(len(a), len(b))
