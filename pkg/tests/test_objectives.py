import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from topicid import numcore as nc
from topicid.encoders import AudioEncoderConfig, CRDNNEncoder, Projection, TextEmbedderTable, pad_batch
from topicid.objectives import (
    BatchTargets,
    CtcSchedule,
    acoustic_reconstruction_loss,
    format_log_line,
    interpolate,
    l1_loss,
    linguistic_alignment_loss,
    merge_bundles,
    nll_loss,
    parse_log_line,
)
from topicid.systems import DEFAULT_STORE


def _t(x):
    return nc.as_tensor(np.float64(x))


# -- nll ----------------------------------------------------------------------------------
def test_nll_perfect_is_zero():
    lp = np.log(np.array([[1.0, 1e-300], [1e-300, 1.0]]))
    assert float(nll_loss(lp, [0, 1]).data) == pytest.approx(0.0, abs=1e-12)


def test_nll_uniform_eight():
    lp = np.full((1, 8), -math.log(8))
    assert float(nll_loss(lp, BatchTargets([3], 8)).data) == pytest.approx(2.07944, abs=1e-5)


def test_nll_two_samples():
    lp = np.log(np.array([[0.5, 0.5, 0.0 + 1e-300], [0.25, 0.5, 0.25]]))
    assert float(nll_loss(lp, [0, 2]).data) == pytest.approx(math.log(8), abs=1e-9)
    assert float(nll_loss(lp, [0, 2], reduction="mean").data) == pytest.approx(math.log(8) / 2)


def test_nll_errors():
    with pytest.raises(nc.ShapeError):
        nll_loss(np.zeros((2, 3)), [0])
    with pytest.raises(IndexError):
        nll_loss(np.zeros((1, 3)), [3])
    with pytest.raises(ValueError):
        BatchTargets([5], num_classes=4)


# -- l1 -----------------------------------------------------------------------------------
def test_l1_examples():
    assert float(l1_loss([[1.0, 2.0]], [[0.0, 0.0]]).data) == 3.0
    assert float(l1_loss([[1.0, 2.0]], [[1.0, 2.0]]).data) == 0.0


vectors = hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-1e3, 1e3))


@given(vectors, st.data())
def test_l1_properties(a, data):
    k = data.draw(hnp.arrays(np.float64, a.shape, elements=st.floats(-1e3, 1e3)))
    v = float(l1_loss(a, k).data)
    assert v == pytest.approx(np.abs(a - k).sum())
    assert float(l1_loss(-a, -k).data) == pytest.approx(v)
    assert float(l1_loss(k, a).data) == pytest.approx(v)
    assert v >= 0


def test_l1_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        l1_loss(np.zeros((2, 3)), np.zeros((2, 4)))


def test_alignment_zero_case():
    params = nc.ParameterSet()
    up = Projection(params, "up", 5, 7, np.random.default_rng(0))
    up.weight.data[...] = 0
    emb = np.random.default_rng(1).standard_normal((3, 5))
    assert float(linguistic_alignment_loss(emb, np.zeros((3, 7)), up).data) == 0.0


def test_reconstruction_is_l1_with_down_projection():
    params = nc.ParameterSet()
    rng = np.random.default_rng(0)
    down = Projection(params, "down", 6, 40, rng)
    emb, summ = rng.standard_normal((2, 6)), rng.standard_normal((2, 40))
    expected = np.abs(emb @ down.weight.data + down.bias.data - summ).sum()
    assert float(acoustic_reconstruction_loss(emb, summ, down).data) == pytest.approx(expected, rel=1e-5)
    assert down.out_dim == 40


def test_alignment_does_not_train_text_side():
    params = nc.ParameterSet()
    up = Projection(params, "up", 3, 4, np.random.default_rng(0))
    text = nc.Tensor(np.ones((2, 4)), requires_grad=True)
    linguistic_alignment_loss(np.ones((2, 3)), text, up).backward()
    assert text.grad is None
    assert up.weight.grad is not None


def overfit_curve(records, target: str, steps: int = 150, seed: int = 0):
    """Train a tiny CRDNN plus one projection on ``records`` against one L1 target.

    Returns (initial loss, final loss) on the same fixed batch.
    """
    rng = np.random.default_rng(seed)
    params = nc.ParameterSet()
    cfg = AudioEncoderConfig(conv_channels=(4, 4), rnn_hidden=16, dense_width=32)
    enc = CRDNNEncoder(params, "encoder", cfg, rng)
    feats, summaries = zip(*(DEFAULT_STORE.get(r) for r in records))
    x, lengths = pad_batch(list(feats))
    if target == "text":
        table = TextEmbedderTable.build([r.transcript for r in records], dim=16, seed=seed)
        goal = np.stack([table.matrix[table.ids(r.transcript.split())].mean(axis=0) for r in records])
        proj = Projection(params, "proj_up", cfg.embedding_dim, 16, rng)
        loss_fn = linguistic_alignment_loss
    else:
        goal = np.stack(summaries)
        proj = Projection(params, "proj_down", cfg.embedding_dim, 40, rng)
        loss_fn = acoustic_reconstruction_loss
    opt = nc.make_optimizer(nc.OptimizerConfig(lr=3e-3))
    curve = []
    for _ in range(steps + 1):
        params.zero_grad()
        _, _, utt = enc(x, lengths)
        loss = loss_fn(utt, goal, proj)
        curve.append(float(loss.data))
        loss.backward()
        opt.step(params)
    return curve[0], curve[-1]


@pytest.mark.parametrize("target", ["text", "fbank"])
def test_overfit_five_utterances(small, target):
    records = [r for r in small.split("train") if r.transcript is not None][:5]
    start, end = overfit_curve(records, target, steps=300)
    assert end < 0.1 * start


# -- interpolation ----------------------------------------------------------------------
def test_equal_mode_sums():
    b = interpolate({"a": _t(1.0), "b": _t(2.0), "c": _t(3.0)}, "equal")
    assert float(b.total.data) == 6.0
    assert b.weights == {"a": 1.0, "b": 1.0, "c": 1.0}


def test_equal_mode_mean_weights():
    b = interpolate({"a": _t(1.0), "b": _t(2.0), "c": _t(3.0)}, "equal", mean_weights=True)
    assert float(b.total.data) == pytest.approx(2.0)


@pytest.mark.parametrize("epoch, ctc, s2s, expected", [(21, 5.0, 2.0, 2.0), (20, 4.0, 2.0, 3.0), (1, 4.0, 2.0, 3.0)])
def test_ctc_schedule(epoch, ctc, s2s, expected):
    b = interpolate({"ctc": _t(ctc), "seq2seq": _t(s2s)}, CtcSchedule(), epoch=epoch)
    assert float(b.total.data) == pytest.approx(expected)
    assert ("ctc" in b.components) == (epoch <= 20)


def test_ctc_schedule_needs_epoch():
    with pytest.raises(ValueError):
        interpolate({"ctc": _t(1.0), "seq2seq": _t(1.0)}, CtcSchedule())


def test_interpolate_rejects_bad_modes():
    with pytest.raises(ValueError):
        interpolate({"a": _t(1.0)}, "geometric")
    with pytest.raises(ValueError):
        interpolate({"a": _t(1.0)}, {"a": -1.0})


@settings(max_examples=50)
@given(st.dictionaries(st.sampled_from("abcdef"), st.floats(0, 100), min_size=1),
       st.dictionaries(st.sampled_from("abcdef"), st.floats(0, 5), min_size=6))
def test_weighted_total_is_dot_product(values, weights):
    b = interpolate({k: _t(v) for k, v in values.items()}, weights)
    assert float(b.total.data) == pytest.approx(sum(weights[k] * v for k, v in values.items()))


def test_merge_bundles_flattens_weights():
    inner = interpolate({"ctc": _t(4.0), "seq2seq": _t(2.0)}, CtcSchedule(), epoch=3)
    merged = merge_bundles({"topic_nll": 1.0, "asr": 1.0}, {"asr": inner}, {"topic_nll": _t(1.5)})
    assert merged.weights == {"topic_nll": 1.0, "ctc": 0.5, "seq2seq": 0.5}
    assert float(merged.total.data) == pytest.approx(1.5 + 3.0)


def test_log_line_round_trip():
    b = interpolate({"nll": _t(2.0), "align_l1": _t(1.0), "recon_l1": _t(4.0)}, "equal",
                    counts={"nll": 2, "align_l1": 2, "recon_l1": 2})
    fields = parse_log_line(format_log_line(3, 7, b))
    assert fields["epoch"] == "3" and fields["step"] == "7"
    assert float(fields["total"]) == 7.0
    assert float(fields["recon_l1_mean"]) == 2.0
    assert list(fields)[2:5] == ["nll", "w_nll", "nll_mean"]
