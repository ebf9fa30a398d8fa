import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from topicid.features import (
    AudioTooShortError,
    FbankConfig,
    FeatureMatrix,
    Waveform,
    extract_fbank,
    hz_to_mel,
    load_features,
    mel_center_frequencies,
    mel_filterbank,
    normalize_utterance,
    save_features,
)

SR = 16000


def test_one_second_frame_count():
    # 1 + floor((16000 - 400) / 160) = 98
    feat = extract_fbank(Waveform(np.random.default_rng(0).standard_normal(SR)))
    assert feat.frames.shape == (1 + (SR - 400) // 160, 40) == (98, 40)


@given(st.integers(400, 4000))
def test_frame_count_formula(n):
    feat = extract_fbank(Waveform(np.ones(n) * 0.1))
    assert feat.num_frames == 1 + (n - 400) // 160


def test_zero_waveform_is_log_floor():
    feat = extract_fbank(Waveform(np.zeros(SR)))
    np.testing.assert_allclose(feat.frames, np.log(1e-10), rtol=1e-6)


def test_too_short_raises():
    with pytest.raises(AudioTooShortError):
        extract_fbank(Waveform(np.zeros(399)))


def test_empty_waveform_rejected():
    with pytest.raises(ValueError):
        Waveform(np.zeros(0))


@pytest.mark.parametrize("freq", [300.0, 1000.0, 2500.0, 5000.0])
def test_sine_peaks_at_nearest_center(freq):
    cfg = FbankConfig()
    # analytic mel centres, independent of the filterbank code
    m = np.linspace(2595 * np.log10(1), 2595 * np.log10(1 + 8000 / 700), 42)[1:-1]
    centers = 700 * (10 ** (m / 2595) - 1)
    np.testing.assert_allclose(mel_center_frequencies(cfg), centers, rtol=1e-12)
    t = np.arange(SR) / SR
    feat = extract_fbank(Waveform(np.sin(2 * np.pi * freq * t)), cfg)
    assert int(np.argmax(feat.frames.mean(axis=0))) == int(np.argmin(np.abs(centers - freq)))


def test_filterbank_shape_and_peaks():
    cfg = FbankConfig()
    fb = mel_filterbank(cfg)
    assert fb.shape == (40, 257)
    assert fb.min() >= 0 and fb.max() <= 1
    assert np.all(np.diff(np.argmax(fb, axis=1)) >= 0)
    np.testing.assert_allclose(hz_to_mel(700.0), 2595 * np.log10(2))


def test_normalize_constant_is_zero():
    out = normalize_utterance(FeatureMatrix(np.full((20, 40), 3.5, np.float32)))
    np.testing.assert_array_equal(out.frames, 0.0)


def test_normalize_random_matrix():
    x = np.random.default_rng(1).standard_normal((10, 40)) * 4 + 7
    out = normalize_utterance(FeatureMatrix(x.astype(np.float32))).frames.astype(np.float64)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(2, 30), st.integers(1, 8)),
                  elements=st.floats(-50, 50, width=32)))
def test_normalize_idempotent(x):
    once = normalize_utterance(FeatureMatrix(x))
    twice = normalize_utterance(once)
    np.testing.assert_allclose(twice.frames, once.frames, atol=1e-4)


def test_cache_round_trip(tmp_path):
    feat = extract_fbank(Waveform(np.random.default_rng(2).standard_normal(SR // 2)))
    save_features(tmp_path / "f.bin", feat)
    back = load_features(tmp_path / "f.bin")
    np.testing.assert_array_equal(back.frames, feat.frames)
    assert load_features(tmp_path / "f.bin", FbankConfig(num_filters=23)) is None


def test_cache_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"hello")
    with pytest.raises(ValueError):
        load_features(tmp_path / "x.bin")
