import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from dataclasses import replace  # noqa: E402

import pytest  # noqa: E402

from topicid.config import default_config  # noqa: E402
from topicid.corpus import SynthSpec, load_manifest, synthesize_corpus  # noqa: E402
from topicid.encoders import AudioEncoderConfig, TDNNConfig  # noqa: E402
from topicid.seq2seq import DecoderConfig  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bench_manifest(tmp_path_factory):
    """Fixed benchmark: 4 topics, 400/80/80, half of train untranscribed, seed 7."""
    return synthesize_corpus(SynthSpec(), tmp_path_factory.mktemp("bench"), seed=7)


@pytest.fixture(scope="session")
def bench(bench_manifest):
    return load_manifest(bench_manifest)


SMALL_SPEC = SynthSpec(
    train_counts=[8, 8, 8, 8], dev_counts=[4, 4, 4, 4], test_counts=[3, 3, 3, 3],
    min_duration_s=1.0, max_duration_s=1.6,
)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    return synthesize_corpus(SMALL_SPEC, tmp_path_factory.mktemp("small"), seed=11)


@pytest.fixture(scope="session")
def small(small_manifest):
    return load_manifest(small_manifest)


def tiny_config(system, stage="single", seed=0, epochs=2):
    """Narrow networks so unit tests exercise every code path in seconds."""
    cfg = default_config(system, stage, seed)
    return replace(
        cfg,
        epochs=epochs,
        batch_size=8,
        audio_encoder=AudioEncoderConfig(conv_channels=(4, 4), rnn_hidden=16, dense_width=32),
        tdnn=TDNNConfig(widths=(16, 16, 16, 16, 32), linear_widths=(32, 16)),
        decoder=DecoderConfig(embed_dim=8, hidden=32, attention_dim=16),
        text=replace(cfg.text, dim=16, blstm_hidden=8),
        decode=replace(cfg.decode, beam_size=3, max_len=30),
    )


@pytest.fixture
def tiny():
    return tiny_config
