from dataclasses import replace

import numpy as np
import pytest
from conftest import tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st

from topicid import numcore as nc
from topicid import systems as S
from topicid.corpus import partition_by_transcription
from topicid.objectives import nll_loss, parse_log_line


@pytest.fixture(scope="module")
def train(small):
    return small.split("train")


@pytest.fixture(scope="module")
def dev(small):
    return small.split("dev")


@pytest.fixture(scope="module")
def asr(train, dev):
    cfg = tiny_config("asr_standalone", epochs=3)
    cfg = replace(cfg, objectives=replace(cfg.objectives, ctc_cutoff_epoch=2))
    transcribed, _ = partition_by_transcription(train)
    return S.train_asr_standalone(transcribed, cfg, dev)


@pytest.fixture(scope="module")
def concat(train, dev):
    return S.train_audio_text_concat(partition_by_transcription(train)[0], tiny_config("audio_text_concat"), dev)


# -- data selection and provenance --------------------------------------------------------
def test_man_trn_rejects_asr_transcripts(train):
    view = train.with_records(r.with_transcript("x y", "asr") if r.transcript is None else r for r in train)
    with pytest.raises(S.DataProvenanceError):
        S.train_text_classifier(view, "text_man_trn", tiny_config("text_man_trn"))


def test_man_trn_reads_only_manual(train):
    system = S.train_text_classifier(train, "text_man_trn", tiny_config("text_man_trn", epochs=1))
    sources = {line.split("\t")[2] for line in system.provenance}
    assert sources == {"manual"}
    assert len(system.train_ids) == sum(r.transcript_source == "manual" for r in train)


def test_pipeline_without_asr_raises(train):
    with pytest.raises(S.DataProvenanceError):
        S.train_text_classifier(train, "text_pipeline", tiny_config("text_pipeline"))


def test_semi_sup_without_asr_raises(train):
    with pytest.raises(S.DataProvenanceError):
        S.train_text_classifier(train, "text_semi_sup", tiny_config("text_semi_sup"))


def test_asr_rejects_untranscribed(train):
    with pytest.raises(S.ModalityError):
        S.train_asr_standalone(train, tiny_config("asr_standalone"))


def test_audio_only_uses_both_partitions(train):
    system = S.train_audio_only(train, tiny_config("audio_only", epochs=1))
    t, u = partition_by_transcription(train)
    assert sorted(system.train_ids) == sorted(t.ids() + u.ids())
    assert len(system.train_ids) == len(train)


def test_semi_sup_with_oracle_transcripts_equals_man_trn(train):
    # transcribed half relabelled as oracle ASR output: same text, different source tag
    manual = partition_by_transcription(train)[0]
    half = {r.id for k, r in enumerate(manual) if k % 2}
    oracle = manual.with_records(r.with_transcript(r.transcript, "asr") if r.id in half else r for r in manual)
    cfg = tiny_config("text_man_trn", epochs=3)
    a = S.train_text_classifier(manual, "text_man_trn", cfg)
    b = S.train_text_classifier(oracle, "text_semi_sup", cfg)
    assert [row["total"] for row in a.history] == pytest.approx([row["total"] for row in b.history])


# -- ASR ----------------------------------------------------------------------------------
def test_ctc_logged_only_until_cutoff(asr):
    for line in asr.log_lines:
        fields = parse_log_line(line)
        assert ("ctc" in fields) == (int(fields["epoch"]) <= 2)
        assert "seq2seq" in fields


def test_generate_transcripts_conserves_records(asr, dev):
    out = S.generate_transcripts(asr, dev, beam_size=2)
    assert out.ids() == dev.ids()
    assert all(r.transcript_source == "asr" for r in out)
    assert all(r.transcript is not None for r in out)


def test_generate_only_missing(asr, train):
    out = S.generate_transcripts(asr, train, beam_size=1, only_missing=True)
    for before, after in zip(train, out):
        if before.transcript is not None:
            assert after == before
        else:
            assert after.transcript_source == "asr"


def test_asr_deterministic(train, dev):
    cfg = tiny_config("asr_standalone", epochs=1)
    transcribed = partition_by_transcription(train)[0]
    a = S.train_asr_standalone(transcribed, cfg, dev)
    b = S.train_asr_standalone(transcribed, cfg, dev)
    assert a.history == b.history
    assert a.params.fingerprint() == b.params.fingerprint()


# -- concat -------------------------------------------------------------------------------
def test_concat_classifier_dim(concat):
    model = concat.model
    assert model.classifier_dim == model.audio.out_dim + model.text.out_dim
    assert model.classifier.weight.shape == (model.classifier_dim, 4)


def test_concat_zero_text_changes_scores(concat, dev):
    with_text = S.predict(concat, dev)
    ids, full = S.class_log_probs(concat, dev)
    examples = S._examples(concat.model, dev, dev.label_map, None, "predict")
    _, ablated = S._class_scores(concat.model, examples, zero_text=True)
    assert not np.allclose(full, ablated)
    assert len(S.predict(concat, dev, zero_text=True)) == len(with_text)


# -- multi-task ----------------------------------------------------------------------------
def test_topic_gradient_reaches_shared_encoder(train):
    cfg = tiny_config("multi_task", stage="pretrain")
    transcribed = partition_by_transcription(train)[0]
    table = S._build_table(cfg, transcribed)
    model = S.SystemModel(cfg, 4, table)
    examples = S._examples(model, transcribed.records[:4], train.label_map, None, "test", chars=True)
    batch = S.collate(examples)
    model.params.zero_grad()
    nll_loss(model.class_log_probs(batch), batch.labels).backward()
    enc = model.params.grads("encoder.")
    assert enc and sum(float(np.linalg.norm(g)) for g in enc.values()) > 0
    assert not model.params.grads("decoder.")


def test_multi_task_selects_lowest_wer_epoch(train, dev, tmp_path):
    cfg = tiny_config("multi_task", stage="pretrain", epochs=3)
    system = S.train_multi_task(partition_by_transcription(train)[0], cfg, dev, run_dir=tmp_path)
    wers = [row["dev_wer"] for row in system.history]
    assert system.selected_epoch == S.select_epoch(system.history) == int(np.argmin(wers)) + 1
    # restored parameters reproduce the selected epoch's dev WER
    assert S.dev_metrics(system, dev)["dev_wer"] == pytest.approx(wers[system.selected_epoch - 1])
    tuned = S.finetune_multi_task(system, train, tiny_config("multi_task", stage="finetune", epochs=1), dev)
    assert all(set(parse_log_line(l)) & {"topic_nll"} for l in tuned.log_lines)
    assert not any("ctc" in parse_log_line(l) for l in tuned.log_lines)
    assert len(tuned.train_ids) == len(train)


def test_select_epoch_ties_take_earliest():
    assert S.select_epoch([{"dev_wer": 3.0}, {"dev_wer": 1.0}, {"dev_wer": 1.0}]) == 2


# -- embedding transfer ----------------------------------------------------------------------
def test_transfer_logs_all_components(train, dev):
    system = S.pretrain_embedding_transfer(partition_by_transcription(train)[0],
                                           tiny_config("emb_transfer", stage="pretrain", epochs=1), dev)
    for line in system.log_lines:
        assert {"nll", "align_l1", "recon_l1"} <= set(parse_log_line(line))


def test_init_changes_first_epoch_dev_loss(train, dev):
    pre = S.pretrain_embedding_transfer(partition_by_transcription(train)[0],
                                        tiny_config("emb_transfer", stage="pretrain", epochs=2), dev)
    cfg = tiny_config("audio_only", epochs=1)
    scratch = S.train_audio_only(train, cfg, dev=dev)
    seeded = S.train_audio_only(train, cfg, init=pre, dev=dev)
    assert scratch.history[0]["dev_loss"] != pytest.approx(seeded.history[0]["dev_loss"])
    assert seeded.stage_tag == "fine-tuned"


# -- prediction, persistence, determinism --------------------------------------------------------
def test_predict_conservation_and_determinism(concat, dev):
    a, b = S.predict(concat, dev), S.predict(concat, dev)
    assert len(a) == len(dev)
    assert a.entries == b.entries


@settings(max_examples=25, deadline=None)
@given(st.floats(-1e3, 1e3))
def test_argmax_shift_invariance(shift):
    lp = np.random.default_rng(0).standard_normal((6, 4))
    shifted = nc.log_softmax(nc.as_tensor(lp + shift)).data
    assert (shifted.argmax(axis=1) == lp.argmax(axis=1)).all()


def test_predict_rejects_missing_text(train):
    system = S.train_text_classifier(train, "text_man_trn", tiny_config("text_man_trn", epochs=1))
    untranscribed = partition_by_transcription(train)[1]
    with pytest.raises(S.ModalityError):
        S.predict(system, untranscribed)


def test_run_directory_and_resume(train, dev, tmp_path):
    cfg = tiny_config("audio_only", epochs=2)
    system = S.train_audio_only(train, cfg, dev=dev, run_dir=tmp_path)
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["epoch_001.ckpt", "epoch_002.ckpt"]
    history = S.read_metric_history(tmp_path / "metrics.tsv")
    assert [row["epoch"] for row in history] == [1, 2]
    loaded = S.load_system(tmp_path)
    assert loaded.params.fingerprint() == system.params.fingerprint()
    assert S.predict(loaded, dev).entries == S.predict(system, dev).entries
    again = S.dev_metrics(loaded, dev)
    for k, v in again.items():
        assert v == pytest.approx(system.history[-1][k], abs=1e-6)
    # resuming from the epoch-1 checkpoint reproduces epoch-1 dev metrics
    nc.load_checkpoint(loaded.params, tmp_path / "checkpoints" / "epoch_001.ckpt")
    for k, v in S.dev_metrics(loaded, dev).items():
        assert v == pytest.approx(system.history[0][k], abs=1e-6)


def test_saved_text_system_round_trip(train, dev, tmp_path):
    system = S.train_text_classifier(train, "text_man_trn", tiny_config("text_man_trn", epochs=1),
                                     dev=dev, run_dir=tmp_path)
    loaded = S.load_system(tmp_path)
    assert S.predict(loaded, dev).entries == S.predict(system, dev).entries


def test_embed_dims(concat, dev):
    ids, mat = S.embed(concat, dev)
    assert ids == dev.ids()
    assert mat.shape == (len(dev), concat.model.classifier_dim)


def test_train_system_dispatch(small):
    with pytest.raises(ValueError):
        S.train_system(tiny_config("multi_task", stage="finetune"), small)
    system = S.train_system(tiny_config("audio_bl", epochs=1), small)
    assert system.name == "audio_bl" and len(system.history) == 1
