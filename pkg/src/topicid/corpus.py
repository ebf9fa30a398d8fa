"""Utterance records, manifests, label merging, and the synthetic corpus generator."""

from __future__ import annotations

import configparser
import json
import logging
import wave
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SOURCES = ("manual", "asr", "none")
SPLITS = ("train", "dev", "test")
MANIFEST_FIELDS = ("id", "audio", "duration_s", "topic", "transcript", "transcript_source", "split")


class ManifestError(ValueError):
    pass


class LabelError(KeyError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    audio_path: str
    duration_s: float
    topic: str
    transcript: str | None = None
    transcript_source: str = "none"
    split: str = "train"

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError(f"{self.id}: duration must be positive, got {self.duration_s}")
        if self.transcript_source not in SOURCES:
            raise ValueError(f"{self.id}: unknown transcript_source {self.transcript_source!r}")
        if self.split not in SPLITS:
            raise ValueError(f"{self.id}: unknown split {self.split!r}")
        if (self.transcript_source == "none") != (self.transcript is None):
            raise ValueError(f"{self.id}: transcript_source 'none' must coincide with a missing transcript")

    def with_transcript(self, text: str | None, source: str) -> "UtteranceRecord":
        return replace(self, transcript=text, transcript_source=source)


@dataclass
class TopicLabelMap:
    raw_to_canonical: dict[str, str]
    canonical_order: list[str]

    def __post_init__(self):
        if len(set(self.canonical_order)) != len(self.canonical_order):
            raise ValueError(f"duplicate canonical topics in {self.canonical_order}")
        unknown = set(self.raw_to_canonical.values()) - set(self.canonical_order)
        if unknown:
            raise ValueError(f"mapping targets not in canonical_order: {sorted(unknown)}")

    @classmethod
    def identity(cls, topics) -> "TopicLabelMap":
        topics = list(topics)
        return cls({t: t for t in topics}, topics)

    @classmethod
    def merged(cls, canonical_order, groups: dict[str, list[str]]) -> "TopicLabelMap":
        """Identity over ``canonical_order`` plus raw aliases: ``groups[canonical] = [raw, ...]``."""
        mapping = {t: t for t in canonical_order}
        for canonical, raws in groups.items():
            for raw in raws:
                mapping[raw] = canonical
        return cls(mapping, list(canonical_order))

    def canonical(self, raw: str) -> str:
        try:
            return self.raw_to_canonical[raw]
        except KeyError:
            raise LabelError(f"unknown topic {raw!r}") from None

    def index(self, topic: str) -> int:
        return self.canonical_order.index(self.canonical(topic))

    @property
    def num_classes(self) -> int:
        return len(self.canonical_order)

    def to_dict(self) -> dict:
        return {"raw_to_canonical": self.raw_to_canonical, "canonical_order": self.canonical_order}

    @classmethod
    def from_dict(cls, d: dict) -> "TopicLabelMap":
        return cls(dict(d["raw_to_canonical"]), list(d["canonical_order"]))


@dataclass
class CorpusView:
    records: list[UtteranceRecord]
    label_map: TopicLabelMap
    max_duration_s: float = 50.0
    dropped: int = 0
    flagged: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def with_records(self, records) -> "CorpusView":
        return CorpusView(list(records), self.label_map, self.max_duration_s)

    def split(self, name: str) -> "CorpusView":
        return self.with_records(r for r in self.records if r.split == name)

    def labels(self) -> np.ndarray:
        return np.array([self.label_map.index(r.topic) for r in self.records], dtype=np.int64)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def class_counts(self) -> Counter:
        return Counter(r.topic for r in self.records)


def _parse_line(line: str, lineno: int, base: Path) -> dict:
    try:
        entry = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: not a JSON object ({exc.msg})") from None
    if not isinstance(entry, dict):
        raise ManifestError(f"line {lineno}: expected a key-value object")
    missing = [k for k in ("id", "audio", "duration_s", "topic", "split") if k not in entry]
    if missing:
        raise ManifestError(f"line {lineno}: missing fields {missing}")
    try:
        duration = float(entry["duration_s"])
    except (TypeError, ValueError):
        raise ManifestError(f"line {lineno}: duration_s is not a number") from None
    transcript = entry.get("transcript")
    source = entry.get("transcript_source", "none" if transcript is None else "manual")
    audio = Path(entry["audio"])
    if not audio.is_absolute():
        audio = base / audio
    return {
        "id": str(entry["id"]),
        "audio_path": str(audio),
        "duration_s": duration,
        "topic": entry["topic"],
        "transcript": transcript,
        "transcript_source": source,
        "split": entry["split"],
    }


def load_manifest(path, label_map: TopicLabelMap | None = None, max_duration_s: float = 50.0) -> CorpusView:
    """Read a JSON-lines manifest, dropping utterances longer than ``max_duration_s`` (inclusive limit).

    Without a ``label_map`` the topics seen in the file (sorted) form an identity map.
    """
    path = Path(path)
    base = path.resolve().parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            entries.append((lineno, _parse_line(line, lineno, base)))
    if label_map is None:
        label_map = TopicLabelMap.identity(sorted({e["topic"] for _, e in entries}))
    records, dropped = [], 0
    for lineno, e in entries:
        e["topic"] = label_map.canonical(e["topic"])
        if e["duration_s"] > max_duration_s:
            dropped += 1
            continue
        try:
            records.append(UtteranceRecord(**e))
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
    if dropped:
        log.info("%s: dropped %d utterances longer than %.1f s", path, dropped, max_duration_s)
    return CorpusView(records, label_map, max_duration_s, dropped)


def record_to_entry(r: UtteranceRecord, base: Path | None = None) -> dict:
    audio = Path(r.audio_path)
    if base is not None:
        try:
            audio = audio.relative_to(base)
        except ValueError:
            pass
    entry = {
        "id": r.id,
        "audio": audio.as_posix(),
        "duration_s": r.duration_s,
        "topic": r.topic,
    }
    if r.transcript is not None:
        entry["transcript"] = r.transcript
    entry["transcript_source"] = r.transcript_source
    entry["split"] = r.split
    return entry


def write_manifest(records, path):
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            entry = record_to_entry(r, base)
            fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


def partition_by_transcription(view: CorpusView, include_asr: bool = False) -> tuple[CorpusView, CorpusView]:
    """Split into (transcribed, untranscribed).  ASR-transcribed records count as
    transcribed only with ``include_asr``; otherwise they belong to neither side."""
    allowed = {"manual", "asr"} if include_asr else {"manual"}
    transcribed = [r for r in view.records if r.transcript_source in allowed]
    untranscribed = [r for r in view.records if r.transcript_source == "none"]
    return view.with_records(transcribed), view.with_records(untranscribed)


# -- audio I/O ----------------------------------------------------------------
def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return (samples in [-1, 1] as float32, sample rate) for mono 16-bit PCM."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return (pcm.astype(np.float32) / 32768.0), rate


# -- synthetic corpus ---------------------------------------------------------
DEFAULT_VOCABULARY = {
    "animals": ["cat", "dog", "horse", "bird"],
    "sports": ["ball", "goal", "race", "team"],
    "summer": ["sun", "beach", "swim", "heat"],
    "nature": ["tree", "lake", "moss", "rock"],
}
DEFAULT_SHARED_WORDS = ["the", "and", "is", "we", "see", "it", "was", "my"]


def _pseudo_words(topic: str, n: int) -> list[str]:
    rng = np.random.default_rng(list(topic.encode()))
    cons, vows = "bdfgklmnprstv", "aeiou"
    return ["".join(rng.choice(list(cons)) + rng.choice(list(vows)) for _ in range(2)) for _ in range(n)]


@dataclass
class SynthSpec:
    """Desk-scale corpus description.  Counts are per topic, in ``topics`` order."""

    topics: list[str] = field(default_factory=lambda: list(DEFAULT_VOCABULARY))
    train_counts: list[int] = field(default_factory=lambda: [150, 100, 100, 50])
    dev_counts: list[int] = field(default_factory=lambda: [20, 20, 20, 20])
    test_counts: list[int] = field(default_factory=lambda: [20, 20, 20, 20])
    min_duration_s: float = 1.0
    max_duration_s: float = 3.0
    sample_rate: int = SAMPLE_RATE
    untranscribed_fraction: float = 0.5
    vocabulary: dict[str, list[str]] = field(default_factory=dict)
    shared_words: list[str] = field(default_factory=lambda: list(DEFAULT_SHARED_WORDS))
    topic_word_prob: float = 0.75
    word_seconds: float = 0.45
    snr_db: float = 15.0
    topic_base_hz: float = 250.0
    topic_step_hz: float = 150.0

    def __post_init__(self):
        n = len(self.topics)
        for name in ("train_counts", "dev_counts", "test_counts"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} needs one count per topic ({n})")
        if not 0.0 <= self.untranscribed_fraction <= 1.0:
            raise ValueError("untranscribed_fraction must lie in [0, 1]")
        if not 0 < self.min_duration_s <= self.max_duration_s:
            raise ValueError("need 0 < min_duration_s <= max_duration_s")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"only {SAMPLE_RATE} Hz audio is supported")
        vocab = {}
        for t in self.topics:
            words = self.vocabulary.get(t) or DEFAULT_VOCABULARY.get(t) or _pseudo_words(t, 4)
            vocab[t] = [w.lower() for w in words]
        self.vocabulary = vocab

    def all_words(self) -> list[str]:
        words = []
        for t in self.topics:
            words.extend(w for w in self.vocabulary[t] if w not in words)
        words.extend(w for w in self.shared_words if w not in words)
        return words

    @classmethod
    def uniform(cls, topics, per_topic: int, **kw) -> "SynthSpec":
        n = len(topics)
        return cls(topics=list(topics), train_counts=[per_topic] * n, dev_counts=[0] * n, test_counts=[0] * n, **kw)

    @classmethod
    def from_file(cls, path) -> "SynthSpec":
        """INI file with a ``[synth]`` section; list values are comma separated,
        per-topic vocabularies go in a ``[vocabulary]`` section."""
        parser = configparser.ConfigParser()
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"spec file not found: {path}")
        parser.read(path)
        if "synth" not in parser:
            raise ValueError(f"{path}: missing [synth] section")
        sec = parser["synth"]
        known = {f for f in cls.__dataclass_fields__ if f != "vocabulary"}
        unknown = set(sec) - known
        if unknown:
            raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
        kw = {}
        for key, raw in sec.items():
            default = cls.__dataclass_fields__[key].default
            if key in ("topics", "shared_words"):
                kw[key] = [v.strip() for v in raw.split(",") if v.strip()]
            elif key.endswith("_counts"):
                kw[key] = [int(v) for v in raw.split(",")]
            elif key == "sample_rate":
                kw[key] = int(raw)
            else:
                kw[key] = type(default)(raw) if isinstance(default, (int, float)) else raw
        if "vocabulary" in parser:
            kw["vocabulary"] = {t: [w.strip() for w in v.split(",")] for t, v in parser["vocabulary"].items()}
        return cls(**kw)


def _word_tones(n_words: int) -> list[tuple[float, float]]:
    """Distinct frequency pairs in 1-7 kHz, one per word."""
    grid_size = 4
    while grid_size * (grid_size - 1) // 2 < n_words:
        grid_size += 1
    grid = np.geomspace(1000.0, 7000.0, grid_size)
    pairs = [(grid[i], grid[j]) for i in range(grid_size) for j in range(i + 1, grid_size)]
    # interleave so neighbouring word indices differ in both tones
    order = sorted(range(len(pairs)), key=lambda k: (k % 3, k))
    return [pairs[k] for k in order[:n_words]]


def _render(spec: SynthSpec, topic_index: int, words: list[str], tones: dict, duration: float, rng) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    f0 = spec.topic_base_hz + spec.topic_step_hz * topic_index
    am_rate = 2.0 + 2.0 * topic_index
    background = 0.3 * (0.6 + 0.4 * np.sin(2 * np.pi * am_rate * t)) * np.sin(2 * np.pi * f0 * t)
    speech = np.zeros(n)
    seg = n // len(words)
    gap = int(0.04 * sr)
    for k, w in enumerate(words):
        lo, hi = k * seg + gap // 2, (k + 1) * seg - gap // 2
        if hi <= lo:
            continue
        tt = t[lo:hi]
        fa, fb = tones[w]
        env = np.hanning(hi - lo)
        speech[lo:hi] = 0.5 * env * (np.sin(2 * np.pi * fa * tt) + np.sin(2 * np.pi * fb * tt))
    clean = background + speech
    power = np.mean(clean**2)
    noise = rng.standard_normal(n) * np.sqrt(power / 10 ** (spec.snr_db / 10))
    x = clean + noise
    return 0.9 * x / np.max(np.abs(x))


def synthesize_corpus(spec: SynthSpec, out_dir, seed: int) -> Path:
    """Write WAV files and ``manifest.jsonl`` under ``out_dir``; returns the manifest path.

    Output is a pure function of (spec, seed).  Each utterance draws from its
    own RNG stream spawned from the master seed.
    """
    out_dir = Path(out_dir).resolve()
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    words = spec.all_words()
    tones = dict(zip(words, _word_tones(len(words))))
    plan = []
    for split, counts in (("train", spec.train_counts), ("dev", spec.dev_counts), ("test", spec.test_counts)):
        for ti, (topic, count) in enumerate(zip(spec.topics, counts)):
            for k in range(count):
                plan.append((split, ti, topic, f"{split}-{ti:02d}-{k:04d}"))
    n_train = sum(1 for p in plan if p[0] == "train")
    n_untranscribed = int(round(spec.untranscribed_fraction * n_train))
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31,))).permutation(n_train)
    untranscribed = set(perm[:n_untranscribed].tolist())

    records = []
    train_pos = 0
    for idx, (split, ti, topic, uid) in enumerate(plan):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(idx,)))
        duration = round(float(rng.uniform(spec.min_duration_s, spec.max_duration_s)), 2)
        n_words = max(1, int(round(duration / spec.word_seconds)))
        own = spec.vocabulary[topic]
        chosen = []
        for _ in range(n_words):
            pool = own if (rng.random() < spec.topic_word_prob or not spec.shared_words) else spec.shared_words
            chosen.append(pool[int(rng.integers(len(pool)))])
        audio = _render(spec, ti, chosen, tones, duration, rng)
        wav_path = wav_dir / f"{uid}.wav"
        write_wav(wav_path, audio, spec.sample_rate)
        transcript, source = " ".join(chosen), "manual"
        if split == "train":
            if train_pos in untranscribed:
                transcript, source = None, "none"
            train_pos += 1
        records.append(UtteranceRecord(uid, str(wav_path), duration, topic, transcript, source, split))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(records, manifest)
    return manifest


def summarize(view: CorpusView) -> str:
    lines = []
    total = sum(r.duration_s for r in view.records)
    for split in SPLITS:
        sub = [r for r in view.records if r.split == split]
        if not sub:
            continue
        counts = Counter(r.topic for r in sub)
        per_topic = ", ".join(f"{t}={counts.get(t, 0)}" for t in view.label_map.canonical_order)
        lines.append(f"{split}: {len(sub)} utterances ({per_topic})")
    lines.append(f"total: {len(view.records)} utterances, {total / 3600:.4f} hours")
    return "\n".join(lines)
