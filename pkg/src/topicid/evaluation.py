"""Classification metrics, model agreement, and embedding export."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class CoverageError(ValueError):
    pass


@dataclass
class PredictionSet:
    system_name: str
    split: str
    entries: dict[str, int]
    hypotheses: dict[str, str] | None = None

    def __len__(self):
        return len(self.entries)

    def ids(self) -> list[str]:
        return list(self.entries)


@dataclass
class MetricReport:
    micro_f1: float
    uar: float
    per_class_recall: np.ndarray
    confusion: np.ndarray
    support: np.ndarray
    class_names: list[str] = field(default_factory=list)
    excluded_classes: list[int] = field(default_factory=list)


def _as_mapping(x) -> dict[str, int]:
    if isinstance(x, PredictionSet):
        return x.entries
    if isinstance(x, dict):
        return x
    return {str(i): int(v) for i, v in enumerate(x)}


def _aligned(preds, truth) -> tuple[np.ndarray, np.ndarray]:
    p, t = _as_mapping(preds), _as_mapping(truth)
    missing = [k for k in p if k not in t]
    if missing:
        raise CoverageError(f"{len(missing)} predicted ids absent from truth: {missing[:10]}")
    ids = list(p)
    return np.array([t[k] for k in ids], dtype=np.int64), np.array([p[k] for k in ids], dtype=np.int64)


def micro_f1(preds, truth) -> float:
    """Micro-averaged F1 in percent; for single-label predictions this is accuracy."""
    y, p = _aligned(preds, truth)
    if len(y) == 0:
        raise CoverageError("no predictions to score")
    tp = int(np.sum(y == p))
    fp = fn = len(y) - tp
    return 100.0 * 2 * tp / (2 * tp + fp + fn)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def uar(preds, truth, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class recalls (percent) over classes present in the truth."""
    y, p = _aligned(preds, truth)
    if len(y) == 0:
        raise CoverageError("no predictions to score")
    n = num_classes or int(max(y.max(), p.max())) + 1
    cm = confusion_matrix(y, p, n)
    support = cm.sum(axis=1)
    present = support > 0
    recalls = np.diag(cm)[present] / support[present]
    return 100.0 * float(recalls.mean())


def evaluate(preds, truth, class_names: list[str]) -> MetricReport:
    y, p = _aligned(preds, truth)
    n = len(class_names)
    cm = confusion_matrix(y, p, n)
    support = cm.sum(axis=1)
    present = support > 0
    recall = np.divide(np.diag(cm), support, out=np.zeros(n), where=present)
    excluded = [int(i) for i in np.flatnonzero(~present)]
    if excluded:
        log.info("classes without support excluded from UAR: %s", [class_names[i] for i in excluded])
    return MetricReport(
        micro_f1=micro_f1(preds, truth),
        uar=100.0 * float(recall[present].mean()),
        per_class_recall=recall,
        confusion=cm,
        support=support,
        class_names=list(class_names),
        excluded_classes=excluded,
    )


def agreement_matrix(prediction_sets: list[PredictionSet]) -> np.ndarray:
    """Entry (i, j): micro-F1 of set i scored against set j taken as truth."""
    if not prediction_sets:
        return np.zeros((0, 0))
    ref = set(prediction_sets[0].entries)
    for ps in prediction_sets[1:]:
        if set(ps.entries) != ref:
            diff = sorted(ref.symmetric_difference(ps.entries))
            raise CoverageError(f"{ps.system_name} covers different utterances: {diff[:10]}")
    n = len(prediction_sets)
    out = np.full((n, n), 100.0)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = micro_f1(prediction_sets[i], prediction_sets[j].entries)
    return out


# -- files ----------------------------------------------------------------------------
REPORT_FIELDS = ("split", "num_utterances", "micro_f1", "uar", "per_class_recall", "support", "confusion")


def format_report(system: str, split: str, rep: MetricReport) -> str:
    lines = [f"[{system}]"]
    values = {
        "split": split,
        "num_utterances": str(int(rep.support.sum())),
        "micro_f1": f"{rep.micro_f1:.4f}",
        "uar": f"{rep.uar:.4f}",
        "per_class_recall": ",".join(f"{r:.4f}" for r in rep.per_class_recall),
        "support": ",".join(str(int(s)) for s in rep.support),
        "confusion": ";".join(",".join(str(int(v)) for v in row) for row in rep.confusion),
    }
    lines += [f"{k}\t{values[k]}" for k in REPORT_FIELDS]
    return "\n".join(lines) + "\n"


def write_report(path, sections: list[tuple[str, str, MetricReport]]):
    Path(path).write_text("\n".join(format_report(*s) for s in sections))


def read_report(path) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    current = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("[") and line.endswith("]"):
            current = out.setdefault(line[1:-1], {})
        elif line.strip() and current is not None:
            k, v = line.split("\t", 1)
            current[k] = v
    return out


def human_readable(system: str, split: str, rep: MetricReport) -> str:
    width = max([len(c) for c in rep.class_names] + [5])
    lines = [f"{system} on {split}: micro-F1 {rep.micro_f1:.2f}  UAR {rep.uar:.2f}"]
    for name, r, s in zip(rep.class_names, rep.per_class_recall, rep.support):
        lines.append(f"  {name:<{width}}  recall {100 * r:6.2f}  support {int(s)}")
    return "\n".join(lines)


def write_agreement(path, names: list[str], matrix: np.ndarray):
    with open(path, "w") as fh:
        fh.write("system\t" + "\t".join(names) + "\n")
        for name, row in zip(names, matrix):
            fh.write(name + "\t" + "\t".join(f"{v:.2f}" for v in row) + "\n")


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Coordinates on the first two principal axes (signs fixed so each axis's largest loading is positive)."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
    axes = axes * signs[:, None]
    coords = centered @ axes.T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords


@dataclass
class EmbeddingRow:
    system: str
    utterance_id: str
    topic: str
    vector: np.ndarray


def export_embeddings(rows: list[EmbeddingRow], path, with_pca: bool = False):
    """Tab-separated table: system, utterance_id, topic, dim, e0..e{D-1} (padded to the widest
    system), optionally pc1/pc2 computed per system."""
    max_dim = max((len(r.vector) for r in rows), default=0)
    coords = {}
    if with_pca:
        for system in dict.fromkeys(r.system for r in rows):
            idx = [i for i, r in enumerate(rows) if r.system == system]
            pcs = pca_2d(np.stack([rows[i].vector for i in idx]))
            coords.update({i: pcs[k] for k, i in enumerate(idx)})
    header = ["system", "utterance_id", "topic", "dim"] + [f"e{i}" for i in range(max_dim)]
    if with_pca:
        header += ["pc1", "pc2"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for i, r in enumerate(rows):
            vals = [f"{v:.6f}" for v in r.vector] + [""] * (max_dim - len(r.vector))
            cells = [r.system, r.utterance_id, r.topic, str(len(r.vector))] + vals
            if with_pca:
                cells += [f"{coords[i][0]:.6f}", f"{coords[i][1]:.6f}"]
            fh.write("\t".join(cells) + "\n")


def read_embeddings(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    out = []
    for line in lines[1:]:
        cells = dict(zip(header, line.split("\t")))
        dim = int(cells["dim"])
        row = {
            "system": cells["system"],
            "utterance_id": cells["utterance_id"],
            "topic": cells["topic"],
            "vector": np.array([float(cells[f"e{i}"]) for i in range(dim)]),
        }
        if "pc1" in cells:
            row["pc"] = (float(cells["pc1"]), float(cells["pc2"]))
        out.append(row)
    return out
