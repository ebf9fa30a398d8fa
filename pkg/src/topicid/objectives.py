"""Training objectives and their interpolation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .encoders import Projection, project_down, project_up
from .numcore import ShapeError, Tensor


@dataclass
class BatchTargets:
    y: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.num_classes is not None and (self.y.min(initial=0) < 0 or self.y.max(initial=0) >= self.num_classes):
            raise ValueError(f"target indices must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)


def nll_loss(class_log_probs, targets, reduction: str = "sum") -> Tensor:
    """-sum_i log p(y_i | a_i) over the batch (``reduction='mean'`` divides by N)."""
    lp = nc.as_tensor(class_log_probs)
    y = targets.y if isinstance(targets, BatchTargets) else np.asarray(targets, dtype=np.int64)
    if lp.ndim != 2 or lp.shape[0] != len(y):
        raise ShapeError(f"nll_loss: log-probs {lp.shape} do not match {len(y)} targets")
    if len(y) and (y.max() >= lp.shape[1] or y.min() < 0):
        raise IndexError(f"target index {int(y.max())} out of range for {lp.shape[1]} classes")
    total = -nc.tsum(nc.getitem(lp, (np.arange(len(y)), y)))
    return total * (1.0 / max(len(y), 1)) if reduction == "mean" else total


def l1_loss(a, k, reduction: str = "sum") -> Tensor:
    """sum_i |a_i - k_i|_1 over batch and dimensions (``reduction='mean'`` divides by N)."""
    a, k = nc.as_tensor(a), nc.as_tensor(k)
    if a.shape != k.shape:
        raise ShapeError(f"l1_loss: shapes differ, {a.shape} vs {k.shape}")
    total = nc.tsum(nc.tabs(a - k))
    n = a.shape[0] if a.ndim > 1 else 1
    return total * (1.0 / max(n, 1)) if reduction == "mean" else total


def linguistic_alignment_loss(audio_emb, text_emb, up: Projection) -> Tensor:
    """L1 between up-projected audio embeddings and (fixed) text embeddings."""
    text = nc.as_tensor(text_emb).detach() if isinstance(text_emb, Tensor) else nc.as_tensor(text_emb)
    return l1_loss(project_up(audio_emb, up), text)


def acoustic_reconstruction_loss(audio_emb, fbank_summaries, down: Projection) -> Tensor:
    """L1 between down-projected audio embeddings and time-averaged filter banks."""
    return l1_loss(project_down(audio_emb, down), fbank_summaries)


# -- interpolation -------------------------------------------------------------------
@dataclass
class LossBundle:
    components: dict[str, Tensor]
    weights: dict[str, float]
    total: Tensor
    counts: dict[str, int] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        return {k: float(v.data) for k, v in self.components.items()}

    def per_sample(self) -> dict[str, float]:
        return {k: float(v.data) / max(self.counts.get(k, 1), 1) for k, v in self.components.items()}


@dataclass(frozen=True)
class CtcSchedule:
    weight: float = 0.5
    cutoff_epoch: int = 20

    def active(self, epoch: int) -> bool:
        return epoch <= self.cutoff_epoch


def interpolate(components: dict[str, Tensor], mode="equal", epoch: int | None = None,
                mean_weights: bool = False, counts: dict | None = None) -> LossBundle:
    """Combine named scalar losses.

    ``mode`` is ``"equal"`` (weight 1 each, or 1/n with ``mean_weights``), a
    :class:`CtcSchedule` (needs ``ctc`` and ``seq2seq`` components and the
    1-based ``epoch``), or an explicit name -> weight mapping.
    """
    if isinstance(mode, CtcSchedule):
        if epoch is None:
            raise ValueError("ctc schedule needs the current epoch")
        if mode.active(epoch):
            weights = {"ctc": mode.weight, "seq2seq": 1.0 - mode.weight}
        else:
            weights = {"seq2seq": 1.0}
        components = {k: components[k] for k in weights}
    elif mode == "equal":
        w = 1.0 / len(components) if mean_weights else 1.0
        weights = {k: w for k in components}
    elif isinstance(mode, dict):
        weights = {k: float(mode[k]) for k in components}
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    negative = [k for k, w in weights.items() if w < 0]
    if negative:
        raise ValueError(f"negative weights for {negative}")
    total = None
    for name, w in weights.items():
        term = components[name] * w
        total = term if total is None else total + term
    counts = {k: v for k, v in (counts or {}).items() if k in components}
    return LossBundle(dict(components), weights, total, counts)


def merge_bundles(outer_weights: dict[str, float], bundles: dict[str, LossBundle], extra: dict[str, Tensor]) -> LossBundle:
    """Flatten nested interpolation: ``extra`` components are weighted directly,
    each inner bundle's components inherit ``outer_weights[name]`` times their own weight."""
    components, weights, counts = {}, {}, {}
    total = None
    for name, t in extra.items():
        components[name], weights[name] = t, outer_weights[name]
        total = t * outer_weights[name] if total is None else total + t * outer_weights[name]
    for name, b in bundles.items():
        w = outer_weights[name]
        for k, t in b.components.items():
            components[k], weights[k] = t, w * b.weights[k]
            if k in b.counts:
                counts[k] = b.counts[k]
        total = b.total * w if total is None else total + b.total * w
    return LossBundle(components, weights, total, counts)


LOG_FIELDS = ("nll", "align_l1", "recon_l1", "ctc", "seq2seq", "topic_nll")


def format_log_line(epoch: int, step: int, bundle: LossBundle) -> str:
    """Tab-separated ``key=value`` fields: epoch, step, then per component value and
    weight in a fixed order, per-sample means, and the total."""
    fields = [f"epoch={epoch}", f"step={step}"]
    order = [k for k in LOG_FIELDS if k in bundle.components] + sorted(
        k for k in bundle.components if k not in LOG_FIELDS
    )
    per = bundle.per_sample()
    for k in order:
        fields.append(f"{k}={float(bundle.components[k].data):.6f}")
        fields.append(f"w_{k}={bundle.weights[k]:g}")
        fields.append(f"{k}_mean={per[k]:.6f}")
    fields.append(f"total={float(bundle.total.data):.6f}")
    return "\t".join(fields)


def parse_log_line(line: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in line.rstrip("\n").split("\t"))
