from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParameterSet


class MissingGradientError(KeyError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.0  # 0 disables global-norm clipping


class Optimizer:
    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg

    def _check(self, params: ParameterSet, grads, skip):
        skip = tuple(skip)
        for name in params.trainable():
            if skip and name.startswith(skip):
                continue
            if name not in grads:
                raise MissingGradientError(f"no gradient for trainable parameter {name!r}")

    def _clip(self, grads):
        if not self.cfg.clip_norm:
            return grads
        total = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if total <= self.cfg.clip_norm:
            return grads
        scale = self.cfg.clip_norm / (total + 1e-12)
        return {n: g * scale for n, g in grads.items()}

    def step(self, params: ParameterSet, grads: dict | None = None, skip=()):
        """Update ``params`` in place.

        ``grads`` defaults to the gradients currently held by the parameters.
        Every trainable parameter must have a gradient unless its name starts
        with one of the ``skip`` prefixes (heads that are inactive this step).
        """
        if grads is None:
            grads = params.grads()
        self._check(params, grads, skip)
        grads = self._clip({n: g for n, g in grads.items() if not params.is_frozen(n)})
        self._apply(params, grads)


class SGD(Optimizer):
    def _apply(self, params, grads):
        lr = self.cfg.lr
        for name, g in grads.items():
            t = params[name]
            t.data = (t.data - lr * g).astype(t.dtype)


class Adam(Optimizer):
    def __init__(self, cfg: OptimizerConfig):
        super().__init__(cfg)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def _apply(self, params, grads):
        c = self.cfg
        for name, g in grads.items():
            p = params[name]
            g = g.astype(np.float64)
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            step = self.t.get(name, 0) + 1
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * v + (1.0 - c.beta2) * g * g
            m_hat = m / (1.0 - c.beta1**step)
            v_hat = v / (1.0 - c.beta2**step)
            p.data = (p.data - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)).astype(p.dtype)
            self.m[name], self.v[name], self.t[name] = m, v, step


def make_optimizer(cfg: OptimizerConfig) -> Optimizer:
    kinds = {"sgd": SGD, "adam": Adam}
    if cfg.kind not in kinds:
        raise ValueError(f"unknown optimizer {cfg.kind!r}; expected one of {sorted(kinds)}")
    return kinds[cfg.kind](cfg)
