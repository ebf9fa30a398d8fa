"""Parameterised layers.  Each layer registers its tensors in a shared
:class:`ParameterSet` under ``<name>.<param>`` so models can share or
transplant sub-networks by name prefix."""

from __future__ import annotations

import math

import numpy as np

from .params import ParameterSet
from .recurrent import gru_cell, gru_scan, lstm_scan
from .tensor import ShapeError, Tensor, concat, get_default_dtype, getitem, pad, tsum


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(get_default_dtype())


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    return q.astype(get_default_dtype())


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=get_default_dtype())


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of (B, T, D) counting only positions where mask is 1."""
    m = np.asarray(mask, dtype=x.dtype)[:, :, None]
    counts = np.maximum(m.sum(axis=1), 1.0)
    return tsum(x * m, axis=1) * (1.0 / counts)


def statistics_pooling(x: Tensor, mask: np.ndarray | None = None, eps: float = 1e-5) -> Tensor:
    """Concatenate per-dimension mean and standard deviation over time: (B, T, D) -> (B, 2D)."""
    if x.ndim != 3:
        raise ShapeError(f"statistics_pooling expects (B, T, D), got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape[:2])
    mu = masked_mean(x, mask)
    centered = x - mu.reshape(x.shape[0], 1, x.shape[2])
    var = masked_mean(centered * centered, mask)
    # sqrt(var + eps) - sqrt(eps) keeps the gradient finite and gives exactly 0 for constant input
    std = (var + eps) ** 0.5 - math.sqrt(eps)
    return concat([mu, std], axis=1)


class Linear:
    def __init__(self, params: ParameterSet, name: str, in_dim: int, out_dim: int, rng, bias: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = params.add(f"{name}.weight", glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim)))
        self.bias = params.add(f"{name}.bias", zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear expects last dim {self.in_dim}, got input shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d:
    """Channels-last 2-D convolution with 'same' zero padding.

    Input (B, T, F, C_in) -> (B, ceil(T / s_t), ceil(F / s_f), C_out).
    """

    def __init__(self, params, name, in_channels, out_channels, kernel=(3, 3), stride=(2, 2), rng=None):
        kh, kw = kernel
        self.kernel, self.stride = (kh, kw), tuple(stride)
        self.in_channels, self.out_channels = in_channels, out_channels
        fan_in = kh * kw * in_channels
        self.weight = params.add(
            f"{name}.weight", glorot_uniform(rng, fan_in, kh * kw * out_channels, (fan_in, out_channels))
        )
        self.bias = params.add(f"{name}.bias", zeros(out_channels))

    @staticmethod
    def out_len(n: int, stride: int) -> int:
        return -(-n // stride)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"conv2d expects (B, T, F, {self.in_channels}), got {x.shape}")
        (kh, kw), (st, sf) = self.kernel, self.stride
        b, t, f, _ = x.shape
        t_out, f_out = self.out_len(t, st), self.out_len(f, sf)
        ph, pw = kh // 2, kw // 2
        xp = pad(x, ((0, 0), (ph, ph + st), (pw, pw + sf), (0, 0)))
        cols = []
        for i in range(kh):
            for j in range(kw):
                cols.append(getitem(xp, (slice(None), slice(i, i + st * t_out, st), slice(j, j + sf * f_out, sf))))
        patches = concat(cols, axis=-1)
        return patches @ self.weight + self.bias


class Conv1d:
    """Dilated 1-D convolution over time with 'same' zero padding: (B, T, C_in) -> (B, T, C_out)."""

    def __init__(self, params, name, in_channels, out_channels, kernel: int, dilation: int = 1, rng=None):
        self.kernel, self.dilation = kernel, dilation
        self.in_channels = in_channels
        fan_in = kernel * in_channels
        self.weight = params.add(
            f"{name}.weight", glorot_uniform(rng, fan_in, kernel * out_channels, (fan_in, out_channels))
        )
        self.bias = params.add(f"{name}.bias", zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"conv1d expects (B, T, {self.in_channels}), got {x.shape}")
        t = x.shape[1]
        half = self.dilation * (self.kernel - 1) // 2
        xp = pad(x, ((0, 0), (half, half), (0, 0)))
        cols = [getitem(xp, (slice(None), slice(k * self.dilation, k * self.dilation + t))) for k in range(self.kernel)]
        patches = concat(cols, axis=-1) if len(cols) > 1 else cols[0]
        return patches @ self.weight + self.bias


def _recurrent_weights(params, name, in_dim, hidden, gates, rng):
    w_x = params.add(f"{name}.w_x", glorot_uniform(rng, in_dim, hidden, (in_dim, gates * hidden)))
    w_h = params.add(f"{name}.w_h", np.concatenate([orthogonal(rng, hidden) for _ in range(gates)], axis=1))
    b = params.add(f"{name}.b", zeros(gates * hidden))
    return w_x, w_h, b


class GRUCell:
    def __init__(self, params, name, in_dim, hidden, rng):
        self.hidden = hidden
        self.w_x, self.w_h, self.b = _recurrent_weights(params, name, in_dim, hidden, 3, rng)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_cell(x, h, self.w_x, self.w_h, self.b)


class GRU:
    """(Bi)directional GRU over (B, T, I).  Returns (states (B, T, D*H), final (B, D*H))."""

    def __init__(self, params, name, in_dim, hidden, rng, bidirectional=False):
        self.hidden = hidden
        self.bidirectional = bidirectional
        self.fwd = _recurrent_weights(params, f"{name}.fwd", in_dim, hidden, 3, rng)
        self.bwd = _recurrent_weights(params, f"{name}.bwd", in_dim, hidden, 3, rng) if bidirectional else None

    @property
    def out_dim(self):
        return self.hidden * (2 if self.bidirectional else 1)

    def __call__(self, x: Tensor, mask=None):
        states = gru_scan(x, *self.fwd, mask=mask)
        final = states[:, -1]
        if not self.bidirectional:
            return states, final
        back = gru_scan(x, *self.bwd, mask=mask, reverse=True)
        return concat([states, back], axis=-1), concat([final, back[:, 0]], axis=-1)


class LSTM:
    """(Bi)directional LSTM; same return convention as :class:`GRU`."""

    def __init__(self, params, name, in_dim, hidden, rng, bidirectional=True):
        self.hidden = hidden
        self.bidirectional = bidirectional
        self.fwd = _recurrent_weights(params, f"{name}.fwd", in_dim, hidden, 4, rng)
        self.bwd = _recurrent_weights(params, f"{name}.bwd", in_dim, hidden, 4, rng) if bidirectional else None

    @property
    def out_dim(self):
        return self.hidden * (2 if self.bidirectional else 1)

    def __call__(self, x: Tensor, mask=None):
        states = lstm_scan(x, *self.fwd, mask=mask)
        final = states[:, -1]
        if not self.bidirectional:
            return states, final
        back = lstm_scan(x, *self.bwd, mask=mask, reverse=True)
        return concat([states, back], axis=-1), concat([final, back[:, 0]], axis=-1)
