"""GRU and LSTM recurrences.

``gru_cell``/``lstm_cell`` are composed from core ops and used for
step-by-step decoding.  ``gru_scan``/``lstm_scan`` run a whole (masked)
sequence as a single graph node with hand-written backpropagation through
time, which keeps the tape short for long encoder inputs.  Both paths
implement the same equations:

GRU:  r = sig(x Wx_r + b_r + h Wh_r), z = sig(x Wx_z + b_z + h Wh_z),
      n = tanh(x Wx_n + b_n + r * (h Wh_n)), h' = (1 - z) n + z h
LSTM: i, f, o = sig(.), g = tanh(.) of x Wx + h Wh + b,
      c' = f c + i g, h' = o tanh(c')

Masked steps (mask 0) carry the previous state through unchanged.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _node, _sigmoid, as_tensor, sigmoid, tanh


def gru_cell(x: Tensor, h: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    hidden = h.shape[-1]
    gx = x @ w_x + b
    gh = h @ w_h
    r = sigmoid(gx[..., :hidden] + gh[..., :hidden])
    z = sigmoid(gx[..., hidden : 2 * hidden] + gh[..., hidden : 2 * hidden])
    n = tanh(gx[..., 2 * hidden :] + r * gh[..., 2 * hidden :])
    return (1.0 - z) * n + z * h


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    hidden = h.shape[-1]
    a = x @ w_x + h @ w_h + b
    i = sigmoid(a[..., :hidden])
    f = sigmoid(a[..., hidden : 2 * hidden])
    g = tanh(a[..., 2 * hidden : 3 * hidden])
    o = sigmoid(a[..., 3 * hidden :])
    c_new = f * c + i * g
    return o * tanh(c_new), c_new


def _time_order(steps: int, reverse: bool):
    return range(steps - 1, -1, -1) if reverse else range(steps)


def _mask_array(mask, batch, steps, dtype):
    if mask is None:
        return np.ones((batch, steps, 1), dtype=dtype)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return m.reshape(batch, steps, 1).astype(dtype)


def gru_scan(x, w_x, w_h, b, mask=None, reverse: bool = False) -> Tensor:
    """Run a GRU over ``x`` of shape (B, T, I); returns all states (B, T, H).

    With ``reverse`` the recurrence starts at the last step.  The final state
    is ``out[:, -1]`` forward and ``out[:, 0]`` reversed, because masked
    (padded) steps hold the state fixed.
    """
    x, w_x, w_h, b = (as_tensor(t) for t in (x, w_x, w_h, b))
    batch, steps, _ = x.shape
    hidden = w_h.shape[0]
    m = _mask_array(mask, batch, steps, x.dtype)
    gx_all = x.data @ w_x.data + b.data
    wh = w_h.data
    h = np.zeros((batch, hidden), dtype=x.dtype)
    out = np.zeros((batch, steps, hidden), dtype=x.dtype)
    cache = [None] * steps
    for t in _time_order(steps, reverse):
        gx = gx_all[:, t]
        gh = h @ wh
        r = _sigmoid(gx[:, :hidden] + gh[:, :hidden])
        z = _sigmoid(gx[:, hidden : 2 * hidden] + gh[:, hidden : 2 * hidden])
        ghn = gh[:, 2 * hidden :]
        n = np.tanh(gx[:, 2 * hidden :] + r * ghn)
        h_new = (1.0 - z) * n + z * h
        mt = m[:, t]
        cache[t] = (h, r, z, n, ghn)
        h = mt * h_new + (1.0 - mt) * h
        out[:, t] = h

    def backward(g):
        d_gx = np.zeros_like(gx_all)
        d_wh = np.zeros_like(wh)
        dh_next = np.zeros((batch, hidden), dtype=g.dtype)
        for t in _time_order(steps, not reverse):
            h_prev, r, z, n, ghn = cache[t]
            mt = m[:, t]
            dh = g[:, t] + dh_next
            dh_new = mt * dh
            dh_prev = (1.0 - mt) * dh + dh_new * z
            dn = dh_new * (1.0 - z)
            dz = dh_new * (h_prev - n)
            dan = dn * (1.0 - n * n)
            dr = dan * ghn
            dar = dr * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            d_gh = np.concatenate([dar, daz, dan * r], axis=1)
            d_gx[:, t] = np.concatenate([dar, daz, dan], axis=1)
            dh_prev += d_gh @ wh.T
            d_wh += h_prev.T @ d_gh
            dh_next = dh_prev
        flat = d_gx.reshape(-1, d_gx.shape[-1])
        d_x = d_gx @ w_x.data.T
        d_wx = x.data.reshape(-1, x.shape[-1]).T @ flat
        d_b = flat.sum(axis=0)
        return d_x, d_wx, d_wh, d_b

    return _node(out, (x, w_x, w_h, b), backward)


def lstm_scan(x, w_x, w_h, b, mask=None, reverse: bool = False) -> Tensor:
    """LSTM counterpart of :func:`gru_scan`; returns hidden states (B, T, H)."""
    x, w_x, w_h, b = (as_tensor(t) for t in (x, w_x, w_h, b))
    batch, steps, _ = x.shape
    hidden = w_h.shape[0]
    m = _mask_array(mask, batch, steps, x.dtype)
    gx_all = x.data @ w_x.data + b.data
    wh = w_h.data
    h = np.zeros((batch, hidden), dtype=x.dtype)
    c = np.zeros((batch, hidden), dtype=x.dtype)
    out = np.zeros((batch, steps, hidden), dtype=x.dtype)
    cache = [None] * steps
    for t in _time_order(steps, reverse):
        a = gx_all[:, t] + h @ wh
        i = _sigmoid(a[:, :hidden])
        f = _sigmoid(a[:, hidden : 2 * hidden])
        gg = np.tanh(a[:, 2 * hidden : 3 * hidden])
        o = _sigmoid(a[:, 3 * hidden :])
        c_new = f * c + i * gg
        tc = np.tanh(c_new)
        h_new = o * tc
        mt = m[:, t]
        cache[t] = (h, c, i, f, gg, o, tc)
        h = mt * h_new + (1.0 - mt) * h
        c = mt * c_new + (1.0 - mt) * c
        out[:, t] = h

    def backward(g):
        d_gx = np.zeros_like(gx_all)
        d_wh = np.zeros_like(wh)
        dh_next = np.zeros((batch, hidden), dtype=g.dtype)
        dc_next = np.zeros((batch, hidden), dtype=g.dtype)
        for t in _time_order(steps, not reverse):
            h_prev, c_prev, i, f, gg, o, tc = cache[t]
            mt = m[:, t]
            dh = g[:, t] + dh_next
            dh_new = mt * dh
            dc_new = mt * dc_next + dh_new * o * (1.0 - tc * tc)
            do = dh_new * tc
            di = dc_new * gg
            dgg = dc_new * i
            df = dc_new * c_prev
            da = np.concatenate(
                [di * i * (1.0 - i), df * f * (1.0 - f), dgg * (1.0 - gg * gg), do * o * (1.0 - o)],
                axis=1,
            )
            d_gx[:, t] = da
            dh_next = (1.0 - mt) * dh + da @ wh.T
            dc_next = (1.0 - mt) * dc_next + dc_new * f
            d_wh += h_prev.T @ da
        flat = d_gx.reshape(-1, d_gx.shape[-1])
        d_x = d_gx @ w_x.data.T
        d_wx = x.data.reshape(-1, x.shape[-1]).T @ flat
        d_b = flat.sum(axis=0)
        return d_x, d_wx, d_wh, d_b

    return _node(out, (x, w_x, w_h, b), backward)
