"""Layer operations used by the two architectures.

``conv1d``, ``lstm_sequence`` and the two losses are fused primitives with
hand-written backward passes; the SE-Res2 block and attentive statistics
pooling are compositions of primitives.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    _sigmoid_np,
    as_tensor,
    clamp_min,
    concat,
    make_op,
    matmul,
    mean,
    relu,
    sigmoid,
    softmax,
    sqrt,
    tanh,
    tsum,
)

STD_EPS = 1e-8


def conv_output_length(t: int, kernel: int, stride: int = 1, pad: int = 0, dilation: int = 1) -> int:
    return (t + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def conv1d(x, w, b=None, stride: int = 1, pad: int = 0, dilation: int = 1) -> Tensor:
    """1-D cross-correlation. ``x`` is ``[C_in, T]`` or batched ``[B, C_in, T]``."""
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1 or dilation < 1 or pad < 0:
        raise ShapeError(f"invalid conv geometry stride={stride} pad={pad} dilation={dilation}", dim="stride")
    if w.ndim != 3:
        raise ShapeError(f"conv weight must be [C_out, C_in, K], got {w.shape}", dim="K")
    unbatched = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ShapeError(f"conv input must be [C_in, T] or [B, C_in, T], got {x.shape}", dim="C_in")
    xd = x.data[None] if unbatched else x.data
    bsz, c_in, t = xd.shape
    c_out, wc_in, k = w.shape
    if wc_in != c_in:
        raise ShapeError(f"C_in mismatch: input has {c_in} channels, weight expects {wc_in}", dim="C_in")
    span = dilation * (k - 1) + 1
    if t + 2 * pad < span:
        raise ShapeError(f"T={t} with pad={pad} is shorter than the receptive span {span}", dim="T")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ShapeError(f"bias must be [{c_out}], got {b.shape}", dim="C_out")
    t_out = conv_output_length(t, k, stride, pad, dilation)
    wd = w.data

    if k == 1 and stride == 1 and pad == 0:
        # pointwise conv: plain channel mixing
        w2 = wd[:, :, 0]
        y = np.matmul(w2, xd)

        def grads_core(gy):
            gw = np.einsum("bot,bct->oc", gy, xd)[:, :, None]
            gx = np.matmul(w2.T, gy)
            return gx, gw

    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
        win = sliding_window_view(xp, span, axis=2)[:, :, : stride * (t_out - 1) + 1 : stride, ::dilation]
        cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(bsz, t_out, c_in * k)
        w2 = wd.reshape(c_out, c_in * k)
        y = np.matmul(cols, w2.T).transpose(0, 2, 1)

        def grads_core(gy):
            gyt = gy.transpose(0, 2, 1)
            gw = (gyt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(wd.shape)
            gx = None
            if x.requires_grad:
                dcols = np.matmul(gyt, w2).reshape(bsz, t_out, c_in, k)
                gxp = np.zeros((bsz, c_in, t + 2 * pad), dtype=xd.dtype)
                if t_out <= k:
                    for i in range(t_out):
                        s0 = i * stride
                        gxp[:, :, s0 : s0 + span : dilation] += dcols[:, i]
                else:
                    last = stride * (t_out - 1) + 1
                    for j in range(k):
                        s0 = j * dilation
                        gxp[:, :, s0 : s0 + last : stride] += dcols[:, :, :, j].transpose(0, 2, 1)
                gx = gxp[:, :, pad : pad + t]
            return gx, gw

    if b is not None:
        y = y + b.data[:, None]
    y = np.ascontiguousarray(y)
    if unbatched:
        y = y[0]

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gy = g[None] if unbatched else g
        gx, gw = grads_core(gy)
        if gx is not None and unbatched:
            gx = gx[0]
        out = [gx, gw]
        if b is not None:
            out.append(gy.sum(axis=(0, 2)))
        return tuple(out)

    return make_op(y, parents, bw, "conv1d")


def linear(x, w, b=None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as ``[out, in]``."""
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear expects {w.shape[1]} input features, got {x.shape[-1]}", dim="in")
    y = matmul(x, w.transpose())
    if b is not None:
        y = y + b
    if squeeze:
        y = y.reshape(w.shape[0])
    return y


# ---------------------------------------------------------------------------
# recurrent


def lstm_cell(x, h, c, w_ih, w_hh, b) -> tuple[Tensor, Tensor]:
    """One LSTM step from primitives; gate order i, f, g, o."""
    z = linear(x, w_ih, b) + linear(h, w_hh)
    hdim = as_tensor(w_hh).shape[1]
    i = sigmoid(z[..., 0:hdim])
    f = sigmoid(z[..., hdim : 2 * hdim])
    g = tanh(z[..., 2 * hdim : 3 * hdim])
    o = sigmoid(z[..., 3 * hdim : 4 * hdim])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def lstm_sequence(x, w_ih, w_hh, b, h0=None, c0=None) -> Tensor:
    """Unidirectional LSTM over ``x`` (``[T, D]`` or ``[B, T, D]``); returns all hidden states.

    Backward is hand-written backpropagation through time.
    """
    x, w_ih, w_hh, b = (as_tensor(v) for v in (x, w_ih, w_hh, b))
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    bsz, steps, d_in = xd.shape
    four_h, wd_in = w_ih.shape
    hdim = four_h // 4
    if four_h != 4 * hdim or wd_in != d_in:
        raise ShapeError(f"w_ih must be [4H, {d_in}], got {w_ih.shape}", dim="D_in")
    if w_hh.shape != (four_h, hdim):
        raise ShapeError(f"w_hh must be [{four_h}, {hdim}], got {w_hh.shape}", dim="H")
    if b.shape != (four_h,):
        raise ShapeError(f"bias must be [{four_h}], got {b.shape}", dim="H")
    if steps < 1:
        raise ShapeError("LSTM needs at least one time step", dim="T")
    dtype = xd.dtype
    h0 = Tensor(np.zeros(hdim, dtype=dtype)) if h0 is None else as_tensor(h0)
    c0 = Tensor(np.zeros(hdim, dtype=dtype)) if c0 is None else as_tensor(c0)
    h0d = np.broadcast_to(h0.data, (bsz, hdim))
    c0d = np.broadcast_to(c0.data, (bsz, hdim))

    wih, whh = w_ih.data, w_hh.data
    xw = xd @ wih.T + b.data
    hs = np.empty((bsz, steps, hdim), dtype=dtype)
    cs = np.empty((bsz, steps, hdim), dtype=dtype)
    gates = np.empty((bsz, steps, four_h), dtype=dtype)
    h, c = h0d, c0d
    for t in range(steps):
        z = xw[:, t] + h @ whh.T
        ifo = _sigmoid_np(z[:, np.r_[0 : 2 * hdim, 3 * hdim : 4 * hdim]])
        i, f, o = ifo[:, :hdim], ifo[:, hdim : 2 * hdim], ifo[:, 2 * hdim :]
        g = np.tanh(z[:, 2 * hdim : 3 * hdim])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t, :hdim], gates[:, t, hdim : 2 * hdim] = i, f
        gates[:, t, 2 * hdim : 3 * hdim], gates[:, t, 3 * hdim :] = g, o
        hs[:, t], cs[:, t] = h, c

    def bw(gy):
        gy = gy[None] if unbatched else gy
        dz_all = np.empty((bsz, steps, four_h), dtype=dtype)
        gwhh = np.zeros_like(whh)
        dh_next = np.zeros((bsz, hdim), dtype=dtype)
        dc_next = np.zeros((bsz, hdim), dtype=dtype)
        for t in range(steps - 1, -1, -1):
            i = gates[:, t, :hdim]
            f = gates[:, t, hdim : 2 * hdim]
            g = gates[:, t, 2 * hdim : 3 * hdim]
            o = gates[:, t, 3 * hdim :]
            c_prev = cs[:, t - 1] if t > 0 else c0d
            h_prev = hs[:, t - 1] if t > 0 else h0d
            tc = np.tanh(cs[:, t])
            dh = gy[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :hdim] = dc * g * i * (1.0 - i)
            dz[:, hdim : 2 * hdim] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * hdim : 3 * hdim] = dc * i * (1.0 - g * g)
            dz[:, 3 * hdim :] = dh * tc * o * (1.0 - o)
            gwhh += dz.T @ h_prev
            dh_next = dz @ whh
            dc_next = dc * f
        flat = dz_all.reshape(-1, four_h)
        gx = (dz_all @ wih) if x.requires_grad else None
        if gx is not None and unbatched:
            gx = gx[0]
        gwih = flat.T @ xd.reshape(-1, d_in)
        gb = flat.sum(axis=0)
        gh0 = dh_next.sum(axis=0) if h0.ndim == 1 else dh_next
        gc0 = dc_next.sum(axis=0) if c0.ndim == 1 else dc_next
        return gx, gwih, gwhh, gb, gh0, gc0

    out = hs[0] if unbatched else hs
    return make_op(out, (x, w_ih, w_hh, b, h0, c0), bw, "lstm_sequence")


# ---------------------------------------------------------------------------
# losses


def _as_labels(y, n: int) -> np.ndarray:
    arr = np.asarray(y).reshape(-1)
    if arr.size not in (1, n):
        raise ShapeError(f"expected {n} labels, got {arr.size}", dim="B")
    return np.broadcast_to(arr, (n,))


def bce_with_logit(logit, y) -> Tensor:
    """Mean binary cross-entropy on raw logits (stable softplus form)."""
    logit = as_tensor(logit)
    z = logit.data.reshape(-1)
    yy = _as_labels(y, z.size).astype(z.dtype)
    if np.any((yy != 0) & (yy != 1)):
        raise ConfigError("binary labels must be 0 or 1")
    n = z.size
    loss = np.maximum(z, 0) - z * yy + np.log1p(np.exp(-np.abs(z)))
    shape = logit.shape

    def bw(g):
        return (((_sigmoid_np(z) - yy) * (g / n)).reshape(shape).astype(z.dtype),)

    return make_op(np.asarray(loss.mean(), dtype=z.dtype), (logit,), bw, "bce_with_logit")


def cross_entropy(logits, y) -> Tensor:
    """Mean multi-class cross-entropy; ``logits`` is ``[S]`` or ``[B, S]``."""
    logits = as_tensor(logits)
    ld = logits.data
    unbatched = ld.ndim == 1
    l2 = ld[None] if unbatched else ld
    n, s = l2.shape
    yy = _as_labels(y, n).astype(np.int64)
    if np.any(yy < 0) or np.any(yy >= s):
        raise ConfigError(f"class id out of range [0, {s})")
    m = l2.max(axis=1, keepdims=True)
    shifted = l2 - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, yy]).mean()

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, yy] -= 1.0
        p *= g / n
        return ((p[0] if unbatched else p).astype(ld.dtype),)

    return make_op(np.asarray(loss, dtype=ld.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# composite blocks


def squeeze_excite(x: Tensor, w1, b1, w2, b2) -> Tensor:
    """Channel gate in (0, 1) from the time-averaged input, ``[..., C, 1]``."""
    s = mean(x, axis=-1, keepdims=True)
    s = relu(conv1d(s, w1, b1))
    return sigmoid(conv1d(s, w2, b2))


def se_res2_block(
    x,
    params: Mapping[str, Tensor],
    kernel: int,
    dilation: int,
    scale: int = 4,
    bypass_se: bool = False,
    capture: dict | None = None,
) -> Tensor:
    """1x1 conv -> Res2 dilated multi-scale conv -> 1x1 conv -> SE gate -> residual add.

    ``params`` keys: ``tdnn1.weight/bias``, ``res2.{i}.weight/bias`` for
    ``i in 1..scale-1``, ``tdnn2.weight/bias``, ``se.conv1.weight/bias``,
    ``se.conv2.weight/bias``. Padding equals dilation so length is kept for
    ``kernel == 3``.
    """
    x = as_tensor(x)
    channels = x.shape[-2]
    if scale < 1 or channels % scale:
        raise ConfigError(f"channels ({channels}) not divisible by Res2 scale ({scale})")
    pad = dilation * (kernel - 1) // 2
    width = channels // scale

    h = relu(conv1d(x, params["tdnn1.weight"], params["tdnn1.bias"]))
    chunks = [h[..., i * width : (i + 1) * width, :] for i in range(scale)]
    outs = [chunks[0]]
    prev = None
    for i in range(1, scale):
        inp = chunks[i] if prev is None else chunks[i] + prev
        prev = relu(
            conv1d(inp, params[f"res2.{i}.weight"], params[f"res2.{i}.bias"], pad=pad, dilation=dilation)
        )
        outs.append(prev)
    h = concat(outs, axis=-2) if scale > 1 else outs[0]
    h = relu(conv1d(h, params["tdnn2.weight"], params["tdnn2.bias"]))
    if not bypass_se:
        gate = squeeze_excite(
            h, params["se.conv1.weight"], params["se.conv1.bias"], params["se.conv2.weight"], params["se.conv2.bias"]
        )
        if capture is not None:
            capture["se_gate"] = gate
        h = h * gate
    return x + h


def attentive_stats_pool(x, params: Mapping[str, Tensor] | None = None, eps: float = STD_EPS, capture: dict | None = None) -> Tensor:
    """Attention-weighted mean and std over time, concatenated to ``[..., 2C]``.

    Attention is channel-dependent: ``softmax_t(W2 tanh(W1 x + b1) + b2)``.
    With ``params`` None the weights are uniform over time.
    """
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("attentive pooling needs T >= 1", dim="T")
    if params is None:
        t = x.shape[-1]
        w = Tensor(np.full(x.shape, 1.0 / t, dtype=x.dtype))
    else:
        a = tanh(conv1d(x, params["attention.conv1.weight"], params["attention.conv1.bias"]))
        w = softmax(conv1d(a, params["attention.conv2.weight"], params["attention.conv2.bias"]), axis=-1)
    if capture is not None:
        capture["attention"] = w
    mu = tsum(w * x, axis=-1, keepdims=True)
    dev = x - mu
    var = tsum(w * dev * dev, axis=-1, keepdims=True)
    std = sqrt(clamp_min(var, eps))
    return concat([mu, std], axis=-2).reshape(*x.shape[:-2], 2 * x.shape[-2])
