"""Differentiable kernels for the fixed network topologies.

Each op is a ``*_forward`` / ``*_backward`` pair in the usual numpy style:
the forward returns ``(out, cache)`` and the backward consumes the upstream
gradient plus that cache. All ops take a leading batch axis; the spatial ops
also accept an unbatched ``[C, H, W]`` sample and return unbatched results.
"""
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


@dataclass
class Parameter:
    """A trainable array with its gradient and optimizer velocity."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def _as_batch(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-D or {ndim}-D input, got shape {x.shape}")
    return x, False


# -- convolution ------------------------------------------------------------

def conv2d_forward(x, w, b):
    """Valid 3x3 cross-correlation, stride 1.

    x: [N, C_in, H, W] (or [C_in, H, W]); w: [C_out, C_in, 3, 3]; b: [C_out].
    """
    x, squeeze = _as_batch(x, 4)
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[1] != c or w.shape[2:] != (3, 3):
        raise ShapeError(f"kernel shape {w.shape} does not match input channels {c}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    if h < 3 or wd < 3:
        raise ShapeError(f"input spatial size {h}x{wd} is smaller than the 3x3 kernel")
    ho, wo = h - 2, wd - 2
    # [N, C, Ho, Wo, 3, 3] -> rows of C*9 patches
    cols = sliding_window_view(x, (3, 3), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    out = out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, w, squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_backward(dout, cache):
    xshape, cols, w, squeeze = cache
    n, c, h, wd = xshape
    ho, wo = h - 2, wd - 2
    if squeeze:
        dout = dout[None]
    dflat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    # patch gradient laid out (i, j, c) so each shifted add reads a contiguous block
    wk = w.transpose(2, 3, 1, 0).reshape(9 * c, w.shape[0])
    dcols = (dflat @ wk.T).reshape(n, ho, wo, 3, 3, c)
    dx = np.zeros((n, h, wd, c))
    for i in range(3):
        for j in range(3):
            dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
    dx = dx.transpose(0, 3, 1, 2)
    return (dx[0] if squeeze else dx), dw, db


# -- pooling ----------------------------------------------------------------

def maxpool2_forward(x):
    """Non-overlapping 2x2 max pooling; odd trailing rows/columns are dropped."""
    x, squeeze = _as_batch(x, 4)
    n, c, h, wd = x.shape
    if h < 2 or wd < 2:
        raise ShapeError(f"maxpool2 needs H, W >= 2, got {h}x{wd}")
    ho, wo = h // 2, wd // 2
    x = x[:, :, :2 * ho, :2 * wo]
    # window elements in row-major order
    quads = (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    # first maximum wins ties
    idx = np.full(out.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        idx[quads[k] == out] = k
    cache = ((n, c, h, wd), idx, squeeze)
    return (out[0] if squeeze else out), cache


def maxpool2_backward(dout, cache):
    xshape, idx, squeeze = cache
    n, c, h, wd = xshape
    if squeeze:
        dout = dout[None]
    ho, wo = idx.shape[2], idx.shape[3]
    dx = np.zeros(xshape)
    for k, (r, q) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, r:2 * ho:2, q:2 * wo:2] = np.where(idx == k, dout, 0.0)
    return dx[0] if squeeze else dx


# -- dense ------------------------------------------------------------------

def linear_forward(x, w, b):
    """x: [N, D_in] (or [D_in]); w: [D_out, D_in]; b: [D_out]."""
    x, squeeze = _as_batch(x, 2)
    if w.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear shapes disagree: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x @ w.T + b
    return (out[0] if squeeze else out), (x, w, squeeze)


def linear_backward(dout, cache):
    x, w, squeeze = cache
    if squeeze:
        dout = dout[None]
    dx = dout @ w
    dw = dout.T @ x
    db = dout.sum(axis=0)
    return (dx[0] if squeeze else dx), dw, db


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


# -- loss -------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce_forward(logits, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probabilities, cache)``. A single sample ([K] logits and
    a scalar label) gives the plain -ln p[label].
    """
    logits, squeeze = _as_batch(logits, 2)
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    k = logits.shape[1]
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels must be integers in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)
    cache = (probs, labels, squeeze)
    return loss, (probs[0] if squeeze else probs), cache


def softmax_ce_backward(cache, dloss=1.0):
    probs, labels, squeeze = cache
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d *= dloss / n
    return d[0] if squeeze else d


# -- recurrent --------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(x, w_ih, w_hh, b, h0=None, c0=None):
    """Single LSTM layer over a batch of sequences.

    x: [N, T, D]; w_ih: [4H, D]; w_hh: [4H, H]; b: [4H]. Gate blocks are
    stacked in the order input, forget, output, candidate. Returns the hidden
    states [N, T, H].
    """
    x, squeeze = _as_batch(x, 3)
    n, t_len, d = x.shape
    hid = w_hh.shape[1]
    if t_len < 1:
        raise ShapeError("lstm needs at least one time step")
    if w_ih.shape != (4 * hid, d) or w_hh.shape != (4 * hid, hid) or b.shape != (4 * hid,):
        raise ShapeError(
            f"lstm shapes disagree: x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}")
    h_prev = np.zeros((n, hid)) if h0 is None else np.broadcast_to(h0, (n, hid)).astype(np.float64)
    c_prev = np.zeros((n, hid)) if c0 is None else np.broadcast_to(c0, (n, hid)).astype(np.float64)
    h_init, c_init = h_prev, c_prev

    xproj = x @ w_ih.T + b  # input contribution for all steps at once
    gates = np.empty((n, t_len, 4 * hid))
    cs = np.empty((n, t_len, hid))
    hs = np.empty((n, t_len, hid))
    for t in range(t_len):
        a = xproj[:, t] + h_prev @ w_hh.T
        g = gates[:, t]
        g[:, :3 * hid] = _sigmoid(a[:, :3 * hid])
        g[:, 3 * hid:] = np.tanh(a[:, 3 * hid:])
        c_prev = g[:, hid:2 * hid] * c_prev + g[:, :hid] * g[:, 3 * hid:]
        h_prev = g[:, 2 * hid:3 * hid] * np.tanh(c_prev)
        cs[:, t] = c_prev
        hs[:, t] = h_prev
    cache = (x, w_ih, w_hh, gates, cs, hs, h_init, c_init, squeeze)
    return (hs[0] if squeeze else hs), cache


def lstm_backward(dh_all, cache):
    """Backpropagation through time.

    Returns ``(dx, dw_ih, dw_hh, db, dh0, dc0)``.
    """
    x, w_ih, w_hh, gates, cs, hs, h_init, c_init, squeeze = cache
    if squeeze:
        dh_all = dh_all[None]
    n, t_len, _ = x.shape
    hid = w_hh.shape[1]
    da_all = np.empty((n, t_len, 4 * hid))
    dh_next = np.zeros((n, hid))
    dc_next = np.zeros((n, hid))
    for t in reversed(range(t_len)):
        g = gates[:, t]
        i, f, o, cand = g[:, :hid], g[:, hid:2 * hid], g[:, 2 * hid:3 * hid], g[:, 3 * hid:]
        c = cs[:, t]
        c_prev = cs[:, t - 1] if t > 0 else c_init
        tc = np.tanh(c)
        dh = dh_all[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da = da_all[:, t]
        da[:, :hid] = dc * cand * i * (1.0 - i)
        da[:, hid:2 * hid] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * hid:3 * hid] = dh * tc * o * (1.0 - o)
        da[:, 3 * hid:] = dc * i * (1.0 - cand * cand)
        dh_next = da @ w_hh
        dc_next = dc * f
    h_prevs = np.concatenate([h_init[:, None], hs[:, :-1]], axis=1)
    da_flat = da_all.reshape(n * t_len, 4 * hid)
    dw_ih = da_flat.T @ x.reshape(n * t_len, -1)
    dw_hh = da_flat.T @ h_prevs.reshape(n * t_len, hid)
    db = da_flat.sum(axis=0)
    dx = da_all @ w_ih
    if squeeze:
        dx = dx[0]
    return dx, dw_ih, dw_hh, db, dh_next, dc_next


def mean_pool_time_forward(x):
    """Average over the time axis: [N, T, H] -> [N, H]."""
    x, squeeze = _as_batch(x, 3)
    if x.shape[1] < 1:
        raise ShapeError("mean pooling needs at least one time step")
    out = x.mean(axis=1)
    return (out[0] if squeeze else out), (x.shape, squeeze)


def mean_pool_time_backward(dout, cache):
    shape, squeeze = cache
    if squeeze:
        dout = dout[None]
    dx = np.broadcast_to(dout[:, None, :] / shape[1], shape).copy()
    return dx[0] if squeeze else dx


def concat_forward(a, b):
    """Join feature vectors along the last axis ([N, D1] + [N, D2])."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim not in (1, 2) or a.ndim != b.ndim:
        raise ShapeError(f"concat needs two vectors or two batches of vectors, got {a.shape}, {b.shape}")
    if a.ndim == 2 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch sizes differ: {a.shape[0]} vs {b.shape[0]}")
    return np.concatenate([a, b], axis=-1), a.shape[-1]


def concat_backward(dout, split):
    return dout[..., :split], dout[..., split:]
