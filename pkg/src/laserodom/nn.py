"""Minimal differentiable operations in numpy.

Each operation is a ``*_forward`` returning ``(output, cache)`` and a
``*_backward`` taking the upstream gradient and the cache.  Arrays are
batch-first: 1D signals are ``(batch, channels, length)`` and vectors are
``(batch, features)``.  Everything works in float32 or float64; gradient
checks run in float64.
"""

from __future__ import annotations

import numpy as np

# closed set of operations the odometry network is assembled from
SUBSTRATE_OPS = (
    "conv1d",
    "avgpool1d",
    "relu",
    "affine",
    "lstm_cell",
    "softmax_cross_entropy",
    "squared_error",
    "absolute_error",
    "add",
    "concat",
)


def substrate_ops() -> tuple[str, ...]:
    return SUBSTRATE_OPS


# -- convolution ------------------------------------------------------------------


def conv_output_length(length: int, kernel: int, stride: int) -> int:
    pad = kernel // 2
    return (length + 2 * pad - kernel) // stride + 1


def conv1d_forward(x, w, b, stride=1):
    """Cross-correlation with half-kernel zero padding.

    x: (B, Cin, L), w: (Cout, Cin, K), b: (Cout,) -> (B, Cout, Lout)
    """
    bsz, cin, length = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ValueError(f"conv expects {cin_w} input channels, got {cin}")
    pad = k // 2
    lout = conv_output_length(length, k, stride)
    xp = np.zeros((bsz, cin, length + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + length] = x
    span = stride * (lout - 1) + 1
    # im2col: one contiguous (Cin*K, Lout) block per sample, then a single matmul
    cols = np.empty((bsz, cin, k, lout), dtype=x.dtype)
    for j in range(k):
        cols[:, :, j, :] = xp[:, :, j : j + span : stride]
    cols = cols.reshape(bsz, cin * k, lout)
    out = np.matmul(w.reshape(cout, cin * k), cols)
    out += b[None, :, None]
    return out, (cols, w, stride, length)


def conv1d_backward(dout, cache):
    cols, w, stride, length = cache
    cout, cin, k = w.shape
    bsz, _, lout = dout.shape
    pad = k // 2
    span = stride * (lout - 1) + 1
    dw = np.tensordot(dout, cols, axes=([0, 2], [0, 2])).reshape(w.shape).astype(w.dtype, copy=False)
    dcols = np.matmul(w.reshape(cout, cin * k).T, dout).reshape(bsz, cin, k, lout)
    dxp = np.zeros((bsz, cin, length + 2 * pad), dtype=dcols.dtype)
    for j in range(k):
        dxp[:, :, j : j + span : stride] += dcols[:, :, j, :]
    db = dout.sum(axis=(0, 2))
    return dxp[:, :, pad : pad + length], dw, db


# -- pooling / activation -----------------------------------------------------------


def avgpool1d_forward(x, kernel=2):
    """Non-overlapping average pool (stride == kernel); output length floor(L / kernel)."""
    n = x.shape[2] // kernel
    out = x[:, :, : n * kernel].reshape(x.shape[0], x.shape[1], n, kernel).mean(axis=3)
    return out, (x.shape, kernel)


def avgpool1d_backward(dout, cache):
    shape, kernel = cache
    n = dout.shape[2]
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, : n * kernel] = np.repeat(dout / kernel, kernel, axis=2)
    return dx


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


# -- dense ------------------------------------------------------------------------------


def affine_forward(x, w, b):
    """x: (B, I), w: (O, I), b: (O,) -> (B, O)"""
    return x @ w.T + b, (x, w)


def affine_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def concat_forward(a, b):
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(dout, split):
    return dout[:, :split], dout[:, split:]


# -- LSTM -----------------------------------------------------------------------------------


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _lstm_gates(z, c_prev):
    hsz = c_prev.shape[1]
    i = sigmoid(z[:, :hsz])
    f = sigmoid(z[:, hsz : 2 * hsz])
    g = np.tanh(z[:, 2 * hsz : 3 * hsz])
    o = sigmoid(z[:, 3 * hsz :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return i, f, g, o, c, tc


def lstm_cell_forward(x, h_prev, c_prev, w_ih, w_hh, b):
    """One LSTM step, gate order (input, forget, cell, output).

    w_ih: (4H, I), w_hh: (4H, H), b: (4H,)
    """
    z = x @ w_ih.T + h_prev @ w_hh.T + b
    i, f, g, o, c, tc = _lstm_gates(z, c_prev)
    h = o * tc
    return h, c, (x, h_prev, c_prev, w_ih, w_hh, i, f, g, o, tc)


def _lstm_gate_grad(dh, dc_next, c_prev, i, f, g, o, tc):
    dc = dc_next + dh * o * (1.0 - tc * tc)
    do = dh * tc * o * (1.0 - o)
    di = dc * g * i * (1.0 - i)
    df = dc * c_prev * f * (1.0 - f)
    dg = dc * i * (1.0 - g * g)
    return np.concatenate([di, df, dg, do], axis=1), dc * f


def lstm_cell_backward(dh, dc, cache):
    x, h_prev, c_prev, w_ih, w_hh, i, f, g, o, tc = cache
    dz, dc_prev = _lstm_gate_grad(dh, dc, c_prev, i, f, g, o, tc)
    return dz @ w_ih, dz @ w_hh, dc_prev, dz.T @ x, dz.T @ h_prev, dz.sum(axis=0)


def lstm_layer_forward(xs, h0, c0, w_ih, w_hh, b):
    """Run a layer over a whole window. xs: (T, B, I) -> hs: (T, B, H).

    The input projection is one matrix product for all steps.
    """
    t_len, bsz, _ = xs.shape
    hsz = h0.shape[1]
    zin = (xs.reshape(t_len * bsz, -1) @ w_ih.T).reshape(t_len, bsz, 4 * hsz) + b
    hs = np.empty((t_len, bsz, hsz), dtype=zin.dtype)
    steps = []
    h, c = h0, c0
    for t in range(t_len):
        z = zin[t] + h @ w_hh.T
        i, f, g, o, c_new, tc = _lstm_gates(z, c)
        steps.append((h, c, i, f, g, o, tc))
        c = c_new
        h = o * tc
        hs[t] = h
    return hs, (h, c), (xs, w_ih, w_hh, steps)


def lstm_layer_backward(dhs, cache, dh_last=None, dc_last=None):
    xs, w_ih, w_hh, steps = cache
    t_len, bsz, _ = xs.shape
    hsz = w_hh.shape[1]
    dh_next = np.zeros((bsz, hsz), dtype=dhs.dtype) if dh_last is None else dh_last
    dc_next = np.zeros((bsz, hsz), dtype=dhs.dtype) if dc_last is None else dc_last
    dzs = np.empty((t_len, bsz, 4 * hsz), dtype=dhs.dtype)
    hprev = np.empty((t_len, bsz, hsz), dtype=dhs.dtype)
    for t in reversed(range(t_len)):
        h_prev, c_prev, i, f, g, o, tc = steps[t]
        dz, dc_next = _lstm_gate_grad(dhs[t] + dh_next, dc_next, c_prev, i, f, g, o, tc)
        dzs[t] = dz
        hprev[t] = h_prev
        dh_next = dz @ w_hh
    dz2 = dzs.reshape(t_len * bsz, -1)
    dw_ih = dz2.T @ xs.reshape(t_len * bsz, -1)
    dw_hh = dz2.T @ hprev.reshape(t_len * bsz, -1)
    dxs = (dz2 @ w_ih).reshape(xs.shape)
    return dxs, dw_ih, dw_hh, dz2.sum(axis=0), dh_next, dc_next


# -- losses ------------------------------------------------------------------------------------


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Per-sample ``-log softmax(logits)[label]`` and its gradient wrt the logits."""
    logp = log_softmax(logits)
    idx = np.arange(logits.shape[0])
    loss = -logp[idx, labels]
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    return loss, grad


def squared_error(pred, target):
    r = pred - target
    return r * r, 2.0 * r


def absolute_error(pred, target):
    """|pred - target| (the 2-norm of a scalar); subgradient 0 at the kink."""
    r = pred - target
    return np.abs(r), np.sign(r)


# -- finite differences ------------------------------------------------------------------------


def numerical_gradient(f, x, eps=1e-6):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f()
        flat[k] = orig - eps
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-12):
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)`` of one tensor.

    Normalising by the tensor's largest entry keeps finite-difference noise
    on near-zero entries from dominating the comparison.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), floor)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)
