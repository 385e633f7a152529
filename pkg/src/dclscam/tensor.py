"""Minimal reverse-mode differentiation core.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  :func:`backward`
replays those closures in reverse topological order.  Data is float32 by
default; float64 tensors flow through the same code so the finite
difference oracle can run at full precision.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "add",
    "backward",
    "bilinear_resize",
    "conv2d",
    "finite_diff_check",
    "global_avg_pool",
    "linear",
    "relu",
    "resize_matrix",
    "softmax_cross_entropy",
    "star_relu",
]


class Tensor:
    """N-d float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _op=""):
        self.data = np.ascontiguousarray(data, dtype=np.float32 if dtype is None else dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'!r})"


def _result(data, parents, op, backward_fn):
    out = Tensor(data, dtype=data.dtype, _parents=tuple(parents), _op=op)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out, grad=None):
    """Fill ``.grad`` on every tensor reachable from ``out``.

    ``grad`` seeds the output gradient and is required unless ``out`` is a
    scalar.  A graph can be differentiated once; leaf buffers must be reset
    with ``zero_grad`` between passes.
    """
    if out._consumed:
        raise RuntimeError("backward already called on this graph; run a new forward pass")
    if not out.requires_grad:
        raise RuntimeError("output does not depend on any tensor that requires grad")
    if grad is None:
        if out.size != 1:
            raise ValueError(f"grad seed required for non-scalar output of shape {out.shape}")
        grad = np.ones_like(out.data)
    order = _topo_order(out)
    for node in order:
        if node._parents:
            continue
        if node.requires_grad and node.grad is not None:
            raise RuntimeError(
                "gradient buffer of a leaf tensor was not reset; call zero_grad() before backward"
            )
    for node in order:
        if node._parents:
            node.grad = None
    out.grad = np.array(grad, dtype=out.data.dtype).reshape(out.shape)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        node._consumed = True
        node._backward = None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def _bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), "add", _bw)


def relu(x):
    mask = x.data > 0

    def _bw(g):
        _accumulate(x, g * mask)

    return _result(x.data * mask, (x,), "relu", _bw)


def star_relu(x, scale, bias):
    """``scale * relu(x)**2 + bias`` with scalar learnable scale and bias."""
    r = np.maximum(x.data, 0)
    r2 = r * r
    s = scale.data.reshape(())
    out = s * r2 + bias.data.reshape(())

    def _bw(g):
        _accumulate(x, g * (2 * s) * r)
        _accumulate(scale, np.sum(g * r2, dtype=np.float64))
        _accumulate(bias, np.sum(g, dtype=np.float64))

    return _result(out.astype(x.dtype, copy=False), (x, scale, bias), "star_relu", _bw)


# ---------------------------------------------------------------------------
# pooling, dense


def global_avg_pool(x):
    """NCHW -> NC mean over the spatial dims (float64 accumulation)."""
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    z = h * w
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def _bw(g):
        _accumulate(x, np.broadcast_to((g / z)[:, :, None, None], x.shape))

    return _result(out, (x,), "global_avg_pool", _bw)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with x [N, D], weight [K, D], bias [K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def _bw(g):
        _accumulate(x, g @ weight.data)
        _accumulate(weight, g.T @ x.data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0, dtype=np.float64))

    return _result(out, parents, "linear", _bw)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    z = logits.data.astype(np.float64)
    if z.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = z.shape
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes: {labels.tolist()}")
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(n), labels])

    def _bw(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, p * (float(np.asarray(g).reshape(())) / n))

    return _result(np.array(loss, dtype=logits.dtype), (logits,), "softmax_cross_entropy", _bw)


# ---------------------------------------------------------------------------
# convolution


# Matmul operands are widened to this dtype so inner products accumulate in
# 64 bits; results are cast back to the input dtype.
_ACC = np.float64


def _mm(a, b):
    return np.matmul(a.astype(_ACC, copy=False), b.astype(_ACC, copy=False))


def _conv_out(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp, kh, kw, ho, wo, stride, dilation):
    """(N, C, Ho, Wo, kh, kw) strided view of the padded input."""
    eh, ew = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    v = sliding_window_view(xp, (eh, ew), axis=(2, 3))
    return v[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]


def _dense_forward(xp, w, ho, wo, stride, dilation):
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    if kh == 1 and kw == 1:
        xs = xp[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        cols = _windows(xp, kh, kw, ho, wo, stride, dilation).transpose(0, 2, 3, 1, 4, 5)
        cols = cols.reshape(n * ho * wo, c * kh * kw)
    out = _mm(cols, w.reshape(o, -1).T).astype(xp.dtype, copy=False)
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def _dense_backward(g, cols, xp_shape, w, ho, wo, stride, dilation):
    n, c = xp_shape[:2]
    o, _, kh, kw = w.shape
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = _mm(gm.T, cols).astype(w.dtype, copy=False).reshape(w.shape)
    dcols = _mm(gm, w.reshape(o, -1)).astype(g.dtype, copy=False).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros(xp_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            dxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp, dw


def _depthwise_plan(xp, w, ho, wo, stride, dilation):
    """Unfold input rows and lay the kernel out as per-row banded matrices.

    Each output row is then ``rows @ band`` for every channel at once, which
    runs through batched BLAS instead of K*K strided multiply-adds.
    """
    n, c, hp, wp = xp.shape
    _, _, kh, kw = w.shape
    eff = dilation * (kh - 1) + 1
    win = sliding_window_view(xp.transpose(1, 0, 2, 3), eff, axis=2)  # c, n, hp-eff+1, wp, eff
    win = win[:, :, : stride * (ho - 1) + 1 : stride, :, ::dilation]
    rows = win.transpose(0, 1, 2, 4, 3).reshape(c, n * ho, kh * wp)
    band_col = np.arange(wo)[None, :] * stride + np.arange(kw)[:, None] * dilation
    band_out = np.broadcast_to(np.arange(wo)[None, :], band_col.shape)
    band = np.zeros((c, kh, wp, wo), dtype=w.dtype)
    band[:, :, band_col, band_out] = w[:, 0, :, :, None]
    return rows, band, (band_col, band_out)


def _depthwise_forward(xp, w, ho, wo, stride, dilation):
    n, c, _, wp = xp.shape
    rows, band, band_idx = _depthwise_plan(xp, w, ho, wo, stride, dilation)
    out = _mm(rows, band.reshape(c, -1, wo)).astype(xp.dtype, copy=False)
    return out.reshape(c, n, ho, wo).transpose(1, 0, 2, 3), (rows, band, band_idx)


def _depthwise_backward(g, xp_shape, w, cache, stride, dilation):
    rows, band, (band_col, band_out) = cache
    n, c, hp, wp = xp_shape
    ho, wo = g.shape[2], g.shape[3]
    kh = w.shape[2]
    gm = g.transpose(1, 0, 2, 3).reshape(c, n * ho, wo)
    dband = _mm(rows.transpose(0, 2, 1), gm).reshape(c, kh, wp, wo)
    dw = dband[:, :, band_col, band_out].sum(axis=-1)[:, None].astype(w.dtype, copy=False)
    drows = _mm(gm, band.reshape(c, -1, wo).transpose(0, 2, 1)).astype(g.dtype, copy=False)
    drows = drows.reshape(c, n, ho, kh, wp)
    dxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
    for i in range(kh):
        r0 = i * dilation
        dxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, :] += drows[:, :, :, i, :]
    return dxp.transpose(1, 0, 2, 3), dw


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1, dilation=1):
    """Cross-correlation of NCHW ``x`` with an [O, C/groups, kh, kw] kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w_ = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups or cg != c // groups:
        raise ValueError(
            f"conv2d: input {x.shape} and kernel {weight.shape} are incompatible with groups={groups}"
        )
    if h + 2 * padding < dilation * (kh - 1) + 1 or w_ + 2 * padding < dilation * (kw - 1) + 1:
        raise ValueError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias {bias.shape} does not match kernel {weight.shape}")
    ho = _conv_out(h, kh, stride, padding, dilation)
    wo = _conv_out(w_, kw, stride, padding, dilation)
    xp = _pad(x.data, padding)
    wd = weight.data
    depthwise = groups == c and o == c and groups > 1

    if groups == 1:
        out, cols = _dense_forward(xp, wd, ho, wo, stride, dilation)
        cache = [cols]
    elif depthwise:
        out, cache = _depthwise_forward(xp, wd, ho, wo, stride, dilation)
    else:
        og = o // groups
        parts, cache = [], []
        for gi in range(groups):
            xs = xp[:, gi * cg : (gi + 1) * cg]
            part, cols = _dense_forward(xs, wd[gi * og : (gi + 1) * og], ho, wo, stride, dilation)
            parts.append(part)
            cache.append(cols)
        out = np.concatenate(parts, axis=1)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = [x, weight] + ([bias] if bias is not None else [])

    def _bw(g):
        if groups == 1:
            dxp, dw = _dense_backward(g, cache[0], xp.shape, wd, ho, wo, stride, dilation)
        elif depthwise:
            dxp, dw = _depthwise_backward(g, xp.shape, wd, cache, stride, dilation)
        else:
            og = o // groups
            dxp = np.zeros_like(xp)
            dw = np.zeros_like(wd)
            for gi in range(groups):
                sl = slice(gi * og, (gi + 1) * og)
                dxs, dws = _dense_backward(
                    np.ascontiguousarray(g[:, sl]), cache[gi], (n, cg) + xp.shape[2:], wd[sl],
                    ho, wo, stride, dilation,
                )
                dxp[:, gi * cg : (gi + 1) * cg] = dxs
                dw[sl] = dws
        if x.requires_grad:
            _accumulate(x, dxp[:, :, padding : padding + h, padding : padding + w_])
        _accumulate(weight, dw)
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3), dtype=np.float64))

    return _result(out, parents, "conv2d", _bw)


# ---------------------------------------------------------------------------
# resampling


def resize_matrix(src, dst, dtype=np.float64):
    """[dst, src] align-corners-false bilinear interpolation matrix."""
    if src < 1 or dst < 1:
        raise ValueError(f"resize dims must be positive, got {src} -> {dst}")
    m = np.zeros((dst, src), dtype=np.float64)
    if src == dst:
        np.fill_diagonal(m, 1.0)
        return m.astype(dtype)
    scale = src / dst
    for i in range(dst):
        pos = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(pos)), src - 1)
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def bilinear_resize(x, out_h, out_w):
    """Resize an [H, W] tensor; same-size resize returns the values unchanged."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if x.data.ndim != 2:
        raise ValueError(f"bilinear_resize expects an [H, W] tensor, got {x.shape}")
    h, w = x.shape
    if (h, w) == (out_h, out_w):
        def _bw_id(g):
            _accumulate(x, g)

        return _result(x.data.copy(), (x,), "bilinear_resize", _bw_id)
    ry = resize_matrix(h, out_h)
    rx = resize_matrix(w, out_w)
    out = (ry @ x.data.astype(np.float64) @ rx.T).astype(x.dtype)

    def _bw(g):
        _accumulate(x, ry.T @ g.astype(np.float64) @ rx)

    return _result(out, (x,), "bilinear_resize", _bw)


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(f, params, eps=1e-3, grads=None):
    """Worst relative error between analytic and central-difference gradients.

    ``f`` maps a list of tensors to a scalar tensor.  The check runs on
    float64 copies of ``params``.  Pass ``grads`` to audit externally supplied
    gradients instead of the ones produced by :func:`backward`.
    """
    work = [Tensor(p.data, requires_grad=True, dtype=np.float64) for p in params]
    if grads is None:
        loss = f(work)
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("f returned a non-finite value")
        backward(loss)
        grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in work]
    grads = [np.asarray(g, dtype=np.float64).reshape(t.shape) for g, t in zip(grads, work)]

    def evaluate():
        val = float(np.asarray(f(work).data, dtype=np.float64).reshape(()))
        if not np.isfinite(val):
            raise FloatingPointError("f returned a non-finite value")
        return val

    worst = 0.0
    for t, g in zip(work, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = gflat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-6)
            worst = max(worst, err)
    return worst
