"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Only the operations the U-Net needs are provided.  Image tensors use the
NCHW layout.  Every op returns a new :class:`Tensor` whose ``_backward``
closure maps the output gradient to one gradient per parent (``None`` for
parents that do not need one).  :meth:`Tensor.backward` walks the graph in
reverse topological order and accumulates parent gradients additively.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
DICE_EPS = 1e-6
ELU_ALPHA = 1.0


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self, grad=None):
        """Back-propagate from this tensor into every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _check_finite(x, op):
    if not np.isfinite(x.data).all():
        raise ValueError(f"{op}: input contains non-finite values")


# ----------------------------------------------------------------------
# scalar arithmetic (same-shape operands or python scalars)


def _binary_operands(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def tensor_sum(x):
    x = as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward)


def slice_channels(x, start, stop):
    x = as_tensor(x)
    out = x.data[:, start:stop].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _result(out, (x,), backward)


# ----------------------------------------------------------------------
# convolution


def conv2d(x, weight, bias, padding="same"):
    """2-D cross-correlation with a 3x3 or 1x1 kernel.

    The zero-padded batch is laid out channel-major as ``(C, N*Hp*Wp)``.
    Output pixel ``(n, i, j)`` lives at flat column ``q = (n*Hp + i)*Wp + j``
    and kernel tap ``(di, dj)`` reads column ``q + di*Wp + dj``, so each tap
    is a contiguous column window.  The windows are stacked into one
    ``(k*k*C, L)`` matrix and the whole layer is a single matmul; columns
    that straddle a row or sample boundary are computed and discarded.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be OutC x InC x k x k, got {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci} (weight {weight.shape})")
    if (kh, kw) not in ((3, 3), (1, 1)):
        raise ShapeError(f"conv2d: kernel must be 3x3 or 1x1, got {kh}x{kw}")
    if bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    if padding not in ("same", "none"):
        raise ValueError(f"conv2d: padding must be 'same' or 'none', got {padding!r}")
    _check_finite(x, "conv2d")

    k = kh
    pad = (k // 2) if padding == "same" else 0
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = hp - k + 1, wp - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {h}x{w} too small for a {k}x{k} kernel without padding")

    total = n * hp * wp
    xp = np.zeros((c, n, hp, wp), dtype=DTYPE)
    xp[:, :, pad:pad + h, pad:pad + w] = x.data.transpose(1, 0, 2, 3)
    xflat = xp.reshape(c, total)
    span = total - (k - 1) * (wp + 1)
    offsets = [di * wp + dj for di in range(k) for dj in range(k)]
    # weight columns ordered tap-major to match the stacked windows
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(co, k * k * c)

    def stacked():
        if k == 1:
            return xflat
        cols = np.empty((k * k * c, span), dtype=DTYPE)
        for t, off in enumerate(offsets):
            cols[t * c:(t + 1) * c] = xflat[:, off:off + span]
        return cols

    full = np.zeros((co, total), dtype=DTYPE)
    np.matmul(w2, stacked(), out=full[:, :span])
    out = full.reshape(co, n, hp, wp)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    out = out + bias.data[None, :, None, None]

    def backward(g):
        gfull = np.zeros((co, n, hp, wp), dtype=DTYPE)
        gfull[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gflat = gfull.reshape(co, total)[:, :span]
        gw = gx = gb = None
        if weight.requires_grad:
            # the stack is rebuilt rather than kept alive between passes (9x the input size)
            gw2 = gflat @ stacked().T
            gw = np.ascontiguousarray(gw2.reshape(co, k, k, c).transpose(0, 3, 1, 2))
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            # transposed correlation: gxflat[:, p] = sum_t W_t^T g[:, p - off_t]
            reach = offsets[-1]
            gext = np.zeros((co, total + reach), dtype=DTYPE)
            gext[:, reach:reach + span] = gflat
            if k == 1:
                gstack = gext[:, :total]
            else:
                gstack = np.empty((k * k * co, total), dtype=DTYPE)
                for t, off in enumerate(offsets):
                    gstack[t * co:(t + 1) * co] = gext[:, reach - off:reach - off + total]
            wt = weight.data.transpose(1, 2, 3, 0).reshape(c, k * k * co)
            gxflat = wt @ gstack
            gx = gxflat.reshape(c, n, hp, wp)[:, :, pad:pad + h, pad:pad + w]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward)


# ----------------------------------------------------------------------
# resampling


def maxpool2x2(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2: input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial size {h}x{w} must be even")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum in scan order
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _result(out, (x,), backward)


def upsample_nearest2x(x):
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_channels: inputs must be NCHW, got {a.shape} and {b.shape}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _result(out, (a, b), backward)


# ----------------------------------------------------------------------
# normalization, activations, regularization


class RunningStats:
    """Per-channel running mean/variance used by batchnorm in infer mode."""

    def __init__(self, channels):
        self.mean = np.zeros(channels, dtype=DTYPE)
        self.var = np.ones(channels, dtype=DTYPE)


def batchnorm(x, gamma, beta, mode="train", running_stats=None, eps=BN_EPS, momentum=BN_MOMENTUM):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm: input must be NCHW, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)")
    if mode not in ("train", "infer"):
        raise ValueError(f"batchnorm: mode must be 'train' or 'infer', got {mode!r}")

    axes = (0, 2, 3)
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_stats is not None:
            running_stats.mean *= momentum
            running_stats.mean += (1.0 - momentum) * mean
            running_stats.var *= momentum
            running_stats.var += (1.0 - momentum) * var
    else:
        if running_stats is None:
            raise ValueError("batchnorm: infer mode needs running_stats")
        mean, var = running_stats.mean, running_stats.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    m = x.data.size // c

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                s1 = gxhat.sum(axis=axes)[None, :, None, None]
                s2 = (gxhat * xhat).sum(axis=axes)[None, :, None, None]
                gx = (inv_std[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


def elu(x, alpha=ELU_ALPHA):
    x = as_tensor(x)
    neg = x.data <= 0
    em1 = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(neg, alpha * em1, x.data)

    def backward(g):
        return (g * np.where(neg, alpha * (em1 + 1.0), 1.0),)

    return _result(out, (x,), backward)


_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    # keep the open interval (0, 1) even where float64 rounds to an endpoint
    np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward)


_POINTWISE = {"elu": elu, "sigmoid": sigmoid}


def pointwise(x, fn):
    try:
        op = _POINTWISE[fn]
    except KeyError:
        raise ValueError(f"pointwise: unknown function {fn!r}; expected one of {sorted(_POINTWISE)}") from None
    return op(x)


def dropout(x, rate, mode="train", rng=None):
    """Inverted dropout; identity in infer mode or when ``rate == 0``."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode needs a seeded rng")
    mask = (rng.random(x.shape) >= rate) * (1.0 / (1.0 - rate))
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward)


# ----------------------------------------------------------------------
# losses


def mse(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    out = np.asarray(np.mean(diff * diff))
    scale = 2.0 / diff.size

    def backward(g):
        gp = g * scale * diff
        return gp, -gp

    return _result(out, (pred, target), backward)


def soft_dice(pred, target, eps=DICE_EPS):
    """Soft Dice per (sample, channel) over H x W, averaged over both."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"soft_dice: shapes {pred.shape} and {target.shape} differ")
    if pred.ndim < 2:
        raise ShapeError(f"soft_dice: need at least (N, C, ...) input, got {pred.shape}")
    axes = tuple(range(2, pred.ndim))
    p, t = pred.data, target.data
    inter = (p * t).sum(axis=axes)
    denom = p.sum(axis=axes) + t.sum(axis=axes) + eps
    num = 2.0 * inter + eps
    dice = num / denom
    out = np.asarray(dice.mean())
    count = dice.size
    expand = (...,) + (None,) * len(axes)

    def backward(g):
        # d dice / dp = (2 t denom - num) / denom^2, likewise for t
        scale = g / count / denom ** 2
        gp = (2.0 * t * denom[expand] - num[expand]) * scale[expand]
        gt = (2.0 * p * denom[expand] - num[expand]) * scale[expand]
        return gp, gt

    return _result(out, (pred, target), backward)
