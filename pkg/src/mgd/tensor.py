"""Dense tensors with reverse-mode automatic differentiation.

Each op returns a new Tensor whose lineage records its parent tensors and
a vjp closure; `backward` replays the closures in reverse topological
order and accumulates into the `.grad` slot of every tensor that requires
a gradient. Training runs in float32; the same code paths accept float64
so gradients can be checked against central finite differences.
"""
from __future__ import annotations

import logging

import numpy as np
from numpy.lib.stride_tricks import as_strided

log = logging.getLogger(__name__)


class Tensor:
    """N-d numeric array with an optional gradient slot and autodiff lineage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        arr = data if isinstance(data, np.ndarray) else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        """New tensor sharing this data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data, parents, vjp):
    """Wrap an op output, attaching lineage only if a parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def backward(loss):
    """Accumulate dLoss/dT into `.grad` of every reachable requires_grad tensor.

    Repeated calls on the same graph add the same contributions again (no
    implicit zeroing). Propagation uses a private per-call map, so stale
    grads on intermediate tensors never leak into a later pass.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    # Iterative topological sort over the lineage DAG.
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.get(id(node))
        if g is None:
            continue
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = flowing.get(id(parent))
                flowing[id(parent)] = pg if acc is None else acc + pg

    for node in order:
        if node.requires_grad and id(node) in flowing:
            g = flowing[id(node)]
            node.grad = g.copy() if node.grad is None else node.grad + g


class Parameter:
    """Trainable tensor plus its SGD momentum buffer and a unique name."""

    __slots__ = ("name", "tensor", "momentum_buffer")

    def __init__(self, name, data):
        arr = np.asarray(data)
        self.name = name
        self.tensor = Tensor(arr, requires_grad=True)
        self.momentum_buffer = np.zeros_like(arr)

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0):
    """Momentum-SGD update; grads are cleared afterwards.

    buf <- momentum*buf + (grad + weight_decay*param); param <- param - lr*buf.
    Parameters with no gradient are skipped and returned for the caller.
    """
    skipped = []
    for p in params:
        g = p.tensor.grad
        if g is None:
            skipped.append(p.name)
            continue
        if weight_decay:
            g = g + weight_decay * p.tensor.data
        buf = p.momentum_buffer
        buf *= momentum
        buf += g
        p.tensor.data = p.tensor.data - lr * buf
        p.tensor.grad = None
    if skipped:
        log.warning("sgd_step skipped parameters without gradients: %s", ", ".join(skipped))
    return skipped


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def mul_const(x, arr):
    """Multiply by a constant array broadcastable to x's shape (no grad w.r.t. arr)."""
    arr = np.asarray(arr, dtype=x.data.dtype)
    if np.broadcast_shapes(x.shape, arr.shape) != x.shape:
        raise ValueError(f"constant of shape {arr.shape} does not broadcast onto {x.shape}")
    return _result(x.data * arr, (x,), lambda g: (g * arr,))


def relu(x):
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation of an NCHW input with OIkk filters (im2col + GEMM)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d requires a square kernel, got {kh}x{kw}")
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects {ci}"
                         f" (input {x.shape}, weight {weight.shape})")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {o} output channels")
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d kernel {k}x{k} does not fit input {h}x{w} with padding {padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    hp, wp = h + 2 * padding, w + 2 * padding

    # im2col staged through NHWC: gathering channel-last windows reads
    # contiguous runs, which is ~2x faster than gathering straight from NCHW
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xph = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    sn, sh, sw, sc = xph.strides
    windows = as_strided(xph, (n, ho, wo, k, k, c),
                         (sn, sh * stride, sw * stride, sh, sw, sc))
    cols = np.ascontiguousarray(windows).reshape(n * ho * wo, k * k * c)
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(o, k * k * c)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def vjp(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        dx = dw = db = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, k, k, c)
            dxph = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for ki in range(k):
                for kj in range(k):
                    dxph[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :] += \
                        dcols[:, :, :, ki, kj, :]
            dx = dxph.transpose(0, 3, 1, 2)[:, :, padding:padding + h, padding:padding + w]
            dx = np.ascontiguousarray(dx)
        if weight.requires_grad:
            dw = (gmat.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
            dw = np.ascontiguousarray(dw)
        if bias is not None and bias.requires_grad:
            db = gmat.sum(axis=0)
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, vjp)


def linear(x, weight, bias):
    """Affine map x @ weight.T + bias for an N x D batch."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear dimension mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T + bias.data

    def vjp(g):
        dx = g @ weight.data if x.requires_grad else None
        dw = g.T @ x.data if weight.requires_grad else None
        db = g.sum(axis=0) if bias.requires_grad else None
        return dx, dw, db

    return _result(out, (x, weight, bias), vjp)


class BatchNormStats:
    """Running mean/variance of one batch-norm layer (used in eval mode)."""

    __slots__ = ("mean", "var")

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm2d(x, gamma, beta, stats, training, eps=1e-5, momentum=0.1):
    """Per-channel batch normalization over an NCHW tensor.

    Training mode normalizes by batch statistics and folds them into the
    running stats; eval mode normalizes by the running stats.
    """
    if eps <= 0:
        raise ValueError(f"batch_norm2d eps must be > 0, got {eps}")
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d parameter shapes {gamma.shape}/{beta.shape} "
                         f"do not match {c} channels")

    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        stats.mean = (1.0 - momentum) * stats.mean + momentum * mean
        stats.var = (1.0 - momentum) * stats.var + momentum * unbiased
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def vjp(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = g * gamma.data[None, :, None, None]
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
                dx = (inv_std[None, :, None, None] / m) * (
                    m * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
            return dx, dgamma, dbeta

        return _result(out, (x, gamma, beta), vjp)

    inv_std = 1.0 / np.sqrt(stats.var + eps)
    xhat = (x.data - stats.mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g):
        dx = g * (gamma.data * inv_std)[None, :, None, None] if x.requires_grad else None
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), vjp)


def global_avg_pool(x):
    """Spatial mean of an NCHW tensor, yielding N x C."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) / (h * w),)

    return _result(out, (x,), vjp)


def softmax_cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true label, max-stabilized."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects N x K logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), vjp)


def sq_l2_sum(a, b):
    """Sum of squared elementwise differences (a raw sum, not a mean)."""
    if a.shape != b.shape:
        raise ValueError(f"sq_l2_sum shape mismatch: {a.shape} vs {b.shape}")
    d = a.data - b.data
    out = np.asarray((d * d).sum(), dtype=d.dtype)

    def vjp(g):
        da = 2.0 * d * g if a.requires_grad else None
        db = -2.0 * d * g if b.requires_grad else None
        return da, db

    return _result(out, (a, b), vjp)
