"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array in this package flows through :class:`Tensor`: a numpy float64
buffer, an optional gradient buffer of the same shape, and a closure that
pushes upstream gradients to the node's parents. Graphs are built eagerly
by the op functions below; ``backward`` releases them by walking the graph
in reverse topological order exactly once.

The engine is deliberately small. It supports exactly the operations the
detection model needs, all in float64 so gradient checks can run at tight
tolerances.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "set_finite_checks",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "power",
    "matmul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "transpose",
    "concat",
    "index",
    "put",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv2d",
    "avg_pool2d",
    "upsample2x",
    "global_avg_pool",
    "dropout",
    "cross_entropy",
    "kl_divergence",
    "bce_logits",
    "mse",
    "stop_gradient",
]

# When enabled, every freshly created node is checked for NaN/Inf. Ops that
# produce a deliberate +inf (the KL support flag) opt out per node.
_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions on every forward op (slow, test-only)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    Leaf tensors are created directly; interior nodes are created by the op
    functions, which attach the parent tuple and a vector-Jacobian closure.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph plumbing ------------------------------------------------------

    def detach(self) -> "Tensor":
        """A view of the same data outside the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf.

        Visits each node exactly once in reverse topological order. Repeated
        calls accumulate into ``.grad`` like any tape engine; optimizers are
        expected to clear gradients between steps.
        """
        if self.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")

        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is not None:
                parent_grads = node._vjp(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not _needs_grad(parent):
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._vjp is not None


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order via iterative DFS (graphs can be deep)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and _needs_grad(parent):
                stack.append((parent, False))
    order.reverse()
    return order


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp, allow_nonfinite: bool = False) -> Tensor:
    if _FINITE_CHECKS and not allow_nonfinite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.data * s, (a,), lambda g: (g * s,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    p = float(p)
    data = a.data**p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(data, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, supporting batched (...,m,k) @ (...,k,n) operands."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _node(data, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _node(data, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _node(data, (a,), vjp)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(data, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_ = g
        if not keepdims:
            g_ = np.expand_dims(g, axis)
        return (np.broadcast_to(g_, a.shape).copy(),)

    return _node(data, (a,), vjp)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(data, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _node(data, (a,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tuple(tensors), vjp)


def index(a: Tensor, key) -> Tensor:
    """Basic numpy slicing as a graph op; backward scatter-adds."""
    data = a.data[key]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _node(np.ascontiguousarray(data), (a,), vjp)


def put(shape, key, src: Tensor) -> Tensor:
    """Zeros of ``shape`` with ``src`` written at ``key`` (inverse of index)."""
    data = np.zeros(shape, dtype=np.float64)
    data[key] = src.data

    def vjp(g):
        return (np.ascontiguousarray(g[key]),)

    return _node(data, (src,), vjp)


# ---------------------------------------------------------------------------
# normalization and attention support
# ---------------------------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, shift-stabilized."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(data, (a,), vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mean = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mean) * inv
    data = xhat * gamma.data + beta.data

    def vjp(g):
        d = a.shape[-1]
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d
        )
        return dx, dgamma, dbeta

    return _node(data, (a, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# convolution / pooling / resampling
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,C,H,W) -> (B,C,kh,kw,H,W) sliding windows under 'same' zero padding."""
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # win: (B, C, H, W, kh, kw) -> (B, C, kh, kw, H, W)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))


def conv2d(x: Tensor, w: Tensor, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation with 'same' zero padding, stride 1.

    ``x`` is (B, C, H, W) and ``w`` is (Co, C // groups, kh, kw); kernel
    extents must be odd so the output grid matches the input grid.
    Depthwise convolution is ``groups == C`` with Co == C.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects x:(B,C,H,W) and w:(Co,Ci,kh,kw)")
    bsz, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel extents must be odd for same padding")
    if c % groups != 0 or co % groups != 0:
        raise ValueError(f"channels ({c} in, {co} out) not divisible by groups={groups}")
    if ci != c // groups:
        raise ValueError(f"weight expects {ci} input channels per group, got {c // groups}")

    cols = _im2col(x.data, kh, kw)  # (B, C, kh, kw, H, W)
    k = ci * kh * kw
    cols_g = cols.reshape(bsz, groups, k, h * wd)
    w_g = w.data.reshape(groups, co // groups, k)
    out = np.matmul(w_g[None], cols_g)  # (B, groups, Co/g, H*W)
    data = out.reshape(bsz, co, h, wd)

    def vjp(g):
        g_g = g.reshape(bsz, groups, co // groups, h * wd)
        dw = np.matmul(g_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
        dw = dw.reshape(co, ci, kh, kw)
        dcols = np.matmul(w_g.transpose(0, 2, 1)[None], g_g)  # (B, groups, k, H*W)
        dcols = dcols.reshape(bsz, c, kh, kw, h, wd)
        ph, pw = kh // 2, kw // 2
        dxp = np.zeros((bsz, c, h + 2 * ph, wd + 2 * pw))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, i, j]
        dx = dxp[:, :, ph : ph + h, pw : pw + wd]
        return np.ascontiguousarray(dx), dw

    return _node(data, (x, w), vjp)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; H and W must be even."""
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2d requires even spatial dims")
    data = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (up * 0.25,)

    return _node(data, (x,), vjp)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling."""
    bsz, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(data, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    bsz, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3))
    inv = 1.0 / (h * w)

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy(),)

    return _node(data, (x,), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at p == 0."""
    if not (0.0 <= p < 1.0):
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or p == 0.0:
        return _node(x.data, (x,), lambda g: (g,))
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def vjp(g):
        return (g * keep,)

    return _node(x.data * keep, (x,), vjp)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects logits of shape (B, K)")
    bsz, k = logits.shape
    if labels.shape != (bsz,):
        raise ValueError("labels must be a length-B integer vector")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    data = np.asarray(-logp[np.arange(bsz), labels].mean())

    def vjp(g):
        soft = np.exp(logp)
        soft[np.arange(bsz), labels] -= 1.0
        return (soft * (float(g) / bsz),)

    return _node(data, (logits,), vjp)


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) over the last axis with the 0*log(0/q) = 0 convention.

    Rows of ``p`` and ``q`` must be probability vectors. Where p > 0 and
    q == 0 the result is flagged +inf rather than producing a NaN. A 1-D
    input yields a scalar; an (..., K) input yields per-row divergences.
    """
    pd, qd = p.data, q.data
    if pd.shape != qd.shape:
        raise ValueError("kl_divergence operands must share a shape")
    if np.any(pd < -1e-12) or np.any(qd < -1e-12):
        raise ValueError("kl_divergence operands must be nonnegative")
    sums_p = pd.sum(axis=-1)
    sums_q = qd.sum(axis=-1)
    if not (np.allclose(sums_p, 1.0, atol=1e-9) and np.allclose(sums_q, 1.0, atol=1e-9)):
        raise ValueError("kl_divergence operands must sum to 1 along the last axis")

    support = pd > 0.0
    violated = support & (qd <= 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support & ~violated, pd * (np.log(np.maximum(pd, 1e-300)) - np.log(np.maximum(qd, 1e-300))), 0.0)
    data = terms.sum(axis=-1)
    if np.any(violated):
        data = np.where(violated.any(axis=-1), np.inf, data)

    def vjp(g):
        g_ = np.expand_dims(g, -1) if np.ndim(g) else g
        logratio = np.where(support, np.log(np.maximum(pd, 1e-300)) - np.log(np.maximum(qd, 1e-300)), 0.0)
        dp = g_ * np.where(support, logratio + 1.0, 0.0)
        dq = g_ * np.where(support, -pd / np.maximum(qd, 1e-300), 0.0)
        return dp, dq

    return _node(np.asarray(data), (p, q), vjp, allow_nonfinite=True)


def bce_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, numerically stable.

    Uses max(x, 0) - x*y + log(1 + exp(-|x|)) elementwise; targets are
    constants in [0, 1].
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError("targets must match logits shape")
    if np.any(y < 0) or np.any(y > 1):
        raise ValueError("targets must lie in [0, 1]")
    x = logits.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    data = np.asarray(per.mean())
    n = x.size

    def vjp(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return ((sig - y) * (float(g) / n),)

    return _node(data, (logits,), vjp)


def mse(a: Tensor, b: Tensor, normalizer: float) -> Tensor:
    """Sum of squared differences divided by ``normalizer``."""
    if a.shape != b.shape:
        raise ValueError("mse operands must share a shape")
    if normalizer <= 0:
        raise ValueError("normalizer must be positive")
    diff = a.data - b.data
    data = np.asarray((diff * diff).sum() / normalizer)

    def vjp(g):
        base = float(g) * 2.0 / normalizer * diff
        return base, -base

    return _node(data, (a, b), vjp)


def stop_gradient(x: Tensor) -> Tensor:
    """Block gradient flow; forward value passes through unchanged."""
    return Tensor(x.data)
