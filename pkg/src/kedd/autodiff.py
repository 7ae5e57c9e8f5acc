"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every numeric operation the models train through goes through ``apply``,
which dispatches to a fixed registry of operations. Each operation returns
its forward value together with a closure computing input gradients, and a
graph node is recorded only when some input requires gradients
(define-by-run: the graph is rebuilt on every forward pass).

Tensors are immutable after creation except for ``grad``, which is only
written by ``backward`` and accumulates additively until cleared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Node",
    "apply",
    "backward",
    "grad_check",
    "GradCheckReport",
    "constant",
    "registered_ops",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Node:
    """Record of the operation that produced a tensor."""

    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op, inputs, grad_fn):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


class Tensor:
    """A float64 array, optionally tracked in the differentiation graph."""

    __slots__ = ("values", "requires_grad", "grad", "node")

    def __init__(self, values, requires_grad=False, node=None):
        # order="C" keeps row-major contiguity without collapsing 0-d scalars.
        self.values = np.asarray(values, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = node

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return self.values.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def constant(values):
    """Tensor outside the gradient graph (frozen inputs, masks, lookups)."""
    return Tensor(values, requires_grad=False)


def _shape_error(op, shapes, detail=""):
    msg = f"{op}: incompatible shapes {[tuple(s) for s in shapes]}"
    if detail:
        msg += f" ({detail})"
    return ValueError(msg)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gdim, dim) in enumerate(zip(g.shape, shape)):
        if dim == 1 and gdim != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Operation registry. Each op maps (values, attrs) -> (out, grad_fn) where
# grad_fn(gout) returns one gradient array per input (None for no flow).
# ---------------------------------------------------------------------------


def _op_matmul(vals, attrs):
    a, b = vals
    if a.ndim > 2 or b.ndim > 2 or a.ndim == 0 or b.ndim == 0:
        raise _shape_error("matmul", [a.shape, b.shape], "only 1-D/2-D operands")
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    if a2.shape[1] != b2.shape[0]:
        raise _shape_error("matmul", [a.shape, b.shape], "inner dimensions differ")
    out2 = a2 @ b2
    out = out2
    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[0, ...]

    def grad_fn(g):
        g2 = np.asarray(g, dtype=np.float64)
        g2 = g2.reshape(a2.shape[0], b2.shape[1])
        da = g2 @ b2.T
        db = a2.T @ g2
        if a.ndim == 1:
            da = da[0]
        if b.ndim == 1:
            db = db[:, 0]
        return da, db

    return out, grad_fn


def _op_add(vals, attrs):
    a, b = vals
    try:
        out = a + b
    except ValueError:
        raise _shape_error("add", [a.shape, b.shape]) from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, grad_fn


def _op_mul(vals, attrs):
    a, b = vals
    try:
        out = a * b
    except ValueError:
        raise _shape_error("mul", [a.shape, b.shape]) from None

    def grad_fn(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, grad_fn


def _op_concat(vals, attrs):
    axis = attrs.get("axis", -1)
    ndim = vals[0].ndim
    for v in vals[1:]:
        if v.ndim != ndim:
            raise _shape_error("concat", [x.shape for x in vals], "rank mismatch")
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise _shape_error("concat", [x.shape for x in vals]) from None
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return out, grad_fn


def _op_relu(vals, attrs):
    (x,) = vals
    mask = x > 0
    out = np.where(mask, x, 0.0)

    def grad_fn(g):
        return (g * mask,)

    return out, grad_fn


def _op_gelu(vals, attrs):
    (x,) = vals
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def grad_fn(g):
        density = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * density),)

    return out, grad_fn


def _op_sigmoid(vals, attrs):
    (x,) = vals
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return out, grad_fn


def _op_softmax_lastdim(vals, attrs):
    (x,) = vals
    if x.size == 0:
        raise _shape_error("softmax_lastdim", [x.shape], "empty input")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def grad_fn(g):
        inner = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - inner),)

    return out, grad_fn


def _op_layernorm(vals, attrs):
    x, gamma, beta = vals
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise _shape_error("layernorm", [x.shape, gamma.shape, beta.shape])
    eps = attrs.get("eps", 1e-5)
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma + beta

    def grad_fn(g):
        lead = tuple(range(x.ndim - 1))
        dbeta = g.sum(axis=lead)
        dgamma = (g * xhat).sum(axis=lead)
        gx = g * gamma
        m1 = np.mean(gx, axis=-1, keepdims=True)
        m2 = np.mean(gx * xhat, axis=-1, keepdims=True)
        dx = inv * (gx - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return out, grad_fn


def _op_dropout(vals, attrs):
    (x,) = vals
    rate = float(attrs.get("rate", 0.0))
    training = bool(attrs.get("training", False))
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        # identity: safe to alias since tensors are never mutated in place
        def grad_fn(g):
            return (g,)

        return x, grad_fn

    rng = attrs.get("rng")
    if rng is None:
        raise ValueError("dropout: training mode requires an rng")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = np.where(keep, x * scale, 0.0)

    def grad_fn(g):
        return (np.where(keep, g * scale, 0.0),)

    return out, grad_fn


def _conv1d_promote(x, w):
    """Accept (L,) with (K,) or (C_in, L) with (C_out, C_in, K)."""
    squeeze = False
    if x.ndim == 1 and w.ndim == 1:
        x = x[None, :]
        w = w[None, None, :]
        squeeze = True
    if x.ndim != 2 or w.ndim != 3:
        raise _shape_error("conv1d", [x.shape, w.shape], "expected (C_in,L) and (C_out,C_in,K)")
    if w.shape[1] != x.shape[0]:
        raise _shape_error("conv1d", [x.shape, w.shape], "channel mismatch")
    return x, w, squeeze


def _op_conv1d(vals, attrs):
    x0, w0 = vals
    stride = int(attrs.get("stride", 1))
    padding = int(attrs.get("padding", 0))
    if stride < 1 or padding < 0:
        raise ValueError(f"conv1d: invalid stride={stride} padding={padding}")
    x, w, squeeze = _conv1d_promote(x0, w0)
    c_out, c_in, k = w.shape
    length = x.shape[1]
    if padding:
        xp = np.zeros((c_in, length + 2 * padding))
        xp[:, padding : padding + length] = x
    else:
        xp = x
    l_out = (length + 2 * padding - k) // stride + 1
    if l_out < 1:
        raise _shape_error("conv1d", [x0.shape, w0.shape], "kernel longer than padded input")
    # gather[t, j] = starts[j] + t, one fancy index builds all patches
    starts = np.arange(l_out) * stride
    gather = starts[None, :] + np.arange(k)[:, None]
    cols = xp[:, gather]  # (c_in, k, l_out)
    w_mat = w.reshape(c_out, c_in * k)
    out = w_mat @ cols.reshape(c_in * k, l_out)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        g2 = g[None, :] if squeeze else g
        dw = (g2 @ cols.reshape(c_in * k, l_out).T).reshape(w.shape)
        dcols = (w_mat.T @ g2).reshape(c_in, k, l_out)
        dxp = np.zeros_like(xp)
        np.add.at(dxp, (slice(None, None), gather), dcols)
        dx = dxp[:, padding : padding + length] if padding else dxp
        if squeeze:
            return dx[0], dw[0, 0]
        return dx, dw

    return out, grad_fn


def _op_maxpool1d(vals, attrs):
    (x,) = vals
    if x.ndim == 0 or x.shape[-1] == 0:
        raise _shape_error("maxpool1d", [x.shape], "empty last axis")
    kernel = attrs.get("kernel")
    length = x.shape[-1]
    lead = x.shape[:-1]
    flat = x.reshape(-1, length)

    if kernel is None:  # global max over the last axis
        arg = np.argmax(flat, axis=1)
        out = flat[np.arange(flat.shape[0]), arg].reshape(lead)

        def grad_fn(g):
            gflat = np.zeros_like(flat)
            gflat[np.arange(flat.shape[0]), arg] = g.reshape(-1)
            return (gflat.reshape(x.shape),)

        return out, grad_fn

    kernel = int(kernel)
    stride = int(attrs.get("stride", kernel))
    if kernel < 1 or stride < 1 or kernel > length:
        raise _shape_error("maxpool1d", [x.shape], f"kernel={kernel} stride={stride}")
    l_out = (length - kernel) // stride + 1
    starts = np.arange(l_out) * stride
    windows = np.stack([flat[:, starts + t] for t in range(kernel)], axis=2)
    arg = np.argmax(windows, axis=2)  # first max wins on ties
    out = np.take_along_axis(windows, arg[:, :, None], axis=2)[:, :, 0]
    out = out.reshape(lead + (l_out,))

    def grad_fn(g):
        gflat = np.zeros_like(flat)
        rows = np.repeat(np.arange(flat.shape[0]), l_out)
        pos = (starts[None, :] + arg).reshape(-1)
        np.add.at(gflat, (rows, pos), g.reshape(-1))
        return (gflat.reshape(x.shape),)

    return out, grad_fn


def _op_mean_lastdim(vals, attrs):
    (x,) = vals
    if x.ndim == 0 or x.shape[-1] == 0:
        raise _shape_error("mean_lastdim", [x.shape], "empty last axis")
    n = x.shape[-1]
    out = x.mean(axis=-1)

    def grad_fn(g):
        return (np.repeat(g[..., None], n, axis=-1) / n,)

    return out, grad_fn


def _op_embedding_lookup(vals, attrs):
    (table,) = vals
    if table.ndim != 2:
        raise _shape_error("embedding_lookup", [table.shape], "table must be 2-D")
    indices = np.asarray(attrs["indices"], dtype=np.int64)
    if indices.ndim != 1:
        raise ValueError("embedding_lookup: indices must be 1-D")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ValueError(
            f"embedding_lookup: index out of range for table with {table.shape[0]} rows"
        )
    out = table[indices]

    def grad_fn(g):
        dt = np.zeros_like(table)
        np.add.at(dt, indices, g)
        return (dt,)

    return out, grad_fn


def _op_masked_fill(vals, attrs):
    (x,) = vals
    mask = np.asarray(attrs["mask"], dtype=bool)
    value = float(attrs.get("value", 0.0))
    try:
        keep = np.broadcast_to(~mask, x.shape)
    except ValueError:
        raise _shape_error("masked_fill", [x.shape, mask.shape]) from None
    out = np.where(keep, x, value)

    def grad_fn(g):
        return (np.where(keep, g, 0.0),)

    return out, grad_fn


def _op_topk_mask(vals, attrs):
    (x,) = vals
    k = int(attrs["k"])
    if k < 1:
        raise ValueError(f"topk_mask: k must be >= 1, got {k}")
    if x.ndim == 0 or x.shape[-1] == 0:
        raise _shape_error("topk_mask", [x.shape], "empty last axis")
    k = min(k, x.shape[-1])
    # Stable argsort on -x: ties resolve to the lowest index.
    order = np.argsort(-x, axis=-1, kind="stable")
    survive = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(survive, order[..., :k], True, axis=-1)
    out = np.where(survive, x, -np.inf)

    def grad_fn(g):
        return (np.where(survive, g, 0.0),)

    return out, grad_fn


def _op_sum(vals, attrs):
    (x,) = vals
    out = np.asarray(x.sum())

    def grad_fn(g):
        return (np.broadcast_to(np.asarray(g).reshape(()), x.shape).copy(),)

    return out, grad_fn


def _op_transpose(vals, attrs):
    (x,) = vals
    axes = attrs.get("axes")
    out = np.transpose(x, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return out, grad_fn


def _op_bce_with_logits(vals, attrs):
    # Registry extension: the public op set has no log/exp primitive, so the
    # binary cross-entropy head is a single fused op with an analytic gradient.
    (x,) = vals
    z = np.asarray(attrs["targets"], dtype=np.float64)
    if z.shape != x.shape:
        raise _shape_error("bce_with_logits", [x.shape, z.shape])
    n = x.size
    per = np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.sum() / n)

    def grad_fn(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (np.asarray(g).reshape(()) * (s - z) / n,)

    return out, grad_fn


_OPS = {
    "matmul": _op_matmul,
    "add": _op_add,
    "mul": _op_mul,
    "concat": _op_concat,
    "relu": _op_relu,
    "gelu": _op_gelu,
    "sigmoid": _op_sigmoid,
    "softmax_lastdim": _op_softmax_lastdim,
    "layernorm": _op_layernorm,
    "dropout": _op_dropout,
    "conv1d": _op_conv1d,
    "maxpool1d": _op_maxpool1d,
    "mean_lastdim": _op_mean_lastdim,
    "embedding_lookup": _op_embedding_lookup,
    "masked_fill": _op_masked_fill,
    "topk_mask": _op_topk_mask,
    "sum": _op_sum,
    "transpose": _op_transpose,
    "bce_with_logits": _op_bce_with_logits,
}


def registered_ops():
    return sorted(_OPS)


def apply(op_name, inputs, attrs=None):
    """Dispatch a registered operation, recording a graph node if needed."""
    fn = _OPS.get(op_name)
    if fn is None:
        raise ValueError(f"unknown op '{op_name}'")
    vals = [t.values for t in inputs]
    out_vals, grad_fn = fn(vals, attrs or {})
    requires = any(t.requires_grad for t in inputs)
    node = Node(op_name, tuple(inputs), grad_fn) if requires else None
    return Tensor(out_vals, requires_grad=requires, node=node)


def backward(loss):
    """Backpropagate d(loss)/d(tensor) into ``grad`` of reachable tensors.

    Gradients accumulate additively across calls until cleared with
    ``zero_grad``. The loss must be a scalar (shape () or (1,)).
    """
    if loss.values.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")

    # Iterative post-order DFS for a topological order (inputs before outputs).
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))

    grads = {id(loss): np.ones_like(loss.values)}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        input_grads = t.node.grad_fn(g.reshape(t.values.shape))
        for inp, gi in zip(t.node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gi if acc is None else acc + gi


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic vs central-difference gradients."""

    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    max_rel_error: float
    passed: bool
    nonfinite_coords: list = field(default_factory=list)

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return f"grad_check {state}: max relative error {self.max_rel_error:.3e}"


def grad_check(f, point, step=1e-6, tolerance=1e-4):
    """Check d f / d point against central finite differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic
    (re-seed any internal rng on each call). Relative error uses a unit
    floor: |a - n| / max(|a|, |n|, 1).
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    base = np.ascontiguousarray(point, dtype=np.float64)
    p = Tensor(base.copy(), requires_grad=True)
    out = f(p)
    if out.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    backward(out)
    analytic = np.zeros_like(base) if p.grad is None else p.grad.copy()

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with np.errstate(invalid="ignore", over="ignore"):
        for i in range(flat.size):
            for sign in (1.0, -1.0):
                shifted = flat.copy()
                shifted[i] += sign * step
                val = f(Tensor(shifted.reshape(base.shape))).item()
                num_flat[i] += sign * val
            num_flat[i] /= 2.0 * step

    rel = np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), 1.0
    )
    nonfinite = [
        int(i)
        for i in range(flat.size)
        if not (np.isfinite(analytic.reshape(-1)[i]) and np.isfinite(num_flat[i]))
    ]
    max_err = float(np.max(rel)) if rel.size else 0.0
    passed = not nonfinite and max_err < tolerance
    return GradCheckReport(analytic, numeric, rel, max_err, passed, nonfinite)
