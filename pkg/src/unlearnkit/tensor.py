"""Dense float tensors with reverse-mode automatic differentiation.

The engine supplies exactly the operations a small decoder-only language
model needs: matmul, embedding lookup, add/mul/scale, GELU, layer norm,
softmax, cross entropy, and a few helpers for unlearning losses. Everything
runs on contiguous row-major numpy arrays, float32 by default with a
float64 mode (build the leaf tensors in float64) for gradient verification.

Determinism contract: given identical inputs and op sequence, every forward
and backward pass is bit-identical across runs and across BLAS thread
counts. Reductions either run in numpy's fixed single-threaded order or in
OpenBLAS gemm, which partitions the output matrix and keeps each element's
k-accumulation order fixed (verified bit-stable for 1..8 threads on the
supported builds). Scoring-path matmuls additionally accumulate in float64
with one final rounding, which makes a row's result independent of what
else sits in the batch; see ``_mm``.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_node_counter = itertools.count()


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    """Operand shapes or dtypes are incompatible."""


class GraphError(TensorError):
    """Misuse of the autodiff graph, e.g. backward called twice."""


class DegenerateBatchError(TensorError):
    """A supervised loss was asked for but no positions are supervised."""


class EvaluationError(TensorError):
    """A checked computation produced a non-finite value."""


class Tensor:
    """A dense float array plus an optional autodiff record.

    ``data`` is always a contiguous numpy array of float32 or float64.
    Result tensors of ops whose inputs require gradients carry a backward
    closure; leaf tensors created with ``requires_grad=True`` receive their
    gradient in ``.grad`` after ``backward()``. Tensors are treated as
    immutable values: ops never write to an input's buffer.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_nid", "_done")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._nid = next(_node_counter)
        self._done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype)))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    """Wrap an op result; drop the graph record when no input needs grads."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)
    return Tensor(data)


def _check_same_dtype(*tensors: Tensor) -> None:
    dts = {t.dtype for t in tensors}
    if len(dts) > 1:
        raise ShapeError(f"mixed dtypes in op: {sorted(str(d) for d in dts)}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# core ops


def _mm(a: np.ndarray, b: np.ndarray, out_dtype, exact: bool) -> np.ndarray:
    """Contraction primitive.

    ``exact=True``: products and sums accumulate in float64 and the result
    is rounded once to the op dtype. The single final rounding makes the
    float32 result independent of BLAS blocking/association (order effects
    are ~2^-52 relative, far below the 2^-24 rounding step), so a row's
    product is bit-identical whether computed alone or inside any batch.

    ``exact=False``: native-precision gemm. Bit-deterministic for fixed
    operand shapes across runs and thread counts (gemm partitions the
    output matrix, never the reduction axis), but low bits may vary with
    the batch dimension. Used only inside gradient-bearing graphs, where
    shapes are fixed by the training schedule and per-run determinism is
    the contract.
    """
    if a.dtype == np.float64 or not exact:
        return np.matmul(a, b)
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(out_dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or equal-batch 3-D operands.

    Inner dimensions must match. No-grad (scoring) calls use the exact
    batch-invariant accumulation; gradient-bearing (training) calls use
    native gemm — see ``_mm`` for both contracts.
    """
    _check_same_dtype(a, b)
    if a.data.ndim == b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    elif a.data.ndim == b.data.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"batched matmul shapes differ: {a.shape} x {b.shape}")
    else:
        raise ShapeError(f"matmul expects 2-D or 3-D pairs, got {a.shape} x {b.shape}")
    training = a.requires_grad or b.requires_grad
    out = _mm(a.data, b.data, a.dtype, exact=not training)

    def backward(g: np.ndarray):
        ga = _mm(g, b.data.swapaxes(-1, -2), a.dtype, exact=False)
        gb = _mm(a.data.swapaxes(-1, -2), g, a.dtype, exact=False)
        return ga, gb

    return _result(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting (used for residuals/biases)."""
    _check_same_dtype(a, b)
    out = a.data + b.data

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data * b.data

    def backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    out = a.data * s

    def backward(g: np.ndarray):
        return (g * s,)

    return _result(out, (a,), backward)


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array (no gradient flows into ``c``)."""
    out = a.data + c

    def backward(g: np.ndarray):
        return (_unbroadcast(g, a.shape),)

    return _result(out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _result(np.ascontiguousarray(out), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g: np.ndarray):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(out, (a,), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ``ids`` (any leading shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), backward)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (the exact formula used everywhere):

        gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
    """
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        dg = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * dg.astype(x.dtype),)

    return _result(out.astype(x.dtype), (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    A constant vector normalizes to zeros before the affine map (the eps
    in the denominator guards the zero-variance case).
    """
    _check_same_dtype(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * ivar
    out = xhat * gain.data + bias.data

    def backward(g: np.ndarray):
        dxhat = g * gain.data
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * ivar**3
        dmu = -(dxhat * ivar).sum(axis=-1, keepdims=True) + dvar * (-2.0 / d) * xc.sum(axis=-1, keepdims=True)
        dx = dxhat * ivar + dvar * (2.0 / d) * xc + dmu / d
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx.astype(x.dtype), dgain.astype(x.dtype), dbias.astype(x.dtype)

    return _result(out.astype(x.dtype), (x, gain, bias), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (((g - dot) * out).astype(x.dtype),)

    return _result(out.astype(x.dtype), (x,), backward)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over supervised positions.

    ``logits`` has vocabulary on the last axis; ``targets`` holds integer
    class ids for every position; ``mask`` (optional boolean, same shape as
    ``targets``) selects the supervised positions. With no supervised
    position the batch is degenerate and an error is raised rather than
    returning NaN.
    """
    targets = np.asarray(targets)
    v = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, v)
    flat_targets = targets.reshape(-1)
    if mask is None:
        sel = np.ones(flat_targets.shape[0], dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool).reshape(-1)
    count = int(sel.sum())
    if count == 0:
        raise DegenerateBatchError("no supervised positions in batch")
    ls = _log_softmax(flat_logits)
    picked = ls[np.arange(flat_targets.shape[0]), flat_targets]
    loss = -(picked[sel].sum() / count)
    if not np.isfinite(loss):
        raise EvaluationError("cross_entropy produced a non-finite loss")

    def backward(g: np.ndarray):
        # d/dlogits of -mean(logprob) = (softmax - onehot) / count on selected rows
        p = np.exp(ls)
        p[np.arange(flat_targets.shape[0]), flat_targets] -= 1.0
        p[~sel] = 0.0
        gl = (g * p / count).reshape(logits.shape)
        return (gl.astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def sequence_logprob_sums(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-row sums of target-token log-probabilities.

    ``logits`` is [B, T, V]; ``targets`` and boolean ``mask`` are [B, T].
    Returns a [B] tensor of sum(log p(target_t)) over masked positions,
    the sequence log-likelihood used by preference-style unlearning losses.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    b, t, v = logits.shape
    ls = _log_softmax(logits.data)
    picked = np.take_along_axis(ls, targets[..., None], axis=-1)[..., 0]
    out = (picked * mask).sum(axis=-1)

    def backward(g: np.ndarray):
        p = np.exp(ls)
        onehot_minus_p = -p
        np.add.at(onehot_minus_p.reshape(-1, v), (np.arange(b * t), targets.reshape(-1)), 1.0)
        gl = onehot_minus_p * (g[:, None, None] * mask[..., None])
        return (gl.astype(logits.dtype),)

    return _result(out.astype(logits.dtype), (logits,), backward)


def softplus(a: Tensor) -> Tensor:
    """Numerically stable log(1 + exp(x))."""
    out = np.logaddexp(0.0, a.data)

    def backward(g: np.ndarray):
        sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return ((g * sig).astype(a.dtype),)

    return _result(out.astype(a.dtype), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def backward(g: np.ndarray):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.sum() / n

    def backward(g: np.ndarray):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar ``loss``.

    Nodes are visited in exact reverse order of creation (a fixed reverse
    topological order), so gradient accumulation is reproducible. Leaf
    tensors with ``requires_grad=True`` receive ``.grad``. Calling twice on
    the same loss is a usage error.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing to differentiate")
    if loss._done:
        raise GraphError("backward already called on this graph")
    loss._done = True

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._nid, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.dtype)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# gradient verification oracle


def finite_diff_check(
    f: Callable[[dict], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-4,
    n_samples: int = 200,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``f`` must be a deterministic map from the parameter dict to a scalar
    loss tensor. Coordinates are sampled uniformly (seeded) across all
    parameters; for each, the check perturbs the raw value in place by
    +/- eps, re-evaluates ``f``, and compares. Returns

        max over samples of |g_AD - g_FD| / (|g_AD| + |g_FD| + 1e-12).

    Intended to run with float64 parameters; float32 finite differences
    drown in round-off.
    """
    loss = f(params)
    val = loss.data.item()
    if not np.isfinite(val):
        raise EvaluationError("objective returned a non-finite value")
    backward(loss)
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}

    names = sorted(params)
    sizes = np.array([params[n].data.size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    coords = rng.integers(0, total, size=n_samples)

    max_rel = 0.0
    for c in coords:
        j = int(np.searchsorted(offsets, c, side="right") - 1)
        name = names[j]
        i = int(c - offsets[j])
        buf = params[name].data.reshape(-1)
        orig = buf[i]
        buf[i] = orig + eps
        lp = f(params).data.item()
        buf[i] = orig - eps
        lm = f(params).data.item()
        buf[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise EvaluationError("objective returned a non-finite value during perturbation")
        g_fd = (lp - lm) / (2.0 * eps)
        g_ad = float(grads[name].reshape(-1)[i])
        rel = abs(g_ad - g_fd) / (abs(g_ad) + abs(g_fd) + 1e-12)
        max_rel = max(max_rel, rel)
    return max_rel
