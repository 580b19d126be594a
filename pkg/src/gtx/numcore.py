"""Dense 2-D arrays with define-by-run reverse-mode differentiation.

Every trainable computation in the package is built from the primitives here.
A :class:`Tensor` wraps a float64 ``(rows, cols)`` array; operations on tensors
that require gradients record their parents and a local backward rule.  The
:class:`Tape` is the topologically ordered list of recorded nodes reachable
from a loss, rebuilt for every forward pass.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class GTXError(Exception):
    """Base class for package errors."""


class ShapeError(GTXError, ValueError):
    pass


class ContractError(GTXError, ValueError):
    pass


class EmptyNeighborhoodError(GTXError, ValueError):
    pass


class NonFiniteError(GTXError, FloatingPointError):
    pass


_ids = itertools.count()


class Tensor:
    """A 2-D float64 array that can take part in reverse accumulation."""

    __array_priority__ = 1000
    __slots__ = ("data", "requires_grad", "node_id", "op", "_parents", "_backward", "grad")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor data must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self.grad = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor({self.rows}x{self.cols}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return NotImplemented

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A leaf tensor that owns a copy of ``data`` and requires gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(out, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(out, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at ties
    return _record(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,), "abs")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def pointwise_nonlinearity(x: Tensor, kind: str = "relu") -> Tensor:
    """Apply ``relu`` or ``tanh`` elementwise.  Both are 1-Lipschitz with value 0 at 0."""
    if kind == "relu":
        pos = x.data > 0
        return _record(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")
    if kind == "tanh":
        out = np.tanh(x.data)
        return _record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")
    if kind in ("identity", "none"):
        return x
    raise ContractError(f"unknown nonlinearity {kind!r}")


def relu(x: Tensor) -> Tensor:
    return pointwise_nonlinearity(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return pointwise_nonlinearity(x, "tanh")


# ---------------------------------------------------------------------------
# linear algebra and reshaping


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} has mismatched inner dimensions")
    return _record(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def right_matmul_const(x: Tensor, op) -> Tensor:
    """``x @ op`` for a constant dense or scipy-sparse matrix ``op``."""
    if x.cols != op.shape[0]:
        raise ShapeError(f"right_matmul_const: {x.shape} @ {op.shape} mismatch")
    if sp.issparse(op):
        op = op.tocsr()
        opT = op.T.tocsr()
        out = np.asarray(opT @ x.data.T).T
        return _record(out, (x,), lambda g: (np.asarray(op @ g.T).T,), "spmm")
    out = x.data @ op
    return _record(out, (x,), lambda g: (g @ op.T,), "const_matmul")


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.vstack([p.data for p in parts]), parts, backward, "concat_rows")


def row_slice(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _record(a.data[start:stop].copy(), (a,), backward, "row_slice")


def gather_cols(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.cols):
        raise ContractError(f"gather_cols: index out of range for {a.cols} columns")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full.T, idx, g.T)
        return (full,)

    return _record(a.data[:, idx], (a,), backward, "gather_cols")


def take(a: Tensor, rows, cols) -> Tensor:
    """Pick entries ``a[rows[t], cols[t]]`` into a ``1 x T`` tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g[0])
        return (full,)

    return _record(a.data[rows, cols][None, :], (a,), backward, "take")


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    return _record(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _record(
        np.array([[a.data.mean()]]), (a,), lambda g: (np.full(a.shape, g[0, 0] / n),), "mean"
    )


def sum_axis(a: Tensor, axis: int) -> Tensor:
    return _record(
        a.data.sum(axis=axis, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
        "sum_axis",
    )


# ---------------------------------------------------------------------------
# normalisations


def masked_row_softmax(scores: Tensor, mask=None) -> Tensor:
    """Row-wise softmax, restricted to ``mask`` entries when a mask is given.

    Masked entries come out exactly zero.  Rows are stabilised by subtracting
    their maximum over unmasked entries.
    """
    s = scores.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != s.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match scores {s.shape}")
        empty = ~mask.any(axis=1)
        if empty.any():
            raise EmptyNeighborhoodError(
                f"row {int(np.flatnonzero(empty)[0])} has no unmasked entries; add self-loops"
            )
        s = np.where(mask, s, -np.inf)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record(out, (scores,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = 0) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise every column (node) over the feature axis, then scale and shift."""
    d = x.rows
    mu = x.data.mean(axis=0, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def backward(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=0, keepdims=True) - xhat * (gx * xhat).mean(axis=0, keepdims=True))
        return dx, (g * xhat).sum(axis=1, keepdims=True), g.sum(axis=1, keepdims=True)

    if gain.shape != (d, 1) or bias.shape != (d, 1):
        raise ShapeError(f"layer_norm: gain/bias must be {(d, 1)}, got {gain.shape}, {bias.shape}")
    return _record(out, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# fused sparse attention


def edge_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    indptr: np.ndarray,
    indices: np.ndarray,
    scale_factor: float = 1.0,
    *,
    drop_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    hook: Callable | None = None,
) -> Tensor:
    """Softmax attention restricted to a CSR support pattern.

    Column ``i`` of the output is ``sum_j a_ij v_j`` over ``j`` in
    ``indices[indptr[i]:indptr[i+1]]``, with ``a_i`` the softmax of the scaled
    inner products ``<q_i, k_j>`` over that support.  Cost is linear in the
    number of support entries; the dense score matrix is never formed.
    """
    n = q.cols
    counts = np.diff(indptr)
    if (counts == 0).any():
        raise EmptyNeighborhoodError(f"row {int(np.flatnonzero(counts == 0)[0])} has an empty support")
    rows = np.repeat(np.arange(n), counts)
    starts = indptr[:-1]
    s = scale_factor * np.einsum("de,de->e", q.data[:, rows], k.data[:, indices])
    s = s - np.maximum.reduceat(s, starts)[rows]
    e = np.exp(s)
    a = e / np.add.reduceat(e, starts)[rows]
    if hook is not None:
        hook(sp.csr_matrix((a, indices, indptr), shape=(n, n)))
    if rng is not None and drop_rate > 0.0:
        keep = (rng.random(a.shape) >= drop_rate) / (1.0 - drop_rate)
    else:
        keep = None
    a_used = a if keep is None else a * keep
    A = sp.csr_matrix((a_used, indices, indptr), shape=(n, n))
    out = np.asarray((A @ v.data.T).T)

    def backward(g):
        # g: d_v x n
        gv = np.asarray((A.T @ g.T).T)
        da = np.einsum("de,de->e", g[:, rows], v.data[:, indices])
        if keep is not None:
            da = da * keep
        ds = a * (da - np.add.reduceat(a * da, starts)[rows])
        DS = sp.csr_matrix((ds * scale_factor, indices, indptr), shape=(n, n))
        gq = np.asarray((DS @ k.data.T).T)
        gk = np.asarray((DS.T @ q.data.T).T)
        return gq, gk, gv

    return _record(out, (q, k, v), backward, "edge_attention")


# ---------------------------------------------------------------------------
# reverse accumulation


class Tape:
    """Recorded operations reachable from a loss, parents before children."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        self.grads: dict[int, np.ndarray] = {}

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, t: Tensor):
        return any(n is t for n in self.nodes)


def reverse_accumulate(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from the scalar ``loss`` through ``tape``.

    Returns a mapping from each reachable leaf that requires gradients to its
    gradient array; the same arrays are stored on ``leaf.grad``.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be 1x1, got {loss.shape}")
    if not tape.nodes or tape.nodes[-1] is not loss:
        raise ContractError("loss is not the final node of the tape")
    grads = tape.grads
    grads.clear()
    grads[loss.node_id] = np.ones((1, 1))
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    for leaf, g in leaves.items():
        grads[leaf.node_id] = g
    return leaves


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    return reverse_accumulate(Tape.from_loss(loss), loss)


def grad(f: Callable[..., Tensor], *args: Tensor) -> list[np.ndarray]:
    """Gradients of scalar ``f(*args)`` with respect to each argument."""
    leaves = [parameter(a.data if isinstance(a, Tensor) else a) for a in args]
    grads = backward(f(*leaves))
    return [grads.get(l, np.zeros(l.shape)) for l in leaves]


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-6) -> float:
    """Max relative error between the analytic and central-difference gradient.

    The error of one entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    (analytic,) = grad(f, Tensor(x0))
    numeric = np.zeros_like(x0)
    probe = x0.copy()
    for idx in np.ndindex(*x0.shape):
        orig = probe[idx]
        probe[idx] = orig + step
        fp = f(Tensor(probe)).item()
        probe[idx] = orig - step
        fm = f(Tensor(probe)).item()
        probe[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value at index {idx}")
        numeric[idx] = (fp - fm) / (2.0 * step)
    if not np.all(np.isfinite(analytic)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
        raise NonFiniteError(f"non-finite analytic gradient at index {bad}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def spectral_norm(w: np.ndarray, iters: int = 50, seed: int = 0) -> float:
    """Largest singular value by power iteration."""
    v = np.random.default_rng(seed).normal(size=w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        u /= nu
        v = w.T @ u
        sigma = np.linalg.norm(v)
        if sigma == 0.0:
            return 0.0
        v /= sigma
    return float(sigma)
