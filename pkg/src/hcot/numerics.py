"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every op is a plain function over :class:`Tensor`. When at least one input
belongs to a recording :class:`Graph`, the op appends a record to that graph;
``Graph.backward`` then replays the records in exact reverse order. Tensors
without a graph are constants, so the same model code serves both training
(with a graph) and inference (without one).

The layer-level ops (``linear``, ``layer_norm``, ``causal_attention``,
``softmax_cross_entropy``) are fused with hand-written backward passes to keep
per-op Python overhead low on a single core.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-12


class NumericError(FloatingPointError):
    """A forward op produced a non-finite value."""


class Tensor:
    __slots__ = ("data", "grad", "graph", "name")

    def __init__(self, data, graph: Graph | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.graph = graph
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, tracked={self.graph is not None})"


@dataclass
class OpRecord:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Graph:
    """Ordered tape of op records plus a registry of parameter leaves.

    A graph is single-writer: one training step builds and consumes one graph.
    ``record=False`` gives a graph whose ``param`` returns untracked constants,
    which is how the finite-difference side of :func:`grad_check` re-runs a
    loss without taping it.
    """

    record: bool = True
    check_finite: bool = True
    records: list[OpRecord] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)

    def param(self, name: str, array: np.ndarray) -> Tensor:
        # the leaf shares memory with ``array`` so in-place perturbation is visible
        if name in self.params:
            return self.params[name]
        t = Tensor.__new__(Tensor)
        t.data = array
        t.grad = None
        t.graph = self if self.record else None
        t.name = name
        if self.record:
            self.params[name] = t
        return t

    def backward(self, loss: Tensor) -> None:
        """Replay the tape in reverse, then release it; a graph supports one backward."""
        if not self.records and loss.graph is self:
            raise RuntimeError("graph tape already consumed by a previous backward")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.graph is not self:
            raise ValueError("loss was not produced on this graph")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or inp.graph is not self:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi
            rec.output.grad = None if rec.output is not loss else rec.output.grad
        # drop the tape so activations and closures are freed without the cycle collector
        self.records.clear()

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.params.items()
        }


def constant(data) -> Tensor:
    return Tensor(data)


def _graph_of(*tensors: Tensor) -> Graph | None:
    for t in tensors:
        if t.graph is not None:
            return t.graph
    return None


def _emit(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward) -> Tensor:
    g = _graph_of(*inputs)
    if g is not None and g.check_finite and not np.isfinite(out).all():
        raise NumericError(f"{kind} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.graph = g
    t.name = None
    if g is not None:
        g.records.append(OpRecord(kind, inputs, t, backward))
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise / structural -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", (a, b), out, backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading dims of ``a`` are batch dims."""
    if b.data.ndim != 2 or a.data.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        da = g @ B.T
        db = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return da, db

    return _emit("matmul", (a, b), out, backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` fused into one tape record."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    X, W = x.data, w.data
    out = X @ W
    out += b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ W.T, X.reshape(-1, X.shape[-1]).T @ g2, g2.sum(axis=0)

    return _emit("linear", (x, w, b), out, backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; backward scatters through a one-hot product."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ValueError(f"embedding index out of range [0, {V})")
    out = table.data[ids]

    def backward(g):
        flat = ids.reshape(-1)
        onehot = np.zeros((flat.size, V), dtype=DTYPE)
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(flat.size, -1),)

    return _emit("embedding", (table,), out, backward)


def replace_rows(x: Tensor, batch_idx, pos_idx, values: Tensor) -> Tensor:
    """Return ``x`` with rows ``x[batch_idx[i], pos_idx[i]]`` set to ``values[i]``."""
    bi = np.asarray(batch_idx, dtype=np.int64)
    pi = np.asarray(pos_idx, dtype=np.int64)
    if values.shape != (bi.size, x.shape[-1]):
        raise ValueError(f"replacement rows {values.shape} do not fit {bi.size} x {x.shape[-1]}")
    out = x.data.copy()
    out[bi, pi] = values.data

    def backward(g):
        gx = g.copy()
        gx[bi, pi] = 0.0
        return gx, g[bi, pi]

    return _emit("replace_rows", (x, values), out, backward)


def take_rows(x: Tensor, batch_idx, pos_idx) -> Tensor:
    """Gather ``x[batch_idx[i], pos_idx[i]]`` from a ``[B, T, d]`` tensor into ``[k, d]``."""
    bi = np.asarray(batch_idx, dtype=np.int64)
    pi = np.asarray(pos_idx, dtype=np.int64)
    shape = x.shape
    out = x.data[bi, pi]

    def backward(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, (bi, pi), g)
        return (gx,)

    return _emit("take_rows", (x,), out, backward)


def gelu(x: Tensor) -> Tensor:
    X = x.data
    c = math.sqrt(2.0 / math.pi)
    u = c * (X + 0.044715 * (X * X * X))
    t = np.tanh(u)
    out = 0.5 * X * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * X * X)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du),)

    return _emit("gelu", (x,), out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        dgamma = (g2 * xhat.reshape(g2.shape)).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _emit("layer_norm", (x, gamma, beta), out, backward)


def causal_attention(qkv: Tensor, n_heads: int) -> Tensor:
    """Multi-head causal self-attention core over packed ``[B, T, 3d]`` projections."""
    B, T, d3 = qkv.shape
    d = d3 // 3
    if d3 != 3 * d or d % n_heads:
        raise ValueError(f"cannot split {qkv.shape} into {n_heads} heads")
    dh = d // n_heads
    sc = 1.0 / math.sqrt(dh)
    heads = qkv.data.reshape(B, T, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = heads[0], heads[1], heads[2]
    s = (q @ k.transpose(0, 1, 3, 2)) * sc
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    s[..., future] = -np.inf
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    o = p @ v
    out = o.transpose(0, 2, 1, 3).reshape(B, T, d)

    def backward(g):
        go = g.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
        dv = p.transpose(0, 1, 3, 2) @ go
        dp = go @ v.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * sc
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv])  # [3, B, H, T, dh]
        return (dqkv.transpose(1, 3, 0, 2, 4).reshape(B, T, d3),)

    return _emit("causal_attention", (qkv,), out, backward)


# -- losses and pooling ------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mask-weighted mean of ``-log softmax(logits)[target]`` over positions.

    ``logits`` is ``[..., V]``; ``targets`` and ``mask`` match its leading shape.
    """
    V = logits.shape[-1]
    L = logits.data.reshape(-1, V)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.size != L.shape[0]:
        raise ValueError(f"{tgt.size} targets for {L.shape[0]} logit rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        bad = tgt[(tgt < 0) | (tgt >= V)][0]
        raise ValueError(f"target index {bad} out of range [0, {V})")
    w = np.ones(tgt.size, dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE).reshape(-1)
    if w.size != tgt.size:
        raise ValueError(f"mask has {w.size} entries for {tgt.size} positions")
    if (w < 0).any():
        raise ValueError("mask weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("mask selects no positions")
    m = L.max(axis=1, keepdims=True)
    shifted = L - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(tgt.size)
    nll = lse - shifted[rows, tgt]
    out = np.asarray((w * nll).sum() / total)
    shape = logits.shape

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, tgt] -= 1.0
        probs *= (w * (float(g) / total))[:, None]
        return (probs.reshape(shape),)

    return _emit("softmax_cross_entropy", (logits,), out, backward)


def masked_mean(hidden: Tensor, weights) -> Tensor:
    """Per-batch-row mean of ``hidden[B, T, d]`` over positions where ``weights[B, T]`` is 1."""
    W = np.asarray(weights, dtype=DTYPE)
    counts = W.sum(axis=1)
    if (counts <= 0).any():
        raise ValueError("cannot pool an empty span")
    coef = W / counts[:, None]
    out = np.einsum("bt,btd->bd", coef, hidden.data)

    def backward(g):
        return (coef[:, :, None] * g[:, None, :],)

    return _emit("masked_mean", (hidden,), out, backward)


def mean_pool(hidden: Tensor, span: Sequence[int]) -> Tensor:
    """Arithmetic mean of rows ``span`` of a ``[T, d]`` tensor."""
    T = hidden.shape[0]
    span = sorted(set(int(i) for i in span))
    if not span:
        raise ValueError("cannot pool an empty span")
    if span[0] < 0 or span[-1] >= T:
        raise ValueError(f"span positions must lie in [0, {T})")
    idx = np.asarray(span)
    n = float(idx.size)
    out = hidden.data[idx].sum(axis=0) / n

    def backward(g):
        gx = np.zeros(hidden.shape, dtype=DTYPE)
        gx[idx] = g / n
        return (gx,)

    return _emit("mean_pool", (hidden,), out, backward)


def l2_normalize(v: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    X = v.data
    norm = np.sqrt((X * X).sum(axis=-1, keepdims=True))
    if (norm <= eps).any():
        raise ValueError(f"cannot normalize a vector of norm {float(norm.min()):.3e} (floor {eps})")
    y = X / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _emit("l2_normalize", (v,), y, backward)


# -- gradient checking -------------------------------------------------------


def grad_check(
    build_loss: Callable[[Graph], Tensor],
    eps: float = 1e-4,
    params: Sequence[str] | None = None,
) -> dict[str, float]:
    """Compare tape gradients with central differences for every parameter.

    ``build_loss`` receives a graph, registers parameters through
    ``graph.param`` and returns a scalar loss. Parameters are perturbed in
    place and restored. The relative error of a parameter tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)``.
    """
    g = Graph()
    loss = build_loss(g)
    if loss.data.size != 1:
        raise ValueError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    g.backward(loss)
    analytic = g.grads()
    names = list(analytic) if params is None else list(params)

    def f() -> float:
        return build_loss(Graph(record=False)).item()

    report = {}
    for name in names:
        arr = g.params[name].data
        flat = arr.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
        a = analytic[name].reshape(-1)
        denom = max(np.abs(a).max(), np.abs(numeric).max(), 1e-12)
        report[name] = float(np.abs(a - numeric).max() / denom)
    return report
