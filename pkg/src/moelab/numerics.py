"""Dense double-precision numerics with a minimal reverse-mode tape.

Everything is float64. Operations validate shapes strictly: a mismatch is a
:class:`DimensionError`, never silent broadcasting. Each operation computes
its value eagerly and, while a `GradTape` is active (see :func:`recording`),
appends one node to the tape. Nodes store the operation name plus the values
needed by its adjoint rule; the rules themselves live in the `VJP_RULES`
table so tests can instrument or corrupt a single rule.

Gradient mechanics:

* `Tensor(data, name=...)` marks a parameter; gradients are reported per name.
* `GradTape.gradients(root)` walks the node list in reverse creation order
  with a fixed accumulation order, so two identical forward passes produce
  bitwise-identical gradients.
* Top-k selection indices are constants on the tape: `topk` records nothing,
  and gradients flow only through the probabilities of the selected entries.
* `finite_diff_grad` is the independent central-difference oracle used to
  cross-check the tape.

Entropy at a zero coordinate uses the 0*log(0) = 0 convention, with the
adjoint defined as 0 there (the only way zeros arise in-pipeline is exp
underflow for extreme logits).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, InputError, OracleError, ParameterError

__all__ = [
    "Tensor",
    "GradTape",
    "recording",
    "active_tape",
    "linear",
    "affine_rows",
    "softmax_temp",
    "softmax_rows",
    "topk",
    "finite_diff_grad",
    "max_rel_error",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_const",
    "matvec",
    "dot",
    "concat",
    "gather",
    "normalize_sum",
    "weighted_sum",
    "mean_tensors",
    "sum_all",
    "mean_all",
    "tanh",
    "entropy",
    "entropy_rows",
]

_UIDS = itertools.count()
_ACTIVE_TAPE: "GradTape | None" = None


class Tensor:
    """A float64 array plus an optional parameter name.

    Operations never mutate `data` in place; optimizers may rebind it
    between tape lifetimes.
    """

    __slots__ = ("data", "name", "uid")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name
        self.uid = next(_UIDS)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


@dataclass
class Node:
    """One recorded primitive: output uid, input uids, adjoint context."""

    op: str
    out: int
    inputs: tuple[int, ...]
    ctx: dict


class GradTape:
    """Ordered Wengert list; reverse replay yields per-parameter gradients."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_uids: dict[int, str] = {}
        self._shapes: dict[int, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], ctx: dict) -> None:
        for t in inputs:
            if t.name is not None and t.uid not in self._param_uids:
                self._param_uids[t.uid] = t.name
                self._shapes[t.uid] = t.data.shape
        self.nodes.append(Node(op, out.uid, tuple(t.uid for t in inputs), ctx))

    def gradients(self, root: Tensor) -> dict[str, np.ndarray]:
        """Accumulate d(root)/d(param) for every named parameter touched.

        Parameters that appeared in the forward pass but lie off the path to
        `root` get an explicit zero entry, so the result always has one entry
        per touched parameter.
        """
        if root.data.shape != ():
            raise ParameterError("gradients require a scalar root, got shape %r" % (root.data.shape,))
        adjoint: dict[int, np.ndarray] = {root.uid: np.asarray(1.0)}
        for node in reversed(self.nodes):
            u = adjoint.pop(node.out, None)
            if u is None:
                continue
            partials = VJP_RULES[node.op](node.ctx, u)
            for uid, g in zip(node.inputs, partials):
                if g is None:
                    continue
                prev = adjoint.get(uid)
                adjoint[uid] = g if prev is None else prev + g
        grads: dict[str, np.ndarray] = {}
        for uid, name in self._param_uids.items():
            g = adjoint.get(uid)
            grads[name] = np.zeros(self._shapes[uid]) if g is None else np.asarray(g, dtype=np.float64)
        return grads


@contextmanager
def recording(tape: GradTape) -> Iterator[GradTape]:
    """Make `tape` the active tape within the block. Single-threaded per tape."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = prev


def active_tape() -> GradTape | None:
    return _ACTIVE_TAPE


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, value: np.ndarray, inputs: Sequence[Tensor], ctx: dict) -> Tensor:
    out = Tensor(value)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(op, out, inputs, ctx)
    return out


def _require_vector(x: np.ndarray, what: str) -> None:
    if x.ndim != 1:
        raise DimensionError(f"{what} must be a vector, got shape {x.shape}")


def _require_matrix(x: np.ndarray, what: str) -> None:
    if x.ndim != 2:
        raise DimensionError(f"{what} must be a matrix, got shape {x.shape}")


def _require_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# adjoint rules (op name -> fn(ctx, upstream) -> per-input gradients)
# ---------------------------------------------------------------------------

VJP_RULES: dict[str, Callable[[dict, np.ndarray], tuple]] = {}


def _vjp(name: str):
    def deco(fn):
        VJP_RULES[name] = fn
        return fn

    return deco


@_vjp("add")
def _vjp_add(ctx, u):
    return (u, u)


@_vjp("sub")
def _vjp_sub(ctx, u):
    return (u, -u)


@_vjp("mul")
def _vjp_mul(ctx, u):
    return (u * ctx["b"], u * ctx["a"])


@_vjp("scale")
def _vjp_scale(ctx, u):
    return (u * ctx["c"],)


@_vjp("mul_const")
def _vjp_mul_const(ctx, u):
    return (u * ctx["c"],)


@_vjp("matvec")
def _vjp_matvec(ctx, u):
    return (np.outer(u, ctx["x"]), ctx["W"].T @ u)


@_vjp("linear")
def _vjp_linear(ctx, u):
    gw = np.outer(u, ctx["x"])
    gx = ctx["W"].T @ u
    if ctx["has_bias"]:
        return (gw, gx, u)
    return (gw, gx)


@_vjp("affine_rows")
def _vjp_affine_rows(ctx, u):
    gx = u @ ctx["W"]
    gw = u.T @ ctx["X"]
    if ctx["has_bias"]:
        return (gx, gw, u.sum(axis=0))
    return (gx, gw)


@_vjp("dot")
def _vjp_dot(ctx, u):
    return (u * ctx["b"], u * ctx["a"])


@_vjp("concat")
def _vjp_concat(ctx, u):
    n = ctx["n_first"]
    return (u[:n], u[n:])


@_vjp("gather")
def _vjp_gather(ctx, u):
    g = np.zeros(ctx["n"])
    np.add.at(g, ctx["idx"], u)  # accumulate: idx may repeat
    return (g,)


@_vjp("normalize_sum")
def _vjp_normalize_sum(ctx, u):
    y, s = ctx["y"], ctx["s"]
    return ((u - np.dot(u, y)) / s,)


@_vjp("weighted_sum")
def _vjp_weighted_sum(ctx, u):
    vs = ctx["vs"]
    gw = np.array([np.dot(u, v) for v in vs])
    return (gw, *[ctx["w"][i] * u for i in range(len(vs))])


@_vjp("mean_tensors")
def _vjp_mean_tensors(ctx, u):
    n = ctx["n"]
    return tuple(u / n for _ in range(n))


@_vjp("sum_all")
def _vjp_sum_all(ctx, u):
    return (np.full(ctx["shape"], float(u)),)


@_vjp("mean_all")
def _vjp_mean_all(ctx, u):
    size = int(np.prod(ctx["shape"])) if ctx["shape"] else 1
    return (np.full(ctx["shape"], float(u) / size),)


@_vjp("tanh")
def _vjp_tanh(ctx, u):
    y = ctx["y"]
    return (u * (1.0 - y * y),)


@_vjp("softmax")
def _vjp_softmax(ctx, u):
    p, tau = ctx["p"], ctx["tau"]
    return (p * (u - np.dot(u, p)) / tau,)


@_vjp("softmax_rows")
def _vjp_softmax_rows(ctx, u):
    p, tau = ctx["p"], ctx["tau"]
    return (p * (u - (u * p).sum(axis=1, keepdims=True)) / tau,)


@_vjp("entropy")
def _vjp_entropy(ctx, u):
    p = ctx["p"]
    g = np.where(p > 0.0, -(np.log(np.where(p > 0.0, p, 1.0)) + 1.0), 0.0)
    return (float(u) * g,)


@_vjp("entropy_rows")
def _vjp_entropy_rows(ctx, u):
    p = ctx["p"]
    g = np.where(p > 0.0, -(np.log(np.where(p > 0.0, p, 1.0)) + 1.0), 0.0)
    return (g * u[:, None],)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a.data, b.data, "add")
    return _emit("add", a.data + b.data, (a, b), {})


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a.data, b.data, "sub")
    return _emit("sub", a.data - b.data, (a, b), {})


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a.data, b.data, "mul")
    return _emit("mul", a.data * b.data, (a, b), {"a": a.data, "b": b.data})


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant (not a tape input)."""
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), {"c": c})


def mul_const(a, c) -> Tensor:
    """Elementwise product with a constant array (e.g. a 0/1 mask)."""
    a = _as_tensor(a)
    c = np.asarray(c, dtype=np.float64)
    _require_same_shape(a.data, c, "mul_const")
    return _emit("mul_const", a.data * c, (a,), {"c": c})


def matvec(W, x) -> Tensor:
    W, x = _as_tensor(W), _as_tensor(x)
    _require_matrix(W.data, "matvec W")
    _require_vector(x.data, "matvec x")
    if W.data.shape[1] != x.data.shape[0]:
        raise DimensionError(f"matvec: W is {W.data.shape}, x has length {x.data.shape[0]}")
    return _emit("matvec", W.data @ x.data, (W, x), {"W": W.data, "x": x.data})


def linear(W, x, b=None) -> Tensor:
    """W @ x + b for an m-by-n matrix, length-n vector, optional length-m bias."""
    W, x = _as_tensor(W), _as_tensor(x)
    _require_matrix(W.data, "linear W")
    _require_vector(x.data, "linear x")
    m, n = W.data.shape
    if x.data.shape[0] != n:
        raise DimensionError(f"linear: W is {W.data.shape}, x has length {x.data.shape[0]}")
    y = W.data @ x.data
    if b is None:
        return _emit("linear", y, (W, x), {"W": W.data, "x": x.data, "has_bias": False})
    b = _as_tensor(b)
    _require_vector(b.data, "linear b")
    if b.data.shape[0] != m:
        raise DimensionError(f"linear: W is {W.data.shape}, b has length {b.data.shape[0]}")
    return _emit("linear", y + b.data, (W, x, b), {"W": W.data, "x": x.data, "has_bias": True})


def affine_rows(X, W, b=None) -> Tensor:
    """Row-batched affine map: X @ W.T (+ b per row) for X (M,n), W (m,n)."""
    X, W = _as_tensor(X), _as_tensor(W)
    _require_matrix(X.data, "affine_rows X")
    _require_matrix(W.data, "affine_rows W")
    m, n = W.data.shape
    if X.data.shape[1] != n:
        raise DimensionError(f"affine_rows: X is {X.data.shape}, W is {W.data.shape}")
    y = X.data @ W.data.T
    if b is None:
        return _emit("affine_rows", y, (X, W), {"X": X.data, "W": W.data, "has_bias": False})
    b = _as_tensor(b)
    _require_vector(b.data, "affine_rows b")
    if b.data.shape[0] != m:
        raise DimensionError(f"affine_rows: W is {W.data.shape}, b has length {b.data.shape[0]}")
    return _emit("affine_rows", y + b.data, (X, W, b), {"X": X.data, "W": W.data, "has_bias": True})


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_vector(a.data, "dot a")
    _require_same_shape(a.data, b.data, "dot")
    return _emit("dot", np.dot(a.data, b.data), (a, b), {"a": a.data, "b": b.data})


def concat(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_vector(a.data, "concat a")
    _require_vector(b.data, "concat b")
    return _emit("concat", np.concatenate([a.data, b.data]), (a, b), {"n_first": a.data.shape[0]})


def gather(a, idx: Sequence[int]) -> Tensor:
    """Select entries of a vector at constant indices (indices carry no grad)."""
    a = _as_tensor(a)
    _require_vector(a.data, "gather input")
    idx = [int(i) for i in idx]
    n = a.data.shape[0]
    if any(i < 0 or i >= n for i in idx):
        raise ParameterError(f"gather: index out of range for length {n}: {idx}")
    return _emit("gather", a.data[idx], (a,), {"idx": np.asarray(idx, dtype=np.intp), "n": n})


def normalize_sum(v) -> Tensor:
    """v / sum(v). The sum must be nonzero."""
    v = _as_tensor(v)
    _require_vector(v.data, "normalize_sum input")
    s = float(v.data.sum())
    if s == 0.0 or not np.isfinite(s):
        raise InputError(f"normalize_sum: sum is {s}")
    y = v.data / s
    return _emit("normalize_sum", y, (v,), {"y": y, "s": s})


def weighted_sum(w, vecs: Sequence) -> Tensor:
    """sum_k w[k] * vecs[k] for a length-K weight vector and K same-shape vectors."""
    w = _as_tensor(w)
    _require_vector(w.data, "weighted_sum weights")
    vs = [_as_tensor(v) for v in vecs]
    if len(vs) != w.data.shape[0]:
        raise DimensionError(f"weighted_sum: {w.data.shape[0]} weights vs {len(vs)} vectors")
    if not vs:
        raise InputError("weighted_sum: no vectors")
    for v in vs:
        _require_same_shape(vs[0].data, v.data, "weighted_sum")
    out = np.zeros_like(vs[0].data)
    for wk, v in zip(w.data, vs):
        out = out + wk * v.data
    return _emit(
        "weighted_sum", out, (w, *vs), {"w": w.data, "vs": [v.data for v in vs]}
    )


def mean_tensors(tensors: Sequence) -> Tensor:
    """Elementwise mean of same-shape tensors (one node, deterministic order)."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise InputError("mean_tensors: empty input")
    for t in ts:
        _require_same_shape(ts[0].data, t.data, "mean_tensors")
    acc = np.zeros_like(ts[0].data)
    for t in ts:
        acc = acc + t.data
    return _emit("mean_tensors", acc / len(ts), tuple(ts), {"n": len(ts)})


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("sum_all", np.asarray(a.data.sum()), (a,), {"shape": a.data.shape})


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("mean_all", np.asarray(a.data.mean()), (a,), {"shape": a.data.shape})


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), {"y": y})


def _stable_softmax(z: np.ndarray, tau: float, axis: int) -> np.ndarray:
    z = z / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_temp(logits, tau: float) -> Tensor:
    """Temperature softmax over a vector, stabilized by max-subtraction.

    The output sums to 1 within 1e-9 and is entrywise positive unless the
    logit spread exceeds the float64 exp underflow range (~745 * tau).
    """
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise ParameterError(f"softmax_temp: tau must be positive and finite, got {tau}")
    logits = _as_tensor(logits)
    _require_vector(logits.data, "softmax_temp logits")
    if logits.data.shape[0] == 0:
        raise InputError("softmax_temp: empty logits")
    if not np.isfinite(logits.data).all():
        raise InputError("softmax_temp: non-finite logits")
    p = _stable_softmax(logits.data, tau, axis=0)
    return _emit("softmax", p, (logits,), {"p": p, "tau": tau})


def softmax_rows(logits, tau: float) -> Tensor:
    """Row-wise temperature softmax for an (M, n) matrix."""
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0.0:
        raise ParameterError(f"softmax_rows: tau must be positive and finite, got {tau}")
    logits = _as_tensor(logits)
    _require_matrix(logits.data, "softmax_rows logits")
    if not np.isfinite(logits.data).all():
        raise InputError("softmax_rows: non-finite logits")
    p = _stable_softmax(logits.data, tau, axis=1)
    return _emit("softmax_rows", p, (logits,), {"p": p, "tau": tau})


def entropy(p) -> Tensor:
    """Shannon entropy -sum p ln p (natural log, 0 ln 0 = 0) of a vector."""
    p = _as_tensor(p)
    _require_vector(p.data, "entropy input")
    safe = np.where(p.data > 0.0, p.data, 1.0)
    h = -np.sum(np.where(p.data > 0.0, p.data * np.log(safe), 0.0))
    return _emit("entropy", np.asarray(h), (p,), {"p": p.data})


def entropy_rows(P) -> Tensor:
    """Row-wise Shannon entropy of an (M, n) matrix, returning length-M vector."""
    P = _as_tensor(P)
    _require_matrix(P.data, "entropy_rows input")
    safe = np.where(P.data > 0.0, P.data, 1.0)
    h = -np.sum(np.where(P.data > 0.0, P.data * np.log(safe), 0.0), axis=1)
    return _emit("entropy_rows", h, (P,), {"p": P.data})


def topk(values, k: int) -> list[int]:
    """Indices of the k largest entries, ties broken by lowest index.

    Ordered by rank (largest first). Selection is a constant with respect to
    the tape: nothing is recorded and no gradient flows through the indices.
    """
    v = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    _require_vector(v, "topk values")
    n = v.shape[0]
    if not isinstance(k, (int, np.integer)) or isinstance(k, bool):
        raise ParameterError(f"topk: k must be an integer, got {k!r}")
    if k < 1 or k > n:
        raise ParameterError(f"topk: k={k} out of range for length {n}")
    if not np.isfinite(v).all():
        raise InputError("topk: non-finite values")
    order = np.lexsort((np.arange(n), -v))
    return [int(i) for i in order[:k]]


def finite_diff_grad(f, params: dict[str, np.ndarray], eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient oracle: (f(x+eps) - f(x-eps)) / (2 eps).

    `f` is called with a working copy of `params` (mutated coordinate by
    coordinate and restored), so it must read values fresh on every call.
    """
    eps = float(eps)
    if not np.isfinite(eps) or eps <= 0.0:
        raise ParameterError(f"finite_diff_grad: eps must be positive, got {eps}")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads: dict[str, np.ndarray] = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f(work))
            flat[j] = orig - eps
            fm = float(f(work))
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise OracleError(f"finite_diff_grad: non-finite f at {name}[{j}]: {fp}, {fm}")
            gflat[j] = (fp - fm) / (2.0 * eps)
        grads[name] = g
    return grads


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor); the floor keeps zero grads comparable."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"max_rel_error: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
