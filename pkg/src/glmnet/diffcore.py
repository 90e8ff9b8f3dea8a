"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every op takes :class:`Tensor` operands and returns a new :class:`Tensor`.
If any operand lives on a :class:`Tape` the op is recorded there together
with a vector-Jacobian product closure; otherwise the result is a plain
constant and nothing is recorded. All values are float64.

Typical use::

    tape = Tape()
    p = store.bind(tape)
    loss = dc.sum(dc.matmul(p["a"], p["b"]))
    backward(loss, store)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateRowError, DimensionError, NonFiniteError

__all__ = [
    "Tensor", "Tape", "Node", "ParamStore", "GradCheckReport",
    "constant", "matmul", "add", "sub", "mul", "scale", "add_scalar",
    "scalar_mix", "relu", "exp", "log", "clip", "square", "transpose",
    "concat_cols", "split_rows", "outer_sum", "row_softmax", "row_normalize",
    "col_normalize", "sum", "row_sums", "col_sums", "backward", "grad_check",
]


class Tensor:
    """A dense 2-D float64 array, optionally tied to a node on a tape."""

    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: Optional["Tape"] = None, node: Optional[int] = None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.value = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return np.array(self.value)

    def __repr__(self):
        kind = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {kind})"


def constant(value) -> Tensor:
    """An untracked tensor holding a read-only copy of ``value``."""
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return Tensor(arr)


@dataclass
class Node:
    op: str
    inputs: tuple[Optional[int], ...]
    output: int
    vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]


@dataclass
class Tape:
    """Ordered record of ops; node ids are positions in ``nodes``."""

    nodes: list[Node] = field(default_factory=list)
    params: dict[int, str] = field(default_factory=dict)

    def leaf(self, value, name: Optional[str] = None) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), node_id, None))
        if name is not None:
            self.params[node_id] = name
        return Tensor(np.array(value, dtype=np.float64), self, node_id)

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
        node_id = len(self.nodes)
        ids = tuple(t.node if t.tape is self else None for t in inputs)
        self.nodes.append(Node(op, ids, node_id, vjp))
        return Tensor(value, self, node_id)


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    value.setflags(write=False)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(op, inputs, value, vjp)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return _emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _emit("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _emit("scale", (a,), alpha * a.value, lambda g: (alpha * g,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", (a,), a.value + float(c), lambda g: (g,))


def scalar_mix(alpha: float, a: Tensor, beta: float, b: Tensor) -> Tensor:
    """``alpha * a + beta * b``."""
    _same_shape("scalar_mix", a, b)
    alpha, beta = float(alpha), float(beta)
    value = alpha * a.value + beta * b.value
    return _emit("scalar_mix", (a, b), value, lambda g: (alpha * g, beta * g))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.value > 0
    return _emit("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    if (av <= 0).any():
        raise ContractError("log: input must be strictly positive")
    return _emit("log", (a,), np.log(av), lambda g: (g / av,))


def clip(a: Tensor, lo: float, hi: float, straight_through: bool = False) -> Tensor:
    """Clamp to ``[lo, hi]``.

    The exact gradient is zero outside the interval. ``straight_through``
    passes the upstream gradient unchanged instead, so a clamped entry is
    still pulled back towards the interval.
    """
    av = a.value
    if straight_through:
        return _emit("clip_st", (a,), np.clip(av, lo, hi), lambda g: (g,))
    inside = (av >= lo) & (av <= hi)
    return _emit("clip", (a,), np.clip(av, lo, hi), lambda g: (g * inside,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return _emit("square", (a,), av * av, lambda g: (2.0 * g * av,))


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols: row counts of {a.shape} and {b.shape} differ")
    s = a.cols
    value = np.concatenate([a.value, b.value], axis=1)
    return _emit("concat_cols", (a, b), value, lambda g: (g[:, :s], g[:, s:]))


def split_rows(a: Tensor, at: int) -> tuple[Tensor, Tensor]:
    """Split into rows ``[:at]`` and ``[at:]``."""
    if not 0 < at < a.rows:
        raise DimensionError(f"split_rows: cannot split {a.shape} at row {at}")
    rows, cols = a.shape

    def top_vjp(g):
        full = np.zeros((rows, cols))
        full[:at] = g
        return (full,)

    def bottom_vjp(g):
        full = np.zeros((rows, cols))
        full[at:] = g
        return (full,)

    top = _emit("split_top", (a,), a.value[:at].copy(), top_vjp)
    bottom = _emit("split_bottom", (a,), a.value[at:].copy(), bottom_vjp)
    return top, bottom


def outer_sum(u: Tensor, v: Tensor) -> Tensor:
    """``out[i, j] = u[i] + v[j]`` for column vectors u (r x 1), v (c x 1)."""
    if u.cols != 1 or v.cols != 1:
        raise DimensionError(f"outer_sum: expected column vectors, got {u.shape} and {v.shape}")
    value = u.value + v.value.T
    return _emit(
        "outer_sum", (u, v), value,
        lambda g: (g.sum(axis=1, keepdims=True), g.sum(axis=0, keepdims=True).T),
    )


def row_softmax(a: Tensor, mask: Optional[Tensor | np.ndarray] = None) -> Tensor:
    """Row-wise softmax, optionally weighted by a nonnegative mask.

    ``out[i, j] = mask[i, j] * exp(a[i, j]) / sum_l mask[i, l] * exp(a[i, l])``
    """
    av = a.value
    if mask is None:
        shifted = av - av.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    else:
        w = mask.value if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        if w.shape != av.shape:
            raise DimensionError(f"row_softmax: mask shape {w.shape} != logits shape {av.shape}")
        if (w < 0).any():
            raise ContractError("row_softmax: mask must be nonnegative")
        support = w > 0
        empty = ~support.any(axis=1)
        if empty.any():
            raise DegenerateRowError(f"row_softmax: mask rows {np.flatnonzero(empty).tolist()} are all zero")
        row_max = np.where(support, av, -np.inf).max(axis=1, keepdims=True)
        e = w * np.exp(np.where(support, av - row_max, 0.0))
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _emit("row_softmax", (a,), out, vjp)


def row_normalize(a: Tensor, eps: float = 0.0) -> Tensor:
    """Divide each row by ``its sum + eps``.

    With ``eps == 0`` a row summing to zero or less raises DegenerateRowError.
    """
    av = a.value
    s = av.sum(axis=1, keepdims=True)
    if eps == 0.0 and (s <= 0).any():
        raise DegenerateRowError(f"row_normalize: rows {np.flatnonzero(s[:, 0] <= 0).tolist()} have no mass")
    d = s + eps
    out = av / d

    def vjp(g):
        return (g / d - (g * av).sum(axis=1, keepdims=True) / (d * d),)

    return _emit("row_normalize", (a,), out, vjp)


def col_normalize(a: Tensor, eps: float = 0.0) -> Tensor:
    """Divide each column by ``its sum + eps``."""
    av = a.value
    s = av.sum(axis=0, keepdims=True)
    if eps == 0.0 and (s <= 0).any():
        raise DegenerateRowError(f"col_normalize: columns {np.flatnonzero(s[0] <= 0).tolist()} have no mass")
    d = s + eps
    out = av / d

    def vjp(g):
        return (g / d - (g * av).sum(axis=0, keepdims=True) / (d * d),)

    return _emit("col_normalize", (a,), out, vjp)


def _log_normalize(a: Tensor, axis: int, op: str) -> Tensor:
    av = a.value
    top = av.max(axis=axis, keepdims=True)
    lse = top + np.log(np.exp(av - top).sum(axis=axis, keepdims=True))
    out = av - lse
    soft = np.exp(out)
    return _emit(op, (a,), out, lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def log_row_normalize(a: Tensor) -> Tensor:
    """``a - logsumexp`` over each row: the log of ``row_normalize(exp(a))``."""
    return _log_normalize(a, 1, "log_row_normalize")


def log_col_normalize(a: Tensor) -> Tensor:
    """``a - logsumexp`` over each column."""
    return _log_normalize(a, 0, "log_col_normalize")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _emit("sum", (a,), np.array([[a.value.sum()]]), lambda g: (np.full(shape, g[0, 0]),))


def row_sums(a: Tensor) -> Tensor:
    cols = a.cols
    return _emit("row_sums", (a,), a.value.sum(axis=1, keepdims=True), lambda g: (np.repeat(g, cols, axis=1),))


def col_sums(a: Tensor) -> Tensor:
    rows = a.rows
    return _emit("col_sums", (a,), a.value.sum(axis=0, keepdims=True), lambda g: (np.repeat(g, rows, axis=0),))


# ---------------------------------------------------------------------------
# parameters and reverse sweep


class ParamStore:
    """Named trainable parameters with gradient accumulators and optimizer state."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, dict] = {}

    def add(self, name: str, value) -> None:
        if name in self.values:
            raise ContractError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {arr.shape}")
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.state[name] = {}

    @property
    def names(self) -> list[str]:
        return list(self.values)

    def __contains__(self, name):
        return name in self.values

    def __len__(self):
        return len(self.values)

    def size(self) -> int:
        return int(np.sum([v.size for v in self.values.values()]))

    def bind(self, tape: Tape) -> dict[str, Tensor]:
        """Register every parameter as a leaf on ``tape``."""
        return {name: tape.leaf(v, name) for name, v in self.values.items()}

    def constants(self) -> dict[str, Tensor]:
        """Parameters as untracked constants, for evaluation."""
        return {name: constant(v) for name, v in self.values.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, v in self.values.items():
            other.add(name, v)
            other.grads[name] = self.grads[name].copy()
            other.state[name] = {k: (np.array(s) if isinstance(s, np.ndarray) else s)
                                 for k, s in self.state[name].items()}
        return other


def backward(loss: Tensor, store: Optional[ParamStore] = None) -> dict[str, np.ndarray]:
    """Reverse sweep from a 1x1 ``loss``.

    Gradients of parameter leaves are accumulated into ``store.grads`` (when
    given) and also returned by name. Other leaves get nothing.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("loss is a constant; nothing was recorded")
    adj: dict[int, np.ndarray] = {loss.node: np.ones((1, 1))}
    out: dict[str, np.ndarray] = {}
    for node in reversed(tape.nodes[: loss.node + 1]):
        g = adj.pop(node.output, None)
        if g is None:
            continue
        if node.vjp is None:
            name = tape.params.get(node.output)
            if name is not None:
                out[name] = out[name] + g if name in out else g
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp is None or gi is None:
                continue
            prev = adj.get(inp)
            adj[inp] = gi if prev is None else prev + gi
    if store is not None:
        for name, g in out.items():
            store.grads[name] += g
    return out


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked_entries: dict[str, int]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def lines(self) -> list[str]:
        rows = []
        for name, err in self.max_rel_error.items():
            flag = "ok" if err <= self.tol else "FAIL"
            rows.append(f"{name:<24s} entries={self.checked_entries[name]:<5d} max_rel_err={err:.3e}  {flag}")
        return rows


def grad_check(
    forward: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    floor: Optional[float] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``forward`` maps a name -> Tensor mapping to a scalar loss. The relative
    error of an entry is ``|a - n| / max(|a|, |n|, floor)``. ``floor`` keeps
    entries whose true gradient is (near) zero from being judged on rounding
    noise; by default it is ``1e5`` times the rounding error of a central
    difference, ``eps * max(1, |loss|) / h``. When ``max_entries`` is set,
    larger parameters are checked on a seeded random subsample of entries.
    Never raises on mismatch.
    """
    tape = Tape()
    loss = forward(params.bind(tape))
    analytic = backward(loss)
    if floor is None:
        floor = 1e5 * np.finfo(np.float64).eps * max(1.0, abs(loss.item())) / h
    rng = np.random.default_rng(seed)
    errors, counts = {}, {}
    for name, value in params.values.items():
        grad = analytic.get(name, np.zeros_like(value))
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        worst = 0.0
        original = value.copy()
        for k in flat_idx:
            idx = np.unravel_index(k, value.shape)
            value[idx] = original[idx] + h
            f_plus = forward(params.constants()).item()
            value[idx] = original[idx] - h
            f_minus = forward(params.constants()).item()
            value[idx] = original[idx]
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = grad[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        errors[name] = worst
        counts[name] = len(flat_idx)
    return GradCheckReport(errors, counts, tol)
