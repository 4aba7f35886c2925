"""Differentiable primitives.

Each primitive computes its forward value with numpy, checks that it is finite, and records a
backward rule on the tape of its inputs. Arguments may be `Node`s or plain arrays; plain arrays
are added to the tape as constants. At least one argument of every primitive must be a `Node`.

Every softmax, cross-entropy and KL primitive works in log-space with the row maximum
subtracted, so large logits never overflow.
"""
from __future__ import annotations

from typing import Union

import numpy as np
from numpy.typing import ArrayLike

from gkdistill.errors import InvalidHyperparameterError, NumericOverflowError, ShapeMismatchError

from .matrix import Matrix
from .tape import Node, Tape

Operand = Union[Node, Matrix, ArrayLike]


def _tape_of(*operands: Operand) -> Tape:
    tapes = [x.tape for x in operands if isinstance(x, Node)]
    if not tapes:
        raise TypeError("at least one operand must be a Node recorded on a tape")
    tape = tapes[0]
    if any(other is not tape for other in tapes[1:]):
        raise ValueError("operands were recorded on different tapes")
    return tape


def _lift(x: Operand, tape: Tape) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, Matrix):
        return tape.constant(x.values)
    return tape.constant(x)


def _check_finite(primitive: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericOverflowError(primitive)
    return value


def _check_temperature(tau: float) -> float:
    if not tau > 0:
        raise InvalidHyperparameterError("temperature", tau, "must be > 0")
    return float(tau)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sums `grad` over the axes along which an operand of `shape` was broadcast."""
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(primitive: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(primitive, a.shape, b.shape) from None


def _mask_of(mask: ArrayLike | None, shape: tuple[int, ...], primitive: str) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeMismatchError(primitive, mask.shape, shape)
    if not mask.any(axis=1).all():
        raise ShapeMismatchError(f"{primitive} (every row needs an unmasked entry)", mask.shape)
    return mask


def _log_softmax(z: np.ndarray, tau: float, mask: np.ndarray | None) -> np.ndarray:
    """Row-wise log-softmax of z / tau. Masked-out entries are set to 0 (they carry no mass)."""
    scaled = z / tau
    if mask is not None:
        scaled = np.where(mask, scaled, -np.inf)
    row_max = scaled.max(axis=1, keepdims=True)
    shifted = scaled - row_max
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    result = shifted - log_norm
    if mask is not None:
        result = np.where(mask, result, 0.0)
    return result


def _softmax(z: np.ndarray, tau: float, mask: np.ndarray | None) -> np.ndarray:
    probs = np.exp(_log_softmax(z, tau, mask))
    if mask is not None:
        probs = np.where(mask, probs, 0.0)
    return probs


# ---- arithmetic -----------------------------------------------------------------------------


def add(a: Operand, b: Operand) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape("add", a, b)
    value = _check_finite("add", a.value + b.value)
    return tape.record(
        "add",
        value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Operand, b: Operand) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape("sub", a, b)
    value = _check_finite("sub", a.value - b.value)
    return tape.record(
        "sub",
        value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Operand, b: Operand) -> Node:
    """Elementwise (broadcasting) product."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape("mul", a, b)
    value = _check_finite("mul", a.value * b.value)
    return tape.record(
        "mul",
        value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)
    value = _check_finite("scale", a.value * factor)
    return a.tape.record("scale", value, (a,), lambda g: (g * factor,))


def matmul(a: Operand, b: Operand) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    value = _check_finite("matmul", a.value @ b.value)
    return tape.record(
        "matmul",
        value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def relu(a: Node) -> Node:
    active = a.value > 0
    return a.tape.record("relu", np.where(active, a.value, 0.0), (a,), lambda g: (g * active,))


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        value = _check_finite("exp", np.exp(a.value))
    return a.tape.record("exp", value, (a,), lambda g: (g * value,))


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise NumericOverflowError("log", "logarithm of a non-positive entry")
    value = _check_finite("log", np.log(a.value))
    return a.tape.record("log", value, (a,), lambda g: (g / a.value,))


def sum(a: Node) -> Node:  # noqa: A001
    value = np.array([[a.value.sum()]])
    return a.tape.record("sum", _check_finite("sum", value), (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def mean(a: Node) -> Node:
    count = a.value.size
    value = np.array([[a.value.sum() / count]])
    return a.tape.record(
        "mean",
        _check_finite("mean", value),
        (a,),
        lambda g: (np.full(a.shape, g[0, 0] / count),),
    )


# ---- indexing -------------------------------------------------------------------------------


def take_rows(a: Node, rows: ArrayLike) -> Node:
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g: np.ndarray):
        ga = np.zeros(a.shape)
        np.add.at(ga, rows, g)
        return (ga,)

    return a.tape.record("take_rows", a.value[rows], (a,), backward)


def select_columns(a: Node, columns: ArrayLike) -> Node:
    columns = np.asarray(columns, dtype=np.intp)

    def backward(g: np.ndarray):
        ga = np.zeros(a.shape)
        np.add.at(ga, (slice(None), columns), g)
        return (ga,)

    return a.tape.record("select_columns", a.value[:, columns], (a,), backward)


def gather(a: Node, rows: ArrayLike, columns: ArrayLike) -> Node:
    """Returns the `T x M` matrix whose entry (t, m) is `a[rows[t], columns[t, m]]`."""
    rows = np.asarray(rows, dtype=np.intp).reshape(-1, 1)
    columns = np.asarray(columns, dtype=np.intp)
    if columns.ndim != 2 or columns.shape[0] != rows.shape[0]:
        raise ShapeMismatchError("gather", rows.shape, columns.shape)
    row_index = np.broadcast_to(rows, columns.shape)

    def backward(g: np.ndarray):
        ga = np.zeros(a.shape)
        np.add.at(ga, (row_index, columns), g)
        return (ga,)

    return a.tape.record("gather", a.value[row_index, columns], (a,), backward)


# ---- geometry -------------------------------------------------------------------------------


def row_l2_normalize(a: Node, eps: float = 1e-12) -> Node:
    """Scales every row to unit Euclidean norm. All-zero rows stay zero."""
    norms = np.maximum(np.linalg.norm(a.value, axis=1, keepdims=True), eps)
    value = _check_finite("row_l2_normalize", a.value / norms)

    def backward(g: np.ndarray):
        projection = (g * value).sum(axis=1, keepdims=True)
        return ((g - value * projection) / norms,)

    return a.tape.record("row_l2_normalize", value, (a,), backward)


def pairwise_distances(a: Node, b: Node | None = None) -> Node:
    """Euclidean distances between the rows of `a` and the rows of `b` (`a` itself by default).

    Computed as sqrt(max(|a|^2 + |b|^2 - 2 a.b, 0)). The gradient at a clamped (zero) distance
    is 0. When `b` is omitted, the diagonal is exactly zero.
    """
    same = b is None
    if same:
        b = a
    elif b.tape is not a.tape:
        raise ValueError("operands were recorded on different tapes")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError("pairwise_distances", a.shape, b.shape)
    sq_a = (a.value**2).sum(axis=1, keepdims=True)
    sq_b = (b.value**2).sum(axis=1, keepdims=True).T
    squared = np.maximum(sq_a + sq_b - 2.0 * (a.value @ b.value.T), 0.0)
    if same:
        np.fill_diagonal(squared, 0.0)
    dist = _check_finite("pairwise_distances", np.sqrt(squared))

    def backward(g: np.ndarray):
        positive = dist > 0
        # d dist / d squared = 1 / (2 dist) where dist > 0, 0 otherwise.
        coeff = np.where(positive, g / np.where(positive, 2.0 * dist, 1.0), 0.0)
        ga = 2.0 * (coeff.sum(axis=1, keepdims=True) * a.value - coeff @ b.value)
        gb = 2.0 * (coeff.sum(axis=0, keepdims=True).T * b.value - coeff.T @ a.value)
        if same:
            return (ga + gb,)
        return (ga, gb)

    parents = (a,) if same else (a, b)
    return a.tape.record("pairwise_distances", dist, parents, backward)


# ---- probabilities --------------------------------------------------------------------------


def softmax_rows(z: Node, tau: float = 1.0, mask: ArrayLike | None = None) -> Node:
    """Row-wise softmax of z / tau. Entries where `mask` is False get probability 0."""
    tau = _check_temperature(tau)
    mask = _mask_of(mask, z.shape, "softmax_rows")
    probs = _check_finite("softmax_rows", _softmax(z.value, tau, mask))

    def backward(g: np.ndarray):
        inner = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - inner) / tau,)

    return z.tape.record("softmax_rows", probs, (z,), backward)


def kl_rows(p: Operand, q: Operand) -> Node:
    """Row-wise KL(p || q) between probability rows, as an `N x 1` column.

    Terms with p = 0 contribute 0, and so does their gradient with respect to p.
    """
    tape = _tape_of(p, q)
    p, q = _lift(p, tape), _lift(q, tape)
    if p.shape != q.shape:
        raise ShapeMismatchError("kl_rows", p.shape, q.shape)
    support = p.value > 0
    if np.any(support & (q.value <= 0)):
        raise NumericOverflowError("kl_rows", "q has zero mass where p is positive")
    safe_p = np.where(support, p.value, 1.0)
    safe_q = np.where(support, q.value, 1.0)
    log_ratio = np.where(support, np.log(safe_p) - np.log(safe_q), 0.0)
    value = _check_finite("kl_rows", (p.value * log_ratio).sum(axis=1, keepdims=True))

    def backward(g: np.ndarray):
        gp = np.where(support, log_ratio + 1.0, 0.0) * g
        gq = np.where(support, -p.value / safe_q, 0.0) * g
        return (gp, gq)

    return tape.record("kl_rows", value, (p, q), backward)


def kl_rows_from_logits(
    target: ArrayLike, logits: Node, tau: float = 1.0, mask: ArrayLike | None = None
) -> Node:
    """Row-wise KL(target || softmax(logits / tau)) as an `N x 1` column.

    `target` holds constant probability rows (zero wherever `mask` is False).
    """
    tau = _check_temperature(tau)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeMismatchError("kl_rows_from_logits", target.shape, logits.shape)
    mask = _mask_of(mask, logits.shape, "kl_rows_from_logits")
    log_q = _log_softmax(logits.value, tau, mask)
    support = target > 0
    log_p = np.log(np.where(support, target, 1.0))
    value = np.where(support, target * (log_p - log_q), 0.0).sum(axis=1, keepdims=True)
    value = _check_finite("kl_rows_from_logits", value)
    q = _softmax(logits.value, tau, mask)
    target_mass = target.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray):
        return (g * (q * target_mass - target) / tau,)

    return logits.tape.record("kl_rows_from_logits", value, (logits,), backward)


def cross_entropy_rows(logits: Node, target: ArrayLike) -> Node:
    """Row-wise cross-entropy of softmax(logits) against class indices or one-hot rows.

    Returns an `N x 1` column.
    """
    target = np.asarray(target)
    if target.ndim == 1:
        if target.shape[0] != logits.shape[0]:
            raise ShapeMismatchError("cross_entropy_rows", logits.shape, target.shape)
        one_hot = np.zeros(logits.shape)
        one_hot[np.arange(target.shape[0]), target.astype(np.intp)] = 1.0
    else:
        if target.shape != logits.shape:
            raise ShapeMismatchError("cross_entropy_rows", logits.shape, target.shape)
        one_hot = target.astype(np.float64)
    log_q = _log_softmax(logits.value, 1.0, None)
    value = _check_finite("cross_entropy_rows", -(one_hot * log_q).sum(axis=1, keepdims=True))
    q = np.exp(log_q)
    target_mass = one_hot.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray):
        return (g * (q * target_mass - one_hot),)

    return logits.tape.record("cross_entropy_rows", value, (logits,), backward)
