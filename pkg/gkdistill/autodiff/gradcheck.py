"""Central finite differences, used as an oracle for the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from logging import getLogger
from typing import Callable, Mapping

import numpy as np
from numpy.typing import ArrayLike

from gkdistill.errors import InvalidHyperparameterError, OracleUnusableError

from .tape import Node, ParamGraph, grad

logger = getLogger(__name__)

LossFn = Callable[[Mapping[str, np.ndarray]], float]
GraphLossFn = Callable[[ParamGraph], Node]


def finite_diff_grad(
    loss_fn: LossFn, params: Mapping[str, ArrayLike], step: float = 1e-5
) -> dict[str, np.ndarray]:
    """Estimates the gradient of `loss_fn` at `params` entry by entry with central differences.

    `loss_fn` receives a dict of (writable copies of) the parameters and must return a float.

    >>> finite_diff_grad(lambda p: float(p["w"][0, 0] ** 2), {"w": [[3.0]]})["w"].round(6)
    array([[6.]])
    """
    if not step > 0:
        raise InvalidHyperparameterError("step", step, "must be > 0")
    point = {name: np.array(value, dtype=np.float64, ndmin=2) for name, value in params.items()}

    base = loss_fn({k: v.copy() for k, v in point.items()})
    again = loss_fn({k: v.copy() for k, v in point.items()})
    if base != again:
        raise OracleUnusableError(
            f"loss function is not deterministic: two evaluations gave {base!r} and {again!r}"
        )

    estimates: dict[str, np.ndarray] = {}
    for name, value in point.items():
        estimate = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            shifted = {k: v.copy() for k, v in point.items()}
            shifted[name][index] = value[index] + step
            upper = loss_fn(shifted)
            shifted[name][index] = value[index] - step
            lower = loss_fn(shifted)
            estimate[index] = (upper - lower) / (2.0 * step)
        estimates[name] = estimate
    return estimates


@dataclass
class GradientCheck:
    """Analytic and numeric gradients of one loss at one point."""

    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]

    @property
    def relative_error(self) -> float:
        """|a - n| / max(|a|, |n|) over all parameters concatenated (0 when both vanish)."""
        names = sorted(self.analytic)
        a = np.concatenate([self.analytic[name].ravel() for name in names])
        n = np.concatenate([self.numeric[name].ravel() for name in names])
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale == 0:
            return 0.0
        return float(np.linalg.norm(a - n) / scale)


def gradient_check(
    build_loss: GraphLossFn, params: Mapping[str, ArrayLike], step: float = 1e-5
) -> GradientCheck:
    """Compares `grad` against `finite_diff_grad` for a loss built on a fresh `ParamGraph`.

    `build_loss` receives a graph on which `forward()` was already called.
    """
    graph = ParamGraph(params)

    def evaluate(values: Mapping[str, np.ndarray]) -> float:
        local = ParamGraph(values)
        local.forward()
        return build_loss(local).item()

    graph.forward()
    analytic = grad(build_loss(graph), graph)
    numeric = finite_diff_grad(evaluate, {k: v.values for k, v in graph.parameters.items()}, step)
    check = GradientCheck(analytic=analytic, numeric=numeric)
    logger.debug(f"Gradient check relative error: {check.relative_error:.3e}")
    return check
