"""Fixed-step ODE integration with exact reverse-mode gradients.

Dynamics are any object with

* ``f(y, t, params) -> dy/dt`` (same shape as ``y``), and
* ``f.vjp(y, t, params, cotangent) -> (grad_y, grad_params)``.

``params`` may be a single array or a dict of arrays; gradients come back in
the same structure.  All stepping is done in float64.

Two gradient routes are provided.  :func:`adjoint_gradients` runs the adjoint
recursion backwards through time and keeps only the states at observation
times, re-integrating forward inside each segment to recover the state a
backward step needs, so its memory does not grow with the number of solver
steps.  :func:`direct_gradients` records every stage of the forward solve and
back-propagates through the tape; it exists as a cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np


class IntegrationError(FloatingPointError):
    """The solver produced a non-finite state."""


class DynamicsFn(Protocol):
    def __call__(self, y: np.ndarray, t: float, params: Any) -> np.ndarray: ...

    def vjp(self, y: np.ndarray, t: float, params: Any, cotangent: np.ndarray) -> tuple[np.ndarray, Any]: ...


@dataclass(frozen=True)
class SolverConfig:
    method: str = "rk4"
    steps_per_unit_time: int = 8
    # accepted for completeness; fixed-step methods ignore them
    rtol: float = 1e-3
    atol: float = 1e-5

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown solver method {self.method!r}; expected 'euler' or 'rk4'")
        if int(self.steps_per_unit_time) != self.steps_per_unit_time or self.steps_per_unit_time < 1:
            raise ValueError(f"steps_per_unit_time must be a positive integer, got {self.steps_per_unit_time}")


# ---------------------------------------------------------------------------
# parameter-structure helpers


def tree_zeros_like(params):
    if isinstance(params, dict):
        return {k: np.zeros(np.shape(v)) for k, v in params.items()}
    return np.zeros(np.shape(params))


def tree_add(a, b):
    """Add ``b`` into ``a`` (a fresh accumulator) and return it."""
    if isinstance(a, dict):
        for k, v in b.items():
            a[k] = a[k] + v
        return a
    return a + b


# ---------------------------------------------------------------------------
# forward stepping


def step_times(t0: float, t1: float, steps_per_unit_time: int) -> list[tuple[float, float]]:
    """(start, size) of each step from ``t0`` to ``t1``; the last step lands on ``t1``."""
    if t1 < t0:
        raise ValueError(f"cannot integrate backwards from t={t0} to t={t1}")
    span = (t1 - t0) * steps_per_unit_time
    # absorb round-off like (0.3 - 0.1) * 8 = 1.6000000000000003
    n = max(0, math.ceil(span - 1e-9))
    h = 1.0 / steps_per_unit_time
    steps = []
    for i in range(n):
        start = t0 + i * h
        size = h if i < n - 1 else t1 - start
        steps.append((start, size))
    return steps


def _rk4_stages(f, y, t, h, params):
    k1 = f(y, t, params)
    y2 = y + 0.5 * h * k1
    k2 = f(y2, t + 0.5 * h, params)
    y3 = y + 0.5 * h * k2
    k3 = f(y3, t + 0.5 * h, params)
    y4 = y + h * k3
    k4 = f(y4, t + h, params)
    y_next = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y_next, (y2, y3, y4)


def _step(f, y, t, h, params, method):
    if method == "euler":
        return y + h * f(y, t, params)
    return _rk4_stages(f, y, t, h, params)[0]


def _step_vjp(f, y, t, h, params, method, adj, stages=None):
    """Pull the cotangent ``adj`` on y(t+h) back through one step.

    ``stages`` holds the RK4 stage inputs if they were recorded; otherwise they
    are recomputed from ``y``.
    """
    if method == "euler":
        gy, gp = f.vjp(y, t, params, h * adj)
        return adj + gy, gp
    if stages is None:
        _, stages = _rk4_stages(f, y, t, h, params)
    y2, y3, y4 = stages
    g_y = adj.copy()
    g_k = [h / 6.0 * adj, h / 3.0 * adj, h / 3.0 * adj, h / 6.0 * adj]

    gy4, gp = f.vjp(y4, t + h, params, g_k[3])
    g_y += gy4
    g_k[2] = g_k[2] + h * gy4

    gy3, gp3 = f.vjp(y3, t + 0.5 * h, params, g_k[2])
    gp = tree_add(gp, gp3)
    g_y += gy3
    g_k[1] = g_k[1] + 0.5 * h * gy3

    gy2, gp2 = f.vjp(y2, t + 0.5 * h, params, g_k[1])
    gp = tree_add(gp, gp2)
    g_y += gy2
    g_k[0] = g_k[0] + 0.5 * h * gy2

    gy1, gp1 = f.vjp(y, t, params, g_k[0])
    gp = tree_add(gp, gp1)
    g_y += gy1
    return g_y, gp


def integrate(f: DynamicsFn, params, y0, t0: float, t1: float, cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """State at ``t1`` starting from ``y0`` at ``t0``."""
    y = np.array(y0, dtype=np.float64)
    if not np.isfinite(y).all():
        raise IntegrationError("initial state is not finite")
    for i, (t, h) in enumerate(step_times(t0, t1, cfg.steps_per_unit_time)):
        y = _step(f, y, t, h, params, cfg.method)
        if not np.isfinite(y).all():
            raise IntegrationError(f"non-finite state after solver step {i} (t={t + h:.6g})")
    return y


def _check_times(times) -> list[float]:
    times = [float(t) for t in times]
    if not times or times[0] != 0.0:
        raise ValueError("observation times must start at 0")
    for a, b in zip(times, times[1:]):
        if not b > a:
            raise ValueError(f"observation times must be strictly ascending, got {a} then {b}")
    return times


def integrate_trajectory(f: DynamicsFn, params, y0, times, cfg: SolverConfig = SolverConfig()) -> list[np.ndarray]:
    """States at each of ``times`` along one continued trajectory."""
    times = _check_times(times)
    states = [np.array(y0, dtype=np.float64)]
    for t0, t1 in zip(times, times[1:]):
        states.append(integrate(f, params, states[-1], t0, t1, cfg))
    return states


# ---------------------------------------------------------------------------
# gradients


def _check_cotangents(times, loss_cotangents, y0):
    if len(loss_cotangents) != len(times):
        raise ValueError(f"got {len(loss_cotangents)} cotangents for {len(times)} observation times")
    shape = np.shape(y0)
    for k, c in enumerate(loss_cotangents):
        if np.shape(c) != shape:
            raise ValueError(f"cotangent {k} has shape {np.shape(c)}, state has shape {shape}")


def adjoint_gradients(
    f: DynamicsFn,
    params,
    y0,
    times,
    loss_cotangents,
    cfg: SolverConfig = SolverConfig(),
    states: list[np.ndarray] | None = None,
):
    """Gradient of ``sum_k <loss_cotangents[k], y(times[k])>``.

    Returns ``(grad_params, grad_y0)``.  ``states`` may pass in the forward
    trajectory at ``times`` to skip the initial forward solve.
    """
    times = _check_times(times)
    _check_cotangents(times, loss_cotangents, y0)
    if states is None:
        states = integrate_trajectory(f, params, y0, times, cfg)

    grad_params = tree_zeros_like(params)
    adj = np.array(loss_cotangents[-1], dtype=np.float64)
    for k in range(len(times) - 1, 0, -1):
        seg_start = states[k - 1]
        steps = step_times(times[k - 1], times[k], cfg.steps_per_unit_time)
        for j in range(len(steps) - 1, -1, -1):
            # recover the state at the start of step j from the segment checkpoint
            y = seg_start
            for t, h in steps[:j]:
                y = _step(f, y, t, h, params, cfg.method)
            t, h = steps[j]
            adj, gp = _step_vjp(f, y, t, h, params, cfg.method, adj)
            grad_params = tree_add(grad_params, gp)
        adj = adj + loss_cotangents[k - 1]
    return grad_params, adj


def direct_gradients(f: DynamicsFn, params, y0, times, loss_cotangents, cfg: SolverConfig = SolverConfig()):
    """Same result as :func:`adjoint_gradients`, by taping every solver stage."""
    times = _check_times(times)
    _check_cotangents(times, loss_cotangents, y0)

    tape = []  # (segment index, y, t, h, stages)
    y = np.array(y0, dtype=np.float64)
    for k in range(1, len(times)):
        for t, h in step_times(times[k - 1], times[k], cfg.steps_per_unit_time):
            if cfg.method == "rk4":
                y_next, stages = _rk4_stages(f, y, t, h, params)
            else:
                y_next, stages = _step(f, y, t, h, params, "euler"), None
            tape.append((k, y, t, h, stages))
            y = y_next

    grad_params = tree_zeros_like(params)
    adj = np.array(loss_cotangents[-1], dtype=np.float64)
    segment = len(times) - 1
    for k, y, t, h, stages in reversed(tape):
        while k < segment:
            adj = adj + loss_cotangents[segment - 1]
            segment -= 1
        adj, gp = _step_vjp(f, y, t, h, params, cfg.method, adj, stages)
        grad_params = tree_add(grad_params, gp)
    while segment > 0:
        adj = adj + loss_cotangents[segment - 1]
        segment -= 1
    return grad_params, adj
