"""Self-check of the training gradient on a tiny randomized model.

The parameter gradient used by :func:`odereg.train.fit` (loss cotangents fed
through the adjoint recursion, plus the direct decoder gradient) is compared
with central finite differences of the scalar regression loss and with the
taped backprop route.  Errors are reported as ``max|a - b| / max|b|`` over the
checked coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SequenceDataset
from .model import Arch, VelocityDynamics, init_params, initial_state
from .objective import LossWeights, loss_and_cotangents, regression_loss
from .odeint import SolverConfig, adjoint_gradients, direct_gradients

TOLERANCE = 1e-4
FD_STEP = 1e-5


class _CorruptedDynamics(VelocityDynamics):
    """Negative control: parameter gradients scaled by 1.05."""

    def vjp(self, y, t, params, cotangent):
        g_y, g = super().vjp(y, t, params, cotangent)
        return g_y, {k: 1.05 * v for k, v in g.items()}


@dataclass
class GradcheckResult:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> str:
        name = max(self.errors, key=self.errors.get)
        return f"{name} = {self.errors[name]:.3e}"


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = float(np.max(np.abs(b)))
    return float(np.max(np.abs(a - b)) / scale) if scale > 0 else float(np.max(np.abs(a)))


def tiny_problem(mode: str, seed: int, size: int = 8):
    """A randomized model (non-zero output layer) and a random 3-frame sequence."""
    rng = np.random.default_rng(seed)
    arch = Arch(mode, (size, size), channels=(4,), hidden=16, time_hidden=8, latent_factor=2, smoothing_window=3)
    model = init_params(arch, seed, SolverConfig("rk4", 8))
    model = model.with_params({k: v + rng.normal(0.0, 0.3, v.shape) for k, v in model.params.items()})
    images = [rng.uniform(0.0, 1.0, (size, size)) for _ in range(3)]
    return model, SequenceDataset(images, [0.0, 0.4, 1.0]), LossWeights(0.05, 1e-2)


def model_gradients(model, dataset, weights, route="adjoint", dynamics=None):
    """Gradient of the regression loss w.r.t. every model parameter."""
    dynamics = dynamics or VelocityDynamics(model.arch)
    _, cotangents, decoder_grads = loss_and_cotangents(model, dataset, weights)
    solve = adjoint_gradients if route == "adjoint" else direct_gradients
    grads, _ = solve(dynamics, model.params, initial_state(model.arch), dataset.times, cotangents, model.solver)
    for name, g in decoder_grads.items():
        grads[name] = grads[name] + g
    return grads


def finite_difference(model, dataset, weights, coords, step=FD_STEP):
    out = []
    for name, idx in coords:
        vals = []
        for sign in (1.0, -1.0):
            params = {k: v.copy() for k, v in model.params.items()}
            params[name][idx] += sign * step
            vals.append(regression_loss(model.with_params(params), dataset, weights).total)
        out.append((vals[0] - vals[1]) / (2.0 * step))
    return np.array(out)


def run(seed: int = 0, size: int = 8, corrupt_vjp: bool = False, per_array: int = 24) -> GradcheckResult:
    rng = np.random.default_rng(seed + 1)
    result = GradcheckResult()
    for mode in ("direct", "latent"):
        model, dataset, weights = tiny_problem(mode, seed, size)
        dynamics = _CorruptedDynamics(model.arch) if corrupt_vjp else None
        adjoint = model_gradients(model, dataset, weights, "adjoint", dynamics)
        direct = model_gradients(model, dataset, weights, "direct", dynamics)
        names = list(model.params)
        result.errors[f"{mode}: adjoint vs direct"] = _rel_err(
            np.concatenate([adjoint[n].ravel() for n in names]), np.concatenate([direct[n].ravel() for n in names])
        )
        coords = []
        for name in names:
            shape = model.params[name].shape
            n = int(np.prod(shape))
            for flat in rng.choice(n, size=min(n, per_array), replace=False):
                coords.append((name, np.unravel_index(int(flat), shape)))
        fd = finite_difference(model, dataset, weights, coords)
        analytic = np.array([adjoint[name][idx] for name, idx in coords])
        result.errors[f"{mode}: adjoint vs finite differences"] = _rel_err(analytic, fd)
    return result
