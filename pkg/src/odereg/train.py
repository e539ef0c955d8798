"""Adam fitting of the velocity model and prediction along the fitted flow."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .grid import fold_percentage, warp_image
from .model import Arch, VelocityDynamics, VelocityModel, init_params, initial_state, state_to_displacement
from .objective import LossBreakdown, LossWeights, loss_and_cotangents
from .odeint import SolverConfig, adjoint_gradients, integrate_trajectory

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, detail: str = "non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class FitConfig:
    mode: str = "direct"
    solver: SolverConfig = field(default_factory=SolverConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 300
    smoothing_window: int = 15
    latent_factor: int = 4
    channels: tuple[int, ...] = (8, 16)
    hidden: int = 128
    time_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("direct", "latent"):
            raise ValueError(f"mode must be 'direct' or 'latent', got {self.mode!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or not self.epsilon > 0:
            raise ValueError("Adam needs beta1, beta2 in [0, 1) and epsilon > 0")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be a positive integer, got {self.epochs}")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError(f"smoothing_window must be odd and positive, got {self.smoothing_window}")
        if self.latent_factor < 1:
            raise ValueError(f"latent_factor must be positive, got {self.latent_factor}")

    def effective_window(self, dims) -> int:
        """The smoothing window clamped to the largest odd size that fits the grid."""
        limit = min(dims)
        if limit % 2 == 0:
            limit -= 1
        return max(1, min(self.smoothing_window, limit))

    def arch(self, dims) -> Arch:
        return Arch(
            mode=self.mode,
            dims=tuple(dims),
            channels=self.channels,
            hidden=self.hidden,
            time_hidden=self.time_hidden,
            latent_factor=self.latent_factor,
            smoothing_window=self.effective_window(dims),
        )


@dataclass
class FitReport:
    loss_history: list[LossBreakdown]
    final_model: VelocityModel
    wall_time: float
    # (epoch, fold fraction at the last observed time), every 10 epochs
    fold_history: list[tuple[int, float]] = field(default_factory=list)


def adam_step(params, grads, moments, step_index: int, cfg: FitConfig):
    """One bias-corrected Adam update; returns new ``(params, (m, v))``."""
    if step_index < 1:
        raise ValueError(f"step_index starts at 1, got {step_index}")
    m, v = moments
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - cfg.beta1**step_index
    c2 = 1.0 - cfg.beta2**step_index
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        new_m[name] = cfg.beta1 * m[name] + (1.0 - cfg.beta1) * g
        new_v[name] = cfg.beta2 * v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = new_m[name] / c1
        v_hat = new_v[name] / c2
        new_params[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return new_params, (new_m, new_v)


def zero_moments(params):
    return ({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def fit(dataset, cfg: FitConfig = FitConfig(), callback=None) -> FitReport:
    """Fit a velocity model to ``dataset`` (full batch, one Adam step per epoch).

    ``callback(epoch, breakdown)`` is called after each epoch's loss is known.
    """
    arch = cfg.arch(dataset.dims)
    model = init_params(arch, cfg.seed, cfg.solver)
    dynamics = VelocityDynamics(arch)
    y0 = initial_state(arch)
    times = dataset.times
    moments = zero_moments(model.params)
    history, folds = [], []

    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        try:
            states = integrate_trajectory(dynamics, model.params, y0, times, cfg.solver)
        except FloatingPointError as exc:
            raise DivergenceError(epoch, str(exc)) from exc
        breakdown, cotangents, decoder_grads = loss_and_cotangents(model, dataset, cfg.weights, states)
        if not np.isfinite(breakdown.total):
            raise DivergenceError(epoch)
        history.append(breakdown)
        if epoch % 10 == 0:
            folds.append((epoch, fold_percentage(state_to_displacement(model, states[-1]))))
        if callback is not None:
            callback(epoch, breakdown)
        log.debug("epoch %d loss %.6g", epoch, breakdown.total)

        grads, _ = adjoint_gradients(dynamics, model.params, y0, times, cotangents, cfg.solver, states=states)
        for name, g in decoder_grads.items():
            grads[name] = grads[name] + g
        try:
            params, moments = adam_step(model.params, grads, moments, epoch + 1, cfg)
        except FloatingPointError as exc:
            raise DivergenceError(epoch, str(exc)) from exc
        model = model.with_params(params)

    return FitReport(history, model, time.perf_counter() - start, folds)


def predict(model: VelocityModel, baseline: np.ndarray, times) -> list[tuple[np.ndarray, np.ndarray]]:
    """Warped baseline and full-resolution displacement at each requested time.

    One trajectory is integrated through all ``times`` (ascending, in [0, 1]).
    """
    times = [float(t) for t in times]
    if not times:
        return []
    for t in times:
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"prediction time {t} outside [0, 1]")
    if any(not b > a for a, b in zip(times, times[1:])):
        raise ValueError("prediction times must be strictly ascending")
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape != model.arch.dims:
        raise ValueError(f"baseline dims {baseline.shape} do not match model dims {model.arch.dims}")

    grid_times = times if times[0] == 0.0 else [0.0] + times
    states = integrate_trajectory(
        VelocityDynamics(model.arch), model.params, initial_state(model.arch), grid_times, model.solver
    )
    states = states[len(grid_times) - len(times):]
    out = []
    for state in states:
        disp = state_to_displacement(model, state)
        out.append((warp_image(baseline, disp), disp))
    return out
