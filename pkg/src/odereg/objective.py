"""Regression loss, its gradient with respect to ODE states, and image metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

from . import grid
from .model import VelocityDynamics, VelocityModel, decode_vjp, initial_state, state_to_displacement
from .odeint import integrate_trajectory


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.05  # smoothness
    lambda2: float = 1e-4  # boundary

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


@dataclass
class LossBreakdown:
    """Loss summed over observation times.

    ``smoothness`` and ``boundary`` are the unweighted regularizer sums, so
    ``total == similarity + lambda1 * smoothness + lambda2 * boundary``.
    """

    total: float
    similarity: float
    smoothness: float
    boundary: float
    per_time: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# similarity


def _centered(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ac = a - a.mean()
    bc = b - b.mean()
    saa = float(np.sum(ac * ac))
    sbb = float(np.sum(bc * bc))
    if saa == 0.0 or sbb == 0.0:
        which = "both inputs are" if saa == sbb == 0.0 else ("first input is" if saa == 0.0 else "second input is")
        raise ValueError(f"NCC undefined: {which} constant (zero variance)")
    return ac, bc, saa, sbb


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Global normalized cross-correlation (Pearson correlation of intensities)."""
    ac, bc, saa, sbb = _centered(a, b)
    return float(np.sum(ac * bc) / np.sqrt(saa * sbb))


def ncc_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d ncc(a, b) / d a."""
    ac, bc, saa, sbb = _centered(a, b)
    r = np.sum(ac * bc) / np.sqrt(saa * sbb)
    return bc / np.sqrt(saa * sbb) - r * ac / saa


def similarity_loss(warped: np.ndarray, target: np.ndarray) -> float:
    return 1.0 - ncc(warped, target)


# ---------------------------------------------------------------------------
# regularizers


def smoothness_loss(displacement: np.ndarray) -> float:
    """Mean over voxels of the squared Frobenius norm of the displacement gradient."""
    d = grid.check_vector_field(displacement)
    grads = grid.spatial_gradient(displacement, d)
    n_vox = int(np.prod(displacement.shape[1:]))
    return float(np.sum(grads * grads) / n_vox)


def smoothness_loss_grad(displacement: np.ndarray) -> np.ndarray:
    d = grid.check_vector_field(displacement)
    grads = grid.spatial_gradient(displacement, d)
    n_vox = int(np.prod(displacement.shape[1:]))
    return grid.spatial_gradient_vjp(2.0 * grads / n_vox, d)


def boundary_weights(dims) -> np.ndarray:
    """Number of boundary planes each voxel belongs to."""
    w = np.zeros(dims)
    for a, n in enumerate(dims):
        for i in {0, n - 1}:
            sl = [slice(None)] * len(dims)
            sl[a] = i
            w[tuple(sl)] += 1.0
    return w


def boundary_loss(displacement: np.ndarray) -> float:
    """Squared displacement summed over the 2d boundary planes, per boundary-plane voxel."""
    grid.check_vector_field(displacement)
    w = boundary_weights(displacement.shape[1:])
    return float(np.sum(w * np.sum(np.asarray(displacement, dtype=np.float64) ** 2, axis=0)) / w.sum())


def boundary_loss_grad(displacement: np.ndarray) -> np.ndarray:
    grid.check_vector_field(displacement)
    w = boundary_weights(displacement.shape[1:])
    return 2.0 * w * np.asarray(displacement, dtype=np.float64) / w.sum()


# ---------------------------------------------------------------------------
# regression objective


def _check_dataset(dataset) -> None:
    if len(dataset.images) < 2:
        raise ValueError(f"regression needs at least 2 observations, got {len(dataset.images)}")
    times = list(dataset.times)
    if times[0] != 0.0:
        raise ValueError("first observation must be the baseline at t=0")
    if any(not b > a for a, b in zip(times, times[1:])):
        raise ValueError("observation times must be strictly ascending")


def trajectory(model: VelocityModel, dataset) -> list[np.ndarray]:
    _check_dataset(dataset)
    return integrate_trajectory(
        VelocityDynamics(model.arch), model.params, initial_state(model.arch), dataset.times, model.solver
    )


def _evaluate(model, dataset, weights, states, with_grad):
    _check_dataset(dataset)
    if states is None:
        states = trajectory(model, dataset)
    base = np.asarray(dataset.images[0], dtype=np.float64)
    per_time, sim, smt, bdr = [], 0.0, 0.0, 0.0
    cotangents = [np.zeros_like(states[0])]
    decoder_grad = {}
    for k in range(1, len(dataset.images)):
        target = np.asarray(dataset.images[k], dtype=np.float64)
        disp = state_to_displacement(model, states[k])
        warped = grid.warp_image(base, disp)
        s_k = similarity_loss(warped, target)
        per_time.append(s_k)
        sim += s_k
        smt += smoothness_loss(disp)
        bdr += boundary_loss(disp)
        if not with_grad:
            continue
        g_disp = grid.warp_image_vjp(base, disp, -ncc_grad(warped, target))
        if weights.lambda1:
            g_disp += weights.lambda1 * smoothness_loss_grad(disp)
        if weights.lambda2:
            g_disp += weights.lambda2 * boundary_loss_grad(disp)
        if model.arch.mode == "latent":
            g_state, g_dec = decode_vjp(model, states[k], g_disp)
            for name, g in g_dec.items():
                decoder_grad[name] = decoder_grad.get(name, 0.0) + g
        else:
            g_state = g_disp
        cotangents.append(g_state)
    total = sim + weights.lambda1 * smt + weights.lambda2 * bdr
    breakdown = LossBreakdown(total=total, similarity=sim, smoothness=smt, boundary=bdr, per_time=per_time)
    return breakdown, cotangents, decoder_grad


def regression_loss(model: VelocityModel, dataset, weights: LossWeights = LossWeights(), states=None) -> LossBreakdown:
    """Similarity plus weighted regularizers, summed over every non-baseline observation."""
    return _evaluate(model, dataset, weights, states, with_grad=False)[0]


def loss_and_cotangents(model: VelocityModel, dataset, weights: LossWeights = LossWeights(), states=None):
    """``(breakdown, cotangents, decoder_grads)`` in one pass.

    ``cotangents[k]`` is d loss / d state(t_k) (zero for the baseline);
    ``decoder_grads`` holds the direct gradient w.r.t. decoder parameters,
    empty in direct mode.
    """
    return _evaluate(model, dataset, weights, states, with_grad=True)


def loss_cotangents(model: VelocityModel, dataset, weights: LossWeights = LossWeights(), states=None):
    _, cotangents, decoder_grads = loss_and_cotangents(model, dataset, weights, states)
    return cotangents, decoder_grads


# ---------------------------------------------------------------------------
# metrics


def nrmse(pred: np.ndarray, ref: np.ndarray) -> float:
    """RMSE normalized by the intensity range of ``ref``."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    span = float(ref.max() - ref.min())
    if span == 0.0:
        raise ValueError("NRMSE undefined for a constant reference image")
    return float(np.sqrt(np.mean((pred - ref) ** 2)) / span)


def psnr(pred: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


SSIM_WINDOW = 7


def ssim(pred: np.ndarray, ref: np.ndarray, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean local SSIM over fully-covered windows of a uniform ``window**d`` box.

    Local statistics use population (1/N) moments.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if min(pred.shape) < window:
        raise ValueError(f"every axis must be at least {window} long for SSIM, got {pred.shape}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    half = window // 2
    valid = tuple(slice(half, n - half) for n in pred.shape)

    def local_mean(x):
        return uniform_filter(x, size=window, mode="constant")[valid]

    mx, my = local_mean(pred), local_mean(ref)
    vx = local_mean(pred * pred) - mx * mx
    vy = local_mean(ref * ref) - my * my
    cxy = local_mean(pred * ref) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())
