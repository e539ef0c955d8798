"""Regular-lattice field kernels.

Scalar grids are plain arrays of shape ``dims``.  Vector grids are
channel-first arrays of shape ``(d, *dims)`` where ``d == len(dims)``; all
coordinates and displacements are in voxel units.

Every linear operator here (finite differences, box smoothing) is applied
separably as one small matrix per axis, so its adjoint is simply the
transposed matrix.  The gradient code in :mod:`odereg.objective` and
:mod:`odereg.model` relies on that.
"""

from __future__ import annotations

import itertools

import numpy as np


def check_vector_field(field: np.ndarray) -> int:
    """Validate a channel-first vector field and return its spatial rank."""
    field = np.asarray(field)
    ndim = field.ndim - 1
    if ndim not in (2, 3) or field.shape[0] != ndim:
        raise ValueError(
            f"expected a vector field of shape (d, *dims) with d in (2, 3), got {field.shape}"
        )
    return ndim


def identity_lattice(dims) -> np.ndarray:
    """Voxel positions of a lattice as a channel-first coordinate array."""
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))


def apply_along_axis(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    """Contract ``mat`` (m x n) with axis ``axis`` (length n) of ``arr``."""
    out = np.tensordot(mat, arr, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# interpolation and warping


def _corner_weights(field_shape, coords):
    """Per-axis lower indices, fractions and in-range masks for multilinear lookup."""
    lower, frac, inside = [], [], []
    for n, c in zip(field_shape, coords):
        inside.append((c >= 0) & (c <= n - 1))
        c = np.clip(c, 0, n - 1)
        if n == 1:
            i0 = np.zeros(c.shape, dtype=np.intp)
            f = np.zeros_like(c)
        else:
            i0 = np.minimum(np.floor(c).astype(np.intp), n - 2)
            f = c - i0
        lower.append(i0)
        frac.append(f)
    return lower, frac, inside


def _check_coords(coords: np.ndarray) -> None:
    finite = np.isfinite(coords).all(axis=0)
    if not finite.all():
        bad = np.unravel_index(int(np.argmin(finite.ravel())), finite.shape)
        raise ValueError(f"non-finite sampling coordinate at voxel {tuple(int(i) for i in bad)}")


def sample_linear(field: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``field`` at ``coords``.

    ``coords`` has shape ``(d, *query)``; the last ``d`` axes of ``field`` are
    spatial and any leading axes are channels.  Coordinates outside the lattice
    are clamped to the boundary first.  Returns ``(*channels, *query)``.
    """
    field = np.asarray(field)
    coords = np.asarray(coords, dtype=np.float64)
    d = coords.shape[0]
    if field.size == 0:
        raise ValueError("cannot sample an empty field")
    if field.ndim < d:
        raise ValueError(f"field of rank {field.ndim} has fewer than {d} spatial axes")
    _check_coords(coords)
    spatial = field.shape[field.ndim - d:]
    lead = field.shape[: field.ndim - d]
    lower, frac, _ = _corner_weights(spatial, coords)

    flat = field.reshape(lead + (-1,))
    strides = np.cumprod((1,) + spatial[::-1][:-1])[::-1]
    out = np.zeros(lead + coords.shape[1:], dtype=np.result_type(field.dtype, np.float64))
    for corner in itertools.product((0, 1), repeat=d):
        w = np.ones(coords.shape[1:])
        idx = np.zeros(coords.shape[1:], dtype=np.intp)
        for a, bit in enumerate(corner):
            w = w * (frac[a] if bit else 1.0 - frac[a])
            idx = idx + np.minimum(lower[a] + bit, spatial[a] - 1) * strides[a]
        out += flat[..., idx] * w
    return out


def sample_linear_grad(field: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Derivative of :func:`sample_linear` with respect to each coordinate.

    Returns shape ``(d, *channels, *query)``.  Along an axis where the query is
    clamped the derivative is zero.
    """
    field = np.asarray(field)
    coords = np.asarray(coords, dtype=np.float64)
    d = coords.shape[0]
    spatial = field.shape[field.ndim - d:]
    lead = field.shape[: field.ndim - d]
    lower, frac, inside = _corner_weights(spatial, coords)

    flat = field.reshape(lead + (-1,))
    strides = np.cumprod((1,) + spatial[::-1][:-1])[::-1]
    grads = np.zeros((d,) + lead + coords.shape[1:])
    for corner in itertools.product((0, 1), repeat=d):
        idx = np.zeros(coords.shape[1:], dtype=np.intp)
        for a, bit in enumerate(corner):
            idx = idx + np.minimum(lower[a] + bit, spatial[a] - 1) * strides[a]
        vals = flat[..., idx]
        for a in range(d):
            w = np.ones(coords.shape[1:]) if corner[a] else -np.ones(coords.shape[1:])
            for b, bit in enumerate(corner):
                if b != a:
                    w = w * (frac[b] if bit else 1.0 - frac[b])
            grads[a] += vals * w
    for a in range(d):
        if spatial[a] == 1:
            grads[a] = 0.0
        else:
            grads[a] *= inside[a]
    return grads


def warp_image(image: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    """Backward warp: output voxel ``x`` reads ``image`` at ``x + displacement(x)``."""
    image = np.asarray(image)
    displacement = np.asarray(displacement)
    if displacement.shape != (image.ndim,) + image.shape:
        raise ValueError(
            f"displacement shape {displacement.shape} does not match image dims {image.shape}"
        )
    return sample_linear(image, identity_lattice(image.shape) + displacement)


def warp_image_vjp(image: np.ndarray, displacement: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Gradient of ``<cotangent, warp_image(image, displacement)>`` w.r.t. the displacement."""
    coords = identity_lattice(image.shape) + displacement
    return sample_linear_grad(image, coords) * cotangent


# ---------------------------------------------------------------------------
# finite differences


def difference_matrix(n: int) -> np.ndarray:
    """Central differences inside, one-sided at both ends, unit spacing."""
    if n < 2:
        raise ValueError(f"finite differences need an axis of length >= 2, got {n}")
    mat = np.zeros((n, n))
    mat[0, :2] = (-1.0, 1.0)
    mat[-1, -2:] = (-1.0, 1.0)
    for i in range(1, n - 1):
        mat[i, i - 1] = -0.5
        mat[i, i + 1] = 0.5
    return mat


def spatial_gradient(field: np.ndarray, ndim: int | None = None) -> np.ndarray:
    """Per-axis derivatives of a field whose last ``ndim`` axes are spatial.

    ``ndim`` defaults to ``field.ndim`` (a scalar grid).  For a vector field
    pass ``ndim=d``.  Returns shape ``(ndim, *field.shape)``.
    """
    field = np.asarray(field, dtype=np.float64)
    ndim = field.ndim if ndim is None else ndim
    lead = field.ndim - ndim
    for a in range(ndim):
        if field.shape[lead + a] < 2:
            raise ValueError(f"spatial axis {a} has length {field.shape[lead + a]}; need >= 2")
    return np.stack(
        [apply_along_axis(field, difference_matrix(field.shape[lead + a]), lead + a) for a in range(ndim)]
    )


def spatial_gradient_vjp(cotangent: np.ndarray, ndim: int) -> np.ndarray:
    """Adjoint of :func:`spatial_gradient`; ``cotangent`` has its output shape."""
    shape = cotangent.shape[1:]
    lead = len(shape) - ndim
    out = np.zeros(shape)
    for a in range(ndim):
        out += apply_along_axis(cotangent[a], difference_matrix(shape[lead + a]).T, lead + a)
    return out


def jacobian_determinants(displacement: np.ndarray) -> np.ndarray:
    """Determinant of the Jacobian of ``x -> x + u(x)`` at every voxel."""
    d = check_vector_field(displacement)
    grads = spatial_gradient(displacement, d)  # grads[axis, channel]
    jac = np.moveaxis(grads, (1, 0), (-2, -1)) + np.eye(d)
    return np.linalg.det(jac)


def fold_percentage(displacement: np.ndarray) -> float:
    """Fraction of voxels whose Jacobian determinant is negative."""
    det = jacobian_determinants(displacement)
    return float(np.count_nonzero(det < 0)) / det.size


# ---------------------------------------------------------------------------
# smoothing


def box_matrix(n: int, window: int) -> np.ndarray:
    """1-D moving-average matrix, stride 1, symmetric reflect padding."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be odd and positive, got {window}")
    half = window // 2
    if half > n:
        raise ValueError(f"window {window} too large for an axis of length {n}")
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i - half, i + half + 1):
            # half-sample symmetric reflection: ... b a | a b c ... c | c b ...
            if j < 0:
                j = -j - 1
            elif j >= n:
                j = 2 * n - j - 1
            mat[i, j] += 1.0 / window
    return mat


def box_smooth(field: np.ndarray, window: int) -> np.ndarray:
    """Per-channel moving average over a ``window**d`` neighbourhood."""
    d = check_vector_field(field)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be odd and positive, got {window}")
    out = np.asarray(field, dtype=np.float64)
    if window == 1:
        return out.copy()
    for a in range(d):
        out = apply_along_axis(out, box_matrix(out.shape[1 + a], window), 1 + a)
    return out


def box_smooth_vjp(cotangent: np.ndarray, window: int) -> np.ndarray:
    d = check_vector_field(cotangent)
    out = np.asarray(cotangent, dtype=np.float64)
    if window == 1:
        return out.copy()
    for a in range(d):
        out = apply_along_axis(out, box_matrix(out.shape[1 + a], window).T, 1 + a)
    return out
