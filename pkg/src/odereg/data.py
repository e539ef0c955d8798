"""Image sequences: synthetic generators, the NDGR grid format and manifests."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import grid
from .errors import DimensionOverflowError, FormatError, TruncatedFileError, UnsupportedDtypeError


@dataclass
class SequenceDataset:
    """Observations sorted by time; ``times`` are rescaled onto [0, 1]."""

    images: list[np.ndarray]
    raw_times: list[float]

    def __post_init__(self):
        if len(self.images) != len(self.raw_times):
            raise ValueError(f"{len(self.images)} images but {len(self.raw_times)} times")
        if len(self.images) < 2:
            raise ValueError(f"a sequence needs at least 2 observations, got {len(self.images)}")
        order = np.argsort(self.raw_times, kind="stable")
        self.raw_times = [float(self.raw_times[i]) for i in order]
        self.images = [np.asarray(self.images[i], dtype=np.float64) for i in order]
        for a, b in zip(self.raw_times, self.raw_times[1:]):
            if a == b:
                raise ValueError(f"duplicate observation time {a}")
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise ValueError(f"images have mixed dims: {sorted(shapes)}")
        if self.images[0].ndim not in (2, 3):
            raise ValueError(f"images must be 2-D or 3-D, got shape {self.images[0].shape}")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.images[0].shape

    @property
    def times(self) -> list[float]:
        t0, t1 = self.raw_times[0], self.raw_times[-1]
        return [(t - t0) / (t1 - t0) for t in self.raw_times]

    def __len__(self) -> int:
        return len(self.images)

    def without(self, *indices: int) -> "SequenceDataset":
        """Copy with the given observations held out; times are renormalized."""
        keep = [i for i in range(len(self)) if i not in set(indices)]
        return SequenceDataset([self.images[i] for i in keep], [self.raw_times[i] for i in keep])


# ---------------------------------------------------------------------------
# synthetic sequences

KINDS = ("translate-disk", "scale-disk", "contract-ring")
EDGE_WIDTH = 1.0


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "translate-disk"
    size: tuple[int, ...] = (64, 64)
    frames: int = 5
    magnitude: float = 8.0
    noise_sigma: float = 0.0
    seed: int = 0


def _profile(r, radius):
    return 0.5 * (1.0 - np.tanh((r - radius) / (2.0 * EDGE_WIDTH)))  # logistic sigmoid


def synth_sequence(spec: SynthSpec):
    """Render a moving shape and its exact backward-warp displacements.

    Frame ``k`` equals frame 0 sampled through the ground-truth displacement
    ``u_k`` (``I_k(x) = I_0(x + u_k(x))``), so warping frame 0 by ``u_k``
    reproduces frame ``k`` up to interpolation error.

    Returns ``(dataset, displacements)`` with one displacement per frame.
    """
    if spec.kind not in KINDS:
        raise ValueError(f"unknown kind {spec.kind!r}; expected one of {KINDS}")
    size = tuple(int(n) for n in spec.size)
    if len(size) not in (2, 3) or min(size) < 8:
        raise ValueError(f"size must have 2 or 3 axes of at least 8 voxels, got {size}")
    if spec.frames < 2:
        raise ValueError(f"need at least 2 frames, got {spec.frames}")
    if spec.noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")

    d = len(size)
    x = grid.identity_lattice(size)
    centre = np.array([(n - 1) / 2.0 for n in size]).reshape((d,) + (1,) * d)
    extent = min(size)
    margin = 3.0 * EDGE_WIDTH
    fractions = [k / (spec.frames - 1) for k in range(spec.frames)]

    images, disps = [], []
    if spec.kind == "translate-disk":
        radius = 0.25 * extent
        start = centre.copy()
        start[0] -= spec.magnitude / 2.0
        for k, frac in enumerate(fractions):
            shift = frac * spec.magnitude
            c = start.ravel().copy()
            c[0] += shift
            lo, hi = c - radius - margin, c + radius + margin
            if (lo < 0).any() or (hi > np.array(size) - 1).any():
                raise ValueError(f"translate-disk with magnitude {spec.magnitude} leaves the {size} grid at frame {k}")
            r = np.sqrt(np.sum((x - c.reshape(centre.shape)) ** 2, axis=0))
            images.append(_profile(r, radius))
            u = np.zeros((d,) + size)
            u[0] = -shift
            disps.append(u)
    else:
        if spec.magnitude <= 0:
            raise ValueError(f"{spec.kind} needs a positive size ratio, got {spec.magnitude}")
        outer = (0.25 if spec.kind == "scale-disk" else 0.35) * extent
        inner = 0.2 * extent
        for k, frac in enumerate(fractions):
            s = 1.0 + (spec.magnitude - 1.0) * frac
            if s * (outer + margin) > (extent - 1) / 2.0:
                raise ValueError(f"{spec.kind} with ratio {spec.magnitude} leaves the {size} grid at frame {k}")
            r = np.sqrt(np.sum((x - centre) ** 2, axis=0)) / s
            img = _profile(r, outer)
            if spec.kind == "contract-ring":
                img = img - _profile(r, inner)
            images.append(img)
            disps.append((x - centre) * (1.0 / s - 1.0))

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        images = [np.clip(img + rng.normal(0.0, spec.noise_sigma, img.shape), 0.0, 1.0) for img in images]
    dataset = SequenceDataset(images, [float(k) for k in range(spec.frames)])
    return dataset, disps


# ---------------------------------------------------------------------------
# NDGR grid files

NDGR_MAGIC = b"NDGR"
NDGR_VERSION = 1
DTYPE_F32 = 0
_MAX_VOXELS = 2**40


def write_grid(field: np.ndarray, path, vector: bool | None = None) -> None:
    """Write a scalar grid ``(*dims)`` or a channel-first vector grid ``(d, *dims)``.

    ``vector`` is inferred from the shape when omitted: a ``(d, *dims)`` array
    with ``d == len(dims)`` in (2, 3) is a vector grid.
    """
    field = np.asarray(field)
    if vector is None:
        vector = field.ndim in (3, 4) and field.shape[0] == field.ndim - 1
    if vector:
        d = grid.check_vector_field(field)
        dims, channels = field.shape[1:], d
        payload = np.moveaxis(field, 0, -1)
    else:
        dims, channels = field.shape, 1
        payload = field
    if len(dims) not in (2, 3):
        raise ValueError(f"grids must have 2 or 3 spatial axes, got shape {field.shape}")
    if not np.isfinite(field).all():
        raise ValueError("grid contains non-finite values")
    header = NDGR_MAGIC + struct.pack("<HB", NDGR_VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<IB", channels, DTYPE_F32)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def read_grid(path) -> np.ndarray:
    """Read an NDGR file; vector grids come back channel-first as float32."""
    raw = Path(path).read_bytes()
    if raw[:4] != NDGR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {NDGR_MAGIC!r}")
    if len(raw) < 7:
        raise TruncatedFileError(path, 7, len(raw))
    version, ndim = struct.unpack_from("<HB", raw, 4)
    if version != NDGR_VERSION:
        raise FormatError(f"{path}: unsupported NDGR version {version}")
    if ndim not in (2, 3):
        raise FormatError(f"{path}: ndim must be 2 or 3, got {ndim}")
    head = 7 + 4 * ndim + 5
    if len(raw) < head:
        raise TruncatedFileError(path, head, len(raw))
    dims = struct.unpack_from(f"<{ndim}I", raw, 7)
    channels, dtype = struct.unpack_from("<IB", raw, 7 + 4 * ndim)
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{path}: unsupported dtype code {dtype}")
    if channels not in (1, ndim):
        raise FormatError(f"{path}: {channels} channels for a {ndim}-D grid")
    count = int(np.prod(dims, dtype=object)) * channels
    if min(dims) == 0 or count > _MAX_VOXELS:
        raise DimensionOverflowError(f"{path}: dims {dims} x {channels} channels out of range")
    expected = head + 4 * count
    if len(raw) < expected:
        raise TruncatedFileError(path, expected, len(raw))
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=head).astype(np.float32)
    if channels == 1:
        return data.reshape(dims)
    return np.moveaxis(data.reshape(dims + (channels,)), -1, 0).copy()


# ---------------------------------------------------------------------------
# manifests


def write_manifest(entries, path) -> None:
    """``entries`` is a sequence of ``(relative_path, time)``."""
    frames = [{"path": str(p), "time": float(t)} for p, t in entries]
    Path(path).write_text(json.dumps({"frames": frames}, indent=2) + "\n", encoding="utf-8")


def read_manifest(path) -> SequenceDataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        frames = doc["frames"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: unreadable manifest ({exc})") from exc
    if len(frames) < 2:
        raise ValueError(f"{path}: manifest lists {len(frames)} frame(s); need at least 2 observations")
    images, times, seen = [], [], {}
    for i, entry in enumerate(frames):
        try:
            rel, t = entry["path"], float(entry["time"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: entry {i} malformed ({exc})") from exc
        if t in seen:
            raise ValueError(f"{path}: entry {i} ({rel}) duplicates time {t} of entry {seen[t]}")
        seen[t] = i
        file = path.parent / rel
        if not file.exists():
            raise ValueError(f"{path}: entry {i} references missing file {rel}")
        img = read_grid(file)
        if images and img.shape != images[0].shape:
            raise ValueError(f"{path}: entry {i} ({rel}) has dims {img.shape}, expected {images[0].shape}")
        images.append(img)
        times.append(t)
    return SequenceDataset(images, times)
