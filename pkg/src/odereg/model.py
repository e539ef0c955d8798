"""Velocity networks, the latent encoder/decoder pair and checkpoints.

The dynamics network maps a vector field (the current displacement in direct
mode, the latent state in latent mode) and a time ``t`` to a velocity of the
same shape::

    x --[stride-2 conv, tanh] x n_stages --> flatten --(+ time embedding)-->
      tanh(fc1) --> fc2 --> reshape

The time embedding is ``w2 @ tanh(w1 * t + b1) + b2``.  All reverse-mode
derivatives are written out by hand; ``velocity_vjp`` recomputes the forward
pass and walks it backwards.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeMismatchError, TruncatedFileError
from .grid import apply_along_axis, box_smooth, box_smooth_vjp, check_vector_field
from .odeint import SolverConfig


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor; parameter shapes are a pure function of it."""

    mode: str  # "direct" or "latent"
    dims: tuple[int, ...]  # full-resolution grid
    channels: tuple[int, ...] = (8, 16)
    hidden: int = 128
    time_hidden: int = 32
    latent_factor: int = 4
    smoothing_window: int = 15

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.mode not in ("direct", "latent"):
            raise ValueError(f"mode must be 'direct' or 'latent', got {self.mode!r}")
        if len(self.dims) not in (2, 3) or min(self.dims) < 1:
            raise ValueError(f"dims must be 2 or 3 positive extents, got {self.dims}")
        if not self.channels or min(self.channels) < 1:
            raise ValueError("need at least one conv stage with positive width")
        if self.hidden < 1 or self.time_hidden < 1 or self.latent_factor < 1:
            raise ValueError("hidden, time_hidden and latent_factor must be positive")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError(f"smoothing_window must be odd and positive, got {self.smoothing_window}")
        if self.mode == "latent" and any(n % self.latent_factor for n in self.dims):
            raise ValueError(f"dims {self.dims} are not divisible by latent factor {self.latent_factor}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def state_dims(self) -> tuple[int, ...]:
        if self.mode == "latent":
            return tuple(n // self.latent_factor for n in self.dims)
        return self.dims

    @property
    def stage_dims(self) -> list[tuple[int, ...]]:
        """Spatial extent at the input of each conv stage and after the last."""
        out = [self.state_dims]
        for _ in self.channels:
            out.append(tuple((n - 1) // 2 + 1 for n in out[-1]))
        return out

    @property
    def feature_width(self) -> int:
        return self.channels[-1] * int(np.prod(self.stage_dims[-1]))

    @property
    def state_size(self) -> int:
        return self.ndim * int(np.prod(self.state_dims))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d = self.ndim
        kernel = (3,) * d
        shapes = {}
        c_in = d
        for i, c_out in enumerate(self.channels):
            shapes[f"conv{i}.weight"] = (c_out, c_in) + kernel
            shapes[f"conv{i}.bias"] = (c_out,)
            c_in = c_out
        F = self.feature_width
        shapes["time.weight1"] = (self.time_hidden, 1)
        shapes["time.bias1"] = (self.time_hidden,)
        shapes["time.weight2"] = (F, self.time_hidden)
        shapes["time.bias2"] = (F,)
        shapes["fc1.weight"] = (self.hidden, F)
        shapes["fc1.bias"] = (self.hidden,)
        shapes["fc2.weight"] = (self.state_size, self.hidden)
        shapes["fc2.bias"] = (self.state_size,)
        if self.mode == "latent":
            shapes["decoder.residual"] = (d, d) + kernel
        return shapes

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "Arch":
        return cls(**obj)


@dataclass(frozen=True)
class VelocityModel:
    arch: Arch
    params: dict[str, np.ndarray]
    solver: SolverConfig = field(default_factory=SolverConfig)

    def with_params(self, params: dict[str, np.ndarray]) -> "VelocityModel":
        return replace(self, params=params)

    def num_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())


ZERO_INIT = ("fc2.weight", "fc2.bias", "decoder.residual")


def init_params(arch: Arch, seed: int = 0, solver: SolverConfig | None = None) -> VelocityModel:
    """Fan-in scaled uniform init; the output layer and decoder residual start at zero."""
    rng = np.random.default_rng(seed)
    shapes = arch.param_shapes()
    params = {}
    for name, shape in shapes.items():
        if name in ZERO_INIT:
            params[name] = np.zeros(shape)
            continue
        weight = name.replace("bias", "weight")
        bound = np.sqrt(1.0 / np.prod(shapes[weight][1:]))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return VelocityModel(arch, params, solver or SolverConfig())


# ---------------------------------------------------------------------------
# convolution (kernel 3, zero padding 1)


def _conv_out_dims(dims, stride):
    return tuple((n - 1) // stride + 1 for n in dims)


def _im2col(x, stride):
    """Patch matrix of shape (C * 3**d, prod(out_dims))."""
    d = x.ndim - 1
    out_dims = _conv_out_dims(x.shape[1:], stride)
    xpad = np.pad(x, [(0, 0)] + [(1, 1)] * d)
    cols = []
    for off in itertools.product(range(3), repeat=d):
        sl = tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(off, out_dims))
        cols.append(xpad[(slice(None),) + sl])
    cols = np.stack(cols, axis=1)  # (C, 3**d, *out)
    return cols.reshape(x.shape[0] * 3**d, -1), out_dims


def _col2im(gcols, in_shape, stride):
    d = len(in_shape) - 1
    out_dims = _conv_out_dims(in_shape[1:], stride)
    gcols = gcols.reshape((in_shape[0], 3**d) + out_dims)
    gpad = np.zeros((in_shape[0],) + tuple(n + 2 for n in in_shape[1:]))
    for i, off in enumerate(itertools.product(range(3), repeat=d)):
        sl = tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(off, out_dims))
        gpad[(slice(None),) + sl] += gcols[:, i]
    return gpad[(slice(None),) + (slice(1, -1),) * d]


def conv(x, weight, bias, stride):
    cols, out_dims = _im2col(x, stride)
    out = weight.reshape(weight.shape[0], -1) @ cols
    if bias is not None:
        out += bias[:, None]
    return out.reshape((weight.shape[0],) + out_dims)


def conv_vjp(x, weight, stride, g):
    """Gradients (input, weight, bias) of ``conv`` for output cotangent ``g``."""
    cols, _ = _im2col(x, stride)
    g2 = g.reshape(g.shape[0], -1)
    g_w = (g2 @ cols.T).reshape(weight.shape)
    g_b = g2.sum(axis=1)
    g_x = _col2im(weight.reshape(weight.shape[0], -1).T @ g2, x.shape, stride)
    return g_x, g_w, g_b


# ---------------------------------------------------------------------------
# velocity network


def _check_state(arch: Arch, state: np.ndarray) -> None:
    expected = (arch.ndim,) + arch.state_dims
    if np.shape(state) != expected:
        raise ValueError(f"stage 'input': state shape {np.shape(state)} does not match arch {expected}")


def _forward(arch: Arch, params, state, t):
    _check_state(arch, state)
    cache = {"acts": [np.asarray(state, dtype=np.float64)]}
    x = cache["acts"][0]
    for i in range(len(arch.channels)):
        x = np.tanh(conv(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], 2))
        cache["acts"].append(x)
    flat = x.ravel()
    e_hidden = np.tanh(params["time.weight1"][:, 0] * t + params["time.bias1"])
    emb = params["time.weight2"] @ e_hidden + params["time.bias2"]
    z = flat + emb
    h = np.tanh(params["fc1.weight"] @ z + params["fc1.bias"])
    out = params["fc2.weight"] @ h + params["fc2.bias"]
    cache.update(e_hidden=e_hidden, z=z, h=h)
    return out.reshape(np.shape(state)), cache


def velocity_forward(model: VelocityModel, state: np.ndarray, t: float) -> np.ndarray:
    return _forward(model.arch, model.params, state, float(t))[0]


def velocity_vjp(model: VelocityModel, state: np.ndarray, t: float, cotangent: np.ndarray):
    """Exact reverse-mode derivative of :func:`velocity_forward`.

    Returns ``(grad_params, grad_state)``; ``grad_params`` has an entry for
    every network parameter (not for the decoder residual).
    """
    return _vjp(model.arch, model.params, state, float(t), cotangent)


def _vjp(arch, params, state, t, cotangent):
    if np.shape(cotangent) != np.shape(state):
        raise ValueError(f"cotangent shape {np.shape(cotangent)} does not match state {np.shape(state)}")
    _, cache = _forward(arch, params, state, t)
    g = {}
    g_out = np.asarray(cotangent, dtype=np.float64).ravel()
    h, z, e_hidden = cache["h"], cache["z"], cache["e_hidden"]

    g["fc2.weight"] = np.outer(g_out, h)
    g["fc2.bias"] = g_out
    g_pre1 = (params["fc2.weight"].T @ g_out) * (1.0 - h * h)
    g["fc1.weight"] = np.outer(g_pre1, z)
    g["fc1.bias"] = g_pre1
    g_z = params["fc1.weight"].T @ g_pre1

    g["time.weight2"] = np.outer(g_z, e_hidden)
    g["time.bias2"] = g_z
    g_epre = (params["time.weight2"].T @ g_z) * (1.0 - e_hidden * e_hidden)
    g["time.weight1"] = (g_epre * t)[:, None]
    g["time.bias1"] = g_epre

    acts = cache["acts"]
    g_x = g_z.reshape(acts[-1].shape)
    for i in range(len(arch.channels) - 1, -1, -1):
        y = acts[i + 1]
        g_pre = g_x * (1.0 - y * y)
        g_x, g[f"conv{i}.weight"], g[f"conv{i}.bias"] = conv_vjp(acts[i], params[f"conv{i}.weight"], 2, g_pre)
    return g, g_x


class VelocityDynamics:
    """Adapter exposing the network as an ODE right-hand side ``f(y, t, params)``."""

    def __init__(self, arch: Arch):
        self.arch = arch

    def __call__(self, y, t, params):
        return _forward(self.arch, params, y, float(t))[0]

    def vjp(self, y, t, params, cotangent):
        g, g_y = _vjp(self.arch, params, y, float(t), cotangent)
        return g_y, g


# ---------------------------------------------------------------------------
# latent encoder / decoder


def encode(displacement: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool each channel with window = stride = ``factor``."""
    d = check_vector_field(displacement)
    if factor < 1:
        raise ValueError(f"latent factor must be positive, got {factor}")
    dims = displacement.shape[1:]
    if any(n % factor for n in dims):
        raise ValueError(f"dims {dims} are not divisible by factor {factor}")
    shape = [d]
    for n in dims:
        shape += [n // factor, factor]
    pooled = np.asarray(displacement, dtype=np.float64).reshape(shape)
    return pooled.mean(axis=tuple(range(2, 2 * d + 1, 2)))


def upsample_matrix(n_latent: int, factor: int) -> np.ndarray:
    """Linear interpolation from cell centres of the coarse grid, extrapolating at the ends.

    Exact on affine fields, and the left inverse of average pooling for them.
    """
    n_full = n_latent * factor
    mat = np.zeros((n_full, n_latent))
    if n_latent == 1:
        mat[:, 0] = 1.0
        return mat
    for i in range(n_full):
        c = (i + 0.5) / factor - 0.5
        i0 = min(max(int(np.floor(c)), 0), n_latent - 2)
        w = c - i0
        mat[i, i0] = 1.0 - w
        mat[i, i0 + 1] = w
    return mat


def _upsample(latent, factor):
    out = np.asarray(latent, dtype=np.float64)
    for a in range(out.ndim - 1):
        out = apply_along_axis(out, upsample_matrix(out.shape[1 + a], factor), 1 + a)
    return out


def _upsample_vjp(g, factor):
    out = g
    for a in range(out.ndim - 1):
        out = apply_along_axis(out, upsample_matrix(out.shape[1 + a] // factor, factor).T, 1 + a)
    return out


def _check_latent(arch: Arch, latent: np.ndarray) -> None:
    expected = (arch.ndim,) + arch.state_dims
    if np.shape(latent) != expected:
        raise ValueError(f"latent shape {np.shape(latent)} does not match arch {expected}")


def decode(model: VelocityModel, latent: np.ndarray, window: int | None = None) -> np.ndarray:
    """Upsample, add the learned residual convolution, then box-smooth."""
    arch = model.arch
    _check_latent(arch, latent)
    window = arch.smoothing_window if window is None else window
    up = _upsample(latent, arch.latent_factor)
    v = up + conv(up, model.params["decoder.residual"], None, 1)
    return box_smooth(v, window)


def decode_vjp(model: VelocityModel, latent: np.ndarray, cotangent: np.ndarray, window: int | None = None):
    """Returns ``(grad_latent, {"decoder.residual": grad})``."""
    arch = model.arch
    _check_latent(arch, latent)
    window = arch.smoothing_window if window is None else window
    up = _upsample(latent, arch.latent_factor)
    g_v = box_smooth_vjp(cotangent, window)
    g_up, g_w, _ = conv_vjp(up, model.params["decoder.residual"], 1, g_v)
    g_up = g_up + g_v
    return _upsample_vjp(g_up, arch.latent_factor), {"decoder.residual": g_w}


def initial_state(arch: Arch) -> np.ndarray:
    """ODE initial condition: the encoded identity map (zero displacement)."""
    zero = np.zeros((arch.ndim,) + arch.dims)
    if arch.mode == "latent":
        return encode(zero, arch.latent_factor)
    return zero


def state_to_displacement(model: VelocityModel, state: np.ndarray) -> np.ndarray:
    """Full-resolution displacement represented by an ODE state."""
    if model.arch.mode == "latent":
        return decode(model, state)
    return np.asarray(state, dtype=np.float64)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"NODR"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: VelocityModel, path) -> None:
    """Write ``NODR | u16 version | u32 header length | JSON header | float64 payload``."""
    shapes = model.arch.param_shapes()
    names = list(shapes)
    header = {
        "arch": model.arch.to_json(),
        "solver": asdict(model.solver),
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> VelocityModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(raw) < 10:
        raise TruncatedFileError(path, 10, len(raw))
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 10 + hlen:
        raise TruncatedFileError(path, 10 + hlen, len(raw))
    try:
        header = json.loads(raw[10 : 10 + hlen].decode("utf-8"))
        arch = Arch.from_json(header["arch"])
        solver = SolverConfig(**header.get("solver", {}))
        entries = header["params"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc

    expected = arch.param_shapes()
    listed = [(e["name"], tuple(e["shape"])) for e in entries]
    if len(listed) != len(expected):
        raise ShapeMismatchError(f"{path}: header lists {len(listed)} arrays, arch needs {len(expected)}")
    for name, shape in listed:
        if expected.get(name) != shape:
            raise ShapeMismatchError(f"{path}: array {name!r} has shape {shape}, arch expects {expected.get(name)}")

    total = 10 + hlen + 8 * sum(int(np.prod(s)) for _, s in listed)
    if len(raw) < total:
        raise TruncatedFileError(path, total, len(raw))
    if len(raw) > total:
        raise FormatError(f"{path}: {len(raw) - total} trailing bytes after payload")
    params = {}
    offset = 10 + hlen
    for name, shape in listed:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    return VelocityModel(arch, params, solver)
