"""Gaussian set, continuous field queries, parameter packing and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deform import DeformationField
from .errors import (
    CheckpointError,
    DegenerateDistributionError,
    NotACheckpointError,
    StructuralError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)

PARAM_BLOCKS = (
    ("positions", 3),
    ("rotations", 4),
    ("log_scales", 3),
    ("colors", 3),
    ("opacity_logits", 1),
    ("occupancy_logits", 1),
    ("base_identity", "K"),
    ("calib_log", "K"),
)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianSet:
    """N instance-embedded Gaussians stored as unconstrained parameters.

    Opacity, occupancy and calibration factors are kept as logits / logs, so
    ``opacity``, ``occupancy`` and ``calibration`` are always in range.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    occupancy_logits: np.ndarray
    base_identity: np.ndarray
    calib_log: np.ndarray
    replicas: np.ndarray = field(default=None)

    def __post_init__(self):
        for name, width in PARAM_BLOCKS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if width == 1:
                arr = arr.reshape(-1)
            setattr(self, name, arr)
        n = self.positions.shape[0]
        if self.replicas is None:
            self.replicas = np.zeros(n, dtype=np.int64)
        else:
            self.replicas = np.asarray(self.replicas, dtype=np.int64)
        k = self.base_identity.shape[1] if self.base_identity.ndim == 2 else -1
        expected = {"positions": (n, 3), "rotations": (n, 4), "log_scales": (n, 3),
                    "colors": (n, 3), "opacity_logits": (n,), "occupancy_logits": (n,),
                    "base_identity": (n, k), "calib_log": (n, k)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise StructuralError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def create(cls, positions, n_instances, *, rotations=None, scales=0.05, colors=0.5,
               opacity=0.1, occupancy=0.1, base_identity=None):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        colors = np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3))
        if base_identity is None:
            base_identity = np.full((n, n_instances), 1.0 / n_instances)
        return cls(
            positions=positions.copy(),
            rotations=np.array(rotations, dtype=np.float64),
            log_scales=np.log(scales),
            colors=np.array(colors),
            opacity_logits=logit(np.broadcast_to(opacity, (n,))),
            occupancy_logits=logit(np.broadcast_to(occupancy, (n,))),
            base_identity=np.array(base_identity, dtype=np.float64),
            calib_log=np.zeros((n, n_instances)),
        )

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def k(self) -> int:
        return self.base_identity.shape[1]

    @property
    def opacity(self):
        return sigmoid(self.opacity_logits)

    @property
    def occupancy(self):
        return sigmoid(self.occupancy_logits)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def calibration(self):
        return np.exp(self.calib_log)

    def copy(self) -> "GaussianSet":
        return GaussianSet(**{name: getattr(self, name).copy() for name, _ in PARAM_BLOCKS},
                           replicas=self.replicas.copy())

    def subset(self, idx) -> "GaussianSet":
        idx = np.asarray(idx)
        return GaussianSet(**{name: getattr(self, name)[idx].copy() for name, _ in PARAM_BLOCKS},
                           replicas=self.replicas[idx].copy())

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)


def calibrate(base_identity, factors) -> np.ndarray:
    """Row-normalised ``base_identity * factors``; no degeneracy check."""
    mass = np.asarray(base_identity, dtype=np.float64) * np.asarray(factors, dtype=np.float64)
    return mass / mass.sum(axis=-1, keepdims=True)


def effective_identities(gaussians: GaussianSet) -> np.ndarray:
    """Calibrated identity distribution for every Gaussian, shape (N, K)."""
    mass = gaussians.base_identity * gaussians.calibration
    total = mass.sum(axis=1, keepdims=True)
    if np.any(~(total > 0)):
        bad = int(np.flatnonzero(~(total[:, 0] > 0))[0])
        raise DegenerateDistributionError(
            f"Gaussian {bad}: base identity has no mass on the calibrated support")
    return mass / total


def effective_identity(gaussians: GaussianSet, i: int) -> np.ndarray:
    if not 0 <= i < gaussians.n:
        raise IndexError(f"Gaussian index {i} out of range for N={gaussians.n}")
    mass = gaussians.base_identity[i] * gaussians.calibration[i]
    total = mass.sum()
    if not total > 0:
        raise DegenerateDistributionError(f"Gaussian {i}: zero calibrated identity mass")
    return mass / total


def identity_backward(gaussians: GaussianSet, grad_identity):
    """Gradients of the calibrated identities w.r.t. (base identity, calibration logs)."""
    m = gaussians.calibration
    mass = gaussians.base_identity * m
    total = mass.sum(axis=1, keepdims=True)
    p = mass / total
    g_mass = (grad_identity - np.sum(grad_identity * p, axis=1, keepdims=True)) / total
    return g_mass * m, g_mass * mass


@dataclass
class FieldSample:
    occupancy: float
    identity: np.ndarray
    joint: np.ndarray
    defined: bool = True


def _quat_to_rotmat(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def field_query(gaussians: GaussianSet, deform: DeformationField, x, t: float, k: int) -> FieldSample:
    """Evaluate occupancy, identity and the joint field at a space-time point.

    Occupancy composes the kernel-weighted per-Gaussian occupancies as a union
    of independent events; identity is the occupancy-weighted mixture of the
    calibrated per-Gaussian distributions. ``k`` is 1-based.
    """
    if gaussians.n == 0:
        kk = gaussians.k
        uniform = np.full(kk, 1.0 / kk) if kk else np.zeros(0)
        return FieldSample(0.0, uniform, np.zeros(kk), defined=False)
    if not 1 <= k <= gaussians.k:
        raise IndexError(f"instance {k} outside 1..{gaussians.k}")
    state = deform.forward(gaussians, t)
    rot = _quat_to_rotmat(state.rotations)
    d = np.asarray(x, dtype=np.float64)[None, :] - state.means
    local = np.einsum("nji,nj->ni", rot, d) / state.scales
    kernel = np.exp(-0.5 * np.sum(local * local, axis=1))
    weight = gaussians.occupancy * kernel
    occupancy = 1.0 - np.prod(1.0 - weight)
    mix = weight @ effective_identities(gaussians)
    total = mix.sum()
    if total > 0:
        identity = mix / total
        defined = True
    else:
        identity = np.full(gaussians.k, 1.0 / gaussians.k)
        defined = False
    return FieldSample(float(occupancy), identity, occupancy * identity, defined)


@dataclass(frozen=True)
class ParameterLayout:
    """Block-major layout of the packed parameter vector.

    Order: positions, rotations, log-scales, colors, opacity logits,
    occupancy logits, base identities, calibration logs (each row-major over
    Gaussians), then the deformation weights layer by layer (W then b).
    """

    n: int
    k: int
    layer_dims: tuple
    n_freq_pos: int
    n_freq_time: int

    @classmethod
    def of(cls, gaussians: GaussianSet, deform: DeformationField) -> "ParameterLayout":
        return cls(gaussians.n, gaussians.k, tuple(deform.layer_dims),
                   deform.n_freq_pos, deform.n_freq_time)

    @property
    def slices(self) -> dict:
        out, pos = {}, 0
        for name, width in PARAM_BLOCKS:
            w = self.k if width == "K" else width
            out[name] = slice(pos, pos + self.n * w)
            pos += self.n * w
        out["deform"] = slice(pos, pos + self.n_deform)
        return out

    @property
    def n_deform(self) -> int:
        return sum(a * b + b for a, b in self.layer_dims)

    @property
    def size(self) -> int:
        return self.n * (3 + 4 + 3 + 3 + 1 + 1 + 2 * self.k) + self.n_deform

    def gaussian_slots(self, idx) -> np.ndarray:
        """Flat positions of every per-Gaussian parameter of Gaussians ``idx``."""
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        slots = []
        for name, width in PARAM_BLOCKS:
            w = self.k if width == "K" else width
            start = self.slices[name].start
            slots.append((start + idx[:, None] * w + np.arange(w)[None, :]).ravel())
        return np.concatenate(slots)


def pack_parameters(gaussians: GaussianSet, deform: DeformationField) -> np.ndarray:
    parts = [getattr(gaussians, name).ravel() for name, _ in PARAM_BLOCKS]
    parts.append(deform.get_flat())
    return np.concatenate(parts)


def unpack_parameters(vector, layout: ParameterLayout):
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size != layout.size:
        raise StructuralError(f"parameter vector has {vector.size} entries, layout needs {layout.size}")
    sl = layout.slices
    arrays = {}
    for name, width in PARAM_BLOCKS:
        w = layout.k if width == "K" else width
        block = vector[sl[name]].copy()
        arrays[name] = block if width == 1 else block.reshape(layout.n, w)
    gaussians = GaussianSet(**arrays)
    deform = DeformationField.from_dims(layout.layer_dims, layout.n_freq_pos, layout.n_freq_time)
    deform.set_flat(vector[sl["deform"]])
    return gaussians, deform


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"CIF1"
VERSION = 1


@dataclass
class ModelState:
    gaussians: GaussianSet
    deform: DeformationField
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


def _rng_bytes(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    if st.get("bit_generator") != "PCG64":
        raise StructuralError("checkpoints store PCG64 generator state only")
    return st["state"]["state"].to_bytes(16, "little") + st["state"]["inc"].to_bytes(16, "little")


def _rng_from_bytes(raw: bytes) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int.from_bytes(raw[:16], "little"), "inc": int.from_bytes(raw[16:], "little")},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bg)


def checkpoint_bytes(state: ModelState) -> bytes:
    g, d = state.gaussians, state.deform
    dims = d.layer_dims
    head = [MAGIC, struct.pack("<IQQQ", VERSION, g.n, g.k, len(dims))]
    head += [struct.pack("<QQ", a, b) for a, b in dims]
    head.append(struct.pack("<II", d.n_freq_pos, d.n_freq_time))
    body = pack_parameters(g, d).astype("<f8").tobytes()
    tail = struct.pack("<Q", int(state.iteration)) + _rng_bytes(state.rng)
    return b"".join(head) + body + tail


def save_checkpoint(path, state: ModelState) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.raw)} (needed {self.pos + n})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ModelState:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) and MAGIC.startswith(raw):
        raise TruncatedCheckpointError(f"{path}: truncated inside the header")
    if raw[:4] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    r = _Reader(raw)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    n, k, n_layers = r.unpack("<QQQ")
    dims = tuple(r.unpack("<QQ") for _ in range(n_layers))
    n_freq_pos, n_freq_time = r.unpack("<II")
    layout = ParameterLayout(n, k, dims, n_freq_pos, n_freq_time)
    vec = np.frombuffer(r.take(8 * layout.size), dtype="<f8").astype(np.float64)
    (iteration,) = r.unpack("<Q")
    rng = _rng_from_bytes(r.take(32))
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} unexpected trailing bytes")
    gaussians, deform = unpack_parameters(vec, layout)
    return ModelState(gaussians, deform, int(iteration), rng)
