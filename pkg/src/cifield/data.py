"""Scene ingestion, NetPBM image I/O, multi-view merging and synthetic scenes.

Scene directory layout::

    scene_dir/
      scene.json     # cameras, frames, split, instance count, bounding box
      rgb/*.ppm      # 8-bit binary RGB (P6)
      mask/*.pgm     # 8-bit binary labels (P5), 0 = background
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import GaussianSet
from .deform import DeformationField
from .errors import (
    DataError,
    DimensionMismatchError,
    ImageFormatError,
    LabelOverflowError,
    MissingManifestError,
    UnsupportedFormatError,
)
from .metrics import panoptic_map
from .splat import Camera, render_reference

TEST_EVERY = 8


# ---------------------------------------------------------------------------
# NetPBM

def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n%d %d\n255\n" % (width, height)


def write_image_ppm(path, image) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatchError(f"RGB image must be HxWx3, got {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(_header(b"P6", w, h) + img.tobytes())


def write_mask_pgm(path, mask) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DimensionMismatchError(f"mask must be HxW, got {m.shape}")
    if m.size and (m.min() < 0 or m.max() > 255):
        raise LabelOverflowError("mask labels must fit in 8 bits")
    h, w = m.shape
    Path(path).write_bytes(_header(b"P5", w, h) + m.astype(np.uint8).tobytes())


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise ImageFormatError(f"{path}: malformed NetPBM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} file, found {tokens[0][:2]!r}")
    try:
        width, height, maxval = (int(tok) for tok in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: non-numeric NetPBM header") from None
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: unsupported maxval {maxval} (only 255)")
    if pos >= len(raw) or raw[pos:pos + 1] not in b" \t\r\n":
        raise ImageFormatError(f"{path}: missing whitespace after header")
    pos += 1
    need = width * height * channels
    data = raw[pos:pos + need]
    if len(data) != need:
        raise ImageFormatError(f"{path}: raster has {len(data)} bytes, expected {need}")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def read_image_ppm(path) -> np.ndarray:
    """8-bit RGB array (H, W, 3)."""
    return _read_netpbm(path, b"P6", 3).copy()


def read_mask_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1).astype(np.int64)


# ---------------------------------------------------------------------------
# scenes

@dataclass
class FrameObservation:
    time: float
    camera: int
    image: np.ndarray
    mask: np.ndarray
    split: str = "train"
    view: int = 0
    name: str = ""


@dataclass
class SceneDataset:
    frames: list
    cameras: list
    k: int
    bbox: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def train_indices(self) -> list:
        return [i for i, f in enumerate(self.frames) if f.split == "train"]

    @property
    def test_indices(self) -> list:
        return [i for i, f in enumerate(self.frames) if f.split == "test"]

    def split_indices(self, split: str) -> list:
        if split == "all":
            return list(range(len(self.frames)))
        return [i for i, f in enumerate(self.frames) if f.split == split]

    def validate(self) -> None:
        for i, fr in enumerate(self.frames):
            if not 0 <= fr.camera < len(self.cameras):
                raise DataError(f"frame {i} references missing camera {fr.camera}")
            cam = self.cameras[fr.camera]
            if fr.image.shape != (cam.height, cam.width, 3) or fr.mask.shape != (cam.height, cam.width):
                raise DimensionMismatchError(
                    f"frame {i}: image {fr.image.shape} / mask {fr.mask.shape} vs camera {cam.width}x{cam.height}")
            if fr.mask.size and (fr.mask.min() < 0 or fr.mask.max() > self.k):
                raise LabelOverflowError(f"frame {i}: mask label {int(fr.mask.max())} exceeds K={self.k}")
            if not 0.0 <= fr.time <= 1.0:
                raise DataError(f"frame {i}: time {fr.time} outside [0, 1]")
        # merged sequences replay every other view backwards, so either direction is accepted
        per_view = {}
        for fr in self.frames:
            per_view.setdefault(fr.view, []).append(fr.time)
        for view, times in per_view.items():
            steps = np.diff(times)
            if np.any(steps < 0) and np.any(steps > 0):
                raise DataError(f"frame times are not monotone within view {view}")


def default_split(index: int) -> str:
    return "test" if index % TEST_EVERY == 0 else "train"


def _camera_from_json(c) -> Camera:
    ext = np.asarray(c["extrinsics"], dtype=np.float64).reshape(3, 4)
    return Camera(c["fx"], c["fy"], c["cx"], c["cy"], ext[:, :3], ext[:, 3], c["width"], c["height"])


def _camera_to_json(cam: Camera) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width,
            "height": cam.height, "extrinsics": cam.extrinsics.ravel().tolist()}


def load_scene(directory) -> SceneDataset:
    directory = Path(directory)
    manifest_path = directory / "scene.json"
    if not manifest_path.is_file():
        raise MissingManifestError(f"{directory}: no scene.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: {exc}") from None
    cameras = [_camera_from_json(c) for c in manifest["cameras"]]
    frames = []
    for i, f in enumerate(manifest["frames"]):
        image = read_image_ppm(directory / f["rgb"]).astype(np.float64) / 255.0
        mask = read_mask_pgm(directory / f["mask"])
        frames.append(FrameObservation(
            time=float(f.get("time", 0.0)),
            camera=int(f.get("camera", 0)),
            image=image,
            mask=mask,
            split=f.get("split", default_split(i)),
            view=int(f.get("view", f.get("camera", 0))),
            name=Path(f["rgb"]).stem,
        ))
    times = np.array([fr.time for fr in frames])
    if times.size and (times.min() < 0.0 or times.max() > 1.0):
        lo, hi = times.min(), times.max()
        for fr in frames:
            fr.time = (fr.time - lo) / (hi - lo) if hi > lo else 0.0
    max_label = max((int(fr.mask.max()) for fr in frames if fr.mask.size), default=0)
    k = int(manifest["k"]) if "k" in manifest else max_label
    if "bbox" in manifest:
        bbox = np.asarray(manifest["bbox"], dtype=np.float64).reshape(2, 3)
    else:
        bbox = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    scene = SceneDataset(frames, cameras, k, bbox, dict(manifest.get("meta", {})))
    scene.validate()
    return scene


def write_scene(scene: SceneDataset, directory) -> None:
    directory = Path(directory)
    (directory / "rgb").mkdir(parents=True, exist_ok=True)
    (directory / "mask").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, fr in enumerate(scene.frames):
        stem = fr.name or f"{i:04d}"
        rgb, mask = f"rgb/{stem}.ppm", f"mask/{stem}.pgm"
        write_image_ppm(directory / rgb, fr.image)
        write_mask_pgm(directory / mask, fr.mask)
        entries.append({"rgb": rgb, "mask": mask, "camera": fr.camera, "time": fr.time,
                        "split": fr.split, "view": fr.view})
    manifest = {"k": scene.k, "bbox": scene.bbox.tolist(),
                "cameras": [_camera_to_json(c) for c in scene.cameras], "frames": entries}
    if scene.meta:
        manifest["meta"] = scene.meta
    (directory / "scene.json").write_text(json.dumps(manifest, indent=1))


# ---------------------------------------------------------------------------
# multi-view merging

def zigzag_merge(views: list) -> list:
    """Concatenate views, reversing every second one (1-based even views)."""
    if not views:
        return []
    lengths = {len(v) for v in views}
    if len(lengths) != 1:
        raise DataError(f"views have unequal frame counts {sorted(lengths)}")
    out = []
    for n, frames in enumerate(views, start=1):
        out.extend(frames if n % 2 == 1 else frames[::-1])
    return out


def visibility_filter(frames: list):
    """Keep instances whose masks are non-empty in every view; relabel densely.

    Returns ``(new_frames, kept_labels)`` where ``kept_labels[j]`` is the old
    label that became ``j + 1``.
    """
    views = sorted({fr.view for fr in frames})
    seen = {}
    for fr in frames:
        labels = set(np.unique(fr.mask).tolist()) - {0}
        seen.setdefault(fr.view, set()).update(labels)
    kept = sorted(set.intersection(*(seen[v] for v in views))) if views else []
    top = max((int(fr.mask.max()) for fr in frames if fr.mask.size), default=0)
    table = np.zeros(max(top, max(kept, default=0)) + 1, dtype=np.int64)
    for new, old in enumerate(kept, start=1):
        table[old] = new
    out = [replace(fr, mask=table[fr.mask]) for fr in frames]
    return out, kept


def merge_scenes(scenes: list) -> SceneDataset:
    """Merge single-view scenes (one per input) into one pseudo-monocular scene."""
    cameras, views = [], []
    for v, sc in enumerate(scenes):
        offset = len(cameras)
        cameras.extend(sc.cameras)
        views.append([replace(fr, camera=fr.camera + offset, view=v, name=f"v{v:02d}_{fr.name or j:0>4}")
                      for j, fr in enumerate(sc.frames)])
    merged = zigzag_merge(views)
    filtered, kept = visibility_filter(merged)
    filtered = [replace(fr, split=default_split(i)) for i, fr in enumerate(filtered)]
    lo = np.min([sc.bbox[0] for sc in scenes], axis=0)
    hi = np.max([sc.bbox[1] for sc in scenes], axis=0)
    return SceneDataset(filtered, cameras, len(kept), np.stack([lo, hi]), {"kept_labels": kept})


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass
class BlobSpec:
    start: tuple
    end: tuple
    color: tuple
    radius: float
    instance: int
    n_gaussians: int = 24


@dataclass
class SynthSpec:
    blobs: list
    width: int = 64
    height: int = 64
    n_frames: int = 60
    focal: float = 80.0
    orbit_radius: float = 4.0
    orbit_elevation_deg: float = 10.0
    orbit_azimuth_deg: tuple = (-20.0, 20.0)
    bbox: tuple = ((-1.2, -0.8, -0.9), (1.3, 0.6, 0.8))
    opacity: float = 0.9
    occupancy: float = 0.95
    occluder: int | None = None
    occluded: int | None = None
    hidden: tuple = (64, 64)
    n_freq_pos: int = 6
    n_freq_time: int = 4


@dataclass
class SynthResult:
    scene: SceneDataset
    gaussians: GaussianSet
    deform: DeformationField
    ownership: np.ndarray
    occlusion: np.ndarray | None = None


PRESETS = {
    "blobs3-occlude": lambda: SynthSpec(
        blobs=[
            BlobSpec((-0.6, -0.35, 0.3), (-0.6, -0.35, 0.3), (0.9, 0.25, 0.2), 0.3, 1),
            BlobSpec((-0.8, 0.15, -0.45), (1.0, 0.15, -0.45), (0.25, 0.85, 0.3), 0.26, 2),
            BlobSpec((0.1, 0.15, 0.35), (0.1, 0.15, 0.35), (0.2, 0.35, 0.95), 0.32, 3),
        ],
        occluder=2, occluded=3,
    ),
    "blobs2": lambda: SynthSpec(
        blobs=[
            BlobSpec((-0.45, 0.0, 0.0), (-0.45, 0.0, 0.0), (0.9, 0.6, 0.2), 0.3, 1),
            BlobSpec((0.45, 0.0, 0.2), (0.45, 0.0, 0.2), (0.3, 0.5, 0.9), 0.3, 2),
        ],
        width=48, height=48, n_frames=16, focal=60.0,
    ),
    "blob1-static": lambda: SynthSpec(
        blobs=[BlobSpec((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.8, 0.8, 0.3), 0.35, 1)],
        width=32, height=32, n_frames=4, focal=40.0,
    ),
}


def preset(name: str) -> SynthSpec:
    if name not in PRESETS:
        raise DataError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


def orbit_camera(spec: SynthSpec, t: float) -> Camera:
    az = math.radians(spec.orbit_azimuth_deg[0] + t * (spec.orbit_azimuth_deg[1] - spec.orbit_azimuth_deg[0]))
    el = math.radians(spec.orbit_elevation_deg)
    eye = spec.orbit_radius * np.array([math.sin(az) * math.cos(el), -math.sin(el), -math.cos(az) * math.cos(el)])
    return Camera.look_at(eye, np.zeros(3), np.array([0.0, -1.0, 0.0]), spec.focal, spec.focal,
                          spec.width, spec.height)


def _motion_field(spec: SynthSpec, positions, owner) -> DeformationField:
    """Deformation network that translates each moving blob linearly in time.

    For a moving blob a gate ``G(x) = B (n.x - theta)`` is non-negative on the
    blob and <= -1 on every other Gaussian, so ``relu(t + G) - relu(G)`` is
    exactly ``t`` on the blob and exactly 0 elsewhere.
    """
    field_ = DeformationField.create(spec.hidden, spec.n_freq_pos, spec.n_freq_time)
    for w in field_.weights:
        w[:] = 0.0
    moving = [b for b in spec.blobs if tuple(b.start) != tuple(b.end)]
    if not moving:
        return field_
    if len(spec.hidden) != 2 or 2 * len(moving) > min(spec.hidden):
        raise DataError("moving blobs need two hidden layers with two units per blob")
    w1, w2, w3 = field_.weights
    b1 = field_.biases[0]
    axes = [np.eye(3)[i] * s for i in range(3) for s in (1.0, -1.0)]
    for j, blob in enumerate(moving):
        mine = owner == blob.instance
        best = None
        for n in axes:
            proj = positions @ n
            theta = proj[mine].min()
            gap = theta - proj[~mine].max() if np.any(~mine) else 1.0
            if best is None or gap > best[2]:
                best = (n, theta, gap)
        n, theta, gap = best
        if gap <= 0:
            raise DataError(f"blob {blob.instance} is not separable from the others along an axis")
        gain = 1.001 / gap
        ua, ub = 2 * j, 2 * j + 1
        w1[0:3, ua] = gain * n
        w1[3, ua] = 1.0
        b1[ua] = -gain * theta
        w1[0:3, ub] = gain * n
        b1[ub] = -gain * theta
        w2[ua, ua] = 1.0
        w2[ub, ub] = 1.0
        v = np.asarray(blob.end, dtype=np.float64) - np.asarray(blob.start, dtype=np.float64)
        w3[ua, 0:3] = v
        w3[ub, 0:3] = -v
    return field_


def synth_scene(spec: SynthSpec, rng: np.random.Generator | None = None) -> SynthResult:
    """Render a blob scene with known per-Gaussian ownership.

    Images and masks come from the reference renderer; masks are the panoptic
    argmax of the ground-truth Gaussians. Every 8th frame (0, 8, ...) is test.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    lo, hi = np.asarray(spec.bbox[0], dtype=float), np.asarray(spec.bbox[1], dtype=float)
    k = max(b.instance for b in spec.blobs)
    if sorted(b.instance for b in spec.blobs) != list(range(1, k + 1)):
        raise DataError("blob instance ids must be dense 1..K")
    pos, col, owner = [], [], []
    for b in spec.blobs:
        for end in (b.start, b.end):
            c = np.asarray(end, dtype=float)
            if np.any(c - b.radius < lo) or np.any(c + b.radius > hi):
                raise DataError(f"blob {b.instance} trajectory leaves the bounding box")
        d = rng.normal(size=(b.n_gaussians, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d *= rng.uniform(0.0, 1.0, size=(b.n_gaussians, 1)) ** (1.0 / 3.0)
        pos.append(np.asarray(b.start, dtype=float) + 0.55 * b.radius * d)
        col.append(np.tile(b.color, (b.n_gaussians, 1)))
        owner.append(np.full(b.n_gaussians, b.instance))
    positions = np.concatenate(pos)
    owner = np.concatenate(owner)
    scales = np.concatenate([np.full((b.n_gaussians, 3), 0.35 * b.radius) for b in spec.blobs])
    gaussians = GaussianSet.create(positions, k, scales=scales, colors=np.concatenate(col),
                                   opacity=spec.opacity, occupancy=spec.occupancy,
                                   base_identity=np.eye(k)[owner - 1])
    deform = _motion_field(spec, positions, owner)

    cameras, frames, occl = [], [], []
    for f in range(spec.n_frames):
        t = f / (spec.n_frames - 1) if spec.n_frames > 1 else 0.0
        cam = orbit_camera(spec, t)
        cameras.append(cam)
        buf = render_reference(gaussians, deform, cam, t)
        image = np.round(255.0 * np.clip(buf.color, 0.0, 1.0)) / 255.0
        mask = panoptic_map(buf)
        frames.append(FrameObservation(t, f, image, mask, default_split(f), f, f"{f:04d}"))
        if spec.occluder is not None and spec.occluded is not None:
            alone = gaussians.subset(np.flatnonzero(owner == spec.occluded))
            foot = panoptic_map(render_reference(alone, deform, cam, t)) == spec.occluded
            covered = foot & (mask == spec.occluder)
            occl.append(covered.sum() / max(foot.sum(), 1))
    scene = SceneDataset(frames, cameras, k, np.stack([lo, hi]))
    scene.validate()
    return SynthResult(scene, gaussians, deform, owner, np.array(occl) if occl else None)

