"""Per-Gaussian identity estimation from 2D instance masks.

Each Gaussian's share of a pixel's colour (its normalised rendering weight)
is credited to the mask label at that pixel. Summed over every training
frame this gives a visibility-weighted identity histogram per Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelOverflowError, UsageError
from .splat import RenderBuffers, render


@dataclass
class IdentityAccumulator:
    numerators: np.ndarray
    denominators: np.ndarray
    background: np.ndarray

    @classmethod
    def zeros(cls, n: int, k: int) -> "IdentityAccumulator":
        return cls(np.zeros((n, k)), np.zeros(n), np.zeros(n))

    @property
    def k(self) -> int:
        return self.numerators.shape[1]

    def merge(self, other: "IdentityAccumulator") -> None:
        self.numerators += other.numerators
        self.denominators += other.denominators
        self.background += other.background


def accumulate(acc: IdentityAccumulator, buffers: RenderBuffers, mask) -> IdentityAccumulator:
    """Credit every (Gaussian, weight) pair of every pixel to that pixel's label."""
    if buffers.contrib_offsets is None:
        raise UsageError("buffers carry no contribution lists; render with contributions=True")
    mask = np.asarray(mask)
    if mask.shape != buffers.color.shape[:2]:
        raise UsageError(f"mask shape {mask.shape} does not match render {buffers.color.shape[:2]}")
    if mask.size and (mask.min() < 0 or mask.max() > acc.k):
        raise LabelOverflowError(f"mask label {int(mask.max())} outside 0..{acc.k}")
    counts = np.diff(buffers.contrib_offsets)
    labels = np.repeat(mask.ravel().astype(np.int64), counts)
    idx = buffers.contrib_index
    w = buffers.contrib_weight
    n, k = acc.numerators.shape
    acc.denominators += np.bincount(idx, weights=w, minlength=n)
    bg = labels == 0
    acc.background += np.bincount(idx[bg], weights=w[bg], minlength=n)
    fg = ~bg
    flat = idx[fg] * k + (labels[fg] - 1)
    acc.numerators += np.bincount(flat, weights=w[fg], minlength=n * k).reshape(n, k)
    return acc


def finalize(acc: IdentityAccumulator) -> np.ndarray:
    """Normalise the label histogram; Gaussians with no instance evidence get uniform."""
    num = acc.numerators
    total = num.sum(axis=1, keepdims=True)
    out = np.full_like(num, 1.0 / acc.k)
    has = total[:, 0] > 0
    out[has] = num[has] / total[has]
    return out


def accumulate_frames(gaussians, deform, scene, indices) -> IdentityAccumulator:
    acc = IdentityAccumulator.zeros(gaussians.n, gaussians.k)
    for i in indices:
        frame = scene.frames[i]
        buf = render(gaussians, deform, scene.cameras[frame.camera], frame.time, contributions=True)
        part = IdentityAccumulator.zeros(gaussians.n, gaussians.k)
        acc.merge(accumulate(part, buf, frame.mask))
    return acc


def estimate_identities(gaussians, deform, scene, indices=None):
    """Return a copy of ``gaussians`` with base identities estimated from the
    masks of ``indices`` (default: the training split) and calibration reset.
    """
    if indices is None:
        indices = scene.train_indices
    indices = list(indices)
    if not indices:
        raise UsageError("identity estimation needs at least one frame")
    acc = accumulate_frames(gaussians, deform, scene, indices)
    out = gaussians.copy()
    out.base_identity = finalize(acc)
    out.calib_log = np.zeros_like(out.calib_log)
    return out
