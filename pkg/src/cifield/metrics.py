"""Panoptic label maps and segmentation metrics.

All metrics are computed per frame and then averaged over frames. Background
(label 0) counts as a pixel label for pixel accuracy but is left out of the
instance-averaged scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionMismatchError


def panoptic_map(buffers=None, *, marginals=None, residual=None) -> np.ndarray:
    """Per-pixel argmax over (residual, M_1..M_K); ties go to the lowest label."""
    if buffers is not None:
        marginals, residual = buffers.marginals, buffers.residual
    stacked = np.concatenate([np.asarray(residual)[..., None], np.asarray(marginals)], axis=-1)
    return np.argmax(stacked, axis=-1).astype(np.int64)


def _frames(pred, gt):
    if isinstance(pred, np.ndarray) and pred.ndim == 2:
        pred, gt = [pred], [gt]
    pred = [np.asarray(p) for p in pred]
    gt = [np.asarray(g) for g in gt]
    if len(pred) != len(gt):
        raise DimensionMismatchError(f"{len(pred)} predicted frames vs {len(gt)} reference frames")
    for p, g in zip(pred, gt):
        if p.shape != g.shape:
            raise DimensionMismatchError(f"prediction {p.shape} vs reference {g.shape}")
    return pred, gt


def _instances(p, g, over):
    present = set(np.unique(g).tolist())
    if over == "union":
        present |= set(np.unique(p).tolist())
    present.discard(0)
    return sorted(present)


def frame_pixel_accuracy(p, g) -> float:
    return float(np.mean(p == g))


def frame_instance_accuracy(p, g):
    ks = _instances(p, g, "gt")
    if not ks:
        return None
    return float(np.mean([np.mean(p[g == k] == k) for k in ks]))


def frame_iou(p, g, over="gt") -> dict:
    out = {}
    for k in _instances(p, g, over):
        pk, gk = p == k, g == k
        out[k] = float(np.sum(pk & gk) / np.sum(pk | gk))
    return out


def _mean_over_frames(values):
    values = [v for v in values if v is not None]
    if not values:
        raise DataError("no frame contains an instance")
    return float(np.mean(values))


def macc_pix(pred, gt) -> float:
    pred, gt = _frames(pred, gt)
    return float(np.mean([frame_pixel_accuracy(p, g) for p, g in zip(pred, gt)]))


def macc_inst(pred, gt) -> float:
    pred, gt = _frames(pred, gt)
    return _mean_over_frames([frame_instance_accuracy(p, g) for p, g in zip(pred, gt)])


def miou(pred, gt, over: str = "gt") -> float:
    """Mean IoU: per frame over instances present in ``gt`` (or in either map
    with ``over="union"``), then over frames."""
    pred, gt = _frames(pred, gt)
    per = []
    for p, g in zip(pred, gt):
        ious = frame_iou(p, g, over)
        per.append(float(np.mean(list(ious.values()))) if ious else None)
    return _mean_over_frames(per)


@dataclass
class MetricReport:
    macc_pix: float
    macc_inst: float
    miou: float
    per_instance_iou: dict = field(default_factory=dict)
    per_frame: list = field(default_factory=list)
    n_frames: int = 0

    def to_text(self) -> str:
        lines = [f"n_frames={self.n_frames}", f"macc_pix={self.macc_pix:.10f}",
                 f"macc_inst={self.macc_inst:.10f}", f"miou={self.miou:.10f}"]
        for k, v in sorted(self.per_instance_iou.items()):
            lines.append(f"iou.instance_{k}={v:.10f}")
        for row in self.per_frame:
            fid = row["frame"]
            lines.append(f"frame.{fid}.macc_pix={row['macc_pix']:.10f}")
            if row["macc_inst"] is not None:
                lines.append(f"frame.{fid}.macc_inst={row['macc_inst']:.10f}")
                lines.append(f"frame.{fid}.miou={row['miou']:.10f}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        rows = [("mAcc-pix", self.macc_pix), ("mAcc-inst", self.macc_inst), ("mIoU", self.miou)]
        out = [f"{'metric':<10} {'value':>8}", "-" * 19]
        out += [f"{name:<10} {100 * v:>8.2f}" for name, v in rows]
        if self.per_instance_iou:
            out.append("")
            out.append(f"{'instance':<10} {'IoU':>8}")
            out += [f"{k:<10} {100 * v:>8.2f}" for k, v in sorted(self.per_instance_iou.items())]
        return "\n".join(out)


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            key, val = line.split("=", 1)
            out[key.strip()] = float(val)
    return out


def evaluate(pred, gt, frame_ids=None) -> MetricReport:
    pred, gt = _frames(pred, gt)
    if frame_ids is None:
        frame_ids = list(range(len(pred)))
    rows = []
    inst = {}
    for fid, p, g in zip(frame_ids, pred, gt):
        ious = frame_iou(p, g)
        for k, v in ious.items():
            inst.setdefault(k, []).append(v)
        rows.append({
            "frame": fid,
            "macc_pix": frame_pixel_accuracy(p, g),
            "macc_inst": frame_instance_accuracy(p, g),
            "miou": float(np.mean(list(ious.values()))) if ious else None,
        })
    return MetricReport(
        macc_pix=float(np.mean([r["macc_pix"] for r in rows])),
        macc_inst=_mean_over_frames([r["macc_inst"] for r in rows]),
        miou=_mean_over_frames([r["miou"] for r in rows]),
        per_instance_iou={k: float(np.mean(v)) for k, v in inst.items()},
        per_frame=rows,
        n_frames=len(rows),
    )
