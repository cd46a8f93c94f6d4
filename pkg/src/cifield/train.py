"""Losses, Adam, and the two-stage training schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from .core import GaussianSet, ModelState, ParameterLayout, pack_parameters, save_checkpoint, unpack_parameters
from .deform import DeformationField
from .errors import DimensionMismatchError, LabelOverflowError, NumericError, UsageError
from .identity import estimate_identities
from .metrics import evaluate, panoptic_map
from .resample import resample_round
from .splat import psnr, render, render_backward

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-8


@dataclass
class TrainConfig:
    iters_recon: int = 10_000
    iters_inst: int = 3_000
    lambda_inst: float = 0.01
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_deform: float = 1.6e-4
    lr_occupancy: float = 0.01
    lr_calibration: float = 0.01
    spatial_lr_scale: float | None = None
    resample_rate: float = 0.01
    resample_every: int = 500
    resample: bool = True
    calibrate: bool = True
    num_gaussians: int = 2_000
    hidden: tuple = (64, 64)
    n_freq_pos: int = 6
    n_freq_time: int = 4
    shuffle: bool = False
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise UsageError(f"{f.name} must be positive")
        if self.iters_recon < 0 or self.iters_inst < 0:
            raise UsageError("iteration counts must be non-negative")
        if self.resample_every <= 0:
            raise UsageError("resample_every must be positive")
        if not 0.0 < self.resample_rate <= 1.0:
            raise UsageError("resample_rate must lie in (0, 1]")
        if self.lambda_inst < 0:
            raise UsageError("lambda_inst must be non-negative")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses

def loss_rgb(rendered, target):
    """Mean absolute error and its (sub)gradient."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise DimensionMismatchError(f"rendered {rendered.shape} vs target {target.shape}")
    diff = rendered - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def loss_inst(marginals, residual, mask):
    """Mean negative log-likelihood of the mask labels.

    Returns ``(loss, grad_marginals, grad_residual)``. Probabilities below the
    floor contribute a constant and receive no gradient.
    """
    marginals = np.asarray(marginals, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    mask = np.asarray(mask)
    h, w, k = marginals.shape
    if residual.shape != (h, w) or mask.shape != (h, w):
        raise DimensionMismatchError("marginals, residual and mask disagree in shape")
    if mask.size and (mask.min() < 0 or mask.max() > k):
        raise LabelOverflowError(f"mask label outside 0..{k}")
    probs = np.concatenate([residual[..., None], marginals], axis=-1)
    q = np.take_along_axis(probs, mask[..., None].astype(np.int64), axis=-1)[..., 0]
    floored = q <= PROB_FLOOR
    loss = float(np.mean(-np.log(np.maximum(q, PROB_FLOOR))))
    gq = np.where(floored, 0.0, -1.0 / np.where(floored, 1.0, q)) / q.size
    g = np.zeros_like(probs)
    np.put_along_axis(g, mask[..., None].astype(np.int64), gq[..., None], axis=-1)
    return loss, g[..., 1:], g[..., 0]


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))

    def reset(self, slots) -> None:
        self.m[slots] = 0.0
        self.v[slots] = 0.0


def adam_step(state: AdamState, params, grads, lr):
    """Bias-corrected Adam update; ``lr`` is a scalar or a per-slot vector."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimensionMismatchError("parameter, gradient and moment sizes differ")
    bad = ~np.isfinite(grads)
    if bad.any():
        where = np.flatnonzero(bad)
        raise NumericError(f"non-finite gradient in {where.size} slots (first: {where[:8].tolist()})")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# state

def scene_extent(scene) -> float:
    lo, hi = scene.bbox
    return float(np.linalg.norm(hi - lo) / 2.0)


def init_state(scene, config: TrainConfig) -> ModelState:
    """Gaussians uniform in the scene box, scales from neighbour spacing."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    lo, hi = scene.bbox
    n = config.num_gaussians
    if n < 1:
        raise UsageError("need at least one Gaussian")
    positions = rng.uniform(lo, hi, size=(n, 3))
    if n > 1:
        kk = min(4, n)
        dist, _ = cKDTree(positions).query(positions, k=kk)
        spacing = np.sqrt(np.mean(dist[:, 1:] ** 2, axis=1))
    else:
        spacing = np.array([0.1 * float(np.min(hi - lo))])
    scales = np.repeat(np.maximum(spacing, 1e-7)[:, None], 3, axis=1)
    gaussians = GaussianSet.create(positions, max(scene.k, 1), scales=scales, colors=0.5,
                                   opacity=0.1, occupancy=0.1)
    deform = DeformationField.create(config.hidden, config.n_freq_pos, config.n_freq_time, rng=rng)
    return ModelState(gaussians, deform, 0, rng)


def learning_rates(layout: ParameterLayout, config: TrainConfig, extent: float, progress: float,
                   instance_stage: bool) -> np.ndarray:
    """Per-slot learning rates for the current point of the schedule."""
    scale = extent if config.spatial_lr_scale is None else config.spatial_lr_scale
    r = min(max(progress, 0.0), 1.0)
    decay = math.exp((1 - r) * math.log(config.lr_position) + r * math.log(config.lr_position_final))
    decay /= config.lr_position
    sl = layout.slices
    lr = np.zeros(layout.size)
    lr[sl["positions"]] = config.lr_position * decay * scale
    lr[sl["rotations"]] = config.lr_rotation
    lr[sl["log_scales"]] = config.lr_scale
    lr[sl["colors"]] = config.lr_color
    lr[sl["opacity_logits"]] = config.lr_opacity
    lr[sl["deform"]] = config.lr_deform * decay * scale
    if instance_stage:
        lr[sl["occupancy_logits"]] = config.lr_occupancy
        if config.calibrate:
            lr[sl["calib_log"]] = config.lr_calibration
    # base identities are estimated, not optimized
    return lr


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    resample_lines: list = field(default_factory=list)

    def add(self, iteration, l_rgb, l_inst, value_psnr):
        self.records.append((iteration, l_rgb, l_inst, value_psnr))
        log.info("iter=%d L_rgb=%.6f L_inst=%.6f PSNR=%.3f", iteration, l_rgb, l_inst, value_psnr)

    def lines(self) -> list:
        return [f"iter={i} L_rgb={a:.8f} L_inst={b:.8f} PSNR={p:.4f}" for i, a, b, p in self.records]


def _frame_order(indices, n_iters, rng, shuffle):
    indices = list(indices)
    if not indices:
        raise UsageError("no training frames")
    if not shuffle:
        return [indices[i % len(indices)] for i in range(n_iters)]
    out = []
    while len(out) < n_iters:
        out.extend(np.asarray(indices)[rng.permutation(len(indices))].tolist())
    return out[:n_iters]


def training_step(state: ModelState, frame, camera, lambda_inst: float, with_instances: bool):
    """Render one frame and return ``(grad, L_rgb, L_inst, psnr)``."""
    g, d = state.gaussians, state.deform
    buf = render(g, d, camera, frame.time)
    l_rgb, g_col = loss_rgb(buf.color, frame.image)
    if with_instances:
        l_inst, g_m, g_r = loss_inst(buf.marginals, buf.residual, frame.mask)
        g_m *= lambda_inst
        g_r *= lambda_inst
    else:
        l_inst, g_m, g_r = 0.0, np.zeros_like(buf.marginals), None
    grad = render_backward(g, d, camera, frame.time, g_col, g_m, g_r, buffers=buf)
    return grad, l_rgb, l_inst, psnr(buf.color, frame.image)


def _apply(state: ModelState, layout: ParameterLayout, vec) -> None:
    g, d = unpack_parameters(vec, layout)
    g.normalize_rotations()
    np.clip(g.colors, 0.0, 1.0, out=g.colors)
    g.replicas = state.gaussians.replicas
    state.gaussians, state.deform = g, d


def _run(state, scene, config, n_iters, instance_stage, train_log, adam=None, resample_log=None):
    layout = ParameterLayout.of(state.gaussians, state.deform)
    adam = AdamState.zeros(layout.size) if adam is None else adam
    extent = scene_extent(scene)
    order = _frame_order(scene.train_indices, n_iters, state.rng, config.shuffle)
    acc = np.zeros(3)
    count = 0
    for it in range(n_iters):
        frame = scene.frames[order[it]]
        camera = scene.cameras[frame.camera]
        grad, l_rgb, l_inst, p = training_step(state, frame, camera, config.lambda_inst, instance_stage)
        progress = (it / max(config.iters_recon, 1)) if not instance_stage else 1.0
        lr = learning_rates(layout, config, extent, progress, instance_stage)
        vec = adam_step(adam, pack_parameters(state.gaussians, state.deform), grad, lr)
        _apply(state, layout, vec)
        state.iteration += 1
        acc += (l_rgb, l_inst, p)
        count += 1
        done = it + 1
        if config.log_every and done % config.log_every == 0:
            train_log.add(state.iteration, *(acc / count))
            acc[:] = 0.0
            count = 0
        if (instance_stage and config.resample and done % config.resample_every == 0
                and done < n_iters):
            rnd = done // config.resample_every
            state.gaussians, report = resample_round(state.gaussians, 1e-4, config.resample_rate, state.rng)
            if len(report.overwritten):
                adam.reset(layout.gaussian_slots(report.overwritten))
            lines = report.to_lines(rnd, state.iteration)
            train_log.resample_lines.extend(lines)
            if resample_log is not None:
                resample_log.write("\n".join(lines) + "\n")
    return adam


def train_reconstruction(scene, config: TrainConfig, state: ModelState | None = None,
                         train_log: TrainLog | None = None) -> ModelState:
    """Photometric stage: L1 colour loss only, for ``config.iters_recon`` steps."""
    state = init_state(scene, config) if state is None else state
    train_log = TrainLog() if train_log is None else train_log
    if config.iters_recon:
        _run(state, scene, config, config.iters_recon, False, train_log)
    return state


def train_instance(scene, config: TrainConfig, state: ModelState, train_log: TrainLog | None = None,
                   checkpoint_path=None, resample_log=None) -> ModelState:
    """Estimate identities once, then jointly optimise colour and instance losses
    with periodic resampling."""
    if scene.k == 0:
        raise UsageError("scene has no instances; instance training needs K >= 1")
    if state.gaussians.k != scene.k:
        raise UsageError(f"model has K={state.gaussians.k} but scene has K={scene.k}")
    train_log = TrainLog() if train_log is None else train_log
    state.gaussians = estimate_identities(state.gaussians, state.deform, scene)
    if config.iters_inst:
        _run(state, scene, config, config.iters_inst, True, train_log, resample_log=resample_log)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return state


def fit(scene, config: TrainConfig, stage: str = "full", state: ModelState | None = None,
        train_log: TrainLog | None = None, resample_log=None) -> ModelState:
    if stage not in ("recon", "instance", "full"):
        raise UsageError(f"unknown stage {stage!r}")
    train_log = TrainLog() if train_log is None else train_log
    state = init_state(scene, config) if state is None else state
    if stage in ("recon", "full"):
        state = train_reconstruction(scene, config, state, train_log)
    if stage in ("instance", "full"):
        state = train_instance(scene, config, state, train_log, resample_log=resample_log)
    return state


def evaluate_state(state: ModelState, scene, indices):
    """Render ``indices`` and return ``(mean PSNR, MetricReport)``."""
    indices = list(indices)
    if not indices:
        raise UsageError("evaluation split is empty")
    preds, gts, ps = [], [], []
    for i in indices:
        fr = scene.frames[i]
        buf = render(state.gaussians, state.deform, scene.cameras[fr.camera], fr.time)
        preds.append(panoptic_map(buf))
        gts.append(fr.mask)
        ps.append(psnr(buf.color, fr.image))
    return float(np.mean(ps)), evaluate(preds, gts, indices)
