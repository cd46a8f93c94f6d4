"""Field-aware splatting: projection, compositing of colour and instance
marginals, per-pixel contribution weights, and the analytic backward pass.

Pixel ``(u, v)`` samples the image plane at coordinates ``(u, v)``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _raster
from .core import (
    GaussianSet,
    ParameterLayout,
    _quat_to_rotmat,
    effective_identities,
    identity_backward,
)
from .deform import DeformationField, DeformedState
from .errors import DataError, NumericError, UsageError

NEAR = 0.01
COV_BLUR = 0.3
MIN_TERM = _raster.MIN_TERM
MIN_TRANSMITTANCE = _raster.MIN_TRANSMITTANCE


def set_threads(n: int | None = None) -> None:
    """Cap the rasterizer's worker count (``CIF_THREADS``; 0 means all)."""
    import numba

    if n is None:
        n = int(os.environ.get("CIF_THREADS", "0") or 0)
    limit = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(limit if n <= 0 else min(n, limit))


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise DataError("camera focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise DataError("camera image size must be positive")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-9:
            raise DataError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, rot, -rot @ eye, width, height)

    @property
    def extrinsics(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)


@dataclass
class Splat2D:
    mean: np.ndarray
    cov: np.ndarray
    depth: float
    index: int


@dataclass
class Projection:
    means2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    visible: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


def project(state: DeformedState, camera: Camera) -> Projection:
    """EWA projection of every deformed Gaussian (vectorised)."""
    means, quats, scales = state.means, state.rotations, state.scales
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(quats)) and np.all(np.isfinite(scales))):
        raise NumericError("non-finite Gaussian geometry passed to projection")
    view = camera.rotation
    cam = means @ view.T + camera.translation
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    front = z > NEAR
    zs = np.where(front, z, 1.0)
    fx, fy = camera.fx, camera.fy
    n = means.shape[0]
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * x / (zs * zs)
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * y / (zs * zs)
    rot = _quat_to_rotmat(quats)
    lmat = rot * scales[:, None, :]
    cov3 = lmat @ np.transpose(lmat, (0, 2, 1))
    mmat = jac @ view
    cov2 = mmat @ cov3 @ np.transpose(mmat, (0, 2, 1))
    cov2[:, 0, 0] += COV_BLUR
    cov2[:, 1, 1] += COV_BLUR
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] * cov2[:, 1, 0]
    conic = np.stack([cov2[:, 1, 1] / det, -cov2[:, 0, 1] / det, cov2[:, 0, 0] / det], axis=1)
    means2d = np.stack([fx * x / zs + camera.cx, fy * y / zs + camera.cy], axis=1)
    half_tr = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1])
    lam_max = half_tr + np.sqrt(np.maximum(half_tr ** 2 - det, 0.0))
    r3 = 3.0 * np.sqrt(lam_max)
    on_image = ((means2d[:, 0] + r3 >= 0) & (means2d[:, 0] - r3 <= camera.width - 1)
                & (means2d[:, 1] + r3 >= 0) & (means2d[:, 1] - r3 <= camera.height - 1))
    visible = front & on_image
    cache = {"cam": cam, "jac": jac, "rot": rot, "lmat": lmat, "cov3": cov3, "mmat": mmat,
             "lam_max": lam_max, "zs": zs}
    return Projection(means2d, cov2, conic, z, visible, cache)


def project_one(mean, rotation, scale, camera: Camera, index: int = 0):
    """Project a single Gaussian; returns ``None`` when it is culled."""
    st = DeformedState(0.0, np.atleast_2d(mean).astype(np.float64),
                       np.atleast_2d(rotation).astype(np.float64),
                       np.atleast_2d(scale).astype(np.float64),
                       np.atleast_2d(rotation).astype(np.float64))
    pr = project(st, camera)
    if not pr.visible[0]:
        return None
    return Splat2D(pr.means2d[0], pr.cov2d[0], float(pr.depth[0]), index)


def _dquat(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    o = np.zeros_like(w)
    dw = np.stack([np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)], -2)
    dx = np.stack([np.stack([o, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)], -2)
    dy = np.stack([np.stack([-2 * y, x, w], -1), np.stack([x, o, z], -1), np.stack([-w, z, -2 * y], -1)], -2)
    dz = np.stack([np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, o], -1)], -2)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1)


def project_backward(state: DeformedState, camera: Camera, proj: Projection, g_mean2d, g_conic):
    """Chain image-space gradients to deformed means, unit quaternions and scales.

    ``g_conic`` holds the full-matrix gradient of the inverse covariance as
    ``(d/dA00, d/dA01, d/dA11)`` with the off-diagonal counted once per entry.
    """
    c = proj.cache
    view = camera.rotation
    fx, fy = camera.fx, camera.fy
    cam, zs = c["cam"], c["zs"]
    x, y = cam[:, 0], cam[:, 1]
    vis = proj.visible
    g_mean2d = np.where(vis[:, None], g_mean2d, 0.0)
    g_conic = np.where(vis[:, None], g_conic, 0.0)

    n = cam.shape[0]
    ginv = np.empty((n, 2, 2))
    ginv[:, 0, 0] = g_conic[:, 0]
    ginv[:, 0, 1] = g_conic[:, 1]
    ginv[:, 1, 0] = g_conic[:, 1]
    ginv[:, 1, 1] = g_conic[:, 2]
    inv = np.empty((n, 2, 2))
    inv[:, 0, 0] = proj.conic[:, 0]
    inv[:, 0, 1] = proj.conic[:, 1]
    inv[:, 1, 0] = proj.conic[:, 1]
    inv[:, 1, 1] = proj.conic[:, 2]
    g_cov2 = -inv @ ginv @ inv

    mmat, cov3 = c["mmat"], c["cov3"]
    g_cov3 = np.transpose(mmat, (0, 2, 1)) @ g_cov2 @ mmat
    g_m = 2.0 * g_cov2 @ mmat @ cov3
    g_jac = g_m @ view.T

    z2 = zs * zs
    z3 = z2 * zs
    g_cam = np.zeros((n, 3))
    g_cam[:, 0] = g_jac[:, 0, 2] * (-fx / z2) + g_mean2d[:, 0] * fx / zs
    g_cam[:, 1] = g_jac[:, 1, 2] * (-fy / z2) + g_mean2d[:, 1] * fy / zs
    g_cam[:, 2] = (g_jac[:, 0, 0] * (-fx / z2) + g_jac[:, 0, 2] * (2.0 * fx * x / z3)
                   + g_jac[:, 1, 1] * (-fy / z2) + g_jac[:, 1, 2] * (2.0 * fy * y / z3)
                   - g_mean2d[:, 0] * fx * x / z2 - g_mean2d[:, 1] * fy * y / z2)
    g_means = g_cam @ view

    rot, lmat = c["rot"], c["lmat"]
    g_l = 2.0 * g_cov3 @ lmat
    g_scales = np.sum(g_l * rot, axis=1)
    g_rot = g_l * state.scales[:, None, :]
    g_quat = np.einsum("nij,nqij->nq", g_rot, _dquat(state.rotations))
    return g_means, g_quat, g_scales


@dataclass
class RenderBuffers:
    """Outputs of one rasterization pass.

    ``marginals`` has shape (H, W, K); channel ``k-1`` is instance ``k``.
    Contribution lists are CSR over pixels in row-major order and are only
    present when requested.
    """

    color: np.ndarray
    marginals: np.ndarray
    residual: np.ndarray
    residual_color: np.ndarray
    order: np.ndarray
    n_contrib: np.ndarray
    contrib_offsets: np.ndarray | None = None
    contrib_index: np.ndarray | None = None
    contrib_weight: np.ndarray | None = None
    cache: dict | None = field(default=None, repr=False)

    def contributions_at(self, v: int, u: int):
        if self.contrib_offsets is None:
            raise UsageError("render was called without contributions=True")
        p = v * self.color.shape[1] + u
        s, e = self.contrib_offsets[p], self.contrib_offsets[p + 1]
        return self.contrib_index[s:e], self.contrib_weight[s:e]


def _bin_radius(lam_max, alpha, occ):
    # beyond this radius both alpha*P and occupancy*P are below MIN_TERM
    peak = np.maximum(alpha, occ)
    ratio = np.log(np.maximum(peak, MIN_TERM) / MIN_TERM)
    return np.sqrt(2.0 * ratio * lam_max) + 1.0, peak >= MIN_TERM


def _prepare(gaussians: GaussianSet, deform: DeformationField, camera: Camera, t: float):
    state = deform.forward(gaussians, t)
    proj = project(state, camera)
    alpha = gaussians.opacity
    occ = gaussians.occupancy
    ident = effective_identities(gaussians)
    colors = np.ascontiguousarray(gaussians.colors)
    radius, reachable = _bin_radius(proj.cache["lam_max"], alpha, occ)
    live = np.flatnonzero(proj.visible & reachable)
    order = live[np.lexsort((live, proj.depth[live]))]
    return state, proj, alpha, occ, ident, colors, radius, order


def render(gaussians: GaussianSet, deform: DeformationField, camera: Camera, t: float,
           contributions: bool = False) -> RenderBuffers:
    """Composite colour and instance marginals for one view and time."""
    if gaussians.n and gaussians.k == 0:
        raise UsageError("GaussianSet has no instance classes")
    state, proj, alpha, occ, ident, colors, radius, order = _prepare(gaussians, deform, camera, t)
    w, h, kk = camera.width, camera.height, gaussians.k
    tile = _raster.TILE
    offsets, items = _raster.bin_tiles(order.astype(np.int64), proj.means2d, radius, w, h, tile)
    color = np.zeros((h, w, 3))
    marg = np.zeros((h, w, kk))
    resid = np.zeros((h, w))
    tres = np.zeros((h, w))
    count = np.zeros((h, w), dtype=np.int64)
    wsum = np.zeros((h, w))
    _raster.forward(offsets, items, proj.means2d, proj.conic, alpha, occ, colors, ident,
                    w, h, tile, color, marg, resid, tres, count, wsum)
    buf = RenderBuffers(color, marg, resid, tres, order, count)
    if contributions:
        pix_off = np.zeros(w * h + 1, dtype=np.int64)
        np.cumsum(count.ravel(), out=pix_off[1:])
        idx = np.empty(pix_off[-1], dtype=np.int64)
        wt = np.empty(pix_off[-1])
        _raster.contributions(offsets, items, proj.means2d, proj.conic, alpha, w, h, tile,
                              wsum, pix_off, idx, wt)
        buf.contrib_offsets, buf.contrib_index, buf.contrib_weight = pix_off, idx, wt
    buf.cache = {"state": state, "proj": proj, "alpha": alpha, "occ": occ, "ident": ident,
                 "colors": colors, "offsets": offsets, "items": items, "camera": camera}
    return buf


def render_backward(gaussians: GaussianSet, deform: DeformationField, camera: Camera, t: float,
                    grad_color, grad_marginals, grad_residual=None, *, buffers: RenderBuffers) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. every packed parameter.

    ``grad_color`` (H, W, 3), ``grad_marginals`` (H, W, K) and ``grad_residual``
    (H, W) are the upstream derivatives. The result follows
    :class:`~cifield.core.ParameterLayout` order.
    """
    if buffers is None or buffers.cache is None:
        raise UsageError("render_backward needs the buffers of a cached forward pass")
    c = buffers.cache
    w, h, kk, n = camera.width, camera.height, gaussians.k, gaussians.n
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64).reshape(h, w, 3)
    grad_marginals = np.ascontiguousarray(grad_marginals, dtype=np.float64).reshape(h, w, kk)
    if grad_residual is None:
        grad_residual = np.zeros((h, w))
    grad_residual = np.ascontiguousarray(grad_residual, dtype=np.float64).reshape(h, w)

    offsets = c["offsets"]
    ntiles = offsets.shape[0] - 1
    g_mean = np.zeros((ntiles, n, 2))
    g_conic = np.zeros((ntiles, n, 3))
    g_alpha = np.zeros((ntiles, n))
    g_occ = np.zeros((ntiles, n))
    g_col = np.zeros((ntiles, n, 3))
    g_ident = np.zeros((ntiles, n, kk))
    proj = c["proj"]
    _raster.backward(offsets, c["items"], proj.means2d, proj.conic, c["alpha"], c["occ"],
                     c["colors"], c["ident"], w, h, _raster.TILE,
                     grad_color, grad_marginals, grad_residual,
                     g_mean, g_conic, g_alpha, g_occ, g_col, g_ident)
    g_mean = g_mean.sum(axis=0)
    g_conic = g_conic.sum(axis=0)
    g_alpha = g_alpha.sum(axis=0)
    g_occ = g_occ.sum(axis=0)
    g_col = g_col.sum(axis=0)
    g_ident = g_ident.sum(axis=0)

    state = c["state"]
    g_means, g_quat, g_scales = project_backward(state, camera, proj, g_mean, g_conic)
    g_pos, g_rot, g_logs, g_deform = deform.backward(state, g_means, g_quat, g_scales)
    g_base, g_calib = identity_backward(gaussians, g_ident)
    alpha, occ = c["alpha"], c["occ"]

    layout = ParameterLayout.of(gaussians, deform)
    sl = layout.slices
    grad = np.zeros(layout.size)
    grad[sl["positions"]] = g_pos.ravel()
    grad[sl["rotations"]] = g_rot.ravel()
    grad[sl["log_scales"]] = g_logs.ravel()
    grad[sl["colors"]] = g_col.ravel()
    grad[sl["opacity_logits"]] = g_alpha * alpha * (1.0 - alpha)
    grad[sl["occupancy_logits"]] = g_occ * occ * (1.0 - occ)
    grad[sl["base_identity"]] = g_base.ravel()
    grad[sl["calib_log"]] = g_calib.ravel()
    grad[sl["deform"]] = g_deform
    return grad


def render_reference(gaussians: GaussianSet, deform: DeformationField, camera: Camera, t: float) -> RenderBuffers:
    """Untiled oracle: every visible splat is tested at every pixel.

    Vectorised over pixels only; splats are visited one at a time in the same
    depth order with the same skip rules as :func:`render`.
    """
    state = deform.forward(gaussians, t)
    proj = project(state, camera)
    alpha, occ = gaussians.opacity, gaussians.occupancy
    ident = effective_identities(gaussians)
    vis = np.flatnonzero(proj.visible)
    order = vis[np.lexsort((vis, proj.depth[vis]))]
    h, w, kk = camera.height, camera.width, gaussians.k
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    tr = np.ones((h, w))
    ti = np.ones((h, w))
    color = np.zeros((h, w, 3))
    marg = np.zeros((h, w, kk))
    count = np.zeros((h, w), dtype=np.int64)
    act_t = np.ones((h, w), dtype=bool)
    act_i = np.ones((h, w), dtype=bool)
    for g in order:
        if not (act_t.any() or act_i.any()):
            break
        dx = px - proj.means2d[g, 0]
        dy = py - proj.means2d[g, 1]
        cn = proj.conic[g]
        power = -0.5 * (cn[0] * dx * dx + 2.0 * cn[1] * dx * dy + cn[2] * dy * dy)
        p = np.exp(power)
        a = alpha[g] * p
        inc = act_t & (a >= MIN_TERM)
        wt = tr[inc] * a[inc]
        for ch in range(3):
            color[..., ch][inc] += wt * gaussians.colors[g, ch]
        count[inc] += 1
        tr[inc] = tr[inc] * (1.0 - a[inc])
        act_t &= ~(tr < MIN_TRANSMITTANCE)
        b = occ[g] * p
        inc = act_i & (b >= MIN_TERM)
        wi = ti[inc] * b[inc]
        for k in range(kk):
            marg[..., k][inc] += wi * ident[g, k]
        ti[inc] = ti[inc] * (1.0 - b[inc])
        act_i &= ~(ti < MIN_TRANSMITTANCE)
    return RenderBuffers(color, marg, ti, tr, order, count)


def composite_pixel(alpha_p, occ_p, colors, ident):
    """Composite one pixel from depth-ordered per-splat values (alpha*P inputs).

    Small helper for hand-checked cases; applies the same skip rules.
    """
    tr, ti = 1.0, 1.0
    c = np.zeros(3)
    m = np.zeros(np.asarray(ident).shape[1])
    for a, b, col, p in zip(alpha_p, occ_p, colors, ident):
        if tr >= MIN_TRANSMITTANCE and a >= MIN_TERM:
            c += tr * a * np.asarray(col)
            tr *= 1.0 - a
        if ti >= MIN_TRANSMITTANCE and b >= MIN_TERM:
            m += ti * b * np.asarray(p)
            ti *= 1.0 - b
    return c, m, ti


def psnr(img, ref) -> float:
    mse = float(np.mean((np.asarray(img) - np.asarray(ref)) ** 2))
    return math.inf if mse == 0 else -10.0 * math.log10(mse)
