"""Tile rasterization kernels (numba).

Every kernel walks each pixel's depth-sorted splat list front to back with
the shared skip rules: a term is dropped when alpha*P (or occupancy*P on the
instance path) is below ``MIN_TERM``, and a path stops once its
transmittance falls below ``MIN_TRANSMITTANCE``. Tiles are independent, so
gradient kernels write into per-tile buffers that the caller reduces in tile
order.
"""

import math

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old for numba; skip the warning it emits
numba.config.THREADING_LAYER = "workqueue"

MIN_TERM = 1e-4
MIN_TRANSMITTANCE = 1e-4
TILE = 16


@njit(cache=True)
def bin_tiles(order, mean2d, radius, width, height, tile):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    counts = np.zeros(ntx * nty, dtype=np.int64)
    boxes = np.empty((order.shape[0], 4), dtype=np.int64)
    for j in range(order.shape[0]):
        g = order[j]
        r = radius[g]
        tx0 = max(0, int(math.floor((mean2d[g, 0] - r) / tile)))
        tx1 = min(ntx - 1, int(math.floor((mean2d[g, 0] + r) / tile)))
        ty0 = max(0, int(math.floor((mean2d[g, 1] - r) / tile)))
        ty1 = min(nty - 1, int(math.floor((mean2d[g, 1] + r) / tile)))
        boxes[j, 0] = tx0
        boxes[j, 1] = tx1
        boxes[j, 2] = ty0
        boxes[j, 3] = ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * ntx + tx] += 1
    offsets = np.zeros(ntx * nty + 1, dtype=np.int64)
    for i in range(ntx * nty):
        offsets[i + 1] = offsets[i] + counts[i]
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], dtype=np.int64)
    for j in range(order.shape[0]):
        for ty in range(boxes[j, 2], boxes[j, 3] + 1):
            for tx in range(boxes[j, 0], boxes[j, 1] + 1):
                t = ty * ntx + tx
                items[fill[t]] = order[j]
                fill[t] += 1
    return offsets, items


@njit(parallel=True, cache=True)
def forward(offsets, items, mean2d, conic, alpha, occ, color, ident, width, height, tile,
            out_color, out_marg, out_resid, out_tres, out_count, out_wsum):
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    kk = ident.shape[1]
    for t in prange(ntiles):
        x0 = (t % ntx) * tile
        y0 = (t // ntx) * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                tr = 1.0
                ti = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                wsum = 0.0
                count = 0
                act_t = True
                act_i = True
                for j in range(offsets[t], offsets[t + 1]):
                    g = items[j]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                    + conic[g, 2] * dy * dy)
                    p = math.exp(power)
                    if act_t:
                        a = alpha[g] * p
                        if a >= MIN_TERM:
                            wt = tr * a
                            c0 += wt * color[g, 0]
                            c1 += wt * color[g, 1]
                            c2 += wt * color[g, 2]
                            wsum += wt
                            count += 1
                            tr = tr * (1.0 - a)
                            if tr < MIN_TRANSMITTANCE:
                                act_t = False
                    if act_i:
                        b = occ[g] * p
                        if b >= MIN_TERM:
                            wi = ti * b
                            for k in range(kk):
                                out_marg[py, px, k] += wi * ident[g, k]
                            ti = ti * (1.0 - b)
                            if ti < MIN_TRANSMITTANCE:
                                act_i = False
                    if not act_t and not act_i:
                        break
                out_color[py, px, 0] = c0
                out_color[py, px, 1] = c1
                out_color[py, px, 2] = c2
                out_resid[py, px] = ti
                out_tres[py, px] = tr
                out_count[py, px] = count
                out_wsum[py, px] = wsum


@njit(parallel=True, cache=True)
def contributions(offsets, items, mean2d, conic, alpha, width, height, tile,
                  wsum, pix_offsets, out_index, out_weight):
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    for t in prange(ntiles):
        x0 = (t % ntx) * tile
        y0 = (t // ntx) * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                pos = pix_offsets[py * width + px]
                tr = 1.0
                for j in range(offsets[t], offsets[t + 1]):
                    g = items[j]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                    + conic[g, 2] * dy * dy)
                    a = alpha[g] * math.exp(power)
                    if a >= MIN_TERM:
                        out_index[pos] = g
                        out_weight[pos] = tr * a / wsum[py, px]
                        pos += 1
                        tr = tr * (1.0 - a)
                        if tr < MIN_TRANSMITTANCE:
                            break


@njit(parallel=True, cache=True)
def backward(offsets, items, mean2d, conic, alpha, occ, color, ident, width, height, tile,
             grad_color, grad_marg, grad_resid,
             g_mean, g_conic, g_alpha, g_occ, g_col, g_ident):
    ntx = (width + tile - 1) // tile
    ntiles = offsets.shape[0] - 1
    kk = ident.shape[1]
    for t in prange(ntiles):
        x0 = (t % ntx) * tile
        y0 = (t // ntx) * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        cap = offsets[t + 1] - offsets[t]
        s_g = np.empty(cap, dtype=np.int64)
        s_p = np.empty(cap)
        s_dx = np.empty(cap)
        s_dy = np.empty(cap)
        s_tr = np.empty(cap)
        s_ti = np.empty(cap)
        s_inc_t = np.empty(cap, dtype=np.bool_)
        s_inc_i = np.empty(cap, dtype=np.bool_)
        for py in range(y0, y1):
            for px in range(x0, x1):
                n = 0
                tr = 1.0
                ti = 1.0
                act_t = True
                act_i = True
                for j in range(offsets[t], offsets[t + 1]):
                    g = items[j]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                    + conic[g, 2] * dy * dy)
                    p = math.exp(power)
                    inc_t = False
                    inc_i = False
                    tr_here = tr
                    ti_here = ti
                    if act_t:
                        a = alpha[g] * p
                        if a >= MIN_TERM:
                            inc_t = True
                            tr = tr * (1.0 - a)
                            if tr < MIN_TRANSMITTANCE:
                                act_t = False
                    if act_i:
                        b = occ[g] * p
                        if b >= MIN_TERM:
                            inc_i = True
                            ti = ti * (1.0 - b)
                            if ti < MIN_TRANSMITTANCE:
                                act_i = False
                    if inc_t or inc_i:
                        s_g[n] = g
                        s_p[n] = p
                        s_dx[n] = dx
                        s_dy[n] = dy
                        s_tr[n] = tr_here
                        s_ti[n] = ti_here
                        s_inc_t[n] = inc_t
                        s_inc_i[n] = inc_i
                        n += 1
                    if not act_t and not act_i:
                        break

                gc0 = grad_color[py, px, 0]
                gc1 = grad_color[py, px, 1]
                gc2 = grad_color[py, px, 2]
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                acc_f = grad_resid[py, px]
                for s in range(n - 1, -1, -1):
                    g = s_g[s]
                    p = s_p[s]
                    gp = 0.0
                    if s_inc_t[s]:
                        a = alpha[g] * p
                        trs = s_tr[s]
                        dot_c = gc0 * color[g, 0] + gc1 * color[g, 1] + gc2 * color[g, 2]
                        dot_acc = gc0 * acc0 + gc1 * acc1 + gc2 * acc2
                        ga = trs * (dot_c - dot_acc)
                        w = trs * a
                        g_col[t, g, 0] += w * gc0
                        g_col[t, g, 1] += w * gc1
                        g_col[t, g, 2] += w * gc2
                        g_alpha[t, g] += ga * p
                        gp += ga * alpha[g]
                        acc0 = a * color[g, 0] + (1.0 - a) * acc0
                        acc1 = a * color[g, 1] + (1.0 - a) * acc1
                        acc2 = a * color[g, 2] + (1.0 - a) * acc2
                    if s_inc_i[s]:
                        b = occ[g] * p
                        tis = s_ti[s]
                        e = 0.0
                        for k in range(kk):
                            e += grad_marg[py, px, k] * ident[g, k]
                        gb = tis * (e - acc_f)
                        wi = tis * b
                        for k in range(kk):
                            g_ident[t, g, k] += wi * grad_marg[py, px, k]
                        g_occ[t, g] += gb * p
                        gp += gb * occ[g]
                        acc_f = b * e + (1.0 - b) * acc_f
                    gpow = gp * p
                    dx = s_dx[s]
                    dy = s_dy[s]
                    g_conic[t, g, 0] += -0.5 * gpow * dx * dx
                    g_conic[t, g, 1] += -0.5 * gpow * dx * dy
                    g_conic[t, g, 2] += -0.5 * gpow * dy * dy
                    g_mean[t, g, 0] += gpow * (conic[g, 0] * dx + conic[g, 1] * dy)
                    g_mean[t, g, 1] += gpow * (conic[g, 1] * dx + conic[g, 2] * dy)
