"""Compiled per-pixel compositing loops (forward and reverse mode)."""
import numpy as np
from numba import njit


@njit(cache=True)
def build_pixel_lists(mean2d, rx, ry, order, width, height):
    """CSR lists of Gaussian ids per pixel, each list in ``order`` (front to back)."""
    n_pix = width * height
    counts = np.zeros(n_pix + 1, dtype=np.int64)
    boxes = np.empty((len(order), 4), dtype=np.int64)
    for k in range(len(order)):
        g = order[k]
        x0 = max(int(np.ceil(mean2d[g, 0] - rx[g])), 0)
        x1 = min(int(np.floor(mean2d[g, 0] + rx[g])), width - 1)
        y0 = max(int(np.ceil(mean2d[g, 1] - ry[g])), 0)
        y1 = min(int(np.floor(mean2d[g, 1] + ry[g])), height - 1)
        boxes[k, 0], boxes[k, 1], boxes[k, 2], boxes[k, 3] = x0, x1, y0, y1
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                counts[y * width + x + 1] += 1
    for p in range(n_pix):
        counts[p + 1] += counts[p]
    gids = np.empty(counts[n_pix], dtype=np.int64)
    cursor = counts[:n_pix].copy()
    for k in range(len(order)):
        g = order[k]
        x0, x1, y0, y1 = boxes[k, 0], boxes[k, 1], boxes[k, 2], boxes[k, 3]
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                p = y * width + x
                gids[cursor[p]] = g
                cursor[p] += 1
    return counts, gids


@njit(cache=True)
def composite_forward(offsets, gids, mean2d, conic, opacity, color, depth, width, t_min):
    n_pix = len(offsets) - 1
    n = len(opacity)
    # packed per-Gaussian parameters for cache-friendly gathers
    prm = np.empty((n, 10))
    for g in range(n):
        prm[g, 0] = mean2d[g, 0]
        prm[g, 1] = mean2d[g, 1]
        prm[g, 2] = conic[g, 0]
        prm[g, 3] = conic[g, 1]
        prm[g, 4] = conic[g, 2]
        prm[g, 5] = opacity[g]
        prm[g, 6] = color[g, 0]
        prm[g, 7] = color[g, 1]
        prm[g, 8] = color[g, 2]
        prm[g, 9] = depth[g]
    out_c = np.zeros((n_pix, 3))
    out_d = np.zeros(n_pix)
    out_a = np.zeros(n_pix)
    n_used = np.zeros(n_pix, dtype=np.int64)
    pair_a = np.empty(len(gids))
    pair_t = np.empty(len(gids))
    for p in range(n_pix):
        px = p % width
        py = p // width
        T = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        dd = 0.0
        aa = 0.0
        used = 0
        for k in range(offsets[p], offsets[p + 1]):
            if T < t_min:
                break
            g = gids[k]
            dx = px - prm[g, 0]
            dy = py - prm[g, 1]
            power = prm[g, 2] * dx * dx + prm[g, 3] * dx * dy + prm[g, 4] * dy * dy
            a = prm[g, 5] * np.exp(-0.5 * power)
            w = a * T
            c0 += w * prm[g, 6]
            c1 += w * prm[g, 7]
            c2 += w * prm[g, 8]
            dd += w * prm[g, 9]
            aa += w
            pair_a[k] = a
            pair_t[k] = T
            T = T * (1.0 - a)
            used += 1
        out_c[p, 0] = c0
        out_c[p, 1] = c1
        out_c[p, 2] = c2
        out_d[p] = dd
        out_a[p] = aa
        n_used[p] = used
    return out_c, out_d, out_a, n_used, pair_a, pair_t


@njit(cache=True)
def composite_backward(offsets, gids, n_used, pair_a, pair_t, mean2d, conic, opacity, color, depth, width, g_c, g_d, g_a):
    n = len(opacity)
    prm = np.empty((n, 10))
    for g in range(n):
        prm[g, 0] = mean2d[g, 0]
        prm[g, 1] = mean2d[g, 1]
        prm[g, 2] = conic[g, 0]
        prm[g, 3] = conic[g, 1]
        prm[g, 4] = conic[g, 2]
        prm[g, 5] = opacity[g]
        prm[g, 6] = color[g, 0]
        prm[g, 7] = color[g, 1]
        prm[g, 8] = color[g, 2]
        prm[g, 9] = depth[g]
    # packed gradients: mean(2) conic(3) opacity color(3) depth
    grd = np.zeros((n, 10))
    n_pix = len(offsets) - 1
    for p in range(n_pix):
        cnt = n_used[p]
        if cnt == 0:
            continue
        gc0, gc1, gc2 = g_c[p, 0], g_c[p, 1], g_c[p, 2]
        gd = g_d[p]
        ga = g_a[p]
        if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0 and ga == 0.0:
            continue
        px = p % width
        py = p // width
        # suffix (behind) accumulation of upstream-weighted contributions
        behind = 0.0
        for k in range(offsets[p] + cnt - 1, offsets[p] - 1, -1):
            g = gids[k]
            a = pair_a[k]
            T = pair_t[k]
            w = a * T
            own = gc0 * prm[g, 6] + gc1 * prm[g, 7] + gc2 * prm[g, 8] + gd * prm[g, 9] + ga
            d_a = T * own - behind / (1.0 - a)
            behind += w * own
            grd[g, 6] += w * gc0
            grd[g, 7] += w * gc1
            grd[g, 8] += w * gc2
            grd[g, 9] += w * gd
            dx = px - prm[g, 0]
            dy = py - prm[g, 1]
            op = prm[g, 5]
            if op > 0.0:
                grd[g, 5] += d_a * a / op
            else:
                power = prm[g, 2] * dx * dx + prm[g, 3] * dx * dy + prm[g, 4] * dy * dy
                grd[g, 5] += d_a * np.exp(-0.5 * power)
            d_power = -0.5 * a * d_a
            grd[g, 0] -= d_power * (2.0 * prm[g, 2] * dx + prm[g, 3] * dy)
            grd[g, 1] -= d_power * (prm[g, 3] * dx + 2.0 * prm[g, 4] * dy)
            grd[g, 2] += d_power * dx * dx
            grd[g, 3] += d_power * dx * dy
            grd[g, 4] += d_power * dy * dy
    d_mean = grd[:, 0:2].copy()
    d_conic = grd[:, 2:5].copy()
    d_op = grd[:, 5].copy()
    d_color = grd[:, 6:9].copy()
    d_depth = grd[:, 9].copy()
    return d_mean, d_conic, d_op, d_color, d_depth
