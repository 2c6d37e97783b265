"""Hot numeric kernels with numba and pure-numpy twin implementations.

Each kernel exists twice: ``*_nb`` is a loop version compiled with
``numba.njit``; ``*_np`` is a vectorized numpy fallback.  The public names
(``dt_message_grid``, ``correlate_filter``, ...) are bound to one variant at
import time, controlled by the ``CROSSFACE_NO_NUMBA`` environment flag (see
:mod:`crossface._accel`).  Both variants compute identical results and the
test suite cross-checks them.

Conventions shared by the distance-transform kernels: displacements are
``d = parent - child`` per axis, the spring score contribution is
``b1*d + b2*d**2`` with ``b2 < 0``, and argmax ties resolve to the smallest
child index along each axis.
"""

import numpy as np

from ._accel import USE_NUMBA, njit


# ---------------------------------------------------------------------------
# 1-D generalized distance transform (lower-envelope algorithm)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _dt_1d_nb(f, b1, b2, n_out, out, arg):
    """max_q f[q] + b1*(p-q) + b2*(p-q)**2 for p in [0, n_out)."""
    n_src = f.shape[0]
    # Fold the linear term into shifted parabola centers: the score equals
    # b2*(p - (q - h))**2 + f[q] + c0 with h = b1/(2*b2), c0 = -b1**2/(4*b2).
    h = b1 / (2.0 * b2)
    c0 = -b1 * b1 / (4.0 * b2)
    # Work in min form with positive curvature a = -b2 and g = -f.
    a = -b2
    v = np.empty(n_src, dtype=np.int64)
    z = np.empty(n_src + 1, dtype=np.float64)
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    k = 0
    for q in range(1, n_src):
        xq = q - h
        gq = -f[q]
        while True:
            r = v[k]
            xr = r - h
            s = ((gq + a * xq * xq) - (-f[r] + a * xr * xr)) / (2.0 * a * (xq - xr))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    j = 0
    for p in range(n_out):
        while z[j + 1] < p:
            j += 1
        q = v[j]
        d = p - q
        out[p] = f[q] + b1 * d + b2 * d * d
        arg[p] = q
    # c0 folded back implicitly: out evaluates the original quadratic.
    return c0


@njit(cache=True)
def dt_message_grid_nb(score, bx1, bx2, by1, by2, hp, wp):
    """2-D spring message via separable 1-D transforms.

    Returns ``(msg, argy, argx)`` where ``msg[py, px]`` is the best child
    score plus deformation for a parent at ``(py, px)`` and ``argy/argx``
    give the maximizing child cell.
    """
    hc, wc = score.shape
    tmp = np.empty((hc, wp), dtype=np.float64)
    ax_row = np.empty((hc, wp), dtype=np.int64)
    row_out = np.empty(wp, dtype=np.float64)
    row_arg = np.empty(wp, dtype=np.int64)
    for y in range(hc):
        _dt_1d_nb(score[y], bx1, bx2, wp, row_out, row_arg)
        for x in range(wp):
            tmp[y, x] = row_out[x]
            ax_row[y, x] = row_arg[x]
    msg = np.empty((hp, wp), dtype=np.float64)
    argy = np.empty((hp, wp), dtype=np.int64)
    argx = np.empty((hp, wp), dtype=np.int64)
    col_out = np.empty(hp, dtype=np.float64)
    col_arg = np.empty(hp, dtype=np.int64)
    col = np.empty(hc, dtype=np.float64)
    for x in range(wp):
        for y in range(hc):
            col[y] = tmp[y, x]
        _dt_1d_nb(col, by1, by2, hp, col_out, col_arg)
        for y in range(hp):
            msg[y, x] = col_out[y]
            qy = col_arg[y]
            argy[y, x] = qy
            argx[y, x] = ax_row[qy, x]
    return msg, argy, argx


def dt_message_grid_np(score, bx1, bx2, by1, by2, hp, wp):
    """Broadcast (quadratic-time) equivalent of :func:`dt_message_grid_nb`."""
    score = np.asarray(score, dtype=np.float64)
    hc, wc = score.shape
    dx = np.arange(wp)[:, None] - np.arange(wc)[None, :]
    defx = bx1 * dx + bx2 * dx * dx
    # (hc, wp, wc) -> best child column per (row, parent column)
    sx = score[:, None, :] + defx[None, :, :]
    ax_row = np.argmax(sx, axis=2)
    tmp = np.take_along_axis(sx, ax_row[:, :, None], axis=2)[:, :, 0]
    dy = np.arange(hp)[:, None] - np.arange(hc)[None, :]
    defy = by1 * dy + by2 * dy * dy
    # (hp, hc, wp) -> best child row per (parent row, parent column)
    sy = tmp[None, :, :] + defy[:, :, None]
    argy = np.argmax(sy, axis=1)
    msg = np.take_along_axis(sy, argy[:, None, :], axis=1)[:, 0, :]
    argx = np.take_along_axis(ax_row, argy, axis=0)
    return msg, argy.astype(np.int64), argx.astype(np.int64)


# ---------------------------------------------------------------------------
# Part filter cross-correlation over a cell-feature map
# ---------------------------------------------------------------------------

@njit(cache=True)
def correlate_filter_nb(fmap, filt):
    """Valid-mode cross-correlation of a (h, w, d) filter over (H, W, d)."""
    H, W, D = fmap.shape
    h, w, _ = filt.shape
    ho = H - h + 1
    wo = W - w + 1
    out = np.zeros((ho, wo), dtype=np.float64)
    for y in range(ho):
        for x in range(wo):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    for d in range(D):
                        acc += fmap[y + i, x + j, d] * filt[i, j, d]
            out[y, x] = acc
    return out


def correlate_filter_np(fmap, filt):
    fmap = np.asarray(fmap, dtype=np.float64)
    filt = np.asarray(filt, dtype=np.float64)
    h, w, d = filt.shape
    win = np.lib.stride_tricks.sliding_window_view(fmap, (h, w, d))[:, :, 0]
    return np.einsum("yxijd,ijd->yx", win, filt, optimize=True)


# ---------------------------------------------------------------------------
# HOG cell accumulation with linear orientation interpolation
# ---------------------------------------------------------------------------

@njit(cache=True)
def hog_accumulate_nb(mag, obin, cells_y, cells_x, cell, nbins):
    hist = np.zeros((cells_y, cells_x, nbins), dtype=np.float64)
    for y in range(cells_y * cell):
        cy = y // cell
        for x in range(cells_x * cell):
            cx = x // cell
            o = obin[y, x]
            b0 = int(np.floor(o))
            w1 = o - b0
            b0 = b0 % nbins
            b1 = (b0 + 1) % nbins
            m = mag[y, x]
            hist[cy, cx, b0] += (1.0 - w1) * m
            hist[cy, cx, b1] += w1 * m
    return hist


def hog_accumulate_np(mag, obin, cells_y, cells_x, cell, nbins):
    hy = cells_y * cell
    hx = cells_x * cell
    mag = np.asarray(mag[:hy, :hx], dtype=np.float64)
    obin = np.asarray(obin[:hy, :hx], dtype=np.float64)
    cy = (np.arange(hy) // cell)[:, None]
    cx = (np.arange(hx) // cell)[None, :]
    b0 = np.floor(obin).astype(np.int64)
    w1 = obin - b0
    b0 = np.mod(b0, nbins)
    b1 = np.mod(b0 + 1, nbins)
    base = (cy * cells_x + cx) * nbins
    hist = np.zeros(cells_y * cells_x * nbins, dtype=np.float64)
    np.add.at(hist, (base + b0).ravel(), ((1.0 - w1) * mag).ravel())
    np.add.at(hist, (base + b1).ravel(), (w1 * mag).ravel())
    return hist.reshape(cells_y, cells_x, nbins)


# ---------------------------------------------------------------------------
# Local binary pattern codes (8 neighbors, >= comparison)
# ---------------------------------------------------------------------------

_LBP_OFFS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


@njit(cache=True)
def lbp_codes_nb(img):
    H, W = img.shape
    out = np.zeros((H - 2, W - 2), dtype=np.int64)
    for y in range(1, H - 1):
        for x in range(1, W - 1):
            c = img[y, x]
            code = 0
            if img[y - 1, x - 1] >= c:
                code |= 1
            if img[y - 1, x] >= c:
                code |= 2
            if img[y - 1, x + 1] >= c:
                code |= 4
            if img[y, x + 1] >= c:
                code |= 8
            if img[y + 1, x + 1] >= c:
                code |= 16
            if img[y + 1, x] >= c:
                code |= 32
            if img[y + 1, x - 1] >= c:
                code |= 64
            if img[y, x - 1] >= c:
                code |= 128
            out[y - 1, x - 1] = code
    return out


def lbp_codes_np(img):
    img = np.asarray(img, dtype=np.float64)
    c = img[1:-1, 1:-1]
    code = np.zeros(c.shape, dtype=np.int64)
    for bit, (dy, dx) in enumerate(_LBP_OFFS):
        nb = img[1 + dy : img.shape[0] - 1 + dy, 1 + dx : img.shape[1] - 1 + dx]
        code |= (nb >= c).astype(np.int64) << bit
    return code


# ---------------------------------------------------------------------------
# Triangle-mesh rasterization with z-buffer (orthographic)
# ---------------------------------------------------------------------------

@njit(cache=True)
def raster_mesh_nb(xs, ys, zs, shade, tris, keep, H, W):
    """Rasterize shaded triangles; smaller z wins (closer to camera).

    Returns (image, depth, cover) with ``depth == +inf`` where uncovered.
    """
    img = np.zeros((H, W), dtype=np.float64)
    dep = np.full((H, W), np.inf, dtype=np.float64)
    cov = np.zeros((H, W), dtype=np.bool_)
    for t in range(tris.shape[0]):
        if not keep[t]:
            continue
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        x0, y0 = xs[i0], ys[i0]
        x1, y1 = xs[i1], ys[i1]
        x2, y2 = xs[i2], ys[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        xmin = int(np.ceil(min(x0, min(x1, x2))))
        xmax = int(np.floor(max(x0, max(x1, x2))))
        ymin = int(np.ceil(min(y0, min(y1, y2))))
        ymax = int(np.floor(max(y0, max(y1, y2))))
        if xmin < 0:
            xmin = 0
        if ymin < 0:
            ymin = 0
        if xmax > W - 1:
            xmax = W - 1
        if ymax > H - 1:
            ymax = H - 1
        inv = 1.0 / area
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) * inv
                w2 = 1.0 - w0 - w1
                if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                    continue
                z = w0 * zs[i0] + w1 * zs[i1] + w2 * zs[i2]
                if z < dep[py, px]:
                    dep[py, px] = z
                    img[py, px] = w0 * shade[i0] + w1 * shade[i1] + w2 * shade[i2]
                    cov[py, px] = True
    return img, dep, cov


def raster_mesh_np(xs, ys, zs, shade, tris, keep, H, W):
    img = np.zeros((H, W), dtype=np.float64)
    dep = np.full((H, W), np.inf, dtype=np.float64)
    cov = np.zeros((H, W), dtype=bool)
    for t in np.nonzero(keep)[0]:
        i0, i1, i2 = tris[t]
        x0, y0, x1, y1, x2, y2 = xs[i0], ys[i0], xs[i1], ys[i1], xs[i2], ys[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        xmax = min(int(np.floor(max(x0, x1, x2))), W - 1)
        ymin = max(int(np.ceil(min(y0, y1, y2))), 0)
        ymax = min(int(np.floor(max(y0, y1, y2))), H - 1)
        if xmin > xmax or ymin > ymax:
            continue
        px, py = np.meshgrid(np.arange(xmin, xmax + 1), np.arange(ymin, ymax + 1))
        inv = 1.0 / area
        w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv
        w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) * inv
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        z = w0 * zs[i0] + w1 * zs[i1] + w2 * zs[i2]
        val = w0 * shade[i0] + w1 * shade[i1] + w2 * shade[i2]
        sub = dep[ymin : ymax + 1, xmin : xmax + 1]
        better = inside & (z < sub)
        sub[better] = z[better]
        img[ymin : ymax + 1, xmin : xmax + 1][better] = val[better]
        cov[ymin : ymax + 1, xmin : xmax + 1][better] = True
    return img, dep, cov


# ---------------------------------------------------------------------------
# Active-variant bindings
# ---------------------------------------------------------------------------

if USE_NUMBA:
    dt_message_grid = dt_message_grid_nb
    correlate_filter = correlate_filter_nb
    hog_accumulate = hog_accumulate_nb
    lbp_codes = lbp_codes_nb
    raster_mesh = raster_mesh_nb
else:
    dt_message_grid = dt_message_grid_np
    correlate_filter = correlate_filter_np
    hog_accumulate = hog_accumulate_np
    lbp_codes = lbp_codes_np
    raster_mesh = raster_mesh_np
