"""Compiled inner loops (numba). Every kernel is serial and deterministic."""

import math

import numpy as np
from numba import njit


# ---------------------------------------------------------------------------
# analytic swept-tube silhouette


@njit(cache=True)
def _line_hits_frustum(s, d, p0, p1, r0, r1):
    ax = p1 - p0
    length = math.sqrt(ax[0] * ax[0] + ax[1] * ax[1] + ax[2] * ax[2])
    a = ax / length
    k = (r1 - r0) / length
    w0 = s - p0
    s0 = w0[0] * a[0] + w0[1] * a[1] + w0[2] * a[2]
    da = d[0] * a[0] + d[1] * a[1] + d[2] * a[2]
    wd = w0[0] * d[0] + w0[1] * d[1] + w0[2] * d[2]
    ww = w0[0] * w0[0] + w0[1] * w0[1] + w0[2] * w0[2]
    A = 1.0 - da * da - k * k * da * da
    B = 2.0 * (wd - s0 * da - k * da * (r0 + k * s0))
    C = ww - s0 * s0 - (r0 + k * s0) ** 2
    if abs(da) < 1e-14:
        if s0 < 0.0 or s0 > length:
            return False
        if A <= 0.0:
            return True
        tv = -B / (2.0 * A)
        return A * tv * tv + B * tv + C <= 0.0
    t0 = -s0 / da
    t1 = (length - s0) / da
    if t0 > t1:
        t0, t1 = t1, t0
    if A * t0 * t0 + B * t0 + C <= 0.0 or A * t1 * t1 + B * t1 + C <= 0.0:
        return True
    if A > 0.0:
        tv = -B / (2.0 * A)
        if t0 < tv < t1 and A * tv * tv + B * tv + C <= 0.0:
            return True
    return False


@njit(cache=True)
def _halfline(s, d, p, nrm, lo, hi):
    # restrict [lo, hi] to {t : (s + t d - p) . nrm >= 0}
    a = (s[0] - p[0]) * nrm[0] + (s[1] - p[1]) * nrm[1] + (s[2] - p[2]) * nrm[2]
    b = d[0] * nrm[0] + d[1] * nrm[1] + d[2] * nrm[2]
    if abs(b) < 1e-14:
        return (lo, hi) if a >= 0.0 else (1.0, 0.0)
    t = -a / b
    if b > 0.0:
        return max(lo, t), hi
    return lo, min(hi, t)


@njit(cache=True)
def _line_hits_sphere(s, d, c, r, p_first, n_first, p_last, n_last):
    """Ray-sphere test clipped to the slab between the two flat chain ends."""
    w = c - s
    t = w[0] * d[0] + w[1] * d[1] + w[2] * d[2]
    q = w - t * d
    q2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2]
    if q2 > r * r:
        return False
    h = math.sqrt(r * r - q2)
    lo, hi = _halfline(s, d, p_first, n_first, t - h, t + h)
    lo, hi = _halfline(s, d, p_last, -n_last, lo, hi)
    return lo <= hi


@njit(cache=True)
def _proj(m, p):
    x = m[0, 0] * p[0] + m[0, 1] * p[1] + m[0, 2] * p[2] + m[0, 3]
    y = m[1, 0] * p[0] + m[1, 1] * p[1] + m[1, 2] * p[2] + m[1, 3]
    w = m[2, 0] * p[0] + m[2, 1] * p[1] + m[2, 2] * p[2] + m[2, 3]
    return x / w, y / w


@njit(cache=True)
def _bbox(m, c, r, width, height):
    umin, umax, vmin, vmax = 1e30, -1e30, 1e30, -1e30
    corner = np.empty(3)
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                corner[0] = c[0] + sx * r
                corner[1] = c[1] + sy * r
                corner[2] = c[2] + sz * r
                u, v = _proj(m, corner)
                umin = min(umin, u)
                umax = max(umax, u)
                vmin = min(vmin, v)
                vmax = max(vmax, v)
    u0 = max(int(math.floor(umin)) - 1, 0)
    u1 = min(int(math.ceil(umax)) + 1, width - 1)
    v0 = max(int(math.floor(vmin)) - 1, 0)
    v1 = min(int(math.ceil(vmax)) + 1, height - 1)
    return u0, u1, v0, v1


@njit(cache=True)
def tube_silhouette(m, minv, source, points, radii, width, height):
    """Pixel-center occupancy of a chain of truncated cones joined by spheres.

    The chain ends are flat (cut perpendicular to the first/last segment).
    """
    out = np.zeros((height, width), dtype=np.bool_)
    n = points.shape[0]
    d = np.empty(3)
    n_first = points[1] - points[0]
    n_first /= math.sqrt((n_first ** 2).sum())
    n_last = points[n - 1] - points[n - 2]
    n_last /= math.sqrt((n_last ** 2).sum())
    for kind in range(2):
        for i in range(n - 1 if kind == 0 else n - 2):
            if kind == 0:
                c = 0.5 * (points[i] + points[i + 1])
                half = 0.5 * math.sqrt(((points[i + 1] - points[i]) ** 2).sum())
                rb = half + max(radii[i], radii[i + 1])
            else:
                c = points[i + 1]
                rb = radii[i + 1]
            u0, u1, v0, v1 = _bbox(m, c, rb, width, height)
            for v in range(v0, v1 + 1):
                for u in range(u0, u1 + 1):
                    if out[v, u]:
                        continue
                    for k in range(3):
                        d[k] = minv[k, 0] * u + minv[k, 1] * v + minv[k, 2]
                    nd = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
                    dd = d / nd
                    if kind == 0:
                        hit = _line_hits_frustum(source, dd, points[i], points[i + 1], radii[i], radii[i + 1])
                    else:
                        hit = _line_hits_sphere(source, dd, points[i + 1], radii[i + 1],
                                                points[0], n_first, points[n - 1], n_last)
                    if hit:
                        out[v, u] = True
    return out


# ---------------------------------------------------------------------------
# hard triangle coverage


@njit(cache=True)
def triangle_coverage(uv, tris, width, height):
    """Pixels whose center lies inside (or on the edge of) any 2D triangle."""
    out = np.zeros((height, width), dtype=np.bool_)
    for t in range(tris.shape[0]):
        ax, ay = uv[tris[t, 0], 0], uv[tris[t, 0], 1]
        bx, by = uv[tris[t, 1], 0], uv[tris[t, 1], 1]
        cx, cy = uv[tris[t, 2], 0], uv[tris[t, 2], 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        u0 = max(int(math.ceil(min(ax, bx, cx))), 0)
        u1 = min(int(math.floor(max(ax, bx, cx))), width - 1)
        v0 = max(int(math.ceil(min(ay, by, cy))), 0)
        v1 = min(int(math.floor(max(ay, by, cy))), height - 1)
        for v in range(v0, v1 + 1):
            for u in range(u0, u1 + 1):
                w0 = (bx - u) * (cy - v) - (by - v) * (cx - u)
                w1 = (cx - u) * (ay - v) - (cy - v) * (ax - u)
                w2 = (ax - u) * (by - v) - (ay - v) * (bx - u)
                if area > 0:
                    inside = w0 >= 0 and w1 >= 0 and w2 >= 0
                else:
                    inside = w0 <= 0 and w1 <= 0 and w2 <= 0
                if inside:
                    out[v, u] = True
    return out


# ---------------------------------------------------------------------------
# soft silhouette rasterizer


@njit(cache=True)
def _seg_dist2(px, py, ax, ay, bx, by):
    """Squared distance from p to segment ab and the clamped parameter t."""
    ex, ey = bx - ax, by - ay
    ll = ex * ex + ey * ey
    if ll > 0.0:
        t = ((px - ax) * ex + (py - ay) * ey) / ll
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    else:
        t = 0.0
    dx = ax + t * ex - px
    dy = ay + t * ey - py
    return dx * dx + dy * dy, t


@njit(cache=True)
def _soft_pair(px, py, x0, y0, x1, y1, x2, y2, inv_sigma):
    """Logit delta*d^2/sigma of one pixel/triangle pair and the closest edge data."""
    area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
    d01, t01 = _seg_dist2(px, py, x0, y0, x1, y1)
    d12, t12 = _seg_dist2(px, py, x1, y1, x2, y2)
    d20, t20 = _seg_dist2(px, py, x2, y2, x0, y0)
    best, edge, t = d01, 0, t01
    if d12 < best:
        best, edge, t = d12, 1, t12
    if d20 < best:
        best, edge, t = d20, 2, t20
    inside = False
    if area != 0.0:
        w0 = (x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)
        w1 = (x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)
        w2 = (x0 - px) * (y1 - py) - (y0 - py) * (x1 - px)
        if area > 0:
            inside = w0 > 0 and w1 > 0 and w2 > 0
        else:
            inside = w0 < 0 and w1 < 0 and w2 < 0
    sign = 1.0 if inside else -1.0
    return sign * best * inv_sigma, sign, edge, t


@njit(cache=True)
def _tri_window(x0, y0, x1, y1, x2, y2, reach, res):
    i0 = max(int(math.floor((min(x0, x1, x2) - reach) * res - 0.5)), 0)
    i1 = min(int(math.ceil((max(x0, x1, x2) + reach) * res - 0.5)), res - 1)
    j0 = max(int(math.floor((min(y0, y1, y2) - reach) * res - 0.5)), 0)
    j1 = min(int(math.ceil((max(y0, y1, y2) + reach) * res - 0.5)), res - 1)
    return i0, i1, j0, j1


@njit(cache=True)
def _softplus(z):
    if z > 0:
        return z + math.log1p(math.exp(-z))
    return math.log1p(math.exp(z))


@njit(cache=True)
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


SATURATED = 50.0


@njit(cache=True)
def _row_span(py, ymin, ymax, xmin, xmax, reach, res):
    """Pixel columns whose centers may lie within ``reach`` of a box, on the row at height ``py``."""
    dy = 0.0
    if py < ymin:
        dy = ymin - py
    elif py > ymax:
        dy = py - ymax
    if dy > reach:
        return 0, -1
    half = math.sqrt(reach * reach - dy * dy)
    i0 = max(int(math.ceil((xmin - half) * res - 0.5)), 0)
    i1 = min(int(math.floor((xmax + half) * res - 0.5)), res - 1)
    return i0, i1


@njit(cache=True)
def _logit(px, py, x0, y0, x1, y1, x2, y2, area, inv_sigma):
    best = 1e300
    for e in range(3):
        if e == 0:
            ax, ay, bx, by = x0, y0, x1, y1
        elif e == 1:
            ax, ay, bx, by = x1, y1, x2, y2
        else:
            ax, ay, bx, by = x2, y2, x0, y0
        ex, ey = bx - ax, by - ay
        ll = ex * ex + ey * ey
        t = 0.0
        if ll > 0.0:
            t = ((px - ax) * ex + (py - ay) * ey) / ll
            t = min(max(t, 0.0), 1.0)
        dx = ax + t * ex - px
        dy = ay + t * ey - py
        d2 = dx * dx + dy * dy
        if d2 < best:
            best = d2
    if area != 0.0:
        w0 = (x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)
        w1 = (x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)
        w2 = (x0 - px) * (y1 - py) - (y0 - py) * (x1 - px)
        if (area > 0 and w0 > 0 and w1 > 0 and w2 > 0) or (area < 0 and w0 < 0 and w1 < 0 and w2 < 0):
            return best * inv_sigma
    return -best * inv_sigma


@njit(cache=True)
def soft_raster_forward(xy, tris, sigma, res, reach):
    """Sum over triangles of softplus(logit) per pixel (the log of 1/prod(1 - D)).

    ``xy`` are vertex positions in normalized window units ([0, 1] spans the
    window); pixel (i, j) has its center at ((i + 0.5) / res, (j + 0.5) / res).
    Pixels farther than ``reach`` from a triangle's bounding box are skipped.
    Triangles are visited in index order, so sums are reproducible. Once a
    pixel's sum exceeds ``SATURATED`` its silhouette value is exactly 1.0 in
    double precision and the remaining pairs are skipped.
    """
    acc = np.zeros((res, res))
    inv_sigma = 1.0 / sigma
    for t in range(tris.shape[0]):
        a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
        x0, y0, x1, y1, x2, y2 = xy[a, 0], xy[a, 1], xy[b, 0], xy[b, 1], xy[c, 0], xy[c, 1]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        xmin, xmax = min(x0, x1, x2), max(x0, x1, x2)
        ymin, ymax = min(y0, y1, y2), max(y0, y1, y2)
        j0 = max(int(math.ceil((ymin - reach) * res - 0.5)), 0)
        j1 = min(int(math.floor((ymax + reach) * res - 0.5)), res - 1)
        for j in range(j0, j1 + 1):
            py = (j + 0.5) / res
            i0, i1 = _row_span(py, ymin, ymax, xmin, xmax, reach, res)
            for i in range(i0, i1 + 1):
                if acc[j, i] > SATURATED:
                    continue
                px = (i + 0.5) / res
                acc[j, i] += _softplus(_logit(px, py, x0, y0, x1, y1, x2, y2, area, inv_sigma))
    return acc


@njit(cache=True)
def soft_raster_backward(xy, tris, sigma, res, reach, gacc, acc):
    """Gradient of sum(gacc * acc) with respect to ``xy``.

    Pixels the forward pass saturated are skipped; the caller's upstream
    gradient there carries a factor below exp(-50).
    """
    grad = np.zeros_like(xy)
    inv_sigma = 1.0 / sigma
    for t in range(tris.shape[0]):
        ids = (tris[t, 0], tris[t, 1], tris[t, 2])
        x0, y0 = xy[ids[0], 0], xy[ids[0], 1]
        x1, y1 = xy[ids[1], 0], xy[ids[1], 1]
        x2, y2 = xy[ids[2], 0], xy[ids[2], 1]
        xmin, xmax = min(x0, x1, x2), max(x0, x1, x2)
        ymin, ymax = min(y0, y1, y2), max(y0, y1, y2)
        j0 = max(int(math.ceil((ymin - reach) * res - 0.5)), 0)
        j1 = min(int(math.floor((ymax + reach) * res - 0.5)), res - 1)
        for j in range(j0, j1 + 1):
            py = (j + 0.5) / res
            i0, i1 = _row_span(py, ymin, ymax, xmin, xmax, reach, res)
            for i in range(i0, i1 + 1):
                g = gacc[j, i]
                if g == 0.0 or acc[j, i] > SATURATED:
                    continue
                px = (i + 0.5) / res
                z, sign, edge, tt = _soft_pair(px, py, x0, y0, x1, y1, x2, y2, inv_sigma)
                coef = g * _sigmoid(z) * sign * inv_sigma
                if edge == 0:
                    ka, kb = 0, 1
                    ax, ay, bx, by = x0, y0, x1, y1
                elif edge == 1:
                    ka, kb = 1, 2
                    ax, ay, bx, by = x1, y1, x2, y2
                else:
                    ka, kb = 2, 0
                    ax, ay, bx, by = x2, y2, x0, y0
                # d^2 = |a + t (b - a) - p|^2 with t the clamped projection;
                # the envelope theorem removes dt terms.
                qx = ax + tt * (bx - ax) - px
                qy = ay + tt * (by - ay) - py
                grad[ids[ka], 0] += coef * 2.0 * qx * (1.0 - tt)
                grad[ids[ka], 1] += coef * 2.0 * qy * (1.0 - tt)
                grad[ids[kb], 0] += coef * 2.0 * qx * tt
                grad[ids[kb], 1] += coef * 2.0 * qy * tt
    return grad


# ---------------------------------------------------------------------------
# voxelization by ray parity


@njit(cache=True)
def parity_fill(tri_pts, origin, spacing, shape, axis):
    """Inside/outside by counting crossings along grid lines parallel to ``axis``.

    ``tri_pts`` is (T, 3, 3). Returns a (nx, ny, nz) bool grid of voxel centers.
    """
    nx, ny, nz = shape[0], shape[1], shape[2]
    a1 = (axis + 1) % 3
    a2 = (axis + 2) % 3
    n1, n2, na = shape[a1], shape[a2], shape[axis]
    lines = np.zeros((n1, n2, 16))
    nline = np.zeros((n1, n2), dtype=np.int64)
    overflow = False
    for t in range(tri_pts.shape[0]):
        p0 = tri_pts[t, 0]
        p1 = tri_pts[t, 1]
        p2 = tri_pts[t, 2]
        x0, y0 = (p0[a1] - origin[a1]) / spacing, (p0[a2] - origin[a2]) / spacing
        x1, y1 = (p1[a1] - origin[a1]) / spacing, (p1[a2] - origin[a2]) / spacing
        x2, y2 = (p2[a1] - origin[a1]) / spacing, (p2[a2] - origin[a2]) / spacing
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        i0 = max(int(math.ceil(min(x0, x1, x2))), 0)
        i1 = min(int(math.floor(max(x0, x1, x2))), n1 - 1)
        j0 = max(int(math.ceil(min(y0, y1, y2))), 0)
        j1 = min(int(math.floor(max(y0, y1, y2))), n2 - 1)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                # nudge sample off lattice-aligned edges to avoid double counts
                px = i + 1.234567e-7
                py = j + 7.654321e-7
                w0 = (x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)
                w1 = (x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)
                w2 = (x0 - px) * (y1 - py) - (y0 - py) * (x1 - px)
                if area > 0:
                    inside = w0 >= 0 and w1 >= 0 and w2 >= 0
                else:
                    inside = w0 <= 0 and w1 <= 0 and w2 <= 0
                if not inside:
                    continue
                b0, b1, b2 = w0 / area, w1 / area, w2 / area
                za = b0 * p0[axis] + b1 * p1[axis] + b2 * p2[axis]
                zc = (za - origin[axis]) / spacing
                k = nline[i, j]
                if k < lines.shape[2]:
                    lines[i, j, k] = zc
                    nline[i, j] = k + 1
                else:
                    overflow = True
    out = np.zeros((nx, ny, nz), dtype=np.bool_)
    for i in range(n1):
        for j in range(n2):
            k = nline[i, j]
            if k < 2:
                continue
            zs = np.sort(lines[i, j, :k])
            for q in range(0, k - 1, 2):
                lo = max(int(math.ceil(zs[q])), 0)
                hi = min(int(math.floor(zs[q + 1])), na - 1)
                for c in range(lo, hi + 1):
                    if axis == 0:
                        out[c, i, j] = True
                    elif axis == 1:
                        out[j, c, i] = True
                    else:
                        out[i, j, c] = True
    return out, overflow
