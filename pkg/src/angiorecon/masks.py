"""Segment-of-interest preprocessing and 2D centerline extraction from binary masks.

Masks are boolean arrays indexed ``mask[v, u]`` (row, column). Point
coordinates are ``(u, v)`` with pixel centers at integer positions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree
from skimage import measure

from .errors import InvalidInputError, NoPathError

N_CENTERLINE = 100


@dataclass(frozen=True)
class SoiSpec:
    start_px: tuple[float, float]
    end_px: tuple[float, float]
    crop_margin: int = 32

    def validate(self, shape=None):
        if np.allclose(self.start_px, self.end_px):
            raise InvalidInputError("SOI start and end coincide")
        if shape is not None:
            h, w = shape
            for p in (self.start_px, self.end_px):
                if not (0 <= p[0] <= w - 1 and 0 <= p[1] <= h - 1):
                    raise InvalidInputError(f"SOI point {p} outside image {w}x{h}")


@dataclass(frozen=True)
class PatchTransform:
    """Rigid map between full-image and patch pixel coordinates.

    ``full -> patch``: subtract ``crop_origin``, rotate by ``-rotation_angle``
    about the crop center, then move that center to the patch center.
    """

    crop_origin: tuple[float, float]
    crop_size: tuple[int, int]
    rotation_angle: float
    patch_size: tuple[int, int]

    @property
    def _centers(self):
        ci = np.array([(self.crop_size[0] - 1) / 2.0, (self.crop_size[1] - 1) / 2.0])
        co = np.array([(self.patch_size[0] - 1) / 2.0, (self.patch_size[1] - 1) / 2.0])
        return ci, co

    def forward(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        ci, co = self._centers
        c, s = math.cos(self.rotation_angle), math.sin(self.rotation_angle)
        d = pts - np.asarray(self.crop_origin) - ci
        rot = np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)
        return rot + co

    def inverse(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        ci, co = self._centers
        c, s = math.cos(self.rotation_angle), math.sin(self.rotation_angle)
        d = pts - co
        rot = np.stack([c * d[..., 0] - s * d[..., 1], s * d[..., 0] + c * d[..., 1]], axis=-1)
        return rot + ci + np.asarray(self.crop_origin)


@dataclass(frozen=True)
class Centerline2D:
    points: np.ndarray  # (100, 2) pixel (u, v)
    radii: np.ndarray  # (100,) pixels


class ContourResult(NamedTuple):
    polygon: np.ndarray  # (K, 2) closed boundary, counterclockwise in (u, v)
    fragmented: bool  # more than one component was present


def crop_and_rotate(mask: np.ndarray, soi: SoiSpec):
    """Crop around the SOI and rotate the patch so start->end points along +u."""
    mask = np.asarray(mask, dtype=bool)
    soi.validate(mask.shape)
    h, w = mask.shape
    (su, sv), (eu, ev) = soi.start_px, soi.end_px
    m = soi.crop_margin
    u_lo = max(int(math.floor(min(su, eu))) - m, 0)
    v_lo = max(int(math.floor(min(sv, ev))) - m, 0)
    u_hi = min(int(math.ceil(max(su, eu))) + m, w - 1)
    v_hi = min(int(math.ceil(max(sv, ev))) + m, h - 1)
    if u_hi <= u_lo or v_hi <= v_lo:
        raise InvalidInputError("SOI crop window has zero area")
    crop = mask[v_lo:v_hi + 1, u_lo:u_hi + 1]
    cw, ch = crop.shape[1], crop.shape[0]
    angle = math.atan2(ev - sv, eu - su)
    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    pw = int(math.ceil(cw * c + ch * s))
    ph = int(math.ceil(cw * s + ch * c))
    t = PatchTransform((float(u_lo), float(v_lo)), (cw, ch), angle, (pw, ph))
    vv, uu = np.mgrid[0:ph, 0:pw]
    src = t.inverse(np.stack([uu, vv], axis=-1).astype(float)) - np.asarray(t.crop_origin)
    patch = ndimage.map_coordinates(crop.astype(np.uint8), [src[..., 1], src[..., 0]], order=0, cval=0)
    return patch.astype(bool), t


def _largest_component(mask):
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n == 0:
        raise InvalidInputError("mask has no foreground")
    if n == 1:
        return mask, False
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    keep = int(np.argmax(sizes)) + 1
    warnings.warn(f"mask has {n} components; keeping the largest", RuntimeWarning)
    return labels == keep, True


def extract_contour(mask: np.ndarray) -> ContourResult:
    """Boundary polygon of the (largest) foreground component.

    The polygon follows the half-pixel crack between foreground and background
    pixel centers, so its area matches the pixel count up to corner clipping.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InvalidInputError("mask has no foreground")
    comp, fragmented = _largest_component(mask)
    padded = np.pad(comp.astype(float), 1)
    contours = measure.find_contours(padded, 0.5)
    best = max(contours, key=lambda c: abs(polygon_area(c[:, ::-1])))
    poly = best[:, ::-1] - 1.0  # (row, col) -> (u, v), undo padding
    if np.allclose(poly[0], poly[-1]):
        poly = poly[:-1]
    if polygon_area(poly) < 0:
        poly = poly[::-1]
    return ContourResult(poly, fragmented)


def polygon_area(poly) -> float:
    """Signed shoelace area in (u, v); positive means counterclockwise."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


class DistanceField:
    """Continuous distance to the vessel boundary inside a mask.

    Evaluated at a point it returns the distance to the nearest background
    pixel center minus half a pixel, which is the boundary location for
    pixel-center sampled masks. At pixel centers this equals the Euclidean
    distance transform minus 0.5.
    """

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=bool)
        self.mask = mask
        bg = np.argwhere(~np.pad(mask, 1))[:, ::-1] - 1.0
        fg = np.argwhere(mask)[:, ::-1].astype(float)
        self._bg = cKDTree(bg)
        self._fg = cKDTree(fg)

    def __call__(self, pts) -> np.ndarray:
        d, _ = self._bg.query(np.atleast_2d(pts))
        return d - 0.5

    def signed(self, pts) -> np.ndarray:
        """Positive inside; zero halfway between foreground and background centers."""
        pts = np.atleast_2d(pts)
        dbg, _ = self._bg.query(pts)
        dfg, _ = self._fg.query(pts)
        return 0.5 * (dbg - dfg)

    def grid(self) -> np.ndarray:
        return ndimage.distance_transform_edt(np.pad(self.mask, 1))[1:-1, 1:-1] - 0.5


def _snap(mask, p, tol=3.0):
    fg = np.argwhere(mask)[:, ::-1]
    d = np.hypot(fg[:, 0] - p[0], fg[:, 1] - p[1])
    k = int(np.argmin(d))
    if d[k] > tol:
        raise InvalidInputError(f"endpoint {tuple(p)} is {d[k]:.2f} px from the foreground")
    return fg[k]


def ridge_path(mask, dt, start, end):
    """Minimal-cost 8-connected pixel path; entering a pixel costs step / (1 + dt^2)."""
    h, w = mask.shape
    ids = -np.ones(mask.shape, dtype=np.int64)
    fg = np.argwhere(mask)
    ids[fg[:, 0], fg[:, 1]] = np.arange(len(fg))
    rows, cols, wts = [], [], []
    for dv, du in ((0, 1), (1, 0), (1, 1), (1, -1)):
        ca, cb = (slice(0, w - du), slice(du, w)) if du >= 0 else (slice(-du, w), slice(0, w + du))
        a = ids[0:h - dv, ca]
        b = ids[dv:h, cb]
        ok = (a >= 0) & (b >= 0)
        ia, ib = a[ok], b[ok]
        step = math.hypot(du, dv)
        cost_b = step / (1.0 + dt[fg[ib, 0], fg[ib, 1]] ** 2)
        cost_a = step / (1.0 + dt[fg[ia, 0], fg[ia, 1]] ** 2)
        rows += [ia, ib]
        cols += [ib, ia]
        wts += [cost_b, cost_a]
    n = len(fg)
    graph = coo_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    s = ids[start[1], start[0]]
    e = ids[end[1], end[0]]
    dist, pred = dijkstra(graph, directed=True, indices=s, return_predecessors=True)
    if not np.isfinite(dist[e]):
        raise NoPathError("centerline endpoints are not connected through the foreground")
    path = [e]
    while path[-1] != s:
        path.append(pred[path[-1]])
    path = np.array(path[::-1])
    return fg[path][:, ::-1].astype(float)


def resample_polyline(points, n):
    """Resample a polyline to ``n`` points equally spaced in arc length."""
    points = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 0])
    points = points[keep]
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    if s[-1] == 0:
        raise InvalidInputError("polyline has zero length")
    t = np.linspace(0.0, s[-1], n)
    return np.stack([np.interp(t, s, points[:, k]) for k in range(points.shape[1])], axis=1)


def smooth_polyline(points, window):
    """Moving average with fixed endpoints (odd reflection padding)."""
    if window <= 1 or len(points) < 3:
        return points
    half = window // 2
    head = 2 * points[0] - points[half:0:-1]
    tail = 2 * points[-1] - points[-2:-half - 2:-1]
    padded = np.concatenate([head, points, tail])
    kernel = np.ones(window) / window
    out = np.stack([np.convolve(padded[:, k], kernel, mode="valid") for k in range(points.shape[1])], axis=1)
    out[0], out[-1] = points[0], points[-1]
    return out


def _normals(points):
    tang = np.gradient(points, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    return np.stack([-tang[:, 1], tang[:, 0]], axis=1)


def normal_extent(field: DistanceField, points, reach):
    """Signed offsets of the two boundary crossings along each point's normal.

    Returns ``(plus, minus, normal)``; ``plus >= 0 >= minus`` where found and
    NaN where the probe starts outside or never leaves the foreground.
    """
    points = np.asarray(points, dtype=float)
    normal = _normals(points)
    steps = np.linspace(0.0, reach, int(math.ceil(reach * 4)) + 1)
    out = []
    for sgn in (1.0, -1.0):
        probe = points[:, None, :] + sgn * steps[None, :, None] * normal[:, None, :]
        sd = field.signed(probe.reshape(-1, 2)).reshape(len(points), len(steps))
        outside = sd <= 0
        k = np.argmax(outside, axis=1)
        ok = outside.any(axis=1) & (k > 0)
        kk = np.where(ok, k, 1)
        lo, hi = steps[kk - 1], steps[kk]
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            inside = field.signed(points + sgn * mid[:, None] * normal) > 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        out.append(np.where(ok, sgn * 0.5 * (lo + hi), np.nan))
    return out[0], out[1], normal


def _recenter(field: DistanceField, points, reach):
    """Move interior points to the midpoint between the two boundary crossings along the normal."""
    plus, minus, normal = normal_extent(field, points, reach)
    shift = 0.5 * (plus + minus)
    shift[[0, -1]] = np.nan
    out = points.copy()
    ok = np.isfinite(shift)
    out[ok] += shift[ok, None] * normal[ok]
    return out


def half_widths(field: DistanceField, points, reach, window=9):
    """Radius profile from the cross-section width along the normal, smoothed along the curve.

    Samples within one pixel (arc length) of either end straddle the vessel's
    end edge, so they take the value of the nearest sample farther in.
    """
    plus, minus, _ = normal_extent(field, points, reach)
    r = 0.5 * (plus - minus)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    r[(s < 1.0) | (s > s[-1] - 1.0)] = np.nan
    ok = np.flatnonzero(np.isfinite(r))
    if ok.size == 0:
        return field(points)
    idx = np.arange(len(r))
    nearest = ok[np.clip(np.searchsorted(ok, idx), 0, ok.size - 1)]
    prev = ok[np.clip(np.searchsorted(ok, idx) - 1, 0, ok.size - 1)]
    pick = np.where(np.abs(prev - idx) < np.abs(nearest - idx), prev, nearest)
    r = r[pick]
    if window > 1:
        half = window // 2
        padded = np.concatenate([r[half:0:-1], r, r[-2:-half - 2:-1]])
        r = np.convolve(padded, np.ones(window) / window, mode="valid")
    return r


def centerline_2d(mask, endpoints, n=N_CENTERLINE, smooth_px=7) -> Centerline2D:
    """Ridge-following centerline between two endpoints, resampled to ``n`` points.

    Parameters
    ----------
    mask : (H, W) bool array
    endpoints : pair of (u, v)
        Start and end of the segment; each must be inside or within 3 px of
        the foreground.
    n : int
        Number of output samples (100 for the reconstruction pipeline).
    smooth_px : int
        Moving-average window applied to the pixel path before resampling.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InvalidInputError("mask has no foreground")
    start, end = (np.asarray(p, dtype=float) for p in endpoints)
    field = DistanceField(mask)
    dt = field.grid()
    ps = _snap(mask, start)
    pe = _snap(mask, end)
    path = ridge_path(mask, dt, ps, pe)
    path = np.concatenate([start[None], path[1:-1], end[None]]) if len(path) > 2 else np.stack([start, end])
    dense = resample_polyline(path, max(4 * len(path), 4 * n))
    dense = smooth_polyline(dense, 4 * smooth_px + 1)
    pts = resample_polyline(dense, n)
    reach = float(dt.max()) * 2.0 + 2.0
    pts = _recenter(field, pts, reach)
    pts = resample_polyline(smooth_polyline(pts, 5), n)
    return Centerline2D(pts, half_widths(field, pts, reach))


def to_full_image(cl: Centerline2D, t: PatchTransform) -> Centerline2D:
    return Centerline2D(t.inverse(cl.points), cl.radii.copy())


def correspond_views(cl_a: Centerline2D, cl_b: Centerline2D):
    """Pair samples by normalized arc length: sample i of A with sample i of B."""
    if len(cl_a.points) != len(cl_b.points):
        raise InvalidInputError("centerlines must have the same number of samples")
    return [(i, i) for i in range(len(cl_a.points))]
