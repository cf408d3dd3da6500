"""Training losses and the soft silhouette rasterizer.

Losses accept either plain arrays (evaluation) or tape vars (training) for
the predicted vertices; ground-truth inputs are always constants.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import InvalidInputError, NumericalError
from .kernels import soft_raster_backward, soft_raster_forward

ad.register_op("soft_raster")

BCE_CLAMP = 1e-7
DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    w_mse: float = 1.0
    w_norm: float = 0.01
    w_edge: float = 2.5
    w_lap: float = 100.0
    w_seg: float = 0.0002
    raster_sigma: float = 1e-4
    raster_resolution: int = 128
    edge_relative: bool = False

    def __post_init__(self):
        for k in ("w_mse", "w_norm", "w_edge", "w_lap", "w_seg"):
            if getattr(self, k) < 0:
                raise InvalidInputError(f"{k} must be non-negative")
        if self.raster_sigma <= 0:
            raise InvalidInputError("raster_sigma must be positive")
        if self.raster_resolution < 1:
            raise InvalidInputError("raster_resolution must be positive")

    def to_json(self):
        return asdict(self)


def _val(x):
    return x.value if isinstance(x, ad.Var) else np.asarray(x, dtype=float)


def _is_var(*xs):
    return any(isinstance(x, ad.Var) for x in xs)


# ---------------------------------------------------------------------------
# geometric losses


def mse_loss(pred, gt):
    """Mean over vertices of the squared Euclidean distance."""
    if _val(pred).shape != _val(gt).shape:
        raise InvalidInputError(f"vertex arrays differ: {_val(pred).shape} vs {_val(gt).shape}")
    if _is_var(pred):
        d = pred - _val(gt)
        return ad.mean(ad.sum_(ad.square(d), axis=1))
    return float(((_val(pred) - _val(gt)) ** 2).sum(axis=1).mean())


def face_normals(verts, tris):
    """Unnormalized face normals ``(b - a) x (c - a)``."""
    if _is_var(verts):
        a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
        return ad.cross(b - a, c - a)
    v = _val(verts)
    return np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]])


def vertex_normals(verts, tris, n_vertices=None):
    """Average of the unit normals of adjacent faces, renormalized.

    Raises :class:`NumericalError` when every face around a vertex is degenerate.
    """
    n = len(_val(verts)) if n_vertices is None else n_vertices
    fn = face_normals(verts, tris)
    fv = _val(fn)
    lens = np.linalg.norm(fv, axis=1)
    count = np.bincount(tris.ravel(), minlength=n).astype(float)
    ok = np.bincount(tris.ravel(), weights=np.repeat(lens > 0, 3).astype(float), minlength=n)
    if np.any((count > 0) & (ok == 0)):
        bad = int(np.argmax((count > 0) & (ok == 0)))
        raise NumericalError(f"degenerate normal at vertex {bad}: all adjacent faces have zero area")
    safe = np.where(lens > 0, lens, 1.0)
    inv_count = np.where(count > 0, 1.0 / np.maximum(count, 1.0), 0.0)[:, None]
    if _is_var(fn):
        # zero-area faces contribute nothing (and no gradient)
        unit = ad.normalize(fn, axis=1) if np.all(lens > 0) else fn / safe[:, None] * (lens > 0)[:, None]
        flat = ad.reshape(ad.concat([unit, unit, unit], axis=1), (-1, 3))
        acc = ad.scatter_add(flat, tris.ravel(), n) * inv_count
        return ad.normalize(acc, axis=1)
    unit = fv / safe[:, None]
    acc = np.zeros((n, 3))
    for k in range(3):
        np.add.at(acc, tris[:, k], unit)
    acc *= inv_count
    return acc / np.linalg.norm(acc, axis=1, keepdims=True)


def normal_loss(pred, gt, tris):
    """Mean over vertices of ``1 - |n_pred . n_gt|``; the dot is capped at 1 so rounding cannot go negative."""
    if _val(pred).shape != _val(gt).shape:
        raise InvalidInputError("vertex counts differ")
    ng = vertex_normals(_val(gt), tris)
    npred = vertex_normals(pred, tris)
    if _is_var(npred):
        dots = ad.sum_(npred * ng, axis=1)
        return ad.mean(1.0 - ad.clip(ad.abs_(dots), 0.0, 1.0))
    return float((1.0 - np.minimum(np.abs((npred * ng).sum(axis=1)), 1.0)).mean())


def edge_loss(verts, edges, init=None):
    """Mean squared edge length; with ``init`` the mean squared change of edge length."""
    edges = np.asarray(edges)
    if _is_var(verts):
        e = verts[edges[:, 0]] - verts[edges[:, 1]]
        sq = ad.sum_(ad.square(e), axis=1)
        if init is None:
            return ad.mean(sq)
        l0 = np.linalg.norm(_val(init)[edges[:, 0]] - _val(init)[edges[:, 1]], axis=1)
        return ad.mean(ad.square(ad.l2norm(e, axis=1) - l0))
    v = _val(verts)
    sq = ((v[edges[:, 0]] - v[edges[:, 1]]) ** 2).sum(axis=1)
    if init is None:
        return float(sq.mean())
    l0 = np.linalg.norm(_val(init)[edges[:, 0]] - _val(init)[edges[:, 1]], axis=1)
    return float(((np.sqrt(sq) - l0) ** 2).mean())


def laplacian_matrix(n, edges) -> sp.csr_matrix:
    """Uniform Laplacian ``L v_i = v_i - mean(neighbors)`` as a sparse operator."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise InvalidInputError(f"vertex {int(np.argmin(deg))} has no neighbors")
    return (sp.identity(n, format="csr") - sp.diags(1.0 / deg) @ adj).tocsr()


def laplacian(verts, edges, vertex_id):
    """Laplacian coordinate of one vertex."""
    v = _val(verts)
    edges = np.asarray(edges)
    nb = np.concatenate([edges[edges[:, 0] == vertex_id, 1], edges[edges[:, 1] == vertex_id, 0]])
    nb = np.unique(nb)
    if nb.size == 0:
        raise InvalidInputError(f"vertex {vertex_id} has no neighbors")
    return v[vertex_id] - v[nb].mean(axis=0)


def laplacian_loss(pred, ref, edges=None, lmat=None):
    """Mean over vertices of ``|L(pred)_i - L(ref)_i|^2``."""
    if _val(pred).shape != _val(ref).shape:
        raise InvalidInputError("meshes must share a topology")
    n = len(_val(pred))
    lmat = laplacian_matrix(n, edges) if lmat is None else lmat
    lref = lmat @ _val(ref)
    if _is_var(pred):
        d = ad.spmm(lmat, pred) - lref
        return ad.mean(ad.sum_(ad.square(d), axis=1))
    return float(((lmat @ _val(pred) - lref) ** 2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# segmentation loss


def bce_dice_loss(pred, gt):
    """Binary cross entropy plus ``1 - soft Dice``; ``pred`` is clamped to [1e-7, 1 - 1e-7]."""
    g = np.asarray(gt, dtype=float)
    if _val(pred).shape != g.shape:
        raise InvalidInputError(f"prediction {_val(pred).shape} and mask {g.shape} differ in size")
    if _is_var(pred):
        p = ad.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
        bce = -ad.mean(ad.log(p) * g + ad.log(1.0 - p) * (1.0 - g))
        dice = (2.0 * ad.sum_(p * g) + DICE_EPS) / (ad.sum_(p) + (g.sum() + DICE_EPS))
        return bce + (1.0 - dice)
    p = np.clip(_val(pred), BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = -np.mean(g * np.log(p) + (1 - g) * np.log(1 - p))
    dice = (2.0 * (p * g).sum() + DICE_EPS) / (p.sum() + g.sum() + DICE_EPS)
    return float(bce + 1.0 - dice)


# ---------------------------------------------------------------------------
# soft rasterizer


# Distances enter the sigmoid in units where the window spans [-1, 1], the
# convention under which sigma = 1e-4 is the customary soft-rasterizer
# default. The kernels work in [0, 1] units, so sigma is divided by 2^2.
WINDOW_SPAN = 2.0


def kernel_sigma(sigma: float) -> float:
    """``sigma`` rescaled to [0, 1] window units."""
    return sigma / WINDOW_SPAN ** 2


def raster_reach(sigma: float) -> float:
    """Distance in [0, 1] units beyond which a triangle's contribution is below exp(-30)."""
    return math.sqrt(30.0 * kernel_sigma(sigma))


def soft_silhouette(xy, tris, sigma: float = 1e-4, res: int = 128):
    """Soft silhouette ``1 - prod_j (1 - sigmoid(delta_j d_j^2 / sigma))`` of 2D triangles.

    ``xy`` holds vertex positions in [0, 1] window units, as an array or a
    tape var of shape (N, 2); ``d`` is measured with the window spanning
    [-1, 1]. Returns a (res, res) array or var; row index is the vertical
    window axis.
    """
    tris = np.ascontiguousarray(tris, dtype=np.int64)
    xv = np.ascontiguousarray(_val(xy), dtype=float)
    if not np.all(np.isfinite(xv)):
        raise NumericalError("non-finite projected vertices")
    p0, p1, p2 = xv[tris[:, 0]], xv[tris[:, 1]], xv[tris[:, 2]]
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    if not np.any(area != 0.0):
        warnings.warn("empty projection: silhouette is all background", RuntimeWarning, stacklevel=2)
        sil = np.zeros((res, res))
        return xy.tape.record("soft_raster", sil, [xy], lambda g, needs: [np.zeros_like(xv)]) if _is_var(xy) else sil
    reach = raster_reach(sigma)
    sigma = kernel_sigma(sigma)
    acc = soft_raster_forward(xv, tris, sigma, res, reach)
    sil = -np.expm1(-acc)
    if not _is_var(xy):
        return sil
    keep = np.exp(-acc)

    def vjp(g, needs):
        return [soft_raster_backward(xv, tris, sigma, res, reach, np.ascontiguousarray(g * keep), acc)]

    return xy.tape.record("soft_raster", sil, [xy], vjp)


# ---------------------------------------------------------------------------
# combined objective


TERMS = ("mse", "norm", "edge", "lap", "seg")


def total_loss(pred, gt, tris, edges, silhouettes=(), gt_masks=(), cfg: LossConfig = LossConfig(),
               init=None, lmat=None):
    """Weighted sum of the five terms; returns ``(total, breakdown)``.

    ``silhouettes`` and ``gt_masks`` are per-view sequences; the segmentation
    term is their mean. ``init`` is required when ``cfg.edge_relative``.
    """
    if cfg.edge_relative and init is None:
        raise InvalidInputError("relative edge loss needs the initial mesh")
    terms = {
        "mse": mse_loss(pred, gt),
        "norm": normal_loss(pred, gt, tris),
        "edge": edge_loss(pred, edges, init if cfg.edge_relative else None),
        "lap": laplacian_loss(pred, gt, edges, lmat),
    }
    if len(silhouettes) != len(gt_masks):
        raise InvalidInputError("one ground-truth mask per silhouette is required")
    if silhouettes:
        segs = [bce_dice_loss(s, m) for s, m in zip(silhouettes, gt_masks)]
        seg = segs[0]
        for s in segs[1:]:
            seg = seg + s
        terms["seg"] = seg * (1.0 / len(segs))
    else:
        terms["seg"] = 0.0
    weights = {"mse": cfg.w_mse, "norm": cfg.w_norm, "edge": cfg.w_edge, "lap": cfg.w_lap, "seg": cfg.w_seg}
    total = None
    for k in TERMS:
        t = terms[k] * weights[k]
        total = t if total is None else total + t
    breakdown = {k: float(_val(terms[k])) for k in TERMS}
    breakdown["total"] = float(_val(total))
    return total, breakdown


def breakdown_line(epoch: int, breakdown: dict) -> str:
    """JSON-lines record of one loss evaluation."""
    return json.dumps({"epoch": epoch, **{k: breakdown[k] for k in (*TERMS, "total")}})
