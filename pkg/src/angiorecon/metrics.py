"""Evaluation metrics: point-set distances, F-score and 2D projection overlap."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError
from .geometry import ProjectionOperator, project
from .kernels import triangle_coverage

DEFAULT_TAU = 0.0005


def _points(x, name):
    x = np.asarray(x, dtype=float).reshape(-1, 3)
    if len(x) == 0:
        raise InvalidInputError(f"{name} point set is empty")
    return x


def nearest_distances(src, dst) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest neighbor in ``dst``."""
    d, _ = cKDTree(dst).query(src)
    return d


def mae(pred, gt) -> float:
    """Symmetric mean nearest-neighbor distance."""
    p, g = _points(pred, "pred"), _points(gt, "gt")
    return 0.5 * (nearest_distances(p, g).mean() + nearest_distances(g, p).mean())


def hausdorff(pred, gt) -> float:
    p, g = _points(pred, "pred"), _points(gt, "gt")
    return float(max(nearest_distances(p, g).max(), nearest_distances(g, p).max()))


def f_score(pred, gt, tau: float = DEFAULT_TAU):
    """(precision, recall, F) in percent; a point matches if a neighbor lies within ``tau``."""
    p, g = _points(pred, "pred"), _points(gt, "gt")
    precision = 100.0 * float(np.mean(nearest_distances(p, g) <= tau))
    recall = 100.0 * float(np.mean(nearest_distances(g, p) <= tau))
    f = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    return precision, recall, f


def mask_overlap(pred_mask, gt_mask):
    """(Dice, Jaccard) in percent; two empty masks count as a perfect match."""
    p = np.asarray(pred_mask, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if p.shape != g.shape:
        raise InvalidInputError(f"mask shapes differ: {p.shape} vs {g.shape}")
    inter = np.count_nonzero(p & g)
    total = np.count_nonzero(p) + np.count_nonzero(g)
    union = np.count_nonzero(p | g)
    if total == 0:
        return 100.0, 100.0
    return 200.0 * inter / total, 100.0 * inter / union


def render_coverage(vertices, triangles, op: ProjectionOperator, shape) -> np.ndarray:
    """Exact pixel-center coverage of the projected triangles."""
    uv = np.ascontiguousarray(project(op, vertices))
    h, w = shape
    return triangle_coverage(uv, np.ascontiguousarray(triangles, dtype=np.int64), w, h)


def projection_overlap(vertices, triangles, op: ProjectionOperator, gt_mask):
    gt_mask = np.asarray(gt_mask, dtype=bool)
    return mask_overlap(render_coverage(vertices, triangles, op, gt_mask.shape), gt_mask)


@dataclass
class MetricReport:
    mae_mm: float
    hd_mm: float
    precision_pct: float
    recall_pct: float
    fscore_pct: float
    dice_pct: float
    jaccard_pct: float
    tau: float = DEFAULT_TAU

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self) -> str:
        head = f"{'MAE (mm)':>10} {'HD (mm)':>10} {'F-score':>10} {'Dice':>10} {'Jaccard':>10}"
        row = (f"{self.mae_mm:10.4f} {self.hd_mm:10.4f} {self.fscore_pct:10.2f} "
               f"{self.dice_pct:10.2f} {self.jaccard_pct:10.2f}")
        return head + "\n" + row


def evaluate(pred_vertices, gt_vertices, norm, triangles=None, ops=(), masks=(), tau=DEFAULT_TAU) -> MetricReport:
    """Full report: 3D metrics in mm, F-score in the normalized frame ``norm``, mean 2D overlap."""
    p, g = _points(pred_vertices, "pred"), _points(gt_vertices, "gt")
    prec, rec, f = f_score(norm.apply(p), norm.apply(g), tau)
    dices, jacs = [], []
    for op, m in zip(ops, masks):
        d, j = projection_overlap(p, triangles, op, m)
        dices.append(d)
        jacs.append(j)
    dice = float(np.mean(dices)) if dices else float("nan")
    jac = float(np.mean(jacs)) if jacs else float("nan")
    return MetricReport(float(mae(p, g)), hausdorff(p, g), prec, rec, f, dice, jac, tau)


def sample_surface(vertices, triangles, subdiv: int = 4) -> np.ndarray:
    """Deterministic dense surface samples: a barycentric grid of ``subdiv`` steps per triangle."""
    v = np.asarray(vertices, dtype=float)
    t = np.asarray(triangles)
    ij = [(i, j) for i in range(subdiv + 1) for j in range(subdiv + 1 - i)]
    bary = np.array([(i / subdiv, j / subdiv, 1.0 - (i + j) / subdiv) for i, j in ij])
    pts = np.einsum("kb,tbd->tkd", bary, v[t])
    return np.unique(np.round(pts.reshape(-1, 3), 12), axis=0)
