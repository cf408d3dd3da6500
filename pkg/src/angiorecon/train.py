"""Surface-refinement training and inference.

Each case is turned into a :class:`Sample` once: MI mesh in the normalized
frame, its regression target, per-view crops and the constant interpolation
matrices that sample the feature pyramids at the MI vertex projections.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import InvalidInputError, NumericalError
from .features import (FEATURE_RES, ConvWeights, GcnWeights, Window, extract_features, gcn_forward,
                       homogeneous_image_map, normalized_adjacency, project_unit, sample_pyramid,
                       sampling_matrices, window_for)
from .geometry import project, projection_from_geometry
from .losses import TERMS, LossConfig, laplacian_matrix, soft_silhouette, total_loss
from .mesh import TubeMesh, apply_normalization, corresponded_tube, normalize_mesh
from .optim import AdamState, adam_step, clip_global_norm, lr_schedule
from .reconstruct import initial_mesh

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 1
    seed: int = 0
    lr: float = 0.001
    decay: float = 0.99
    val_fraction: float = 0.15
    clip_norm: float = 10.0
    checkpoint_every: int = 0
    early_stop_patience: int = 0  # 0 disables
    channels: tuple = (60, 60, 60, 60)
    feature_res: int = FEATURE_RES
    absolute_regression: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidInputError("epochs must be non-negative")
        if self.batch_size != 1:
            raise InvalidInputError("the refinement stage trains with batch size 1")
        if self.lr <= 0:
            raise InvalidInputError("lr must be positive")

    def to_json(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class ViewData:
    window: Window
    hmap: np.ndarray  # normalized coords -> homogeneous pixels
    image: np.ndarray  # feature-extractor input crop
    target: np.ndarray  # mask crop at raster resolution (area fractions)
    mats: list  # bilinear matrices per pyramid level


@dataclass
class Sample:
    mesh: TubeMesh  # MI mesh, normalized frame
    norm: object  # MeshNormalization
    target: Optional[np.ndarray]  # corresponded ground truth, normalized frame
    views: tuple


def prepare_sample(masks, geometries, sois, feature_res: int = FEATURE_RES, raster_res: int = 128,
                   gt_centerline=None, gt_radii=None, mi=None) -> Sample:
    mi = mi if mi is not None else initial_mesh(masks, geometries, sois)
    mesh_n, norm = normalize_mesh(mi.mesh)
    target = None
    if gt_centerline is not None:
        gt = corresponded_tube(mi.mesh, mi.centerline, gt_centerline, gt_radii)
        target = norm.apply(gt.vertices)
    views = []
    for mask, g in zip(masks, geometries):
        op = projection_from_geometry(g)
        uv = project(op, mi.mesh.vertices)
        win = window_for(uv, g.image_size)
        hmap = homogeneous_image_map(op, norm)
        unit = project_unit(mesh_n.vertices, hmap, win)
        shapes = [(feature_res >> k, feature_res >> k) for k in range(4)]
        mats = sampling_matrices(unit, feature_res, shapes)
        m = np.asarray(mask, dtype=float)
        views.append(ViewData(win, hmap, win.crop(m, feature_res), win.crop(m, raster_res), mats))
    return Sample(mesh_n, norm, target, tuple(views))


def sample_from_case(case, cfg: TrainConfig = TrainConfig(), loss_cfg: LossConfig = LossConfig()) -> Sample:
    return prepare_sample(case.masks, case.geometries, case.soi, cfg.feature_res, loss_cfg.raster_resolution,
                          case.gt_centerline, case.gt_radii)


class Model:
    """Conv encoder plus GCN, parameters stored as plain arrays."""

    def __init__(self, conv: ConvWeights, gcn: GcnWeights):
        self.conv = conv
        self.gcn = gcn

    @classmethod
    def init(cls, seed: int, channels=(60, 60, 60, 60)) -> "Model":
        rng = np.random.default_rng(seed)
        conv = ConvWeights.init(rng, channels)
        gcn = GcnWeights.init(rng, in_dim=2 * sum(channels) + 3)
        return cls(conv, gcn)

    def arrays(self):
        return self.conv.arrays() + self.gcn.arrays()

    def names(self):
        conv = [f"conv{k // 2}.{'w' if k % 2 == 0 else 'b'}" for k in range(len(self.conv.arrays()))]
        return conv + self.gcn.names()

    def replace(self, arrays) -> "Model":
        nc = len(self.conv.arrays())
        return Model(self.conv.replace(arrays[:nc]), self.gcn.replace(arrays[nc:]))

    def copy(self) -> "Model":
        return self.replace([a.copy() for a in self.arrays()])


def forward(model_vars, n_conv: int, sample: Sample, adj, absolute_regression=False):
    """Record the network on the tape of ``model_vars``; returns the predicted normalized vertices."""
    conv_vars, gcn_vars = model_vars[:n_conv], model_vars[n_conv:]
    cols = []
    for view in sample.views:
        pyr = extract_features(view.image, conv_vars)
        cols.extend(sample_pyramid(pyr, view.mats))
    feats = ad.concat(cols + [sample.mesh.vertices], axis=1)
    return gcn_forward(feats, adj, gcn_vars, absolute_regression, base=sample.mesh.vertices)


class Topo:
    """Constant graph operators shared by every tube with the template topology."""

    def __init__(self, mesh: TubeMesh):
        self.adj = normalized_adjacency(mesh)
        self.lmat = laplacian_matrix(len(mesh.vertices), mesh.edges)
        self.edges = mesh.edges


def loss_on_tape(model: Model, sample: Sample, topo: Topo, loss_cfg: LossConfig, absolute_regression=False,
                 with_grad: bool = True):
    tape = ad.Tape()
    params = [tape.var(a, requires_grad=with_grad) for a in model.arrays()]
    pred = forward(params, len(model.conv.arrays()), sample, topo.adj, absolute_regression)
    sils, targets = [], []
    if loss_cfg.w_seg > 0:
        for view in sample.views:
            xy = project_unit(pred, view.hmap, view.window)
            sils.append(soft_silhouette(xy, sample.mesh.triangles, loss_cfg.raster_sigma, loss_cfg.raster_resolution))
            targets.append(view.target)
    total, breakdown = total_loss(pred, sample.target, sample.mesh.triangles, topo.edges, sils, targets, loss_cfg,
                                  init=sample.mesh.vertices, lmat=topo.lmat)
    if not math.isfinite(breakdown["total"]):
        raise NumericalError("non-finite loss")
    grads = tape.gradient(total, params) if with_grad else None
    tape.release()
    return breakdown, grads


def predict(model: Model, sample: Sample, topo: Topo = None, absolute_regression=False) -> TubeMesh:
    """Refined mesh in the normalized frame."""
    topo = topo or Topo(sample.mesh)
    tape = ad.Tape()
    params = [tape.const(a) for a in model.arrays()]
    pred = forward(params, len(model.conv.arrays()), sample, topo.adj, absolute_regression)
    return sample.mesh.with_vertices(pred.value)


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)  # dicts: epoch, split, terms..., total, lr
    best_epoch: int = 0
    clip_events: int = 0


HISTORY_FIELDS = ("epoch", "split", *TERMS, "total", "lr")


def split_indices(n: int, seed: int, val_fraction: float = 0.15):
    """Seeded shuffle; the first ``floor(val_fraction * n)`` indices go to validation."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(val_fraction * n))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _mean_breakdown(rows):
    return {k: float(np.mean([r[k] for r in rows])) for k in (*TERMS, "total")}


def train_sr(samples, cfg: TrainConfig = TrainConfig(), loss_cfg: LossConfig = LossConfig(),
             model: Model = None, log_lines=None, checkpoint_dir=None) -> TrainResult:
    """Train the encoder and GCN with Adam, batch size 1.

    ``samples`` are :class:`Sample` objects with targets. A seeded
    ``cfg.val_fraction`` of them is held out; the returned model has the
    lowest validation loss seen (the final model when there is no
    validation split). ``log_lines`` collects JSON-lines loss records.
    With ``cfg.checkpoint_every`` and ``checkpoint_dir`` set, the current
    weights are written to ``epoch_NNNN.bin`` every that many epochs.
    """
    from .features import save_checkpoint
    from .losses import breakdown_line

    samples = list(samples)
    if not samples:
        raise InvalidInputError("training needs at least one case")
    if any(s.target is None for s in samples):
        raise InvalidInputError("every training sample needs a ground-truth target")
    model = model or Model.init(cfg.seed, cfg.channels)
    result = TrainResult(model.copy())
    if cfg.epochs == 0:
        return result
    train_idx, val_idx = split_indices(len(samples), cfg.seed, cfg.val_fraction)
    if not train_idx:
        train_idx, val_idx = val_idx, []
    topo = Topo(samples[0].mesh)
    names = model.names()
    params = model.arrays()
    state = AdamState.for_params(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    best = math.inf
    stale = 0
    for epoch in range(cfg.epochs):
        state.lr = lr_schedule(epoch, cfg.lr, cfg.decay)
        rows = []
        for i in rng.permutation(train_idx):
            try:
                bd, grads = loss_on_tape(model, samples[i], topo, loss_cfg, cfg.absolute_regression)
                grads, gnorm = clip_global_norm(grads, cfg.clip_norm)
                if gnorm > cfg.clip_norm:
                    result.clip_events += 1
                params, state = adam_step(params, grads, state, names)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, case {int(i)}: {exc}") from exc
            model = model.replace(params)
            rows.append(bd)
        tr = _mean_breakdown(rows)
        result.history.append({"epoch": epoch, "split": "train", **tr, "lr": state.lr})
        if log_lines is not None:
            log_lines.append(breakdown_line(epoch, tr))
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}.bin", model.conv, model.gcn,
                            {"epoch": epoch + 1, "seed": cfg.seed})
        if val_idx:
            vrows = [loss_on_tape(model, samples[i], topo, loss_cfg, cfg.absolute_regression, False)[0]
                     for i in val_idx]
            va = _mean_breakdown(vrows)
            result.history.append({"epoch": epoch, "split": "val", **va, "lr": state.lr})
            score = va["total"]
        else:
            score = tr["total"]
        if score < best or not val_idx:
            if score < best:
                best = score
                stale = 0
            result.model = model.copy()
            result.best_epoch = epoch
        else:
            stale += 1
            if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                log.info("early stop at epoch %d", epoch)
                break
    return result


def write_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in HISTORY_FIELDS})
