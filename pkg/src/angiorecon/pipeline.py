"""End-to-end reconstruction: calibration, mesh initialisation, refinement, stitching, metrics."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .errors import InvalidInputError, ReconstructionError
from .features import load_checkpoint, save_checkpoint
from .geometry import PointCorrespondence, projection_from_geometry, refine_calibration
from .losses import LossConfig
from .mesh import TubeMesh, normalize_mesh
from .metrics import MetricReport, evaluate
from .reconstruct import MiResult, initial_mesh
from .stitch import DEFAULT_RESOLUTION, BranchSet, stitch_branches
from .train import Model, Topo, TrainConfig, predict, prepare_sample, train_sr, write_history

log = logging.getLogger(__name__)


@dataclass
class Stages:
    calibrate: bool = True
    mi_only: bool = False
    refine: bool = False
    stitch: bool = False


@dataclass
class PipelineConfig:
    """Everything one reconstruction run needs.

    The input case is either a bundle directory (``case``) or explicit
    ``geometry``/``masks``/``soi`` paths. Refinement needs a ``checkpoint``
    or ``train_cases`` (bundle directories with ground truth) to train on.
    """

    out: str
    case: Optional[str] = None
    geometry: Optional[list] = None
    masks: Optional[list] = None
    soi: Optional[str] = None
    stages: Stages = field(default_factory=Stages)
    checkpoint: Optional[str] = None
    train_cases: list = field(default_factory=list)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    stitch_resolution: int = DEFAULT_RESOLUTION

    @classmethod
    def from_json(cls, doc: dict, base_dir=".") -> "PipelineConfig":
        doc = dict(doc)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        base = Path(base_dir)

        def resolve(p):
            return None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))

        try:
            stages = Stages(**doc.pop("stages", {}))
            loss = LossConfig(**doc.pop("loss", {}))
            tdoc = dict(doc.pop("train", {}))
            if "channels" in tdoc:
                tdoc["channels"] = tuple(tdoc["channels"])
            train = TrainConfig(**tdoc)
        except TypeError as exc:
            raise InvalidInputError(f"bad config section: {exc}") from exc
        for k in ("case", "soi", "checkpoint"):
            doc[k] = resolve(doc.get(k))
        for k in ("geometry", "masks"):
            if doc.get(k) is not None:
                doc[k] = [resolve(p) for p in doc[k]]
        doc["train_cases"] = [resolve(p) for p in doc.get("train_cases", [])]
        if "out" not in doc:
            raise InvalidInputError("config needs an output directory ('out')")
        doc["out"] = resolve(doc["out"])
        return cls(stages=stages, loss=loss, train=train, **doc)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"{path}: {exc}") from exc
        return cls.from_json(doc, Path(path).parent)

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_json()
        d["train"] = self.train.to_json()
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def validate(self) -> None:
        """Cheap consistency checks, run before any computation."""
        if self.case is None and not (self.geometry and self.masks and self.soi):
            raise InvalidInputError("give either 'case' or all of 'geometry', 'masks' and 'soi'")
        if self.case is not None and not Path(self.case).is_dir():
            raise InvalidInputError(f"case directory {self.case} does not exist")
        for p in [*(self.geometry or []), *(self.masks or []), self.soi]:
            if p is not None and not Path(p).is_file():
                raise InvalidInputError(f"input file {p} does not exist")
        if self.geometry is not None and len(self.geometry) != 2 or self.masks is not None and len(self.masks) != 2:
            raise InvalidInputError("exactly two views are required")
        st = self.stages
        if st.mi_only and (st.refine or st.stitch):
            raise InvalidInputError("mi_only excludes the refine and stitch stages")
        if st.refine and self.checkpoint is None and not self.train_cases:
            raise InvalidInputError("refine needs a checkpoint or train_cases")
        if self.checkpoint is not None and not Path(self.checkpoint).is_file():
            raise InvalidInputError(f"checkpoint {self.checkpoint} does not exist")
        for d in self.train_cases:
            if not Path(d).is_dir():
                raise InvalidInputError(f"training case {d} does not exist")


def load_inputs(cfg: PipelineConfig) -> io.CaseBundle:
    if cfg.case is not None:
        return io.read_case(cfg.case)
    geoms = [io.read_geometry(p) for p in cfg.geometry]
    masks = [io.read_mask(p) for p in cfg.masks]
    doc = json.loads(Path(cfg.soi).read_text())
    side = io.soi_from_json(doc["side"]) if "side" in doc else None
    return io.CaseBundle(geoms, masks, io.soi_from_json(doc), side_soi=side)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("angiorecon", "numpy", "scipy", "scikit-image", "numba", "pillow"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def manifest(cfg: PipelineConfig) -> dict:
    """Inputs with content hashes, config and its hash, library versions and seed."""
    inputs = {}
    paths = []
    if cfg.case is not None:
        paths = sorted(p for p in Path(cfg.case).iterdir() if p.is_file())
    else:
        paths = [Path(p) for p in [*cfg.geometry, *cfg.masks, cfg.soi]]
    if cfg.checkpoint:
        paths.append(Path(cfg.checkpoint))
    for d in cfg.train_cases:
        paths.extend(sorted(p for p in Path(d).iterdir() if p.is_file()))
    for p in paths:
        inputs[str(p)] = _sha256(p)
    return {"config": cfg.to_json(), "config_sha256": cfg.digest(), "inputs": inputs, "versions": _versions(),
            "seed": cfg.seed}


class StageTimer:
    def __init__(self):
        self.timings = {}

    @contextmanager
    def __call__(self, name: str, source: str = ""):
        t0 = time.perf_counter()
        try:
            yield
        except ReconstructionError as exc:
            where = f" ({source})" if source else ""
            raise type(exc)(f"stage '{name}'{where}: {exc}") from exc
        finally:
            self.timings[name] = time.perf_counter() - t0
            log.info("stage %s: %.3f s", name, self.timings[name])


@dataclass
class RunResult:
    mesh: TubeMesh  # world frame, mm
    mi: MiResult
    report: Optional[MetricReport]
    timings: dict
    stitched: object = None
    calibration: object = None
    outputs: dict = field(default_factory=dict)


def calibrate_views(geometries, sois):
    """LM refinement of both detector shifts from the SOI start/end correspondences."""
    corr = [PointCorrespondence(tuple(sois[0].start_px), tuple(sois[1].start_px), "start"),
            PointCorrespondence(tuple(sois[0].end_px), tuple(sois[1].end_px), "end")]
    return refine_calibration(geometries[0], geometries[1], corr)


def refine_with_model(model: Model, masks, geometries, sois, mi: MiResult, cfg: PipelineConfig) -> TubeMesh:
    sample = prepare_sample(masks, geometries, sois, cfg.train.feature_res, cfg.loss.raster_resolution, mi=mi)
    refined = predict(model, sample, Topo(sample.mesh), cfg.train.absolute_regression)
    return refined.with_vertices(sample.norm.invert(refined.vertices))


def train_from_bundles(cfg: PipelineConfig, out: Path, log_lines=None) -> Model:
    bundles = [io.read_case(d) for d in cfg.train_cases]
    missing = [str(b.path) for b in bundles if not b.has_ground_truth]
    if missing:
        raise InvalidInputError(f"training cases without ground truth: {missing}")
    samples = [prepare_sample(b.masks, b.geometries, b.soi, cfg.train.feature_res, cfg.loss.raster_resolution,
                              b.gt_centerline, b.gt_radii) for b in bundles]
    tcfg = TrainConfig(**{**cfg.train.to_json(), "seed": cfg.seed, "channels": tuple(cfg.train.channels)})
    result = train_sr(samples, tcfg, cfg.loss, log_lines=log_lines, checkpoint_dir=out)
    save_checkpoint(out / "weights.bin", result.model.conv, result.model.gcn,
                    {"train": tcfg.to_json(), "loss": cfg.loss.to_json(), "seed": cfg.seed,
                     "best_epoch": result.best_epoch})
    write_history(out / "loss_history.csv", result.history)
    return result.model


def run_reconstruct(cfg: PipelineConfig) -> RunResult:
    """Run every enabled stage and write the artifacts to ``cfg.out``.

    Files: ``mesh.obj`` (quads), ``mesh_tri.obj``, ``centerline.csv``,
    ``manifest.json``, ``timings.json``, plus ``report.json`` when the case
    has ground truth, ``stitched.obj`` when stitching and the calibrated
    geometries when calibrating.
    """
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    timer = StageTimer()
    src = str(cfg.case or cfg.masks)
    with timer("load", src):
        case = load_inputs(cfg)
        for m, s in zip(case.masks, case.soi):
            s.validate(m.shape)
    geoms = case.geometries
    calib = None
    if cfg.stages.calibrate:
        with timer("calibrate", src):
            calib = calibrate_views(geoms, case.soi)
            geoms = (calib.geometry_a, calib.geometry_b)
            if not calib.converged:
                log.warning("calibration did not converge; using best-so-far shifts")
    with timer("init_mesh", src):
        mi = initial_mesh(case.masks, geoms, case.soi)
    mesh = mi.mesh
    model = None
    if cfg.stages.refine and not cfg.stages.mi_only:
        with timer("refine", str(cfg.checkpoint or cfg.train_cases)):
            if cfg.checkpoint is not None:
                conv, gcn, _ = load_checkpoint(cfg.checkpoint)
                model = Model(conv, gcn)
            else:
                lines = []
                model = train_from_bundles(cfg, out, lines)
                (out / "loss_log.jsonl").write_text("".join(line + "\n" for line in lines))
            mesh = refine_with_model(model, case.masks, geoms, case.soi, mi, cfg)
    stitched = None
    if cfg.stages.stitch and not cfg.stages.mi_only:
        with timer("stitch", src):
            if case.side_soi is None:
                raise InvalidInputError("stitching needs side-branch SOIs ('side' in soi.json)")
            side_mi = initial_mesh(case.masks, geoms, case.side_soi)
            side_mesh = side_mi.mesh
            if model is not None:
                side_mesh = refine_with_model(model, case.masks, geoms, case.side_soi, side_mi, cfg)
            centers = mesh.rings().mean(axis=1)
            side_centers = side_mesh.rings().mean(axis=1)
            stitched = stitch_branches(BranchSet(mesh, centers, [(side_mesh, side_centers)]),
                                       cfg.stitch_resolution)
    report = None
    with timer("write", str(out)):
        io.write_tube_obj(out / "mesh.obj", mesh)
        io.write_tube_obj(out / "mesh_tri.obj", mesh, triangulated=True)
        io.write_centerline(out / "centerline.csv", mesh.rings().mean(axis=1), mi.radii)
        if stitched is not None:
            io.write_obj(out / "stitched.obj", stitched.vertices, stitched.faces)
        if calib is not None:
            for v, g in zip(io.VIEWS, geoms):
                io.write_geometry(out / f"calibrated_geometry_{v}.json", g)
    if case.gt_mesh is not None:
        with timer("metrics", src):
            _, norm = normalize_mesh(case.gt_mesh)
            ops = [projection_from_geometry(g) for g in geoms]
            report = evaluate(mesh.vertices, case.gt_mesh.vertices, norm, mesh.triangles, ops, case.masks)
            (out / "report.json").write_text(report.to_json() + "\n")
    io.write_json(out / "manifest.json", manifest(cfg))
    io.write_json(out / "timings.json", {k: round(v, 6) for k, v in timer.timings.items()})
    outputs = {p.name: str(p) for p in sorted(out.iterdir())}
    return RunResult(mesh, mi, report, dict(timer.timings), stitched, calib, outputs)


def exit_code(exc: BaseException) -> int:
    """0 success, 1 numerical or convergence failure, 2 input or configuration error."""
    from .errors import IllConditionedError, NumericalError

    if isinstance(exc, (NumericalError, IllConditionedError, FloatingPointError)):
        return 1
    return 2
