"""Command line entry point.

Every subcommand reads and writes the case-bundle formats of :mod:`angiorecon.io`;
exit status is 0 on success, 1 on a numerical failure and 2 on bad input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import io
from .errors import InvalidInputError, ReconstructionError
from .pipeline import PipelineConfig, calibrate_views, exit_code, run_reconstruct, train_from_bundles

log = logging.getLogger("angiorecon")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_phantom_gen(args) -> int:
    from .phantom import generate_suite

    doc = _load_config(args.config)
    n = args.n if args.n is not None else int(doc.get("n", 10))
    noise = args.noise if args.noise is not None else float(doc.get("noise", 0.0))
    out = _out(args)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    cases = generate_suite(n, seed, noise=noise)
    index = []
    for i, c in enumerate(cases):
        name = f"case_{i:03d}"
        io.write_case(out / name, c)
        index.append({"case": name, "split": c.split, "kind": c.spec.kind, "spec_sha256": c.spec.digest()})
    io.write_json(out / "suite.json", {"seed": seed, "n": n, "cases": index})
    print(f"wrote {n} cases to {out}")
    return 0


def cmd_calibrate(args) -> int:
    case = io.read_case(args.case)
    res = calibrate_views(case.geometries, case.soi)
    out = _out(args)
    for v, g in zip(io.VIEWS, (res.geometry_a, res.geometry_b)):
        io.write_geometry(out / f"geometry_{v}.json", g)
    io.write_json(out / "calibration.json", {"initial_cost": res.initial_cost, "final_cost": res.final_cost,
                                             "iterations": res.iterations, "converged": res.converged})
    print(f"cost {res.initial_cost:.6g} -> {res.final_cost:.6g} in {res.iterations} iterations")
    return 0 if res.converged else 1


def cmd_centerline(args) -> int:
    from .reconstruct import view_centerline

    mask = io.read_mask(args.mask)
    soi = dict(zip(io.VIEWS, io.soi_from_json(json.loads(Path(args.soi).read_text()))))[args.view]
    soi.validate(mask.shape)
    cl = view_centerline(mask, soi)
    out = _out(args)
    with open(out / f"centerline_{args.view}.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["u", "v", "r"])
        for (u, v), r in zip(cl.points, cl.radii):
            w.writerow([repr(float(u)), repr(float(v)), repr(float(r))])
    return 0


def cmd_init_mesh(args) -> int:
    from .reconstruct import initial_mesh

    case = io.read_case(args.case)
    mi = initial_mesh(case.masks, case.geometries, case.soi)
    out = _out(args)
    io.write_tube_obj(out / "mesh.obj", mi.mesh)
    io.write_centerline(out / "centerline.csv", mi.centerline, mi.radii)
    return 0


def _pipeline_config(args, **overrides) -> PipelineConfig:
    doc = _load_config(args.config)
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    doc["out"] = str(Path(args.out).resolve()) if args.out else doc.get("out")
    base = Path(args.config).parent if args.config else Path.cwd()
    return PipelineConfig.from_json(doc, base)


def cmd_train_sr(args) -> int:
    cases = list(args.cases or [])
    if args.suite:
        suite = json.loads((Path(args.suite) / "suite.json").read_text())
        cases += [str(Path(args.suite) / c["case"]) for c in suite["cases"] if c["split"] in ("train", "val")]
    overrides = {"train_cases": [str(Path(c).resolve()) for c in cases] or None}
    cfg = _pipeline_config(args, **overrides)
    if args.epochs is not None:
        cfg.train = type(cfg.train)(**{**cfg.train.to_json(), "epochs": args.epochs,
                                       "channels": tuple(cfg.train.channels)})
    if not cfg.train_cases:
        raise InvalidInputError("no training cases given (--cases or --suite)")
    for d in cfg.train_cases:
        if not Path(d).is_dir():
            raise InvalidInputError(f"training case {d} does not exist")
    out = _out(args)
    lines = []
    train_from_bundles(cfg, out, lines)
    (out / "loss_log.jsonl").write_text("".join(line + "\n" for line in lines))
    print(f"weights written to {out / 'weights.bin'}")
    return 0


def cmd_refine(args) -> int:
    cfg = _pipeline_config(args, case=str(Path(args.case).resolve()),
                           checkpoint=str(Path(args.checkpoint).resolve()))
    cfg.stages.refine = True
    cfg.stages.calibrate = not args.no_calibrate
    res = run_reconstruct(cfg)
    if res.report is not None:
        print(res.report.table())
    return 0


def cmd_stitch(args) -> int:
    from .stitch import BranchSet, stitch_branches

    main = io.read_tube_obj(args.main)
    main_cl, _ = io.read_centerline(args.main_centerline)
    if len(args.side) != len(args.side_centerline):
        raise InvalidInputError("one centerline per side branch is required")
    sides = [(io.read_tube_obj(obj), io.read_centerline(cl)[0]) for obj, cl in zip(args.side, args.side_centerline)]
    mesh = stitch_branches(BranchSet(main, main_cl, sides), args.resolution)
    out = _out(args)
    io.write_obj(out / "stitched.obj", mesh.vertices, mesh.faces)
    print(f"watertight={mesh.is_watertight()} components={mesh.n_components()} volume={mesh.volume():.3f} mm^3")
    return 0


def cmd_evaluate(args) -> int:
    from .geometry import projection_from_geometry
    from .mesh import normalize_mesh
    from .metrics import evaluate

    pred = io.read_tube_obj(args.pred)
    if args.gt:
        gt = io.read_tube_obj(args.gt)
        case = io.read_case(args.case) if args.case else None
    else:
        case = io.read_case(args.case)
        gt = case.gt_mesh
        if gt is None:
            raise InvalidInputError(f"{args.case} has no ground-truth mesh")
    _, norm = normalize_mesh(gt)
    ops, masks = (), ()
    if case is not None:
        ops = [projection_from_geometry(g) for g in case.geometries]
        masks = case.masks
    report = evaluate(pred.vertices, gt.vertices, norm, pred.triangles, ops, masks, args.tau)
    print(report.table())
    if args.out:
        out = _out(args)
        (out / "report.json").write_text(report.to_json() + "\n")
    return 0


def cmd_reconstruct(args) -> int:
    overrides = {}
    if args.case:
        overrides["case"] = str(Path(args.case).resolve())
    if args.checkpoint:
        overrides["checkpoint"] = str(Path(args.checkpoint).resolve())
    cfg = _pipeline_config(args, **overrides)
    if args.mi_only:
        cfg.stages.mi_only = True
    res = run_reconstruct(cfg)
    for name, t in res.timings.items():
        print(f"{name:>10}: {t:8.3f} s")
    if res.report is not None:
        print(res.report.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="angiorecon", description="Two-view coronary vessel surface reconstruction.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, out_required=True):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="random seed (default: config value or 0)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("phantom-gen", cmd_phantom_gen, "generate a phantom case suite")
    sp.add_argument("--n", type=int)
    sp.add_argument("--noise", type=float)

    sp = add("calibrate", cmd_calibrate, "refine detector shifts from the SOI end points")
    sp.add_argument("--case", required=True)

    sp = add("centerline", cmd_centerline, "2D centerline and radii of one view")
    sp.add_argument("--mask", required=True)
    sp.add_argument("--soi", required=True, help="soi.json")
    sp.add_argument("--view", choices=io.VIEWS, default="a")

    sp = add("init-mesh", cmd_init_mesh, "mesh initialisation from a case bundle")
    sp.add_argument("--case", required=True)

    sp = add("train-sr", cmd_train_sr, "train the surface-refinement network")
    sp.add_argument("--cases", nargs="*", help="case bundle directories")
    sp.add_argument("--suite", help="phantom-gen output; its train and val cases are used")
    sp.add_argument("--epochs", type=int)

    sp = add("refine", cmd_refine, "reconstruct and refine one case with trained weights")
    sp.add_argument("--case", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--no-calibrate", action="store_true")

    sp = add("stitch", cmd_stitch, "union a main branch with side branches")
    sp.add_argument("--main", required=True)
    sp.add_argument("--main-centerline", required=True)
    sp.add_argument("--side", nargs="+", required=True)
    sp.add_argument("--side-centerline", nargs="+", required=True)
    sp.add_argument("--resolution", type=int, default=256)

    sp = add("evaluate", cmd_evaluate, "metrics of a predicted mesh", out_required=False)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt")
    sp.add_argument("--case")
    sp.add_argument("--tau", type=float, default=0.0005)

    sp = add("reconstruct", cmd_reconstruct, "full pipeline from a config file", out_required=False)
    sp.add_argument("--case")
    sp.add_argument("--checkpoint")
    sp.add_argument("--mi-only", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ReconstructionError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
