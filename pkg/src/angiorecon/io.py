"""File formats: geometry JSON, mask PNG, OBJ, centerline CSV and case bundles."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInputError
from .geometry import ViewGeometry
from .masks import SoiSpec
from .mesh import TubeMesh, tube_topology

VIEWS = ("a", "b")


def _fmt(x: float) -> str:
    # repr round-trips doubles exactly and is platform independent
    return repr(float(x))


# ---------------------------------------------------------------------------
# geometry


def write_geometry(path, g: ViewGeometry) -> None:
    Path(path).write_text(json.dumps(g.to_json(), indent=2) + "\n")


def read_geometry(path) -> ViewGeometry:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    return ViewGeometry.from_json(doc)


# ---------------------------------------------------------------------------
# masks


def write_mask(path, mask) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InvalidInputError(f"mask must be 2D, got shape {m.shape}")
    Image.fromarray(np.where(m > 0, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    """Boolean mask; any nonzero gray value counts as foreground."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except OSError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    return arr > 0


# ---------------------------------------------------------------------------
# meshes


def write_obj(path, vertices, faces) -> None:
    """Wavefront OBJ with 1-based face indices; faces may be triangles or quads."""
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=np.int64)
    lines = [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in v]
    lines += ["f " + " ".join(str(int(i) + 1) for i in row) for row in f]
    Path(path).write_text("\n".join(lines) + "\n")


def write_tube_obj(path, mesh: TubeMesh, triangulated: bool = False) -> None:
    write_obj(path, mesh.vertices, mesh.triangles if triangulated else mesh.topology.quads)


def read_obj(path):
    """Vertices and faces (list of index arrays, 0-based) from an OBJ file."""
    verts, faces = [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{n}: {exc}") from exc
    v = np.asarray(verts, dtype=float).reshape(-1, 3)
    sizes = {len(f) for f in faces}
    f = np.asarray(faces, dtype=np.int64) if len(sizes) == 1 else faces
    return v, f


def read_tube_obj(path) -> TubeMesh:
    """Tube mesh from an OBJ written by :func:`write_tube_obj` (quad or triangle faces)."""
    v, f = read_obj(path)
    topo = tube_topology()
    if len(v) != topo.n_vertices:
        raise InvalidInputError(f"{path}: {len(v)} vertices, a tube has {topo.n_vertices}")
    f = np.asarray(f)
    if f.shape == topo.quads.shape:
        if not np.array_equal(f, topo.quads):
            raise InvalidInputError(f"{path}: faces do not follow the tube template")
        return TubeMesh(v, topo)
    if f.ndim == 2 and f.shape[1] == 3:
        return TubeMesh(v, topo, f)
    raise InvalidInputError(f"{path}: unexpected face layout")


# ---------------------------------------------------------------------------
# centerlines


def write_centerline(path, points, radii) -> None:
    p = np.asarray(points, dtype=float)
    r = np.asarray(radii, dtype=float)
    if len(p) != len(r):
        raise InvalidInputError("one radius per centerline point is required")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x", "y", "z", "r"])
        for (x, y, z), rr in zip(p, r):
            w.writerow([_fmt(x), _fmt(y), _fmt(z), _fmt(rr)])


def read_centerline(path):
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        arr = np.array([[float(r[k]) for k in ("x", "y", "z", "r")] for r in rows])
    except (OSError, KeyError, ValueError) as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc
    return arr[:, :3], arr[:, 3]


# ---------------------------------------------------------------------------
# SOI and case bundles


def soi_to_json(sois, side_sois=None) -> dict:
    """Main-branch SOIs per view; side-branch SOIs, when given, go under ``"side"``."""
    doc = {v: {"start_px": list(map(float, s.start_px)), "end_px": list(map(float, s.end_px)),
               "crop_margin": s.crop_margin} for v, s in zip(VIEWS, sois)}
    if side_sois is not None:
        doc["side"] = soi_to_json(side_sois)
    return doc


def soi_from_json(doc) -> tuple:
    try:
        return tuple(SoiSpec(tuple(doc[v]["start_px"]), tuple(doc[v]["end_px"]), int(doc[v].get("crop_margin", 32)))
                     for v in VIEWS)
    except (KeyError, TypeError) as exc:
        raise InvalidInputError(f"malformed SOI document: {exc}") from exc


def write_case(directory, case) -> Path:
    """Write a :class:`PhantomCase` as a case-bundle directory."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for v, g, m in zip(VIEWS, case.geometries, case.masks):
        write_geometry(d / f"geometry_{v}.json", g)
        write_mask(d / f"mask_{v}.png", m)
    write_tube_obj(d / "gt_mesh.obj", case.gt_mesh)
    write_centerline(d / "gt_centerline.csv", case.gt_centerline, case.gt_radii)
    side = case.side.soi if case.side is not None else None
    (d / "soi.json").write_text(json.dumps(soi_to_json(case.soi, side), indent=2) + "\n")
    (d / "spec.json").write_text(json.dumps(case.spec.to_json(), indent=2) + "\n")
    return d


class CaseBundle:
    """A case read back from disk; ground truth is optional."""

    def __init__(self, geometries, masks, soi, gt_centerline=None, gt_radii=None, gt_mesh=None, spec=None,
                 path=None, side_soi=None):
        self.geometries = tuple(geometries)
        self.masks = tuple(masks)
        self.soi = tuple(soi)
        self.gt_centerline = gt_centerline
        self.gt_radii = gt_radii
        self.gt_mesh = gt_mesh
        self.spec = spec
        self.path = path
        self.side_soi = side_soi

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_centerline is not None and self.gt_mesh is not None


def read_case(directory) -> CaseBundle:
    d = Path(directory)
    if not d.is_dir():
        raise InvalidInputError(f"{d} is not a case directory")
    geoms = [read_geometry(d / f"geometry_{v}.json") for v in VIEWS]
    masks = [read_mask(d / f"mask_{v}.png") for v in VIEWS]
    try:
        doc = json.loads((d / "soi.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"{d / 'soi.json'}: {exc}") from exc
    soi = soi_from_json(doc)
    side = soi_from_json(doc["side"]) if "side" in doc else None
    cl = r = mesh = spec = None
    if (d / "gt_centerline.csv").exists():
        cl, r = read_centerline(d / "gt_centerline.csv")
    if (d / "gt_mesh.obj").exists():
        mesh = read_tube_obj(d / "gt_mesh.obj")
    if (d / "spec.json").exists():
        spec = json.loads((d / "spec.json").read_text())
    return CaseBundle(geoms, masks, soi, cl, r, mesh, spec, d, side)


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
