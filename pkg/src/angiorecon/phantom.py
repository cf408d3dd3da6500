"""Synthetic vessel phantoms with analytic ground truth.

A phantom is a parametric centerline with a radius profile (optional Gaussian
stenosis and one optional straight side branch), placed near the isocenter
and imaged through two C-arm views. Masks are computed by intersecting the
ray through every pixel center with the swept tube itself, not with its mesh,
so mask ground truth stays independent of the mesh code.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError
from .geometry import ViewGeometry, project, projection_from_geometry, source_and_detector
from .kernels import tube_silhouette
from .masks import SoiSpec, resample_polyline
from .mesh import TubeMesh, build_tube

KINDS = ("straight", "arc", "helix", "spline")


@dataclass(frozen=True)
class Stenosis:
    position: float  # fraction of length
    severity: float  # diameter reduction fraction
    width: float  # Gaussian sigma in mm


@dataclass(frozen=True)
class Bifurcation:
    branch_point: float  # fraction of main length
    angle: float  # degrees from the main tangent
    radius: float  # mm
    length: float  # mm
    roll: float = 0.0  # degrees, rotation of the branch plane about the main tangent


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "straight"
    length: float = 40.0
    base_radius: float = 2.0
    stenosis: Optional[Stenosis] = None
    bifurcation: Optional[Bifurcation] = None
    views: tuple = ()
    noise: float = 0.0  # flip probability for pixels in the 1-px boundary band
    seed: int = 0
    bend: float = 60.0  # arc: total turning angle (deg)
    helix_radius: float = 5.0
    helix_turns: float = 0.5
    control_points: Optional[tuple] = None  # spline: ((x, y, z), ...)
    orientation: tuple = (0.0, 0.0, 0.0)  # xyz Euler angles (deg) applied to the +z-aligned curve
    offset: tuple = (0.0, 0.0, 0.0)  # mm

    def validate(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown centerline kind {self.kind!r}")
        if self.length <= 0 or self.base_radius <= 0:
            raise InvalidInputError("length and base_radius must be positive")
        if len(self.views) != 2:
            raise InvalidInputError("a phantom needs exactly two views")
        if self.stenosis is not None:
            s = self.stenosis
            if not (0 < s.severity <= 0.9) or not (0 <= s.position <= 1) or s.width <= 0:
                raise InvalidInputError(f"invalid stenosis {s}")
        if self.bifurcation is not None:
            b = self.bifurcation
            if not (0 <= b.branch_point <= 1) or b.radius <= 0 or b.length <= 0:
                raise InvalidInputError(f"invalid bifurcation {b}")
        if not 0 <= self.noise <= 1:
            raise InvalidInputError("noise is a probability in [0, 1]")
        if self.kind == "spline" and (self.control_points is None or len(self.control_points) < 3):
            raise InvalidInputError("spline phantoms need at least three control points")

    def to_json(self) -> dict:
        d = asdict(self)
        d["views"] = [v.to_json() for v in self.views]
        return d

    @classmethod
    def from_json(cls, d) -> "PhantomSpec":
        d = dict(d)
        d["views"] = tuple(ViewGeometry.from_json(v) for v in d["views"])
        if d.get("stenosis"):
            d["stenosis"] = Stenosis(**d["stenosis"])
        if d.get("bifurcation"):
            d["bifurcation"] = Bifurcation(**d["bifurcation"])
        for k in ("orientation", "offset"):
            d[k] = tuple(d[k])
        if d.get("control_points") is not None:
            d["control_points"] = tuple(tuple(p) for p in d["control_points"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


@dataclass
class Branch:
    centerline: np.ndarray  # (100, 3) mm
    radii: np.ndarray  # (100,) mm
    mesh: TubeMesh
    soi: tuple  # one SoiSpec per view


@dataclass
class PhantomCase:
    spec: PhantomSpec
    main: Branch
    masks: tuple  # two (H, W) bool arrays
    geometries: tuple
    side: Optional[Branch] = None
    split: str = "train"

    # flat aliases matching the documented case fields
    @property
    def gt_centerline(self):
        return self.main.centerline

    @property
    def gt_radii(self):
        return self.main.radii

    @property
    def gt_mesh(self):
        return self.main.mesh

    @property
    def soi(self):
        return self.main.soi


def _local_curve(spec: PhantomSpec, n: int) -> np.ndarray:
    """Centerline in the curve's own frame, sampled uniformly in arc length."""
    L = spec.length
    s = np.linspace(0.0, L, n)
    if spec.kind == "straight":
        return np.stack([np.zeros(n), np.zeros(n), s], axis=1)
    if spec.kind == "arc":
        theta = math.radians(spec.bend)
        if theta < 1e-9:
            return np.stack([np.zeros(n), np.zeros(n), s], axis=1)
        rho = L / theta
        return np.stack([rho * (1 - np.cos(s / rho)), np.zeros(n), rho * np.sin(s / rho)], axis=1)
    if spec.kind == "helix":
        a = spec.helix_radius
        total_angle = 2 * math.pi * spec.helix_turns
        # choose the pitch so the curve has length L over the requested turns
        c2 = (L / total_angle) ** 2 - a * a if total_angle > 0 else L * L
        if c2 <= 0:
            raise InvalidInputError("helix radius too large for the requested length and turns")
        speed = math.sqrt(a * a + c2)
        t = s / speed
        return np.stack([a * np.cos(t) - a, a * np.sin(t), math.sqrt(c2) * t], axis=1)
    cp = np.asarray(spec.control_points, dtype=float)
    knots = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(cp, axis=0), axis=1))])
    spline = CubicSpline(knots, cp, bc_type="natural")
    dense = spline(np.linspace(0.0, knots[-1], 4000))
    seglen = np.linalg.norm(np.diff(dense, axis=0), axis=1).sum()
    return resample_polyline(dense * (L / seglen), n)


def centerline_points(spec: PhantomSpec, n: int = 100) -> np.ndarray:
    local = _local_curve(spec, n)
    local = local - 0.5 * (local[0] + local[-1])
    rot = Rotation.from_euler("xyz", spec.orientation, degrees=True).as_matrix()
    return local @ rot.T + np.asarray(spec.offset, dtype=float)


def radius_profile(spec: PhantomSpec, n: int = 100) -> np.ndarray:
    r = np.full(n, spec.base_radius)
    if spec.stenosis is not None:
        st = spec.stenosis
        s = np.linspace(0.0, spec.length, n)
        r = r - st.severity * spec.base_radius * np.exp(-0.5 * ((s - st.position * spec.length) / st.width) ** 2)
    return r


def side_branch_points(spec: PhantomSpec, main_pts: np.ndarray, n: int = 100) -> np.ndarray:
    b = spec.bifurcation
    s = np.linspace(0.0, spec.length, len(main_pts))
    k = int(np.argmin(np.abs(s - b.branch_point * spec.length)))
    k = min(max(k, 1), len(main_pts) - 2)
    t = main_pts[k + 1] - main_pts[k - 1]
    t /= np.linalg.norm(t)
    helper = np.eye(3)[int(np.argmin(np.abs(t)))]
    perp = np.cross(t, helper)
    perp /= np.linalg.norm(perp)
    perp = Rotation.from_rotvec(math.radians(b.roll) * t).apply(perp)
    ang = math.radians(b.angle)
    d = math.cos(ang) * t + math.sin(ang) * perp
    return main_pts[k] + np.linspace(0.0, b.length, n)[:, None] * d[None, :]


def render_mask(g: ViewGeometry, points, radii) -> np.ndarray:
    op = projection_from_geometry(g)
    minv = np.linalg.inv(op.matrix[:, :3])
    source, _, _, _ = source_and_detector(g)
    w, h = g.image_size
    return tube_silhouette(op.matrix, minv, source, np.ascontiguousarray(points, dtype=float),
                           np.ascontiguousarray(radii, dtype=float), w, h)


def jitter_boundary(mask: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Flip pixels in the 1-px band on either side of the boundary with probability ``prob``."""
    if prob <= 0:
        return mask
    band = ndimage.binary_dilation(mask) & ~ndimage.binary_erosion(mask)
    flips = band & (rng.random(mask.shape) < prob)
    return mask ^ flips


def _soi(g, pts) -> SoiSpec:
    op = projection_from_geometry(g)
    a, b = project(op, pts[0]), project(op, pts[-1])
    return SoiSpec((float(a[0]), float(a[1])), (float(b[0]), float(b[1])))


def generate(spec: PhantomSpec) -> PhantomCase:
    spec.validate()
    pts = centerline_points(spec)
    radii = radius_profile(spec)
    if np.any(radii <= 0):
        raise InvalidInputError("radius profile is not positive everywhere")
    main = Branch(pts, radii, build_tube(pts, radii), tuple(_soi(g, pts) for g in spec.views))
    side = None
    if spec.bifurcation is not None:
        spts = side_branch_points(spec, pts)
        sradii = np.full(len(spts), spec.bifurcation.radius)
        side = Branch(spts, sradii, build_tube(spts, sradii), tuple(_soi(g, spts) for g in spec.views))
    rng = np.random.default_rng(spec.seed)
    masks = []
    for g in spec.views:
        m = render_mask(g, pts, radii)
        if side is not None:
            m |= render_mask(g, side.centerline, side.radii)
        masks.append(jitter_boundary(m, spec.noise, rng))
    return PhantomCase(spec, main, tuple(masks), tuple(spec.views), side)


def default_view_pair(image_size=512, pixel_spacing=0.3, sid=1000.0, sod=750.0,
                      angles=((30.0, 0.0), (-30.0, 20.0))):
    pp = ((image_size - 1) / 2.0, (image_size - 1) / 2.0)
    return tuple(ViewGeometry(a, b, sid, sod, pixel_spacing, (image_size, image_size), pp) for a, b in angles)


def random_spec(rng: np.random.Generator, seed: int, stenosed: bool, kind=None,
                image_size=512, pixel_spacing=0.3, noise=0.0) -> PhantomSpec:
    """One spec drawn from the documented suite ranges.

    length 20-60 mm, radius 1-3 mm, 30-70 % stenosis when ``stenosed``,
    view A at primary -50..-20 deg, view B at 20..50 deg, secondary -20..20 deg.
    """
    kind = kind or KINDS[int(rng.integers(len(KINDS)))]
    length = float(rng.uniform(20, 60))
    radius = float(rng.uniform(1, 3))
    angles = ((float(rng.uniform(-50, -20)), float(rng.uniform(-20, 20))),
              (float(rng.uniform(20, 50)), float(rng.uniform(-20, 20))))
    views = default_view_pair(image_size, pixel_spacing, angles=angles)
    sources = [source_and_detector(g)[0] for g in views]
    sources = [s / np.linalg.norm(s) for s in sources]
    while True:
        euler = tuple(float(x) for x in rng.uniform(-180, 180, size=3))
        axis = Rotation.from_euler("xyz", euler, degrees=True).apply([0.0, 0.0, 1.0])
        if all(abs(axis @ s) < 0.6 for s in sources):
            break
    sten = None
    if stenosed:
        sten = Stenosis(float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)), float(rng.uniform(2.0, 5.0)))
    extra = {}
    if kind == "arc":
        extra["bend"] = float(rng.uniform(20, 90))
    elif kind == "helix":
        extra["helix_radius"] = float(rng.uniform(2, 6))
        extra["helix_turns"] = float(rng.uniform(0.2, 0.5))
    elif kind == "spline":
        zs = np.linspace(0, length, 5)
        xy = rng.normal(0, length * 0.08, size=(5, 2))
        extra["control_points"] = tuple((float(x), float(y), float(z)) for (x, y), z in zip(xy, zs))
    offset = tuple(float(x) for x in rng.uniform(-5, 5, size=3))
    return PhantomSpec(kind=kind, length=length, base_radius=radius, stenosis=sten, views=views,
                       noise=noise, seed=seed, orientation=euler, offset=offset, **extra)


def split_labels(n: int) -> list:
    """70/15/15 split: floor for train and val, remainder to test (n=10 -> 7/1/2)."""
    n_train = int(math.floor(0.7 * n))
    n_val = int(math.floor(0.15 * n))
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def generate_suite(n: int, seed: int, **kwargs) -> list:
    if n < 1:
        raise InvalidInputError("suite size must be at least 1")
    rng = np.random.default_rng(seed)
    labels = split_labels(n)
    cases = []
    for i in range(n):
        case_seed = int(rng.integers(2**63 - 1))
        spec = random_spec(rng, case_seed, stenosed=(i % 2 == 0), **kwargs)
        case = generate(spec)
        case.split = labels[i]
        cases.append(case)
    return cases
