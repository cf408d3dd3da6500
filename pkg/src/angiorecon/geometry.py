"""C-arm cone-beam projection, two-view triangulation and calibration refinement.

World frame: the isocenter is the origin. With both gantry angles at zero the
source sits on the -y axis at distance ``sod`` and the detector plane is
perpendicular to +y at distance ``sid`` from the source. The primary angle
(LAO positive) rotates about the patient axis z, the secondary angle (CRA
positive) rotates about x; the full rotation is ``Rz(primary) @ Rx(secondary)``.
Detector u runs along +x and v along -z (image rows grow downward, head up),
both rotated with the gantry. Pixel centers sit at integer coordinates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DegenerateProjectionError, IllConditionedError, InvalidInputError


@dataclass(frozen=True)
class ViewGeometry:
    primary_angle: float
    secondary_angle: float
    sid: float
    sod: float
    pixel_spacing: float
    image_size: tuple[int, int]
    principal_point: tuple[float, float]
    detector_shift: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.sid > self.sod > 0):
            raise InvalidInputError(f"need sid > sod > 0, got sid={self.sid}, sod={self.sod}")
        if not self.pixel_spacing > 0:
            raise InvalidInputError("pixel_spacing must be positive")
        if len(self.image_size) != 2 or min(self.image_size) < 2:
            raise InvalidInputError(f"bad image_size {self.image_size}")
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        object.__setattr__(self, "principal_point", tuple(float(x) for x in self.principal_point))
        object.__setattr__(self, "detector_shift", tuple(float(x) for x in self.detector_shift))

    @property
    def magnification(self) -> float:
        return self.sid / self.sod

    def with_shift(self, shift) -> "ViewGeometry":
        return replace(self, detector_shift=(float(shift[0]), float(shift[1])))

    def to_json(self) -> dict:
        return {
            "primary_angle_deg": self.primary_angle,
            "secondary_angle_deg": self.secondary_angle,
            "sid_mm": self.sid,
            "sod_mm": self.sod,
            "pixel_spacing_mm": self.pixel_spacing,
            "image_width": self.image_size[0],
            "image_height": self.image_size[1],
            "principal_point_px": list(self.principal_point),
            "detector_shift_px": list(self.detector_shift),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ViewGeometry":
        spacing = doc["pixel_spacing_mm"]
        if isinstance(spacing, (list, tuple)):
            if len(spacing) != 2 or not math.isclose(spacing[0], spacing[1]):
                raise InvalidInputError(f"anisotropic pixel spacing {spacing} is not supported")
            spacing = spacing[0]
        try:
            return cls(
                primary_angle=float(doc["primary_angle_deg"]),
                secondary_angle=float(doc["secondary_angle_deg"]),
                sid=float(doc["sid_mm"]),
                sod=float(doc["sod_mm"]),
                pixel_spacing=float(spacing),
                image_size=(int(doc["image_width"]), int(doc["image_height"])),
                principal_point=tuple(doc["principal_point_px"]),
                detector_shift=tuple(doc.get("detector_shift_px", (0.0, 0.0))),
            )
        except KeyError as exc:
            raise InvalidInputError(f"geometry document missing field {exc}") from None


@dataclass(frozen=True)
class ProjectionOperator:
    matrix: np.ndarray
    source_position: np.ndarray

    def scaled(self, lam: float) -> "ProjectionOperator":
        return ProjectionOperator(self.matrix * lam, self.source_position)


@dataclass(frozen=True)
class PointCorrespondence:
    view_a_point: tuple[float, float]
    view_b_point: tuple[float, float]
    label: str = "start"

    def __post_init__(self):
        if self.label not in ("start", "end"):
            raise InvalidInputError(f"unknown correspondence label {self.label!r}")


def gantry_rotation(primary_deg: float, secondary_deg: float) -> np.ndarray:
    a = math.radians(primary_deg)
    b = math.radians(secondary_deg)
    rz = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(b), -math.sin(b)], [0.0, math.sin(b), math.cos(b)]])
    return rz @ rx


def source_and_detector(g: ViewGeometry):
    """Explicit placement of the source, detector center and detector axes (all in mm)."""
    rot = gantry_rotation(g.primary_angle, g.secondary_angle)
    source = rot @ np.array([0.0, -g.sod, 0.0])
    center = rot @ np.array([0.0, g.sid - g.sod, 0.0])
    eu = rot @ np.array([1.0, 0.0, 0.0])
    ev = rot @ np.array([0.0, 0.0, -1.0])
    return source, center, eu, ev


def projection_from_geometry(g: ViewGeometry) -> ProjectionOperator:
    rot = gantry_rotation(g.primary_angle, g.secondary_angle)
    f = g.sid / g.pixel_spacing
    cu = g.principal_point[0] + g.detector_shift[0]
    cv = g.principal_point[1] + g.detector_shift[1]
    # camera frame: q = R^T x, depth w = q_y + sod
    k = np.array([
        [f, cu, 0.0, cu * g.sod],
        [0.0, cv, -f, cv * g.sod],
        [0.0, 1.0, 0.0, g.sod],
    ])
    ext = np.eye(4)
    ext[:3, :3] = rot.T
    matrix = k @ ext
    source = rot @ np.array([0.0, -g.sod, 0.0])
    return ProjectionOperator(matrix, source)


def project(op: ProjectionOperator, p) -> np.ndarray:
    """Project one point (3,) or many points (N, 3) to pixel coordinates."""
    p = np.asarray(p, dtype=float)
    pts = np.atleast_2d(p)
    hom = pts @ op.matrix[:, :3].T + op.matrix[:, 3]
    w = hom[:, 2]
    tol = 1e-12 * np.linalg.norm(op.matrix) * (1.0 + np.linalg.norm(pts, axis=1))
    bad = np.abs(w) <= tol
    if np.any(bad):
        raise DegenerateProjectionError(f"point(s) {np.flatnonzero(bad).tolist()} lie on the source plane")
    uv = hom[:, :2] / w[:, None]
    return uv[0] if p.ndim == 1 else uv


def back_project_ray(op: ProjectionOperator, uv):
    """Return (origin, unit direction) of the ray through pixel ``uv``."""
    m = op.matrix[:, :3]
    direction = np.linalg.solve(m, np.array([uv[0], uv[1], 1.0]))
    origin = -np.linalg.solve(m, op.matrix[:, 3])
    return origin, direction / np.linalg.norm(direction)


def _ray_order_key(op: ProjectionOperator):
    s = -np.linalg.solve(op.matrix[:, :3], op.matrix[:, 3])
    return tuple(np.round(s, 9))


def triangulate(op_a: ProjectionOperator, op_b: ProjectionOperator, pa, pb):
    """Midpoint of the common perpendicular of the two back-projected rays.

    Returns ``(point, residual)`` where residual is half the gap between the
    rays. The result does not depend on the order in which the views are given.
    """
    if _ray_order_key(op_b) < _ray_order_key(op_a):
        op_a, op_b, pa, pb = op_b, op_a, pb, pa
    sa, da = back_project_ray(op_a, pa)
    sb, db = back_project_ray(op_b, pb)
    if np.linalg.norm(sa - sb) <= 1.0:
        raise InvalidInputError("views are not distinct (source positions within 1 mm)")
    cross = np.cross(da, db)
    sin_angle = np.linalg.norm(cross)
    if sin_angle < 1e-6:
        raise IllConditionedError("back-projected rays are near parallel")
    w = sa - sb
    b = da @ db
    d = da @ w
    e = db @ w
    denom = 1.0 - b * b
    ta = (b * e - d) / denom
    tb = (e - b * d) / denom
    qa = sa + ta * da
    qb = sb + tb * db
    return 0.5 * (qa + qb), 0.5 * float(np.linalg.norm(qa - qb))


# ---------------------------------------------------------------------------
# Levenberg-Marquardt refinement of detector shifts


@dataclass
class CalibrationResult:
    geometry_a: ViewGeometry
    geometry_b: ViewGeometry
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def lm_step(jac: np.ndarray, res: np.ndarray, damping: float) -> np.ndarray:
    """Damped Gauss-Newton step ``-(J^T J + lambda I)^-1 J^T r``."""
    jtj = jac.T @ jac
    return -np.linalg.solve(jtj + damping * np.eye(jtj.shape[0]), jac.T @ res)


def _reprojection_residuals(g_a, g_b, corr):
    op_a = projection_from_geometry(g_a)
    op_b = projection_from_geometry(g_b)
    out = []
    for c in corr:
        x, _ = triangulate(op_a, op_b, c.view_a_point, c.view_b_point)
        out.append(project(op_a, x) - np.asarray(c.view_a_point))
        out.append(project(op_b, x) - np.asarray(c.view_b_point))
    return np.concatenate(out)


def refine_calibration(
    g_a: ViewGeometry,
    g_b: ViewGeometry,
    corr: Sequence[PointCorrespondence],
    views: Sequence[str] = ("a", "b"),
    max_iter: int = 200,
    fd_step: float = 1e-6,
) -> CalibrationResult:
    """Adjust detector shifts so the correspondences triangulate consistently.

    The cost is the sum of squared reprojection errors of each triangulated
    correspondence in both views. ``views`` selects which detectors are free
    (both by default: a 4-vector ``[du_a, dv_a, du_b, dv_b]``). Two
    correspondences constrain only two directions, so when both detectors are
    free the solution closest to the starting shifts is returned.
    """
    if len(corr) < 2:
        raise InvalidInputError("need at least two correspondences")
    for i, ci in enumerate(corr):
        for cj in corr[i + 1:]:
            if np.allclose(ci.view_a_point, cj.view_a_point) or np.allclose(ci.view_b_point, cj.view_b_point):
                raise InvalidInputError("coincident correspondence points")
    views = tuple(views)
    if not views or any(v not in ("a", "b") for v in views):
        raise InvalidInputError(f"views must be a subset of ('a', 'b'), got {views}")

    def unpack(x):
        ga, gb = g_a, g_b
        k = 0
        if "a" in views:
            ga = g_a.with_shift(x[k:k + 2])
            k += 2
        if "b" in views:
            gb = g_b.with_shift(x[k:k + 2])
        return ga, gb

    x = np.concatenate([np.asarray(g.detector_shift) for v, g in (("a", g_a), ("b", g_b)) if v in views])

    def residuals(x):
        return _reprojection_residuals(*unpack(x), corr)

    def jacobian(x, r0):
        jac = np.empty((r0.size, x.size))
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = fd_step
            jac[:, k] = (residuals(x + e) - residuals(x - e)) / (2 * fd_step)
        return jac

    r = residuals(x)
    cost = float(r @ r)
    initial_cost = cost
    damping = 1e-3
    history = [cost]
    converged = cost == 0.0
    it = 0
    while not converged and it < max_iter:
        it += 1
        jac = jacobian(x, r)
        while True:
            step = lm_step(jac, r, damping)
            x_new = x + step
            r_new = residuals(x_new)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                decrease = cost - cost_new
                x, r, cost = x_new, r_new, cost_new
                damping /= 10.0
                history.append(cost)
                if decrease < 1e-12 or np.linalg.norm(step) < 1e-10 or cost == 0.0:
                    converged = True
                break
            damping *= 10.0
            if np.linalg.norm(step) < 1e-10 or damping > 1e16:
                converged = True
                break
    if not converged:
        warnings.warn(f"calibration did not converge in {max_iter} iterations", RuntimeWarning)
    ga, gb = unpack(x)
    return CalibrationResult(ga, gb, initial_cost, cost, it, converged, history)
