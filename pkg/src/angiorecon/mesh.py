"""Centerline back-projection, tube mesh construction and mesh normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError, ReconstructionError
from .geometry import ProjectionOperator, ViewGeometry, triangulate
from .masks import Centerline2D, correspond_views, smooth_polyline

N_RINGS = 100
N_SLOTS = 60


@dataclass(frozen=True)
class Topology:
    """Connectivity shared by every tube with the same ring and slot counts."""

    n_rings: int
    n_slots: int
    quads: np.ndarray  # (F, 4)
    edges: np.ndarray  # (E, 2)

    @property
    def n_vertices(self):
        return self.n_rings * self.n_slots


@lru_cache(maxsize=16)
def tube_topology(n_rings: int = N_RINGS, n_slots: int = N_SLOTS) -> Topology:
    i, j = np.meshgrid(np.arange(n_rings), np.arange(n_slots), indexing="ij")
    vid = i * n_slots + j
    nxt = i * n_slots + (j + 1) % n_slots
    ring_edges = np.stack([vid.ravel(), nxt.ravel()], axis=1)
    axial_edges = np.stack([vid[:-1].ravel(), vid[1:].ravel()], axis=1)
    quads = np.stack([vid[:-1].ravel(), nxt[:-1].ravel(), nxt[1:].ravel(), vid[1:].ravel()], axis=1)
    edges = np.concatenate([ring_edges, axial_edges])
    for a in (quads, edges):
        a.setflags(write=False)
    return Topology(n_rings, n_slots, quads, edges)


def split_quads(vertices, quads) -> np.ndarray:
    """Split each quad along its shorter diagonal (0-2 wins ties)."""
    p = vertices[quads]
    d02 = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    d13 = np.linalg.norm(p[:, 3] - p[:, 1], axis=1)
    use02 = d02 <= d13
    q = quads
    t1 = np.where(use02[:, None], q[:, [0, 1, 2]], q[:, [0, 1, 3]])
    t2 = np.where(use02[:, None], q[:, [0, 2, 3]], q[:, [1, 2, 3]])
    return np.stack([t1, t2], axis=1).reshape(-1, 3)


@dataclass
class TubeMesh:
    vertices: np.ndarray  # (n_rings * n_slots, 3)
    topology: Topology
    triangles: np.ndarray = field(default=None)  # (2F, 3), fixed when the mesh is built

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        if self.vertices.shape != (self.topology.n_vertices, 3):
            raise InvalidInputError(f"vertex array {self.vertices.shape} does not match topology")
        if self.triangles is None:
            self.triangles = split_quads(self.vertices, self.topology.quads)

    @property
    def quads(self):
        return self.topology.quads

    @property
    def edges(self):
        return self.topology.edges

    def ring_index(self, vid):
        return divmod(np.asarray(vid), self.topology.n_slots)

    def with_vertices(self, vertices) -> "TubeMesh":
        """Same connectivity (including the triangle split), new positions."""
        return TubeMesh(np.asarray(vertices, dtype=float), self.topology, self.triangles)

    def rings(self) -> np.ndarray:
        return self.vertices.reshape(self.topology.n_rings, self.topology.n_slots, 3)


def _tangents(points):
    d = np.diff(points, axis=0)
    n = np.linalg.norm(d, axis=1)
    if np.any(n == 0):
        raise InvalidInputError(f"duplicate consecutive centerline points at index {int(np.argmin(n))}")
    t = np.concatenate([d, d[-1:]])
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def _rotate_onto(v, a, b):
    """Apply the minimal rotation taking unit vector a to unit vector b to v."""
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.dot(a, b))
    if s < 1e-15:
        return v if c > 0 else -v
    k = axis / s
    return v * c + np.cross(k, v) * s + k * np.dot(k, v) * (1 - c)


def transport_frames(points, u0=None):
    """Rotation-minimizing ring frames.

    The ring plane at point i is perpendicular to the forward chord
    ``P[i+1] - P[i]`` (backward chord at the last point). The first in-plane
    axis is ``normalize(e_k x T0)`` with ``e_k`` the coordinate axis of the
    smallest tangent component (or ``u0`` projected into the first ring
    plane), then parallel-transported.
    """
    t = _tangents(np.asarray(points, dtype=float))
    if u0 is None:
        k = int(np.argmin(np.abs(t[0])))
        e = np.zeros(3)
        e[k] = 1.0
        u = np.cross(e, t[0])
    else:
        u = np.asarray(u0, dtype=float) - np.dot(u0, t[0]) * t[0]
        if np.linalg.norm(u) < 1e-12:
            raise InvalidInputError("initial ring axis is parallel to the first tangent")
    u /= np.linalg.norm(u)
    us = np.empty_like(t)
    us[0] = u
    for i in range(1, len(t)):
        u = _rotate_onto(u, t[i - 1], t[i])
        u = u - np.dot(u, t[i]) * t[i]
        u /= np.linalg.norm(u)
        us[i] = u
    vs = np.cross(t, us)
    return t, us, vs


def build_tube(centerline, radii, n_slots: int = N_SLOTS, u0=None) -> TubeMesh:
    """Sweep a ring of ``n_slots`` vertices of radius ``radii[i]`` around each point."""
    points = np.asarray(centerline, dtype=float)
    radii = np.asarray(radii, dtype=float).ravel()
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 2:
        raise InvalidInputError("centerline must be an (N, 3) array with N >= 2")
    if radii.shape != (len(points),):
        raise InvalidInputError("one radius per centerline point is required")
    if np.any(radii <= 0):
        raise InvalidInputError("radii must be positive")
    _, us, vs = transport_frames(points, u0)
    phi = 2.0 * np.pi * np.arange(n_slots) / n_slots
    ring = np.cos(phi)[None, :, None] * us[:, None, :] + np.sin(phi)[None, :, None] * vs[:, None, :]
    verts = points[:, None, :] + radii[:, None, None] * ring
    return TubeMesh(verts.reshape(-1, 3), tube_topology(len(points), n_slots))


def ring_centers(mesh: TubeMesh) -> np.ndarray:
    return mesh.rings().mean(axis=1)


def first_ring_axis(mesh: TubeMesh) -> np.ndarray:
    """Unit vector from the first ring's center to its slot-0 vertex."""
    r = mesh.rings()[0]
    d = r[0] - r.mean(axis=0)
    return d / np.linalg.norm(d)


def corresponded_tube(template: TubeMesh, template_centerline, centerline, radii) -> TubeMesh:
    """Tube around ``centerline`` whose rings sit at the points nearest to the template's ring centers.

    The slot phase follows the template's first ring, so vertex ``k`` of both
    meshes refers to the same place on the vessel wall. Used to build
    regression targets for a reconstructed template.
    """
    from scipy.interpolate import CubicSpline

    pts = np.asarray(centerline, dtype=float)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    curve = CubicSpline(s, pts)
    rad = CubicSpline(s, np.asarray(radii, dtype=float))
    fine = np.linspace(0.0, s[-1], 50 * len(pts))
    dense = curve(fine)
    q = np.asarray(template_centerline, dtype=float)
    d2 = ((q[:, None, :] - dense[None, :, :]) ** 2).sum(axis=2)
    t = fine[np.argmin(d2, axis=1)]
    step = 1e-3 * s[-1] / len(q)
    for i in range(1, len(t)):  # keep ring parameters strictly increasing
        t[i] = max(t[i], t[i - 1] + step)
    t = np.minimum(t, s[-1])
    for i in range(len(t) - 2, -1, -1):
        t[i] = min(t[i], t[i + 1] - step)
    return build_tube(curve(t), rad(t), template.topology.n_slots, u0=first_ring_axis(template))


# ---------------------------------------------------------------------------
# back-projection


def back_project_centerline(cl_a: Centerline2D, cl_b: Centerline2D, op_a: ProjectionOperator,
                            op_b: ProjectionOperator, g_a: ViewGeometry, g_b: ViewGeometry,
                            smooth_window: int = 5):
    """Triangulate paired 2D centerline samples into a 3D centerline and radius profile.

    Pixel radii are converted to mm at the isocenter magnification and
    averaged over the two views.
    """
    pairs = correspond_views(cl_a, cl_b)
    pts = np.empty((len(pairs), 3))
    for i, j in pairs:
        try:
            pts[i], _ = triangulate(op_a, op_b, cl_a.points[i], cl_b.points[j])
        except ReconstructionError as exc:
            raise type(exc)(f"triangulation failed at centerline index {i}: {exc}") from exc
    ra = cl_a.radii * g_a.pixel_spacing / g_a.magnification
    rb = cl_b.radii * g_b.pixel_spacing / g_b.magnification
    radii = 0.5 * (ra + rb)
    if smooth_window > 1:
        pts = smooth_polyline(pts, smooth_window)
    return pts, radii


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class MeshNormalization:
    """``x_norm = scale * rotation @ (x - translation) + 0.5``."""

    translation: np.ndarray
    rotation: np.ndarray
    scale: float

    def apply(self, pts) -> np.ndarray:
        return self.scale * (np.asarray(pts, dtype=float) - self.translation) @ self.rotation.T + 0.5

    def invert(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - 0.5) / self.scale @ self.rotation + self.translation

    def affine(self) -> np.ndarray:
        """4x4 matrix mapping normalized homogeneous coords back to mm."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.T / self.scale
        m[:3, 3] = self.translation - 0.5 * self.rotation.T.sum(axis=1) / self.scale
        return m

    def to_json(self):
        return {"translation": self.translation.tolist(), "rotation": self.rotation.tolist(), "scale": self.scale}

    @classmethod
    def from_json(cls, d):
        return cls(np.asarray(d["translation"], float), np.asarray(d["rotation"], float), float(d["scale"]))


def rotation_to_z(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    d = d / np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(d, z)
    s = np.linalg.norm(axis)
    c = float(d @ z)
    if s < 1e-15:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    k = axis / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * kx + (1 - c) * kx @ kx


def _chord(obj):
    if isinstance(obj, TubeMesh):
        c = ring_centers(obj)
        return c[0], c[-1], obj.vertices
    pts = np.asarray(obj, dtype=float)
    return pts[0], pts[-1], pts


def normalize_mesh(obj):
    """Center the start/end chord, rotate it onto +z and scale into [0, 1]^3.

    Works on a :class:`TubeMesh` (chord between first and last ring centers)
    or on an (N, 3) centerline. Returns ``(normalized, MeshNormalization)``.
    """
    a, b, pts = _chord(obj)
    if np.linalg.norm(b - a) < 1e-12:
        raise InvalidInputError("degenerate chord: start and end coincide")
    center = 0.5 * (a + b)
    rot = rotation_to_z(b - a)
    local = (pts - center) @ rot.T
    scale = 0.5 / float(np.abs(local).max())
    n = MeshNormalization(center, rot, scale)
    return _map(obj, n.apply), n


def denormalize(obj, n: MeshNormalization):
    return _map(obj, n.invert)


def apply_normalization(obj, n: MeshNormalization):
    return _map(obj, n.apply)


def _map(obj, fn):
    if isinstance(obj, TubeMesh):
        return obj.with_vertices(fn(obj.vertices))
    return fn(obj)


def surface_radius_error_bound(radius: float, n_slots: int = N_SLOTS) -> float:
    """Largest distance from an inscribed n-gon ring to its circle."""
    return radius * (1.0 - math.cos(math.pi / n_slots))
