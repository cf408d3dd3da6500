"""Joining separately reconstructed branches into one watertight surface.

Side branches are snapped onto the main centerline, every tube is closed
with triangle fans, the solids are voxelized on a shared grid by ray parity
and the OR of the occupancies is meshed with marching cubes.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes

from .errors import InvalidInputError
from .kernels import parity_fill
from .mesh import TubeMesh

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 256
GRID_MARGIN = 2
SNAP_DISTANCE = 10.0


@dataclass
class TriMesh:
    """Plain triangle mesh."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def triangles(self):
        return self.faces

    def edge_use(self):
        """Undirected edges (sorted pairs) and how many faces use each."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def boundary_edges(self) -> np.ndarray:
        edges, counts = self.edge_use()
        return edges[counts == 1]

    def is_watertight(self) -> bool:
        """Every edge is shared by exactly two faces."""
        _, counts = self.edge_use()
        return len(counts) > 0 and bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return int(len(used) - len(self.edge_use()[0]) + len(self.faces))

    def n_components(self) -> int:
        n = len(self.vertices)
        if len(self.faces) == 0:
            return 0
        f = self.faces
        rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
        cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        return len(np.unique(labels[np.unique(f)]))

    def volume(self) -> float:
        """Enclosed volume by the divergence theorem (absolute value)."""
        p = self.vertices[self.faces]
        return abs(float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum()) / 6.0)


def cap_tube(mesh: TubeMesh) -> TriMesh:
    """Close both ends of a tube with triangle fans around the ring centroids.

    Fan winding follows the adjacent side triangles so the capped surface is
    consistently oriented.
    """
    rings = mesh.rings()
    n_rings, n_slots = rings.shape[:2]
    verts = np.vstack([mesh.vertices, rings[0].mean(axis=0), rings[-1].mean(axis=0)])
    c0, c1 = len(mesh.vertices), len(mesh.vertices) + 1
    s = np.arange(n_slots)
    s_next = (s + 1) % n_slots
    last = (n_rings - 1) * n_slots
    # side quads run (i,s) -> (i,s+1) -> (i+1,s+1): the first ring edge appears as (s, s+1)
    start = np.stack([np.full(n_slots, c0), s_next, s], axis=1)
    end = np.stack([np.full(n_slots, c1), last + s, last + s_next], axis=1)
    tri = TriMesh(verts, np.vstack([mesh.triangles, start, end]))
    return _orient_outward(tri)


def _orient_outward(m: TriMesh) -> TriMesh:
    p = m.vertices[m.faces]
    signed = np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum()
    if signed < 0:
        return TriMesh(m.vertices, m.faces[:, ::-1].copy())
    return m


def _as_trimesh(m) -> TriMesh:
    if isinstance(m, TriMesh):
        return m
    if isinstance(m, TubeMesh):
        return cap_tube(m)
    raise InvalidInputError(f"expected TubeMesh or TriMesh, got {type(m).__name__}")


# ---------------------------------------------------------------------------
# side branch placement


def translate_side_branch(main_centerline, side_mesh: TubeMesh, side_centerline, snap: float = SNAP_DISTANCE):
    """Rigidly move a side branch so its start lies on the nearest main centerline point.

    Returns ``(mesh, centerline, translation)``. Ties are broken towards the
    lowest main-centerline index.
    """
    main = np.asarray(main_centerline, dtype=float)
    side_cl = np.asarray(side_centerline, dtype=float)
    d = np.linalg.norm(main - side_cl[0], axis=1)
    k = int(np.argmin(d))  # argmin returns the first minimum
    if d[k] > snap:
        raise InvalidInputError(f"side branch start is {d[k]:.3f} mm from the main centerline (limit {snap} mm)")
    shift = main[k] - side_cl[0]
    return side_mesh.with_vertices(side_mesh.vertices + shift), side_cl + shift, shift


# ---------------------------------------------------------------------------
# voxel union


@dataclass(frozen=True)
class VoxelGrid:
    """Cubic voxels; voxel (i, j, k) has its center at ``origin + spacing * (i, j, k)``."""

    origin: np.ndarray
    spacing: float
    shape: tuple

    @classmethod
    def around(cls, meshes, resolution: int = DEFAULT_RESOLUTION, margin: int = GRID_MARGIN) -> "VoxelGrid":
        pts = np.vstack([m.vertices for m in meshes])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        extent = hi - lo
        if resolution <= 2 * margin + 1:
            raise InvalidInputError("resolution too small for the grid margin")
        spacing = float(extent.max()) / (resolution - 1 - 2 * margin)
        if spacing <= 0:
            raise InvalidInputError("degenerate mesh extent")
        shape = tuple(int(min(resolution, np.ceil(e / spacing) + 1 + 2 * margin)) for e in extent)
        return cls(lo - margin * spacing, spacing, shape)

    @property
    def voxel_volume(self) -> float:
        return self.spacing ** 3


def occupancy(mesh, grid: VoxelGrid) -> np.ndarray:
    """Voxel centers inside a closed mesh: ray parity along the three axes, majority vote."""
    tri = _as_trimesh(mesh)
    pts = np.ascontiguousarray(tri.vertices[tri.faces])
    origin = np.asarray(grid.origin, dtype=float)
    shape = np.asarray(grid.shape, dtype=np.int64)
    votes = np.zeros(grid.shape, dtype=np.int8)
    for axis in range(3):
        occ, overflow = parity_fill(pts, origin, grid.spacing, shape, axis)
        if overflow:
            log.warning("parity crossing buffer overflowed along axis %d", axis)
        votes += occ
    return votes >= 2


def mesh_occupancy(occ: np.ndarray, grid: VoxelGrid) -> TriMesh:
    """Marching cubes on the occupancy indicator, mapped back to world coordinates."""
    if not occ.any():
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # The margin keeps the solid away from the grid faces; pad anyway so the surface always closes.
    vol = np.pad(occ.astype(np.float32), 1)
    verts, faces, _, _ = marching_cubes(vol, level=0.5, method="lewiner")
    verts = (verts - 1.0) * grid.spacing + grid.origin
    return _orient_outward(TriMesh(verts, faces))


def boolean_union(a, b, resolution: int = DEFAULT_RESOLUTION) -> TriMesh:
    """Watertight surface of the union of two closed solids (tubes are capped first)."""
    return union_all([a, b], resolution)


def union_all(meshes, resolution: int = DEFAULT_RESOLUTION) -> TriMesh:
    tris = [_as_trimesh(m) for m in meshes]
    for t in tris:
        if t.volume() <= 0.0:
            raise InvalidInputError("zero-volume input mesh")
    grid = VoxelGrid.around(tris, resolution)
    occs = [occupancy(t, grid) for t in tris]
    total = np.zeros(grid.shape, dtype=bool)
    for o in occs:
        if o.any() and total.any() and not (o & total).any():
            warnings.warn("union inputs do not overlap; the result has disjoint shells", RuntimeWarning,
                          stacklevel=2)
        total |= o
    return mesh_occupancy(total, grid)


@dataclass
class BranchSet:
    main: TubeMesh
    main_centerline: np.ndarray
    sides: list = field(default_factory=list)  # (TubeMesh, centerline) pairs


def stitch_branches(bs: BranchSet, resolution: int = DEFAULT_RESOLUTION, snap: float = SNAP_DISTANCE) -> TriMesh:
    """Snap every side branch onto the main centerline and union everything.

    Without side branches the capped main tube is returned as is.
    """
    if not bs.sides:
        return cap_tube(bs.main)
    parts = [bs.main]
    for mesh, cl in bs.sides:
        moved, _, _ = translate_side_branch(bs.main_centerline, mesh, cl, snap)
        parts.append(moved)
    return union_all(parts, resolution)


def dump_occupancy(path, occ: np.ndarray, grid: VoxelGrid) -> None:
    """Debug dump: 8-byte header length, JSON header, packed bits in C order."""
    header = json.dumps({"shape": list(occ.shape), "origin": [float(x) for x in grid.origin],
                         "spacing": grid.spacing}).encode()
    with open(path, "wb") as f:
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(np.packbits(occ.ravel()).tobytes())


def load_occupancy(path):
    with open(path, "rb") as f:
        n = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(n))
        bits = np.frombuffer(f.read(), dtype=np.uint8)
    shape = tuple(header["shape"])
    occ = np.unpackbits(bits)[: int(np.prod(shape))].reshape(shape).astype(bool)
    return occ, VoxelGrid(np.asarray(header["origin"]), header["spacing"], shape)
