"""Mesh initialisation from two masks: SOI crop, 2D centerlines, triangulation, tube."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ViewGeometry, projection_from_geometry
from .masks import Centerline2D, SoiSpec, centerline_2d, crop_and_rotate, to_full_image
from .mesh import TubeMesh, back_project_centerline, build_tube


@dataclass
class MiResult:
    centerline: np.ndarray  # (100, 3) mm
    radii: np.ndarray  # (100,) mm
    mesh: TubeMesh  # world frame, mm
    centerlines_2d: tuple  # Centerline2D per view, full-image pixels


def view_centerline(mask, soi: SoiSpec) -> Centerline2D:
    """Centerline of one view in full-image pixel coordinates."""
    patch, t = crop_and_rotate(mask, soi)
    ends = t.forward(np.array([soi.start_px, soi.end_px], dtype=float))
    return to_full_image(centerline_2d(patch, (ends[0], ends[1])), t)


def initial_mesh(masks, geometries, sois, smooth_window: int = 5) -> MiResult:
    g_a, g_b = geometries
    cls = tuple(view_centerline(m, s) for m, s in zip(masks, sois))
    op_a, op_b = projection_from_geometry(g_a), projection_from_geometry(g_b)
    pts, radii = back_project_centerline(cls[0], cls[1], op_a, op_b, g_a, g_b, smooth_window)
    return MiResult(pts, radii, build_tube(pts, radii), cls)
