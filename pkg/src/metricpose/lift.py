"""Lifting a normalized mesh into camera coordinates at metric scale.

The detection box center is back-projected to the predicted center depth Z.
A cube of half-extent R, axis-aligned in the camera frame, is built around
that point (its inscribed sphere has radius R), and the normalized cube
[-0.5, 0.5]^3 is registered onto it by solving for a similarity transform
over the eight corner correspondences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput
from .geometry import (
    CAMERA_METRIC,
    NORMALIZED,
    BoundingBox2D,
    CameraIntrinsics,
    SimilarityTransform,
    TriangleMesh,
    umeyama,
)

_UNIT_SIGNS = np.array(
    [[i, j, k] for i in (-1.0, 1.0) for j in (-1.0, 1.0) for k in (-1.0, 1.0)]
)
NORMALIZED_BOX_CORNERS = 0.5 * _UNIT_SIGNS


def backproject_pixel(u, v, depth, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point seen at continuous pixel (u, v) with z = depth.

    Accepts scalars or equally shaped arrays; returns shape (..., 3).
    """
    d = np.asarray(depth, dtype=np.float64)
    x = (np.asarray(u, dtype=np.float64) - intrinsics.cx) * d / intrinsics.fx
    y = (np.asarray(v, dtype=np.float64) - intrinsics.cy) * d / intrinsics.fy
    return np.stack(np.broadcast_arrays(x, y, d), axis=-1)


@dataclass(frozen=True)
class LiftInputs:
    mesh: TriangleMesh
    bbox: BoundingBox2D
    z_center: float
    radius: float
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        if self.mesh.frame != NORMALIZED:
            raise ValueError("lift expects a normalized mesh")
        if not (self.z_center > 0 and self.radius > 0):
            raise ValueError("z_center and radius must be positive")


def object_center(bbox: BoundingBox2D, z_center: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    u, v = bbox.center
    return backproject_pixel(u, v, z_center, intrinsics)


def metric_box_corners(bbox, z_center, radius, intrinsics) -> np.ndarray:
    """Corners of the camera-aligned cube whose inscribed sphere has radius R."""
    return object_center(bbox, z_center, intrinsics) + radius * _UNIT_SIGNS


def lift_transform(inputs: LiftInputs) -> SimilarityTransform:
    target = metric_box_corners(inputs.bbox, inputs.z_center, inputs.radius, inputs.intrinsics)
    try:
        return umeyama(NORMALIZED_BOX_CORNERS, target)
    except DegenerateInput as exc:  # pragma: no cover - cube corners are never degenerate
        raise AssertionError("box corner registration degenerated") from exc


def lift_to_metric(inputs: LiftInputs) -> TriangleMesh:
    T = lift_transform(inputs)
    return TriangleMesh(T.apply(inputs.mesh.vertices), inputs.mesh.faces, CAMERA_METRIC)
