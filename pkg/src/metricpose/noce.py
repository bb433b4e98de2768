"""Normalized object center estimation.

A detector crop of side H_o is resized to a square network patch of side
H_patch, which destroys the apparent-size cue for distance. The object
center depth is therefore regressed in a normalized form

    z_noce = Z * tau / f,    tau = H_o / H_patch

and the metric depth is restored with the detection's own box and focal
length. The radius is regressed relative to Z and restored by multiplying.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidBox
from .geometry import BoundingBox2D, CameraIntrinsics

DEFAULT_PATCH_SIZE = 192


@dataclass(frozen=True)
class NoceScalars:
    z_noce: float
    r_norm: float
    tau: float
    h_patch: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.h_patch > 0:
            raise ValueError("h_patch must be positive")


def resize_ratio(bbox: BoundingBox2D, h_patch: float = DEFAULT_PATCH_SIZE) -> float:
    if not bbox.is_valid():
        raise InvalidBox(f"degenerate bounding box {bbox}")
    if not h_patch > 0:
        raise ValueError("h_patch must be positive")
    return bbox.size / h_patch


def noce_normalize(
    z_center: float,
    bbox: BoundingBox2D,
    h_patch: float = DEFAULT_PATCH_SIZE,
    intrinsics: CameraIntrinsics | None = None,
    f: float | None = None,
) -> float:
    """Metric center depth -> normalized value. `f` overrides intrinsics.fx."""
    if not z_center > 0:
        raise ValueError("z_center must be positive")
    tau = resize_ratio(bbox, h_patch)
    return z_center * tau / _focal(intrinsics, f)


def noce_denormalize(
    z_noce: float,
    bbox: BoundingBox2D,
    h_patch: float = DEFAULT_PATCH_SIZE,
    intrinsics: CameraIntrinsics | None = None,
    f: float | None = None,
) -> float:
    if not z_noce > 0:
        raise ValueError("z_noce must be positive")
    tau = resize_ratio(bbox, h_patch)
    return z_noce * _focal(intrinsics, f) / tau


def radius_normalize(radius: float, z_center: float) -> float:
    return radius / z_center


def radius_denormalize(r_norm: float, z_center: float) -> float:
    if not (r_norm > 0 and z_center > 0):
        raise ValueError("r_norm and z_center must be positive")
    return r_norm * z_center


def noce_scalars(
    z_center: float,
    radius: float,
    bbox: BoundingBox2D,
    intrinsics: CameraIntrinsics,
    h_patch: int = DEFAULT_PATCH_SIZE,
) -> NoceScalars:
    """Training-target form of a ground-truth (Z, R) pair."""
    return NoceScalars(
        z_noce=noce_normalize(z_center, bbox, h_patch, intrinsics),
        r_norm=radius_normalize(radius, z_center),
        tau=resize_ratio(bbox, h_patch),
        h_patch=h_patch,
    )


def _focal(intrinsics, f):
    if f is None:
        if intrinsics is None:
            raise ValueError("either intrinsics or f is required")
        f = intrinsics.f
    if not f > 0:
        raise ValueError("focal length must be positive")
    return float(f)
