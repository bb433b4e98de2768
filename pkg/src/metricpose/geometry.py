"""Core geometric types, the pinhole camera and similarity transforms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateInput, NotARotation

NORMALIZED = "normalized"
CAMERA_METRIC = "camera-metric"
NORMALIZED_RADIUS = 0.5


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {arr.shape}")
    return arr


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    if np.abs(R.T @ R - np.eye(3)).max() > tol:
        return False
    return abs(np.linalg.det(R) - 1.0) <= tol


def nearest_rotation(M) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ S @ Vt


def axis_angle_rotation(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (normalized Gaussian quaternion)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _fields_equal(a, b, names) -> bool:
    return all(np.array_equal(getattr(a, n), getattr(b, n)) for n in names)


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """p -> scale * rotation @ p + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not is_rotation(R):
            raise NotARotation("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def __eq__(self, other):
        if not isinstance(other, SimilarityTransform):
            return NotImplemented
        return _fields_equal(self, other, ("scale", "rotation", "translation"))

    __hash__ = None

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        pts = _as_points(points)
        return self.scale * pts @ self.rotation.T + self.translation

    def compose(self, inner: SimilarityTransform) -> SimilarityTransform:
        """Return self o inner, i.e. apply `inner` first."""
        return SimilarityTransform(
            self.scale * inner.scale,
            self.rotation @ inner.rotation,
            self.scale * self.rotation @ inner.translation + self.translation,
        )

    def inverse(self) -> SimilarityTransform:
        Rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, Rt, -(Rt @ self.translation) / self.scale)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T


def apply_similarity(T: SimilarityTransform, p) -> np.ndarray:
    """s * R * p + t for a single point or an (N, 3) array."""
    p = np.asarray(p, dtype=np.float64)
    out = T.apply(p)
    return out[0] if p.ndim == 1 else out


def umeyama(source, target, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity transform mapping `source` onto `target`.

    Closed-form SVD solution with the determinant-sign correction, so the
    returned rotation is always proper. The scale is the variance-normalized
    estimate trace(D S) / sigma_source^2.

    Raises:
        DegenerateInput: fewer than 3 pairs, or the centered source spans
            fewer than two dimensions.
    """
    src = _as_points(source)
    dst = _as_points(target)
    if src.shape != dst.shape:
        raise ValueError(f"shape mismatch: {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateInput(f"umeyama needs at least 3 point pairs, got {n}")

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    dsrc = src - mu_src
    ddst = dst - mu_dst

    spread = np.linalg.svd(dsrc, compute_uv=False)
    if spread[0] == 0.0 or spread[1] <= 1e-10 * spread[0]:
        raise DegenerateInput("source points are collinear or coincident")

    cov = ddst.T @ dsrc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt

    if with_scale:
        var_src = np.einsum("ij,ij->", dsrc, dsrc) / n
        scale = float(np.dot(D, S) / var_src)
    else:
        scale = 1.0
    if not scale > 0:
        raise DegenerateInput(f"non-positive scale estimate {scale}")
    t = mu_dst - scale * R @ mu_src
    return SimilarityTransform(scale, R, t)


def rotation_geodesic_deg(Ra, Rb) -> float:
    Ra = np.asarray(Ra, dtype=np.float64)
    Rb = np.asarray(Rb, dtype=np.float64)
    if not (is_rotation(Ra, 1e-6) and is_rotation(Rb, 1e-6)):
        raise NotARotation("rotation_geodesic_deg needs proper rotations")
    cos = (np.trace(Ra @ Rb.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def f(self) -> float:
        # single-focal formulas use fx
        return self.fx

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points) -> np.ndarray:
        """Continuous pixel coordinates (u, v) of camera-frame points."""
        pts = _as_points(points)
        z = pts[:, 2]
        return np.stack(
            [self.fx * pts[:, 0] / z + self.cx, self.fy * pts[:, 1] / z + self.cy], axis=1
        )

    def to_list(self) -> list:
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height]


@dataclass(frozen=True)
class BoundingBox2D:
    x: float
    y: float
    w: float
    h: float

    @property
    def size(self) -> float:
        """H_o, the longer side, which governs a square resize."""
        return max(self.w, self.h)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def is_valid(self) -> bool:
        return bool(np.isfinite([self.x, self.y, self.w, self.h]).all() and self.w > 0 and self.h > 0)


@dataclass(frozen=True, eq=False)
class OrientedBox3D:
    center: np.ndarray
    rotation: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        h = np.array(self.half_extents, dtype=np.float64).reshape(3)
        if not is_rotation(R, 1e-6):
            raise NotARotation("box rotation is not a proper rotation")
        if not np.all(h > 0):
            raise ValueError("half extents must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "half_extents", h)

    def __eq__(self, other):
        if not isinstance(other, OrientedBox3D):
            return NotImplemented
        return _fields_equal(self, other, ("center", "rotation", "half_extents"))

    __hash__ = None

    @property
    def volume(self) -> float:
        return float(8.0 * np.prod(self.half_extents))

    def corners(self) -> np.ndarray:
        signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=float)
        return (signs * self.half_extents) @ self.rotation.T + self.center

    def contains(self, points) -> np.ndarray:
        local = (_as_points(points) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents, axis=1)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    frame: str = NORMALIZED

    def __post_init__(self):
        V = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        F = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.frame not in (NORMALIZED, CAMERA_METRIC):
            raise ValueError(f"unknown frame tag {self.frame!r}")
        if F.size:
            if F.min() < 0 or F.max() >= len(V):
                raise ValueError("face index out of range")
            if np.any((F[:, 0] == F[:, 1]) | (F[:, 1] == F[:, 2]) | (F[:, 0] == F[:, 2])):
                raise ValueError("faces must reference three distinct vertices")
        if self.frame == NORMALIZED and len(V):
            r = np.sqrt((V * V).sum(axis=1)).max()
            if r > NORMALIZED_RADIUS + 1e-9:
                raise ValueError(f"normalized mesh exceeds radius 0.5 (max {r:.12g})")
        V.setflags(write=False)
        F.setflags(write=False)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "faces", F)

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return self.frame == other.frame and _fields_equal(self, other, ("vertices", "faces"))

    __hash__ = None

    def transformed(self, T: SimilarityTransform, frame: str = CAMERA_METRIC) -> TriangleMesh:
        return TriangleMesh(T.apply(self.vertices), self.faces, frame)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def boundary_edges(self) -> np.ndarray:
        """Edges used by exactly one face."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]


def minimal_bounding_sphere(points) -> tuple[np.ndarray, float]:
    """Exact minimum enclosing sphere (incremental Welzl, fixed shuffle)."""
    pts = _as_points(points)
    if len(pts) > 8:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass  # flat or degenerate input: run on all points
    pts = np.unique(pts, axis=0)
    pts = pts[np.random.default_rng(0).permutation(len(pts))]
    scale = max(1.0, float(np.abs(pts).max()))
    eps = 1e-12 * scale

    def outside(p, c, r):
        return np.linalg.norm(p - c) > r + eps

    def sphere2(a, b):
        c = (a + b) / 2.0
        return c, float(np.linalg.norm(a - c))

    def sphere3(a, b, c):
        ab, ac = b - a, c - a
        n = np.cross(ab, ac)
        nn = n @ n
        if nn < 1e-30 * scale**4:
            # collinear: the farthest pair decides
            cands = [sphere2(a, b), sphere2(a, c), sphere2(b, c)]
            return max(cands, key=lambda s: s[1])
        off = (np.cross(n, ab) * (ac @ ac) + np.cross(ac, n) * (ab @ ab)) / (2.0 * nn)
        return a + off, float(np.linalg.norm(off))

    def sphere4(a, b, c, d):
        A = np.array([b - a, c - a, d - a])
        rhs = 0.5 * np.array([(b - a) @ (b - a), (c - a) @ (c - a), (d - a) @ (d - a)])
        try:
            off = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            return sphere3(a, b, c)
        return a + off, float(np.linalg.norm(off))

    c, r = pts[0].copy(), 0.0
    for i in range(1, len(pts)):
        if not outside(pts[i], c, r):
            continue
        c, r = pts[i].copy(), 0.0
        for j in range(i):
            if not outside(pts[j], c, r):
                continue
            c, r = sphere2(pts[i], pts[j])
            for k in range(j):
                if not outside(pts[k], c, r):
                    continue
                c, r = sphere3(pts[i], pts[j], pts[k])
                for m in range(k):
                    if outside(pts[m], c, r):
                        c, r = sphere4(pts[i], pts[j], pts[k], pts[m])
    # guard against round-off in the final support set
    r = max(r, float(np.sqrt(((_as_points(points) - c) ** 2).sum(axis=1)).max()))
    return c, r


def bounding_sphere_radius(mesh: TriangleMesh, center=None) -> float:
    if center is None:
        return minimal_bounding_sphere(mesh.vertices)[1]
    d = mesh.vertices - np.asarray(center, dtype=np.float64)
    return float(np.sqrt((d * d).sum(axis=1)).max())


def normalize_mesh(vertices, faces) -> TriangleMesh:
    """Center on the minimal bounding sphere and scale its radius to 0.5."""
    V = _as_points(vertices)
    c, r = minimal_bounding_sphere(V)
    if r <= 0:
        raise DegenerateInput("mesh has zero extent")
    V = (V - c) * (NORMALIZED_RADIUS / r)
    # exact radius 0.5 after round-off
    V *= NORMALIZED_RADIUS / np.sqrt((V * V).sum(axis=1)).max()
    return TriangleMesh(V, faces, NORMALIZED)
