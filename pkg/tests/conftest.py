import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metricpose.geometry import CameraIntrinsics, SimilarityTransform, random_rotation

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def camera():
    return CameraIntrinsics(500.0, 500.0, 80.0, 60.0, 160, 120)


def random_similarity(rng, scale_range=(0.2, 5.0), t_scale=3.0):
    return SimilarityTransform(
        float(rng.uniform(*scale_range)), random_rotation(rng), rng.uniform(-t_scale, t_scale, 3)
    )


def quat_from_matrix(R):
    # Shepperd's method, independent of the trace-based angle formula
    m = np.asarray(R)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        q = np.zeros(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def ray_triangle_depth(origin, direction, a, b, c):
    """Moller-Trumbore; returns the z of the hit point or None."""
    e1, e2 = b - a, c - a
    p = np.cross(direction, e2)
    det = e1 @ p
    if abs(det) < 1e-15:
        return None
    inv = 1.0 / det
    s = origin - a
    u = (s @ p) * inv
    if u < 0 or u > 1:
        return None
    q = np.cross(s, e1)
    v = (direction @ q) * inv
    if v < 0 or u + v > 1:
        return None
    t = (e2 @ q) * inv
    if t <= 0:
        return None
    return (origin + t * direction)[2]


def unit_cube_mesh(half=0.5 / np.sqrt(3.0)):
    from metricpose.geometry import NORMALIZED, TriangleMesh

    s = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], float) * half
    F = [
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
        [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
    ]
    return TriangleMesh(s, np.array(F), NORMALIZED)


def raycast_grid(V, K):
    """Vectorized Moller-Trumbore over every pixel-center ray of camera K.

    Returns (depth with inf where missed, smallest barycentric margin).
    """
    v, u = np.mgrid[: K.height, : K.width]
    d = np.stack([(u + 0.5 - K.cx) / K.fx, (v + 0.5 - K.cy) / K.fy, np.ones(u.shape)], -1).reshape(-1, 3)
    a, b, c = (np.asarray(x, float) for x in V)
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = p @ e1
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = -a
        bu = (p @ s) * inv
        q = np.cross(s, e1)
        bv = (d @ q) * inv
        t = (e2 @ q) * inv
    margin = np.minimum(np.minimum(bu, bv), 1 - bu - bv)
    hit = (np.abs(det) > 1e-15) & (margin >= 0) & (t > 0)
    depth = np.where(hit, t, np.inf)  # ray z-component is 1, so t is the depth
    return depth.reshape(K.height, K.width), margin.reshape(K.height, K.width)
