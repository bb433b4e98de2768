"""Pose and size from NOCS/depth correspondences, plus sparse-depth refinement."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, NoConsensus, NoCorrespondences, PixelNotCovered
from .geometry import CameraIntrinsics, OrientedBox3D, SimilarityTransform, TriangleMesh, umeyama
from .lift import LiftInputs, backproject_pixel, lift_to_metric
from .raster import ImageGrid, render_depth

NOCS_CENTER = 0.5


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 256
    inlier_threshold: float = 0.01
    min_sample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be positive")
        if self.min_sample < 3:
            raise ValueError("min_sample must be >= 3")


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    transform: SimilarityTransform
    size: np.ndarray
    inlier_count: int
    inlier_ratio: float

    def __eq__(self, other):
        if not isinstance(other, PoseEstimate):
            return NotImplemented
        return (
            self.transform == other.transform
            and np.array_equal(self.size, other.size)
            and (self.inlier_count, self.inlier_ratio) == (other.inlier_count, other.inlier_ratio)
        )

    __hash__ = None


@dataclass(frozen=True)
class SparseDepthObservation:
    pixel: tuple[int, int]
    depth: float

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError("observed depth must be positive")


@dataclass(frozen=True)
class Correspondences:
    nocs_points: np.ndarray  # (N, 3), centered object frame
    camera_points: np.ndarray  # (N, 3), meters
    pixels: np.ndarray  # (N, 2) integer (u, v)

    def __len__(self):
        return len(self.nocs_points)


def build_correspondences(
    nocs: ImageGrid, depth: ImageGrid, mask, intrinsics: CameraIntrinsics
) -> Correspondences:
    mask = np.asarray(mask, dtype=bool)
    if nocs.data.shape[:2] != depth.data.shape[:2] or mask.shape != depth.valid.shape:
        raise ValueError("NOCS map, depth map and mask must share dimensions")
    if nocs.channels != 3 or depth.channels != 1:
        raise ValueError("expected a 3-channel NOCS map and a 1-channel depth map")
    sel = nocs.valid & depth.valid & mask
    v, u = np.nonzero(sel)
    if len(u) == 0:
        raise NoCorrespondences("no pixel is valid in NOCS, depth and mask")
    n = nocs.data[v, u].astype(np.float64) - NOCS_CENTER
    d = depth.plane[v, u].astype(np.float64)
    p = backproject_pixel(u + 0.5, v + 0.5, d, intrinsics).reshape(-1, 3)
    return Correspondences(n, p, np.stack([u, v], axis=1))


def _batch_umeyama(src, dst):
    """Vectorized Umeyama over K minimal samples of shape (K, m, 3).

    Mirrors geometry.umeyama; `ok` flags the non-degenerate samples.
    """
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    ds = src - mu_s
    dd = dst - mu_d
    m = src.shape[1]
    spread = np.linalg.svd(ds, compute_uv=False)
    ok = (spread[:, 0] > 0) & (spread[:, 1] > 1e-10 * spread[:, 0])
    cov = np.einsum("kmi,kmj->kij", dd, ds) / m
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones_like(D)
    S[:, 2] = np.where(np.linalg.det(U) * np.linalg.det(Vt) < 0, -1.0, 1.0)
    R = np.einsum("kij,kj,kjl->kil", U, S, Vt)
    var = np.einsum("kmi,kmi->k", ds, ds) / m
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = (D * S).sum(axis=1) / var
    ok &= np.isfinite(scale) & (scale > 0)
    t = mu_d[:, 0] - scale[:, None] * np.einsum("kij,kj->ki", R, mu_s[:, 0])
    return scale, R, t, ok


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def ransac_samples(seed: int, iterations: int, n: int, m: int) -> np.ndarray:
    """(iterations, m) distinct indices in [0, n); row i depends only on (seed, i).

    Draw j of row i is SplitMix64(key_i + j), key_i = SplitMix64(seed ^ SplitMix64(i));
    each row keeps the first m distinct draws.
    """
    if m > n:
        raise DegenerateInput(f"cannot draw {m} distinct samples from {n}")
    with np.errstate(over="ignore"):
        rows = np.arange(iterations, dtype=np.uint64)
        key = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _splitmix64(rows))
        out = np.empty((iterations, m), dtype=np.int64)
        todo = np.arange(iterations)
        width = 4 * m
        while len(todo):
            j = np.arange(width, dtype=np.uint64)
            draws = (_splitmix64(key[todo, None] + j[None, :]) % np.uint64(n)).astype(np.int64)
            earlier = np.tril(np.ones((width, width), dtype=bool), -1)
            dup = ((draws[:, :, None] == draws[:, None, :]) & earlier[None]).any(axis=2)
            fresh = ~dup
            done = fresh.sum(axis=1) >= m
            for r in np.nonzero(done)[0]:
                out[todo[r]] = draws[r][fresh[r]][:m]
            todo = todo[~done]
            width *= 2
    return out


def _tight_extent(points):
    return points.max(axis=0) - points.min(axis=0)


def solve_pose(corr: Correspondences, config: RansacConfig = RansacConfig()) -> PoseEstimate:
    """RANSAC over minimal Umeyama fits, then a refit on the winning inliers.

    Iteration i draws its sample from a counter-based stream keyed by
    (seed, i), so the hypotheses do not depend on evaluation order. The winner has the most
    inliers; ties go to the lower mean inlier residual, then the lower
    iteration index.
    """
    src, dst = corr.nocs_points, corr.camera_points
    n = len(src)
    if n < config.min_sample:
        raise DegenerateInput(f"need at least {config.min_sample} correspondences, got {n}")

    samples = ransac_samples(config.seed, config.iterations, n, config.min_sample)
    scales, rots, trans, ok = _batch_umeyama(src[samples], dst[samples])

    # hypotheses are scored in float32 (error ~1e-6 m against a centimeter
    # threshold); the final refit runs in float64
    best_key, best_mask = None, None
    thr2 = np.float32(config.inlier_threshold**2)
    A = (scales[:, None, None] * rots.transpose(0, 2, 1)).astype(np.float32)
    trans = trans.astype(np.float32)
    src32, dst32 = src.astype(np.float32), dst.astype(np.float32)
    step = max(1, int(2_000_000 // max(n, 1)))
    for lo in range(0, config.iterations, step):
        hi = min(lo + step, config.iterations)
        diff = np.matmul(src32[None], A[lo:hi])
        diff += trans[lo:hi, None, :]
        diff -= dst32[None]
        d2 = np.einsum("kni,kni->kn", diff, diff)
        inl = d2 < thr2
        counts = np.where(ok[lo:hi], inl.sum(axis=1), 0)
        top = int(counts.max())
        if top == 0 or (best_key is not None and top < -best_key[0]):
            continue
        # mean residuals only matter for rows tied at the top count
        for k in np.nonzero(counts == top)[0]:
            i = lo + int(k)
            mean = float(np.sqrt(d2[k][inl[k]].astype(np.float64)).sum() / top)
            key = (-top, mean, i)
            if best_key is None or key < best_key:
                best_key, best_mask = key, inl[k]

    if best_key is None or -best_key[0] < config.min_sample:
        got = 0 if best_key is None else -best_key[0]
        raise NoConsensus(f"best hypothesis has {got} inliers (< {config.min_sample})")

    inliers = best_mask
    T = umeyama(src[inliers], dst[inliers])
    inlier_src = src[inliers]
    spans_enough = all(len(np.unique(inlier_src[:, k])) >= 3 for k in range(3))
    extent = _tight_extent(inlier_src if spans_enough else src)
    count = int(inliers.sum())
    return PoseEstimate(T, extent * T.scale, count, count / n)


def refine_with_sparse_depth(
    z_center: float,
    radius: float,
    rendered_depth: ImageGrid,
    obs,
    rule: str = "additive",
) -> tuple[float, float]:
    """Correct (Z, R) from observed depth at one or more pixels.

    rule="additive":  Z~ = Z + (d_obs - d_rendered)
    rule="ratio":     Z~ = Z * d_obs / d_rendered
    In both cases R~ = R * Z~ / Z, since R is regressed relative to Z.
    With several observations the median offset (or ratio) is used.
    """
    observations = [obs] if isinstance(obs, SparseDepthObservation) else list(obs)
    if not observations:
        raise ValueError("at least one observation is required")
    deltas = []
    for o in observations:
        u, v = int(o.pixel[0]), int(o.pixel[1])
        if not (0 <= v < rendered_depth.height and 0 <= u < rendered_depth.width) or not rendered_depth.valid[v, u]:
            raise PixelNotCovered(f"rendered depth is invalid at pixel ({u}, {v})")
        d_r = float(rendered_depth.plane[v, u])
        if rule == "additive":
            deltas.append(o.depth - d_r)
        elif rule == "ratio":
            deltas.append(o.depth / d_r)
        else:
            raise ValueError(f"unknown refinement rule {rule!r}")
    step = float(np.median(deltas))
    z_new = z_center + step if rule == "additive" else z_center * step
    if not z_new > 0:
        raise ValueError("refined center depth is not positive")
    return z_new, radius * z_new / z_center


def object_box(mesh: TriangleMesh, pose: SimilarityTransform) -> OrientedBox3D:
    """Tight box of `mesh` expressed in the object frame of `pose`."""
    local = pose.inverse().apply(mesh.vertices)
    lo, hi = local.min(axis=0), local.max(axis=0)
    center_local = (lo + hi) / 2.0
    half = np.maximum((hi - lo) / 2.0, 1e-9) * pose.scale
    return OrientedBox3D(pose.apply(center_local)[0], pose.rotation, half)


@dataclass(frozen=True)
class ObjectResult:
    pose: PoseEstimate
    mesh: TriangleMesh
    depth: ImageGrid
    z_center: float
    radius: float

    def __iter__(self):
        # unpacks as (pose, mesh, depth)
        return iter((self.pose, self.mesh, self.depth))


def _pixel_residual(depth: ImageGrid, obs) -> float:
    observations = [obs] if isinstance(obs, SparseDepthObservation) else list(obs)
    res = []
    for o in observations:
        u, v = int(o.pixel[0]), int(o.pixel[1])
        if not (0 <= v < depth.height and 0 <= u < depth.width) or not depth.valid[v, u]:
            raise PixelNotCovered(f"rendered depth is invalid at pixel ({u}, {v})")
        res.append(o.depth - float(depth.plane[v, u]))
    return float(np.median(res))


def estimate_object(
    lift: LiftInputs,
    nocs: ImageGrid,
    mask,
    config: RansacConfig = RansacConfig(),
    obs=None,
    rule: str = "additive",
    threads: int = 1,
    refine_steps: int = 50,
    refine_tol: float = 1e-6,
) -> ObjectResult:
    """Lift, render, optionally refine with sparse depth, then solve the pose.

    With observations, refine -> re-lift -> re-render repeats until the
    observed/rendered gap at the observed pixels drops below `refine_tol`
    meters or `refine_steps` passes were made. Because R follows Z, the
    lifted mesh only changes by a scaling about the camera center, so the
    additive rule contracts the gap by a factor (1 - d/Z) per pass.
    """
    mesh = lift_to_metric(lift)
    depth = render_depth(mesh, lift.intrinsics, threads=threads)
    if obs is not None:
        for _ in range(max(1, int(refine_steps))):
            z, r = refine_with_sparse_depth(lift.z_center, lift.radius, depth, obs, rule=rule)
            lift = dataclasses.replace(lift, z_center=z, radius=r)
            mesh = lift_to_metric(lift)
            depth = render_depth(mesh, lift.intrinsics, threads=threads)
            if abs(_pixel_residual(depth, obs)) < refine_tol:
                break
    corr = build_correspondences(nocs, depth, mask, lift.intrinsics)
    pose = solve_pose(corr, config)
    return ObjectResult(pose, mesh, depth, lift.z_center, lift.radius)
