"""Deterministic software z-buffer rasterizer.

Pixels are sampled at their centers (u + 0.5, v + 0.5). Coverage uses
edge functions with a top-left rule so a pixel center lying exactly on an
edge shared by two triangles is claimed by exactly one of them. Depth and
attributes are interpolated perspective-correctly (linear in 1/z in screen
space), which reproduces the exact ray/plane intersection for planar faces.
No back-face culling is done.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import EmptyRender
from .geometry import CameraIntrinsics, TriangleMesh
from .lift import backproject_pixel

NEAR_PLANE = 1e-4
# candidate pixel samples processed per batch; bounds peak memory
_BATCH = 1 << 21


@dataclass
class ImageGrid:
    """H x W raster with 1 or 3 float32 channels and a validity mask.

    `data` has shape (height, width, channels); invalid pixels hold 0.
    """

    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        valid = np.asarray(self.valid, dtype=bool)
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) data, got {data.shape}")
        if valid.shape != data.shape[:2]:
            raise ValueError("validity mask does not match the grid")
        out = np.zeros(data.shape, dtype=np.float32)
        out[valid] = data[valid]
        self.data = out
        self.valid = valid

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """Single-channel view (H, W)."""
        return self.data[:, :, 0]

    @classmethod
    def empty(cls, width: int, height: int, channels: int = 1) -> ImageGrid:
        return cls(np.zeros((height, width, channels), np.float32), np.zeros((height, width), bool))

    def copy(self) -> ImageGrid:
        return ImageGrid(self.data.copy(), self.valid.copy())

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )


@dataclass
class Fragments:
    """Raw per-pixel output of a rasterization pass (float64)."""

    depth: np.ndarray  # (H, W), inf where uncovered
    face: np.ndarray  # (H, W) winning face index, -1 where uncovered
    attributes: np.ndarray | None  # (H, W, C)

    @property
    def covered(self) -> np.ndarray:
        return self.face >= 0


def _setup(vertices, faces, intrinsics):
    V = np.asarray(vertices, dtype=np.float64)
    F = np.asarray(faces, dtype=np.int64)
    if len(V) and V[:, 2].min() <= NEAR_PLANE:
        raise ValueError("mesh crosses the near plane; all vertices need z > 1e-4")
    sx = intrinsics.fx * V[:, 0] / V[:, 2] + intrinsics.cx
    sy = intrinsics.fy * V[:, 1] / V[:, 2] + intrinsics.cy
    X, Y, Z = sx[F], sy[F], V[F, 2]
    area = (X[:, 1] - X[:, 0]) * (Y[:, 2] - Y[:, 0]) - (X[:, 2] - X[:, 0]) * (Y[:, 1] - Y[:, 0])
    idx = np.arange(len(F))
    # orient every triangle to positive screen area by swapping vertices 1, 2
    flip = area < 0
    order = np.tile(np.arange(3), (len(F), 1))
    order[flip] = [0, 2, 1]
    keep = area != 0
    rows = idx[:, None]
    return (
        idx[keep],
        X[rows, order][keep],
        Y[rows, order][keep],
        Z[rows, order][keep],
        order[keep],
    )


def _edge_table(X, Y):
    """Per-triangle edge coefficients, each edge taken from a canonical endpoint.

    Evaluating every edge from its lexicographically smaller endpoint makes
    the two triangles sharing that edge see bit-identical magnitudes, so the
    top-left rule decides ownership without round-off double coverage.
    Edge k is opposite vertex k. Returns (x0, y0, dx, dy, sign, top_left),
    each of shape (m, 3).
    """
    ax, ay = X[:, [1, 2, 0]], Y[:, [1, 2, 0]]
    bx, by = X[:, [2, 0, 1]], Y[:, [2, 0, 1]]
    swap = (ay > by) | ((ay == by) & (ax > bx))
    x0 = np.where(swap, bx, ax)
    y0 = np.where(swap, by, ay)
    dx = np.where(swap, ax, bx) - x0
    dy = np.where(swap, ay, by) - y0
    sign = np.where(swap, -1.0, 1.0)
    odx, ody = bx - ax, by - ay
    top_left = (ody < 0) | ((ody == 0) & (odx > 0))
    return x0, y0, dx, dy, sign, top_left


def _rasterize_band(tri_ids, X, Y, Z, A, width, row0, row1):
    """Rasterize every triangle into rows [row0, row1).

    Returns the per-pixel winner arrays for this band.
    """
    n_rows = row1 - row0
    zbuf = np.full(n_rows * width, np.inf)
    fbuf = np.full(n_rows * width, -1, dtype=np.int64)
    abuf = None if A is None else np.zeros((n_rows * width, A.shape[2]))
    if len(tri_ids) == 0 or n_rows <= 0:
        return zbuf, fbuf, abuf

    u0 = np.maximum(np.ceil(X.min(axis=1) - 0.5), 0).astype(np.int64)
    u1 = np.minimum(np.floor(X.max(axis=1) - 0.5), width - 1).astype(np.int64)
    v0 = np.maximum(np.ceil(Y.min(axis=1) - 0.5), row0).astype(np.int64)
    v1 = np.minimum(np.floor(Y.max(axis=1) - 0.5), row1 - 1).astype(np.int64)
    nu = np.maximum(u1 - u0 + 1, 0)
    nv = np.maximum(v1 - v0 + 1, 0)
    counts = nu * nv
    live = np.nonzero(counts)[0]
    if len(live) == 0:
        return zbuf, fbuf, abuf
    ex0, ey0, edx, edy, esg, etl = _edge_table(X, Y)

    # batch triangles so the expanded candidate arrays stay bounded
    csum = np.cumsum(counts[live])
    starts = np.searchsorted(csum, np.arange(0, csum[-1], _BATCH), side="right")
    bounds = list(starts) + [len(live)]
    for b in range(len(bounds) - 1):
        sel = live[bounds[b] : bounds[b + 1]]
        if len(sel) == 0:
            continue
        cnt = counts[sel]
        local = np.repeat(np.arange(len(sel)), cnt)
        offs = np.arange(len(local)) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        owner = sel[local]
        span = nu[owner]
        pv, pu = np.divmod(offs, span)
        pu += u0[owner]
        pv += v0[owner]
        px = pu + 0.5
        py = pv + 0.5

        inside = np.ones(len(owner), dtype=bool)
        w = np.empty((len(owner), 3))
        for k in range(3):
            e = edx[owner, k] * (py - ey0[owner, k]) - edy[owner, k] * (px - ex0[owner, k])
            e *= esg[owner, k]
            inside &= (e > 0) | ((e == 0) & etl[owner, k])
            w[:, k] = e
        if not inside.any():
            continue
        owner = owner[inside]
        w = w[inside]
        w /= w.sum(axis=1, keepdims=True)
        invz = w / Z[owner]
        denom = invz.sum(axis=1)
        depth = 1.0 / denom
        pix = (pv[inside] - row0) * width + pu[inside]
        face = tri_ids[owner]

        # nearest fragment per pixel; ties go to the lower face index
        order = np.lexsort((face, depth, pix))
        pix_o = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_o[1:] != pix_o[:-1]
        win = order[first]
        p = pix[win]
        d = depth[win]
        f = face[win]
        better = (d < zbuf[p]) | ((d == zbuf[p]) & (f < fbuf[p]))
        p, d, f, win = p[better], d[better], f[better], win[better]
        zbuf[p] = d
        fbuf[p] = f
        if abuf is not None:
            a = A[owner[win]]  # (k, 3, C)
            persp = invz[win] / denom[win, None]
            abuf[p] = np.einsum("kv,kvc->kc", persp, a)
    return zbuf, fbuf, abuf


def rasterize(
    mesh: TriangleMesh | tuple,
    intrinsics: CameraIntrinsics,
    per_vertex=None,
    threads: int = 1,
) -> Fragments:
    """Core z-buffer pass shared by the depth and attribute renderers.

    `mesh` may be a TriangleMesh or a (vertices, faces) pair. With
    threads > 1 the image is split into horizontal bands; every pixel still
    sees the full triangle list, so the result does not depend on the split.
    """
    if isinstance(mesh, TriangleMesh):
        vertices, faces = mesh.vertices, mesh.faces
    else:
        vertices, faces = mesh
    W, H = int(intrinsics.width), int(intrinsics.height)
    tri_ids, X, Y, Z, order = _setup(vertices, faces, intrinsics)
    A = None
    if per_vertex is not None:
        pv = np.asarray(per_vertex, dtype=np.float64)
        if pv.ndim == 1:
            pv = pv[:, None]
        if len(pv) != len(vertices):
            raise ValueError("per-vertex attributes must match the vertex count")
        F = np.asarray(faces, dtype=np.int64)[tri_ids]
        A = pv[np.take_along_axis(F, order, axis=1)]

    threads = max(1, int(threads))
    edges = np.linspace(0, H, min(threads, H) + 1).astype(int)
    bands = list(zip(edges[:-1], edges[1:]))
    if len(bands) == 1:
        parts = [_rasterize_band(tri_ids, X, Y, Z, A, W, 0, H)]
    else:
        with ThreadPoolExecutor(max_workers=len(bands)) as pool:
            parts = list(pool.map(lambda b: _rasterize_band(tri_ids, X, Y, Z, A, W, *b), bands))
    depth = np.concatenate([p[0] for p in parts]).reshape(H, W)
    face = np.concatenate([p[1] for p in parts]).reshape(H, W)
    attrs = None
    if A is not None:
        attrs = np.concatenate([p[2] for p in parts]).reshape(H, W, -1)
    return Fragments(depth, face, attrs)


def render_depth(mesh: TriangleMesh, intrinsics: CameraIntrinsics, threads: int = 1) -> ImageGrid:
    frags = rasterize(mesh, intrinsics, threads=threads)
    if not frags.covered.any():
        raise EmptyRender("mesh covers no pixel center")
    return ImageGrid(frags.depth, frags.covered)


def render_attributes(
    mesh: TriangleMesh, per_vertex, intrinsics: CameraIntrinsics, threads: int = 1
) -> ImageGrid:
    per_vertex = np.asarray(per_vertex, dtype=np.float64)
    if per_vertex.shape != (len(mesh.vertices), 3):
        raise ValueError("per_vertex must be a (vertex count, 3) array")
    frags = rasterize(mesh, intrinsics, per_vertex, threads=threads)
    if not frags.covered.any():
        raise EmptyRender("mesh covers no pixel center")
    return ImageGrid(frags.attributes, frags.covered)


def backproject_grid(depth: ImageGrid, intrinsics: CameraIntrinsics):
    """Camera points of every valid depth pixel.

    Returns (pixels, points): integer (N, 2) array of (u, v) indices in
    row-major order and the matching (N, 3) camera-frame points.
    """
    if depth.channels != 1:
        raise ValueError("backproject_grid needs a 1-channel depth grid")
    v, u = np.nonzero(depth.valid)
    d = depth.plane[v, u].astype(np.float64)
    points = backproject_pixel(u + 0.5, v + 0.5, d, intrinsics).reshape(-1, 3)
    return np.stack([u, v], axis=1), points
