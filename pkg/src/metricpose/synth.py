"""Synthetic ground truth: category meshes, scenes, oracle renders, perturbation.

Stands in for the learned shape/NOCS predictors. Every generated object
comes with the quantities those predictors would output (a view-aligned
normalized mesh, Z, R, a NOCS map and a mask) alongside its true pose.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import EmptyRender, UnknownCategory
from .geometry import (
    NORMALIZED,
    BoundingBox2D,
    CameraIntrinsics,
    OrientedBox3D,
    SimilarityTransform,
    TriangleMesh,
    normalize_mesh,
    random_rotation,
)
from .pose import SparseDepthObservation, object_box
from .raster import ImageGrid, rasterize

CATEGORIES = ("bottle", "bowl", "camera", "can", "laptop", "mug")

# CAMERA-style pinhole (640x480); principal point on a pixel center
DEFAULT_INTRINSICS = CameraIntrinsics(577.5, 577.5, 319.5, 239.5, 640, 480)

DEFAULT_PARAMS = {
    "bottle": {"radius": 0.32, "height": 1.6, "neck_radius": 0.11, "shoulder": 0.55, "neck": 0.75},
    "bowl": {"radius": 1.0},
    "camera": {"size": (1.0, 0.7, 0.5)},
    "can": {"radius": 0.45, "height": 2.0},
    "laptop": {"size": (1.0, 0.06, 0.75)},
    "mug": {"radius": 0.4, "height": 0.9, "handle_radius": 0.22, "handle_thickness": 0.05},
}

Z_RANGE = (0.6, 3.0)
RADIUS_RANGE = (0.06, 0.15)
MIN_VISIBLE_PIXELS = 32


# ---------------------------------------------------------------- meshes


def _lathe(profile, segments: int):
    """Surface of revolution about +y from a (radius, y) profile.

    Profile points with radius 0 become single pole vertices.
    """
    theta = 2 * np.pi * np.arange(segments) / segments
    cos, sin = np.cos(theta), np.sin(theta)
    verts, rings = [], []
    for r, y in profile:
        if r == 0:
            rings.append([len(verts)])
            verts.append((0.0, y, 0.0))
        else:
            start = len(verts)
            verts.extend(zip(r * cos, np.full(segments, y), r * sin))
            rings.append(list(range(start, start + segments)))
    faces = []
    for a, b in zip(rings[:-1], rings[1:]):
        if len(a) == 1 and len(b) == 1:
            continue
        if len(a) == 1:
            faces.extend((a[0], b[(i + 1) % segments], b[i]) for i in range(segments))
        elif len(b) == 1:
            faces.extend((a[i], a[(i + 1) % segments], b[0]) for i in range(segments))
        else:
            for i in range(segments):
                j = (i + 1) % segments
                faces.append((a[i], a[j], b[j]))
                faces.append((a[i], b[j], b[i]))
    return np.array(verts, dtype=float), np.array(faces, dtype=np.int64)


def _box(size, n: int):
    """Closed box with each face split into an n x n grid (shared vertices)."""
    sx, sy, sz = (np.asarray(size, dtype=float) / 2.0)
    g = np.linspace(-1.0, 1.0, n + 1)
    verts, faces = [], []
    index = {}

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    for axis in range(3):
        for sign in (-1.0, 1.0):
            a1, a2 = [k for k in range(3) if k != axis]
            for i in range(n):
                for j in range(n):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign
                        p[a1] = g[i + di]
                        p[a2] = g[j + dj]
                        quad.append(vid(p * (sx, sy, sz)))
                    faces.append((quad[0], quad[1], quad[2]))
                    faces.append((quad[0], quad[2], quad[3]))
    return np.array(verts), np.array(faces, dtype=np.int64)


def _torus(center, major: float, minor: float, segments: int, tube_segments: int):
    """Torus in the x-y plane (ring axis along z) around `center`."""
    u = 2 * np.pi * np.arange(segments) / segments
    v = 2 * np.pi * np.arange(tube_segments) / tube_segments
    uu, vv = np.meshgrid(u, v, indexing="ij")
    rr = major + minor * np.cos(vv)
    verts = np.stack([rr * np.cos(uu), rr * np.sin(uu), minor * np.sin(vv)], axis=-1).reshape(-1, 3)
    verts += np.asarray(center, dtype=float)
    faces = []
    for i in range(segments):
        for j in range(tube_segments):
            a = i * tube_segments + j
            b = ((i + 1) % segments) * tube_segments + j
            c = ((i + 1) % segments) * tube_segments + (j + 1) % tube_segments
            d = i * tube_segments + (j + 1) % tube_segments
            faces.append((a, b, c))
            faces.append((a, c, d))
    return verts, np.array(faces, dtype=np.int64)


def _subdivide_profile(profile, pieces: int):
    out = [profile[0]]
    for (r0, y0), (r1, y1) in zip(profile[:-1], profile[1:]):
        for k in range(1, pieces + 1):
            s = k / pieces
            out.append((r0 + s * (r1 - r0), y0 + s * (y1 - y0)))
    return out


def _raw_category_mesh(category: str, params: dict, subdivisions: int):
    seg = max(8, 4 * subdivisions)
    if category == "can":
        r, h = params["radius"], params["height"]
        # rims only: cap poles and rims are the sole vertices
        return _lathe([(0.0, -h / 2), (r, -h / 2), (r, h / 2), (0.0, h / 2)], seg)
    if category == "bottle":
        r, h, rn = params["radius"], params["height"], params["neck_radius"]
        ys, yn = -h / 2 + params["shoulder"] * h, -h / 2 + params["neck"] * h
        prof = [(0.0, -h / 2), (r, -h / 2), (r, ys), (rn, yn), (rn, h / 2), (0.0, h / 2)]
        return _lathe(prof, seg)
    if category == "bowl":
        r = params["radius"]
        n = max(4, subdivisions)
        phi = np.linspace(0.0, np.pi / 2, n + 1)
        prof = [(r * np.sin(p), -r * np.cos(p)) for p in phi]
        prof[0] = (0.0, -r)
        return _lathe(prof, seg)
    if category in ("camera", "laptop"):
        return _box(params["size"], max(1, subdivisions // 4))
    if category == "mug":
        r, h = params["radius"], params["height"]
        pieces = max(1, subdivisions // 4)
        prof = _subdivide_profile([(r, -h / 2), (r, h / 2)], pieces)
        prof = [(0.0, -h / 2)] + prof + [(0.0, h / 2)]
        bv, bf = _lathe(prof, seg)
        a, b = params["handle_radius"], params["handle_thickness"]
        tv, tf = _torus((r + a - 1.5 * b, 0.0, 0.0), a, b, seg, max(6, subdivisions // 2))
        return np.concatenate([bv, tv]), np.concatenate([bf, tf + len(bv)])
    raise UnknownCategory(f"unknown category {category!r}")


def _freeze(params: dict):
    return tuple(sorted((k, tuple(v) if isinstance(v, (list, tuple)) else v) for k, v in params.items()))


@lru_cache(maxsize=256)
def _cached_mesh(category: str, frozen: tuple, subdivisions: int) -> TriangleMesh:
    V, F = _raw_category_mesh(category, dict(frozen), subdivisions)
    return normalize_mesh(V, F)


def make_category_mesh(category: str, params: dict | None = None, subdivisions: int = 16) -> TriangleMesh:
    """Parametric stand-in shape for one of the six categories.

    Normalized to a bounding sphere of radius 0.5 at the origin, up = +y.
    """
    if category not in CATEGORIES:
        raise UnknownCategory(f"unknown category {category!r}")
    merged = dict(DEFAULT_PARAMS[category])
    merged.update(params or {})
    return _cached_mesh(category, _freeze(merged), int(subdivisions))


def sample_shape_params(category: str, rng: np.random.Generator) -> dict:
    p = dict(DEFAULT_PARAMS[category])
    jitter = lambda x, f=0.2: float(x * (1.0 + rng.uniform(-f, f)))  # noqa: E731
    if category == "bottle":
        p.update(radius=jitter(p["radius"]), neck_radius=jitter(p["neck_radius"]), height=jitter(p["height"]))
    elif category == "bowl":
        pass
    elif category in ("camera", "laptop"):
        p["size"] = tuple(jitter(s) for s in p["size"])
    elif category == "can":
        p.update(radius=jitter(p["radius"]), height=jitter(p["height"], 0.1))
    elif category == "mug":
        p.update(radius=jitter(p["radius"], 0.15), height=jitter(p["height"], 0.15))
    return p


# ---------------------------------------------------------------- scenes


@dataclass(frozen=True)
class SceneObject:
    category: str
    params: dict
    gt_pose: SimilarityTransform


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    objects: tuple
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    subdivisions: int = 16


@dataclass
class ObjectBundle:
    """Per-object oracle outputs; the inputs a predictor would supply plus GT."""

    category: str
    mesh: TriangleMesh  # normalized, view-aligned (what a mesh header predicts)
    canonical_mesh: TriangleMesh  # normalized, canonical NOCS frame
    gt_pose: SimilarityTransform
    depth: ImageGrid  # visible GT depth of this object
    nocs: ImageGrid
    mask: np.ndarray
    bbox: BoundingBox2D
    z_center: float
    radius: float
    observation: SparseDepthObservation
    box3d: OrientedBox3D

    @property
    def metric_mesh(self) -> TriangleMesh:
        return self.canonical_mesh.transformed(self.gt_pose)


@dataclass
class SceneRender:
    spec: SceneSpec
    depth: ImageGrid  # composite observed depth
    objects: list = field(default_factory=list)


def _inside_frustum(center, radius, K: CameraIntrinsics) -> bool:
    # side planes through the camera center and the image borders
    x, y, z = center
    if z - radius < 0.05:
        return False
    for edge, f, c, coord in ((0.0, K.fx, K.cx, x), (K.width, K.fx, K.cx, x), (0.0, K.fy, K.cy, y), (K.height, K.fy, K.cy, y)):
        slope = (edge - c) / f  # plane: coord = slope * z
        dist = (coord - slope * z) / np.sqrt(1.0 + slope * slope)
        inward = 1.0 if edge == 0.0 else -1.0
        if inward * dist < radius:
            return False
    return True


def _angular_radius(center, radius):
    return np.arcsin(min(1.0, radius / np.linalg.norm(center)))


def sample_scene(
    seed: int,
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
    n_objects: tuple = (1, 3),
    categories=CATEGORIES,
    subdivisions: int = 16,
) -> SceneSpec:
    """Random tabletop-scale scene: spheres never intersect and no object's
    center ray passes inside another object's bounding sphere."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(n_objects[0], n_objects[1] + 1))
    objects, spheres = [], []
    attempts = 0
    while len(objects) < count and attempts < 1000:
        attempts += 1
        category = str(categories[int(rng.integers(len(categories)))])
        radius = float(rng.uniform(*RADIUS_RANGE))
        z = float(rng.uniform(*Z_RANGE))
        u = rng.uniform(0, intrinsics.width)
        v = rng.uniform(0, intrinsics.height)
        center = np.array([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z])
        if not _inside_frustum(center, radius, intrinsics):
            continue
        ok = True
        for c2, r2 in spheres:
            if np.linalg.norm(center - c2) < radius + r2:
                ok = False
                break
            cosang = center @ c2 / (np.linalg.norm(center) * np.linalg.norm(c2))
            sep = np.arccos(np.clip(cosang, -1.0, 1.0))
            if sep <= max(_angular_radius(center, radius), _angular_radius(c2, r2)):
                ok = False
                break
        if not ok:
            continue
        params = sample_shape_params(category, rng)
        pose = SimilarityTransform(2.0 * radius, random_rotation(rng), center)
        objects.append(SceneObject(category, params, pose))
        spheres.append((center, radius))
    return SceneSpec(int(seed), tuple(objects), intrinsics, subdivisions)


def _centered_bbox(mask: np.ndarray, center_px) -> BoundingBox2D:
    """Smallest box centered on `center_px` that contains every mask pixel."""
    v, u = np.nonzero(mask)
    cu, cv = center_px
    half_w = max(cu - u.min(), u.max() + 1 - cu)
    half_h = max(cv - v.min(), v.max() + 1 - cv)
    return BoundingBox2D(float(cu - half_w), float(cv - half_h), float(2 * half_w), float(2 * half_h))


def _nearest_pixel(mask: np.ndarray, center_px):
    v, u = np.nonzero(mask)
    d2 = (u + 0.5 - center_px[0]) ** 2 + (v + 0.5 - center_px[1]) ** 2
    k = int(np.argmin(d2))
    return int(u[k]), int(v[k])


def render_ground_truth(scene: SceneSpec, threads: int = 1) -> SceneRender:
    """Joint render of all objects with occlusion; per-object oracle bundles.

    Raises EmptyRender if any object ends up with no visible pixel.
    """
    K = scene.intrinsics
    canon, verts, faces, nocs, owners = [], [], [], [], []
    offset = 0
    for k, obj in enumerate(scene.objects):
        m = make_category_mesh(obj.category, obj.params, scene.subdivisions)
        canon.append(m)
        verts.append(obj.gt_pose.apply(m.vertices))
        faces.append(m.faces + offset)
        nocs.append(m.vertices + 0.5)
        owners.append(np.full(len(m.faces), k))
        offset += len(m.vertices)
    if not verts:
        raise EmptyRender("scene has no objects")
    frags = rasterize((np.concatenate(verts), np.concatenate(faces)), K, np.concatenate(nocs), threads=threads)
    owner = np.where(frags.covered, np.concatenate(owners)[np.maximum(frags.face, 0)], -1)
    composite = ImageGrid(frags.depth, frags.covered)

    render = SceneRender(scene, composite)
    for k, obj in enumerate(scene.objects):
        mask = owner == k
        if not mask.any():
            raise EmptyRender(f"object {k} ({obj.category}) is fully occluded or outside the image")
        depth = ImageGrid(frags.depth, mask)
        nocs_grid = ImageGrid(frags.attributes, mask)
        center_px = K.project(obj.gt_pose.translation)[0]
        bbox = _centered_bbox(mask, center_px)
        u, v = _nearest_pixel(mask, center_px)
        view = TriangleMesh(canon[k].vertices @ obj.gt_pose.rotation.T, canon[k].faces, NORMALIZED)
        metric = canon[k].transformed(obj.gt_pose)
        render.objects.append(
            ObjectBundle(
                category=obj.category,
                mesh=view,
                canonical_mesh=canon[k],
                gt_pose=obj.gt_pose,
                depth=depth,
                nocs=nocs_grid,
                mask=mask,
                bbox=bbox,
                z_center=float(obj.gt_pose.translation[2]),
                radius=obj.gt_pose.scale / 2.0,
                observation=SparseDepthObservation((u, v), float(depth.plane[v, u])),
                box3d=object_box(metric, obj.gt_pose),
            )
        )
    return render


def generate_scene(seed: int, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS, threads: int = 1, **kwargs) -> SceneRender:
    """sample_scene + render_ground_truth, resampling until every object is
    visible on at least MIN_VISIBLE_PIXELS pixels. Deterministic in `seed`."""
    for attempt in range(100):
        sub = int(np.random.SeedSequence([int(seed), attempt]).generate_state(1, np.uint64)[0] >> 1)
        spec = sample_scene(sub, intrinsics, **kwargs)
        if not spec.objects:
            continue
        try:
            render = render_ground_truth(spec, threads=threads)
        except EmptyRender:
            continue
        if all(o.mask.sum() >= MIN_VISIBLE_PIXELS for o in render.objects):
            return dataclasses.replace(render, spec=dataclasses.replace(spec, seed=int(seed)))
    raise RuntimeError(f"could not generate a valid scene for seed {seed}")


# ---------------------------------------------------------------- perturbation


@dataclass(frozen=True)
class PerturbationSpec:
    """Emulated predictor error.

    With couple_radius (default), R inherits the Z error on top of its own,
    because R is regressed relative to Z and restored by multiplying with
    the predicted Z.
    """

    z_rel_noise: float = 0.0
    r_rel_noise: float = 0.0
    nocs_noise_sigma: float = 0.0
    nocs_outlier_frac: float = 0.0
    mask_erosion_px: int = 0
    couple_radius: bool = True

    def __post_init__(self):
        for name in ("z_rel_noise", "r_rel_noise", "nocs_outlier_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.nocs_noise_sigma < 0 or self.mask_erosion_px < 0:
            raise ValueError("noise sigma and erosion radius must be non-negative")

    def is_zero(self) -> bool:
        return not (self.z_rel_noise or self.r_rel_noise or self.nocs_noise_sigma or self.nocs_outlier_frac or self.mask_erosion_px)


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def perturb(bundle: ObjectBundle, spec: PerturbationSpec, seed: int) -> ObjectBundle:
    """Corrupt the predictor-side fields of a bundle; GT fields are untouched."""
    if spec.is_zero():
        return bundle
    rng = np.random.default_rng(seed)
    eps_z = rng.uniform(-spec.z_rel_noise, spec.z_rel_noise) if spec.z_rel_noise else 0.0
    eps_r = rng.uniform(-spec.r_rel_noise, spec.r_rel_noise) if spec.r_rel_noise else 0.0
    z = bundle.z_center * (1.0 + eps_z)
    r = bundle.radius * (1.0 + eps_r)
    if spec.couple_radius:
        r *= 1.0 + eps_z

    mask = bundle.mask
    if spec.mask_erosion_px:
        mask = ndimage.binary_erosion(mask, structure=_disk(spec.mask_erosion_px))

    nocs = bundle.nocs
    if spec.nocs_noise_sigma or spec.nocs_outlier_frac:
        data = nocs.data.astype(np.float64)
        valid = nocs.valid
        v, u = np.nonzero(valid)
        vals = data[v, u]
        if spec.nocs_noise_sigma:
            vals = np.clip(vals + rng.normal(0.0, spec.nocs_noise_sigma, vals.shape), 0.0, 1.0)
        if spec.nocs_outlier_frac:
            hit = rng.random(len(vals)) < spec.nocs_outlier_frac
            vals[hit] = rng.random((int(hit.sum()), 3))
        data[v, u] = vals
        nocs = ImageGrid(data, valid)

    return dataclasses.replace(bundle, z_center=float(z), radius=float(r), mask=mask, nocs=nocs)


def outlier_mask(original: ImageGrid, perturbed: ImageGrid) -> np.ndarray:
    """Pixels whose NOCS value changed (used to measure the outlier rate)."""
    return original.valid & np.any(original.data != perturbed.data, axis=2)
