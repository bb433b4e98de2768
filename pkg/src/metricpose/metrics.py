"""Evaluation: 3D-IoU and pose average precision, shape and depth metrics."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyGroundTruth, NotARotation, NoValidPixels
from .geometry import OrientedBox3D, SimilarityTransform, TriangleMesh, is_rotation, rotation_geodesic_deg
from .raster import ImageGrid

# rotational symmetry about the object-frame +y axis
SYMMETRIC_CATEGORIES = frozenset({"bottle", "bowl", "can"})
SYMMETRY_AXIS = np.array([0.0, 1.0, 0.0])
MATCH_IOU_FLOOR = 0.1
DELTA_THRESHOLDS = (1.25, 1.25**2, 1.25**3)


# ---------------------------------------------------------------- 3D IoU


def _aligned_iou(a: OrientedBox3D, b: OrientedBox3D, R: np.ndarray) -> float:
    ca, cb = a.center @ R, b.center @ R
    lo = np.maximum(ca - a.half_extents, cb - b.half_extents)
    hi = np.minimum(ca + a.half_extents, cb + b.half_extents)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    return inter / (a.volume + b.volume - inter)


def iou3d(a: OrientedBox3D, b: OrientedBox3D, resolution: int = 64, method: str = "auto") -> float:
    """Volumetric IoU of two oriented boxes.

    "lattice" counts cell centers of a resolution^3 grid spanning the
    union's axis-aligned bounds. "auto" switches to the exact product of
    interval overlaps when both boxes share the identity orientation.
    """
    if method == "auto" and np.array_equal(a.rotation, np.eye(3)) and np.array_equal(b.rotation, np.eye(3)):
        return _aligned_iou(a, b, np.eye(3))
    if method not in ("auto", "lattice"):
        raise ValueError(f"unknown iou3d method {method!r}")
    if np.linalg.norm(a.center - b.center) > np.linalg.norm(a.half_extents) + np.linalg.norm(b.half_extents):
        return 0.0
    corners = np.concatenate([a.corners(), b.corners()])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    axes = [lo[k] + (np.arange(resolution) + 0.5) * (hi[k] - lo[k]) / resolution for k in range(3)]
    in_a = _lattice_inside(a, axes)
    in_b = _lattice_inside(b, axes)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def _lattice_inside(box: OrientedBox3D, axes) -> np.ndarray:
    # the box-frame coordinate is separable over the three lattice axes
    r = len(axes[0])
    parts = [(axes[k] - box.center[k])[:, None] * box.rotation[k] for k in range(3)]
    inside = np.ones((r, r, r), dtype=bool)
    for m in range(3):
        x = parts[0][:, m, None, None] + parts[1][None, :, m, None] + parts[2][None, None, :, m]
        inside &= np.abs(x) <= box.half_extents[m]
    return inside


# ---------------------------------------------------------------- pose errors


def pose_errors(pred: SimilarityTransform, gt: SimilarityTransform, category: str) -> tuple[float, float]:
    """(rotation error in degrees, translation error in cm)."""
    if not (is_rotation(pred.rotation, 1e-6) and is_rotation(gt.rotation, 1e-6)):
        raise NotARotation("pose_errors needs proper rotations")
    t_cm = 100.0 * float(np.linalg.norm(pred.translation - gt.translation))
    if category in SYMMETRIC_CATEGORIES:
        ya = pred.rotation @ SYMMETRY_AXIS
        yb = gt.rotation @ SYMMETRY_AXIS
        cos = float(np.clip(ya @ yb / (np.linalg.norm(ya) * np.linalg.norm(yb)), -1.0, 1.0))
        return float(np.degrees(np.arccos(cos))), t_cm
    return rotation_geodesic_deg(pred.rotation, gt.rotation), t_cm


# ---------------------------------------------------------------- detection AP


@dataclass
class DetectionRecord:
    image_id: str
    category: str
    box3d: OrientedBox3D
    pose: SimilarityTransform
    score: float = 1.0
    mesh: TriangleMesh | None = None
    depth: ImageGrid | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")


@dataclass(frozen=True)
class Criterion:
    """True-positive test for a matched prediction; unset fields are ignored."""

    iou: float | None = None
    deg: float | None = None
    cm: float | None = None

    def accepts(self, iou: float, deg: float, cm: float) -> bool:
        if self.iou is not None and not iou >= self.iou:
            return False
        if self.deg is not None and not deg < self.deg:
            return False
        if self.cm is not None and not cm < self.cm:
            return False
        return True

    @property
    def name(self) -> str:
        parts = []
        if self.iou is not None:
            parts.append(f"iou{round(self.iou * 100):d}")
        if self.deg is not None:
            parts.append(f"{self.deg:g}deg")
        if self.cm is not None:
            parts.append(f"{self.cm:g}cm")
        return "_".join(parts) or "any"


@dataclass
class Match:
    """One prediction with its greedy GT assignment (gt_index None if unmatched)."""

    category: str
    score: float
    order: tuple
    gt_index: int | None = None
    iou: float = 0.0
    deg: float = float("inf")
    cm: float = float("inf")


@dataclass
class MatchResult:
    matches: list
    num_gt: dict = field(default_factory=dict)
    pairs: list = field(default_factory=list)  # (pred record, gt record)


def match_detections(preds, gts, resolution: int = 64) -> MatchResult:
    """Greedy score-ordered matching per image and category.

    Each prediction, in descending score order, takes the unmatched GT of
    its image and category with the highest 3D IoU, provided that IoU is at
    least MATCH_IOU_FLOOR.
    """
    gts = list(gts)
    preds = list(preds)
    if not gts:
        raise EmptyGroundTruth("no ground-truth instances")
    num_gt = defaultdict(int)
    gt_groups = defaultdict(list)
    for j, g in enumerate(gts):
        num_gt[g.category] += 1
        gt_groups[(g.image_id, g.category)].append(j)
    pred_groups = defaultdict(list)
    for i, p in enumerate(preds):
        pred_groups[(p.image_id, p.category)].append(i)

    matches = [None] * len(preds)
    pairs = []
    for key in sorted(pred_groups):
        idx = sorted(pred_groups[key], key=lambda i: (-preds[i].score, i))
        cand = gt_groups.get(key, [])
        taken = set()
        for i in idx:
            p = preds[i]
            m = Match(p.category, p.score, (-p.score, p.image_id, i))
            best_j, best_iou = None, MATCH_IOU_FLOOR
            for j in cand:
                if j in taken:
                    continue
                v = iou3d(p.box3d, gts[j].box3d, resolution)
                if v >= best_iou and (best_j is None or v > best_iou):
                    best_j, best_iou = j, v
            if best_j is not None:
                taken.add(best_j)
                m.gt_index = best_j
                m.iou = best_iou
                m.deg, m.cm = pose_errors(p.pose, gts[best_j].pose, p.category)
                pairs.append((p, gts[best_j]))
            matches[i] = m
    return MatchResult(matches, dict(num_gt), pairs)


def average_precision(tp, n_gt: int) -> float:
    """All-point interpolated area under the PR curve; tp is rank-ordered."""
    tp = np.asarray(tp, dtype=float)
    if n_gt <= 0:
        raise ValueError("n_gt must be positive")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap_from_matches(result: MatchResult, criterion: Criterion) -> float:
    """Mean over categories with GT of per-category AP, in percent."""
    by_cat = defaultdict(list)
    for m in result.matches:
        by_cat[m.category].append(m)
    aps = []
    for cat in sorted(result.num_gt):
        ms = sorted(by_cat.get(cat, []), key=lambda m: m.order)
        tp = [m.gt_index is not None and criterion.accepts(m.iou, m.deg, m.cm) for m in ms]
        aps.append(average_precision(tp, result.num_gt[cat]))
    return 100.0 * float(np.mean(aps))


def detection_ap(preds, gts, criterion: Criterion, resolution: int = 64) -> float:
    return ap_from_matches(match_detections(preds, gts, resolution), criterion)


# ---------------------------------------------------------------- shape


def sample_surface(mesh: TriangleMesh, n: int = 10_000, seed: int = 0):
    """Area-weighted surface samples and their (unit) face normals."""
    rng = np.random.default_rng(seed)
    v = mesh.vertices[mesh.faces]
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    area = np.linalg.norm(cross, axis=1)
    if area.sum() <= 0:
        raise ValueError("mesh has zero surface area")
    face = rng.choice(len(area), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = v[face, 0], v[face, 1], v[face, 2]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    normals = cross[face] / area[face, None]
    return pts, normals


def chamfer_distance(a, b) -> float:
    """Symmetric mean squared nearest-neighbor distance (raw units^2)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer_distance needs non-empty point sets")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da**2) + np.mean(db**2))


def normal_consistency(points_a, normals_a, points_b, normals_b) -> float:
    """Mean |n . n_nn| over both nearest-neighbor directions."""
    pa = np.asarray(points_a, dtype=np.float64)
    pb = np.asarray(points_b, dtype=np.float64)
    na = np.asarray(normals_a, dtype=np.float64)
    nb = np.asarray(normals_b, dtype=np.float64)
    _, ia = cKDTree(pb).query(pa)
    _, ib = cKDTree(pa).query(pb)
    ab = np.abs(np.einsum("ij,ij->i", na, nb[ia])).mean()
    ba = np.abs(np.einsum("ij,ij->i", nb, na[ib])).mean()
    return float((ab + ba) / 2.0)


def mesh_shape_metrics(pred: TriangleMesh, gt: TriangleMesh, n: int = 10_000, seed: int = 0):
    """(chamfer raw, normal consistency) from seeded surface samples.

    Both meshes are sampled with the same seed, so identical meshes score
    exactly (0, 1).
    """
    pa, na = sample_surface(pred, n, seed)
    pb, nb = sample_surface(gt, n, seed)
    da, ia = cKDTree(pb).query(pa)
    db, ib = cKDTree(pa).query(pb)
    chamfer = float(np.mean(da**2) + np.mean(db**2))
    ab = np.abs(np.einsum("ij,ij->i", na, nb[ia])).mean()
    ba = np.abs(np.einsum("ij,ij->i", nb, na[ib])).mean()
    return chamfer, float((ab + ba) / 2.0)


# ---------------------------------------------------------------- depth


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    rel: float
    delta: dict  # threshold -> percent
    count: int = 0


def _depth_pairs(pred: ImageGrid, gt: ImageGrid):
    if pred.data.shape[:2] != gt.data.shape[:2]:
        raise ValueError("depth grids must share dimensions")
    sel = pred.valid & gt.valid
    if not sel.any():
        raise NoValidPixels("no pixel is valid in both depth maps")
    return pred.plane[sel].astype(np.float64), gt.plane[sel].astype(np.float64)


def depth_metrics(pred: ImageGrid, gt: ImageGrid) -> DepthMetrics:
    d, g = _depth_pairs(pred, gt)
    return depth_metrics_from_values(d, g)


def depth_metrics_from_values(d, g) -> DepthMetrics:
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if len(d) == 0:
        raise NoValidPixels("no depth pairs to compare")
    diff = d - g
    rmse = float(np.sqrt(np.mean(diff**2)))
    rel = float(np.mean(np.abs(diff) / g))
    ratio = np.maximum(d / g, g / d)
    delta = {tau: 100.0 * float(np.mean(ratio < tau)) for tau in DELTA_THRESHOLDS}
    return DepthMetrics(rmse, rel, delta, len(d))


# ---------------------------------------------------------------- report

IOU_THRESHOLDS = (0.25, 0.5, 0.75)
POSE_CRITERIA = (
    Criterion(deg=5, cm=5),
    Criterion(deg=10, cm=5),
    Criterion(deg=10, cm=10),
    Criterion(deg=5),
    Criterion(deg=10),
    Criterion(cm=5),
    Criterion(cm=10),
)


@dataclass
class MetricReport:
    iou_ap: dict
    pose_ap: dict
    chamfer_mean: float | None = None  # x 1e-3 units
    normal_consistency: float | None = None
    depth: DepthMetrics | None = None
    num_gt: int = 0
    num_pred: int = 0

    def to_dict(self) -> dict:
        out = {
            "iou_ap": {f"{round(k * 100):d}": v for k, v in self.iou_ap.items()},
            "pose_ap": dict(self.pose_ap),
            "chamfer_mean": self.chamfer_mean,
            "normal_consistency": self.normal_consistency,
            "depth": None,
            "num_gt": self.num_gt,
            "num_pred": self.num_pred,
        }
        if self.depth is not None:
            out["depth"] = {
                "rmse": self.depth.rmse,
                "rel": self.depth.rel,
                "delta": {f"{k:g}": v for k, v in self.depth.delta.items()},
                "pixels": self.depth.count,
            }
        return out


def evaluate(
    preds, gts, resolution: int = 64, shape_samples: int = 10_000, seed: int = 0, matches: MatchResult | None = None
) -> MetricReport:
    """Full metric suite. Shape and depth metrics use matched pairs that carry meshes/depth.

    `matches` may be passed to reuse an earlier match_detections result.
    """
    preds, gts = list(preds), list(gts)
    result = matches if matches is not None else match_detections(preds, gts, resolution)
    iou_ap = {t: ap_from_matches(result, Criterion(iou=t)) for t in IOU_THRESHOLDS}
    pose_ap = {c.name: ap_from_matches(result, c) for c in POSE_CRITERIA}

    chamfers, normals, dpred, dgt = [], [], [], []
    for k, (p, g) in enumerate(result.pairs):
        if p.mesh is not None and g.mesh is not None:
            cd, nc = mesh_shape_metrics(p.mesh, g.mesh, shape_samples, seed + k)
            chamfers.append(cd)
            normals.append(nc)
        if p.depth is not None and g.depth is not None:
            sel = p.depth.valid & g.depth.valid
            dpred.append(p.depth.plane[sel].astype(np.float64))
            dgt.append(g.depth.plane[sel].astype(np.float64))
    depth = None
    if dpred and sum(len(x) for x in dpred):
        depth = depth_metrics_from_values(np.concatenate(dpred), np.concatenate(dgt))
    return MetricReport(
        iou_ap=iou_ap,
        pose_ap=pose_ap,
        chamfer_mean=1e3 * float(np.mean(chamfers)) if chamfers else None,
        normal_consistency=float(np.mean(normals)) if normals else None,
        depth=depth,
        num_gt=len(gts),
        num_pred=len(preds),
    )


def ap_curves(preds, gts, resolution: int = 64, matches: MatchResult | None = None):
    """Rows of (metric, threshold, AP%) for plotting AP against thresholds."""
    result = matches if matches is not None else match_detections(preds, gts, resolution)
    rows = []
    for t in range(0, 101):
        rows.append(("iou", t / 100.0, ap_from_matches(result, Criterion(iou=t / 100.0))))
    for d in range(0, 61):
        rows.append(("rotation_deg", float(d), ap_from_matches(result, Criterion(deg=float(d)))))
    for c in np.arange(0, 15.01, 0.5):
        rows.append(("translation_cm", float(c), ap_from_matches(result, Criterion(cm=float(c)))))
    return rows
