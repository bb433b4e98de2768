"""Metric-scale object pose and size from normalized shape, center depth and NOCS maps."""

from .errors import (
    DegenerateInput,
    EmptyGroundTruth,
    EmptyRender,
    IndexOutOfRange,
    InvalidBox,
    MetricPoseError,
    NoConsensus,
    NoCorrespondences,
    NotARotation,
    NoValidPixels,
    ParseError,
    PixelNotCovered,
    UnknownCategory,
)
from .geometry import (
    BoundingBox2D,
    CameraIntrinsics,
    OrientedBox3D,
    SimilarityTransform,
    TriangleMesh,
    apply_similarity,
    rotation_geodesic_deg,
    umeyama,
)
from .lift import LiftInputs, lift_to_metric
from .metrics import DetectionRecord, MetricReport, chamfer_distance, depth_metrics, detection_ap, iou3d, pose_errors
from .noce import NoceScalars, noce_denormalize, noce_normalize
from .pose import RansacConfig, SparseDepthObservation, build_correspondences, estimate_object, refine_with_sparse_depth, solve_pose
from .raster import ImageGrid, render_attributes, render_depth
from .synth import PerturbationSpec, SceneSpec, generate_scene, make_category_mesh, perturb, render_ground_truth

__version__ = "0.1.0"
