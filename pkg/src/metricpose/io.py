"""File formats: Wavefront OBJ meshes, MPF float maps, JSON records.

Dataset layout written by `write_scene`::

    DIR/scene_0007/record.json
    DIR/scene_0007/depth.mpf          observed depth, all objects
    DIR/scene_0007/nocs.mpf           NOCS map (possibly perturbed), all objects
    DIR/scene_0007/instances.mpf      object index per pixel, NaN = background
    DIR/scene_0007/gt_instances.mpf   unperturbed visibility
    DIR/scene_0007/obj_00.mesh.obj    normalized, view-aligned input mesh
    DIR/scene_0007/obj_00.gt.obj      ground-truth metric mesh

Objects never share a pixel, so one NOCS map and one instance map serve
every object of the image.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IndexOutOfRange, ParseError
from .geometry import (
    CAMERA_METRIC,
    NORMALIZED,
    BoundingBox2D,
    CameraIntrinsics,
    OrientedBox3D,
    SimilarityTransform,
    TriangleMesh,
    is_rotation,
)
from .raster import ImageGrid

MPF_MAGIC = b"MPF1"
RECORD_NAME = "record.json"


# ---------------------------------------------------------------- OBJ


def _obj_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        i = int(head)
    except ValueError:
        raise ParseError(f"bad face index {token!r}", line=lineno) from None
    if i == 0:
        raise IndexOutOfRange(f"line {lineno}: OBJ indices are 1-based, got 0")
    k = i - 1 if i > 0 else n_vertices + i
    if not 0 <= k < n_vertices:
        raise IndexOutOfRange(f"line {lineno}: vertex index {i} with {n_vertices} vertices defined")
    return k


def _parse_plain_obj(text: str):
    """Vectorized reader for the common case: a block of `v x y z` lines
    followed by a block of `f a b c` lines with positive plain indices.
    Returns None whenever the file is anything else."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    n_v = 0
    while n_v < len(lines) and lines[n_v].startswith("v "):
        n_v += 1
    if any(not ln.startswith("f ") for ln in lines[n_v:]):
        return None
    try:
        V = np.array(" ".join(ln[2:] for ln in lines[:n_v]).split(), dtype=np.float64)
        F = np.array(" ".join(ln[2:] for ln in lines[n_v:]).split(), dtype=np.int64)
    except ValueError:
        return None
    if V.size != 3 * n_v or F.size != 3 * (len(lines) - n_v):
        return None
    V = V.reshape(-1, 3)
    F = F.reshape(-1, 3) - 1
    if len(F) and (F.min() < 0 or F.max() >= n_v):
        return None
    if np.any((F[:, 0] == F[:, 1]) | (F[:, 1] == F[:, 2]) | (F[:, 0] == F[:, 2])):
        return None
    return V, F


def parse_obj(text: str, frame: str = CAMERA_METRIC) -> TriangleMesh:
    """Parse `v`/`f` records; polygons are fan-triangulated from their first vertex."""
    plain = _parse_plain_obj(text)
    if plain is not None:
        return TriangleMesh(plain[0], plain[1], frame)
    vertices, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ParseError("vertex needs three coordinates", line=lineno)
            try:
                vertices.append([float(x) for x in parts[1:4]])
            except ValueError:
                raise ParseError(f"bad vertex coordinate in {line!r}", line=lineno) from None
        elif tag == "f":
            if len(parts) < 4:
                raise ParseError("face needs at least three vertices", line=lineno)
            idx = [_obj_index(t, len(vertices), lineno) for t in parts[1:]]
            for j in range(1, len(idx) - 1):
                tri = (idx[0], idx[j], idx[j + 1])
                if len(set(tri)) < 3:
                    raise ParseError("face repeats a vertex", line=lineno)
                faces.append(tri)
    V = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    F = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(V, F, frame)


def load_obj(path, frame: str = CAMERA_METRIC) -> TriangleMesh:
    return parse_obj(Path(path).read_text(), frame)


def format_obj(mesh: TriangleMesh) -> str:
    # %.17g round-trips float64 exactly
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return "\n".join(lines) + "\n"


def save_obj(mesh: TriangleMesh, path) -> None:
    write_bytes(path, format_obj(mesh).encode())


# ---------------------------------------------------------------- MPF


def encode_mpf(grid: ImageGrid) -> bytes:
    data = grid.data.astype("<f4", copy=True)
    data[~grid.valid] = np.nan
    header = MPF_MAGIC + struct.pack("<III", grid.width, grid.height, grid.channels)
    return header + data.tobytes(order="C")


def decode_mpf(blob: bytes) -> ImageGrid:
    if len(blob) < 16 or blob[:4] != MPF_MAGIC:
        raise ParseError("not an MPF1 file")
    width, height, channels = struct.unpack("<III", blob[4:16])
    if channels not in (1, 3):
        raise ParseError(f"MPF channel count must be 1 or 3, got {channels}")
    expected = width * height * channels * 4
    if len(blob) - 16 != expected:
        raise ParseError(f"MPF payload is {len(blob) - 16} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(height, width, channels)
    valid = ~np.isnan(data).any(axis=2)
    return ImageGrid(data, valid)


def write_mpf(grid: ImageGrid, path) -> None:
    write_bytes(path, encode_mpf(grid))


def read_mpf(path) -> ImageGrid:
    return decode_mpf(Path(path).read_bytes())


def mask_grid(mask) -> ImageGrid:
    mask = np.asarray(mask, dtype=bool)
    return ImageGrid(np.ones(mask.shape, np.float32), mask)


def instance_grid(masks, shape) -> ImageGrid:
    ids = np.zeros(shape, np.float32)
    valid = np.zeros(shape, bool)
    for k, m in enumerate(masks):
        ids[m] = k
        valid |= m
    return ImageGrid(ids, valid)


# ---------------------------------------------------------------- JSON


def write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(doc, path) -> None:
    write_bytes(path, dumps(doc).encode())


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", line=exc.lineno) from None


def pose_to_dict(T: SimilarityTransform) -> dict:
    return {
        "scale": float(T.scale),
        "rotation": [float(x) for x in T.rotation.reshape(-1)],
        "translation": [float(x) for x in T.translation],
    }


def _rotation(entries) -> np.ndarray:
    R = np.asarray(entries, dtype=np.float64)
    if R.size != 9:
        raise ParseError("rotation needs 9 row-major entries")
    R = R.reshape(3, 3)
    if not is_rotation(R, tol=1e-6):
        raise ParseError("rotation entries do not form a proper rotation")
    if not is_rotation(R):
        # decimal round-off from a foreign writer; snap back onto SO(3)
        U, _, Vt = np.linalg.svd(R)
        R = U @ Vt
    return R


def pose_from_dict(doc: dict) -> SimilarityTransform:
    return SimilarityTransform(float(doc["scale"]), _rotation(doc["rotation"]), np.asarray(doc["translation"], dtype=np.float64))


def box_to_dict(box: OrientedBox3D) -> dict:
    return {
        "center": [float(x) for x in box.center],
        "rotation": [float(x) for x in box.rotation.reshape(-1)],
        "half_extents": [float(x) for x in box.half_extents],
    }


def box_from_dict(doc: dict) -> OrientedBox3D:
    return OrientedBox3D(
        np.asarray(doc["center"], float), _rotation(doc["rotation"]), np.asarray(doc["half_extents"], float)
    )


def intrinsics_from_dict(doc) -> CameraIntrinsics:
    if isinstance(doc, dict):
        return CameraIntrinsics(
            float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]), int(doc["width"]), int(doc["height"])
        )
    fx, fy, cx, cy, w, h = doc
    return CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))


def intrinsics_to_dict(K: CameraIntrinsics) -> dict:
    return {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": int(K.width), "height": int(K.height)}


# ---------------------------------------------------------------- records


@dataclass
class ObjectInputs:
    """Everything `estimate_object` needs for one object, loaded from disk."""

    image_id: str
    index: int
    category: str
    mesh: TriangleMesh
    bbox: BoundingBox2D
    z_center: float
    radius: float
    intrinsics: CameraIntrinsics
    nocs: ImageGrid
    mask: np.ndarray
    od: tuple | None
    score: float


class Record:
    """One image's record.json plus lazy access to the files it references."""

    def __init__(self, path):
        self.path = Path(path)
        self.root = self.path.parent
        doc = read_json(self.path)
        try:
            self.image_id = str(doc.get("image_id", self.root.name))
            self.intrinsics = intrinsics_from_dict(doc["intrinsics"])
            self.objects = list(doc["objects"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{self.path}: malformed record ({exc})") from None
        self.doc = doc
        self._maps: dict = {}

    def __len__(self):
        return len(self.objects)

    def _resolve(self, ref) -> Path:
        p = self.root / ref
        if not p.exists():
            raise FileNotFoundError(f"{self.path}: referenced file {ref!r} does not exist")
        return p

    def map(self, ref) -> ImageGrid:
        if ref not in self._maps:
            self._maps[ref] = read_mpf(self._resolve(ref))
        return self._maps[ref]

    def object_doc(self, index: int) -> dict:
        if not 0 <= index < len(self.objects):
            raise IndexOutOfRange(f"object index {index} outside [0, {len(self.objects)})")
        return self.objects[index]

    def _instance_mask(self, ref, value) -> np.ndarray:
        grid = self.map(ref)
        if value is None:
            return grid.valid.copy()
        return grid.valid & (grid.plane == np.float32(value))

    def object_mask(self, index: int) -> np.ndarray:
        o = self.object_doc(index)
        return self._instance_mask(o["mask"], o.get("mask_value"))

    def gt_mask(self, index: int) -> np.ndarray:
        o = self.object_doc(index)
        return self._instance_mask(o.get("gt_mask", o["mask"]), o.get("mask_value"))

    def inputs(self, index: int) -> ObjectInputs:
        o = self.object_doc(index)
        mask = self.object_mask(index)
        nocs = self.map(o["nocs"])
        od = tuple(o["od"]) if o.get("od") is not None else None
        return ObjectInputs(
            image_id=self.image_id,
            index=index,
            category=str(o["category"]),
            mesh=load_obj(self._resolve(o["mesh"]), NORMALIZED),
            bbox=BoundingBox2D(*[float(x) for x in o["bbox"]]),
            z_center=float(o["z_center"]),
            radius=float(o["radius"]),
            intrinsics=self.intrinsics,
            nocs=ImageGrid(nocs.data, nocs.valid & mask),
            mask=mask,
            od=od,
            score=float(o.get("score", 1.0)),
        )

    def gt_detection(self, index: int):
        """Ground-truth DetectionRecord for object `index` (None without a pose)."""
        from .metrics import DetectionRecord

        o = self.object_doc(index)
        if o.get("pose") is None:
            return None
        mesh = load_obj(self._resolve(o["metric_mesh"])) if o.get("metric_mesh") else None
        depth = None
        if o.get("depth"):
            full = self.map(o["depth"])
            m = self.gt_mask(index)
            depth = ImageGrid(full.data, full.valid & m)
        return DetectionRecord(
            image_id=self.image_id,
            category=str(o["category"]),
            box3d=box_from_dict(o["box3d"]),
            pose=pose_from_dict(o["pose"]),
            score=float(o.get("score", 1.0)),
            mesh=mesh,
            depth=depth,
        )


def scene_dirname(seed_index: int) -> str:
    return f"scene_{seed_index:04d}"


def write_scene(out_dir, image_id: str, render, bundles=None) -> Path:
    """Write one synthetic image in the dataset layout.

    `bundles` are the (possibly perturbed) predictor-side inputs; they
    default to the oracle bundles of `render`.
    """
    root = Path(out_dir) / image_id
    gt = render.objects
    bundles = gt if bundles is None else bundles
    K = render.spec.intrinsics
    shape = (K.height, K.width)

    write_mpf(render.depth, root / "depth.mpf")
    write_mpf(instance_grid([b.mask for b in gt], shape), root / "gt_instances.mpf")
    same_masks = all(np.array_equal(b.mask, g.mask) for b, g in zip(bundles, gt))
    mask_ref = "gt_instances.mpf"
    if not same_masks:
        write_mpf(instance_grid([b.mask for b in bundles], shape), root / "instances.mpf")
        mask_ref = "instances.mpf"

    nocs = np.zeros((K.height, K.width, 3), np.float32)
    nvalid = np.zeros(shape, bool)
    for b in bundles:
        sel = b.nocs.valid
        nocs[sel] = b.nocs.data[sel]
        nvalid |= sel
    write_mpf(ImageGrid(nocs, nvalid), root / "nocs.mpf")

    objects = []
    for k, (b, g) in enumerate(zip(bundles, gt)):
        save_obj(b.mesh, root / f"obj_{k:02d}.mesh.obj")
        save_obj(g.metric_mesh, root / f"obj_{k:02d}.gt.obj")
        (u, v), d = g.observation.pixel, g.observation.depth
        objects.append(
            {
                "category": b.category,
                "bbox": [b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h],
                "z_center": b.z_center,
                "radius": b.radius,
                "mesh": f"obj_{k:02d}.mesh.obj",
                "nocs": "nocs.mpf",
                "depth": "depth.mpf",
                "mask": mask_ref,
                "gt_mask": "gt_instances.mpf",
                "mask_value": k,
                "od": [int(u), int(v), float(d)],
                "score": 1.0,
                "pose": pose_to_dict(g.gt_pose),
                "box3d": box_to_dict(g.box3d),
                "metric_mesh": f"obj_{k:02d}.gt.obj",
                "gt_z_center": g.z_center,
                "gt_radius": g.radius,
            }
        )
    write_json(
        {
            "image_id": image_id,
            "seed": int(render.spec.seed),
            "intrinsics": intrinsics_to_dict(K),
            "depth": "depth.mpf",
            "objects": objects,
        },
        root / RECORD_NAME,
    )
    return root / RECORD_NAME


def find_records(root) -> list:
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(root.rglob(RECORD_NAME))


def find_predictions(root) -> list:
    return sorted(Path(root).rglob("*.pose.json"))
