"""Command-line front end: synth, lift, render, solve, eval, ablate.

Errors are reported as one JSON object on stderr. Exit codes: 0 ok,
2 usage, 3 data error, 4 no RANSAC consensus.
"""

from __future__ import annotations

import argparse
import csv
import io as _stringio
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import ablation
from .errors import MetricPoseError, ParseError
from .geometry import NORMALIZED, normalize_mesh
from .io import (
    Record,
    dumps,
    find_predictions,
    find_records,
    intrinsics_from_dict,
    load_obj,
    pose_from_dict,
    box_from_dict,
    box_to_dict,
    pose_to_dict,
    read_json,
    read_mpf,
    save_obj,
    write_json,
    write_mpf,
    write_scene,
    write_bytes,
)
from .lift import LiftInputs, lift_to_metric
from .metrics import DetectionRecord, ap_curves, evaluate, match_detections
from .pose import RansacConfig, SparseDepthObservation, estimate_object, object_box
from .raster import render_attributes, render_depth
from .synth import PerturbationSpec, generate_scene, perturb

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONSENSUS = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- argument helpers


def _floats(text: str, n: int, what: str) -> list:
    parts = text.split(",")
    if len(parts) != n:
        raise UsageError(f"{what} needs {n} comma-separated numbers, got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"{what}: cannot parse {text!r}") from None


def parse_perturb(text: str | None) -> PerturbationSpec:
    if not text:
        return PerturbationSpec()
    keys = {"z": "z_rel_noise", "r": "r_rel_noise", "nocs": "nocs_noise_sigma", "outliers": "nocs_outlier_frac", "erode": "mask_erosion_px"}
    kwargs = {}
    for item in text.split(","):
        name, _, value = item.partition("=")
        if name not in keys or not value:
            raise UsageError(f"--perturb entries are z=,r=,nocs=,outliers=,erode=; got {item!r}")
        try:
            kwargs[keys[name]] = int(value) if name == "erode" else float(value)
        except ValueError:
            raise UsageError(f"--perturb: bad value in {item!r}") from None
    try:
        return PerturbationSpec(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def thread_count(args) -> int:
    if getattr(args, "threads", None) is not None:
        n = args.threads
    else:
        env = os.environ.get("MP_THREADS", "")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"MP_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _map(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _ransac(args) -> RansacConfig:
    try:
        return RansacConfig(iterations=args.ransac_iters, inlier_threshold=args.inlier_thresh, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> dict:
    spec = parse_perturb(args.perturb)
    threads = thread_count(args)
    out = Path(args.out)

    def one(i):
        render = generate_scene(ablation.scene_seed(args.seed, i))
        bundles = [perturb(b, spec, ablation.object_seed(args.seed, i, k)) for k, b in enumerate(render.objects)]
        write_scene(out, f"scene_{i:04d}", render, bundles)
        return len(bundles)

    counts = _map(one, range(args.scenes), threads)
    return {"scenes": args.scenes, "objects": int(sum(counts)), "out": str(out)}


def cmd_lift(args) -> dict:
    rec = Record(args.record)
    inp = rec.inputs(args.index)
    mesh = lift_to_metric(LiftInputs(inp.mesh, inp.bbox, inp.z_center, inp.radius, inp.intrinsics))
    save_obj(mesh, args.out)
    return {"out": args.out, "vertices": len(mesh.vertices), "faces": len(mesh.faces)}


def cmd_render(args) -> dict:
    K = intrinsics_from_dict(_floats(args.intrinsics, 6, "--intrinsics"))
    mesh = load_obj(args.mesh)
    threads = thread_count(args)
    write_mpf(render_depth(mesh, K, threads=threads), args.out)
    if args.nocs:
        if args.nocs_source:
            src = load_obj(args.nocs_source, NORMALIZED)
            if len(src.vertices) != len(mesh.vertices):
                raise ParseError("--nocs-source must have the same vertex count as --mesh")
            coords = src.vertices
        else:
            coords = normalize_mesh(mesh.vertices, mesh.faces).vertices
        write_mpf(render_attributes(mesh, coords + 0.5, K, threads=threads), args.nocs)
    return {"out": args.out, "nocs": args.nocs}


def _sidecars(pose_path: Path):
    name = pose_path.name
    stem = name[: -len(".pose.json")] if name.endswith(".pose.json") else pose_path.stem
    return pose_path.with_name(stem + ".mesh.obj"), pose_path.with_name(stem + ".depth.mpf")


def solve_one(rec: Record, index: int, out: Path, config: RansacConfig, od, rule: str, threads: int, steps: int = 50) -> dict:
    inp = rec.inputs(index)
    obs = None
    if od == "record":
        if inp.od is None:
            raise ParseError(f"object {index} has no od entry")
        obs = SparseDepthObservation((int(inp.od[0]), int(inp.od[1])), float(inp.od[2]))
    elif od is not None:
        u, v, d = od
        obs = SparseDepthObservation((int(u), int(v)), float(d))
    lift = LiftInputs(inp.mesh, inp.bbox, inp.z_center, inp.radius, inp.intrinsics)
    res = estimate_object(lift, inp.nocs, inp.mask, config, obs=obs, rule=rule, threads=threads, refine_steps=steps)
    mesh_path, depth_path = _sidecars(out)
    save_obj(res.mesh, mesh_path)
    write_mpf(res.depth, depth_path)
    T = res.pose.transform
    doc = {
        "image_id": rec.image_id,
        "index": index,
        "category": inp.category,
        "score": inp.score,
        "pose": pose_to_dict(T),
        "size": [float(x) for x in res.pose.size],
        "box3d": box_to_dict(object_box(res.mesh, T)),
        "inlier_count": res.pose.inlier_count,
        "inlier_ratio": res.pose.inlier_ratio,
        "z_center": res.z_center,
        "radius": res.radius,
        "refined": obs is not None,
        "mesh": mesh_path.name,
        "depth": depth_path.name,
        "ransac": {"iterations": config.iterations, "inlier_threshold": config.inlier_threshold, "seed": config.seed},
    }
    write_json(doc, out)
    return doc


def cmd_solve(args) -> dict:
    config = _ransac(args)
    threads = thread_count(args)
    od = None
    if args.od is not None:
        od = "record" if args.od == "record" else _floats(args.od, 3, "--od")
    out = Path(args.out)
    if args.index is not None:
        doc = solve_one(Record(args.record), args.index, out, config, od, args.rule, threads, args.refine_steps)
        return {"out": str(out), "inliers": doc["inlier_count"]}
    if od not in (None, "record"):
        raise UsageError("--od u,v,d needs --index; use --od record for batch solves")
    jobs = []
    for path in find_records(args.record):
        rec = Record(path)
        jobs += [(rec, k) for k in range(len(rec))]
    if not jobs:
        raise ParseError(f"no {Path(args.record).name} records found")

    def one(job):
        rec, k = job
        try:
            solve_one(rec, k, out / rec.image_id / f"obj_{k:02d}.pose.json", config, od, args.rule, 1, args.refine_steps)
            return None
        except MetricPoseError as exc:
            return {"image_id": rec.image_id, "index": k, "error": type(exc).__name__, "message": str(exc)}

    failures = [f for f in _map(one, jobs, threads) if f is not None]
    return {"out": str(out), "solved": len(jobs) - len(failures), "failed": failures}


def load_prediction(path: Path) -> DetectionRecord:
    doc = read_json(path)
    mesh = depth = None
    if doc.get("mesh") and (path.parent / doc["mesh"]).exists():
        mesh = load_obj(path.parent / doc["mesh"])
    if doc.get("depth") and (path.parent / doc["depth"]).exists():
        depth = read_mpf(path.parent / doc["depth"])
    try:
        return DetectionRecord(
            image_id=str(doc["image_id"]),
            category=str(doc["category"]),
            box3d=box_from_dict(doc["box3d"]),
            pose=pose_from_dict(doc["pose"]),
            score=float(doc.get("score", 1.0)),
            mesh=mesh,
            depth=depth,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed prediction ({exc})") from None


def _ground_truth(root, threads: int) -> list:
    def one(path):
        rec = Record(path)
        return [d for d in (rec.gt_detection(k) for k in range(len(rec))) if d is not None]

    return [d for group in _map(one, find_records(root), threads) for d in group]


def _sort_key(d: DetectionRecord):
    return (d.image_id, d.category, -d.score)


def cmd_eval(args) -> dict:
    threads = thread_count(args)
    gts = _ground_truth(args.gt, threads)
    pred_files = find_predictions(args.pred)
    if pred_files:
        preds = _map(load_prediction, pred_files, threads)
    else:
        # a dataset directory scores its own ground truth as predictions
        preds = _ground_truth(args.pred, threads)
    preds.sort(key=_sort_key)
    gts.sort(key=_sort_key)
    matches = match_detections(preds, gts)
    report = evaluate(preds, gts, shape_samples=args.shape_samples, seed=args.seed, matches=matches)
    doc = report.to_dict()
    write_json(doc, args.out)
    if args.curves:
        buf = _stringio.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "threshold", "ap"])
        for metric, thr, ap in ap_curves(preds, gts, matches=matches):
            writer.writerow([metric, f"{thr:g}", f"{ap:.6f}"])
        write_bytes(args.curves, buf.getvalue().encode())
    return {"out": args.out, "iou_ap": doc["iou_ap"], "pose_ap": doc["pose_ap"]}


def cmd_ablate(args) -> dict:
    if args.mode == "noce":
        doc = ablation.run_noce(args.seed, args.scenes, solve=not args.no_solve)
    else:
        doc = ablation.run_depth_source(
            args.seed, args.scenes, args.mode, z_noise=args.z_noise, pixel_noise=args.pixel_noise
        )
    if args.out:
        write_json(doc, args.out)
    return doc


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metricpose", description="Metric-scale object pose pipeline on geometry-level inputs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--threads", type=int, default=None, help="worker threads (overrides MP_THREADS)")
        return sp

    s = add("synth", "write a synthetic dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--perturb", default=None, help="z=..,r=..,nocs=..,outliers=..,erode=..")

    s = add("lift", "lift a record's normalized mesh to camera-metric scale")
    s.add_argument("--record", required=True)
    s.add_argument("--index", type=int, required=True)
    s.add_argument("--out", required=True)

    s = add("render", "rasterize a mesh to depth (and optionally NOCS)")
    s.add_argument("--mesh", required=True)
    s.add_argument("--intrinsics", required=True, help="fx,fy,cx,cy,w,h")
    s.add_argument("--out", required=True)
    s.add_argument("--nocs", default=None)
    s.add_argument("--nocs-source", default=None, help="normalized mesh supplying per-vertex NOCS coordinates")

    s = add("solve", "estimate pose and size for one object, or every object under a directory")
    s.add_argument("--record", required=True, help="record.json, or a dataset directory without --index")
    s.add_argument("--index", type=int, default=None)
    s.add_argument("--od", default=None, help="u,v,d observed depth pixel, or 'record'")
    s.add_argument("--rule", choices=("additive", "ratio"), default="additive")
    s.add_argument("--refine-steps", type=int, default=50, help="max refine/re-render passes with --od")
    s.add_argument("--ransac-iters", type=int, default=256)
    s.add_argument("--inlier-thresh", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="pose.json, or an output directory in batch mode")

    s = add("eval", "score predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--curves", default=None)
    s.add_argument("--shape-samples", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)

    s = add("ablate", "synthetic ablations: NOCE and depth source")
    s.add_argument("--mode", required=True, choices=("noce", "regress-depth", "rendered-depth"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenes", type=int, default=20)
    s.add_argument("--z-noise", type=float, default=0.2)
    s.add_argument("--pixel-noise", type=float, default=0.02)
    s.add_argument("--no-solve", action="store_true", help="noce mode: report center depth only")
    s.add_argument("--out", default=None)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "lift": cmd_lift,
    "render": cmd_render,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        summary = COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "UsageError", str(exc))
    except MetricPoseError as exc:
        return _fail(exc.exit_code, type(exc).__name__, str(exc))
    except (FileNotFoundError, IsADirectoryError, ValueError) as exc:
        return _fail(EXIT_DATA, type(exc).__name__, str(exc))
    sys.stdout.write(dumps(summary))
    return EXIT_OK


def run() -> None:
    sys.exit(main())
