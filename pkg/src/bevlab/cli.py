"""Command-line front door: run pipelines on synthetic scenes, benchmark
view-transform variants, render feature maps, and execute the verification
suites.

Exit codes: 0 success, 1 verification failures, 2 invalid config or input
file, 3 runtime failure. All outputs are deterministic given (config, seed)
except the timings in bench.csv.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time

import numpy as np

from . import autodiff as ad
from . import bfk
from .decoder import ATTENTION_MODES
from .geometry import BevGrid
from .pipeline import (PipelineConfig, QUERY_INIT_MODES, VT_MODES, forward,
                       init_params)
from .query_select import DEFAULT_GROUPS, GroupSpec, gaussian_target
from .scene_sim import (SceneConfig, make_scene, ray_smear_metric, save_scene)


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "dtype": "f64",
    "model": {
        "channels": 32,
        "n_heights": 4,
        "n_points": 16,
        "n_layers": 6,
        "n_heads": 8,
        "pe_dim": 0,
        "queries_per_group": 150,
        "groups": [list(g) for g in DEFAULT_GROUPS],
        "vt_mode": "asap",
        "query_init": "mixed_groupwise",
        "attention_mode": "geometry_aware",
    },
    "grid": {
        "x_range": [-54.0, 54.0],
        "y_range": [-54.0, 54.0],
        "z_range": [-5.0, 3.0],
        "cells": [180, 180],
    },
    "scene": {
        "n_scenes": 1,
        "seed": 0,
        "n_boxes": 5,
        "noise_std": 0.0,
        "image_size": [128, 128],
        "strides": [4, 8],
        "n_cameras": 6,
        "cam_height": 1.8,
        "fov_deg": 70.0,
        "classes": None,
        "fixed_dims": None,
    },
    "bench": {
        "reps": 5,
        "modes": ["vanilla", "as_only", "ap_only", "asap"],
    },
}


def _merge_section(name, defaults, given):
    if not isinstance(given, dict):
        raise ConfigError(f"section '{name}' must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


def validate_config(doc):
    """Strict-schema validation: unknown keys are rejected at every level."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = {}
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            cfg[key] = _merge_section(key, default, doc.get(key, {}))
        else:
            cfg[key] = doc.get(key, default)

    if cfg["dtype"] not in ("f64", "f32"):
        raise ConfigError("dtype must be 'f64' or 'f32'")
    m = cfg["model"]
    if m["vt_mode"] not in VT_MODES:
        raise ConfigError(f"vt_mode must be one of {VT_MODES}")
    if m["query_init"] not in QUERY_INIT_MODES:
        raise ConfigError(f"query_init must be one of {QUERY_INIT_MODES}")
    if m["attention_mode"] not in ATTENTION_MODES:
        raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
    b = cfg["bench"]
    bad = set(b["modes"]) - set(VT_MODES)
    if bad:
        raise ConfigError(f"unknown bench modes: {sorted(bad)}")
    return cfg


def build_configs(cfg):
    """PipelineConfig and SceneConfig from a validated config document."""
    g = cfg["grid"]
    grid = BevGrid(tuple(g["x_range"]), tuple(g["y_range"]),
                   tuple(g["z_range"]), tuple(g["cells"]))
    m = cfg["model"]
    s = cfg["scene"]
    try:
        groups = GroupSpec(tuple(tuple(x) for x in m["groups"]),
                           m["queries_per_group"])
        pipeline = PipelineConfig(
            grid=grid, channels=m["channels"], n_heights=m["n_heights"],
            strides=tuple(s["strides"]), image_size=tuple(s["image_size"]),
            n_cameras=s["n_cameras"], groups=groups, n_points=m["n_points"],
            n_layers=m["n_layers"], n_heads=m["n_heads"], pe_dim=m["pe_dim"],
            vt_mode=m["vt_mode"], query_init=m["query_init"],
            attention_mode=m["attention_mode"])
        scene_cfg = SceneConfig(
            grid=grid, channels=m["channels"], n_boxes=s["n_boxes"],
            noise_std=s["noise_std"], image_size=tuple(s["image_size"]),
            strides=tuple(s["strides"]), n_cameras=s["n_cameras"],
            cam_height=s["cam_height"], fov_deg=s["fov_deg"],
            classes=tuple(s["classes"]) if s["classes"] else
            SceneConfig.__dataclass_fields__["classes"].default,
            fixed_dims=tuple(s["fixed_dims"]) if s["fixed_dims"] else None)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return pipeline, scene_cfg


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    return validate_config(doc)


def _json_dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _threads(cfg, flag):
    env = os.environ.get("BFK_THREADS")
    if env is not None:
        return max(1, int(env))
    if flag is not None:
        return max(1, flag)
    return max(1, cfg["threads"])


# ---------------------------------------------------------------------------
# commands


def cmd_run(config_path, out_dir, threads=None):
    cfg = load_config(config_path)
    pipeline_cfg, scene_cfg = build_configs(cfg)
    n_threads = _threads(cfg, threads)
    os.makedirs(out_dir, exist_ok=True)

    f32 = cfg["dtype"] == "f32"
    params = init_params(pipeline_cfg, seed=cfg["seed"])
    if f32:
        params = ad.tree_map(lambda a: a.astype(np.float32), params)

    detections = []
    summary_scenes = []
    for i in range(cfg["scene"]["n_scenes"]):
        scene = make_scene(scene_cfg, seed=cfg["scene"]["seed"] + i)
        save_scene(os.path.join(out_dir, f"scene_{i}.json"), scene)
        det, diag, extras = forward(pipeline_cfg, params, scene,
                                    n_threads=n_threads)
        detections.append({"scene": i, "layers": det.to_json_dict(pipeline_cfg.grid)})

        bfk.save(os.path.join(out_dir, f"bev_camera_{i}.bfk"),
                 extras["bev_camera"])
        bfk.save(os.path.join(out_dir, f"bev_fuse_{i}.bfk"), extras["bev_fuse"])
        if extras["heatmaps"] is not None:
            bfk.save(os.path.join(out_dir, f"heatmaps_{i}.bfk"),
                     extras["heatmaps"])

        entry = {
            "scene": i,
            "n_boxes": len(scene.boxes),
            "validity_fraction_mean": float(diag.validity_fraction.mean()),
        }
        if scene.boxes:
            entry["ray_smear"] = ray_smear_metric(extras["bev_camera"], scene,
                                                  pipeline_cfg.grid)
            if extras["heatmaps"] is not None:
                targets, _ = gaussian_target(scene.boxes, pipeline_cfg.grid,
                                             pipeline_cfg.groups.n_classes)
                from .decoder import gaussian_focal_loss
                entry["heatmap_loss"] = float(ad.val(
                    gaussian_focal_loss(extras["heatmaps"], targets)))
        summary_scenes.append(entry)

    _json_dump(os.path.join(out_dir, "detections.json"), detections)
    _json_dump(os.path.join(out_dir, "summary.json"), {
        "n_scenes": cfg["scene"]["n_scenes"],
        "n_queries": pipeline_cfg.groups.n_queries,
        "n_groups": pipeline_cfg.groups.n_groups,
        "queries_per_group": pipeline_cfg.groups.queries_per_group,
        "vt_mode": pipeline_cfg.vt_mode,
        "query_init": pipeline_cfg.query_init,
        "attention_mode": pipeline_cfg.attention_mode,
        "scenes": summary_scenes,
    })
    return 0


def cmd_bench(config_path, out_dir, reps=None, threads=None):
    cfg = load_config(config_path)
    reps = cfg["bench"]["reps"] if reps is None else reps
    if reps < 3:
        raise ConfigError("bench needs at least 3 repetitions")
    pipeline_cfg, scene_cfg = build_configs(cfg)
    n_threads = _threads(cfg, threads)
    os.makedirs(out_dir, exist_ok=True)

    scene = make_scene(scene_cfg, seed=cfg["scene"]["seed"])
    rows = []
    for mode in cfg["bench"]["modes"]:
        import dataclasses
        mode_cfg = dataclasses.replace(pipeline_cfg, vt_mode=mode)
        params = init_params(mode_cfg, seed=cfg["seed"])
        if cfg["dtype"] == "f32":
            params = ad.tree_map(lambda a: a.astype(np.float32), params)
        samples = {k: [] for k in ("vt", "fuse", "select", "decoder")}
        for rep in range(reps + 1):  # first run is warmup
            _, _, extras = forward(mode_cfg, params, scene,
                                   n_threads=n_threads)
            if rep == 0:
                continue
            for k in samples:
                samples[k].append(extras["stage_times"][k] * 1000.0)
        for stage, times in samples.items():
            rows.append((mode, stage, statistics.median(times),
                         float(np.percentile(times, 90))))

    path = os.path.join(out_dir, "bench.csv")
    with open(path, "w") as fh:
        fh.write("mode,stage,median_ms,p90_ms\n")
        for mode, stage, med, p90 in rows:
            fh.write(f"{mode},{stage},{med:.3f},{p90:.3f}\n")
    return 0


def cmd_viz(tensor_path, out_path, channel=None, norm=False, points=None):
    try:
        arr = bfk.load(tensor_path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load tensor: {exc}") from exc
    if arr.ndim != 3:
        raise ConfigError(f"viz needs a rank-3 tensor, got rank {arr.ndim}")
    if channel is not None:
        if not (0 <= channel < arr.shape[0]):
            raise ConfigError(f"channel {channel} out of range")
        img = arr[channel]
    else:
        # default and --norm: per-cell channel norm
        img = np.sqrt(np.sum(arr ** 2, axis=0))

    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        pix = np.full(img.shape, 128, dtype=np.uint8)
    else:
        pix = np.round((img - lo) / (hi - lo) * 255.0).astype(np.uint8)

    if points is not None:
        try:
            with open(points) as fh:
                pts = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read points file: {exc}") from exc
        H, W = pix.shape
        for x, y in pts:
            xi, yi = int(round(x)), int(round(y))
            if 0 <= xi < W and 0 <= yi < H:
                pix[yi, xi] = 255

    with open(out_path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (pix.shape[1], pix.shape[0]))
        fh.write(pix.tobytes())
    return 0


def cmd_verify(suite="all", seed=0):
    from .verify import run_suites

    results = run_suites(suite, seed=seed)
    width = max(len(name) for name, _, _ in results)
    failures = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        print(f"{status}  {name.ljust(width)}  {detail}")
        failures += not ok
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="bevlab",
        description="BEV view-transform and detection lab on synthetic scenes")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the pipeline, write detections")
    run.add_argument("config")
    run.add_argument("--out", required=True)
    run.add_argument("--threads", type=int, default=None)

    bench = sub.add_parser("bench", help="time VT variants, write bench.csv")
    bench.add_argument("config")
    bench.add_argument("--out", required=True)
    bench.add_argument("--reps", type=int, default=None)
    bench.add_argument("--threads", type=int, default=None)

    viz = sub.add_parser("viz", help="render a BFK1 tensor to a PGM image")
    viz.add_argument("tensor")
    viz.add_argument("--out", required=True)
    viz.add_argument("--channel", type=int, default=None)
    viz.add_argument("--norm", action="store_true",
                     help="channel-norm image (the default)")
    viz.add_argument("--points", default=None,
                     help="JSON [[x, y], ...] drawn as white pixels")

    ver = sub.add_parser("verify", help="run the verification suites")
    ver.add_argument("--suite", choices=("all", "grad", "oracle", "props"),
                     default="all")
    ver.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, threads=args.threads)
        if args.command == "bench":
            return cmd_bench(args.config, args.out, reps=args.reps,
                             threads=args.threads)
        if args.command == "viz":
            return cmd_viz(args.tensor, args.out, channel=args.channel,
                           norm=args.norm, points=args.points)
        if args.command == "verify":
            return cmd_verify(args.suite, seed=args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
