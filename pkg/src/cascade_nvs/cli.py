"""Command-line entry point: ``cascade-nvs <command> [--config FILE] [--field value ...]``.

Every command resolves one :class:`RunConfig` (defaults, then an optional
preset, then the JSON config file, then command-line flags), writes it to
``<output>/config.resolved.json`` and runs. Exit codes: 0 on success, 1 for
usage or configuration errors, 2 for runtime failures (corrupt inputs,
divergence, failed gradient checks).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .errors import CascadeNVSError, ConfigError, DivergenceError, GeometryError, ParseError

ENV_THREADS = "CASCADE_NVS_THREADS"

PRESETS = {
    # DTU-style cascade: raw millimetre depths, no adaptive scaling.
    "dtu": {"M1": 48, "delta1": 10.6, "K": 3, "d_min": 425.0},
}

BACKENDS = ("photometric", "learned")
SCENE_KINDS = ("random", "box")


@dataclass
class RunConfig:
    """Effective settings of one command run. See ``docs/config.md``."""

    # data and outputs
    dataset: str | None = None
    output: str | None = None
    novel: str | None = None
    checkpoint: str | None = None
    pred: str | None = None
    gt: str | None = None
    seed: int = 0
    preset: str | None = None
    # depth cascade
    backend: str = "photometric"
    K: int = 3
    M1: int = 48
    delta1: float | None = None
    C: float = 100.0
    d_min: float | None = None
    d_max: float | None = None
    dump_stages: bool = False
    # views
    N: int = 4
    Q: int = 3
    targets: list | None = None
    novel_per_gap: int = 1
    path_frames: int = 9
    # fusion and point-cloud evaluation
    tau_p: float = 0.3
    tau_px: float = 1.0
    tau_rel: float = 0.01
    S: int = 3
    tau_f: float = 0.01
    # synthetic data
    n_scenes: int = 1
    n_views: int = 5
    width: int = 64
    height: int = 64
    complexity: int = 1
    scene_kind: str = "random"
    gt_density: int = 4
    # training
    epochs: int = 20
    lr: float = 1e-3
    lambda_d: float = 1.0
    eval_scenes: int = 2
    # gradient suite
    grad_shapes: int = 20

    def validate(self) -> "RunConfig":
        from .planes import cascade_schedule

        def need(cond, field, msg):
            if not cond:
                raise ConfigError(f"config field {field!r}: {msg}")

        need(self.backend in BACKENDS, "backend", f"must be one of {BACKENDS}")
        need(self.scene_kind in SCENE_KINDS, "scene_kind", f"must be one of {SCENE_KINDS}")
        need(self.preset is None or self.preset in PRESETS, "preset", f"must be one of {tuple(PRESETS)}")
        need(self.N >= 1, "N", "must be >= 1")
        need(self.Q >= 1, "Q", "must be >= 1")
        need(self.K >= 1, "K", "must be >= 1")
        need(self.C > 0, "C", "must be positive")
        need(self.delta1 is None or self.delta1 > 0, "delta1", "must be positive")
        need(self.d_min is None or self.d_min > 0, "d_min", "must be positive")
        need(self.d_max is None or self.d_min is None or self.d_max > self.d_min, "d_max", "must exceed d_min")
        need(0.0 <= self.tau_p <= 1.0, "tau_p", "must lie in [0, 1]")
        need(self.tau_px > 0, "tau_px", "must be positive")
        need(self.tau_rel > 0, "tau_rel", "must be positive")
        need(self.S >= 1, "S", "must be >= 1")
        need(self.tau_f > 0, "tau_f", "must be positive")
        need(self.n_scenes >= 1, "n_scenes", "must be >= 1")
        need(self.n_views >= 2, "n_views", "must be >= 2")
        need(self.complexity >= 0, "complexity", "must be >= 0")
        need(self.gt_density >= 1, "gt_density", "must be >= 1")
        need(self.novel_per_gap >= 1, "novel_per_gap", "must be >= 1")
        need(self.path_frames >= 1, "path_frames", "must be >= 1")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(self.lr > 0, "lr", "must be positive")
        need(self.lambda_d >= 0, "lambda_d", "must be >= 0")
        need(self.eval_scenes >= 0, "eval_scenes", "must be >= 0")
        need(self.grad_shapes >= 1, "grad_shapes", "must be >= 1")
        step = 2 ** max(self.K - 1, 3)
        need(self.width % step == 0, "width", f"must be divisible by {step}")
        need(self.height % step == 0, "height", f"must be divisible by {step}")
        if self.targets is not None:
            for t in self.targets:
                need(
                    isinstance(t, list) and len(t) == 3 and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in t),
                    "targets",
                    "entries must be [i, j, t] triples",
                )
                need(float(t[0]).is_integer() and float(t[1]).is_integer(), "targets", "view indices must be integers")
        try:
            cascade_schedule(self.M1, 1.0, self.K)
        except ConfigError as exc:
            raise ConfigError(f"config field 'M1': {exc}") from None
        return self


_HINTS = typing.get_type_hints(RunConfig)


def _coerce(name: str, value):
    """Check a JSON value against the field type; ints are accepted for floats."""
    hint = _HINTS[name]
    args = typing.get_args(hint)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    if value is None:
        if optional:
            return None
        raise ConfigError(f"config field {name!r}: must not be null")
    base = typing.get_origin(base) or base
    if base is bool:
        ok = isinstance(value, bool)
    elif base is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif base is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, base)
    if not ok:
        raise ConfigError(f"config field {name!r}: expected {getattr(base, '__name__', base)}, got {type(value).__name__}")
    return value


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: byte {exc.pos}: invalid JSON: {exc.msg}") from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: byte {exc.start}: config is not UTF-8 text") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then preset, then file values, then overrides."""
    names = {f.name for f in fields(RunConfig)}
    layers = [file_values or {}, overrides or {}]
    for layer in layers:
        for k in layer:
            if k not in names:
                raise ConfigError(f"config field {k!r}: unknown field")
    preset = None
    for layer in layers:
        preset = layer.get("preset", preset)
    values = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"config field 'preset': must be one of {tuple(PRESETS)}")
        values.update(PRESETS[preset])
    for layer in layers:
        values.update(layer)
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()}).validate()


def config_json(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- helpers shared by commands ------------------------------------------------


def _require(cfg: RunConfig, name: str, command: str):
    value = getattr(cfg, name)
    if value is None:
        raise ConfigError(f"config field {name!r}: required by '{command}'")
    return value


def _outdir(cfg: RunConfig, command: str) -> Path:
    out = Path(_require(cfg, "output", command))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_dir(cfg: RunConfig, command: str, field: str = "dataset") -> Path:
    p = Path(_require(cfg, field, command))
    if not p.is_dir():
        raise ConfigError(f"config field {field!r}: directory does not exist: {p}")
    if not (p / "scene.json").exists():
        raise ConfigError(f"config field {field!r}: {p} is not a scene directory (no scene.json)")
    return p


def _load_scene(cfg: RunConfig, command: str):
    from .pipeline import SceneData
    from .synthdata import read_dataset

    index = read_dataset(_scene_dir(cfg, command))
    scene = SceneData.load(index)
    if cfg.d_min is not None:
        scene.d_min = cfg.d_min
    if cfg.d_max is not None:
        scene.d_max = cfg.d_max
    return index, scene


def _load_params(cfg: RunConfig, need_regularizer: bool) -> dict:
    """Generator (and regularizer) parameters from the checkpoint, or a seeded initialization."""
    from .fileio import read_checkpoint
    from .pipeline import init_pipeline_params

    init = init_pipeline_params(torch.Generator().manual_seed(cfg.seed), "learned", cfg.K)
    if cfg.checkpoint is None:
        if need_regularizer:
            raise ConfigError("config field 'checkpoint': the learned backend needs trained parameters")
        return init
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise ConfigError(f"config field 'checkpoint': file does not exist: {path}")
    arrays = read_checkpoint(path)
    params = {}
    for name, ref in init.items():
        if name not in arrays:
            if name.startswith("reg") and not need_regularizer:
                continue
            raise ParseError(path, 0, f"missing parameter {name!r}")
        if tuple(arrays[name].shape) != tuple(ref.shape):
            raise ParseError(path, 0, f"parameter {name!r} has shape {arrays[name].shape}, expected {tuple(ref.shape)}")
        params[name] = torch.from_numpy(arrays[name])
    return params


def _centroid(index) -> tuple:
    scene = index.meta.get("scene")
    return tuple(scene["centroid"]) if scene else (0.0, 0.0, 0.0)


def _target_cameras(cfg: RunConfig, index, cams) -> list:
    from .synthdata import interpolate_pose

    center = _centroid(index)
    if cfg.targets is None:
        ts = np.arange(1, cfg.novel_per_gap + 1) / (cfg.novel_per_gap + 1)
        poses = [(i, i + 1, float(t)) for i in range(len(cams) - 1) for t in ts]
    else:
        poses = [(int(i), int(j), float(t)) for i, j, t in cfg.targets]
    out = []
    for i, j, t in poses:
        if not (0 <= i < len(cams) and 0 <= j < len(cams)):
            raise ConfigError(f"config field 'targets': view index out of range in {[i, j, t]}")
        out.append(interpolate_pose(cams[i], cams[j], t, center))
    return out


def _path_cameras(cfg: RunConfig, index, cams) -> list:
    """``path_frames`` poses evenly spaced along the rig, from its first to its last camera."""
    from .synthdata import interpolate_pose

    center = _centroid(index)
    out = []
    for s in np.linspace(0.0, len(cams) - 1, cfg.path_frames):
        i = min(int(np.floor(s)), len(cams) - 2)
        out.append(interpolate_pose(cams[i], cams[i + 1], float(s - i), center))
    return out


def _write_view_dir(out: Path, views: list, d_min: float, d_max: float, M1: int) -> None:
    """Write rendered views in the dataset layout plus a confidence folder."""
    from .camera import write_camera_txt
    from .fileio import write_pfm, write_png

    for sub in ("images", "depths", "confidence", "cams"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for q, v in enumerate(views):
        name = f"{q:08d}"
        write_png(out / "images" / f"{name}.png", v["image"])
        write_pfm(out / "depths" / f"{name}.pfm", v["depth"])
        write_pfm(out / "confidence" / f"{name}.pfm", v["confidence"])
        write_camera_txt(out / "cams" / f"{name}.txt", v["cam"], d_min, (d_max - d_min) / M1)
        for k, dk in enumerate(v.get("stages", [])):
            (out / "stages").mkdir(exist_ok=True)
            write_pfm(out / "stages" / f"{name}_stage{k + 1}.pfm", dk)
    cam = views[0]["cam"]
    info = {"n_views": len(views), "width": cam.width, "height": cam.height, "d_min": d_min, "d_max": d_max}
    write_json(out / "scene.json", info)


def _render_frames(cfg: RunConfig, index, scene, targets, params, chunk: int | None) -> list:
    """Render each target from its N nearest rig views; state threads through chunks of ``chunk`` frames."""
    from .generator import RecurrentState
    from .pcfuse import select_views
    from .pipeline import predict_view

    views = []
    state = RecurrentState()
    for q, tgt in enumerate(targets):
        if chunk is None or q % chunk == 0:
            state = RecurrentState()
        idx = select_views(tgt, scene.cams, cfg.N, at_most=True)
        with torch.no_grad():
            pred = predict_view(
                [scene.images[i] for i in idx],
                [scene.cams[i] for i in idx],
                tgt,
                scene.d_min,
                scene.d_max,
                params,
                cfg.backend,
                state,
                cfg.M1,
                cfg.K,
                C=cfg.C,
                delta1=cfg.delta1,
            )
        if chunk is not None:
            state = pred.state
        f = pred.scaling.f
        v = {
            "image": pred.image.detach().numpy().transpose(1, 2, 0),
            "depth": (pred.depth.depth.detach() / f).numpy(),
            "confidence": pred.depth.confidence.detach().numpy(),
            "cam": tgt,
        }
        if cfg.dump_stages:
            v["stages"] = [(d.detach() / f).numpy() for d in pred.depth.stage_depths]
        views.append(v)
    return views


# --- commands -------------------------------------------------------------------


def cmd_synth_gen(cfg: RunConfig) -> dict:
    from .fileio import write_ply
    from .synthdata import box_scene, generate_scene, surface_samples, synthesize_scene

    out = _outdir(cfg, "synth-gen")
    scenes = []
    for sid in range(cfg.n_scenes):
        seed = cfg.seed + sid
        scene = box_scene(seed) if cfg.scene_kind == "box" else generate_scene(seed, cfg.complexity)
        index = synthesize_scene(out, sid, seed, cfg.complexity, cfg.n_views, cfg.width, cfg.height, scene=scene)
        pts = surface_samples(scene, index.cameras(), cfg.gt_density)
        write_ply(index.scene_dir / "gt_points.ply", pts, np.full((len(pts), 3), 0.5))
        scenes.append({"dir": index.scene_dir.name, "seed": seed, "d_min": index.d_min, "d_max": index.d_max, "gt_points": len(pts)})
    return {"scenes": scenes}


def cmd_train(cfg: RunConfig) -> dict:
    from .fileio import write_checkpoint
    from .learn import LossWeights, ToyConfig, train_toy
    from .synthdata import list_scenes, read_dataset

    out = _outdir(cfg, "train")
    root = Path(_require(cfg, "dataset", "train"))
    if not root.is_dir():
        raise ConfigError(f"config field 'dataset': directory does not exist: {root}")
    dirs = list_scenes(root)
    if len(dirs) <= cfg.eval_scenes:
        raise ConfigError(f"config field 'eval_scenes': {root} holds {len(dirs)} scenes, need more than {cfg.eval_scenes}")
    scenes = [read_dataset(d) for d in dirs]
    n_train = len(scenes) - cfg.eval_scenes
    toy = ToyConfig(
        epochs=cfg.epochs,
        seed=cfg.seed,
        lr=cfg.lr,
        weights=LossWeights(depth=cfg.lambda_d),
        backend=cfg.backend,
        n_sources=(min(2, cfg.N), cfg.N),
        seq_len=(1, cfg.Q),
        M1=cfg.M1,
        K=cfg.K,
    )
    params, log = train_toy(scenes[:n_train], scenes[n_train:], toy, out / "train_log.jsonl", out / "checkpoint.bin")
    write_checkpoint(out / "checkpoint.bin", {k: v.numpy() for k, v in params.items()})
    return {"epochs": len(log), "final": log[-1], "train_scenes": n_train, "eval_scenes": cfg.eval_scenes}


def cmd_render(cfg: RunConfig) -> dict:
    out = _outdir(cfg, "render")
    index, scene = _load_scene(cfg, "render")
    params = _load_params(cfg, cfg.backend == "learned")
    targets = _target_cameras(cfg, index, scene.cams)
    views = _render_frames(cfg, index, scene, targets, params, chunk=None)
    _write_view_dir(out, views, scene.d_min, scene.d_max, cfg.M1)
    return {"views": len(views)}


def cmd_render_path(cfg: RunConfig) -> dict:
    out = _outdir(cfg, "render-path")
    index, scene = _load_scene(cfg, "render-path")
    params = _load_params(cfg, cfg.backend == "learned")
    targets = _path_cameras(cfg, index, scene.cams)
    views = _render_frames(cfg, index, scene, targets, params, chunk=cfg.Q)
    _write_view_dir(out, views, scene.d_min, scene.d_max, cfg.M1)
    return {"frames": len(views), "chunks": -(-len(views) // cfg.Q)}


def cmd_fuse(cfg: RunConfig) -> dict:
    from .fileio import read_pfm, write_ply
    from .pcfuse import FusionRecord, fuse_records, predict_reference_depths
    from .synthdata import read_dataset

    out = _outdir(cfg, "fuse")
    index, scene = _load_scene(cfg, "fuse")
    params = _load_params(cfg, True) if cfg.backend == "learned" else None
    n_sources = min(cfg.N, len(scene.cams) - 1)
    records = predict_reference_depths(scene.images, scene.cams, scene.d_min, scene.d_max, n_sources, params, cfg.backend, cfg.M1, cfg.K, cfg.C, cfg.delta1)
    n_ref = len(records)
    if cfg.novel is not None:
        nidx = read_dataset(_scene_dir(cfg, "fuse", "novel"))
        for q in range(len(nidx)):
            rgb, depth, cam = nidx.load_view(q)
            conf = read_pfm(nidx.scene_dir / "confidence" / f"{q:08d}.pfm")
            records.append(FusionRecord(rgb, depth.astype(np.float64), cam, conf.astype(np.float64)))
    cloud = fuse_records(records, cfg.tau_p, cfg.tau_px, cfg.tau_rel, cfg.S)
    write_ply(out / "fused.ply", cloud.points, cloud.colors)
    return {"points": len(cloud), "reference_views": n_ref, "novel_views": len(records) - n_ref}


def cmd_eval_pc(cfg: RunConfig) -> dict:
    from .fileio import read_ply
    from .pcfuse import PointCloud, cloud_diameter, eval_pointcloud
    from .synthdata import read_dataset

    out = _outdir(cfg, "eval-pc")
    pred_path = Path(_require(cfg, "pred", "eval-pc"))
    scene_dir = _scene_dir(cfg, "eval-pc") if cfg.dataset is not None else None
    gt_path = Path(cfg.gt) if cfg.gt is not None else (scene_dir / "gt_points.ply" if scene_dir is not None else None)
    if gt_path is None:
        raise ConfigError("config field 'gt': required by 'eval-pc' when no dataset is given")
    for field, p in (("pred", pred_path), ("gt", gt_path)):
        if not p.exists():
            raise ConfigError(f"config field {field!r}: file does not exist: {p}")
    gp, gc = read_ply(gt_path)
    pp, pc = read_ply(pred_path)
    gp = gp.astype(np.float64)
    pp = pp.astype(np.float64)
    if len(gp) == 0:
        raise ParseError(gt_path, 0, "ground-truth cloud is empty")
    diameter = cloud_diameter(gp)
    tau = cfg.tau_f * diameter
    # Predictions are cropped to the scene's bounding box. Without a scene description the
    # ground-truth box is dilated by tau: a planar surface has a zero-thickness box, and an
    # undilated crop would discard every prediction on its far side.
    meta = read_dataset(scene_dir).meta.get("scene") if scene_dir is not None else None
    if meta is not None and meta.get("bbox") is not None:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in meta["bbox"])
    else:
        lo, hi = gp.min(0) - tau, gp.max(0) + tau
    inside = np.all((pp >= lo) & (pp <= hi), axis=1)
    if not inside.any():
        raise ConfigError(f"{pred_path}: no predicted point lies inside the evaluation bounding box")
    m = eval_pointcloud(PointCloud(pp[inside], pc[inside] / 255.0), PointCloud(gp, gc / 255.0), tau)
    report = m.to_dict()
    report.update(
        {
            "diameter": diameter,
            "tau_f_relative": cfg.tau_f,
            "overall_relative": m.overall / diameter,
            "pred_points": int(len(pp)),
            "pred_points_evaluated": int(inside.sum()),
            "gt_points": int(len(gp)),
        }
    )
    write_json(out / "eval_pc.json", report)
    return report


def cmd_eval_nvs(cfg: RunConfig) -> dict:
    from .evalmetrics import depth_errors, psnr, ssim
    from .pipeline import setup_cascade
    from .synthdata import Scene, raycast_render, read_dataset

    out = _outdir(cfg, "eval-nvs")
    index = read_dataset(_scene_dir(cfg, "eval-nvs"))
    if "scene" not in index.meta:
        raise ConfigError(f"config field 'dataset': {index.scene_dir} has no scene description, so ground truth cannot be rendered")
    scene = Scene.from_dict(index.meta["scene"])
    nidx = read_dataset(_scene_dir(cfg, "eval-nvs", "novel"))
    d_min = cfg.d_min if cfg.d_min is not None else index.d_min
    d_max = cfg.d_max if cfg.d_max is not None else index.d_max
    scaling, schedule = setup_cascade(d_min, d_max, cfg.M1, cfg.K, cfg.C, cfg.delta1)
    inlier = 1.5 * schedule.delta[-1] / scaling.f
    views = []
    for q in range(len(nidx)):
        rgb, depth, cam = nidx.load_view(q)
        gt_rgb, gt_depth, hit = raycast_render(scene, cam)
        mask = hit & (depth > 0)
        row = {"view": q, "psnr_db": psnr(rgb, gt_rgb), "ssim": ssim(rgb, gt_rgb), "lpips": "not supported"}
        if mask.any():
            de = depth_errors(depth, gt_depth, mask, (inlier,))
            row.update({"depth_mae": de.mae, "depth_rmse": de.rmse, "abs_rel": de.abs_rel, "inlier_fraction": de.frac_within[float(inlier)]})
        views.append(row)
    keys = ("psnr_db", "ssim", "depth_mae", "depth_rmse", "abs_rel", "inlier_fraction")
    mean = {k: float(np.mean([v[k] for v in views if k in v])) for k in keys if any(k in v for v in views)}
    mean["lpips"] = "not supported"
    report = {"views": views, "mean": mean, "inlier_threshold": inlier}
    write_json(out / "eval_nvs.json", report)
    return report


def cmd_grad_check(cfg: RunConfig) -> dict:
    from .gradsuite import run_suite

    result = run_suite(n_shapes=cfg.grad_shapes, seed=cfg.seed)
    report = result.to_dict()
    if cfg.output is not None:
        write_json(_outdir(cfg, "grad-check") / "grad_check.json", report)
    if not result.passed:
        bad = [n for n in result.reports if result.max_error(n) >= result.tolerance]
        raise GradCheckFailed(f"gradient check failed for {', '.join(bad)}", report)
    return report


def cmd_schedule(cfg: RunConfig) -> dict:
    from .planes import adaptive_scale, cascade_schedule

    report = {}
    if cfg.delta1 is not None:
        schedule = cascade_schedule(cfg.M1, cfg.delta1, cfg.K)
        if cfg.d_min is not None:
            report["d1_min"] = cfg.d_min
    else:
        d_min, d_max = cfg.d_min, cfg.d_max
        if (d_min is None or d_max is None) and cfg.dataset is not None:
            from .synthdata import read_dataset

            index = read_dataset(_scene_dir(cfg, "schedule"))
            d_min = index.d_min if d_min is None else d_min
            d_max = index.d_max if d_max is None else d_max
        if d_min is None or d_max is None:
            raise ConfigError("config field 'delta1': give delta1, or d_min and d_max (or a dataset) to derive it")
        scaling, delta1 = adaptive_scale(d_min, d_max, cfg.C, cfg.M1)
        schedule = cascade_schedule(cfg.M1, delta1, cfg.K)
        report.update({"f": scaling.f, "scaled_min": scaling.scaled_min, "scaled_max": scaling.scaled_max, "d1_min": scaling.C})
    report.update(schedule.as_dict())
    if cfg.output is not None:
        write_json(_outdir(cfg, "schedule") / "schedule.json", report)
    return report


class GradCheckFailed(CascadeNVSError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


COMMANDS = {
    "synth-gen": (cmd_synth_gen, "render a seeded synthetic dataset with exact depth and surface samples"),
    "train": (cmd_train, "train the generator (and learned regularizer) on a synthetic dataset"),
    "render": (cmd_render, "render novel views (PNG, depth and confidence PFM) for target poses"),
    "render-path": (cmd_render_path, "render a smooth camera path in chunks of Q frames with recurrent state"),
    "fuse": (cmd_fuse, "fuse reference and novel depth maps into a PLY point cloud"),
    "eval-nvs": (cmd_eval_nvs, "score rendered views against ground truth (PSNR, SSIM, depth errors)"),
    "eval-pc": (cmd_eval_pc, "score a point cloud against ground-truth surface samples"),
    "grad-check": (cmd_grad_check, "compare analytic and finite-difference gradients of every trainable op"),
    "schedule": (cmd_schedule, "print the resolved cascade schedule"),
}

# --- argument parsing -------------------------------------------------------------


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag_type(name):
    hint = _HINTS[name]
    args = typing.get_args(hint)
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    return typing.get_origin(base) or base


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cascade-nvs", description="Cascaded depth regression and depth-aware novel view synthesis.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file; flags override its values")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            kind = _flag_type(f.name)
            if f.name == "targets":
                p.add_argument(flag, dest=f.name, type=json.loads, default=argparse.SUPPRESS, help="JSON list of [i, j, t] triples")
            elif kind is bool:
                p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=argparse.SUPPRESS)
            else:
                p.add_argument(flag, dest=f.name, type=kind, default=argparse.SUPPRESS, metavar=kind.__name__.upper())
    return parser


def _set_threads() -> None:
    raw = os.environ.get(ENV_THREADS, "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"environment variable {ENV_THREADS}: expected an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"environment variable {ENV_THREADS}: must be >= 0")
    if n > 0:
        torch.set_num_threads(n)


def main(argv=None) -> int:
    stderr = sys.stderr
    try:
        _set_threads()
        args = vars(build_parser().parse_args(argv))
        command = args.pop("command")
        config_path = args.pop("config", None)
        file_values = load_config_file(config_path) if config_path is not None else {}
        cfg = resolve_config(file_values, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=stderr)
        return 1
    try:
        if cfg.output is not None:
            out = Path(cfg.output)
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.resolved.json").write_text(config_json(cfg))
        report = COMMANDS[command][0](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=stderr)
        return 1
    except GradCheckFailed as exc:
        print(json.dumps(exc.report, indent=2, sort_keys=True))
        print(f"error: {exc}", file=stderr)
        return 2
    except (ParseError, GeometryError, DivergenceError, CascadeNVSError) as exc:
        print(f"error: {exc}", file=stderr)
        return 2
    except OSError as exc:
        where = exc.filename if exc.filename is not None else "I/O"
        print(f"error: {where}: {exc.strerror or exc}", file=stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure must surface as a structured message
        print(f"error: internal failure in '{command}': {type(exc).__name__}: {exc}", file=stderr)
        return 2
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
