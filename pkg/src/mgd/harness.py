"""Declarative experiment runner: flat key=value configs drive teacher
training, distillation, self-distillation, hyper-parameter sweeps and the
ablation grids, all writing CSV metrics, JSON results, checkpoints and a
small SVG chart per run.

Every run is reproducible from its config file and seed alone; sweep and
ablation members are plain member runs in sub-directories, so a member's
result.json matches the identical standalone run.
"""
from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import load_cifar_binary, load_idx, make_synthetic
from .distill import MaskConfig
from .models import build_backbone, freeze, load_checkpoint, resolve_backbone
from .tensor import Tensor
from .train import TrainConfig, train_baseline, train_distill, write_metrics_csv


class ConfigError(ValueError):
    """Invalid experiment config; maps to exit code 2."""


TASKS = ("train_teacher", "distill", "self_distill", "sweep_lambda", "sweep_alpha",
         "ablate_projector", "ablate_stage", "ablate_channel_mask")

DATASETS = ("synthetic", "mnist", "cifar10")

# Synthetic stand-in for a CIFAR-sized corpus: per-sample blob deformation
# plus pixel noise keeps a small net well below 100% validation accuracy
# with a real generalization gap.
SYNTH_CLASSES = 10
SYNTH_SIZE = 32
SYNTH_NOISE = 2.0
SYNTH_JITTER = 3
SYNTH_DEFORM = 0.8
SYNTH_VAL_SEED_OFFSET = 700_001


def _parse_str_list(value):
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _parse_float_list(value):
    return tuple(float(v) for v in value.split(",") if v.strip())


SCHEMA = {
    "task": str,
    "teacher_config": str,
    "student_config": str,
    "teacher_checkpoint": str,
    "dataset": str,
    "dataset_dir": str,
    "dataset_train_limit": int,
    "dataset_val_limit": int,
    "alpha": float,
    "lambda": float,
    "mask_mode": str,
    "beta": float,
    "stages": _parse_str_list,
    "epochs": int,
    "batch_size": int,
    "lr_init": float,
    "lr_decay_every": int,
    "lr_decay_factor": float,
    "momentum": float,
    "weight_decay": float,
    "seed": int,
    "out_dir": str,
    "logit_kd_temperature": float,
    "logit_kd_weight": float,
    "sweep_values": _parse_float_list,
}

DEFAULTS = {
    "dataset": "synthetic",
    "dataset_train_limit": 10000,
    "dataset_val_limit": 2000,
    "alpha": 7e-5,
    "lambda": 0.5,
    "mask_mode": "spatial",
    "beta": 0.15,
    "stages": (),
    "epochs": 30,
    "batch_size": 128,
    "lr_init": 0.1,
    "lr_decay_every": 12,
    "lr_decay_factor": 0.1,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "seed": 0,
}


def parse_config(path):
    """Parse a key = value config file; '#' starts a comment."""
    cfg = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in cfg:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            cfg[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return validate_config(cfg)


def validate_config(cfg):
    cfg = {**DEFAULTS, **cfg}
    for key in cfg:
        # Leading-underscore keys are internal overrides set by the ablation
        # drivers; they never appear in user config files.
        if key not in SCHEMA and not key.startswith("_"):
            raise ConfigError(f"unknown key {key!r}")
    task = cfg.get("task")
    if task is None:
        raise ConfigError("missing required key 'task'")
    if task not in TASKS:
        raise ConfigError(f"key 'task': unknown task {task!r} (choose from {', '.join(TASKS)})")
    if "out_dir" not in cfg:
        raise ConfigError("missing required key 'out_dir'")
    if cfg["dataset"] not in DATASETS:
        raise ConfigError(f"key 'dataset': unknown dataset {cfg['dataset']!r}")
    if cfg["dataset"] != "synthetic" and "dataset_dir" not in cfg:
        raise ConfigError(f"key 'dataset_dir' is required for dataset {cfg['dataset']!r}")
    if cfg["mask_mode"] not in ("spatial", "channel"):
        raise ConfigError(f"key 'mask_mode': must be 'spatial' or 'channel', "
                          f"got {cfg['mask_mode']!r}")
    if not 0.0 <= cfg["lambda"] < 1.0:
        raise ConfigError("key 'lambda': masked ratio must lie in [0, 1)")
    if not 0.0 <= cfg["beta"] < 1.0:
        raise ConfigError("key 'beta': masked ratio must lie in [0, 1)")
    if ("logit_kd_temperature" in cfg) != ("logit_kd_weight" in cfg):
        raise ConfigError("keys 'logit_kd_temperature' and 'logit_kd_weight' "
                          "must be given together")

    needs_student = task != "train_teacher"
    if task == "train_teacher" and "teacher_config" not in cfg:
        raise ConfigError("key 'teacher_config' is required for task train_teacher")
    if needs_student and "student_config" not in cfg:
        raise ConfigError(f"key 'student_config' is required for task {task}")
    if task in ("distill", "sweep_lambda", "sweep_alpha", "ablate_projector",
                "ablate_stage", "ablate_channel_mask") and "teacher_config" not in cfg:
        raise ConfigError(f"key 'teacher_config' is required for task {task}")
    if task in ("sweep_lambda", "sweep_alpha") and "sweep_values" not in cfg:
        raise ConfigError(f"key 'sweep_values' is required for task {task}")
    for key in ("teacher_config", "student_config"):
        if key in cfg:
            try:
                resolve_backbone(cfg[key])
            except ValueError as exc:
                raise ConfigError(f"key {key!r}: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def load_datasets(cfg):
    """Build (train, val) splits per the config; val reuses train statistics."""
    kind = cfg["dataset"]
    n_train, n_val = cfg["dataset_train_limit"], cfg["dataset_val_limit"]
    if kind == "synthetic":
        train = make_synthetic(SYNTH_CLASSES, max(1, n_train // SYNTH_CLASSES),
                               SYNTH_SIZE, cfg["seed"], noise=SYNTH_NOISE,
                               jitter=SYNTH_JITTER, deform=SYNTH_DEFORM, split="train")
        val = make_synthetic(SYNTH_CLASSES, max(1, n_val // SYNTH_CLASSES),
                             SYNTH_SIZE, cfg["seed"] + SYNTH_VAL_SEED_OFFSET,
                             noise=SYNTH_NOISE, jitter=SYNTH_JITTER, deform=SYNTH_DEFORM,
                             split="val", stats=(train.mean, train.std),
                             template_seed=cfg["seed"])
        return train, val
    root = Path(cfg["dataset_dir"])
    if kind == "mnist":
        train = load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte",
                         split="train")
        val = load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte",
                       split="val", stats=(train.mean, train.std))
    else:
        train = load_cifar_binary([root / f"data_batch_{i}.bin" for i in range(1, 6)],
                                  split="train")
        val = load_cifar_binary([root / "test_batch.bin"], split="val",
                                stats=(train.mean, train.std))
    return train.subset(n_train), val.subset(n_val)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def write_curves_svg(records, path):
    """Loss and feature-difference curves vs epoch as a dependency-free SVG."""
    train_rows = [r for r in records if r.split == "train"]
    series = [("loss_task", "#1f77b4", [r.loss_task for r in train_rows]),
              ("loss_dis", "#d62728", [r.loss_dis for r in train_rows]),
              ("feature_diff", "#2ca02c", [r.feature_diff for r in train_rows])]
    width, height, pad = 640, 360, 48
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
             'stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width // 2}" y="{height - 12}" font-size="12" '
             'text-anchor="middle">epoch</text>']
    n = len(train_rows)
    for si, (label, color, values) in enumerate(series):
        lo, hi = (min(values), max(values)) if values else (0.0, 0.0)
        span = (hi - lo) or 1.0
        points = []
        for i, v in enumerate(values):
            x = pad + (width - 2 * pad) * (i / max(n - 1, 1))
            y = (height - pad) - (height - 2 * pad) * ((v - lo) / span)
            points.append(f"{x:.1f},{y:.1f}")
        if points:
            lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                         f'points="{" ".join(points)}"/>')
        lines.append(f'<text x="{pad + 4}" y="{pad + 14 + 14 * si}" font-size="11" '
                     f'fill="{color}">{label} [{lo:.4g}, {hi:.4g}]</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


def write_pgm(gray_u8, path):
    """Binary (P5) PGM with maxval 255."""
    h, w = gray_u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(gray_u8, dtype=np.uint8).tobytes())


def _write_resolved(cfg, out_dir):
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


def _write_result(out_dir, cfg, records, extra=None):
    final_val = [r for r in records if r.split == "val"][-1]
    result = {
        "task": cfg["task"],
        "top1": final_val.top1,
        "top5": final_val.top5,
        "final_feature_diff": final_val.feature_diff,
        "epochs": cfg["epochs"],
        "seed": cfg["seed"],
        "alpha": cfg["alpha"],
        "lambda": cfg["lambda"],
        "beta": cfg["beta"],
        "mask_mode": cfg["mask_mode"],
        "stages": list(cfg["stages"]),
        "normalization": cfg.pop("_norm_stats", None),
    }
    if extra:
        result.update(extra)
    with open(out_dir / "result.json", "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
        f.write("\n")
    return result


def _train_config(cfg, stages):
    mode = cfg["mask_mode"]
    mask = MaskConfig(mode=mode, ratio=cfg["beta"] if mode == "channel" else cfg["lambda"],
                      rng_seed=cfg["seed"])
    logit_kd = None
    if "logit_kd_temperature" in cfg:
        logit_kd = (cfg["logit_kd_temperature"], cfg["logit_kd_weight"])
    return TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr_init=cfg["lr_init"],
        lr_decay_factor=cfg["lr_decay_factor"], lr_decay_every=cfg["lr_decay_every"],
        momentum=cfg["momentum"], weight_decay=cfg["weight_decay"], alpha=cfg["alpha"],
        mask=mask, stages=stages, logit_kd=logit_kd, seed=cfg["seed"],
        projector_depth=cfg.get("_projector_depth", 2),
        projector_kernel=cfg.get("_projector_kernel", 3),
    )


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------

def _record_norm(cfg, train_ds):
    cfg["_norm_stats"] = {"mean": [float(v) for v in train_ds.mean],
                          "std": [float(v) for v in train_ds.std]}


def _run_train_teacher(cfg, out_dir):
    train_ds, val_ds = load_datasets(cfg)
    _record_norm(cfg, train_ds)
    model = build_backbone(cfg["teacher_config"], cfg["seed"])
    tc = _train_config(cfg, stages=())
    model, records = train_baseline(model, train_ds, val_ds, tc,
                                    checkpoint_path=out_dir / "teacher.ckpt")
    write_metrics_csv(records, out_dir / "metrics.csv")
    write_curves_svg(records, out_dir / "curves.svg")
    return _write_result(out_dir, cfg, records)


def _resolve_teacher(cfg, out_dir):
    """Load the teacher checkpoint, training one first when none is given."""
    teacher = build_backbone(cfg["teacher_config"], cfg["seed"])
    if "teacher_checkpoint" in cfg:
        load_checkpoint(teacher, cfg["teacher_checkpoint"])
    else:
        sub = {**cfg, "task": "train_teacher",
               "out_dir": str(Path(out_dir) / "teacher")}
        sub.pop("teacher_checkpoint", None)
        run_experiment(sub)
        load_checkpoint(teacher, Path(out_dir) / "teacher" / "teacher.ckpt")
    freeze(teacher)
    return teacher


def _default_stages(cfg, student):
    return cfg["stages"] or (student.stage_names[-1],)


def _run_distill(cfg, out_dir, teacher=None):
    train_ds, val_ds = load_datasets(cfg)
    _record_norm(cfg, train_ds)
    if teacher is None:
        teacher = _resolve_teacher(cfg, out_dir)
    student = build_backbone(cfg["student_config"], cfg["seed"])
    stages = _default_stages(cfg, student)
    tc = _train_config(cfg, stages=stages)
    student, records = train_distill(teacher, student, train_ds, val_ds, tc,
                                     checkpoint_path=out_dir / "student.ckpt")
    write_metrics_csv(records, out_dir / "metrics.csv")
    write_curves_svg(records, out_dir / "curves.svg")
    return _write_result(out_dir, cfg, records)


def _run_self_distill(cfg, out_dir):
    cfg = dict(cfg)
    cfg.setdefault("teacher_config", cfg["student_config"])
    return _run_distill(cfg, out_dir)


def _run_members(cfg, out_dir, members, jobs=1):
    """Run (name, overrides) members as plain distill runs, then compare them.

    The shared teacher is resolved once; members always receive an explicit
    checkpoint path so each member config equals a standalone run.
    """
    if "teacher_checkpoint" not in cfg:
        _resolve_teacher(cfg, out_dir)
        teacher_ckpt = str(Path(out_dir) / "teacher" / "teacher.ckpt")
    else:
        teacher_ckpt = cfg["teacher_checkpoint"]
    member_cfgs = []
    for name, overrides in members:
        member = {**cfg, "task": "distill", "teacher_checkpoint": teacher_ckpt,
                  "out_dir": str(Path(out_dir) / name)}
        member.pop("sweep_values", None)
        member.update(overrides)
        member_cfgs.append(member)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run_experiment, member_cfgs))
    else:
        for member in member_cfgs:
            run_experiment(member)
    member_dirs = [m["out_dir"] for m in member_cfgs]
    compare(member_dirs, Path(out_dir) / "compare.csv")
    summary = {"members": [Path(d).name for d in member_dirs]}
    with open(Path(out_dir) / "result.json", "w") as f:
        json.dump({"task": cfg["task"], **summary}, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


def _run_sweep(cfg, out_dir, key, jobs=1):
    members = [(f"{key}_{v:g}", {key: v}) for v in cfg["sweep_values"]]
    return _run_members(cfg, out_dir, members, jobs)


def _run_ablate_projector(cfg, out_dir, jobs=1):
    members = [(f"depth{d}_kernel{k}",
                {"_projector_depth": d, "_projector_kernel": k})
               for d in (1, 2, 3) for k in (3, 5)]
    return _run_members(cfg, out_dir, members, jobs)


def _run_ablate_stage(cfg, out_dir, jobs=1):
    student = build_backbone(cfg["student_config"], cfg["seed"])
    names = student.stage_names
    members = [(name, {"stages": (name,)}) for name in names]
    combo = tuple(names[1:]) if len(names) >= 3 else tuple(names)
    if len(combo) > 1:
        members.append(("multi_" + "_".join(combo), {"stages": combo}))
    return _run_members(cfg, out_dir, members, jobs)


def _run_ablate_channel_mask(cfg, out_dir, jobs=1):
    members = [("spatial", {"mask_mode": "spatial"}),
               ("channel", {"mask_mode": "channel"})]
    return _run_members(cfg, out_dir, members, jobs)


def run_experiment(cfg, jobs=1):
    """Execute one validated config dict; returns the result summary."""
    cfg = validate_config(dict(cfg))
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_resolved({k: v for k, v in cfg.items() if not k.startswith("_")}, out_dir)
    task = cfg["task"]
    if task == "train_teacher":
        return _run_train_teacher(cfg, out_dir)
    if task == "distill":
        return _run_distill(cfg, out_dir)
    if task == "self_distill":
        return _run_self_distill(cfg, out_dir)
    if task == "sweep_lambda":
        return _run_sweep(cfg, out_dir, "lambda", jobs)
    if task == "sweep_alpha":
        return _run_sweep(cfg, out_dir, "alpha", jobs)
    if task == "ablate_projector":
        return _run_ablate_projector(cfg, out_dir, jobs)
    if task == "ablate_stage":
        return _run_ablate_stage(cfg, out_dir, jobs)
    return _run_ablate_channel_mask(cfg, out_dir, jobs)


def run(config_path, jobs=1):
    """CLI entry: 0 on success, 2 on config errors, 3 on runtime failures."""
    try:
        cfg = parse_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        run_experiment(cfg, jobs=jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"run failed: {exc}", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# comparison table and feature heatmap
# ---------------------------------------------------------------------------

def compare(run_dirs, out_path):
    """One CSV row per run dir (name, top1, top5, final feature_diff),
    sorted by top1 descending; dirs without result.json are reported and
    skipped."""
    rows = []
    for d in run_dirs:
        result_path = Path(d) / "result.json"
        if not result_path.exists():
            print(f"compare: missing {result_path}", file=sys.stderr)
            continue
        with open(result_path) as f:
            result = json.load(f)
        rows.append((Path(d).name, result["top1"], result["top5"],
                     result["final_feature_diff"]))
    rows.sort(key=lambda r: -r[1])
    with open(out_path, "w") as f:
        f.write("name,top1,top5,feature_diff\n")
        for name, top1, top5, fdiff in rows:
            f.write(f"{name},{top1:.4f},{top5:.4f},{fdiff:.6f}\n")
    return rows


def dump_feature_heatmap(checkpoint_path, config_path, image_index, stage, out_path):
    """Channel-mean absolute activation of one stage on one val image,
    min-max scaled into a P5 PGM."""
    cfg = parse_config(config_path)
    model_key = "student_config" if "student_config" in cfg else "teacher_config"
    model = build_backbone(cfg[model_key], cfg["seed"])
    load_checkpoint(model, checkpoint_path)
    model.set_mode("eval")
    if stage not in model.stage_names:
        raise ConfigError(f"unknown stage {stage!r} (model has {model.stage_names})")
    _, val_ds = load_datasets(cfg)
    if not 0 <= image_index < len(val_ds):
        raise ConfigError(f"image index {image_index} out of range [0, {len(val_ds)})")
    _, feats = model.forward_with_features(Tensor(val_ds.images[image_index:image_index + 1]))
    act = np.abs(feats[stage].data[0]).mean(axis=0)
    lo, hi = float(act.min()), float(act.max())
    span = (hi - lo) or 1.0
    gray = np.round(255.0 * (act - lo) / span).astype(np.uint8)
    write_pgm(gray, out_path)
    return out_path
