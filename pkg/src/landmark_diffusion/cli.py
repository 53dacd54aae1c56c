"""
Command-line entry point:

    landmark-diffusion {pretrain|finetune|evaluate|sample|select-snapshot}
        --config <path> [--section.key=value ...]

One YAML config file per run, with one section per subsystem; any leaf can
be overridden on the command line. Artifacts land under the configured
output directory: checkpoints/, logs/, reports/, samples/, overlays/, plus
a frozen copy of the resolved config. LANDMARK_DIFFUSION_OUTPUT, when set,
is the root for relative output directories.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import yaml
from PIL import Image, ImageDraw

from landmark_diffusion import checkpoint as ckpt_io
from landmark_diffusion.data import (
    AugmentationParams,
    LandmarkDataset,
    load_dataset,
    subset_labels,
)
from landmark_diffusion.diffusion import ancestral_sample, build_linear_schedule
from landmark_diffusion.evaluation import (
    EvaluationReport,
    build_report,
    compute_spacing,
    radial_errors,
    render_table,
)
from landmark_diffusion.heatmaps import rescale_landmarks
from landmark_diffusion.network import NetworkConfig, build_network
from landmark_diffusion.training import (
    FinetuneConfig,
    PretrainConfig,
    detector_from_checkpoint,
    finetune,
    predict_landmarks,
    pretrain,
    select_snapshot,
)

OUTPUT_ENV = "LANDMARK_DIFFUSION_OUTPUT"


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "run",
    "device": "cpu",
    "single_threaded": False,
    "dataset": {"root": None, "working_size": 256},
    "pretrain_dataset": {"root": None},
    "model": {
        "base_channels": 64,
        "channel_multipliers": [1, 2, 4, 8],
        "res_blocks_per_level": 4,
        "attention_resolution": 32,
        "attention_heads": 4,
    },
    "diffusion": {
        "num_steps": 500,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "variance": "beta",
    },
    "pretrain": {
        "total_iterations": 10000,
        "snapshot_iterations": [4000, 6000, 8000, 10000],
        "batch_size": 4,
        "grad_accumulation": 8,
        "learning_rate": 1e-4,
        "weight_decay": 1e-2,
        "ema_decay": 0.995,
    },
    "finetune": {
        "source_checkpoint": None,
        "label_budget": 0,
        "max_epochs": 200,
        "batch_size": 2,
        "grad_accumulation": 8,
        "initial_lr": 1e-5,
        "weight_decay": 1e-2,
        "plateau_patience": 10,
        "plateau_factor": 0.5,
        "min_lr": 1e-7,
        "early_stop_patience": 30,
        "loss_mode": "gaussian_ce",
        "init_source": "ema",
        "heatmap_sigma": 5.0,
        "augment": True,
        "rotation_deg": 2.0,
        "scale_delta": 0.02,
        "translate_frac": 0.02,
    },
    "evaluate": {
        "checkpoint": None,
        "thresholds": [3.0, 6.0, 9.0],
        "overlay_count": 4,
    },
    "sample": {"checkpoint": None, "count": 4},
    "select_snapshot": {
        "manifest": None,
        "repetitions": 3,
        "label_budget": 10,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config field: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _parse_override_value(raw: str):
    value = yaml.safe_load(raw)
    if isinstance(value, str):
        # YAML 1.1 misses bare scientific notation like 5e-4
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"override must look like --section.key=value: {item!r}")
        dotted, raw = item[2:].split("=", 1)
        keys = dotted.split(".")
        value = _parse_override_value(raw)
        node = cfg
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config section: {dotted}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config field: {dotted}")
        node[keys[-1]] = value
    return cfg


def load_config(path: Path, overrides: Sequence[str]) -> dict:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    user = yaml.safe_load(path.read_text()) or {}
    if not isinstance(user, dict):
        raise ConfigError("config root must be a mapping")
    cfg = _merge(DEFAULT_CONFIG, user)
    return _apply_overrides(cfg, overrides)


def resolve_output_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    root = os.environ.get(OUTPUT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    for sub in ("checkpoints", "logs", "reports", "samples", "overlays"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg))
    return out


def _require(cfg: dict, dotted: str):
    node = cfg
    for key in dotted.split("."):
        node = node[key]
    if node is None:
        raise ConfigError(f"missing required config field: {dotted}")
    return node


def _setup(cfg: dict) -> None:
    if cfg["device"] != "cpu":
        raise ConfigError(
            f"device.{cfg['device']}: this build runs on CPU only; set device: cpu"
        )
    if cfg["single_threaded"]:
        torch.set_num_threads(1)
    torch.manual_seed(cfg["seed"])


def _network_config(cfg: dict, out_channels: int, conditioning: bool) -> NetworkConfig:
    m = cfg["model"]
    return NetworkConfig(
        image_size=cfg["dataset"]["working_size"],
        in_channels=1,
        out_channels=out_channels,
        base_channels=m["base_channels"],
        channel_multipliers=tuple(m["channel_multipliers"]),
        res_blocks_per_level=m["res_blocks_per_level"],
        attention_resolution=m["attention_resolution"],
        attention_heads=m["attention_heads"],
        timestep_conditioning=conditioning,
    )


def _open_dataset(cfg: dict, section: str = "dataset") -> LandmarkDataset:
    root = _require(cfg, f"{section}.root")
    return load_dataset(root, working_size=cfg["dataset"]["working_size"])


def _jsonl_logger(path: Path):
    def log(entry: dict) -> None:
        with path.open("a") as fh:
            fh.write(json.dumps(entry) + "\n")

    return log


def _aug_params(cfg: dict) -> Optional[AugmentationParams]:
    ft = cfg["finetune"]
    if not ft["augment"]:
        return None
    return AugmentationParams(
        rotation_deg=ft["rotation_deg"],
        scale_delta=ft["scale_delta"],
        translate_frac=ft["translate_frac"],
    )


def _finetune_config(cfg: dict) -> FinetuneConfig:
    ft = cfg["finetune"]
    return FinetuneConfig(
        max_epochs=ft["max_epochs"],
        batch_size=ft["batch_size"],
        grad_accumulation=ft["grad_accumulation"],
        initial_lr=ft["initial_lr"],
        weight_decay=ft["weight_decay"],
        plateau_patience=ft["plateau_patience"],
        plateau_factor=ft["plateau_factor"],
        min_lr=ft["min_lr"],
        early_stop_patience=ft["early_stop_patience"],
        loss_mode=ft["loss_mode"],
        init_source=ft["init_source"],
        heatmap_sigma=ft["heatmap_sigma"],
        seed=cfg["seed"],
        single_threaded=cfg["single_threaded"],
    )


def _labeled_split(ds: LandmarkDataset, split: str, stems: Optional[Sequence[str]] = None):
    stems = ds.split(split) if stems is None else stems
    return [ds.working_sample(stem) for stem in stems]


def cmd_pretrain(cfg: dict) -> int:
    _setup(cfg)
    out = resolve_output_dir(cfg)
    section = "pretrain_dataset" if cfg["pretrain_dataset"]["root"] else "dataset"
    ds = _open_dataset(cfg, section)
    images = [ds.working_image(stem) for stem in ds.split("train")]

    p = cfg["pretrain"]
    pcfg = PretrainConfig(
        total_iterations=p["total_iterations"],
        snapshot_iterations=tuple(p["snapshot_iterations"]),
        batch_size=p["batch_size"],
        grad_accumulation=p["grad_accumulation"],
        learning_rate=p["learning_rate"],
        weight_decay=p["weight_decay"],
        ema_decay=p["ema_decay"],
        num_diffusion_steps=cfg["diffusion"]["num_steps"],
        beta_start=cfg["diffusion"]["beta_start"],
        beta_end=cfg["diffusion"]["beta_end"],
        seed=cfg["seed"],
        single_threaded=cfg["single_threaded"],
    )
    sched = build_linear_schedule(
        pcfg.num_diffusion_steps, pcfg.beta_start, pcfg.beta_end
    )
    net = build_network(_network_config(cfg, out_channels=1, conditioning=True))
    result = pretrain(
        net,
        images,
        pcfg,
        sched,
        dataset_id=ds.manifest.name,
        log=_jsonl_logger(out / "logs" / "pretrain.jsonl"),
    )

    manifest = []
    for snap in result.snapshots:
        it = snap.metadata["iteration"]
        path = out / "checkpoints" / f"pretrain_iter{it:06d}.pt"
        ckpt_io.save_checkpoint(snap, path)
        manifest.append({"iteration": it, "path": str(path)})
    (out / "checkpoints" / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(manifest)} snapshots under {out / 'checkpoints'}")
    return 0


def _load_finetune_inputs(cfg: dict):
    ds = _open_dataset(cfg)
    ft = cfg["finetune"]
    train_stems = ds.split("train")
    k = ft["label_budget"] or len(train_stems)
    stems = subset_labels(train_stems, k, seed=cfg["seed"])
    train = _labeled_split(ds, "train", stems)
    val = _labeled_split(ds, "val")
    return ds, train, val, k


def cmd_finetune(cfg: dict) -> int:
    _setup(cfg)
    out = resolve_output_dir(cfg)
    ds, train, val, k = _load_finetune_inputs(cfg)

    source_path = _require(cfg, "finetune.source_checkpoint")
    source = ckpt_io.load_checkpoint(source_path)
    if source.is_detector:
        raise ConfigError(
            "finetune.source_checkpoint: expected a denoiser checkpoint, got a detector"
        )
    fcfg = _finetune_config(cfg)
    gen = torch.Generator().manual_seed(cfg["seed"])
    detector = detector_from_checkpoint(
        source, ds.num_landmarks, init_source=fcfg.init_source, generator=gen
    )
    result = finetune(
        detector,
        train,
        val,
        fcfg,
        aug_params=_aug_params(cfg),
        log=_jsonl_logger(out / "logs" / "finetune.jsonl"),
    )
    detector.load_state_dict(result.best_state)

    best = ckpt_io.Checkpoint(
        config=detector.config,
        state=result.best_state,
        ema_state=None,
        schedule=source.schedule,
        metadata={
            "mode": "detector",
            "source_checkpoint": str(source_path),
            "source_iteration": source.metadata.get("iteration"),
            "init_source": fcfg.init_source,
            "label_budget": k,
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "dataset_id": ds.manifest.name,
            "seed": cfg["seed"],
        },
    )
    ckpt_path = out / "checkpoints" / "finetune_best.pt"
    ckpt_io.save_checkpoint(best, ckpt_path)

    from landmark_diffusion.training import evaluate_mre

    report = {
        "val_mre_px_working": evaluate_mre(detector, val),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "label_budget": k,
    }
    (out / "reports" / "finetune_validation.json").write_text(json.dumps(report, indent=2))
    print(f"wrote {ckpt_path} (best epoch {result.best_epoch}, k={k})")
    return 0


def _overlay(image: np.ndarray, truth, pred, path: Path) -> None:
    img8 = (np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    im = Image.fromarray(img8, mode="L").convert("RGB")
    draw = ImageDraw.Draw(im)
    r = max(2, min(im.size) // 100)
    for x, y in truth.points:
        draw.ellipse([x - r, y - r, x + r, y + r], outline=(0, 255, 0), width=2)
    for x, y in pred.points:
        draw.line([x - r, y, x + r, y], fill=(255, 0, 0), width=2)
        draw.line([x, y - r, x, y + r], fill=(255, 0, 0), width=2)
    im.save(path)


def cmd_evaluate(cfg: dict) -> int:
    _setup(cfg)
    out = resolve_output_dir(cfg)
    ds = _open_dataset(cfg)
    ckpt = ckpt_io.load_checkpoint(_require(cfg, "evaluate.checkpoint"))
    if not ckpt.is_detector:
        raise ConfigError("evaluate.checkpoint: expected a detector checkpoint")
    if ckpt.config.out_channels != ds.num_landmarks:
        raise ConfigError(
            f"evaluate.checkpoint: detector has {ckpt.config.out_channels} channels, "
            f"dataset has {ds.num_landmarks} landmarks"
        )
    net = build_network(ckpt.config)
    net.load_state_dict(ckpt.state)
    net.eval()

    working = cfg["dataset"]["working_size"]
    per_image_errors = []
    overlay_budget = cfg["evaluate"]["overlay_count"]
    for i, stem in enumerate(ds.split("test")):
        entry = ds.manifest.entries[stem]
        img = ds.working_image(stem)
        pred_grid = predict_landmarks(net, img)
        pred = rescale_landmarks(
            pred_grid, (working, working), (entry.width, entry.height)
        )
        truth = ds.landmarks(stem)
        spacing = compute_spacing(ds.manifest.spacing, truth)
        per_image_errors.append(radial_errors(pred, truth, spacing).tolist())
        if i < overlay_budget:
            _overlay(ds.image(stem), truth, pred, out / "overlays" / f"{stem}.png")

    units = "mm" if ds.manifest.unit_mode == "millimeters" else "px"
    report = build_report(
        dataset=ds.manifest.name,
        per_image_errors=per_image_errors,
        thresholds=cfg["evaluate"]["thresholds"],
        label_budget=ckpt.metadata.get("label_budget", 0),
        units=units,
    )
    report.save(out / "reports" / "evaluation.json")
    (out / "reports" / "evaluation.txt").write_text(render_table([report]))
    (out / "reports" / "evaluation.csv").write_text(render_table([report], delimiter=","))
    print(render_table([report]))
    return 0


def cmd_sample(cfg: dict) -> int:
    _setup(cfg)
    out = resolve_output_dir(cfg)
    ckpt = ckpt_io.load_checkpoint(_require(cfg, "sample.checkpoint"))
    if ckpt.is_detector:
        raise ConfigError(
            "sample.checkpoint: detector checkpoints have no timestep "
            "conditioning and cannot be sampled from"
        )
    net = build_network(ckpt.config)
    net.load_state_dict(ckpt.weights("ema"))
    net.eval()
    sd = ckpt.schedule or cfg["diffusion"]
    sched = build_linear_schedule(
        sd["num_steps"], sd["beta_start"], sd["beta_end"]
    )
    count = cfg["sample"]["count"]
    gen = torch.Generator().manual_seed(cfg["seed"])
    size = ckpt.config.image_size
    x = ancestral_sample(
        net, sched, (count, 1, size, size), generator=gen,
        variance=cfg["diffusion"]["variance"],
    )
    imgs = x.clamp(0.0, 1.0).numpy()
    for i in range(count):
        img8 = (imgs[i, 0] * 255).round().astype(np.uint8)
        Image.fromarray(img8, mode="L").save(out / "samples" / f"sample_{i:03d}.png")
    print(f"wrote {count} samples under {out / 'samples'}")
    return 0


def cmd_select_snapshot(cfg: dict) -> int:
    _setup(cfg)
    out = resolve_output_dir(cfg)
    manifest_path = Path(_require(cfg, "select_snapshot.manifest"))
    if not manifest_path.exists():
        raise ConfigError(f"select_snapshot.manifest: file not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if not manifest:
        raise ConfigError("select_snapshot.manifest: empty snapshot manifest")
    snapshots = [ckpt_io.load_checkpoint(item["path"]) for item in manifest]

    ds = _open_dataset(cfg)
    sel = cfg["select_snapshot"]
    train_stems = ds.split("train")
    k = sel["label_budget"] or len(train_stems)
    stems = subset_labels(train_stems, k, seed=cfg["seed"])
    train = _labeled_split(ds, "train", stems)
    val = _labeled_split(ds, "val")

    fcfg = _finetune_config(cfg)
    selection = select_snapshot(
        snapshots,
        train,
        val,
        fcfg,
        repetitions=sel["repetitions"],
        aug_params=_aug_params(cfg),
        log=_jsonl_logger(out / "logs" / "select_snapshot.jsonl"),
    )
    report = {
        "winner_iteration": selection.winner.metadata.get("iteration"),
        "repetitions": sel["repetitions"],
        "label_budget": k,
        "snapshots": [
            {
                "iteration": s.iteration,
                "val_mre_mean": s.mre_mean,
                "val_mre_std": s.mre_std,
                "val_mre_runs": s.mre_runs,
            }
            for s in selection.scores
        ],
    }
    (out / "reports" / "snapshot_selection.json").write_text(json.dumps(report, indent=2))
    print(f"winner: iteration {report['winner_iteration']}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sample": cmd_sample,
    "select-snapshot": cmd_select_snapshot,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="landmark-diffusion",
        description="DDPM pre-training and few-shot landmark detection",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, type=Path)
    args, overrides = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, ValueError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
