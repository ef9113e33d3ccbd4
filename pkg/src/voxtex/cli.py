"""Command-line pipeline driver.

Every subcommand reads an optional JSON config (strictly validated, flags
override file values), prints a short human summary, and can write a
machine-readable JSON result via --out.  Identical config plus seed gives
byte-identical results and logs, so no timestamps or host details appear
in any output.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from .datagen import (RigSpec, generate_dataset, load_manifest, load_sample,
                      recon_dataset_from_manifest,
                      texture_dataset_from_manifest)
from .grids import VoxelGrid, iou, load_voxels, save_voxels
from .images import load_depth, load_ppm, save_depth, save_ppm
from .meshes import load_obj, save_obj
from .nn.serialize import load_params, save_params
from .recon import (INPUT_MODES, FUSIONS, ReconConfig, ReconView,
                    TrainingDivergedError, reconstruct, train_recon,
                    view_from_image)
from .render import render_ortho_views
from .surface import extract_surface
from .texture import VaeConfig, texture_model, train_texture
from .voxelize import NonWatertightMeshError, voxelize

_CONFIG_KEYS = {"recon", "vae", "rig", "data_dir", "seed", "epochs",
                "subjects", "poses", "grid_out", "ortho_size",
                "figure_resolution", "lr", "batch_size", "weight_decay",
                "beta", "eval_views"}

_DEFAULTS = {"seed": 0, "epochs": 100, "subjects": 10, "poses": 1,
             "grid_out": 32, "ortho_size": 64, "figure_resolution": 64,
             "lr": 1e-4, "batch_size": 5, "weight_decay": 1e-5, "beta": 1.0,
             "eval_views": 1}


class CliError(ValueError):
    """User-facing failure: bad config, missing file, contract violation."""


def load_run_config(path) -> dict:
    if path is None:
        return dict(_DEFAULTS)
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise CliError(f"config {path} must hold a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    cfg = dict(_DEFAULTS)
    cfg.update(raw)
    # validate sub-configs up front so bad files fail before any work
    if "recon" in cfg:
        cfg["recon"] = ReconConfig.from_dict(cfg["recon"]).to_dict()
    if "vae" in cfg:
        cfg["vae"] = VaeConfig.from_dict(cfg["vae"]).to_dict()
    if "rig" in cfg:
        cfg["rig"] = RigSpec.from_dict(cfg["rig"]).to_dict()
    return cfg


def _override(cfg: dict, args, *names):
    for name in names:
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            cfg[name] = value


def _recon_config(cfg: dict, args) -> ReconConfig:
    section = dict(cfg.get("recon", {}))
    if getattr(args, "mode", None):
        section["input_mode"] = args.mode
    if getattr(args, "fusion", None):
        section["fusion"] = args.fusion
    return ReconConfig.from_dict(section)


def _vae_config(cfg: dict) -> VaeConfig:
    return VaeConfig.from_dict(dict(cfg.get("vae", {})))


def _need_data_dir(cfg: dict) -> str:
    if "data_dir" not in cfg:
        raise CliError("this command needs data_dir in the config")
    return cfg["data_dir"]


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _artifact_stem(args, default: str) -> str:
    if getattr(args, "out", None):
        out = str(args.out)
        return out[:-5] if out.endswith(".json") else out
    return default


# -------------------------------------------------------------- commands

def cmd_gen_data(args) -> dict:
    cfg = load_run_config(args.config)
    _override(cfg, args, "seed")
    if args.resolution is not None:
        cfg["figure_resolution"] = args.resolution
    data_dir = _need_data_dir(cfg)
    rig = RigSpec.from_dict(cfg.get("rig", {}))
    manifest = generate_dataset(
        cfg["subjects"], cfg["poses"], rig, data_dir, seed=cfg["seed"],
        grid_out=cfg["grid_out"], ortho_size=cfg["ortho_size"],
        figure_resolution=cfg["figure_resolution"])
    splits = [s["split"] for s in manifest["samples"]]
    result = {"command": "gen-data", "data_dir": data_dir,
              "seed": cfg["seed"], "rig": rig.to_dict(),
              "n_samples": len(splits),
              "n_train": splits.count("train"),
              "n_test": splits.count("test")}
    print(f"wrote {result['n_samples']} samples "
          f"({result['n_train']} train / {result['n_test']} test) "
          f"to {data_dir}")
    return result


def cmd_voxelize(args) -> dict:
    mesh = load_obj(args.mesh)
    grid, _ = voxelize(mesh, args.resolution)
    save_voxels(grid, args.output)
    occupied = int((grid.values > 0.5).sum())
    result = {"command": "voxelize", "mesh": args.mesh,
              "voxels": args.output, "resolution": args.resolution,
              "occupied": occupied, "total": int(grid.values.size)}
    print(f"voxelized {args.mesh} at {args.resolution}^3: "
          f"{occupied} occupied -> {args.output}")
    return result


def cmd_render(args) -> dict:
    mesh = load_obj(args.mesh)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rgb_views, depth_views = render_ortho_views(mesh, args.resolution)
    files = []
    for fi, (rv, dv) in enumerate(zip(rgb_views, depth_views)):
        rgb_path = out / f"ortho{fi}_rgb.ppm"
        save_ppm(rgb_path, rv.rgb)
        depth_path = out / f"ortho{fi}_depth.pgm"
        save_depth(depth_path, dv.depth, dv.camera)
        files += [rgb_path.name, depth_path.name]
    result = {"command": "render", "mesh": args.mesh,
              "output_dir": str(out), "resolution": args.resolution,
              "files": files}
    print(f"rendered 4 orthographic faces of {args.mesh} at "
          f"{args.resolution}px into {out}")
    return result


def cmd_train_recon(args) -> dict:
    cfg = load_run_config(args.config)
    _override(cfg, args, "seed", "epochs")
    config = _recon_config(cfg, args)
    dataset = recon_dataset_from_manifest(_need_data_dir(cfg))
    log_path = str(args.params) + ".log"
    params, log = train_recon(
        dataset, config, epochs=cfg["epochs"], seed=cfg["seed"],
        lr=cfg["lr"], batch_size=cfg["batch_size"],
        weight_decay=cfg["weight_decay"], log_path=log_path)
    save_params(args.params, params)
    result = {"command": "train-recon", "mode": config.input_mode,
              "fusion": config.fusion, "epochs": cfg["epochs"],
              "seed": cfg["seed"], "params": args.params, "log": log_path,
              "final_train_loss": log[-1]["train_loss"],
              "final_val_iou": log[-1]["val_iou"]}
    print(f"trained {config.input_mode}/{config.fusion} for "
          f"{cfg['epochs']} epochs: val IoU {result['final_val_iou']:.4f} "
          f"-> {args.params}")
    return result


def cmd_train_texture(args) -> dict:
    cfg = load_run_config(args.config)
    _override(cfg, args, "seed", "epochs")
    config = _vae_config(cfg)
    dataset = texture_dataset_from_manifest(_need_data_dir(cfg))
    log_path = str(args.params) + ".log"
    params, log = train_texture(
        dataset, config, epochs=cfg["epochs"], seed=cfg["seed"],
        lr=cfg["lr"], weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"], beta=cfg["beta"], log_path=log_path)
    save_params(args.params, params)
    result = {"command": "train-texture", "epochs": cfg["epochs"],
              "seed": cfg["seed"], "params": args.params, "log": log_path,
              "final_train_loss": log[-1]["train_loss"],
              "final_val_mae": log[-1]["val_mae"]}
    print(f"trained texture model for {cfg['epochs']} epochs: "
          f"val MAE {result['final_val_mae']:.4f} -> {args.params}")
    return result


def _load_cli_view(spec: str) -> ReconView:
    """One --views argument: photo.ppm, depth.pgm, or photo.ppm+depth.pgm."""
    if "+" in spec:
        rgb_path, depth_path = spec.split("+", 1)
        depth, cam = load_depth(depth_path)
        from .cameras import ViewImage
        return view_from_image(ViewImage(camera=cam, rgb=load_ppm(rgb_path),
                                         depth=depth))
    if spec.endswith(".ppm"):
        return ReconView(rgb=load_ppm(spec))
    if spec.endswith(".pgm"):
        depth, cam = load_depth(spec)
        from .cameras import ViewImage
        return view_from_image(ViewImage(camera=cam, depth=depth))
    raise CliError(f"view {spec!r} must be .ppm, .pgm, or rgb.ppm+depth.pgm")


def cmd_reconstruct(args) -> dict:
    cfg = load_run_config(args.config)
    config = _recon_config(cfg, args)
    params = load_params(args.params)
    views = [_load_cli_view(v) for v in args.views]
    grid = reconstruct(views, params, config)
    stem = _artifact_stem(args, "reconstruct")
    vox_path, mesh_path = stem + ".voxl", stem + ".obj"
    save_voxels(grid, vox_path)
    save_obj(extract_surface(grid), mesh_path)
    occupied = int((grid.values > 0.5).sum())
    result = {"command": "reconstruct", "views": list(args.views),
              "mode": config.input_mode, "fusion": config.fusion,
              "occupied": occupied, "total": int(grid.values.size),
              "voxels": vox_path, "mesh": mesh_path}
    print(f"reconstructed from {len(views)} view(s): {occupied} voxels "
          f"occupied -> {vox_path}, {mesh_path}")
    return result


def cmd_texture(args) -> dict:
    cfg = load_run_config(args.config)
    config = _vae_config(cfg)
    params = load_params(args.params)
    grid = load_voxels(args.voxels)
    photo = load_ppm(args.views[0])
    mesh, synthesized = texture_model(grid, photo, params, config)
    stem = _artifact_stem(args, "texture")
    mesh_path = stem + ".obj"
    save_obj(mesh, mesh_path)
    face_paths = []
    for view in synthesized:
        path = f"{stem}_face{view.face_index}.ppm"
        save_ppm(path, view.rgb)
        face_paths.append(path)
    result = {"command": "texture", "voxels": args.voxels,
              "photo": args.views[0], "mesh": mesh_path,
              "faces": face_paths}
    print(f"textured {args.voxels} -> {mesh_path} plus 4 face images")
    return result


# ------------------------------------------------------------- evaluation

def _eval_on_split(data_dir: str, params, config: ReconConfig, n_views: int,
                   split: str = "test") -> list:
    """Per-sample IoU rows for one trained model on a manifest split."""
    manifest = load_manifest(data_dir)
    entries = [e for e in manifest["samples"] if e["split"] == split]
    if not entries:
        raise CliError(f"no {split} samples in {data_dir}")
    rows = []
    for entry in entries:
        data = load_sample(data_dir, entry)
        if data.grid.values.shape[0] != config.grid_out:
            raise CliError(
                f"dataset grids are {data.grid.values.shape[0]}^3 but the "
                f"model outputs {config.grid_out}^3")
        views = [view_from_image(v) for v in
                 data.views[:max(1, min(n_views, len(data.views)))]]
        if config.input_mode == "RGB_or_D":
            # the mixed-modality model serves either input kind, so score
            # both presentations of every sample
            for prefer_depth in (False, True):
                pred = reconstruct(views, params, config,
                                   prefer_depth=prefer_depth)
                rows.append({"id": entry["id"],
                             "presented": "D" if prefer_depth else "RGB",
                             "iou": iou(pred, data.grid)})
        else:
            pred = reconstruct(views, params, config)
            rows.append({"id": entry["id"], "iou": iou(pred, data.grid)})
    return rows


def cmd_evaluate(args) -> dict:
    if args.grids:
        if len(args.grids) != 2:
            raise CliError("direct evaluation takes exactly two grids: "
                           "prediction then ground truth")
        pred, gt = load_voxels(args.grids[0]), load_voxels(args.grids[1])
        result = {"command": "evaluate", "pred": args.grids[0],
                  "gt": args.grids[1], "iou": iou(pred, gt),
                  "literal_eq3_iou": iou(pred, gt, literal_eq3=True)}
        print(f"IoU {result['iou']:.4f} "
              f"(literal summed-denominator form {result['literal_eq3_iou']:.4f})")
        return result
    if not args.params:
        raise CliError("evaluate needs either two grid files or --params")
    cfg = load_run_config(args.config)
    config = _recon_config(cfg, args)
    n_views = args.views_count if args.views_count is not None \
        else cfg["eval_views"]
    params = load_params(args.params)
    rows = _eval_on_split(_need_data_dir(cfg), params, config, n_views)
    ious = [r["iou"] for r in rows]
    result = {"command": "evaluate", "mode": config.input_mode,
              "fusion": config.fusion, "n_views": n_views,
              "per_sample": rows, "n": len(rows),
              "mean_iou": float(np.mean(ious)),
              "median_iou": float(np.median(ious))}
    print(f"evaluated {len(rows)} predictions: mean IoU "
          f"{result['mean_iou']:.4f}, median {result['median_iou']:.4f}")
    return result


def _mode_table_cell(job: dict) -> dict:
    cfg = job["cfg"]
    section = dict(cfg.get("recon", {}))
    section["input_mode"] = job["mode"]
    section["fusion"] = job["fusion"]
    config = ReconConfig.from_dict(section)
    dataset = recon_dataset_from_manifest(job["data_dir"])
    params, log = train_recon(
        dataset, config, epochs=cfg["epochs"], seed=cfg["seed"],
        lr=cfg["lr"], batch_size=cfg["batch_size"],
        weight_decay=cfg["weight_decay"])
    rows = _eval_on_split(job["data_dir"], params, config,
                          cfg["eval_views"])
    ious = [r["iou"] for r in rows]
    cell = {"mode": job["mode"], "fusion": job["fusion"],
            "median_iou": float(np.median(ious)),
            "mean_iou": float(np.mean(ious)), "n_eval": len(rows),
            "final_train_loss": log[-1]["train_loss"],
            "final_val_iou": log[-1]["val_iou"]}
    if job["mode"] == "RGB_or_D":
        cell["median_iou_by_presented"] = {
            kind: float(np.median([r["iou"] for r in rows
                                   if r["presented"] == kind]))
            for kind in ("RGB", "D")}
    return cell


def cmd_mode_table(args) -> dict:
    cfg = load_run_config(args.config)
    _override(cfg, args, "seed", "epochs")
    data_dir = _need_data_dir(cfg)
    jobs = [{"cfg": cfg, "data_dir": data_dir, "mode": mode,
             "fusion": fusion}
            for fusion in FUSIONS for mode in INPUT_MODES]
    if args.parallel:
        workers = min(len(jobs), os.cpu_count() or 1)
        with multiprocessing.get_context("fork").Pool(workers) as pool:
            cells = pool.map(_mode_table_cell, jobs)
    else:
        cells = [_mode_table_cell(job) for job in jobs]
    result = {"command": "mode-table", "seed": cfg["seed"],
              "epochs": cfg["epochs"], "eval_views": cfg["eval_views"],
              "cells": cells}
    print(f"{'mode':>9} | " + " | ".join(f"{f:>10}" for f in FUSIONS))
    for mode in INPUT_MODES:
        row = [next(c for c in cells
                    if c["mode"] == mode and c["fusion"] == fusion)
               for fusion in FUSIONS]
        print(f"{mode:>9} | "
              + " | ".join(f"{c['median_iou']:>10.4f}" for c in row))
    return result


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxtex",
        description="two-stage textured human reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True, out=True):
        if config:
            p.add_argument("--config", help="JSON run config")
        if seed:
            p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", help="write JSON results here")

    p = sub.add_parser("gen-data", help="write a procedural dataset")
    common(p)
    p.add_argument("--resolution", type=int,
                   help="figure sampling resolution")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("voxelize", help="mesh file to occupancy grid")
    p.add_argument("mesh")
    p.add_argument("output")
    p.add_argument("--resolution", type=int, default=32)
    common(p, config=False, seed=False)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("render", help="render the 4 orthographic faces")
    p.add_argument("mesh")
    p.add_argument("output_dir")
    p.add_argument("--resolution", type=int, default=64)
    common(p, config=False, seed=False)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train-recon", help="train the occupancy model")
    common(p)
    p.add_argument("--params", required=True, help="weights output path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=INPUT_MODES)
    p.add_argument("--fusion", choices=FUSIONS)
    p.set_defaults(func=cmd_train_recon)

    p = sub.add_parser("train-texture", help="train the texture model")
    common(p)
    p.add_argument("--params", required=True, help="weights output path")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_texture)

    p = sub.add_parser("reconstruct",
                       help="occupancy grid and mesh from images")
    common(p, seed=False)
    p.add_argument("--views", nargs="+", required=True,
                   help="photo.ppm, depth.pgm, or photo.ppm+depth.pgm each")
    p.add_argument("--params", required=True)
    p.add_argument("--mode", choices=INPUT_MODES)
    p.add_argument("--fusion", choices=FUSIONS)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("texture", help="texture a reconstructed grid")
    common(p, seed=False)
    p.add_argument("voxels", help="occupancy grid (.voxl)")
    p.add_argument("--views", nargs=1, required=True,
                   help="conditioning photo (.ppm)")
    p.add_argument("--params", required=True)
    p.set_defaults(func=cmd_texture)

    p = sub.add_parser("evaluate",
                       help="IoU of predictions against ground truth")
    common(p, seed=False)
    p.add_argument("grids", nargs="*",
                   help="direct form: PRED.voxl GT.voxl")
    p.add_argument("--params", help="model form: weights to evaluate")
    p.add_argument("--views", dest="views_count", type=int,
                   help="views per sample in model form")
    p.add_argument("--mode", choices=INPUT_MODES)
    p.add_argument("--fusion", choices=FUSIONS)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mode-table",
                       help="train and score all mode x fusion cells")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--parallel", action="store_true",
                   help="train cells in worker processes")
    p.set_defaults(func=cmd_mode_table)
    return parser


_EXPECTED_ERRORS = (CliError, ValueError, KeyError, OSError,
                    NonWatertightMeshError, TrainingDivergedError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
        if getattr(args, "out", None):
            _write_json(args.out, result)
    except _EXPECTED_ERRORS as exc:
        print(json.dumps({"error": {"type": type(exc).__name__,
                                    "message": str(exc)}}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
