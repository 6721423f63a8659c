"""Command-line entry point: ``rgbdprior <subcommand> ...``.

Every command writes ``manifest.json`` into its output directory with the
effective configuration, seed, input/output content hashes and timestamps.
Configuration precedence is flag > ``RGBDPRIOR_SEED`` (seed only) > config
file > preset > built-in default.

Exit codes: 0 success, 2 input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
import time
import zipfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__

log = logging.getLogger("rgbdprior")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_tree(path: Path) -> str:
    if path.is_file():
        return sha256(path)
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            h.update(str(p.relative_to(path)).encode())
            h.update(sha256(p).encode())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed: int, inputs: dict, outputs: dict,
                   started: float, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(v), "sha256": _hash_tree(Path(v))} for k, v in inputs.items() if v},
        "outputs": {k: {"path": str(v), "sha256": _hash_tree(Path(v))} for k, v in outputs.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, default=str))
    return path


def read_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise InputError(f"{p}: config must be a flat JSON object")
    return data


def effective_seed(args, file_cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("RGBDPRIOR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise InputError(f"RGBDPRIOR_SEED must be an integer, got {env!r}") from exc
    return int(file_cfg.get("seed", 0))


def _split(cfg: dict, *classes) -> list[dict]:
    """Distribute flat keys over dataclasses; unknown keys are an input error."""
    out = [{} for _ in classes]
    for key, val in cfg.items():
        for i, cls in enumerate(classes):
            if key in {f.name for f in dataclasses.fields(cls)}:
                out[i][key] = val
                break
        else:
            raise InputError(f"unknown config key {key!r}")
    return out


def _flags(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands -----------------------------------------------------------------------------------------------

def cmd_gen_scene(args) -> int:
    from .data import CameraRig, default_scene_spec, generate_synthetic_scene, random_scene_spec, save_scene

    started = time.time()
    file_cfg = read_config_file(args.config)
    seed = effective_seed(args, file_cfg)
    rig = CameraRig(n_views=args.n_views or file_cfg.get("n_views", 16),
                    width=args.size or file_cfg.get("size", 128), height=args.size or file_cfg.get("size", 128))
    kind = args.kind or file_cfg.get("kind", "default")
    if kind == "default":
        spec = default_scene_spec(rig=rig)
    elif kind == "random":
        spec = random_scene_spec(seed, rig=rig)
    else:
        raise InputError(f"unknown scene kind {kind!r}")
    out = _out_dir(args)
    save_scene(generate_synthetic_scene(spec, seed=seed), out)
    write_manifest(out, "gen-scene", {"kind": kind, "n_views": rig.n_views, "size": rig.width}, seed, {},
                   {"scene": out}, started)
    return EXIT_OK


def cmd_build_corpus(args) -> int:
    from .data import (CameraRig, build_patch_corpus, generate_synthetic_scene, load_scene, random_scene_spec,
                       write_corpus)

    started = time.time()
    file_cfg = read_config_file(args.config)
    seed = effective_seed(args, file_cfg)
    patch_size = args.patch_size or file_cfg.get("patch_size", 48)
    per_image = args.per_image or file_cfg.get("per_image", 16)
    if args.scene:
        scenes = [load_scene(p) for p in args.scene]
    else:
        n = args.random_scenes or file_cfg.get("random_scenes", 8)
        rig = CameraRig(n_views=8)
        scenes = [generate_synthetic_scene(random_scene_spec(seed + k, rig=rig), seed=seed + k) for k in range(n)]
    corpus = build_patch_corpus(scenes, per_image, patch_size, seed)
    out = _out_dir(args)
    path = out / "corpus.bin"
    write_corpus(corpus, path)
    log.info("wrote %d patches of size %d", corpus.count, patch_size)
    write_manifest(out, "build-corpus", {"patch_size": patch_size, "per_image": per_image,
                                         "scenes": [str(s) for s in args.scene or []]},
                   seed, {f"scene{i}": p for i, p in enumerate(args.scene or [])}, {"corpus": path}, started,
                   {"count": corpus.count})
    return EXIT_OK


def cmd_train_ddm(args) -> int:
    from .data import read_corpus
    from .ddm import DDMTrainConfig, DDMTrainer, Denoiser, DenoiserConfig, NoiseSchedule, load_ddm, save_ddm

    started = time.time()
    file_cfg = read_config_file(args.config)
    seed = effective_seed(args, file_cfg)
    corpus = read_corpus(args.corpus)
    train_cfg, net_cfg = _split({k: v for k, v in file_cfg.items() if k != "seed"}, DDMTrainConfig, DenoiserConfig)
    train_cfg.update(_flags(args, ["steps", "batch_size", "lr", "objective"]))
    if args.widths:
        net_cfg["widths"] = args.widths
    if args.blocks_per_scale is not None:
        net_cfg["blocks_per_scale"] = args.blocks_per_scale
    if "widths" in net_cfg:
        net_cfg["widths"] = tuple(int(w) for w in net_cfg["widths"])
    train_cfg["seed"] = seed
    train_cfg["log_every"] = train_cfg.get("log_every", 100)
    tcfg = DDMTrainConfig(**train_cfg)
    out = _out_dir(args)
    ckpt, state_path, curve = out / "ddm.npz", out / "trainer_state.pt", out / "loss.jsonl"

    torch.manual_seed(seed)
    if args.resume:
        if not (ckpt.is_file() and state_path.is_file()):
            raise InputError(f"{out}: nothing to resume from")
        model, schedule, _ = load_ddm(ckpt)
        trainer = DDMTrainer(model, schedule, corpus.patches, tcfg)
        trainer.load_optimizer_state(torch.load(state_path, weights_only=False))
        remaining = max(tcfg.steps - trainer.step, 0)
    else:
        model = Denoiser(DenoiserConfig(**net_cfg))
        schedule = NoiseSchedule.linear()
        trainer = DDMTrainer(model, schedule, corpus.patches, tcfg)
        remaining = tcfg.steps
        curve.write_text("")
    first = trainer.step
    trainer.train(remaining)
    with open(curve, "a") as fh:
        for k, loss in enumerate(trainer.losses[first:], start=first + 1):
            fh.write(json.dumps({"step": k, "loss": loss}) + "\n")
    if not np.all(np.isfinite(trainer.losses[first:])):
        log.error("non-finite DDM loss")
        return EXIT_NUMERIC
    save_ddm(ckpt, model, schedule, corpus.patch_size, corpus.scene_scale, trainer.step)
    torch.save(trainer.optimizer_state(), state_path)
    cfg = dataclasses.asdict(tcfg)
    cfg["network"] = dataclasses.asdict(model.config)
    write_manifest(out, "train-ddm", cfg, seed, {"corpus": args.corpus}, {"checkpoint": ckpt, "loss_curve": curve},
                   started, {"step": trainer.step})
    return EXIT_OK


def _tile(images: list[np.ndarray], cols: int, gap: int = 1) -> np.ndarray:
    p = images[0].shape[0]
    rows = (len(images) + cols - 1) // cols
    shape = (rows * (p + gap) - gap, cols * (p + gap) - gap) + images[0].shape[2:]
    grid = np.ones(shape, dtype=images[0].dtype)
    for k, img in enumerate(images):
        r, c = divmod(k, cols)
        grid[r * (p + gap):r * (p + gap) + p, c * (p + gap):c * (p + gap) + p] = img
    return grid


def cmd_sample_ddm(args) -> int:
    from .ddm import ancestral_sample, load_ddm

    started = time.time()
    seed = effective_seed(args, {})
    model, schedule, meta = load_ddm(args.ddm)
    p = meta["patch_size"]
    samples = ancestral_sample(model, schedule, args.n, (p, p, 4), seed=seed).numpy()
    cols = int(np.ceil(np.sqrt(args.n)))
    rgb = _tile([(s[..., :3] + 1) / 2 for s in samples], cols)
    inv = _tile([(s[..., 3] + 1) / 2 for s in samples], cols)
    out = _out_dir(args)
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(out / "samples_rgb.png")
    Image.fromarray(np.round(np.clip(inv, 0, 1) * 255).astype(np.uint8)).save(out / "samples_inverse_depth.png")
    np.save(out / "samples.npy", samples)
    write_manifest(out, "sample-ddm", {"n": args.n}, seed, {"ddm": args.ddm},
                   {"rgb": out / "samples_rgb.png", "inverse_depth": out / "samples_inverse_depth.png"}, started)
    return EXIT_OK


SCHEDULE_KEYS = {"tau_warmup_steps", "dist_ramp_start", "dist_ramp_end"}
FIT_FLAGS = ["preset", "total_steps", "rays_per_batch", "samples_per_ray", "patch_size", "lambda_fg", "lambda_fr",
             "lambda_dist_max", "ddm_depth_weight", "ddm_rgb_weight", "input_patch_probability"]


def build_train_config(args, file_cfg: dict, seed: int):
    from .fields import EncodingConfig
    from .trainer import REFERENCE_TOTAL_STEPS, TrainConfig, geometric_baseline_config, rescaled

    cfg_keys, enc_keys = _split({k: v for k, v in file_cfg.items() if k not in ("seed", "views")}, TrainConfig,
                                EncodingConfig)
    cfg_keys.update(_flags(args, FIT_FLAGS))
    cfg_keys["seed"] = seed
    if enc_keys:
        cfg_keys["encoding"] = EncodingConfig(**enc_keys)
    total = cfg_keys.pop("total_steps", REFERENCE_TOTAL_STEPS)
    config = TrainConfig(**cfg_keys)
    if total != config.total_steps and not SCHEDULE_KEYS & set(cfg_keys):
        # Shorter runs keep the schedule shape: breakpoints shrink with the budget.
        config = rescaled(config, total)
    else:
        config = dataclasses.replace(config, total_steps=total)
    if args.ddm is None:
        config = geometric_baseline_config(config)
    return config.resolved()


def cmd_fit_nerf(args) -> int:
    from .data import load_scene
    from .ddm import load_ddm
    from .trainer import NumericalFailure, fit

    started = time.time()
    file_cfg = read_config_file(args.config)
    seed = effective_seed(args, file_cfg)
    views = args.views if args.views is not None else file_cfg.get("views")
    scene = load_scene(args.scene, n_views=views)
    config = build_train_config(args, file_cfg, seed)
    ddm = None
    if args.ddm is not None:
        model, schedule, meta = load_ddm(args.ddm)
        if abs(meta.get("scene_scale", scene.scale) - scene.scale) > 1e-9:
            log.warning("prior was trained at scene scale %s but the scene uses %s", meta["scene_scale"], scene.scale)
        ddm = (model, schedule)
    out = _out_dir(args)
    log_path, ckpt = out / "train_log.jsonl", out / "field.npz"
    torch.manual_seed(seed)
    with open(log_path, "w") as fh:
        try:
            result = fit(scene, config, ddm=ddm, log_file=fh)
        except NumericalFailure as exc:
            log.error("%s", exc)
            return EXIT_NUMERIC
    result.field.save(ckpt)
    (out / "split.json").write_text(json.dumps({"train_ids": scene.train_ids, "test_ids": scene.test_ids}))
    tag = "full" if ddm is not None else "geometric-baseline"
    write_manifest(out, "fit-nerf", config.to_dict(), seed, {"scene": args.scene, "ddm": args.ddm},
                   {"field": ckpt, "log": log_path}, started, {"tag": tag, "views": views})
    return EXIT_OK


def _load_field(path):
    from .fields import RadianceField

    if not Path(path).is_file():
        raise InputError(f"field checkpoint not found: {path}")
    return RadianceField.load(path)


def _scene_for_field(args):
    from .data import load_scene

    scene = load_scene(args.scene)
    split = Path(args.field).parent / "split.json"
    if args.views is not None:
        return scene.with_views(args.views)
    if split.is_file():
        ids = json.loads(split.read_text())
        return dataclasses.replace(scene, train_ids=ids["train_ids"], test_ids=ids["test_ids"])
    return scene.with_views(None)


def cmd_render(args) -> int:
    from .volume_rendering import render_image, write_render_pngs

    started = time.time()
    field_model = _load_field(args.field)
    scene = _scene_for_field(args)
    ids = args.view_ids if args.view_ids else scene.test_ids
    out = _out_dir(args)
    outputs = {}
    for i in ids:
        if not 0 <= i < len(scene):
            raise InputError(f"view {i} out of range")
        rgb, depth = render_image(field_model, scene.cameras[i], scene.near, scene.far, args.samples)
        cpath, dpath = out / f"color_{i:03d}.png", out / f"inverse_depth_{i:03d}.png"
        write_render_pngs(rgb, depth, scene.near, cpath, dpath)
        outputs[f"color_{i}"], outputs[f"depth_{i}"] = cpath, dpath
    write_manifest(out, "render", {"views": list(ids), "samples": args.samples}, 0,
                   {"field": args.field, "scene": args.scene}, outputs, started)
    return EXIT_OK


def cmd_extract_mesh(args) -> int:
    from .evaluation import extract_mesh
    from .mesh import write_ply

    started = time.time()
    field_model = _load_field(args.field)
    mesh = extract_mesh(field_model, args.resolution, args.iso)
    out = _out_dir(args)
    path = out / "mesh.ply"
    write_ply(path, mesh.vertices, mesh.faces)
    write_manifest(out, "extract-mesh", {"resolution": args.resolution, "iso": args.iso}, 0,
                   {"field": args.field}, {"mesh": path}, started, {"faces": len(mesh)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_views, geometry_chamfer

    started = time.time()
    field_model = _load_field(args.field)
    scene = _scene_for_field(args)
    report = evaluate_views(field_model, scene, n_samples=args.samples)
    if scene.mesh is not None:
        chamfer = geometry_chamfer(field_model, scene, args.resolution, args.iso)
        if math.isfinite(chamfer):
            report.chamfer = chamfer
        else:
            log.warning("predicted surface is empty after culling; chamfer not reported")
    else:
        log.warning("scene has no ground-truth mesh; chamfer skipped")
    out = _out_dir(args)
    path = out / "report.json"
    path.write_text(report.to_json())
    write_manifest(out, "evaluate", {"samples": args.samples, "resolution": args.resolution, "iso": args.iso}, 0,
                   {"field": args.field, "scene": args.scene}, {"report": path}, started)
    print(json.dumps({"psnr": report.psnr, "ssim": report.ssim, "average": report.average,
                      "chamfer": report.chamfer}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgbdprior", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(fn=fn)
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    sp = add("gen-scene", cmd_gen_scene, "ray-trace a synthetic scene")
    sp.add_argument("--kind", choices=["default", "random"])
    sp.add_argument("--n-views", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--config")

    sp = add("build-corpus", cmd_build_corpus, "extract RGBD patches for prior training")
    sp.add_argument("--scene", action="append", help="scene directory (repeatable); default: random scenes")
    sp.add_argument("--random-scenes", type=int)
    sp.add_argument("--patch-size", type=int)
    sp.add_argument("--per-image", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--config")

    sp = add("train-ddm", cmd_train_ddm, "train the patch diffusion prior")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--objective", choices=["simple", "weighted"])
    sp.add_argument("--widths", type=lambda s: tuple(int(x) for x in s.split(",")))
    sp.add_argument("--blocks-per-scale", type=int)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--config")

    sp = add("sample-ddm", cmd_sample_ddm, "draw ancestral samples from a trained prior")
    sp.add_argument("--ddm", required=True)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--seed", type=int)

    sp = add("fit-nerf", cmd_fit_nerf, "fit a radiance field to a scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--ddm", help="prior checkpoint; omit for the geometric baseline")
    sp.add_argument("--views", type=int, help="number of training views")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--config")
    sp.add_argument("--preset", choices=["llff", "dtu"])
    sp.add_argument("--steps", dest="total_steps", type=int)
    for flag in FIT_FLAGS[2:]:
        sp.add_argument("--" + flag.replace("_", "-"), dest=flag,
                        type=float if flag.startswith(("lambda", "ddm", "input")) else int)

    for name, fn, help_text in [("render", cmd_render, "render views of a fitted field"),
                                ("evaluate", cmd_evaluate, "image metrics and chamfer distance")]:
        sp = add(name, fn, help_text)
        sp.add_argument("--field", required=True)
        sp.add_argument("--scene", required=True)
        sp.add_argument("--views", type=int, help="training-view count used to rebuild the split")
        sp.add_argument("--samples", type=int, default=128)
        if name == "render":
            sp.add_argument("--view-ids", type=int, nargs="*")
        else:
            sp.add_argument("--resolution", type=int, default=128)
            sp.add_argument("--iso", type=float, default=25.0)

    sp = add("extract-mesh", cmd_extract_mesh, "marching-cubes mesh of a fitted field")
    sp.add_argument("--field", required=True)
    sp.add_argument("--resolution", type=int, default=128)
    sp.add_argument("--iso", type=float, default=25.0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (InputError, ValueError, FileNotFoundError, zipfile.BadZipFile, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
