"""Command-line interface.

Every command resolves its knobs as defaults < config file < flags, writes
a run manifest (the fully resolved configuration, seed, and paths) next to
its outputs, and exits 0 on success, 1 on usage errors, 2 on runtime
errors. Config files are flat JSON mappings of flag names (without the
leading dashes, dashes may be written as underscores).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .errors import HdrMaskError, ContractError, DomainError
from . import formats
from .losses import FeatureExtractor, LossWeights, total_loss
from .network import (MASKING_MODES, UNetConfig, UNetParameters, exposure_mask,
                      export_mask_images, unet_forward)
from .pipeline import (CameraCurve, HdrImage, compose_hdr, mse_gamma,
                       simulate_ldr)
from .sampler import SamplerConfig, generate_inpainting_mask, sample_patches
from .synthetic import make_hdr_corpus, make_texture_corpus
from .tensor import check_gradients, parameter
from .training import (TrainConfig, evaluate, finetune_hdr, initialize_parameters,
                       load_model, loss_drop, run_ablation, save_model,
                       train_inpainting, validation_mse)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _utc_now():
    return datetime.now(timezone.utc).isoformat()


def _resolve(args, defaults):
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                file_conf = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read config file {path}: {exc}") from exc
        # A run manifest is itself a valid config: re-running from one
        # reproduces the original resolved configuration.
        if "resolved_config" in file_conf:
            file_conf = file_conf["resolved_config"]
        for key, value in file_conf.items():
            key = key.replace("-", "_")
            if key in resolved:
                resolved[key] = value
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_manifest(out_dir, command, resolved, inputs, outputs):
    manifest = {
        "command": command,
        "resolved_config": resolved,
        "seed": resolved.get("seed"),
        "build": f"hdrmask {__version__}",
        "inputs": inputs,
        "outputs": outputs,
        "timestamp_utc": _utc_now(),
    }
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{command.replace('-', '_')}_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)
    return path


def _unet_config(resolved):
    return UNetConfig(levels=int(resolved["levels"]),
                      base_channels=int(resolved["base_channels"]))


def _load_hdr_dir(path):
    names = sorted(f for f in os.listdir(path)
                   if f.lower().endswith((".pfm", ".hdr")))
    if not names:
        raise ContractError(f"no .pfm/.hdr files in {path}")
    return [(name, formats.read_hdr(os.path.join(path, name))) for name in names]


def _load_texture_dir(path):
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(".ppm"))
    if not names:
        raise ContractError(f"no .ppm files in {path}")
    return [formats.read_ldr(os.path.join(path, name)).pixels for name in names]


# -- subcommand implementations ------------------------------------------------


_SIMULATE_DEFAULTS = {"percentile": 93.0, "bits": 8, "curve": "gamma",
                      "gamma": 2.0, "alpha": 0.96, "seed": 0}


def cmd_simulate_ldr(args):
    resolved = _resolve(args, _SIMULATE_DEFAULTS)
    hdr = formats.read_hdr(args.input)
    curve = CameraCurve(kind=resolved["curve"], gamma=resolved["gamma"])
    ldr = simulate_ldr(hdr, resolved["percentile"], curve, int(resolved["bits"]))
    formats.write_ldr(args.output, ldr)
    mask = exposure_mask(ldr.pixels, resolved["alpha"])
    mask_path = args.output + ".mask.pgm"
    formats.write_gray8(mask_path, mask.min(axis=0))
    out_dir = os.path.dirname(os.path.abspath(args.output))
    _write_manifest(out_dir, "simulate-ldr", resolved,
                    {"hdr": args.input}, {"ldr": args.output, "mask": mask_path})
    return 0


_MASK_DEFAULTS = {"alpha": 0.96, "levels": 4, "base_channels": 16, "seed": 0}


def cmd_mask(args):
    resolved = _resolve(args, _MASK_DEFAULTS)
    ldr = formats.read_ldr(args.input)
    mask = exposure_mask(ldr.pixels, resolved["alpha"])
    if args.checkpoint:
        model = load_model(args.checkpoint)
        params, config = model.params, model.config
    else:
        config = _unet_config(resolved)
        params = initialize_parameters(config, int(resolved["seed"]))
    _, stack = unet_forward(ldr.pixels[None], mask[None], params, config)
    images = export_mask_images(stack)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = {}
    for (layer, channel), img in images.items():
        path = os.path.join(args.out_dir, f"mask_{layer}_c{channel}.pgm")
        formats.write_gray8(path, img)
        outputs[f"{layer}/c{channel}"] = path
    _write_manifest(args.out_dir, "mask", resolved, {"ldr": args.input}, outputs)
    return 0


_SAMPLE_DEFAULTS = {"patch": 64, "per_image": 32, "threshold": 0.85,
                    "alpha": 0.96, "sigma_color": 100.0, "sigma_space": 10.0,
                    "percentile": None, "seed": 0}


def cmd_sample_patches(args):
    resolved = _resolve(args, _SAMPLE_DEFAULTS)
    images = _load_hdr_dir(args.in_dir)
    cfg = SamplerConfig(
        color_sigma=resolved["sigma_color"], space_sigma=resolved["sigma_space"],
        metric_threshold=resolved["threshold"], patch_size=int(resolved["patch"]),
        patches_per_image=int(resolved["per_image"]), alpha=resolved["alpha"],
        fixed_percentile=resolved["percentile"])
    records = []
    for i, (name, hdr) in enumerate(images):
        records.extend(sample_patches(hdr, cfg, seed=int(resolved["seed"]) + i,
                                      image_id=name))
    if not records:
        raise ContractError("no patches passed the sampler; relax the threshold "
                            "or check the input exposure")
    formats.write_dataset_shard(args.output, records, alpha=resolved["alpha"])
    out_dir = os.path.dirname(os.path.abspath(args.output))
    _write_manifest(out_dir, "sample-patches", resolved,
                    {"hdr_dir": args.in_dir, "images": len(images)},
                    {"shard": args.output, "records": len(records)})
    print(f"kept {len(records)} patches from {len(images)} images")
    return 0


_GENMASK_DEFAULTS = {"count": 8, "height": 64, "width": 64, "seed": 0,
                     "min_coverage": 0.05, "max_coverage": 0.45}


def cmd_gen_inpaint_masks(args):
    resolved = _resolve(args, _GENMASK_DEFAULTS)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = {}
    for i in range(int(resolved["count"])):
        mask = generate_inpainting_mask(
            (int(resolved["height"]), int(resolved["width"])),
            seed=int(resolved["seed"]) + i,
            coverage=(resolved["min_coverage"], resolved["max_coverage"]))
        path = os.path.join(args.out_dir, f"mask_{i:04d}.pgm")
        formats.write_gray8(path, mask)
        outputs[str(i)] = path
    _write_manifest(args.out_dir, "gen-inpaint-masks", resolved, {}, outputs)
    return 0


_TRAIN_DEFAULTS = {"steps": 500, "batch": 4, "lr": 2e-4, "seed": 0,
                   "mode": "FMask", "levels": 4, "base_channels": 16,
                   "patience": 3, "factor": 2.0, "procedural": 0,
                   "steps_per_epoch": 50}


def _train_config(resolved, stage):
    return TrainConfig(stage=stage, lr=resolved["lr"], batch_size=int(resolved["batch"]),
                       plateau_patience=int(resolved["patience"]),
                       plateau_factor=resolved["factor"],
                       max_steps=int(resolved["steps"]), seed=int(resolved["seed"]),
                       masking_mode=resolved["mode"],
                       steps_per_epoch=int(resolved["steps_per_epoch"]))


def cmd_train_inpaint(args):
    resolved = _resolve(args, _TRAIN_DEFAULTS)
    if args.texture_dir:
        images = _load_texture_dir(args.texture_dir)
    elif resolved["procedural"]:
        images = make_texture_corpus(int(resolved["procedural"]),
                                     seed=int(resolved["seed"]))
    else:
        raise UsageError("train-inpaint needs --texture-dir or --procedural N")
    config = _train_config(resolved, "inpainting")
    unet_config = _unet_config(resolved)
    extractor = FeatureExtractor()
    result = train_inpainting(images, config, unet_config, extractor)
    os.makedirs(args.out_dir, exist_ok=True)
    best = os.path.join(args.out_dir, "inpaint_best.ckpt")
    final = os.path.join(args.out_dir, "inpaint_final.ckpt")
    log_path = os.path.join(args.out_dir, "inpaint_runlog.jsonl")
    save_model(best, result.best_params, extractor=extractor)
    save_model(final, result.params, adam_state=result.adam_state, extractor=extractor)
    result.run_log.to_jsonl(log_path)
    _write_manifest(args.out_dir, "train-inpaint", resolved,
                    {"images": len(images)},
                    {"best": best, "final": final, "runlog": log_path,
                     "best_val": result.best_val,
                     "loss_drop": loss_drop(result.run_log)})
    print(f"best validation loss {result.best_val:.5f}; "
          f"loss drop {loss_drop(result.run_log):.3f}")
    return 0


def cmd_finetune_hdr(args):
    resolved = _resolve(args, _TRAIN_DEFAULTS)
    records = formats.read_dataset_shard(args.shard)
    init_params = None
    extractor = None
    if args.init:
        model = load_model(args.init)
        init_params, extractor = model.params, model.extractor
        unet_config = model.config
    else:
        unet_config = _unet_config(resolved)
    extractor = extractor or FeatureExtractor()
    config = _train_config(resolved, "hdr_finetune")
    result = finetune_hdr(records, config, unet_config, extractor,
                          init_params=init_params)
    os.makedirs(args.out_dir, exist_ok=True)
    best = os.path.join(args.out_dir, "hdr_best.ckpt")
    final = os.path.join(args.out_dir, "hdr_final.ckpt")
    log_path = os.path.join(args.out_dir, "hdr_runlog.jsonl")
    save_model(best, result.best_params, extractor=extractor)
    save_model(final, result.params, adam_state=result.adam_state, extractor=extractor)
    result.run_log.to_jsonl(log_path)
    _write_manifest(args.out_dir, "finetune-hdr", resolved,
                    {"shard": args.shard, "records": len(records),
                     "init": args.init},
                    {"best": best, "final": final, "runlog": log_path,
                     "best_val": result.best_val})
    print(f"best validation masked mse {result.best_val:.6f}")
    return 0


_RECON_DEFAULTS = {"alpha": 0.96, "mode": "FMask", "gamma": 2.0, "seed": 0}


def cmd_reconstruct(args):
    resolved = _resolve(args, _RECON_DEFAULTS)
    ldr = formats.read_ldr(args.input)
    model = load_model(args.checkpoint)
    mask = exposure_mask(ldr.pixels, resolved["alpha"])
    y, _ = unet_forward(ldr.pixels[None], mask[None], model.params, model.config,
                        mode=resolved["mode"])
    hdr = compose_hdr(ldr, mask, y.data[0], gamma=resolved["gamma"])
    formats.write_pfm(args.output, hdr)
    out_dir = os.path.dirname(os.path.abspath(args.output))
    _write_manifest(out_dir, "reconstruct", resolved,
                    {"ldr": args.input, "checkpoint": args.checkpoint},
                    {"hdr": args.output})
    return 0


_EVAL_DEFAULTS = {"patch": 64, "per_image": 8, "threshold": 0.0, "alpha": 0.96,
                  "percentile": 93.0, "bins": 10, "seed": 0, "mode": "FMask",
                  "dump_images": 0}


def cmd_eval(args):
    resolved = _resolve(args, _EVAL_DEFAULTS)
    model = load_model(args.checkpoint)
    if args.shard:
        records = formats.read_dataset_shard(args.shard)
        source = {"shard": args.shard}
    else:
        images = _load_hdr_dir(args.hdr_dir)
        cfg = SamplerConfig(patch_size=int(resolved["patch"]),
                            patches_per_image=int(resolved["per_image"]),
                            metric_threshold=resolved["threshold"],
                            alpha=resolved["alpha"],
                            fixed_percentile=resolved["percentile"])
        records = []
        for i, (name, hdr) in enumerate(images):
            records.extend(sample_patches(hdr, cfg, seed=int(resolved["seed"]) + i,
                                          image_id=name))
        source = {"hdr_dir": args.hdr_dir, "images": len(images)}
    report = evaluate(records, model.params, model.config,
                      mode=resolved["mode"], bins=int(resolved["bins"]))
    os.makedirs(args.out_dir, exist_ok=True)
    table_path = os.path.join(args.out_dir, "metrics.tsv")
    with open(table_path, "w") as fh:
        fh.write(report.to_text())
    outputs = {"metrics": table_path, "records": len(records)}
    if int(resolved["dump_images"]):
        for i, rec in enumerate(report.per_record):
            path = os.path.join(args.out_dir, f"recon_{i:04d}.pfm")
            formats.write_pfm(path, rec["reconstruction"])
        outputs["reconstructions"] = len(report.per_record)
    _write_manifest(args.out_dir, "eval", resolved, source, outputs)
    print(report.to_text(), end="")
    return 0


_ABLATE_DEFAULTS = {"seeds": "0,1,2", "pretrain_steps": 240, "finetune_steps": 240,
                    "textures": 32, "train_scenes": 14, "test_scenes": 8,
                    "patch": 64, "per_image": 8, "threshold": 0.85,
                    "batch": 4, "steps_per_epoch": 40, "seed": 0}


def cmd_ablate(args):
    resolved = _resolve(args, _ABLATE_DEFAULTS)
    seeds = tuple(int(s) for s in str(resolved["seeds"]).split(","))
    scfg = SamplerConfig(patch_size=int(resolved["patch"]),
                         patches_per_image=int(resolved["per_image"]),
                         metric_threshold=resolved["threshold"])
    if args.texture_dir:
        textures = _load_texture_dir(args.texture_dir)
    else:
        textures = make_texture_corpus(int(resolved["textures"]), seed=11)
    if args.hdr_dir:
        scenes = _load_hdr_dir(args.hdr_dir)
        split = max(1, len(scenes) * 2 // 3)
        train_scenes, test_scenes = scenes[:split], scenes[split:]
    else:
        train_scenes = [(f"train{i}", s) for i, s in enumerate(
            make_hdr_corpus(int(resolved["train_scenes"]), seed=21, size=(96, 96)))]
        test_scenes = [(f"test{i}", s) for i, s in enumerate(
            make_hdr_corpus(int(resolved["test_scenes"]), seed=77, size=(96, 96)))]
    train_records, test_records = [], []
    for i, (name, scene) in enumerate(train_scenes):
        train_records.extend(sample_patches(scene, scfg, seed=100 + i, image_id=name))
    for i, (name, scene) in enumerate(test_scenes):
        test_records.extend(sample_patches(scene, scfg, seed=900 + i, image_id=name))
    if not train_records or not test_records:
        raise ContractError("ablation corpora produced no records")
    base = TrainConfig(batch_size=int(resolved["batch"]),
                       steps_per_epoch=int(resolved["steps_per_epoch"]),
                       max_val_items=8)
    results = run_ablation(textures, train_records, test_records, seeds,
                           pretrain_steps=int(resolved["pretrain_steps"]),
                           finetune_steps=int(resolved["finetune_steps"]),
                           base_config=base)
    os.makedirs(args.out_dir, exist_ok=True)
    table_path = os.path.join(args.out_dir, "ablation.tsv")
    with open(table_path, "w") as fh:
        fh.write("mode\tpretrain\tseed\ttest_masked_mse\n")
        for (mode, pre, seed), res in sorted(results.items()):
            fh.write(f"{mode}\t{pre}\t{seed}\t{res['test_masked_mse']:.6f}\n")
    _write_manifest(args.out_dir, "ablate", resolved,
                    {"train_records": len(train_records),
                     "test_records": len(test_records)},
                    {"table": table_path})
    with open(table_path) as fh:
        print(fh.read(), end="")
    return 0


_GRADCHECK_DEFAULTS = {"seed": 7, "epsilon": 1e-4, "threshold": 1e-3}


def cmd_gradcheck(args):
    resolved = _resolve(args, _GRADCHECK_DEFAULTS)
    seed = int(resolved["seed"])
    rng = np.random.default_rng(seed)
    config = UNetConfig(levels=2, base_channels=4)
    arrays64 = {k: v.astype(np.float64) for k, v in
                initialize_parameters(config, seed).named_arrays().items()}
    params = UNetParameters.from_arrays(config, arrays64)
    extractor = FeatureExtractor(channels=(4, 8), seed=seed)
    x = rng.random((1, 3, 8, 8))
    mask = exposure_mask(x, 0.9)
    hdr = rng.random((1, 3, 8, 8)) * 4.0
    inputs = list(params.named_tensors().values())
    _, stack = unet_forward(x, mask, params, config)
    frozen = dict(stack)

    def loss_fn(*tensors):
        y, _ = unet_forward(x, mask, params, config, frozen_masks=frozen)
        return total_loss(y, hdr, mask, extractor, LossWeights()).node

    err = check_gradients(loss_fn, inputs, epsilon=resolved["epsilon"],
                          max_coords=4, rng=np.random.default_rng(seed + 1))
    print(f"max relative gradient error: {err:.3e} (threshold {resolved['threshold']:g})")
    if not err < resolved["threshold"]:
        raise DomainError(f"gradient check failed: {err:.3e} >= {resolved['threshold']:g}")
    return 0


def cmd_formats(args):
    import tempfile

    rng = np.random.default_rng(0)
    failures = []
    with tempfile.TemporaryDirectory() as tmp:
        img = (rng.random((3, 6, 5)) * 50).astype(np.float32)
        p = os.path.join(tmp, "t.pfm")
        formats.write_pfm(p, img)
        if not np.array_equal(formats.read_pfm(p), img):
            failures.append("pfm round trip")
        ldr = (rng.integers(0, 256, size=(3, 4, 4)) / 255).astype(np.float32)
        q = os.path.join(tmp, "t.ppm")
        formats.write_ldr(q, ldr)
        if not np.array_equal(formats.read_ldr(q).pixels, ldr):
            failures.append("ppm round trip")
        arrays = {"enc0.weight": rng.normal(size=(2, 3, 3, 3)).astype(np.float32),
                  "enc0.bias": np.zeros(2, dtype=np.float32)}
        c = os.path.join(tmp, "t.ckpt")
        formats.save_checkpoint(c, params=arrays)
        loaded = formats.load_checkpoint(c)
        if not all(np.array_equal(loaded[k], v) for k, v in arrays.items()):
            failures.append("checkpoint round trip")
        scene = make_hdr_corpus(1, seed=5, size=(96, 96))[0]
        records = sample_patches(scene, SamplerConfig(
            patch_size=32, patches_per_image=8, metric_threshold=0.0), seed=1,
            image_id="self-test")
        if records:
            s = os.path.join(tmp, "t.mds")
            formats.write_dataset_shard(s, records)
            back = formats.read_dataset_shard(s)
            if len(back) != len(records):
                failures.append("shard round trip")
        else:
            failures.append("shard self-test produced no records")
    if failures:
        raise ContractError("format self-test failed: " + ", ".join(failures))
    print("all format round trips passed")
    return 0


# -- parser wiring ---------------------------------------------------------------


def _build_parser():
    parser = _Parser(prog="hdrmask", description=__doc__)
    parser.add_argument("--version", action="version", version=f"hdrmask {__version__}")
    sub = parser.add_subparsers(dest="command")

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON config file (defaults < file < flags)")
        return p

    p = add("simulate-ldr", cmd_simulate_ldr, help="expose an HDR image to LDR")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--percentile", type=float)
    p.add_argument("--bits", type=int)
    p.add_argument("--curve", choices=("gamma", "sigmoid"))
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)

    p = add("mask", cmd_mask, help="exposure mask and per-layer mask dumps")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--alpha", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--seed", type=int)

    p = add("sample-patches", cmd_sample_patches, help="build a training shard")
    p.add_argument("--in-dir", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--patch", type=int)
    p.add_argument("--per-image", dest="per_image", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--sigma-color", dest="sigma_color", type=float)
    p.add_argument("--sigma-space", dest="sigma_space", type=float)
    p.add_argument("--percentile", type=float)
    p.add_argument("--seed", type=int)

    p = add("gen-inpaint-masks", cmd_gen_inpaint_masks, help="hole masks for pre-training")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--min-coverage", dest="min_coverage", type=float)
    p.add_argument("--max-coverage", dest="max_coverage", type=float)
    p.add_argument("--seed", type=int)

    for name, func in (("train-inpaint", cmd_train_inpaint),
                       ("finetune-hdr", cmd_finetune_hdr)):
        p = add(name, func, help=f"{name.replace('-', ' ')} stage")
        p.add_argument("--out-dir", required=True)
        if name == "train-inpaint":
            p.add_argument("--texture-dir")
            p.add_argument("--procedural", type=int)
        else:
            p.add_argument("--shard", required=True)
            p.add_argument("--init", help="checkpoint to fine-tune from")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=MASKING_MODES)
        p.add_argument("--levels", type=int)
        p.add_argument("--base-channels", dest="base_channels", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--factor", type=float)
        p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)

    p = add("reconstruct", cmd_reconstruct, help="LDR to HDR with a checkpoint")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=MASKING_MODES)
    p.add_argument("--gamma", type=float)

    p = add("eval", cmd_eval, help="metrics table binned by saturation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--shard")
    p.add_argument("--hdr-dir")
    p.add_argument("--patch", type=int)
    p.add_argument("--per-image", dest="per_image", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--percentile", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--mode", choices=MASKING_MODES)
    p.add_argument("--dump-images", dest="dump_images", type=int)
    p.add_argument("--seed", type=int)

    p = add("ablate", cmd_ablate, help="masking/pre-training matrix")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--texture-dir")
    p.add_argument("--hdr-dir")
    p.add_argument("--seeds")
    p.add_argument("--pretrain-steps", dest="pretrain_steps", type=int)
    p.add_argument("--finetune-steps", dest="finetune_steps", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)

    p = add("gradcheck", cmd_gradcheck, help="finite-difference gradient audit")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)

    p = add("formats", cmd_formats, help="file format round-trip self-test")
    return parser


def dispatch(argv):
    """Run one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args) or 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except HdrMaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(dispatch(sys.argv[1:]))
