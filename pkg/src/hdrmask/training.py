"""Two-stage optimization: inpainting pre-training, then HDR fine-tuning.

Each step derives its batch selection and mask randomness from
(seed, stage, absolute step index), so a run resumed from a checkpoint
replays the exact same stream and reproduces the next step bit for bit.
One worker owns the parameters; validation runs between steps on a
held-out split keyed by source image.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError
from .losses import (FeatureExtractor, InpaintingLossWeights, LossWeights,
                     inpainting_loss, total_loss)
from .network import (MODE_FEATURE_MASK, MASKING_MODES, UNetConfig,
                      UNetParameters, layer_plan, unet_forward)
from .pipeline import (compose_hdr, masked_region_mse_gamma, mse_gamma,
                       saturation_percentage)
from .sampler import generate_inpainting_mask
from .tensor import AdamState

STAGE_INPAINTING = "inpainting"
STAGE_HDR = "hdr_finetune"

_STAGE_TAG = {STAGE_INPAINTING: 1, STAGE_HDR: 2}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = STAGE_HDR
    lr: float = 2e-4
    batch_size: int = 4
    plateau_patience: int = 3
    plateau_factor: float = 2.0
    max_steps: int = 500
    seed: int = 0
    masking_mode: str = MODE_FEATURE_MASK
    pretrain_source: str = "inpainting"  # inpainting | hdr | none
    val_fraction: float = 0.1
    steps_per_epoch: int | None = None
    lr_floor: float = 1e-6
    improvement_rel: float = 0.01
    max_val_items: int = 16
    carry_adam_state: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise DomainError("lr must be positive")
        if self.batch_size < 1:
            raise DomainError("batch size must be >= 1")
        if self.plateau_factor <= 1:
            raise DomainError("plateau factor must exceed 1")
        if self.masking_mode not in MASKING_MODES:
            raise DomainError(f"unknown masking mode {self.masking_mode!r}")


@dataclass
class RunLog:
    """Structured trace of one optimization run."""

    steps: list = field(default_factory=list)        # dicts: step, stage, losses, lr
    validations: list = field(default_factory=list)  # dicts: epoch, step, value
    lr_history: list = field(default_factory=list)
    wall_clock: float = 0.0

    def log_step(self, step, stage, losses, lr):
        if self.steps and step <= self.steps[-1]["step"]:
            raise ContractError("step indices must increase")
        self.steps.append({"step": step, "stage": stage, "losses": losses, "lr": lr})
        if not self.lr_history or self.lr_history[-1] != lr:
            if self.lr_history and lr > self.lr_history[-1]:
                raise ContractError("lr history must be non-increasing")
            self.lr_history.append(lr)

    def log_validation(self, epoch, step, value):
        self.validations.append({"epoch": epoch, "step": step, "value": value})

    def to_jsonl(self, path):
        import json
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"type": "step", **rec}) + "\n")
            for rec in self.validations:
                fh.write(json.dumps({"type": "val", **rec}) + "\n")
            fh.write(json.dumps({"type": "summary", "lr_history": self.lr_history,
                                 "wall_clock": self.wall_clock}) + "\n")

    @classmethod
    def from_jsonl(cls, path):
        import json
        log = cls()
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                kind = rec.pop("type")
                if kind == "step":
                    log.steps.append(rec)
                elif kind == "val":
                    log.validations.append(rec)
                else:
                    log.lr_history = rec.get("lr_history", [])
                    log.wall_clock = rec.get("wall_clock", 0.0)
        return log


@dataclass
class TrainResult:
    params: UNetParameters          # parameters at the last step
    best_params: UNetParameters     # parameters at the best validation
    adam_state: AdamState
    run_log: RunLog
    best_val: float


class PlateauScheduler:
    """Cut the learning rate when validation stops improving.

    An epoch counts as stalled when it fails to better the best seen value
    by more than ``improvement_rel`` (the first epoch sets the baseline and
    counts as stalled). After ``patience`` consecutive stalls the rate is
    divided by ``factor``, never below ``floor``.
    """

    def __init__(self, lr, patience=3, factor=2.0, improvement_rel=0.01, floor=1e-6):
        if patience < 1:
            raise DomainError("patience must be >= 1")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.improvement_rel = improvement_rel
        self.floor = floor
        self.best = math.inf
        self.stalled = 0

    def update(self, value):
        if self.best is not math.inf and value < self.best * (1.0 - self.improvement_rel):
            self.best = value
            self.stalled = 0
        else:
            self.best = min(self.best, value)
            self.stalled += 1
        if self.stalled >= self.patience:
            self.lr = max(self.lr / self.factor, self.floor)
            self.stalled = 0
        return self.lr


def plateau_scheduler(validation_history, patience, factor=2.0, lr=2e-4,
                      improvement_rel=0.01, floor=1e-6):
    """Replay a validation history through the plateau rule; returns the final lr."""
    sched = PlateauScheduler(lr, patience, factor, improvement_rel, floor)
    for value in validation_history:
        sched.update(value)
    return sched.lr


def initialize_parameters(config, seed=0):
    """Xavier-uniform weights (zero biases), deterministic per seed."""
    rng = np.random.default_rng(seed)
    arrays = {}
    k = config.kernel_size
    for spec in layer_plan(config):
        fan_in = spec.in_channels * k * k
        fan_out = spec.out_channels * k * k
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"{spec.name}.weight"] = rng.uniform(
            -bound, bound, size=(spec.out_channels, spec.in_channels, k, k)).astype(np.float32)
        arrays[f"{spec.name}.bias"] = np.zeros(spec.out_channels, dtype=np.float32)
    return UNetParameters.from_arrays(config, arrays)


def _step_rng(seed, stage, step, extra=0):
    return np.random.default_rng(np.random.SeedSequence([seed, _STAGE_TAG[stage], step, extra]))


def _split_by_id(items, ids, val_fraction):
    unique = sorted(set(ids))
    n_val = max(1, int(round(len(unique) * val_fraction))) if len(unique) > 1 else 0
    val_ids = set(unique[::max(1, len(unique) // n_val)][:n_val]) if n_val else set()
    train = [it for it, i in zip(items, ids) if i not in val_ids]
    val = [it for it, i in zip(items, ids) if i in val_ids]
    if not train:
        train, val = val, []
    return train, val


def _grad_arrays(params_map):
    return {name: t.grad if t.grad is not None else np.zeros_like(t.data)
            for name, t in params_map.items()}


def _optimize(stage, config, unet_config, params, adam, extractor, batch_fn,
              val_fn, start_step=0):
    """Shared optimization loop for both stages."""
    run_log = RunLog()
    sched = PlateauScheduler(config.lr, config.plateau_patience, config.plateau_factor,
                             config.improvement_rel, config.lr_floor)
    params_map = params.named_tensors()
    spe = config.steps_per_epoch or 50
    best_val = math.inf
    best_params = params.copy()
    lr = sched.lr
    t0 = time.monotonic()
    for step in range(start_step + 1, config.max_steps + 1):
        report = batch_fn(step, params)
        for t in params_map.values():
            t.zero_grad()
        T.backward(report.node, parameters=params_map.values())
        T.adam_step(params_map, _grad_arrays(params_map), adam, lr)
        if not math.isfinite(report.total):
            raise ContractError(f"non-finite loss at step {step}")
        run_log.log_step(step, stage, dict(report.weighted), lr)
        if step % spe == 0 or step == config.max_steps:
            epoch = (step + spe - 1) // spe
            value = val_fn(params)
            run_log.log_validation(epoch, step, value)
            if value < best_val:
                best_val = value
                best_params = params.copy()
            lr = sched.update(value)
    run_log.wall_clock = time.monotonic() - t0
    if not math.isfinite(best_val):
        best_params = params.copy()
    return TrainResult(params, best_params, adam, run_log, best_val)


# -- inpainting pre-training -------------------------------------------------


def train_inpainting(images, config, unet_config=None, extractor=None,
                     init_params=None, init_adam=None, start_step=0):
    """Minimize the inpainting objective on (image * mask -> image) pairs.

    ``images`` is a list of (3,H,W) arrays in [0,1]. Hole masks are binary
    and regenerated per step from the run seed. Checkpoints the best
    validation loss.
    """
    images = [np.asarray(im.pixels if hasattr(im, "pixels") else im, dtype=np.float32)
              for im in images]
    if not images:
        raise ContractError("inpainting dataset is empty")
    unet_config = unet_config or UNetConfig()
    extractor = extractor or FeatureExtractor()
    cfg = replace(config, stage=STAGE_INPAINTING)
    params = init_params if init_params is not None else \
        initialize_parameters(unet_config, cfg.seed)
    adam = init_adam if init_adam is not None else AdamState()
    train, val = _split_by_id(images, list(range(len(images))), cfg.val_fraction)
    weights = InpaintingLossWeights()

    def batch_fn(step, params):
        rng = _step_rng(cfg.seed, STAGE_INPAINTING, step)
        idx = rng.integers(0, len(train), size=cfg.batch_size)
        truth = np.stack([train[i] for i in idx])
        masks = np.stack([
            generate_inpainting_mask(train[i].shape,
                                     seed=int(rng.integers(0, 2 ** 31)))
            for i in idx])
        pred, _ = unet_forward(truth * masks, masks, params, unet_config,
                               mode=cfg.masking_mode)
        return inpainting_loss(pred, truth, masks, extractor, weights)

    def val_fn(params):
        if not val:
            return math.inf
        losses = []
        for j, img in enumerate(val[:cfg.max_val_items]):
            mask = generate_inpainting_mask(img.shape, seed=int(
                np.random.default_rng(np.random.SeedSequence([cfg.seed, 99, j])).integers(0, 2 ** 31)))
            pred, _ = unet_forward((img * mask)[None], mask[None], params, unet_config,
                                   mode=cfg.masking_mode)
            losses.append(inpainting_loss(pred, img[None], mask[None], extractor,
                                          weights).total)
        return float(np.mean(losses))

    return _optimize(STAGE_INPAINTING, cfg, unet_config, params, adam, extractor,
                     batch_fn, val_fn, start_step)


# -- HDR fine-tuning -----------------------------------------------------------


def finetune_hdr(records, config, unet_config=None, extractor=None,
                 init_params=None, init_adam=None, start_step=0,
                 loss_weights=None):
    """Minimize the HDR objective on sampled patch records.

    Validation tracks display-encoded MSE over saturated content; the best
    validation checkpoint is kept. The split holds out whole source images
    so neighboring patches cannot leak across it.
    """
    records = list(records)
    if not records:
        raise ContractError("HDR dataset is empty")
    unet_config = unet_config or UNetConfig()
    extractor = extractor or FeatureExtractor()
    cfg = replace(config, stage=STAGE_HDR)
    params = init_params if init_params is not None else \
        initialize_parameters(unet_config, cfg.seed)
    adam = init_adam if init_adam is not None else AdamState()
    weights = loss_weights or LossWeights()
    train, val = _split_by_id(records, [r.image_id for r in records], cfg.val_fraction)

    def batch_fn(step, params):
        rng = _step_rng(cfg.seed, STAGE_HDR, step)
        idx = rng.integers(0, len(train), size=cfg.batch_size)
        batch = [train[i] for i in idx]
        x = np.stack([r.ldr.pixels for r in batch]).astype(np.float32)
        m = np.stack([r.mask for r in batch]).astype(np.float32)
        h = np.stack([r.hdr.pixels for r in batch]).astype(np.float32)
        pred, _ = unet_forward(x, m, params, unet_config, mode=cfg.masking_mode)
        return total_loss(pred, h, m, extractor, weights)

    def val_fn(params):
        pool = val if val else train
        return validation_mse(pool[:cfg.max_val_items], params, unet_config,
                              cfg.masking_mode)

    return _optimize(STAGE_HDR, cfg, unet_config, params, adam, extractor,
                     batch_fn, val_fn, start_step)


def predict_log_hdr(record, params, unet_config, mode=MODE_FEATURE_MASK):
    pred, _ = unet_forward(record.ldr.pixels[None].astype(np.float32),
                           record.mask[None].astype(np.float32),
                           params, unet_config, mode=mode)
    return pred.data[0]


def validation_mse(records, params, unet_config, mode=MODE_FEATURE_MASK):
    """Mean masked-region display MSE of reconstructions over records.

    A diverged prediction (exp overflow in the composition) scores inf
    rather than aborting the run, so the scheduler and best-checkpoint
    logic see it as what it is: a very bad epoch.
    """
    from .errors import NumericError

    scores = []
    for rec in records:
        y = predict_log_hdr(rec, params, unet_config, mode)
        try:
            recon = compose_hdr(rec.ldr, rec.mask, y)
        except NumericError:
            return math.inf
        score = masked_region_mse_gamma(recon.pixels, rec.hdr.pixels, rec.mask)
        if math.isfinite(score):
            scores.append(score)
    return float(np.mean(scores)) if scores else math.inf


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalRow:
    label: str
    count: int
    mean_mse: float
    mean_masked_mse: float


@dataclass
class EvalReport:
    rows: list
    per_record: list

    def to_text(self):
        lines = ["bin\tcount\tmse_gamma\tmasked_mse_gamma"]
        for row in self.rows:
            lines.append(f"{row.label}\t{row.count}\t{row.mean_mse:.6g}\t{row.mean_masked_mse:.6g}")
        return "\n".join(lines) + "\n"


def evaluate(records, params=None, unet_config=None, mode=MODE_FEATURE_MASK,
             predictor=None, bins=10):
    """Score reconstructions on a test set, binned by input saturation.

    ``predictor`` overrides the network: a callable mapping a PatchRecord
    to a log-domain prediction array (used for oracle checks). The report
    has one row per saturation decile plus an "overall" row.
    """
    records = list(records)
    if not records:
        raise ContractError("evaluation set is empty")
    if predictor is None:
        if params is None:
            raise ContractError("evaluate needs params or an explicit predictor")
        unet_config = unet_config or params.config

        def predictor(rec):
            return predict_log_hdr(rec, params, unet_config, mode)

    per_record = []
    for rec in records:
        y = predictor(rec)
        recon = compose_hdr(rec.ldr, rec.mask, y)
        sat = saturation_percentage(rec.ldr)
        per_record.append({
            "image_id": rec.image_id,
            "offset": tuple(rec.offset),
            "saturation_pct": sat,
            "mse": mse_gamma(recon.pixels, rec.hdr.pixels),
            "masked_mse": masked_region_mse_gamma(recon.pixels, rec.hdr.pixels, rec.mask),
            "reconstruction": recon,
        })
    rows = []
    edges = np.linspace(0.0, 100.0, bins + 1)
    for b in range(bins):
        lo, hi = edges[b], edges[b + 1]
        members = [r for r in per_record
                   if (lo <= r["saturation_pct"] < hi) or (b == bins - 1 and r["saturation_pct"] == hi)]
        rows.append(EvalRow(
            f"{lo:.0f}-{hi:.0f}%",
            len(members),
            float(np.mean([m["mse"] for m in members])) if members else float("nan"),
            _nanmean([m["masked_mse"] for m in members]),
        ))
    rows.append(EvalRow("overall", len(per_record),
                        float(np.mean([m["mse"] for m in per_record])),
                        _nanmean([m["masked_mse"] for m in per_record])))
    return EvalReport(rows, per_record)


def _nanmean(values):
    vals = [v for v in values if math.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


# -- ablation harness ------------------------------------------------------------


def run_ablation(texture_images, train_records, test_records, seeds,
                 unet_config=None, extractor=None, pretrain_steps=300,
                 finetune_steps=300, base_config=None):
    """Masking-mode / pre-training matrix at desk scale.

    Runs FMask, IMask, and SConv with inpainting pre-training, plus FMask
    with the smooth-HDR pre-training diet, for each seed. Returns
    ``{(mode, pretrain, seed): result dict}`` where each entry carries the
    held-out masked-region MSE and the per-stage loss trajectories.
    """
    unet_config = unet_config or UNetConfig()
    extractor = extractor or FeatureExtractor()
    base = base_config or TrainConfig()
    jobs = [("FMask", "inpainting"), ("IMask", "inpainting"),
            ("SConv", "inpainting"), ("FMask", "hdr")]
    results = {}
    for mode, pretrain in jobs:
        for seed in seeds:
            cfg = replace(base, seed=seed, masking_mode=mode)
            if pretrain == "inpainting":
                pre = train_inpainting(
                    texture_images, replace(cfg, max_steps=pretrain_steps),
                    unet_config, extractor)
                init = pre.best_params
                pre_log = pre.run_log
            elif pretrain == "hdr":
                pre_records, _ = _pretrain_hdr_records(seed)
                pre = finetune_hdr(pre_records, replace(cfg, max_steps=pretrain_steps),
                                   unet_config, extractor)
                init = pre.best_params
                pre_log = pre.run_log
            else:
                init, pre_log = None, None
            fine = finetune_hdr(train_records, replace(cfg, max_steps=finetune_steps),
                                unet_config, extractor, init_params=init)
            test_mse = validation_mse(test_records, fine.best_params, unet_config, mode)
            results[(mode, pretrain, seed)] = {
                "test_masked_mse": test_mse,
                "pretrain_log": pre_log,
                "finetune_log": fine.run_log,
            }
    return results


def _pretrain_hdr_records(seed):
    """Smooth-highlight HDR diet standing in for ordinary-photo pre-training."""
    from .sampler import SamplerConfig, sample_patches
    from .synthetic import make_hdr_corpus

    scenes = make_hdr_corpus(12, seed=seed + 1000, textured_highlight=False)
    cfg = SamplerConfig(patch_size=64, patches_per_image=6, metric_threshold=0.0)
    records = []
    for i, scene in enumerate(scenes):
        records.extend(sample_patches(scene, cfg, seed=seed * 997 + i,
                                      image_id=f"smooth{i}"))
    return records, scenes


def loss_drop(run_log, head=25, tail=25):
    """Ratio of late to early training loss (< 0.5 means it halved)."""
    totals = [sum(rec["losses"].values()) for rec in run_log.steps]
    if len(totals) < head + tail:
        head = tail = max(1, len(totals) // 4)
    early = float(np.mean(totals[:head]))
    late = float(np.mean(totals[-tail:]))
    return late / max(early, 1e-12)


# -- model persistence -------------------------------------------------------


@dataclass
class LoadedModel:
    params: UNetParameters
    config: UNetConfig
    adam_state: AdamState | None
    extractor: FeatureExtractor | None


def save_model(path, params, adam_state=None, extractor=None):
    """Checkpoint parameters (plus optimizer state and extractor weights)."""
    from . import formats

    cfg = params.config
    extra = {"meta.config": np.array(
        [cfg.levels, cfg.base_channels, cfg.kernel_size,
         cfg.in_channels, cfg.out_channels], dtype=np.float32)}
    formats.save_checkpoint(path, params=params, adam_state=adam_state,
                            extractor=extractor, extra=extra)


def load_model(path, expected_config=None):
    """Load a checkpoint, validating its manifest against the target config."""
    from . import formats

    arrays = formats.load_checkpoint(path)
    param_arrays, adam_arrays, extractor_arrays, extra = \
        formats.split_checkpoint_arrays(arrays)
    if expected_config is not None:
        config = expected_config
    elif "meta.config" in extra:
        levels, base, k, cin, cout = (int(v) for v in extra["meta.config"])
        config = UNetConfig(levels=levels, base_channels=base, kernel_size=k,
                            in_channels=cin, out_channels=cout)
    else:
        raise ContractError("checkpoint lacks a config record; pass expected_config")
    formats.validate_param_manifest(param_arrays, config)
    params = UNetParameters.from_arrays(config, param_arrays)
    adam_state = None
    if adam_arrays:
        state = AdamState(step=int(adam_arrays.get("step", [0])[0]))
        for key, arr in adam_arrays.items():
            if key.startswith("m."):
                state.m[key[2:]] = arr
            elif key.startswith("v."):
                state.v[key[2:]] = arr
        adam_state = state
    extractor = FeatureExtractor(arrays=extractor_arrays) if extractor_arrays else None
    return LoadedModel(params, config, adam_state, extractor)
