"""Training loops: synthetic pretraining, teacher-guided finetuning on
translated data, patch sampling, the halving learning-rate schedule,
evaluation, and bit-exact checkpoint bundles.

All stochastic choices flow through one numpy generator whose state is
serialized into every bundle, so a run resumed from a bundle reproduces
the uninterrupted run's parameter and loss streams exactly (single
worker).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import checkpoint as ckpt
from . import haze_model, losses, metrics
from .errors import ConfigError, InputError, TrainingDiverged
from .network import AttentionGridNet, GridConfig, ParameterStore, build

TRAIN_MODES = ("pretrain", "finetune_distill", "finetune_plain")


@dataclass
class TrainConfig:
    """Optimization schedule and loop parameters.

    Desk-scale defaults keep the full pipeline in the minutes range;
    production-scale values (epochs 100, batch 16, patch 240) remain
    selectable.
    """

    epochs: int = 5
    batch_size: int = 4
    patch: int = 48
    lr0: float = 1e-3
    lr_halving_period: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss_weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    mode: str = "pretrain"
    val_fraction: float = 0.1
    extractor_seed: int = 0
    extractor_weights: str | None = None

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = losses.LossWeights(**self.loss_weights)
        if self.patch % 4 != 0:
            raise ConfigError(f"patch must be divisible by 4, got {self.patch}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.lr_halving_period < 1:
            raise ConfigError("lr_halving_period must be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")

    def to_dict(self):
        d = asdict(self)
        d["loss_weights"] = asdict(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def fingerprint(self):
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class RunState:
    """Mutable training position, serialized into every bundle."""

    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    epoch_losses: list = field(default_factory=list)
    rng_state: dict | None = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class CheckpointBundle:
    """Everything needed to resume: parameters, moments, run state, configs."""

    grid_config: GridConfig
    train_config: TrainConfig
    params: dict
    opt_state: dict
    run_state: RunState

    @property
    def fingerprint(self):
        return self.grid_config.fingerprint()


def lr_schedule(epoch, config):
    """lr0 halved every lr_halving_period epochs."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return config.lr0 * 0.5 ** (epoch // config.lr_halving_period)


def sample_patches(samples, patch, batch_size, rng):
    """Draw aligned random crops: (hazy, clear) float32 batches (B, 3, p, p)."""
    n = len(samples)
    if n == 0:
        raise InputError("cannot sample from an empty dataset")
    idx = rng.integers(0, n, size=batch_size)
    hazy = np.empty((batch_size, 3, patch, patch), dtype=np.float32)
    clear = np.empty_like(hazy)
    for k, i in enumerate(idx):
        s = samples[int(i)]
        h, w = s.hazy.shape[-2:]
        if h < patch or w < patch:
            raise InputError(f"image {h}x{w} smaller than patch {patch}")
        y0 = int(rng.integers(0, h - patch + 1))
        x0 = int(rng.integers(0, w - patch + 1))
        hazy[k] = s.hazy[:, y0 : y0 + patch, x0 : x0 + patch]
        clear[k] = s.clear[:, y0 : y0 + patch, x0 : x0 + patch]
    return hazy, clear


def _make_optimizer(model, config):
    return torch.optim.Adam(
        model.parameters(),
        lr=config.lr0,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )


def _snapshot_optimizer(opt, store):
    state = {}
    param_to_name = {id(p): name for name, p in store.params.items()}
    for p, st in opt.state.items():
        name = param_to_name.get(id(p))
        if name is None or not st:
            continue
        state[name] = {
            "step": float(st["step"]),
            "exp_avg": st["exp_avg"].detach().cpu().numpy().copy(),
            "exp_avg_sq": st["exp_avg_sq"].detach().cpu().numpy().copy(),
        }
    return state


def _restore_optimizer(opt, store, opt_state):
    for name, p in store.params.items():
        st = opt_state.get(name)
        if st is None:
            continue
        opt.state[p] = {
            "step": torch.tensor(st["step"], dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.asarray(st["exp_avg"])).to(p.dtype).clone(),
            "exp_avg_sq": torch.from_numpy(np.asarray(st["exp_avg_sq"])).to(p.dtype).clone(),
        }


def _make_bundle(model, store, opt, config, run_state, rng):
    run_state.rng_state = rng.bit_generator.state
    return CheckpointBundle(
        grid_config=model.config,
        train_config=config,
        params=store.to_arrays(),
        opt_state=_snapshot_optimizer(opt, store),
        run_state=RunState(**{**run_state.to_dict()}),
    )


def _model_inputs(model, hazy_np):
    if model.config.variant == "derived_inputs":
        return haze_model.derive_inputs(hazy_np).astype(np.float32)
    return hazy_np


class _StepLogger:
    def __init__(self, log_path=None, records=None):
        self.records = records if records is not None else []
        self._fh = open(log_path, "a") if log_path else None

    def write(self, record):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


def _train_loop(model, store, samples, config, teacher=None, log_path=None, log_records=None, resume=None):
    weights = config.loss_weights
    use_distill = config.mode == "finetune_distill"
    if use_distill and teacher is None:
        raise ConfigError("finetune_distill mode needs a teacher model")

    train, _val = haze_model.split_dataset(samples, config.val_fraction)
    if not train:
        raise InputError("training split is empty")

    extractor = None
    if weights.lambda_perceptual > 0:
        if config.extractor_weights:
            extractor = losses.PerceptualExtractor.load(config.extractor_weights)
        else:
            extractor = losses.PerceptualExtractor(seed=config.extractor_seed)

    opt = _make_optimizer(model, config)
    run = RunState()
    if resume is not None:
        if resume.grid_config.fingerprint() != model.config.fingerprint():
            raise ConfigError("resume bundle was built for a different architecture")
        store.load_arrays(resume.params)
        _restore_optimizer(opt, store, resume.opt_state)
        run = RunState.from_dict(resume.run_state.to_dict())
        rng = np.random.default_rng()
        rng.bit_generator.state = run.rng_state
    else:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))

    if teacher is not None:
        teacher.train(False)
        for p in teacher.parameters():
            if p.requires_grad:
                p.requires_grad_(False)

    steps_per_epoch = max(1, len(train) // config.batch_size)
    logger = _StepLogger(log_path, log_records)
    model.train(True)
    last_good = _make_bundle(model, store, opt, config, run, rng)
    try:
        for epoch in range(run.epoch, config.epochs):
            lr = lr_schedule(epoch, config)
            for group in opt.param_groups:
                group["lr"] = lr
            run.lr = lr
            epoch_total = 0.0
            for _ in range(steps_per_epoch):
                hazy_np, clear_np = sample_patches(train, config.patch, config.batch_size, rng)
                x = torch.from_numpy(_model_inputs(model, hazy_np))
                target = torch.from_numpy(clear_np)

                if use_distill:
                    pred, taps = model(x, want_taps=True)
                    with torch.no_grad():
                        _, teacher_taps = teacher(x, want_taps=True)
                    if len(taps) != len(teacher_taps) or any(
                        s.tensor.shape != t.tensor.shape for s, t in zip(taps, teacher_taps)
                    ):
                        raise ConfigError("student and teacher tap geometries differ")
                    kt = losses.distill_loss(taps, teacher_taps)
                else:
                    pred = model(x)
                    kt = torch.zeros((), dtype=pred.dtype)

                fid = losses.fidelity_loss(pred, target)
                if extractor is not None:
                    perc = losses.perceptual_loss(pred, target, extractor)
                else:
                    perc = torch.zeros((), dtype=pred.dtype)

                total = losses.total_loss(fid, perc, kt, weights)
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss at step {run.step} (epoch {epoch}); "
                        "last good checkpoint retained from the previous epoch",
                        last_bundle=last_good,
                    )
                opt.zero_grad()
                total.backward()
                opt.step()

                run.step += 1
                fid_v, perc_v, kt_v = float(fid), float(perc), float(kt)
                total_v = fid_v + weights.lambda_perceptual * perc_v + weights.lambda_distill * kt_v
                epoch_total += total_v
                logger.write(
                    {
                        "step": run.step,
                        "epoch": epoch,
                        "lr": lr,
                        "loss_fidelity": fid_v,
                        "loss_perceptual": perc_v,
                        "loss_distill": kt_v,
                        "loss_total": total_v,
                    }
                )
            run.epoch = epoch + 1
            run.epoch_losses.append(epoch_total / steps_per_epoch)
            last_good = _make_bundle(model, store, opt, config, run, rng)
    finally:
        model.train(False)
        logger.close()
    return last_good


def pretrain(model, store, samples, config, log_path=None, log_records=None, resume=None):
    """Optimize fidelity plus weighted perceptual loss on synthetic pairs."""
    if config.mode != "pretrain":
        raise ConfigError(f"pretrain() requires mode='pretrain', got {config.mode!r}")
    return _train_loop(
        model, store, samples, config, log_path=log_path, log_records=log_records, resume=resume
    )


def finetune(model, store, samples, config, teacher=None, log_path=None, log_records=None, resume=None):
    """Finetune on translated pairs, optionally matching a frozen teacher.

    In finetune_distill mode the student also minimizes the distance of
    its top-scale fusion taps to those of the teacher evaluated on the
    same batch; the teacher's parameters are never updated. In
    finetune_plain mode the distillation term is dropped (lambda forced
    to zero), which is the no-transfer baseline.
    """
    if config.mode not in ("finetune_distill", "finetune_plain"):
        raise ConfigError(f"finetune() requires a finetune mode, got {config.mode!r}")
    bad = [s.domain for s in samples if s.domain != "translated"]
    if bad:
        raise InputError(
            f"finetuning expects translated-domain samples; found {len(bad)} others"
        )
    if config.mode == "finetune_plain" and config.loss_weights.lambda_distill != 0:
        config = TrainConfig.from_dict(
            {**config.to_dict(), "loss_weights": {**asdict(config.loss_weights), "lambda_distill": 0.0}}
        )
    return _train_loop(
        model,
        store,
        samples,
        config,
        teacher=teacher if config.mode == "finetune_distill" else None,
        log_path=log_path,
        log_records=log_records,
        resume=resume,
    )


def evaluate(model, samples, peak=1.0):
    """Clamped inference over a paired dataset; per-image and mean PSNR/SSIM."""
    report = metrics.MetricReport()
    for i, s in enumerate(samples):
        if hasattr(model, "infer"):
            out = model.infer(s.hazy)
        else:
            out = model(s.hazy)
        report.add(
            s.sample_id or str(i),
            metrics.psnr(out, s.clear, peak=peak),
            metrics.ssim(out, s.clear),
        )
    return report


# ---------------------------------------------------------------------------
# Bundle serialization (shared archive format)
# ---------------------------------------------------------------------------


def save_checkpoint(bundle, path):
    """Write a training bundle (or bare model weights) to a checkpoint zip."""
    meta = {
        "kind": "training_bundle",
        "fingerprint": bundle.fingerprint,
        "grid_config": bundle.grid_config.to_dict(),
        "train_config": bundle.train_config.to_dict(),
        "train_fingerprint": bundle.train_config.fingerprint(),
        "run_state": bundle.run_state.to_dict(),
    }
    arrays = {}
    for name, arr in bundle.params.items():
        arrays[f"param/{name}"] = arr
    for name, st in bundle.opt_state.items():
        arrays[f"adam/{name}/step"] = np.asarray(st["step"], dtype=np.float64)
        arrays[f"adam/{name}/exp_avg"] = st["exp_avg"]
        arrays[f"adam/{name}/exp_avg_sq"] = st["exp_avg_sq"]
    ckpt.save_archive(path, meta, arrays)


def load_checkpoint(path, expect_config=None):
    """Read a bundle back; verifies the fingerprint when expect_config given."""
    meta, arrays = ckpt.load_archive(path)
    if meta.get("kind") != "training_bundle":
        raise ConfigError(f"{path!r} is not a training bundle")
    grid_config = GridConfig.from_dict(meta["grid_config"])
    if expect_config is not None:
        ckpt.verify_fingerprint(meta, expect_config.fingerprint(), "bundle")
    params = {}
    opt_state = {}
    for name, arr in arrays.items():
        if name.startswith("param/"):
            params[name[len("param/") :]] = arr
        elif name.startswith("adam/"):
            rest = name[len("adam/") :]
            pname, key = rest.rsplit("/", 1)
            opt_state.setdefault(pname, {})[key] = arr if key != "step" else float(arr)
    return CheckpointBundle(
        grid_config=grid_config,
        train_config=TrainConfig.from_dict(meta["train_config"]),
        params=params,
        opt_state=opt_state,
        run_state=RunState.from_dict(meta["run_state"]),
    )


def model_from_bundle(bundle, dtype=torch.float32):
    """Rebuild the architecture and load the bundle's parameters into it."""
    model, store = build(bundle.grid_config, seed=0, dtype=dtype)
    store.load_arrays(bundle.params)
    return model, store


def clone_student(teacher_bundle):
    """Fresh model initialized from a teacher bundle's parameters."""
    return model_from_bundle(teacher_bundle)
