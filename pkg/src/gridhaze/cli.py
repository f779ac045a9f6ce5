"""Command-line front end.

One binary, subcommand style:

  gridhaze synth     --out DIR            synthesize a paired hazy/clear dataset
  gridhaze train     DATA --out CKPT      pretrain a model on synthetic pairs
  gridhaze finetune  DATA --teacher CKPT --out CKPT   teacher-guided finetuning
  gridhaze dehaze    CKPT IMG [IMG...] --out DIR      run inference on images
  gridhaze eval      CKPT DATA [--out FILE]           per-image and mean PSNR/SSIM
  gridhaze ablate    --data DIR --eval-data DIR --variants a,b,c --out DIR

Every command funnels randomness through --seed and is reproducible with
--workers 1. Settings precedence: flags > --config file > defaults. Exit
codes: 0 success, 2 configuration error, 3 input error, 4 I/O error.
The GRIDHAZE_OUT_ROOT environment variable sets the default output root.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import haze_model, losses, metrics, network, training
from .errors import (
    CheckpointError,
    ConfigError,
    GridhazeError,
    InputError,
    ParameterError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_IO = 4

ABLATE_HEAD_TOKENS = ("direct", "indirect")
ABLATE_TRANSFER_TOKENS = ("pretrained", "no_itkt", "itkt")


def _out_root():
    return os.environ.get("GRIDHAZE_OUT_ROOT", ".")


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------

_DATASET_KEYS = {
    "n",
    "size",
    "beta_range",
    "A_range",
    "d_max",
    "depth_kind",
    "image_dir",
    "translated",
    "domain_shift",
}
_TOP_KEYS = {"seed", "grid", "train", "dataset"}


def _check_keys(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")


def load_config_file(path):
    """Parse and validate the experiment config JSON; unknown keys are errors."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    _check_keys("top-level", raw, _TOP_KEYS)
    grid_fields = {f.name for f in dataclasses.fields(network.GridConfig)}
    train_fields = {f.name for f in dataclasses.fields(training.TrainConfig)}
    _check_keys("grid", raw.get("grid", {}), grid_fields)
    _check_keys("train", raw.get("train", {}), train_fields)
    _check_keys("dataset", raw.get("dataset", {}), _DATASET_KEYS)
    lw = raw.get("train", {}).get("loss_weights", {})
    if isinstance(lw, dict):
        _check_keys(
            "loss_weights", lw, {f.name for f in dataclasses.fields(losses.LossWeights)}
        )
    ds = raw.get("dataset", {})
    if isinstance(ds.get("domain_shift"), dict):
        _check_keys(
            "domain_shift",
            ds["domain_shift"],
            {f.name for f in dataclasses.fields(haze_model.DomainShiftParams)},
        )
    return raw


def _settings(args):
    cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    return cfg, int(seed)


def _grid_config(cfg, args):
    params = dict(cfg.get("grid", {}))
    if getattr(args, "variant", None):
        params["variant"] = args.variant
    if getattr(args, "output_head", None):
        params["output_head"] = args.output_head
    if "scale_channels" in params:
        params["scale_channels"] = tuple(params["scale_channels"])
    return network.GridConfig(**params)


def _train_config(cfg, args, seed, mode):
    params = dict(cfg.get("train", {}))
    for flag, key in (
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("patch", "patch"),
        ("lr", "lr0"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            params[key] = value
    params["seed"] = seed
    params["mode"] = mode
    return training.TrainConfig(**params)


def _dataset_args(cfg, args, seed):
    params = dict(cfg.get("dataset", {}))
    n = params.pop("n", 8)
    if getattr(args, "n", None) is not None:
        n = args.n
    translated = bool(params.pop("translated", False)) or bool(
        getattr(args, "translated", False)
    )
    shift = params.pop("domain_shift", None)
    if translated:
        shift_params = (
            haze_model.DomainShiftParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in shift.items()})
            if isinstance(shift, dict)
            else haze_model.DomainShiftParams()
        )
    else:
        shift_params = None
    if "size" in params:
        params["size"] = tuple(params["size"])
    if "beta_range" in params:
        params["beta_range"] = tuple(params["beta_range"])
    if "A_range" in params:
        params["A_range"] = tuple(params["A_range"])
    return n, haze_model.DatasetConfig(domain_shift=shift_params, **params), seed


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    cfg, seed = _settings(args)
    n, ds_cfg, seed = _dataset_args(cfg, args, seed)
    out_dir = args.out or os.path.join(_out_root(), "dataset")
    os.makedirs(out_dir, exist_ok=True)
    samples = haze_model.make_dataset(n, seed=seed, config=ds_cfg, workers=args.workers)
    manifest = haze_model.save_dataset(samples, out_dir)
    domain = samples[0].domain
    print(
        f"wrote {len(samples)} samples to {out_dir} "
        f"(beta {list(ds_cfg.beta_range)}, A {list(ds_cfg.A_range)}, domain {domain})"
    )
    print(f"manifest: {manifest}")
    return EXIT_OK


def _load_samples(data_dir):
    return haze_model.load_dataset(data_dir)


def cmd_train(args):
    cfg, seed = _settings(args)
    grid_cfg = _grid_config(cfg, args)
    train_cfg = _train_config(cfg, args, seed, "pretrain")
    samples = _load_samples(args.data)
    model, store = network.build(grid_cfg, seed=seed)
    resume = None
    out_path = args.out or os.path.join(_out_root(), "model.ckpt")
    log_path = out_path + ".train.jsonl"
    if args.resume:
        resume = training.load_checkpoint(args.resume, expect_config=grid_cfg)
    elif os.path.exists(log_path):
        os.remove(log_path)
    bundle = training.pretrain(
        model, store, samples, train_cfg, log_path=log_path, resume=resume
    )
    training.save_checkpoint(bundle, out_path)
    print(f"trained {train_cfg.epochs} epochs on {len(samples)} samples")
    print(f"final epoch mean loss: {bundle.run_state.epoch_losses[-1]:.6f}")
    print(f"checkpoint: {out_path}")
    print(f"log: {log_path}")
    return EXIT_OK


def cmd_finetune(args):
    cfg, seed = _settings(args)
    if not args.teacher:
        raise ConfigError("finetune needs --teacher CKPT (a pretrained bundle)")
    teacher_bundle = training.load_checkpoint(args.teacher)
    teacher, _ = training.model_from_bundle(teacher_bundle)
    student, student_store = training.model_from_bundle(teacher_bundle)
    mode = "finetune_plain" if args.no_itkt else "finetune_distill"
    train_cfg = _train_config(cfg, args, seed, mode)
    samples = _load_samples(args.data)
    out_path = args.out or os.path.join(_out_root(), "student.ckpt")
    log_path = out_path + ".train.jsonl"
    resume = None
    if args.resume:
        resume = training.load_checkpoint(args.resume, expect_config=student.config)
    elif os.path.exists(log_path):
        os.remove(log_path)
    bundle = training.finetune(
        student,
        student_store,
        samples,
        train_cfg,
        teacher=teacher if mode == "finetune_distill" else None,
        log_path=log_path,
        resume=resume,
    )
    training.save_checkpoint(bundle, out_path)
    print(f"finetuned ({mode}) {train_cfg.epochs} epochs on {len(samples)} samples")
    print(f"checkpoint: {out_path}")
    return EXIT_OK


def _normalize_channel(ch):
    lo, hi = float(ch.min()), float(ch.max())
    if hi - lo < 1e-12:
        return np.zeros_like(ch)
    return (ch - lo) / (hi - lo)


def cmd_dehaze(args):
    bundle = training.load_checkpoint(args.ckpt)
    model, _ = training.model_from_bundle(bundle)
    out_dir = args.out or os.path.join(_out_root(), "dehazed")
    os.makedirs(out_dir, exist_ok=True)
    failures = 0
    for path in args.images:
        try:
            img = haze_model.load_image_png(path)
        except (OSError, ValueError) as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        out = model.infer(img)
        stem = os.path.splitext(os.path.basename(path))[0]
        haze_model.save_image_png(out, os.path.join(out_dir, f"{stem}_dehazed.png"))
        if args.dump_learned_inputs:
            import torch

            arr = img[None].astype(np.float32)
            if model.config.variant == "derived_inputs":
                feats = haze_model.derive_inputs(arr).astype(np.float32)[0]
            else:
                with torch.no_grad():
                    x = torch.from_numpy(arr)
                    h, w = x.shape[-2:]
                    factor = 2 ** (model.config.rows - 1)
                    ph, pw = (-h) % factor, (-w) % factor
                    if ph or pw:
                        import torch.nn.functional as F

                        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
                    feats = model.learned_inputs(x)[0, :, :h, :w].numpy()
            for c in range(feats.shape[0]):
                haze_model.save_image_png(
                    _normalize_channel(feats[c])[None],
                    os.path.join(out_dir, f"{stem}_input{c:02d}.png"),
                )
    if failures and failures == len(args.images):
        raise InputError("all input images failed to load")
    print(f"dehazed {len(args.images) - failures} image(s) into {out_dir}")
    return EXIT_OK


def cmd_eval(args):
    bundle = training.load_checkpoint(args.ckpt)
    model, _ = training.model_from_bundle(bundle)
    samples = _load_samples(args.data)
    report = training.evaluate(model, samples)
    for image_id, p, s in report.rows:
        print(f"{image_id}  psnr={p:.4f} dB  ssim={s:.6f}")
    print(report.summary_line())
    out_path = args.out or os.path.join(_out_root(), "report.jsonl")
    report.write_jsonl(out_path)
    print(f"report: {out_path}")
    return EXIT_OK


def _ablate_tokens(spec):
    tokens = [t.strip() for t in spec.split(",") if t.strip()]
    known = set(network.VARIANTS) | set(ABLATE_HEAD_TOKENS) | set(ABLATE_TRANSFER_TOKENS)
    for t in tokens:
        if t not in known:
            raise ConfigError(f"unknown ablation token {t!r}; choose from {sorted(known)}")
    return tokens


def cmd_ablate(args):
    cfg, seed = _settings(args)
    tokens = _ablate_tokens(args.variants)
    train_samples = _load_samples(args.data)
    eval_samples = _load_samples(args.eval_data) if args.eval_data else train_samples
    translated = _load_samples(args.translated_data) if args.translated_data else None
    out_dir = args.out or os.path.join(_out_root(), "ablation")
    os.makedirs(out_dir, exist_ok=True)

    needs_teacher = any(t in ABLATE_TRANSFER_TOKENS for t in tokens)
    teacher_bundle = None
    if needs_teacher:
        if translated is None:
            raise ConfigError("transfer tokens need --translated-data DIR")
        grid_cfg = _grid_config(cfg, args)
        tcfg = _train_config(cfg, args, seed, "pretrain")
        model, store = network.build(grid_cfg, seed=seed)
        teacher_bundle = training.pretrain(model, store, train_samples, tcfg)

    rows = []
    for token in tokens:
        try:
            rows.append(_run_ablate_token(token, cfg, args, seed, train_samples, eval_samples, translated, teacher_bundle))
        except GridhazeError as exc:
            rows.append({"variant": token, "error": str(exc)})
            print(f"warning: variant {token} failed: {exc}", file=sys.stderr)

    header = f"{'variant':<18} {'psnr_db':>10} {'ssim':>8} {'params':>9}"
    print(header)
    print("-" * len(header))
    for row in rows:
        if "error" in row:
            print(f"{row['variant']:<18} {'failed':>10}")
        else:
            print(
                f"{row['variant']:<18} {row['psnr']:>10.4f} {row['ssim']:>8.4f} "
                f"{row['params']:>9d}"
            )
    table_path = os.path.join(out_dir, "ablation.jsonl")
    with open(table_path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(f"table: {table_path}")
    return EXIT_OK


def _run_ablate_token(token, cfg, args, seed, train_samples, eval_samples, translated, teacher_bundle):
    if token in ABLATE_TRANSFER_TOKENS:
        if token == "pretrained":
            model, _ = training.model_from_bundle(teacher_bundle)
            bundle = teacher_bundle
        else:
            teacher, _ = training.model_from_bundle(teacher_bundle)
            model, store = training.model_from_bundle(teacher_bundle)
            mode = "finetune_plain" if token == "no_itkt" else "finetune_distill"
            fcfg = _train_config(cfg, args, seed, mode)
            bundle = training.finetune(
                model, store, translated, fcfg,
                teacher=teacher if mode == "finetune_distill" else None,
            )
        eval_on = translated if translated is not None else eval_samples
        report = training.evaluate(model, eval_on)
        params = sum(arr.size for arr in bundle.params.values())
    else:
        grid_params = dict(cfg.get("grid", {}))
        if token in ABLATE_HEAD_TOKENS:
            grid_params["output_head"] = token
        else:
            grid_params["variant"] = token
        if "scale_channels" in grid_params:
            grid_params["scale_channels"] = tuple(grid_params["scale_channels"])
        grid_cfg = network.GridConfig(**grid_params)
        tcfg = _train_config(cfg, args, seed, "pretrain")
        model, store = network.build(grid_cfg, seed=seed)
        training.pretrain(model, store, train_samples, tcfg)
        report = training.evaluate(model, eval_samples)
        params = store.param_count()
    return {
        "variant": token,
        "psnr": report.mean_psnr,
        "ssim": report.mean_ssim,
        "params": int(params),
    }


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="gridhaze", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="master random seed")
        p.add_argument("--workers", type=int, default=1, help="parallel workers where safe")
        p.add_argument("--out", help="output path (file or directory per command)")

    p = sub.add_parser("synth", help="synthesize a paired hazy/clear dataset")
    common(p)
    p.add_argument("--n", type=int, default=None, help="number of samples")
    p.add_argument("--translated", action="store_true", help="apply the domain-shift proxy")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="pretrain on synthetic pairs")
    common(p)
    p.add_argument("data", help="dataset directory (from synth)")
    p.add_argument("--variant", choices=network.VARIANTS, default=None)
    p.add_argument("--output-head", choices=network.OUTPUT_HEADS, default=None)
    p.add_argument("--resume", help="resume from a bundle checkpoint")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="finetune a pretrained model on translated pairs")
    common(p)
    p.add_argument("data", help="translated dataset directory")
    p.add_argument("--teacher", required=True, help="pretrained bundle checkpoint")
    p.add_argument("--no-itkt", dest="no_itkt", action="store_true",
                   help="drop the teacher feature-matching term (plain finetuning)")
    p.add_argument("--resume", help="resume from a bundle checkpoint")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("dehaze", help="run inference on image files")
    common(p)
    p.add_argument("ckpt", help="bundle checkpoint")
    p.add_argument("images", nargs="+", help="input PNG images")
    p.add_argument("--dump-learned-inputs", action="store_true",
                   help="also write the 16 input feature channels as PNGs")
    p.set_defaults(func=cmd_dehaze)

    p = sub.add_parser("eval", help="PSNR/SSIM over a paired dataset")
    common(p)
    p.add_argument("ckpt", help="bundle checkpoint")
    p.add_argument("data", help="dataset directory with ground truth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare architecture variants")
    common(p)
    p.add_argument("--data", required=True, help="synthetic training dataset directory")
    p.add_argument("--eval-data", dest="eval_data", help="evaluation dataset directory")
    p.add_argument("--translated-data", dest="translated_data",
                   help="translated dataset directory (for transfer tokens)")
    p.add_argument("--variants", required=True,
                   help="comma list: variant names, direct/indirect, pretrained/no_itkt/itkt")
    p.add_argument("--variant", default=None, help=argparse.SUPPRESS)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, ParameterError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
