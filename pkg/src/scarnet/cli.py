"""Command-line entry point.

Exit codes: 0 success, 2 config, 3 data, 4 checkpoint, 5 pairing.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import CheckpointError, ConfigError, DataError, ScarNetError

log = logging.getLogger("scarnet")


def _deterministic():
    import torch

    if os.environ.get("SCARNET_DETERMINISTIC") == "1":
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def cmd_phantom_gen(args):
    from .phantom import dataset_write, make_phantom_set

    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    overrides = {}
    if args.noise_sigma is not None:
        overrides["intensity_noise_sigma"] = args.noise_sigma
    samples = make_phantom_set(args.count, args.seed, args.size, args.size,
                               scar_extent_range=(args.scar_min, args.scar_max), **overrides)
    dataset_write(args.out, samples, extra={"generator": {"count": args.count, "seed": args.seed,
                                                          "size": args.size}})
    print(f"wrote {args.count} phantoms to {args.out}")
    return 0


def _load_dataset(path):
    from .phantom import dataset_read

    try:
        return dataset_read(path)
    except (DataError, FileNotFoundError) as exc:
        raise DataError(str(exc)) from None


def _resolve_config(args):
    overrides = [(k[4:], config_mod.parse_value(v)) for k, v in vars(args).items() if k.startswith("cfg:")]
    if args.ablation is not None:
        overrides.append(("model.ablation", args.ablation))
    return config_mod.load_config(args.config, overrides)


def _strip_epochs(d):
    d = copy.deepcopy(d)
    d["train"].pop("epochs", None)
    return d


def cmd_train(args):
    from .training import load_checkpoint, train

    cfg = _resolve_config(args)
    samples = _load_dataset(args.data)
    if not samples:
        raise DataError(f"dataset {args.data} is empty")
    sizes = {s.image.shape for s in samples}
    if sizes != {(cfg.model.image_size, cfg.model.image_size)}:
        raise DataError(f"dataset image sizes {sorted(sizes)} do not match model.image_size={cfg.model.image_size}")
    out = Path(args.out)
    resume = None
    if args.resume:
        ckpt_path = out / "checkpoint.bin" if args.resume is True else Path(args.resume)
        resume = load_checkpoint(ckpt_path)
        if _strip_epochs(resume.config) != _strip_epochs(cfg.to_dict()):
            raise CheckpointError(f"{ckpt_path} was written with a different configuration")
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump_config(cfg, out / "config.yaml")
    result = train(samples, cfg, out_dir=out, resume=resume)
    last = result.history[-1] if result.history else None
    if last:
        print(f"epoch {last['epoch']}: loss {last['loss_total']:.4f} "
              f"dice myo {last['train_dice_myo']:.3f} scar {last['train_dice_scar']:.3f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def _model_from_checkpoint(path):
    from .model import build_model
    from .training import DTYPES, load_checkpoint, restore_model

    ckpt = load_checkpoint(path)
    try:
        cfg = config_mod.RunConfig.from_dict(ckpt.config)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: stored config invalid ({exc})") from None
    model = build_model(cfg.model, dtype=DTYPES[cfg.train.dtype])
    restore_model(model, ckpt)
    model.eval()
    return model, cfg


def _check_sizes(samples, cfg):
    for s in samples:
        if s.image.shape != (cfg.model.image_size, cfg.model.image_size):
            raise CheckpointError(f"sample {s.id} is {s.image.shape[0]}x{s.image.shape[1]} but the checkpoint "
                                  f"expects {cfg.model.image_size}x{cfg.model.image_size}")


def cmd_infer(args):
    import torch

    from .phantom import mask_path, write_mask, write_raw

    model, cfg = _model_from_checkpoint(args.checkpoint)
    samples = _load_dataset(args.data)
    _check_sizes(samples, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(samples), 8):
            chunk = samples[i:i + 8]
            logits = model(torch.from_numpy(np.stack([s.image for s in chunk])).to(dtype))
            probs = torch.softmax(logits, dim=1).numpy()
            for s, p in zip(chunk, probs):
                write_mask(mask_path(out, s.id), p.argmax(axis=0).astype(np.uint8))
                if args.probs:
                    write_raw(out / f"prob_{s.id}.raw", p, np.float32)
    print(f"wrote {len(samples)} predictions to {out}")
    return 0


def cmd_evaluate(args):
    from .evaluation import evaluate_dirs, write_metrics

    report = evaluate_dirs(args.pred, args.ref)
    write_metrics(report, args.out, plots=not args.no_plots)
    agg = report.aggregates
    print(f"median DICE myo {agg['dice_myocardium']['median']:.3f} scar {agg['dice_scar']['median']:.3f}")
    return 0


def cmd_montecarlo(args):
    from .evaluation import monte_carlo, write_monte_carlo

    if args.iters < 1 or args.sigma < 0:
        raise ConfigError("--iters must be >= 1 and --sigma >= 0")
    model, cfg = _model_from_checkpoint(args.checkpoint)
    samples = _load_dataset(args.data)
    _check_sizes(samples, cfg)
    report = monte_carlo(model, samples, args.iters, args.sigma, args.seed)
    write_monte_carlo(report, args.out, plots=not args.no_plots)
    for name in report.mean:
        cov = report.cov[name]
        print(f"{name}: {report.mean[name]:.4f} ± {report.std[name]:.4f} "
              f"CoV {'undefined' if cov is None else f'{100 * cov:.2f}%'}")
    return 0


def _add_config_flags(p):
    group = p.add_argument_group("config overrides (dot paths; defaults shown)")
    for key, default in config_mod.leaf_fields():
        shown = json.dumps(list(default) if isinstance(default, tuple) else default)
        group.add_argument(f"--{key}", dest=f"cfg:{key}", default=argparse.SUPPRESS, metavar="VALUE",
                           help=f"default: {shown}")


def build_parser():
    defaults = config_mod.RunConfig()
    parser = argparse.ArgumentParser(prog="scarnet", description="Dual-pathway LGE scar segmentation.",
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("phantom-gen", help="generate a synthetic phantom dataset", formatter_class=fmt)
    p.add_argument("--count", type=int, default=defaults.data.count, help="number of phantoms")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=defaults.data.seed, help="master seed")
    p.add_argument("--size", type=int, default=defaults.model.image_size, help="image height and width")
    p.add_argument("--scar-min", type=float, default=45.0, help="minimum scar arc (degrees)")
    p.add_argument("--scar-max", type=float, default=160.0, help="maximum scar arc (degrees)")
    p.add_argument("--noise-sigma", type=float, default=None, help="intensity noise sigma (default 0.03)")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--config", default=None, help="YAML/JSON config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    p.add_argument("--resume", nargs="?", const=True, default=None,
                   help="resume from OUT/checkpoint.bin or the given checkpoint")
    p.add_argument("--ablation", choices=["none", "unet-only"], default=None,
                   help="train the UNet pathway alone with a direct class head")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment a dataset with a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probs", action="store_true", help="also write per-class probability maps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="compare predicted and reference masks", formatter_class=fmt)
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("montecarlo", help="noise-robustness simulation", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int, default=defaults.eval.n_iter)
    p.add_argument("--sigma", type=float, default=defaults.eval.sigma,
                   help="noise SD as a fraction of each image's intensity range")
    p.add_argument("--seed", type=int, default=defaults.eval.seed)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_montecarlo)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _deterministic()
    try:
        return args.func(args)
    except ScarNetError as exc:
        print(f"scarnet: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
