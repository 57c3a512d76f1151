"""Command-line interface: ``fc2n train|eval|infer|params|downsample``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime abort.
``FC2N_THREADS`` caps BLAS threads and evaluation workers.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from threadpoolctl import threadpool_limits

from fc2n.data import (
    TrainingSet,
    crop_to_multiple,
    default_workers,
    downsample,
    find_paired_lr,
    list_images,
    load_image,
    save_image,
)
from fc2n.errors import CheckpointError, ConfigError, FC2NError, ImageFormatError, NonFiniteLossError
from fc2n.evaluate import ENSEMBLE_MODES, BicubicPredictor, ModelPredictor, ensemble_predict, evaluate_images
from fc2n.model import ModelConfig, build_model, compute_multiadds, count_params
from fc2n.train import TrainConfig, checkpoint_load, train_loop

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    n: int = 4
    m: int = 4
    base_width: int = 32
    expand_width: int = 128
    scale: int = 2
    weighted_wgff: bool = True
    weighted_cg: bool = True
    weighted_cb: bool = True
    skip_mode: str = "wcc"
    batch_size: int = 16
    patch_size: int = 48
    lr_init: float = 2e-4
    lr_halve_every: float = 4.0e5
    total_steps: int = 1_000_000
    seed: int = 0
    checkpoint_every: int = 10_000
    validate_every: int = 1_000
    data_dir: str | None = None
    val_dir: str | None = None
    out_dir: str = "runs/fc2n"

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.n, self.m, self.base_width, self.expand_width, self.scale,
                           self.weighted_wgff, self.weighted_cg, self.weighted_cb, self.skip_mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.patch_size, self.total_steps, self.lr_init, self.lr_halve_every,
                           self.scale, self.seed, self.checkpoint_every, self.validate_every)


_BOOLS = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _convert(kind: str, raw: str):
    if kind == "bool":
        try:
            return _BOOLS[raw.lower()]
        except KeyError:
            raise ValueError(f"expected a boolean, got {raw!r}") from None
    if kind == "int":
        value = float(raw)
        if value != int(value):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(value)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment.

    All problems are collected and reported together with line numbers.
    """
    kinds = {f.name: str(f.type).split(" ")[0] for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    errors: list[str] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in values:
            errors.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = _convert(kinds[key], raw)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: {key}: {exc}")
    if errors:
        raise ConfigError("\n".join(errors))
    cfg = RunConfig(**values)
    cfg.model_config()
    cfg.train_config()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# commands


def _load_dir_images(directory: str, key: str) -> list[Path]:
    try:
        paths = list_images(directory)
    except FileNotFoundError:
        raise UsageError(f"{key}: directory {directory!r} does not exist") from None
    if not paths:
        raise UsageError(f"{key}: no PNG/PPM images in {directory!r}")
    return paths


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if not cfg.data_dir:
        raise UsageError("missing required key 'data_dir'")
    train_paths = _load_dir_images(cfg.data_dir, "data_dir")
    val_paths = _load_dir_images(cfg.val_dir, "val_dir") if cfg.val_dir else []
    tcfg = cfg.train_config()
    if args.resume:
        model, state = checkpoint_load(args.resume)
        if model.config != cfg.model_config():
            raise UsageError(f"checkpoint model {model.config} does not match the config {cfg.model_config()}")
    else:
        model, state = build_model(cfg.model_config(), cfg.seed), None

    data = TrainingSet([load_image(p) for p in train_paths], cfg.scale)
    val = [load_image(p) for p in val_paths]
    result = train_loop(model, data, tcfg, state, val_images=val or None, out_dir=cfg.out_dir)
    last = result.records[-1] if result.records else None
    print(f"trained to step {result.state.step}; checkpoint {Path(cfg.out_dir) / 'final.fc2n'}")
    if last is not None:
        print(f"final loss {last.loss:.6f}" + (f", val PSNR {last.val_psnr:.3f} dB" if last.val_psnr else ""))
    return EXIT_OK


def _predictor(ckpt: str, scale: int | None):
    if ckpt == "bicubic":
        if scale is None:
            raise UsageError("--scale is required with --ckpt bicubic")
        return BicubicPredictor(scale), scale
    model, _ = checkpoint_load(ckpt)
    if scale is not None and scale != model.config.scale:
        raise UsageError(f"scale mismatch: checkpoint is x{model.config.scale} but --scale is {scale}")
    return ModelPredictor(model), model.config.scale


def cmd_eval(args) -> int:
    if args.ensemble not in ENSEMBLE_MODES:
        raise UsageError(f"--ensemble must be one of {ENSEMBLE_MODES}")
    paths = _load_dir_images(args.data, "--data")
    predict, scale = _predictor(args.ckpt, args.scale)
    hr = [load_image(p) for p in paths]
    lr = None
    if args.lr_dir:
        lr = [load_image(find_paired_lr(p, args.lr_dir, scale)) for p in paths]
    report = evaluate_images(predict, hr, scale, args.ensemble, args.shave, lr, [p.name for p in paths],
                             Path(args.data).name, workers=1)
    print(report.to_table())
    print(f"forward passes: {predict.forward_calls}")
    csv_path = args.csv or f"eval_{Path(args.data).name}_x{scale}_{args.ensemble.replace('+', '_')}.csv"
    report.write_csv(csv_path)
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    if args.ensemble not in ENSEMBLE_MODES:
        raise UsageError(f"--ensemble must be one of {ENSEMBLE_MODES}")
    predict, scale = _predictor(args.ckpt, args.scale)
    img = load_image(args.input)
    sr = ensemble_predict(predict, img, args.ensemble)
    save_image(sr, args.output)
    print(f"{args.input} {img.shape[1]}x{img.shape[0]} -> {args.output} {sr.shape[1]}x{sr.shape[0]} (x{scale})")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = load_config(args.config).model_config()
    params = count_params(cfg)
    registry = build_model(cfg, 0).num_params()
    madds = compute_multiadds(cfg)
    print(f"params: {params:,} ({params / 1e3:,.0f}K, {params / 1e6:.2f}M)")
    print(f"registry: {registry:,}")
    print(f"multiadds@720p: {madds:,} ({madds / 1e9:,.1f}G)")
    return EXIT_OK


def cmd_downsample(args) -> int:
    if args.scale < 1:
        raise UsageError("--scale must be >= 1")
    img = load_image(args.input)
    hr = crop_to_multiple(img, args.scale)
    lr = downsample(hr, args.scale, antialias=not args.no_antialias)
    save_image(lr, args.output)
    print(f"{args.input} {img.shape[1]}x{img.shape[0]} -> cropped {hr.shape[1]}x{hr.shape[0]} "
          f"-> {args.output} {lr.shape[1]}x{lr.shape[0]}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fc2n", description="FC2N super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate Y-PSNR/SSIM on a directory of HR images")
    p.add_argument("--ckpt", required=True, help="checkpoint path, or 'bicubic'")
    p.add_argument("--data", required=True)
    p.add_argument("--scale", type=int)
    p.add_argument("--ensemble", default="none")
    p.add_argument("--shave", type=int, help="border pixels ignored (default: scale)")
    p.add_argument("--lr-dir", help="paired LR images instead of bicubic synthesis")
    p.add_argument("--csv", help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="super-resolve one image")
    p.add_argument("--ckpt", required=True, help="checkpoint path, or 'bicubic'")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scale", type=int)
    p.add_argument("--ensemble", default="none")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("params", help="print parameter count and 720p MultiAdds")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("downsample", help="bicubic LR synthesis")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--no-antialias", action="store_true")
    p.set_defaults(func=cmd_downsample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=default_workers()):
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"fc2n {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"fc2n {args.command}: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FC2NError, CheckpointError, ImageFormatError, OSError) as exc:
        print(f"fc2n {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
