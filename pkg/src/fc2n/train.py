"""L1/Adam training loop, learning-rate schedule and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fc2n.autograd import Tape, Tensor, get_dtype, l1_loss
from fc2n.checkpoint import decode_float64, encode_float64, read_archive, write_archive
from fc2n.data import PatchPair, TrainingSet, prefetch
from fc2n.errors import CheckpointError, ConfigError, NonFiniteLossError
from fc2n.evaluate import ModelPredictor, evaluate_images
from fc2n.model import Model, ModelConfig, build_model, model_forward
from fc2n.optim import AdamHyper, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    patch_size: int = 48
    total_steps: int = 1_000_000
    lr_init: float = 2e-4
    lr_halve_every: float = 4.0e5
    scale: int = 2
    seed: int = 0
    checkpoint_every: int = 10_000
    validate_every: int = 1_000

    def __post_init__(self):
        for name in ("batch_size", "patch_size", "lr_init", "lr_halve_every", "scale",
                     "checkpoint_every", "validate_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Initial rate halved every ``lr_halve_every`` steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr_init * 0.5 ** math.floor(step / cfg.lr_halve_every)


@dataclass
class Batch:
    """Stacked LR/HR patches normalized to [0, 1]."""

    lr: np.ndarray
    hr: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: Sequence[PatchPair]) -> "Batch":
        lr = np.stack([p.lr for p in pairs]) / 255.0
        hr = np.stack([p.hr for p in pairs]) / 255.0
        return cls(lr, hr)


@dataclass
class TrainState:
    step: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)
    train_config: TrainConfig | None = None


def _grad_norms(model: Model) -> dict[str, float]:
    return {name: float(np.linalg.norm(p.grad)) for name, p in model.params.items()}


def train_step(model: Model, batch: Batch | Sequence[PatchPair], hyper: AdamHyper) -> float:
    """Forward, L1 loss, backward and one Adam update; returns the pre-update loss."""
    if not isinstance(batch, Batch):
        batch = Batch.from_pairs(batch)
    r = model.config.scale
    if batch.hr.shape[1] != r * batch.lr.shape[1] or batch.hr.shape[2] != r * batch.lr.shape[2]:
        raise ConfigError(f"batch is not at model scale x{r}: LR {batch.lr.shape}, HR {batch.hr.shape}")
    dtype = model.dtype
    with Tape() as tape:
        loss = l1_loss(model_forward(model, Tensor(batch.lr, dtype=dtype)), Tensor(batch.hr, dtype=dtype))
    value = loss.item()
    tape.backward(loss)
    if not math.isfinite(value):
        norms = _grad_norms(model)
        for p in model.params.values():
            p.zero_grad()
        raise NonFiniteLossError(hyper.step_count, hyper.lr, norms)
    adam_step(model.parameters(), hyper)
    return value


# ---------------------------------------------------------------------------
# checkpoints

_MODEL_KEYS = ("n", "m", "base_width", "expand_width", "scale", "weighted_wgff", "weighted_cg", "weighted_cb")
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
_HYPER_KEYS = ("lr", "beta1", "beta2", "eps")


def checkpoint_save(model: Model, state: TrainState, path) -> None:
    """Write parameters, Adam moments, configs and the step counter."""
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        tensors[name] = p.data
    for name, p in model.params.items():
        tensors[f"adam_m/{name}"] = p.adam_m
        tensors[f"adam_v/{name}"] = p.adam_v
    cfg = model.config
    for key in _MODEL_KEYS:
        tensors[f"meta/model/{key}"] = encode_float64(float(getattr(cfg, key)))
    tensors["meta/model/residual"] = encode_float64(float(cfg.residual))
    for key in _HYPER_KEYS:
        tensors[f"meta/adam/{key}"] = encode_float64(getattr(state.hyper, key))
    tensors["meta/adam/step_count"] = encode_float64(float(state.hyper.step_count))
    if state.train_config is not None:
        for key in _TRAIN_KEYS:
            tensors[f"meta/train/{key}"] = encode_float64(float(getattr(state.train_config, key)))
    write_archive(tensors, state.step, path)


def _meta(tensors: dict, key: str, path) -> float:
    try:
        return decode_float64(tensors[key])
    except KeyError:
        raise CheckpointError(f"{path}: missing {key}") from None


def checkpoint_load(path, dtype=None) -> tuple[Model, TrainState]:
    tensors, step = read_archive(path)
    mk = {k: _meta(tensors, f"meta/model/{k}", path) for k in _MODEL_KEYS}
    residual = _meta(tensors, "meta/model/residual", path)
    config = ModelConfig(
        n=int(mk["n"]), m=int(mk["m"]), base_width=int(mk["base_width"]), expand_width=int(mk["expand_width"]),
        scale=int(mk["scale"]), weighted_wgff=bool(mk["weighted_wgff"]), weighted_cg=bool(mk["weighted_cg"]),
        weighted_cb=bool(mk["weighted_cb"]), skip_mode="residual" if residual else "wcc",
    )
    model = build_model(config, 0, dtype=dtype or get_dtype())
    expected = set(model.params) | {f"adam_m/{n}" for n in model.params} | {f"adam_v/{n}" for n in model.params}
    stored = {k for k in tensors if not k.startswith("meta/")}
    if stored != expected:
        missing = sorted(expected - stored)[:3]
        extra = sorted(stored - expected)[:3]
        raise CheckpointError(f"{path}: tensor set does not match the model (missing {missing}, unexpected {extra})")
    for name, p in model.params.items():
        for attr, key in (("data", name), ("adam_m", f"adam_m/{name}"), ("adam_v", f"adam_v/{name}")):
            arr = tensors[key]
            if arr.shape != p.data.shape:
                raise CheckpointError(f"{path}: {key} has shape {arr.shape}, expected {p.data.shape}")
    for name, p in model.params.items():
        p.data = tensors[name].astype(p.data.dtype)
        p.adam_m = tensors[f"adam_m/{name}"].astype(p.data.dtype)
        p.adam_v = tensors[f"adam_v/{name}"].astype(p.data.dtype)
        p.grad = np.zeros_like(p.data)
    hyper = AdamHyper(**{k: _meta(tensors, f"meta/adam/{k}", path) for k in _HYPER_KEYS},
                      step_count=int(_meta(tensors, "meta/adam/step_count", path)))
    train_config = None
    if "meta/train/batch_size" in tensors:
        values = {k: _meta(tensors, f"meta/train/{k}", path) for k in _TRAIN_KEYS}
        kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
        train_config = TrainConfig(**{k: (float(v) if kinds[k] == "float" else int(v)) for k, v in values.items()})
    return model, TrainState(step, hyper, train_config)


# ---------------------------------------------------------------------------
# loop


@dataclass
class LogRecord:
    step: int
    loss: float
    lr: float
    val_psnr: float | None = None

    def line(self) -> str:
        cols = [str(self.step), repr(self.loss), repr(self.lr)]
        if self.val_psnr is not None:
            cols.append(f"{self.val_psnr:.4f}")
        return "\t".join(cols)


@dataclass
class TrainResult:
    model: Model
    state: TrainState
    records: list[LogRecord]

    @property
    def validations(self) -> list[LogRecord]:
        return [r for r in self.records if r.val_psnr is not None]


def validate(model: Model, val_images: Sequence[np.ndarray], scale: int) -> float:
    """Mean Y-PSNR on full images, no ensemble, shave = scale."""
    report = evaluate_images(ModelPredictor(model), val_images, scale, "none")
    return report.mean_psnr


def train_loop(model: Model, data: TrainingSet, cfg: TrainConfig, state: TrainState | None = None,
               val_images: Sequence[np.ndarray] | None = None, out_dir=None, workers: int = 1) -> TrainResult:
    """Run steps ``state.step .. cfg.total_steps - 1``.

    Validation runs after every ``validate_every``-th step and after the
    last step when it is not itself a validation step, so a run records
    ``ceil(total_steps / validate_every)`` validations. With ``out_dir`` set,
    one log line per step is appended to ``train.log`` and checkpoints are
    written every ``checkpoint_every`` steps and at the end (``final.fc2n``).
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if data.scale != model.config.scale or cfg.scale != model.config.scale:
        raise ConfigError(f"scale mismatch: model x{model.config.scale}, data x{data.scale}, config x{cfg.scale}")
    state = state or TrainState(hyper=AdamHyper(lr=cfg.lr_init))
    state.train_config = cfg
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "train.log", "a")

    records: list[LogRecord] = []
    steps = range(state.step, cfg.total_steps)

    def make(step: int) -> Batch:
        return Batch.from_pairs(data.sample_batch(step, cfg.seed, cfg.batch_size, cfg.patch_size))

    try:
        for step, batch in zip(steps, prefetch(make, steps, workers)):
            state.hyper.lr = lr_schedule(step, cfg)
            loss = train_step(model, batch, state.hyper)
            state.step = step + 1
            rec = LogRecord(state.step, loss, state.hyper.lr)
            last = state.step == cfg.total_steps
            if val_images and (state.step % cfg.validate_every == 0 or last):
                rec.val_psnr = validate(model, val_images, cfg.scale)
                log.info("step %d loss %.5f val %.3f dB", state.step, loss, rec.val_psnr)
            records.append(rec)
            if logf is not None:
                logf.write(rec.line() + "\n")
                logf.flush()
            if out is not None and state.step % cfg.checkpoint_every == 0:
                checkpoint_save(model, state, out / f"ckpt_{state.step:08d}.fc2n")
        if out is not None:
            checkpoint_save(model, state, out / "final.fc2n")
    finally:
        if logf is not None:
            logf.close()
    return TrainResult(model, state, records)
