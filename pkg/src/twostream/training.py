"""Training loop: batching, losses, optimizer steps, checkpoints and the epoch log."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .models import ModelKind, NetworkSpec, ParameterStore, build, classify, forward_autoencoder, save_checkpoint
from .optim import AdamState, DualLossWeights, OptimizerError, adam_step, dual_loss, sgd_step
from .preprocessing import (ClipBatch, PreprocessConfig, augment, load_video, prepare_streams,
                            split_clips, training_clips)

CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train_log.csv"


class ConfigError(ValueError):
    """A configuration value is out of range; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, log: "TrainLog", checkpoint: Path | None):
        super().__init__(message)
        self.log = log
        self.checkpoint = checkpoint


_DEFAULTS = {
    ModelKind.TWO_STREAM_RAE3D: dict(epochs=120, batch_size=64, lr=2e-4, image_weight=0.75,
                                     flow_weight=1.0, optimizer="adam"),
    ModelKind.TWO_STREAM_CAE2D: dict(epochs=60, batch_size=32, lr=2e-4, image_weight=1.0,
                                     flow_weight=1.0, optimizer="adam"),
    ModelKind.SINGLE_STREAM_CAE: dict(epochs=60, batch_size=32, lr=2e-4, image_weight=1.0,
                                      flow_weight=1.0, optimizer="adam"),
    ModelKind.SUPERVISED: dict(epochs=120, batch_size=32, lr=5e-4, image_weight=1.0,
                               flow_weight=1.0, optimizer="sgd"),
}


@dataclass(frozen=True)
class TrainConfig:
    kind: ModelKind = ModelKind.TWO_STREAM_CAE2D
    epochs: int = 60
    batch_size: int = 32
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    image_weight: float = 1.0
    flow_weight: float = 1.0
    optimizer: str = "adam"
    seed: int = 17
    target: str = "hang"
    val_fraction: float = 0.2
    augment: bool = True
    train_data: str = ""
    out_dir: str = "run"

    @classmethod
    def for_kind(cls, kind, **overrides) -> "TrainConfig":
        kind = ModelKind.parse(kind)
        values = dict(_DEFAULTS[kind], kind=kind)
        values.update(overrides)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @property
    def weights(self) -> DualLossWeights:
        return DualLossWeights(self.image_weight, self.flow_weight)

    def validate(self) -> None:
        from .io import BEHAVIOURS

        checks = [
            ("epochs", self.epochs >= 1, "must be at least 1"),
            ("batch_size", self.batch_size >= 1, "must be at least 1"),
            ("lr", 0 < self.lr < 1, "must lie in (0, 1)"),
            ("beta1", 0 <= self.beta1 < 1, "must lie in [0, 1)"),
            ("beta2", 0 <= self.beta2 < 1, "must lie in [0, 1)"),
            ("image_weight", self.image_weight >= 0, "must be non-negative"),
            ("flow_weight", self.flow_weight >= 0, "must be non-negative"),
            ("image_weight", self.image_weight + self.flow_weight > 0,
             "image_weight and flow_weight cannot both be zero"),
            ("optimizer", self.optimizer in ("adam", "sgd"), "must be 'adam' or 'sgd'"),
            ("val_fraction", 0 <= self.val_fraction < 1, "must lie in [0, 1)"),
            ("target", self.target in BEHAVIOURS, f"must be one of {BEHAVIOURS}"),
            ("seed", self.seed >= 0, "must be non-negative"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigError(name, f"{message} (got {getattr(self, name)!r})")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        try:
            kind = ModelKind.parse(d.pop("kind", ModelKind.TWO_STREAM_CAE2D))
        except ValueError as exc:
            raise ConfigError("kind", str(exc)) from None
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for name, value in d.items():
            expected = {"int": int, "float": (int, float), "str": str, "bool": bool}.get(types[name])
            if expected and (not isinstance(value, expected) or
                             (types[name] != "bool" and isinstance(value, bool))):
                raise ConfigError(name, f"expected {types[name]}, got {value!r}")
        return cls.for_kind(kind, **d)


def load_config(path) -> TrainConfig:
    """Read a TOML file; keys may sit at top level or under a ``[train]`` table."""
    import tomli

    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    return TrainConfig.from_dict(raw.get("train", raw))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    img_loss: float
    flow_loss: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    COLUMNS = ("epoch", "train_loss", "val_loss", "img_loss", "flow_loss", "seconds")

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in self.COLUMNS[1:]])
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[c]) for c in cls.COLUMNS[1:]))
                    for r in rows])


# ---------------------------------------------------------------------------
# losses


def batch_loss(spec: NetworkSpec, params, batch: ClipBatch, weights: DualLossWeights):
    """(total, image/primary component, flow component) as tensors; flow is None if unused."""
    gray = T.Tensor(batch.gray)
    if spec.kind is ModelKind.SUPERVISED:
        p = classify(spec, params, gray)
        loss = T.bce(p, batch.labels.astype(np.float32))
        return loss, loss, None
    two = len(spec.kind.streams) == 2
    out = forward_autoencoder(spec, params, gray, T.Tensor(batch.flow) if two else None)
    l_img = T.mse(out["gray"], gray)
    if not two:
        return l_img, l_img, None
    l_flow = T.mse(out["flow"], T.Tensor(batch.flow))
    return dual_loss(l_img, l_flow, weights), l_img, l_flow


def evaluate_loss(spec: NetworkSpec, store: ParameterStore, batch: ClipBatch,
                  weights: DualLossWeights, batch_size: int) -> tuple[float, float, float]:
    """Clip-weighted mean (total, image, flow) loss without building a tape."""
    params = store.tensors(requires_grad=False)
    sums = np.zeros(3)
    for lo in range(0, len(batch), batch_size):
        part = batch.subset(np.arange(lo, min(lo + batch_size, len(batch))))
        total, img, flw = batch_loss(spec, params, part, weights)
        sums += len(part) * np.array([total.item(), img.item(), 0.0 if flw is None else flw.item()])
    return tuple(sums / max(len(batch), 1))


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    spec: NetworkSpec
    store: ParameterStore
    log: TrainLog
    checkpoint: Path | None


def fit(config: TrainConfig, train: ClipBatch, val: ClipBatch | None = None,
        checkpoint: Path | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train a freshly built model on prepared clip batches."""
    config.validate()
    if len(train) == 0:
        raise ValueError("training set is empty")
    kind = config.kind
    if kind.is_autoencoder and train.labels.any():
        raise ValueError(f"{int(train.labels.sum())} training clips contain the target behaviour")
    spec, store = build(kind, config.seed)
    weights = config.weights
    values = dict(store.values)
    adam = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    log = TrainLog()
    saved = None
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = order_rng.permutation(len(train))
        sums = np.zeros(3)
        for lo in range(0, len(order), config.batch_size):
            part = train.subset(np.sort(order[lo : lo + config.batch_size]))
            params = {k: T.Tensor(v, requires_grad=True, name=k) for k, v in values.items()}
            total, img, flw = batch_loss(spec, params, part, weights)
            loss_value = total.item()
            if not math.isfinite(loss_value):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}", log, saved)
            grads = T.backward(total, params)
            try:
                if config.optimizer == "adam":
                    values, adam = adam_step(values, grads, adam)
                else:
                    values = sgd_step(values, grads, config.lr)
            except OptimizerError as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}", log, saved) from exc
            sums += len(part) * np.array([loss_value, img.item(),
                                          0.0 if flw is None else flw.item()])
        store = ParameterStore(values, config.seed)
        train_loss, img_loss, flow_loss = sums / len(train)
        val_loss = (evaluate_loss(spec, store, val, weights, config.batch_size)[0]
                    if val is not None and len(val) else float("nan"))
        if val is not None and len(val) and not math.isfinite(val_loss):
            raise TrainingAborted(f"non-finite validation loss at epoch {epoch}", log, saved)
        record = EpochRecord(epoch, float(train_loss), float(val_loss), float(img_loss),
                             float(flow_loss), time.perf_counter() - started)
        log.records.append(record)
        if checkpoint is not None:
            saved = save_checkpoint(checkpoint, kind, store)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(spec, ParameterStore(values, config.seed), log, saved)


def prepare_training_data(config: TrainConfig, streams, track) -> tuple[ClipBatch, ClipBatch]:
    """Filtered (autoencoders) or labelled (classifier) clips, split 80/20, train side mirrored."""
    clips = training_clips(streams, track, config.target, exclude_target=config.kind.is_autoencoder)
    tr, va = split_clips(len(clips), config.val_fraction, config.seed)
    train, val = clips.subset(tr), clips.subset(va)
    if config.augment:
        train = augment(train)
    return train, val


def train(config: TrainConfig, preprocess: PreprocessConfig = PreprocessConfig(),
          on_epoch=None) -> TrainResult:
    """Load ``config.train_data``, train, and write the checkpoint and CSV log to ``out_dir``."""
    config.validate()
    seq, track = load_video(config.train_data)
    if track is None:
        raise ValueError(f"{config.train_data}: no annotations; cannot filter the target behaviour")
    train_set, val_set = prepare_training_data(config, prepare_streams(seq, preprocess), track)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = fit(config, train_set, val_set, out / CHECKPOINT_NAME, on_epoch)
    except TrainingAborted as exc:
        exc.log.write_csv(out / LOG_NAME)
        raise
    result.log.write_csv(out / LOG_NAME)
    return result
