"""Seeded training and evaluation on the synthetic tasks."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbones import StemConfig, build_model
from .block import AtmConfig
from .synth import ClipBatch, SynthClipSpec, gen_dataset
from .tensor import Tensor, cross_entropy, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class DatasetConfig:
    task: str = "direction2"
    n_train: int = 400
    n_test: int = 200
    frames: int = 8
    size: int = 28
    radius: float = 2.0
    velocity: float = 2.0
    noise: float = 0.0

    def base_spec(self) -> SynthClipSpec:
        return SynthClipSpec(task=self.task, frames=self.frames, size=self.size,
                             radius=self.radius, velocity=self.velocity, noise=self.noise)


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float | None = None
    seed: int = 0
    stem: StemConfig = field(default_factory=StemConfig)
    atm: AtmConfig | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetConfig(**self.dataset)
        if isinstance(self.stem, dict):
            self.stem = StemConfig(**self.stem)
        if isinstance(self.atm, dict):
            self.atm = AtmConfig(**self.atm)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.seed < 0:
            raise ValueError("lr, momentum, weight_decay and seed must be non-negative")
        ds, spec = self.dataset, self.dataset.base_spec()
        self.stem = replace(self.stem, frames=ds.frames, image_size=ds.size,
                            num_classes=spec.num_classes)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
                "momentum": self.momentum, "weight_decay": self.weight_decay,
                "clip_norm": self.clip_norm, "seed": self.seed,
                "stem": self.stem.to_dict(),
                "atm": None if self.atm is None else self.atm.to_dict(),
                "dataset": asdict(self.dataset)}


@dataclass
class RunReport:
    epochs: list  # [{"epoch": i, "train_loss": x}, ...]
    test_top1: float
    macs: int
    wall_ms: float
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> "RunReport":
        return cls(**json.loads(Path(path).read_text()))


class SGD:
    """SGD with heavy-ball momentum, L2 weight decay and optional global-norm clipping."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0, clip_norm=None):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        for p, v, g in zip(self.params, self.velocity, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def predict(model, clips: np.ndarray, batch_size: int = 50) -> np.ndarray:
    """Argmax class per clip; ties go to the lowest class index."""
    out = []
    with no_grad():
        for i in range(0, len(clips), batch_size):
            out.append(np.argmax(model(clips[i:i + batch_size]).data, axis=1))
    return np.concatenate(out)


def evaluate(model, split: ClipBatch, batch_size: int = 50) -> float:
    """Single-view top-1 accuracy."""
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return float(np.mean(predict(model, split.clips, batch_size) == split.labels))


def make_data(cfg: TrainConfig) -> tuple[ClipBatch, ClipBatch]:
    base = cfg.dataset.base_spec()
    return (gen_dataset(base, "train", cfg.dataset.n_train),
            gen_dataset(base, "test", cfg.dataset.n_test))


def train(cfg: TrainConfig, data: tuple[ClipBatch, ClipBatch] | None = None):
    """Train from scratch; returns ``(RunReport, model)``."""
    t0 = time.perf_counter()
    train_set, test_set = data if data is not None else make_data(cfg)
    model = build_model(cfg.stem, cfg.atm, seed=cfg.seed)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    order_rng = np.random.default_rng([cfg.seed, 2])
    history = []
    n = len(train_set)
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            loss = cross_entropy(model(Tensor(train_set.clips[idx])), train_set.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch {i // cfg.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not all(np.isfinite(p.data).all() for p in opt.params):
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}, "
                                       f"batch {i // cfg.batch_size}")
            total += value * len(idx)
        history.append({"epoch": epoch, "train_loss": total / n})
        log.info("epoch %d loss %.4f", epoch, total / n)
    top1 = evaluate(model, test_set)
    report = RunReport(history, top1, int(model.macs()), (time.perf_counter() - t0) * 1e3,
                       cfg.to_dict())
    return report, model
