"""Weighted logistic loss, augmentation, and staged training plans."""

from __future__ import annotations

import csv
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError
from .graph import RCNGraph, normalize_image
from .tensor import ParameterStore, Tensor, backward, emit, recording, save_checkpoint, sgd_step, upsample_bilinear

log = logging.getLogger(__name__)

VARIANTS = ("RCN-VOC", "RCN-COCO", "RCN", "RCN-VOC-1", "custom")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossConfig:
    beta: float = 10.0
    eps: float = 1e-7

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")


def weighted_logistic_loss(pred: Tensor, label, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean over pixels of ``-y*beta*log(h) - (1-y)*log(1-h)``.

    ``h`` is clamped to ``[eps, 1-eps]`` before the logs; the clamp only
    affects values, the gradient is taken at the clamped point.
    """
    y = np.asarray(label, dtype=pred.dtype)
    if y.size != pred.data.size:
        raise ValueError(f"prediction {pred.shape} and label {y.shape} differ in size")
    y = y.reshape(pred.shape)
    h = np.clip(pred.data, cfg.eps, 1.0 - cfg.eps)
    per_pixel = -y * cfg.beta * np.log(h) - (1.0 - y) * np.log1p(-h)
    n = per_pixel.size
    value = np.asarray(per_pixel.mean(dtype=np.float64), dtype=pred.dtype).reshape(1, 1, 1, 1)
    dh = ((-y * cfg.beta / h + (1.0 - y) / (1.0 - h)) / n).astype(pred.dtype)

    def rule(g: np.ndarray):
        return (dh * g.reshape(()),)

    return emit("weighted_logistic_loss", value, (pred,), rule)


def compromise_point(beta: float, positive_rate: float = 0.5) -> float:
    """Loss-minimising probability for a pixel labelled positive at ``positive_rate``."""
    a = positive_rate * beta
    return a / (a + (1.0 - positive_rate))


# --------------------------------------------------------------------------
# samples and augmentation
# --------------------------------------------------------------------------


@dataclass
class Sample:
    """Normalised image (3, H, W) float32 with its binary label (H, W)."""

    image: np.ndarray
    label: np.ndarray
    annotator_id: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape[1:] != self.label.shape:
            raise ValueError(f"image {self.image.shape[1:]} and label {self.label.shape} extents differ")


def make_sample(image: np.ndarray, label: np.ndarray, annotator_id: int | None = None) -> Sample:
    label = getattr(label, "pixels", label)
    return Sample(normalize_image(image)[0], (np.asarray(label) > 0).astype(np.uint8), annotator_id)


@dataclass(frozen=True)
class AugmentConfig:
    crop_size: tuple[int, int] = (64, 64)
    vflip_prob: float = 0.5
    hflip_prob: float = 0.0
    scale_range: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"scale range must satisfy 0 < lo <= hi, got {self.scale_range}")
        for p in (self.vflip_prob, self.hflip_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"flip probability {p} outside [0, 1]")


def _resize(plane: np.ndarray, size: tuple[int, int], resample) -> np.ndarray:
    h, w = size
    return np.asarray(Image.fromarray(plane.astype(np.float32), mode="F").resize((w, h), resample=resample))


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random scale (bilinear image, nearest label), vertical flip, and crop."""
    img, lab = sample.image, sample.label
    meta = dict(sample.meta)
    lo, hi = cfg.scale_range
    s = float(rng.uniform(lo, hi)) if hi > lo else lo
    h, w = lab.shape
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (nh, nw) != (h, w):
        img = np.stack([_resize(c, (nh, nw), Image.BILINEAR) for c in img])
        lab = (_resize(lab, (nh, nw), Image.NEAREST) > 0.5).astype(np.uint8)
    meta["scale"] = s
    if rng.random() < cfg.vflip_prob:
        img, lab = img[:, ::-1], lab[::-1]
        meta["vflip"] = True
    if rng.random() < cfg.hflip_prob:
        img, lab = img[:, :, ::-1], lab[:, ::-1]
        meta["hflip"] = True
    ch, cw = cfg.crop_size
    ph, pw = max(0, ch - lab.shape[0]), max(0, cw - lab.shape[1])
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")
        lab = np.pad(lab, ((0, ph), (0, pw)), mode="reflect")
        meta["reflect_pad"] = (ph, pw)
    y0 = int(rng.integers(0, lab.shape[0] - ch + 1))
    x0 = int(rng.integers(0, lab.shape[1] - cw + 1))
    meta["crop"] = (y0, x0)
    return Sample(
        np.ascontiguousarray(img[:, y0 : y0 + ch, x0 : x0 + cw], dtype=np.float32),
        np.ascontiguousarray(lab[y0 : y0 + ch, x0 : x0 + cw]),
        sample.annotator_id,
        meta,
    )


def expand_annotators(
    corpus: Sequence[tuple[np.ndarray, Sequence[np.ndarray]]],
    mode: str = "all",
    annotator: int = 0,
) -> list[Sample]:
    """One sample per (image, annotator) in ``all`` mode, one per image in ``single`` mode."""
    out = []
    for i, (image, labels) in enumerate(corpus):
        if not labels:
            raise ValueError(f"image {i} has no annotator labels")
        if mode == "all":
            out.extend(make_sample(image, lab, k) for k, lab in enumerate(labels))
        elif mode == "single":
            if annotator >= len(labels):
                raise KeyError(f"image {i} has {len(labels)} annotators, annotator {annotator} requested")
            out.append(make_sample(image, labels[annotator], annotator))
        else:
            raise ValueError(f"annotator mode must be 'all' or 'single', got {mode!r}")
    return out


# --------------------------------------------------------------------------
# plans
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainStage:
    corpus: str = "main"
    epochs: int = 10
    images_per_epoch: int = 64
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_step: int = 0
    lr_gamma: float = 0.1
    annotators: str = "all"

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        if self.lr_step <= 0:
            return self.lr
        return self.lr * self.lr_gamma ** (epoch // self.lr_step)

    def validate(self) -> None:
        if self.images_per_epoch <= 0:
            raise ConfigError(f"images_per_epoch must be positive, got {self.images_per_epoch}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigError(f"negative learning rate {self.lr}")
        if self.annotators != "all" and not self.annotators.startswith("single:"):
            raise ConfigError(f"annotators must be 'all' or 'single:<id>', got {self.annotators!r}")


@dataclass(frozen=True)
class TrainPlan:
    stages: tuple[TrainStage, ...]
    variant: str = "custom"
    loss: LossConfig = LossConfig()
    augment: AugmentConfig = AugmentConfig()
    corpora: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if not self.stages:
            raise ConfigError("plan has no stages")
        for st in self.stages:
            st.validate()

    @classmethod
    def from_config(cls, cfg: dict[str, str]) -> TrainPlan:
        stages: dict[int, dict[str, str]] = {}
        corpora: dict[str, str] = {}
        top: dict[str, str] = {}
        for key, value in cfg.items():
            head, _, rest = key.partition(".")
            if head.startswith("stage") and head[5:].isdigit() and rest:
                stages.setdefault(int(head[5:]), {})[rest] = value
            elif head == "corpus" and rest:
                corpora[rest] = value
            else:
                top[key] = value
        try:
            parsed = []
            for idx in sorted(stages):
                raw = stages[idx]
                kw: dict = {}
                for f_name, f_type in (
                    ("corpus", str), ("epochs", int), ("images_per_epoch", int), ("batch_size", int),
                    ("lr", float), ("momentum", float), ("weight_decay", float), ("lr_step", int),
                    ("lr_gamma", float), ("annotators", str),
                ):  # fmt: skip
                    if f_name in raw:
                        kw[f_name] = f_type(raw.pop(f_name))
                if raw:
                    raise ConfigError(f"stage{idx}: unknown keys {', '.join(sorted(raw))}")
                parsed.append(TrainStage(**kw))
            loss = LossConfig(beta=float(top.pop("loss.beta", 10.0)), eps=float(top.pop("loss.eps", 1e-7)))
            crop = top.pop("augment.crop", "64x64").lower().split("x")
            lo, hi = (float(v) for v in top.pop("augment.scale_range", "0.7,1.3").split(","))
            aug = AugmentConfig(
                crop_size=(int(crop[0]), int(crop[1])),
                vflip_prob=float(top.pop("augment.vflip_prob", 0.5)),
                hflip_prob=float(top.pop("augment.hflip_prob", 0.0)),
                scale_range=(lo, hi),
            )
            variant = top.pop("variant", "custom")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed plan: {exc}") from exc
        top.pop("seed", None)
        if top:
            raise ConfigError(f"unknown plan keys: {', '.join(sorted(top))}")
        plan = cls(tuple(parsed), variant, loss, aug, corpora)
        plan.validate()
        return plan

    def to_config(self) -> dict[str, str]:
        out = {
            "variant": self.variant,
            "loss.beta": repr(self.loss.beta),
            "loss.eps": repr(self.loss.eps),
            "augment.crop": f"{self.augment.crop_size[0]}x{self.augment.crop_size[1]}",
            "augment.vflip_prob": repr(self.augment.vflip_prob),
            "augment.hflip_prob": repr(self.augment.hflip_prob),
            "augment.scale_range": f"{self.augment.scale_range[0]!r},{self.augment.scale_range[1]!r}",
        }
        for k, v in self.corpora.items():
            out[f"corpus.{k}"] = v
        for i, st in enumerate(self.stages, start=1):
            for f_name in TrainStage.__dataclass_fields__:
                out[f"stage{i}.{f_name}"] = str(getattr(st, f_name))
        return out


def variant_plan(variant: str, epochs: int = 30, images_per_epoch: int = 64, **stage_kw) -> TrainPlan:
    """Stage layout for the named training variants.

    ``RCN-COCO`` trains on the forged pre-training corpus, ``RCN`` continues
    from it on the main corpus, and ``RCN-VOC-1`` fine-trains on a single
    annotator's labels.
    """
    base = TrainStage(epochs=epochs, images_per_epoch=images_per_epoch, **stage_kw)
    if variant == "RCN-VOC":
        stages = (replace(base, corpus="main"),)
    elif variant == "RCN-COCO":
        stages = (replace(base, corpus="pretrain"),)
    elif variant == "RCN":
        stages = (replace(base, corpus="pretrain"), replace(base, corpus="main"))
    elif variant == "RCN-VOC-1":
        stages = (replace(base, corpus="main"), replace(base, corpus="finetune", annotators="single:0"))
    else:
        raise ConfigError(f"no built-in plan for variant {variant!r}")
    plan = TrainPlan(stages, variant)
    plan.validate()
    return plan


# --------------------------------------------------------------------------
# the training loop
# --------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    lr: float
    wall_time: float


def training_step(
    graph: RCNGraph, store: ParameterStore, images: np.ndarray, labels: np.ndarray, loss_cfg: LossConfig
) -> tuple[float, object]:
    """Forward and backward on one batch; returns the loss and the tape."""
    with recording() as tape:
        pred = graph(store, Tensor(images))
        if pred.shape[2:] != labels.shape[1:]:
            pred = upsample_bilinear(pred, labels.shape[1], labels.shape[2])
        loss = weighted_logistic_loss(pred, labels[:, None], loss_cfg)
        value = loss.item()
        if math.isfinite(value):
            backward(loss, tape)
    return value, tape


def run_stage(
    stage: TrainStage,
    graph: RCNGraph,
    store: ParameterStore,
    corpus: Sequence[Sample],
    rng: np.random.Generator,
    loss_cfg: LossConfig = LossConfig(),
    aug_cfg: AugmentConfig = AugmentConfig(),
    checkpoint: str | Path | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> list[EpochLog]:
    """Train ``store`` in place for one stage; per-epoch mean losses are returned."""
    stage.validate()
    if not corpus:
        raise ValueError("training corpus is empty")
    history = []
    for epoch in range(stage.epochs):
        t0 = time.perf_counter()
        lr = stage.lr_at(epoch)
        picks = rng.integers(0, len(corpus), size=stage.images_per_epoch)
        total, count = 0.0, 0
        for start in range(0, len(picks), stage.batch_size):
            batch = [augment(corpus[i], aug_cfg, rng) for i in picks[start : start + stage.batch_size]]
            images = np.stack([b.image for b in batch])
            labels = np.stack([b.label for b in batch])
            value, _ = training_step(graph, store, images, labels, loss_cfg)
            if not math.isfinite(value):
                store.zero_grad()
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch + 1}, images {start}-{start + len(batch) - 1}")
            sgd_step(store, lr, stage.momentum, stage.weight_decay)
            bad = next((k for k in store if not np.isfinite(store[k].data).all()), None)
            if bad is not None:
                raise TrainingDiverged(f"parameter {bad} became non-finite at epoch {epoch + 1}, images {start}-{start + len(batch) - 1}")
            total += value * len(batch)
            count += len(batch)
        entry = EpochLog(epoch + 1, total / count, lr, time.perf_counter() - t0)
        history.append(entry)
        log.info("epoch %d loss %.5f lr %g (%.1fs)", entry.epoch, entry.mean_loss, lr, entry.wall_time)
        if on_epoch is not None:
            on_epoch(entry)
    if checkpoint is not None:
        save_checkpoint(store, checkpoint)
    return history


def write_log(history: Sequence[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "lr", "wall_time"])
        for e in history:
            w.writerow([e.epoch, repr(e.mean_loss), repr(e.lr), f"{e.wall_time:.3f}"])
