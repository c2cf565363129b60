"""Training loop: ADAM, learning-rate schedules, gradient clipping, early stopping.

Schedules update once per epoch and validation runs after every epoch in
eval mode (batch-norm running statistics). Early stopping compares against
the best validation loss seen so far, not the previous epoch.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .autodiff import Tape, Tensor
from .errors import ConfigError, DimensionError, NumericalError
from .graph import ArchSpec, ParamStore, forward


def _strict(cls, d, where):
    if d is None:
        return cls()
    if isinstance(d, cls):
        return d
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    return cls(**d)


@dataclass
class AdamConfig:
    name: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class SchedulerConfig:
    name: str = "none"
    period: int = 10
    factor: float = 0.1
    min_lr: float = 0.0


@dataclass
class EarlyStopConfig:
    patience: int = 5
    min_delta: float = 0.0


@dataclass
class SplitConfig:
    level: str = "pixel"
    fractions: list = field(default_factory=lambda: [0.8, 0.2])
    stratified: bool = True


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    clip_norm: float | None = None
    early_stop: EarlyStopConfig | None = None
    loss: dict = field(default_factory=lambda: {"name": "cross_entropy"})
    seed: int = 0
    task: str = "segmentation"
    binary: bool = False
    split: SplitConfig = field(default_factory=SplitConfig)

    def check(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        o = self.optimizer
        if o.name != "adam":
            raise ConfigError(f"unsupported optimizer {o.name!r}")
        if not (0 < o.beta1 < 1 and 0 < o.beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)")
        if self.scheduler.name not in ("none", "step", "cosine"):
            raise ConfigError(f"unknown scheduler {self.scheduler.name!r}")
        if self.scheduler.name == "step" and self.scheduler.period < 1:
            raise ConfigError("step scheduler period must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if self.early_stop is not None and self.early_stop.patience < 1:
            raise ConfigError("early_stop patience must be >= 1")
        if self.loss.get("name") not in losses.LOSSES:
            raise ConfigError(f"unknown loss {self.loss.get('name')!r}")
        if self.task not in ("segmentation", "reconstruction"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.split.level not in ("pixel", "image"):
            raise ConfigError(f"unknown split level {self.split.level!r}")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"TrainConfig: unknown field(s) {unknown}")
        try:
            d["optimizer"] = _strict(AdamConfig, d.get("optimizer"), "optimizer")
            d["scheduler"] = _strict(SchedulerConfig, d.get("scheduler"), "scheduler")
            d["split"] = _strict(SplitConfig, d.get("split"), "split")
            if d.get("early_stop") is not None:
                d["early_stop"] = _strict(EarlyStopConfig, d["early_stop"], "early_stop")
            return cls(**d).check()
        except TypeError as exc:
            raise ConfigError(f"TrainConfig: {exc}") from exc

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def to_dict(self):
        return dataclasses.asdict(self)


# -- optimizer pieces -----------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place ADAM update with bias-corrected moments."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: params, grads and state differ in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} vs parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.dtype, copy=False)
    return state


def lr_at(scheduler, base_lr, epoch, total=None):
    if isinstance(scheduler, dict):
        scheduler = SchedulerConfig(**scheduler)
    name = scheduler.name
    if name == "none":
        return base_lr
    if name == "step":
        return base_lr * scheduler.factor ** (epoch // scheduler.period)
    if name == "cosine":
        if not total:
            raise ConfigError("cosine schedule needs the total epoch count")
        frac = min(epoch, total) / total
        return scheduler.min_lr + 0.5 * (base_lr - scheduler.min_lr) * (1 + math.cos(math.pi * frac))
    raise ConfigError(f"unknown scheduler {name!r}")


def clip_grad_norm(grads, max_norm):
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ConfigError("max_norm must be > 0")
    norm = float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * np.asarray(scale, dtype=g.dtype) for g in grads]
    return grads, norm


def should_stop(val_losses, patience, min_delta=0.0):
    """True once ``patience`` epochs in a row failed to beat the best loss by ``min_delta``."""
    if patience < 1:
        raise ConfigError("patience must be >= 1")
    best, since = math.inf, 0
    for v in val_losses:
        if v < best - min_delta:
            best, since = v, 0
        else:
            since += 1
    return since >= patience


# -- history / checkpoints ----------------------------------------------------------------

@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    metric: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = -1
    metric_name: str = ""

    def __len__(self):
        return len(self.epoch)

    def rows(self):
        return zip(self.epoch, self.train_loss, self.val_loss, self.metric, self.lr)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "metric", "lr"])
            for e, tl, vl, m, lr in self.rows():
                w.writerow([e, repr(float(tl)), repr(float(vl)), repr(float(m)), repr(float(lr))])


def save_checkpoint(prefix, spec, params, sidecar):
    """Write ``prefix.dlsa`` (parameters) and ``prefix.json`` (metadata + arch)."""
    params.save(prefix + ".dlsa")
    doc = dict(sidecar)
    doc["arch"] = spec.to_dict()
    tmp = prefix + ".json.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, prefix + ".json")


def load_checkpoint(path):
    prefix = path[:-5] if path.endswith((".dlsa", ".json")) else path
    with open(prefix + ".json", encoding="utf-8") as fh:
        doc = json.load(fh)
    spec = ArchSpec.from_dict(doc["arch"])
    return spec, ParamStore.load(prefix + ".dlsa", spec), doc


# -- data plumbing ----------------------------------------------------------------------

@dataclass
class TrainData:
    """Inputs, targets and the pixel masks / item lists of each split."""

    images: np.ndarray
    targets: np.ndarray
    train_items: np.ndarray
    val_items: np.ndarray
    train_mask: np.ndarray | None = None
    val_mask: np.ndarray | None = None


def prepare_data(ds, cfg: TrainConfig):
    from .data import split_images, split_pixels

    seed = cfg.seed
    if cfg.task == "reconstruction":
        targets = ds.images
    else:
        if ds.labels is None:
            raise ConfigError("segmentation training needs labels in the dataset")
        targets = ds.binary_labels() if cfg.binary else ds.labels.astype(np.int32)
    fr = list(cfg.split.fractions)
    if cfg.split.level == "image":
        parts = split_images(len(ds), fr, seed)
        return TrainData(ds.images, targets, parts[0], parts[1])
    if cfg.task == "reconstruction":
        raise ConfigError("pixel-level splits apply to segmentation labels only")
    masks = split_pixels(targets, fr, seed, stratified=cfg.split.stratified)
    tr = np.flatnonzero(masks.train.any(axis=(1, 2)))
    va = np.flatnonzero(masks.val.any(axis=(1, 2)))
    return TrainData(ds.images, targets, tr, va, masks.train, masks.val)


def _has_batchnorm(spec):
    return any("batchnorm" in n.post_ops for n in spec.nodes)


def batches(items, batch_size, rng, min_size=1):
    """Shuffle then chunk; an undersized final chunk is folded into the previous one."""
    order = items[rng.permutation(len(items))]
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_size:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def compute_loss(cfg, out, target, mask):
    spec = dict(cfg.loss)
    name = spec.pop("name")
    fn = losses.LOSSES[name]
    if cfg.task == "reconstruction":
        m = None if mask is None else mask[:, None]
        return fn(out, target, m, **spec)
    if name in losses.PROB_LOSSES:
        from .autodiff import softmax_channels
        out = softmax_channels(out)
    return fn(out, target, mask, **spec)


def predict(spec, params, images, batch_size=16):
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(forward(spec, params, Tensor(images[i:i + batch_size]), train=False).data)
    return np.concatenate(outs)


def evaluate(spec, params, data: TrainData, cfg: TrainConfig):
    """Validation loss and metric (macro F1 or Pearson) in eval mode."""
    idx = data.val_items
    if len(idx) == 0:
        return math.nan, math.nan
    out = predict(spec, params, data.images[idx], cfg.batch_size)
    target = data.targets[idx]
    mask = None if data.val_mask is None else data.val_mask[idx]
    loss = compute_loss(cfg, Tensor(out), target, mask).item()
    if cfg.task == "reconstruction":
        metric = losses.pearson(out, target)
    else:
        metric = losses.f1_score(out.argmax(axis=1), target, mask, n_classes=out.shape[1]).macro
    return loss, metric


def train(spec, params, data: TrainData, cfg: TrainConfig, checkpoint=None, log=None):
    """Fit ``params`` in place; returns ``(history, best_params)``.

    ``checkpoint`` is a path prefix; when given, the best-validation weights
    are persisted there every time they improve.
    """
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    trainable = [t for _, t in params.trainable()]
    state = AdamState.zeros(trainable)
    opt = cfg.optimizer
    hist = TrainHistory(metric_name="pearson" if cfg.task == "reconstruction" else "macro_f1")
    best_params, best = params.copy(), math.inf
    min_size = 2 if _has_batchnorm(spec) else 1
    total = max(cfg.epochs - 1, 1)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(cfg.scheduler, cfg.learning_rate, epoch, total)
        running = []
        for b, idx in enumerate(batches(np.asarray(data.train_items), cfg.batch_size, rng, min_size)):
            x = Tensor(data.images[idx])
            mask = None if data.train_mask is None else data.train_mask[idx]
            with Tape() as tape:
                out = forward(spec, params, x, train=True)
                loss = compute_loss(cfg, out, data.targets[idx], mask)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch}, batch {b}, lr {lr}")
            tape.backward(loss)
            grads = [t.grad for t in trainable]
            if cfg.clip_norm is not None:
                grads, _ = clip_grad_norm(grads, cfg.clip_norm)
            adam_step(trainable, grads, state, lr, opt.beta1, opt.beta2, opt.eps)
            running.append(value)
            del tape
        val_loss, metric = evaluate(spec, params, data, cfg)
        hist.epoch.append(epoch)
        hist.train_loss.append(float(np.mean(running)))
        hist.val_loss.append(val_loss)
        hist.metric.append(metric)
        hist.lr.append(lr)
        hist.wall_time.append(time.perf_counter() - t0)
        if val_loss < best or hist.best_epoch < 0:
            best, hist.best_epoch = val_loss, epoch
            best_params = params.copy()
            if checkpoint is not None:
                save_checkpoint(checkpoint, spec, best_params,
                                {"train_config": cfg.to_dict(), "epoch": epoch, "val_loss": val_loss,
                                 "metric": metric, "task": cfg.task})
        if log is not None:
            log(f"epoch {epoch}: train {hist.train_loss[-1]:.5f} val {val_loss:.5f} "
                f"{hist.metric_name} {metric:.4f} lr {lr:.2e}")
        if cfg.early_stop is not None and should_stop(hist.val_loss, cfg.early_stop.patience,
                                                      cfg.early_stop.min_delta):
            break
    return hist, best_params
