"""Focal loss, Adam with warmup + cosine schedule, clipping, early stopping."""
import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, NumericError
from .evalmask import task_auroc
from .numerics import ops
from .numerics.tensor import Trace

P_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    max_epochs: int = 100
    patience: int | None = 15
    clip_norm: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: tuple | None = None
    seed: int = 0
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.warmup_epochs < 0:
            raise ConfigurationError("batch_size/max_epochs must be positive", module="trainer")
        if self.patience is not None and not 0 < self.patience < self.max_epochs:
            raise ConfigurationError(f"patience {self.patience} must be in (0, max_epochs)", module="trainer")
        if self.focal_gamma < 0:
            raise ConfigurationError("focal_gamma must be >= 0", module="trainer")
        if self.focal_alpha is not None and any(a <= 0 for a in self.focal_alpha):
            raise ConfigurationError("focal_alpha entries must be > 0", module="trainer")
        if self.base_lr <= 0 or self.clip_norm <= 0 or self.weight_decay < 0:
            raise ConfigurationError("base_lr and clip_norm must be > 0, weight_decay >= 0", module="trainer")


def default_patience(n_classes):
    return 15 if n_classes == 3 else 20


def inverse_frequency_alpha(targets, n_classes):
    """Per-class weights proportional to 1/frequency, normalised to mean 1."""
    k = 2 if n_classes == 2 else n_classes
    counts = np.bincount(np.asarray(targets), minlength=k).astype(np.float64)
    if np.any(counts == 0):
        raise ConfigurationError("every class needs at least one training example", module="trainer")
    inv = 1.0 / counts
    return tuple(float(v) for v in inv / inv.mean())


def focal_loss(probs, targets, gamma=2.0, alpha=None):
    """Mean of ``-alpha[y] * (1 - p_t)**gamma * log(p_t)`` over the batch.

    ``probs`` is (B, C) class probabilities or (B,) positive-class
    probabilities for binary tasks; ``p_t`` is clamped to [1e-7, 1 - 1e-7].
    """
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    binary = probs.ndim == 1
    k = 2 if binary else probs.shape[-1]
    if y.size != probs.shape[0]:
        raise ContractError(f"{y.size} targets for {probs.shape[0]} predictions", module="trainer")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ContractError(f"target index outside 0..{k - 1}", module="trainer")
    alpha = np.ones(k) if alpha is None else np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (k,):
        raise ContractError(f"alpha needs {k} entries", module="trainer")
    dt = probs.dtype
    if binary:
        yf = y.astype(dt)
        p_t = ops.add(ops.mul(probs, yf), ops.mul(ops.sub(1.0, probs), 1.0 - yf))
    else:
        onehot = np.eye(k, dtype=dt)[y]
        p_t = ops.sum(ops.mul(probs, onehot), axis=-1)
    p_t = ops.clamp(p_t, P_CLAMP, 1.0 - P_CLAMP)
    weight = ops.pow_scalar(ops.sub(1.0, p_t), gamma)
    per = ops.mul(ops.mul(weight, ops.log(p_t)), (-alpha[y]).astype(dt))
    return ops.mean(per)


def lr_at(epoch, cfg):
    """Linear warmup to ``base_lr`` over ``warmup_epochs``, then cosine to 0 at the last epoch."""
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.base_lr * (epoch + 1) / w
    span = cfg.max_epochs - 1 - w
    if span <= 0:
        return cfg.base_lr
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / span))


def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place when their global norm exceeds ``max_norm``; return the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


class Adam:
    """Adam with decoupled weight decay (``p -= lr * wd * p`` before the moment update)."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        for p in self.params:
            if not p.requires_grad:
                raise ContractError("optimizer asked to update a frozen parameter", module="trainer")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data -= p.data.dtype.type(lr * self.weight_decay) * p.data
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def trainable_parameters(model):
    return [p for _, p in model.named_parameters() if p.requires_grad]


def predict(model, dataset, batch_size=64, x=None, x_fm=None):
    """Eval-mode probabilities for every record, batched, without a trace."""
    model.eval()
    x = dataset.x if x is None else x
    if x_fm is None and getattr(model, "needs_fm", False):
        x_fm = dataset.x_fm
    out = []
    for lo in range(0, len(x), batch_size):
        sl = slice(lo, lo + batch_size)
        probs, _ = model(x[sl], None if x_fm is None else x_fm[sl])
        out.append(probs.data)
    return np.concatenate(out, axis=0)


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_val_auroc: float
    log: list = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False
    max_grad_norm_after_clip: float = 0.0

    def log_csv(self, class_names):
        return training_log_csv(self.log, class_names)


def training_log_csv(rows, class_names):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "lr", "train_loss", "val_auroc_macro", *[f"val_auroc_{c}" for c in class_names], "wall_seconds"])
    for r in rows:
        w.writerow(
            [
                r["epoch"],
                repr(float(r["lr"])),
                repr(float(r["train_loss"])),
                repr(float(r["val_auroc_macro"])),
                *[repr(float(v)) for v in r["val_auroc_per_class"]],
                f"{r['wall_seconds']:.3f}",
            ]
        )
    return buf.getvalue()


def train(model, train_set, val_set, cfg, n_classes=None, val_metric=None, on_step=None):
    """Minibatch training with early stopping on validation AUROC.

    Returns a :class:`TrainResult`; the model is left holding the best-epoch
    weights. ``val_metric(model, epoch)`` may replace the validation AUROC
    (used for testing the stopping rule); it returns ``(macro, per_class)``.
    ``cfg.patience=None`` disables early stopping.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigurationError("train and validation splits must be non-empty", module="trainer")
    n_classes = n_classes or getattr(model, "n_classes", 3)
    alpha = cfg.focal_alpha or inverse_frequency_alpha(train_set.targets, n_classes)
    params = trainable_parameters(model)
    if not params:
        raise ConfigurationError("model has no trainable parameters", module="trainer")
    opt = Adam(params, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    needs_fm = getattr(model, "needs_fm", False)
    x_fm_all = train_set.x_fm if needs_fm else None

    result = TrainResult(best_state=model.state_dict(), best_epoch=-1, best_val_auroc=-math.inf)
    since_best = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        model.train()
        order = rng.permutation(len(train_set))
        losses = []
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = np.sort(order[lo : lo + cfg.batch_size])
            model.zero_grad()
            try:
                with Trace() as tr:
                    probs, _ = model(train_set.x[idx], None if x_fm_all is None else x_fm_all[idx], rng)
                    loss = focal_loss(probs, train_set.targets[idx], cfg.focal_gamma, alpha)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericError("non-finite loss")
                tr.backward(loss)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}", module="trainer") from exc
            clip_grad_norm(params, cfg.clip_norm)
            result.max_grad_norm_after_clip = max(result.max_grad_norm_after_clip, global_grad_norm(params))
            opt.step(lr)
            result.steps += 1
            losses.append(value)
            if on_step is not None:
                on_step(model, result.steps)

        if val_metric is not None:
            macro, per = val_metric(model, epoch)
        else:
            macro, per = task_auroc(predict(model, val_set), val_set.targets, n_classes)
        result.log.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(losses)),
                "val_auroc_macro": macro,
                "val_auroc_per_class": tuple(per),
                "wall_seconds": time.perf_counter() - t0,
            }
        )
        if macro > result.best_val_auroc + cfg.min_delta:
            result.best_val_auroc = macro
            result.best_epoch = epoch
            result.best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                result.stopped_early = True
                break
    model.load_state_dict(result.best_state)
    model.eval()
    return result

