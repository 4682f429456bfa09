"""Losses, AdamW, plateau scheduling, and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .autograd import Tensor, backward, get_tape
from .blocks import ParamStore
from .checkpoint import Checkpoint, check_compatible
from .data import AugmentConfig, SamplePair, augment_pair, downsample_label, to_batch
from .metrics import ConfusionCounts, Metrics, binarize, confusion, metrics
from .model import Model, ModelConfig, build_model

log = logging.getLogger(__name__)

PRED_CLAMP = 1e-7
DICE_EPS = 1.0
LOG_HEADER = ("epoch", "loss", "precision", "recall", "f1", "iou", "lr")


def loss_bce_dice(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy plus soft dice loss (smoothing 1)."""
    g = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != g.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {g.shape}")
    g = g.astype(pred.dtype)
    p = F.clip(pred, PRED_CLAMP, 1 - PRED_CLAMP)
    gt, ngt = Tensor(g), Tensor(1 - g)
    bce = F.scale(F.mean(F.mul(gt, F.log(p)) + F.mul(ngt, F.log(1.0 - p))), -1.0)
    inter = F.sum(F.mul(pred, gt))
    dice = 1.0 - F.div(F.scale(inter, 2.0) + DICE_EPS, F.sum(pred) + (float(g.sum()) + DICE_EPS))
    return bce + dice


def triple_loss(masks, label, weights=(1.0, 0.5, 0.5)) -> Tensor:
    """Weighted fusion loss plus the two half-resolution branch losses."""
    fusion, m1, m2 = masks
    wf, w1, w2 = weights
    label = np.asarray(label.data if isinstance(label, Tensor) else label)
    if (w1 > 0 and m1 is None) or (w2 > 0 and m2 is None):
        raise ValueError("branch masks are missing but their loss weights are nonzero")
    total = F.scale(loss_bce_dice(fusion, label), wf)
    if w1 > 0 or w2 > 0:
        small = downsample_label(label)
        if w1 > 0:
            total = total + F.scale(loss_bce_dice(m1, small), w1)
        if w2 > 0:
            total = total + F.scale(loss_bce_dice(m2, small), w2)
    return total


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: ParamStore, lr: float = 1e-3, weight_decay: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> bool:
        """Apply one update from the accumulated ``.grad`` fields.

        Returns False (and leaves parameters and moments untouched) if any
        gradient or any updated value is non-finite.
        """
        for name, t in self.params.items():
            if t.grad is not None and not np.isfinite(t.grad).all():
                log.warning("non-finite gradient in %s; optimizer step skipped", name)
                return False
        step = self.step_count + 1
        b1, b2, lr = self.beta1, self.beta2, self.lr
        c1 = 1 - b1 ** step
        c2 = 1 - b2 ** step
        staged = {}
        for name, t in self.params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            dt = t.data.dtype.type
            theta = t.data * dt(1 - lr * self.weight_decay)
            m = self.m[name] * dt(b1) + g * dt(1 - b1)
            v = self.v[name] * dt(b2) + (g * g) * dt(1 - b2)
            theta = (theta - dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))).astype(t.data.dtype)
            if not np.isfinite(theta).all():
                log.warning("non-finite update for %s; optimizer step skipped", name)
                return False
            staged[name] = (theta, m, v)
        for name, t in self.params.items():
            t.data, self.m[name], self.v[name] = staged[name]
        self.step_count = step
        return True

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"step": self.step_count, "lr": self.lr, "weight_decay": self.weight_decay,
                "betas": [self.beta1, self.beta2], "eps": self.eps}
        tensors = {f"optim.m/{k}": v for k, v in self.m.items()}
        tensors.update({f"optim.v/{k}": v for k, v in self.v.items()})
        return meta, tensors


@dataclass
class Plateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a strictly better F1."""

    patience: int = 12
    factor: float = 0.1
    best: float = -np.inf
    counter: int = 0

    def step(self, optimizer: AdamW, val_f1: float) -> bool:
        if val_f1 > self.best:
            self.best = val_f1
            self.counter = 0
            return False
        self.counter += 1
        if self.counter >= self.patience:
            optimizer.lr *= self.factor
            self.counter = 0
            return True
        return False


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-3
    warmup: int = 3
    patience: int = 12
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    threshold: float = 0.5


# full-scale schedule (large batches, long warmup) for GPU-class runs
FULL_SCALE_PRESET = TrainConfig(epochs=250, batch=64, warmup=30)


def evaluate(model: Model, samples: list[SamplePair], batch: int = 8,
             threshold: float = 0.5) -> tuple[Metrics, ConfusionCounts]:
    """Micro-averaged metrics of the fusion output over ``samples``."""
    total = ConfusionCounts()
    for i in range(0, len(samples), batch):
        t1, t2, lab = to_batch(samples[i:i + batch])
        out = model.predict(Tensor(t1), Tensor(t2))
        total = total + confusion(binarize(out.fusion.data, threshold), lab.astype(np.uint8))
    return metrics(total), total


@dataclass
class TrainResult:
    best: Checkpoint
    log: list[tuple]
    model: Model
    diverged: bool = False


def model_checkpoint(model: Model, optimizer: AdamW | None = None) -> Checkpoint:
    ckpt = Checkpoint(model.config.to_dict(), model.params.state())
    if optimizer is not None:
        ckpt.optim, ckpt.optim_tensors = optimizer.state()
        ckpt.optim_tensors = {k: v.copy() for k, v in ckpt.optim_tensors.items()}
    return ckpt


def train_step(model: Model, optimizer: AdamW, batch: list[SamplePair]) -> tuple[float, bool]:
    t1, t2, lab = to_batch(batch)
    get_tape().reset()
    model.params.zero_grad()
    out = model(Tensor(t1), Tensor(t2))
    loss = triple_loss(out, lab, model.config.supervision_weights)
    value = float(loss.data)
    if not np.isfinite(value):
        get_tape().reset()
        return value, False
    backward(loss)
    return value, optimizer.step()


def train_loop(model_config: ModelConfig, train_set: list[SamplePair], val_set: list[SamplePair],
               cfg: TrainConfig | None = None, model: Model | None = None) -> TrainResult:
    """Train with AdamW + plateau schedule; keep the best-validation-F1 checkpoint.

    Validation is skipped for the first ``cfg.warmup`` epochs. If it never
    runs, the final parameters are returned as the best checkpoint.
    """
    cfg = cfg or TrainConfig()
    if not train_set:
        raise ValueError("training set is empty")
    model = model or build_model(model_config)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = Plateau(patience=cfg.patience)
    rng = np.random.default_rng([cfg.seed, 1])
    best = model_checkpoint(model)
    best_f1 = -np.inf
    rows: list[tuple] = []
    diverged = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            batch = [train_set[i] if cfg.augment is None else
                     augment_pair(train_set[i], seed=hash_seed(cfg.seed, epoch, int(i)), cfg=cfg.augment)
                     for i in idx]
            value, ok = train_step(model, opt, batch)
            if not ok:
                log.error("epoch %d: non-finite loss or gradient; stopping with the last good checkpoint", epoch)
                diverged = True
                break
            losses.append(value)
        if diverged:
            break
        mean_loss = float(np.mean(losses))
        if epoch > cfg.warmup and val_set:
            m, _ = evaluate(model, val_set, threshold=cfg.threshold)
            rows.append((epoch, mean_loss, m.precision, m.recall, m.f1, m.iou, opt.lr))
            if m.f1 > best_f1:
                best_f1 = m.f1
                best = model_checkpoint(model, opt)
            sched.step(opt, m.f1)
        else:
            rows.append((epoch, mean_loss, None, None, None, None, opt.lr))
        log.info("epoch %d loss %.4f lr %.2e f1 %s", epoch, mean_loss, opt.lr, rows[-1][4])
    if best_f1 == -np.inf and not diverged:
        best = model_checkpoint(model, opt)
    return TrainResult(best, rows, model, diverged)


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def format_log(rows: list[tuple]) -> str:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        return repr(float(v))

    lines = [",".join(LOG_HEADER)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    cfg = ModelConfig.from_dict(ckpt.config)
    model = build_model(cfg)
    check_compatible(ckpt, {k: t.shape for k, t in model.params.items()})
    model.params.load_state(ckpt.tensors)
    return model


def load_into(model: Model, ckpt: Checkpoint) -> None:
    """Initialise ``model`` from a checkpoint of a compatible configuration (pretrained start)."""
    check_compatible(ckpt, {k: t.shape for k, t in model.params.items()})
    model.params.load_state(ckpt.tensors)

