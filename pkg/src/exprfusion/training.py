"""Focal loss, Adam, the learning-rate range test and the epoch loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import FeatureSequence, SequenceBatch, batch_stream, make_batches
from .errors import (
    ConfigError, ContractError, DataError, DivergenceError, EmptyBatchError, InputError, NumericError,
)
from .metrics import IGNORE_INDEX, NUM_CLASSES, ClassScore, ConfusionMatrix, macro_f1
from .model import FusionModel
from .tensor import Tensor, backward, make_rng, no_grad, record

log = logging.getLogger(__name__)


@dataclass
class FocalLossConfig:
    gamma: float = 2.0
    class_weights: tuple[float, ...] = (1.0,) * NUM_CLASSES
    ignore_index: int = IGNORE_INDEX
    inverse_frequency: bool = False

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.gamma < 0:
            raise ConfigError(f"loss.gamma must be nonnegative, got {self.gamma}")
        if len(self.class_weights) != NUM_CLASSES or min(self.class_weights) < 0:
            raise ConfigError("loss.class_weights needs 8 nonnegative values")
        if 0 <= self.ignore_index < NUM_CLASSES:
            raise ConfigError("loss.ignore_index must not be a valid class code")


def inverse_frequency_weights(labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> tuple[float, ...]:
    """``n / (8 * n_c)`` per class; classes with no frames get weight 0."""
    y = np.asarray(labels).reshape(-1)
    y = y[y != ignore_index]
    counts = np.bincount(y, minlength=NUM_CLASSES)
    return tuple(float(len(y) / (NUM_CLASSES * c)) if c else 0.0 for c in counts)


def focal_loss(logits: Tensor, labels, cfg: FocalLossConfig | None = None) -> Tensor:
    """Mean of ``-w_y (1 - p_y)^gamma log p_y`` over non-ignored positions."""
    cfg = cfg or FocalLossConfig()
    c = logits.shape[-1]
    if c != NUM_CLASSES:
        raise InputError(f"expected {NUM_CLASSES} logits per position, got {c}")
    z = logits.data.reshape(-1, c)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != z.shape[0]:
        raise InputError(f"{y.size} labels for {z.shape[0]} positions")
    keep = y != cfg.ignore_index
    if ((y[keep] < 0) | (y[keep] >= c)).any():
        raise InputError("label out of range 0..7")
    rows = np.flatnonzero(keep)
    n = rows.size
    if n == 0:
        raise EmptyBatchError("every position is ignored")
    yk = y[rows]
    shifted = z[rows] - z[rows].max(axis=1, keepdims=True)
    lsm = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    lp = lsm[np.arange(n), yk]
    p = np.exp(lp)
    one_minus = -np.expm1(lp)
    w = np.asarray(cfg.class_weights)[yk]
    gamma = cfg.gamma
    modulator = one_minus**gamma
    loss = -(w * modulator * lp).sum() / n

    def grad_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            tail = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1) * p * lp, 0.0)
        coef = -(w / n) * (modulator - tail) * g
        d = -np.exp(lsm) * coef[:, None]
        d[np.arange(n), yk] += coef
        full = np.zeros_like(z)
        full[rows] = d
        return (full.reshape(logits.shape),)

    return record(np.asarray(loss), (logits,), grad_fn, "focal_loss")


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"adam.learning_rate must be nonnegative, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("adam.epsilon must be positive")


class Adam:
    """Bias-corrected Adam over named parameters; clears gradients after each step."""

    def __init__(self, named_params, cfg: AdamConfig | None = None):
        self.cfg = cfg or AdamConfig()
        self.named_params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = self.cfg.learning_rate
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.step_count = 0

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self) -> None:
        for name, p in self.named_params:
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {name}")
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon
        self.step_count += 1
        t = self.step_count
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for name, p in self.named_params:
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + eps)
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "lr": self.lr, "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.step_count = state["step_count"]
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


@dataclass
class LrFinderConfig:
    min_lr: float = 1e-7
    max_lr: float = 1.0
    num_steps: int = 100
    smoothing: float = 0.05
    divergence: float = 4.0

    def __post_init__(self):
        if not 0 < self.min_lr < self.max_lr:
            raise ConfigError("lr_finder needs 0 < min_lr < max_lr")
        if self.num_steps < 10:
            raise ConfigError("lr_finder.num_steps must be at least 10")
        if not 0 < self.smoothing <= 1:
            raise ConfigError("lr_finder.smoothing must lie in (0, 1]")
        if self.divergence <= 1:
            raise ConfigError("lr_finder.divergence must exceed 1")

    def schedule(self) -> np.ndarray:
        # scalar pow per step: vectorized numpy pow can differ from it in the last bit
        ratio, last = self.max_lr / self.min_lr, self.num_steps - 1
        return np.array([self.min_lr * ratio ** (i / last) for i in range(self.num_steps)])


@dataclass
class LrFinderResult:
    suggested_lr: float
    lrs: list[float]
    losses: list[float]
    raw_losses: list[float]
    stopped_early: bool

    @property
    def curve(self) -> list[tuple[float, float]]:
        return list(zip(self.lrs, self.losses))


def suggest_lr(lrs: Sequence[float], losses: Sequence[float]) -> float:
    """Rate at the steepest descent of loss against log(lr), divided by 10."""
    if len(lrs) < 2:
        return float(lrs[0]) / 10.0
    slopes = np.gradient(np.asarray(losses), np.log(np.asarray(lrs)))
    return float(lrs[int(np.argmin(slopes))]) / 10.0


def _batch_loss(model, batch: SequenceBatch, loss_cfg, rng) -> Tensor:
    logits = model.forward(batch.features, training=True, rng=rng)
    return focal_loss(logits, batch.labels, loss_cfg)


def lr_range_test(model: FusionModel, batches: Sequence[SequenceBatch], cfg: LrFinderConfig | None = None,
                  loss_cfg: FocalLossConfig | None = None, adam_cfg: AdamConfig | None = None,
                  rng: np.random.Generator | None = None) -> LrFinderResult:
    """Sweep the learning rate geometrically, one Adam step per batch.

    Uses a private optimizer and restores the model's parameters afterwards,
    so the sweep leaves no trace on ``model``.
    """
    cfg = cfg or LrFinderConfig()
    rng = rng if rng is not None else make_rng(0)
    if len(batches) < cfg.num_steps:
        raise DataError(f"lr range test needs {cfg.num_steps} batches, got {len(batches)}")
    snapshot = model.state_dict()
    grads = {name: p.grad for name, p in model.named_parameters()}
    opt = Adam(model.named_parameters(), adam_cfg or AdamConfig())
    alpha = cfg.smoothing
    lrs, smoothed, raw = [], [], []
    avg, best, stopped = 0.0, np.inf, False
    try:
        for i, lr in enumerate(cfg.schedule()):
            try:
                opt.zero_grad()
                loss = _batch_loss(model, batches[i], loss_cfg, rng)
                value = loss.item()
                backward(loss)
                opt.lr = float(lr)
                opt.step()
            except NumericError:
                if i == 0:
                    raise NumericError(f"loss is non-finite at the minimum learning rate {lr:g}") from None
                stopped = True
                break
            avg = (1.0 - alpha) * avg + alpha * value
            s = avg / (1.0 - (1.0 - alpha) ** (i + 1))
            lrs.append(float(lr))
            smoothed.append(float(s))
            raw.append(value)
            best = min(best, s)
            if i > 0 and s > cfg.divergence * best:
                stopped = True
                break
    finally:
        model.load_state_dict(snapshot)
        for name, p in model.named_parameters():
            p.grad = grads[name]
    return LrFinderResult(suggest_lr(lrs, smoothed), lrs, smoothed, raw, stopped)


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    auto_lr: bool = True
    target_train_f1: float | None = None
    track_train_f1: bool = False
    loss: FocalLossConfig = field(default_factory=FocalLossConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    lr_finder: LrFinderConfig = field(default_factory=LrFinderConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be nonnegative")


def seeded_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent PCG64 streams for init, lr search, shuffling and dropout."""
    children = np.random.SeedSequence(int(seed)).spawn(4)
    names = ("init", "lr_finder", "shuffle", "dropout")
    return {n: np.random.Generator(np.random.PCG64(c)) for n, c in zip(names, children)}


@dataclass
class EvalResult:
    loss: float
    confusion: ConfusionMatrix
    macro_f1: float
    per_class: list[ClassScore]
    predictions: np.ndarray


def evaluate(model: FusionModel, windows: Sequence[FeatureSequence], batch_size: int = 16,
             loss_cfg: FocalLossConfig | None = None) -> EvalResult:
    """Evaluation-mode loss and macro F1 over the real, labeled frames of ``windows``."""
    loss_cfg = loss_cfg or FocalLossConfig()
    cm = ConfusionMatrix()
    total, scored, preds = 0.0, 0, []
    with no_grad():
        for batch in make_batches(windows, batch_size, rng=None):
            logits = model.forward(batch.features, training=False)
            pred = logits.data.argmax(axis=-1)
            preds.append(pred)
            labels = np.where(batch.mask, batch.labels, loss_cfg.ignore_index)
            n = int((labels != loss_cfg.ignore_index).sum())
            if n:
                total += focal_loss(logits, labels, loss_cfg).item() * n
                scored += n
            cm.update(labels, pred, loss_cfg.ignore_index)
    score, per_class = macro_f1(cm)
    predictions = np.concatenate(preds) if preds else np.empty((0, 0), dtype=np.int64)
    return EvalResult(total / scored if scored else float("nan"), cm, score, per_class, predictions)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_macro_f1: float
    lr: float
    train_macro_f1: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["train_macro_f1"] is None:
            del d["train_macro_f1"]
        return d


@dataclass
class FitResult:
    history: list[EpochRecord]
    best_epoch: int | None
    best_macro_f1: float | None
    best_state: dict[str, np.ndarray]
    learning_rate: float
    lr_search: LrFinderResult | None = None


def fit(model: FusionModel, train_windows: Sequence[FeatureSequence], val_windows: Sequence[FeatureSequence],
        cfg: TrainConfig | None = None, on_epoch: Callable[[EpochRecord], None] | None = None) -> FitResult:
    """Train ``model`` in place and leave it holding the best-validation weights."""
    cfg = cfg or TrainConfig()
    if not train_windows or not val_windows:
        raise DataError("training and validation sets must both be nonempty")
    if cfg.epochs == 0:
        return FitResult([], None, None, model.state_dict(), cfg.adam.learning_rate)
    rngs = seeded_rngs(cfg.seed)
    loss_cfg = cfg.loss
    if loss_cfg.inverse_frequency:
        labels = np.concatenate([w.labels[w.mask] for w in train_windows])
        loss_cfg = replace(loss_cfg, class_weights=inverse_frequency_weights(labels, loss_cfg.ignore_index))

    search = None
    lr = cfg.adam.learning_rate
    if cfg.auto_lr:
        batches = batch_stream(train_windows, cfg.batch_size, rngs["lr_finder"], cfg.lr_finder.num_steps)
        search = lr_range_test(model, batches, cfg.lr_finder, loss_cfg, cfg.adam, rngs["lr_finder"])
        lr = search.suggested_lr
        log.info("lr range test suggests %.3g", lr)

    opt = Adam(model.named_parameters(), replace(cfg.adam, learning_rate=lr))
    history: list[EpochRecord] = []
    best_f1, best_epoch, best_state = -1.0, None, model.state_dict()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for b, batch in enumerate(make_batches(train_windows, cfg.batch_size, rngs["shuffle"])):
            labels = np.where(batch.mask, batch.labels, loss_cfg.ignore_index)
            if not (labels != loss_cfg.ignore_index).any():
                continue
            try:
                loss = focal_loss(model.forward(batch.features, True, rngs["dropout"]), labels, loss_cfg)
                backward(loss)
                opt.step()
            except NumericError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            losses.append(loss.item())
        val = evaluate(model, val_windows, cfg.batch_size, loss_cfg)
        train_f1 = None
        if cfg.track_train_f1 or cfg.target_train_f1 is not None:
            train_f1 = evaluate(model, train_windows, cfg.batch_size, loss_cfg).macro_f1
        rec = EpochRecord(epoch, float(np.mean(losses)), val.loss, val.macro_f1, lr, train_f1)
        history.append(rec)
        log.info("epoch %d train_loss %.5f val_loss %.5f val_macro_f1 %.4f",
                 epoch, rec.train_loss, rec.val_loss, rec.val_macro_f1)
        if on_epoch is not None:
            on_epoch(rec)
        if val.macro_f1 > best_f1:
            best_f1, best_epoch, best_state = val.macro_f1, epoch, model.state_dict()
        if cfg.target_train_f1 is not None and train_f1 >= cfg.target_train_f1:
            break
    model.load_state_dict(best_state)
    return FitResult(history, best_epoch, best_f1, best_state, lr, search)
