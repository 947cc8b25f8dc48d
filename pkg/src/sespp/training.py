"""SGD + BCE training with reduce-on-plateau and early stopping."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Augmenter
from .models import Model
from .tensor import Tensor

IMPROVEMENT_TOL = 1e-6


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr0: float = 0.01
    batch_size: int = 48
    momentum: float = 0.9
    weight_decay: float = 1e-4
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    early_stop_patience: int = 20
    seed: int = 0

    @classmethod
    def for_backbone(cls, backbone: str, preset: str = "desk", **overrides) -> "TrainConfig":
        if preset == "desk":
            base = dict(batch_size=16)
        else:
            base = dict(batch_size=48 if backbone == "densenet" else 64)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        for name in ("epochs", "lr0", "batch_size", "plateau_patience", "early_stop_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must be in [0, 1) and weight decay non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience >= self.early_stop_patience:
            raise ValueError("plateau patience must be shorter than early-stop patience")

    def to_dict(self) -> dict:
        return asdict(self)


def bce_loss(probas: Tensor, labels: Tensor) -> Tensor:
    return T.bce(probas, labels)


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with momentum; weight decay is folded into the gradient before the velocity update."""

    def __init__(self, named_params, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(named_params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
            sgd_step(p.data, g, self.velocity[name], self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def sgd_step(w: np.ndarray, g: np.ndarray, v: np.ndarray, lr: float, momentum: float, weight_decay: float) -> None:
    """In place: g' = g + wd*w; v = momentum*v + g'; w = w - lr*v."""
    v *= momentum
    v += g + weight_decay * w
    w -= lr * v


# ---------------------------------------------------------------------------
# schedules


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.1, tol: float = IMPROVEMENT_TOL):
        self.lr, self.patience, self.factor, self.tol = lr, patience, factor, tol
        self.best = np.inf
        self.stale = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience: int = 20, tol: float = IMPROVEMENT_TOL):
        self.patience, self.tol = patience, tol
        self.best = np.inf
        self.stale = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best - self.tol:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def plateau_update(val_losses, lr: float, patience: int = 10, factor: float = 0.1) -> float:
    """Learning rate after replaying ``val_losses`` through the plateau rule from ``lr``."""
    sched = PlateauScheduler(lr, patience, factor)
    for v in val_losses:
        sched.step(v)
    return sched.lr


def early_stop_check(val_losses, patience: int = 20) -> bool:
    """Whether the stop rule fires on the last epoch of ``val_losses``."""
    stopper = EarlyStopping(patience)
    stop = False
    for v in val_losses:
        stop = stopper.step(v)
    return stop


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = "completed"

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr"]
        for i, (tl, vl, lr) in enumerate(zip(self.train_loss, self.val_loss, self.lr), start=1):
            lines.append(f"{i},{tl:.6f},{vl:.6f},{lr:.6g}")
        return "\n".join(lines) + "\n"


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def evaluate_loss(model: Model, X: np.ndarray, y: np.ndarray, augmenter: Augmenter, batch_size: int) -> float:
    total = 0.0
    with T.no_grad():
        model.eval()
        for sl in _batches(len(X), batch_size):
            p = T.sigmoid(model.forward(Tensor(augmenter.eval_batch(X[sl]))))
            total += T.bce(p, Tensor(y[sl].reshape(-1, 1))).item() * (sl.stop - sl.start)
    return total / len(X)


def predict_scores(model: Model, X: np.ndarray, augmenter: Augmenter, batch_size: int = 64) -> np.ndarray:
    out = []
    for sl in _batches(len(X), batch_size):
        out.append(model.predict_proba(Tensor(augmenter.eval_batch(X[sl]))).data.reshape(-1))
    return np.concatenate(out).astype(np.float64)


def train(
    model: Model,
    train_data: tuple,
    val_data: tuple,
    cfg: TrainConfig,
    augmenter: Augmenter,
    log=None,
) -> tuple[dict, TrainHistory]:
    """Fit ``model`` on (X, y) arrays and return the best-validation state and history.

    The model is left holding the best-validation parameters.
    """
    cfg.validate()
    X, y = train_data
    Xv, yv = val_data
    if len(X) == 0 or len(Xv) == 0:
        raise ValueError("train and validation subsets must be non-empty")
    opt = SGD(model.named_parameters(), cfg.lr0, cfg.momentum, cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor)
    stopper = EarlyStopping(cfg.early_stop_patience)
    hist = TrainHistory()
    best_state, best_val = model.state_dict(), np.inf
    t0 = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(X))
        model.train()
        seen, running = 0, 0.0
        for sl in _batches(len(X), cfg.batch_size):
            idx = order[sl]
            xb = Tensor(augmenter.train_batch(X[idx], rng))
            yb = Tensor(y[idx].reshape(-1, 1))
            loss = T.bce(T.sigmoid(model.forward(xb)), yb)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            running += loss.item() * len(idx)
            seen += len(idx)

        val_loss = evaluate_loss(model, Xv, yv, augmenter, max(cfg.batch_size, 64))
        hist.train_loss.append(running / seen)
        hist.val_loss.append(val_loss)
        hist.lr.append(opt.lr)
        hist.wall_time.append(time.perf_counter() - t0)
        if val_loss < best_val:
            best_val, best_state = val_loss, model.state_dict()
            hist.best_epoch = epoch
        if log is not None:
            log(f"epoch {epoch:3d}  train {running / seen:.4f}  val {val_loss:.4f}  lr {opt.lr:.2g}")

        opt.lr = sched.step(val_loss)
        if stopper.step(val_loss):
            hist.stop_reason = "early_stopped"
            break

    model.load_state_dict(best_state)
    model.eval()
    return best_state, hist
