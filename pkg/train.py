# train.py
"""Losses, Adam, the mini-batch training loop and grid search."""
import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator

from archdsl import ModelGraph, build_model
from dataset import Dataset, Split
from tensor import Tape, Tensor, backward, clip, log, mean_all, mul, neg, power, reshape, sub
from utils import DataError, NumericError

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
HISTORY_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]


class DivergedLoss(NumericError):
    pass


class LossKind(str, Enum):
    BCE = "bce"
    MSE = "mse"
    FOCAL = "focal"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = 0.001
    loss: LossKind = LossKind.BCE
    batch_size: int = 128
    epochs: int = 500
    dropout: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0
    patience: Optional[int] = None

    @field_validator("loss", mode="before")
    @classmethod
    def _loss_name(cls, v):
        return v.lower() if isinstance(v, str) else v

    @field_validator("learning_rate", "epsilon")
    @classmethod
    def _positive(cls, v, info):
        if not v > 0:
            raise ValueError(f"{info.field_name} must be > 0")
        return v

    @field_validator("batch_size")
    @classmethod
    def _batch(cls, v):
        if v < 1:
            raise ValueError("batch_size must be >= 1")
        return v

    # epochs = 0 is accepted as a no-op run
    @field_validator("epochs")
    @classmethod
    def _epochs(cls, v):
        if v < 0:
            raise ValueError("epochs must be >= 0")
        return v

    @field_validator("dropout")
    @classmethod
    def _dropout(cls, v):
        if not 0 <= v < 1:
            raise ValueError("dropout must lie in [0, 1)")
        return v

    @field_validator("beta1", "beta2", "focal_alpha")
    @classmethod
    def _unit_interval(cls, v, info):
        if not 0 <= v < 1 or (info.field_name == "focal_alpha" and v == 0):
            raise ValueError(f"{info.field_name} must lie in the open unit interval")
        return v

    @field_validator("focal_gamma")
    @classmethod
    def _gamma(cls, v):
        if v < 0:
            raise ValueError("focal_gamma must be >= 0")
        return v

    @field_validator("patience")
    @classmethod
    def _patience(cls, v):
        if v is not None and v < 1:
            raise ValueError("patience must be >= 1 when set")
        return v


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros(p.shape, dtype=np.float64) for p in params],
                   [np.zeros(p.shape, dtype=np.float64) for p in params])


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class Evaluation:
    loss: float
    accuracy: float
    probabilities: np.ndarray


@dataclass
class FitResult:
    model: ModelGraph
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: float = math.inf


def loss(kind, p, y, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean loss of predicted probabilities ``p`` against binary labels ``y``.

    ``p`` may be a Tensor (gradients flow through it) or anything array-like.
    """
    kind = LossKind(kind)
    if not isinstance(p, Tensor):
        p = Tensor(np.asarray(p, dtype=np.float64).reshape(-1))
    y = np.asarray(y, dtype=p.dtype).reshape(p.shape)

    if kind is LossKind.MSE:
        diff = sub(p, y)
        return mean_all(mul(diff, diff))

    pc = clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    if kind is LossKind.BCE:
        # -(y ln p + (1 - y) ln(1 - p))
        terms = mul(y, log(pc)) + mul(1 - y, log(sub(1.0, pc)))
        return neg(mean_all(terms))

    p_t = mul(y, pc) + mul(1 - y, sub(1.0, pc))
    alpha_t = y * alpha + (1 - y) * (1 - alpha)
    weighted = mul(alpha_t, log(p_t))
    if gamma:
        weighted = mul(power(sub(1.0, p_t), gamma), weighted)
    return neg(mean_all(weighted))


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update; rebinds each ``param.data``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DataError("adam_step: params, grads and state must align")
    state.t += 1
    correction1 = 1 - beta1 ** state.t
    correction2 = 1 - beta2 ** state.t
    for i, (param, g) in enumerate(zip(params, grads)):
        g = np.zeros(param.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != param.shape:
            raise DataError(f"adam_step: grad {g.shape} for parameter {param.shape}")
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        step = lr * (state.m[i] / correction1) / (np.sqrt(state.v[i] / correction2) + eps)
        param.data = (param.data - step).astype(param.dtype)
    return state


def _accuracy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean((probabilities >= 0.5).astype(int) == labels))


def evaluate(model: ModelGraph, X: np.ndarray, y: np.ndarray, config: Optional[TrainConfig] = None,
             batch_size: Optional[int] = None) -> Evaluation:
    config = config or TrainConfig()
    probabilities = model.predict_proba(X, batch_size or config.batch_size)
    if len(y) == 0:
        return Evaluation(math.nan, 0.0, probabilities)
    value = loss(config.loss, probabilities, y, config.focal_alpha, config.focal_gamma).item()
    return Evaluation(value, _accuracy(probabilities, np.asarray(y)), probabilities)


def fit(model: ModelGraph, dataset: Dataset, config: TrainConfig) -> FitResult:
    """Train in place with Adam; the model ends with its best-validation-loss parameters."""
    X_train, y_train = dataset.arrays(Split.TRAIN)
    X_val, y_val = dataset.arrays(Split.VAL)
    if len(y_train) == 0 or len(y_val) == 0:
        raise DataError("fit needs non-empty train and val splits")

    names, params = zip(*model.parameters())
    state = AdamState.for_params(params)
    rng = np.random.default_rng(config.seed)
    result = FitResult(model)
    best_state = model.state_dict()
    stale = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(y_train))
        total, correct = 0.0, 0
        for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                probs = model.forward(X_train[idx], training=True, rng=rng)
                value = loss(config.loss, reshape(probs, (len(idx),)), y_train[idx],
                             config.focal_alpha, config.focal_gamma)
            batch_loss = value.item()
            if not math.isfinite(batch_loss):
                raise DivergedLoss(f"{model.name.value}: loss {batch_loss} at epoch {epoch} batch {batch_no} "
                                   f"(lr={config.learning_rate})")
            grads = backward(tape, value)
            adam_step(params, [grads.get(p) for p in params], state, config.learning_rate,
                      config.beta1, config.beta2, config.epsilon)
            bad = [n for n, p in zip(names, params) if not np.all(np.isfinite(p.data))]
            if bad:
                raise DivergedLoss(f"{model.name.value}: non-finite parameters {bad[:3]} at epoch {epoch} "
                                   f"batch {batch_no} (lr={config.learning_rate})")
            total += batch_loss * len(idx)
            correct += int(np.sum((probs.data[:, 0] >= 0.5).astype(int) == y_train[idx]))

        val = evaluate(model, X_val, y_val, config)
        if not math.isfinite(val.loss):
            raise DivergedLoss(f"{model.name.value}: validation loss {val.loss} at epoch {epoch}")
        record = EpochRecord(epoch, total / len(order), correct / len(order), val.loss, val.accuracy)
        result.history.append(record)
        logger.debug("[fit] %s epoch %d train_loss=%.4f train_acc=%.3f val_loss=%.4f val_acc=%.3f",
                     model.name.value, epoch, record.train_loss, record.train_acc, val.loss, val.accuracy)

        if val.loss < result.best_val_loss:
            result.best_val_loss, result.best_epoch = val.loss, epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                logger.info("[fit] %s early stop at epoch %d (best %d)", model.name.value, epoch, result.best_epoch)
                break

    if result.best_epoch is not None:
        model.load_state_dict(best_state)
        logger.info("[fit] %s best epoch %d val_loss=%.4f", model.name.value, result.best_epoch,
                    result.best_val_loss)
    return result


def write_history_csv(history: Sequence[EpochRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([vars(r) for r in history], columns=HISTORY_COLUMNS)
    frame.to_csv(path, index=False)
    return path


@dataclass
class GridCell:
    index: int
    params: dict
    config: TrainConfig
    val_loss: float = math.inf
    val_acc: float = 0.0
    best_epoch: Optional[int] = None
    failed: bool = False
    error: Optional[str] = None


@dataclass
class GridResult:
    best: GridCell
    cells: list[GridCell]

    @property
    def best_config(self) -> TrainConfig:
        return self.best.config


def grid_search(model_name, dataset: Dataset, grid: dict[str, Sequence], base: Optional[TrainConfig] = None,
                arch: Optional[str] = None, width_scale: float = 1.0) -> GridResult:
    """Evaluate the Cartesian product of ``grid`` over ``base``.

    Keys are ``TrainConfig`` fields, iterated in sorted order. The winner has the
    highest validation accuracy, then the lower validation loss, then the
    earlier cell.
    """
    if not grid or any(len(values) == 0 for values in grid.values()):
        raise DataError("grid_search needs a non-empty grid")
    base = base or TrainConfig()
    keys = sorted(grid)
    cells: list[GridCell] = []
    X_val, y_val = dataset.arrays(Split.VAL)

    for index, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        params = dict(zip(keys, combo))
        config = TrainConfig.model_validate({**base.model_dump(), **params})
        cell = GridCell(index, params, config)
        model = build_model(model_name, dataset.input_shape, seed=config.seed, overrides=arch,
                            width_scale=width_scale, dropout=config.dropout)
        try:
            fitted = fit(model, dataset, config)
        except DivergedLoss as e:
            cell.failed, cell.error = True, str(e)
            logger.warning("[grid] cell %d %s diverged: %s", index, params, e)
        else:
            val = evaluate(model, X_val, y_val, config)
            cell.val_loss, cell.val_acc, cell.best_epoch = val.loss, val.accuracy, fitted.best_epoch
            logger.info("[grid] cell %d %s val_acc=%.3f val_loss=%.4f", index, params, val.accuracy, val.loss)
        cells.append(cell)

    best = min(cells, key=lambda c: (-c.val_acc, c.val_loss, c.index))
    return GridResult(best, cells)
