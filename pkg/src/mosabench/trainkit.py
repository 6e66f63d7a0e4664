"""Variety loss, Adam, and the pretraining / adaptation loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import Param, Tensor
from .forecastnet import Batch, ForecastModel, forward_batch, make_batch
from .metrics import EvalReport, report_from_predictions
from .mosa import AdaptMethod, AdaptedModel, parse_mask, prepare_adaptation
from .rng import SplitMix64

log = logging.getLogger(__name__)

DEFAULT_LR = {
    AdaptMethod.FT: 5e-5,
    AdaptMethod.ET: 5e-4,
    AdaptMethod.PA: 5e-5,
    AdaptMethod.NORM: 1e-4,
    AdaptMethod.MOSA: 5e-3,
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float | None = None
    batch_size: int = 10
    max_epochs: int = 100
    patience: int = 30
    seed: int = 0
    method: AdaptMethod = AdaptMethod.MOSA
    modular_mask: frozenset = frozenset()
    rank: int = 3
    init_std: float = 0.02

    def __post_init__(self):
        self.method = AdaptMethod.parse(self.method)
        self.modular_mask = parse_mask(self.modular_mask)
        if self.lr is None:
            self.lr = DEFAULT_LR[self.method]
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive, max_epochs non-negative")
        if self.patience > max(self.max_epochs, 1) and self.max_epochs > 0:
            raise ValueError("patience must not exceed max_epochs")
        if self.rank < 1:
            raise ValueError("rank must be positive")


def variety_loss(pred: Tensor, future) -> Tensor:
    """Mean over the batch of min_k (1/T) sum_t ||pred_k,t - y_t||^2.

    Accepts K x T x 2 (single sample) or B x K x T x 2. Only the winning
    hypothesis (lowest index on ties) receives gradient.
    """
    y = np.asarray(future, dtype=np.float64)
    single = pred.data.ndim == 3
    p = pred.data[None] if single else pred.data
    y = y[None] if single else y
    if p.shape[0] != y.shape[0] or p.shape[2:] != y.shape[1:]:
        raise dc.ShapeError(f"prediction {pred.shape} and future {np.shape(future)} disagree")
    B, K, T, _ = p.shape
    diff = p - y[:, None]
    per_mode = (diff * diff).sum(axis=-1).mean(axis=-1)  # B x K
    best = per_mode.argmin(axis=1)
    rows = np.arange(B)
    value = per_mode[rows, best].mean()

    def backward(g):
        grad = np.zeros_like(p)
        grad[rows, best] = diff[rows, best] * (2.0 / (T * B))
        dc.accumulate(pred, g * (grad[0] if single else grad))

    return dc.custom(np.asarray(value), (pred,), backward, "variety_loss")


class Adam:
    """Adam with bias correction; skips parameters that are not trainable."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if not p.trainable:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, state: Adam | None, lr: float) -> Adam:
    """Functional wrapper: one Adam update using the grads stored on ``params``."""
    if state is None:
        state = Adam(params, lr)
    state.lr = lr
    state.step()
    return state


# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ade: float
    val_fde: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    initial_val: EvalReport | None = None
    best_epoch: int = 0
    best_val_fde: float = math.inf

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def _slice(batch: Batch, idx) -> Batch:
    return Batch(batch.scene_onehot[idx], batch.offsets[idx], batch.last_obs[idx], batch.future[idx])


def _run(forward, trainables: list[Param], train: Batch, val: Batch, cfg: TrainConfig,
         label: str) -> TrainResult:
    """Shared epoch loop with validation-FDE early stopping. Leaves the best
    trainable values loaded on return."""
    opt = Adam(trainables, cfg.lr)
    rng = SplitMix64(cfg.seed)
    res = TrainResult()

    def val_report() -> EvalReport:
        with dc.no_grad():
            return report_from_predictions(forward(val).data, val.future)

    res.initial_val = val_report()
    res.best_val_fde = res.initial_val.topk_fde
    best = {p.name: p.data.copy() for p in trainables}
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.shuffle(list(range(n)))
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.asarray(order[start:start + cfg.batch_size])
            b = _slice(train, idx)
            opt.zero_grad()
            loss = variety_loss(forward(b), b.future)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingDiverged(f"{label}: non-finite loss {lv} at epoch {epoch}, "
                                       f"batch starting {start}, lr={cfg.lr}")
            dc.backward(loss)
            opt.step()
            total += lv * len(idx)
        rep = val_report()
        res.history.append(EpochRecord(epoch, total / n, rep.topk_ade, rep.topk_fde))
        log.debug("%s epoch %d loss %.5f val fde %.5f", label, epoch, total / n, rep.topk_fde)
        if rep.topk_fde < res.best_val_fde:
            res.best_val_fde, res.best_epoch = rep.topk_fde, epoch
            best = {p.name: p.data.copy() for p in trainables}
        elif epoch - res.best_epoch >= cfg.patience:
            break
    for p in trainables:
        p.data[...] = best[p.name]
    return res


def pretrain(model: ForecastModel, train_ds, val_ds, cfg: TrainConfig) -> tuple[ForecastModel, TrainResult]:
    """Train every parameter of a copy of ``model`` on the source data."""
    model = model.clone()
    model.set_trainable(model.params)
    cache: dict = {}
    train = make_batch(train_ds.samples, train_ds.scenes, model.config, cache)
    val = make_batch(val_ds.samples, val_ds.scenes, model.config, cache)
    res = _run(lambda b: forward_batch(model, b), list(model.params.values()), train, val, cfg, "pretrain")
    return model, res


def adapt(checkpoint: ForecastModel, target_ds, val_ds, cfg: TrainConfig) -> tuple[AdaptedModel, TrainResult]:
    """Adapt a copy of ``checkpoint`` to ``target_ds`` with ``cfg.method``."""
    if len(target_ds) < 1:
        raise ValueError("adaptation needs at least one target sample")
    adapted = prepare_adaptation(checkpoint, cfg.method, cfg.modular_mask, cfg.rank, cfg.init_std, cfg.seed)
    trainables = [p for p in adapted.all_params().values() if p.trainable]
    if not trainables:
        raise ValueError("empty trainable set")
    cache: dict = {}
    train = make_batch(target_ds.samples, target_ds.scenes, checkpoint.config, cache)
    val = make_batch(val_ds.samples, val_ds.scenes, checkpoint.config, cache)
    res = _run(adapted, trainables, train, val, cfg, f"adapt[{cfg.method.value}]")
    return adapted, res


def trainable_count(adapted: AdaptedModel) -> int:
    return int(sum(p.data.size for p in adapted.all_params().values() if p.trainable))
