"""
Optimization loop: AdamW with decoupled weight decay, cosine schedule with
linear warmup, early stopping on validation loss, autoregressive rollout,
evaluation against persistence.
"""

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .data_pipeline import (
    GridSample, GridSequence, LatLonGrid, NormalizationStats, WindowedExample,
    latitude_weights, prepare_inputs, stack_windows,
)
from .logger import logger
from .model import BlockDivergenceError, ForecastModel
from .physics import (
    ChannelBindings, LossBreakdown, LossWeights, MetricsReport, acc_metric, climatology, combined_loss,
    rmse_metric,
)
from .tensor import GradientTape, Tensor

EPOCH_LOG_COLUMNS = [
    "epoch", "lr", "train_total", "train_lat_mse", "train_kinetic", "train_potential", "train_thermo", "val_total",
]
PERSISTENCE = "persistence"


class TrainingDivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: OptimizerState, lr: float) -> bool:
    """
    One AdamW update in place. Returns False, leaving parameters and state
    untouched, when any gradient is non-finite.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            logger.warning(f"Non-finite gradient in {name}; skipping optimizer step", extra={"step": state.step})
            return False

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        p.data = p.data - lr * state.weight_decay * p.data
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return True


class AdamW:
    """AdamW over a module's named parameters, reading `.grad`."""

    def __init__(self, params: Dict[str, Tensor], weight_decay: float = 1e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def step(self, lr: float) -> bool:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        return adamw_step(self.params, grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------- schedule


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    total_epochs: int = Field(20, ge=1)
    steps_per_epoch: int = Field(1, ge=1)
    warmup_fraction: float = 0.1
    base_lr: float = Field(5e-5, ge=0.0)

    @field_validator("warmup_fraction")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")
        return v

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_fraction * self.total_steps)))


def cosine_warmup_lr(step: int, schedule: ScheduleConfig) -> float:
    """Linear 0 -> base_lr over the warmup, then half-cosine down to 0 at the final step."""
    total, warmup = schedule.total_steps, schedule.warmup_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside schedule [0, {total}]")
    if step <= warmup:
        return schedule.base_lr * step / warmup
    progress = (step - warmup) / (total - warmup)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class EarlyStopState:
    tolerance: int = 10
    best: float = math.inf
    epochs_since_improvement: int = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; True when it strictly improved on the best loss."""
        if val_loss < self.best:
            self.best = val_loss
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_improvement >= self.tolerance


# ---------------------------------------------------------------- training


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(20, ge=1)
    batch_size: int = Field(4, ge=1)
    base_lr: float = Field(5e-5, ge=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    warmup_fraction: float = 0.1
    early_stop_tolerance: int = Field(10, ge=1)
    seed: int = 0
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    bindings: ChannelBindings = Field(default_factory=ChannelBindings)


@dataclass
class TrainResult:
    epoch_log: pd.DataFrame
    breakdowns: List[Dict[str, float]]
    best_epoch: int
    best_val_loss: float
    optimizer_steps: int
    stopped_early: bool
    best_state: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def _batch_loss(model: ForecastModel, curr: np.ndarray, prev: np.ndarray, target: np.ndarray,
                stats: NormalizationStats, grid: LatLonGrid, lat_w: np.ndarray, dt_hours: float,
                config: TrainConfig):
    dtype = np.dtype(model.config.dtype)
    n_vars = model.n_variables
    var_names = model.config.variables
    try:
        pred = model(Tensor(curr.astype(dtype)), Tensor(prev.astype(dtype)))
    except BlockDivergenceError as e:
        raise TrainingDivergenceError(str(e)) from e
    return combined_loss(
        pred, Tensor(target.astype(dtype)), Tensor(curr[:, :n_vars].astype(dtype)), config.loss_weights,
        config.bindings, lat_w, grid, dt_hours, var_names, stats.subset(var_names),
    )


def _mean_breakdown(parts: List[LossBreakdown], sizes: List[int]) -> Dict[str, float]:
    total = float(sum(sizes))
    keys = parts[0].to_dict().keys()
    return {k: sum(p.to_dict()[k] * n for p, n in zip(parts, sizes)) / total for k in keys}


def validation_loss(model: ForecastModel, windows: Sequence[WindowedExample], stats: NormalizationStats,
                    grid: LatLonGrid, config: TrainConfig) -> float:
    curr, prev, target = stack_windows(windows, stats)
    lat_w = latitude_weights(grid)
    dt = windows[0].x_curr.dt_hours
    was_training = model.training
    model.eval()
    try:
        parts, sizes = [], []
        for start in range(0, len(curr), config.batch_size):
            sl = slice(start, start + config.batch_size)
            _, br = _batch_loss(model, curr[sl], prev[sl], target[sl], stats, grid, lat_w, dt, config)
            parts.append(br)
            sizes.append(len(curr[sl]))
    finally:
        model.train(was_training)
    return _mean_breakdown(parts, sizes)["total"]


def train(model: ForecastModel, train_windows: Sequence[WindowedExample], val_windows: Sequence[WindowedExample],
          stats: NormalizationStats, grid: LatLonGrid, config: TrainConfig) -> TrainResult:
    """
    Minimize the combined loss over `train_windows`; keeps the parameters with
    the best validation loss and restores them into `model` before returning.
    """
    if not train_windows:
        raise ValueError("No training windows")
    if not val_windows:
        raise ValueError("No validation windows")
    config.bindings.check(model.config.variables)

    curr, prev, target = stack_windows(train_windows, stats)
    lat_w = latitude_weights(grid)
    dt = train_windows[0].x_curr.dt_hours
    n = len(curr)
    steps_per_epoch = math.ceil(n / config.batch_size)
    schedule = ScheduleConfig(total_epochs=config.epochs, steps_per_epoch=steps_per_epoch,
                              warmup_fraction=config.warmup_fraction, base_lr=config.base_lr)
    params = model.parameters()
    optimizer = AdamW(params, weight_decay=config.weight_decay)
    early = EarlyStopState(tolerance=config.early_stop_tolerance)
    rng = np.random.default_rng(config.seed)

    rows, breakdowns = [], []
    best_state = model.state_dict()
    best_epoch = 0
    global_step = 0
    stopped_early = False
    started = time.monotonic()

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(n)
        parts, sizes = [], []
        lr = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            with GradientTape() as tape:
                loss, br = _batch_loss(model, curr[idx], prev[idx], target[idx], stats, grid, lat_w, dt, config)
            if tape.nodes:
                tape.backward(loss)
            global_step += 1
            lr = cosine_warmup_lr(global_step, schedule)
            optimizer.step(lr)
            parts.append(br)
            sizes.append(len(idx))

        train_terms = _mean_breakdown(parts, sizes)
        val_total = validation_loss(model, val_windows, stats, grid, config)
        if not math.isfinite(val_total):
            logger.error(f"Validation loss is non-finite at epoch {epoch}", extra={"epoch": epoch})
            raise TrainingDivergenceError(f"Validation loss became {val_total} at epoch {epoch}")

        if early.update(val_total):
            best_state = model.state_dict()
            best_epoch = epoch
        rows.append({
            "epoch": epoch,
            "lr": lr,
            "train_total": train_terms["total"],
            "train_lat_mse": train_terms["lat_mse"],
            "train_kinetic": train_terms["kinetic"],
            "train_potential": train_terms["potential"],
            "train_thermo": train_terms["thermo"],
            "val_total": val_total,
        })
        breakdowns.append(dict(train_terms, epoch=epoch, val_total=val_total))
        logger.info(
            f"Epoch {epoch}/{config.epochs} finished",
            extra={"epoch": epoch, "lr": lr, "train_total": train_terms["total"], "val_total": val_total,
                   "duration_ms": int((time.monotonic() - started) * 1000)}
        )
        if early.should_stop:
            stopped_early = True
            logger.info(f"Early stopping after {epoch} epochs", extra={"epoch": epoch, "best_epoch": best_epoch})
            break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        epoch_log=pd.DataFrame(rows, columns=EPOCH_LOG_COLUMNS),
        breakdowns=breakdowns,
        best_epoch=best_epoch,
        best_val_loss=early.best,
        optimizer_steps=optimizer.state.step,
        stopped_early=stopped_early,
        best_state=best_state,
    )


# ---------------------------------------------------------------- rollout and evaluation


def rollout(model: ForecastModel, stats: NormalizationStats, x_prev: np.ndarray, x_curr: np.ndarray,
            dt_hours: float, steps: int) -> List[np.ndarray]:
    """
    Autoregressive forecast in physical units: each prediction becomes x_t0 of
    the next step and the old x_t0 becomes x_t-1. Works on [V,H,W] or [N,V,H,W].
    """
    if steps < 0:
        raise ValueError(f"steps must be non-negative, got {steps}")
    raw_stats = stats.subset(model.config.variables)
    batched = x_curr.ndim == 4
    prev = x_prev if batched else x_prev[None]
    curr = x_curr if batched else x_curr[None]
    preds = []
    for _ in range(steps):
        curr_in, prev_in = prepare_inputs(prev, curr, dt_hours, stats)
        pred = raw_stats.invert(model.predict(curr_in, prev_in)).astype(np.float32)
        preds.append(pred if batched else pred[0])
        prev, curr = curr, pred
    return preds


def lead_steps(lead_hours: float, dt_hours: float) -> int:
    steps = lead_hours / dt_hours
    if lead_hours <= 0 or abs(steps - round(steps)) > 1e-9:
        raise ValueError(f"Lead {lead_hours}h is not a positive multiple of dt {dt_hours}h")
    return int(round(steps))


def evaluate(model: ForecastModel, sequence: GridSequence, stats: NormalizationStats, leads: Sequence[float],
             clim: Optional[np.ndarray] = None, variant: Optional[str] = None,
             include_persistence: bool = True) -> MetricsReport:
    """
    RMSE and ACC per variable per lead over every origin in `sequence`, plus
    the persistence baseline (prediction = x_t0) through the same metrics.
    """
    dt = sequence.dt_hours
    steps = {lead: lead_steps(lead, dt) for lead in leads}
    max_steps = max(steps.values())
    if len(sequence) < max_steps + 2:
        raise ValueError(f"Sequence of {len(sequence)} steps is too short for a {max_steps}-step rollout")

    data = sequence.stack()
    origins = np.arange(1, len(sequence) - max_steps)
    prev, curr = data[origins - 1], data[origins]
    clim = climatology(data) if clim is None else clim
    lat_w = latitude_weights(sequence.grid)
    names = list(sequence.var_names)
    label = variant or model.config.variant

    preds = rollout(model, stats, prev, curr, dt, max_steps)
    report = MetricsReport()
    for lead, k in steps.items():
        truth = data[origins + k]
        report.add(label, lead, rmse_metric(preds[k - 1], truth, lat_w, names),
                   acc_metric(preds[k - 1], truth, clim, lat_w, names, strict=False))
        if include_persistence:
            report.add(PERSISTENCE, lead, rmse_metric(curr, truth, lat_w, names),
                       acc_metric(curr, truth, clim, lat_w, names, strict=False))
    logger.info(f"Evaluated {label}", extra={"variant": label, "origins": len(origins), "leads": list(leads)})
    return report


def forecast(model: ForecastModel, sequence: GridSequence, stats: NormalizationStats, start: int,
             steps: int) -> GridSequence:
    """K-step forecast from origin `start` (x_t-1 = start-1, x_t0 = start) as a grid sequence."""
    if start < 1 or start + steps >= len(sequence):
        raise ValueError(f"Forecast window start={start} steps={steps} is outside a {len(sequence)}-step sequence")
    x_prev, x_curr = sequence[start - 1], sequence[start]
    preds = rollout(model, stats, x_prev.fields, x_curr.fields, sequence.dt_hours, steps)
    samples = [GridSample(x_curr.time + i + 1, p, sequence.var_names, sequence.dt_hours) for i, p in enumerate(preds)]
    return GridSequence(sequence.grid, sequence.var_names, sequence.dt_hours, samples)
