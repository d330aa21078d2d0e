"""
Training loss (latitude-weighted MSE plus kinetic, potential and thermodynamic
penalties) and the evaluation metrics, latitude-weighted RMSE and ACC.

Loss terms run on the gradient tape; metrics are plain numpy on denormalized
fields.
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from .config import EARTH_RADIUS_M, GRAVITY, SECONDS_PER_HOUR
from .data_pipeline import LatLonGrid, NormalizationStats
from .logger import logger
from .tensor import Tensor, ShapeError, concat

ArrayOrList = Union[np.ndarray, Sequence[np.ndarray]]


class MissingChannelError(KeyError):
    pass


class UndefinedMetricError(ValueError):
    pass


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(0.3, ge=0.0)
    beta: float = Field(0.3, ge=0.0)
    gamma: float = Field(0.8, ge=0.0)


class ChannelBindings(BaseModel):
    """Which variables the physics penalties read."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    u: str = "u10"
    v: str = "v10"
    temperature: str = "t2m"
    geopotential: str = "z500"

    @property
    def g(self) -> float:
        return GRAVITY

    def index(self, var_names: Sequence[str], role: str) -> int:
        name = getattr(self, role)
        try:
            return list(var_names).index(name)
        except ValueError:
            raise MissingChannelError(f"Channel '{name}' bound as {role} is not in {list(var_names)}") from None

    def check(self, var_names: Sequence[str]) -> None:
        for role in ("u", "v", "temperature", "geopotential"):
            self.index(var_names, role)


def _channel(x: Tensor, idx: int) -> Tensor:
    return x[..., idx, :, :]


def _check_shapes(pred: Tensor, truth: Tensor) -> None:
    if pred.shape != truth.shape:
        raise ShapeError(f"Prediction {pred.shape} and target {truth.shape} differ")


def lat_weighted_mse(pred: Tensor, truth: Tensor, weights: np.ndarray) -> Tensor:
    _check_shapes(pred, truth)
    weights = np.asarray(weights)
    if weights.shape != (pred.shape[-2],):
        raise ShapeError(f"{weights.shape[0] if weights.ndim else 0} latitude weights for {pred.shape[-2]} rows")
    diff = pred - truth
    return (diff * diff * Tensor(weights.astype(pred.dtype)[:, None])).mean()


def kinetic_loss(pred: Tensor, truth: Tensor, bindings: ChannelBindings, var_names: Sequence[str]) -> Tensor:
    """Grid mean of |KE_pred - KE_true|, KE = (u^2 + v^2) / 2."""
    _check_shapes(pred, truth)
    iu, iv = bindings.index(var_names, "u"), bindings.index(var_names, "v")

    def energy(x: Tensor) -> Tensor:
        u, v = _channel(x, iu), _channel(x, iv)
        return (u * u + v * v) * 0.5

    return (energy(pred) - energy(truth)).abs().mean()


def potential_loss(pred: Tensor, truth: Tensor, bindings: ChannelBindings, var_names: Sequence[str]) -> Tensor:
    """Grid mean of g |z_pred - z_true|."""
    _check_shapes(pred, truth)
    iz = bindings.index(var_names, "geopotential")
    return ((_channel(pred, iz) - _channel(truth, iz)) * bindings.g).abs().mean()


def _zonal_difference(x: Tensor) -> Tensor:
    """x[j+1] - x[j-1] with periodic wrap along the last axis."""
    east = concat([x[..., 1:], x[..., :1]], axis=-1)
    west = concat([x[..., -1:], x[..., :-1]], axis=-1)
    return east - west


def _meridional_difference(x: Tensor) -> Tuple[Tensor, np.ndarray]:
    """Row differences, central inside and one-sided at the edges, plus the number of cells each spans."""
    h = x.shape[-2]
    parts = [x[..., 1:2, :] - x[..., 0:1, :]]
    if h > 2:
        parts.append(x[..., 2:, :] - x[..., :-2, :])
    parts.append(x[..., -1:, :] - x[..., -2:-1, :])
    cells = np.full(h, 2.0)
    cells[0] = cells[-1] = 1.0
    return concat(parts, axis=-2), cells


def spatial_gradients(x: Tensor, grid: LatLonGrid) -> Tuple[Tensor, Tensor]:
    """(d/dx, d/dy) of a [..., H, W] field in units per metre; dx carries the cos(lat) metric."""
    if tuple(x.shape[-2:]) != grid.shape:
        raise ShapeError(f"Field {x.shape} does not match grid {grid.shape}")
    coslat = np.cos(np.deg2rad(grid.lats))
    if np.any(np.abs(coslat) < 1e-12):
        raise ValueError("Zonal gradient is undefined on a grid row at the pole")
    dtype = x.dtype
    east = np.sign(grid.lons[1] - grid.lons[0])
    north = np.sign(grid.lats[1] - grid.lats[0])

    x_scale = east / (2.0 * grid.dlon_rad * EARTH_RADIUS_M * coslat)
    ddx = _zonal_difference(x) * Tensor(x_scale[:, None].astype(dtype))

    diff, cells = _meridional_difference(x)
    y_scale = north / (cells * grid.dy_m())
    ddy = diff * Tensor(y_scale[:, None].astype(dtype))
    return ddx, ddy


def thermo_residual(pred_T: Tensor, input_T: Tensor, pred_u: Tensor, pred_v: Tensor, grid: LatLonGrid,
                    dt_hours: float) -> Tensor:
    """
    dT/dt + u dT/dx + v dT/dy pointwise, in K per hour.

    dT/dt is the model's tendency (pred - input) / dt; winds are m/s.
    """
    if not dt_hours > 0:
        raise ValueError(f"dt must be positive, got {dt_hours}")
    dTdt = (pred_T - input_T) * (1.0 / dt_hours)
    dTdx, dTdy = spatial_gradients(pred_T, grid)
    return dTdt + (pred_u * dTdx + pred_v * dTdy) * SECONDS_PER_HOUR


def thermo_loss(pred_T: Tensor, input_T: Tensor, pred_u: Tensor, pred_v: Tensor, grid: LatLonGrid,
                dt_hours: float) -> Tensor:
    return thermo_residual(pred_T, input_T, pred_u, pred_v, grid, dt_hours).abs().mean()


@dataclass
class LossBreakdown:
    lat_mse: float
    kinetic: float
    potential: float
    thermo: float
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def weighted(self) -> Dict[str, float]:
        return {
            "lat_mse": self.lat_mse,
            "kinetic": self.weights.alpha * self.kinetic,
            "potential": self.weights.beta * self.potential,
            "thermo": self.weights.gamma * self.thermo,
        }

    @property
    def total(self) -> float:
        return float(sum(self.weighted.values()))

    def to_dict(self) -> Dict[str, float]:
        out = {"lat_mse": self.lat_mse, "kinetic": self.kinetic, "potential": self.potential, "thermo": self.thermo}
        out.update({f"weighted_{k}": v for k, v in self.weighted.items()})
        out["total"] = self.total
        return out


def _denormalize(x: Tensor, stats: Optional[NormalizationStats]) -> Tensor:
    if stats is None:
        return x
    std = Tensor(stats.std[:, None, None].astype(x.dtype))
    mean = Tensor(stats.mean[:, None, None].astype(x.dtype))
    return x * std + mean


def combined_loss(pred: Tensor, truth: Tensor, input_fields: Tensor, weights: LossWeights,
                  bindings: ChannelBindings, lat_weights: np.ndarray, grid: LatLonGrid, dt_hours: float,
                  var_names: Sequence[str],
                  stats: Optional[NormalizationStats] = None) -> Tuple[Tensor, LossBreakdown]:
    """
    L = lat_mse + alpha * kinetic + beta * potential + gamma * thermo.

    `pred`, `truth` and `input_fields` ([..., V, H, W], raw channels of x_t0)
    share one space; with `stats` (raw-channel statistics) they are taken as
    normalized and the physics terms are evaluated after denormalizing.
    The MSE term stays in the given space.
    """
    _check_shapes(pred, truth)
    if tuple(input_fields.shape) != tuple(pred.shape):
        raise ShapeError(f"Input fields {input_fields.shape} do not match prediction {pred.shape}")
    bindings.check(var_names)
    if stats is not None and tuple(stats.var_names) != tuple(var_names):
        stats = stats.subset(var_names)

    mse = lat_weighted_mse(pred, truth, lat_weights)
    total = mse
    terms = {"lat_mse": float(mse.item()), "kinetic": 0.0, "potential": 0.0, "thermo": 0.0}

    needs_physics = weights.alpha > 0 or weights.beta > 0 or weights.gamma > 0
    if needs_physics:
        p_pred, p_truth = _denormalize(pred, stats), _denormalize(truth, stats)
        p_input = _denormalize(input_fields, stats)
        if weights.alpha > 0:
            k = kinetic_loss(p_pred, p_truth, bindings, var_names)
            total = total + k * weights.alpha
            terms["kinetic"] = float(k.item())
        if weights.beta > 0:
            p = potential_loss(p_pred, p_truth, bindings, var_names)
            total = total + p * weights.beta
            terms["potential"] = float(p.item())
        if weights.gamma > 0:
            it = bindings.index(var_names, "temperature")
            iu, iv = bindings.index(var_names, "u"), bindings.index(var_names, "v")
            th = thermo_loss(_channel(p_pred, it), _channel(p_input, it), _channel(p_pred, iu),
                             _channel(p_pred, iv), grid, dt_hours)
            total = total + th * weights.gamma
            terms["thermo"] = float(th.item())
    return total, LossBreakdown(weights=weights, **terms)


# ---------------------------------------------------------------- metrics


def _as_stack(x: ArrayOrList) -> np.ndarray:
    arr = np.stack([np.asarray(a, dtype=np.float64) for a in x]) if isinstance(x, (list, tuple)) \
        else np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ValueError(f"Expected a non-empty batch of [V, H, W] fields, got shape {arr.shape}")
    return arr


def _names(var_names: Optional[Sequence[str]], n: int) -> List[str]:
    if var_names is None:
        return [f"ch{i}" for i in range(n)]
    if len(var_names) != n:
        raise ValueError(f"{len(var_names)} variable names for {n} channels")
    return list(var_names)


def rmse_metric(preds: ArrayOrList, truths: ArrayOrList, lat_weights: np.ndarray,
                var_names: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """Per variable: mean over samples of sqrt(mean_ij L(i) (pred - truth)^2)."""
    if isinstance(preds, (list, tuple)) and not preds:
        raise ValueError("rmse_metric needs at least one sample")
    p, t = _as_stack(preds), _as_stack(truths)
    if p.shape != t.shape:
        raise ShapeError(f"Prediction {p.shape} and target {t.shape} differ")
    w = np.asarray(lat_weights, dtype=np.float64)[:, None]
    per_sample = np.sqrt(np.mean(w * (p - t) ** 2, axis=(-2, -1)))
    return dict(zip(_names(var_names, p.shape[1]), per_sample.mean(axis=0).tolist()))


def acc_metric(preds: ArrayOrList, truths: ArrayOrList, climatology: np.ndarray, lat_weights: np.ndarray,
               var_names: Optional[Sequence[str]] = None, strict: bool = True) -> Dict[str, float]:
    """
    Per variable: sum L p' t' / sqrt(sum L p'^2 * sum L t'^2) over samples and grid,
    anomalies taken against `climatology`.

    An anomaly field with zero variance raises UndefinedMetricError, or gives
    NaN with a warning when `strict` is off.
    """
    if isinstance(preds, (list, tuple)) and not preds:
        raise ValueError("acc_metric needs at least one sample")
    p, t = _as_stack(preds), _as_stack(truths)
    if p.shape != t.shape:
        raise ShapeError(f"Prediction {p.shape} and target {t.shape} differ")
    c = np.asarray(climatology, dtype=np.float64)
    w = np.asarray(lat_weights, dtype=np.float64)[:, None]
    pa, ta = p - c, t - c
    names = _names(var_names, p.shape[1])
    out: Dict[str, float] = {}
    for v, name in enumerate(names):
        num = np.sum(w * pa[:, v] * ta[:, v])
        den = np.sqrt(np.sum(w * pa[:, v] ** 2) * np.sum(w * ta[:, v] ** 2))
        if not den > 0:
            if strict:
                raise UndefinedMetricError(f"ACC is undefined for '{name}': anomaly variance is zero")
            logger.warning(f"ACC undefined for {name}, reporting NaN", extra={"variable": name})
            out[name] = float("nan")
            continue
        out[name] = float(np.clip(num / den, -1.0, 1.0))
    return out


def climatology(fields: ArrayOrList) -> np.ndarray:
    """Temporal mean [V, H, W] of a stack of states."""
    return _as_stack(fields).mean(axis=0)


@dataclass
class MetricRow:
    variant: str
    variable: str
    lead_hours: float
    rmse: float
    acc: float


REPORT_COLUMNS = ["variant", "variable", "lead_hours", "rmse", "acc"]


@dataclass
class MetricsReport:
    rows: List[MetricRow] = field(default_factory=list)

    def add(self, variant: str, lead_hours: float, rmse: Dict[str, float], acc: Dict[str, float]) -> None:
        for name, value in rmse.items():
            self.rows.append(MetricRow(variant, name, float(lead_hours), float(value), float(acc.get(name, np.nan))))

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=REPORT_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "MetricsReport":
        df = pd.read_csv(path)
        return cls([MetricRow(str(r.variant), str(r.variable), float(r.lead_hours), float(r.rmse), float(r.acc))
                    for r in df.itertuples(index=False)])

    def lookup(self, variant: str, variable: str, lead_hours: float) -> MetricRow:
        for r in self.rows:
            if r.variant == variant and r.variable == variable and r.lead_hours == float(lead_hours):
                return r
        raise KeyError(f"No row for {variant}/{variable}/{lead_hours}h")
