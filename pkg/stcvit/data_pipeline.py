"""
Synthetic gridded weather, temporal-derivative channels, z-score normalization
and latitude geometry.
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.preprocessing import StandardScaler

from .config import DEFAULT_DT_HOURS, DEFAULT_VARIABLES, EARTH_RADIUS_M, SECONDS_PER_HOUR, SUPPORTED_REGIMES
from .logger import logger

DERIVATIVE_PREFIX = "d_"


class ZeroVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class LatLonGrid:
    lats: np.ndarray
    lons: np.ndarray

    def __post_init__(self):
        lats = np.asarray(self.lats, dtype=np.float64)
        lons = np.asarray(self.lons, dtype=np.float64)
        object.__setattr__(self, "lats", lats)
        object.__setattr__(self, "lons", lons)
        if lats.ndim != 1 or lons.ndim != 1 or lats.size < 2 or lons.size < 2:
            raise ValueError(f"Grid needs at least 2 latitudes and 2 longitudes, got {lats.shape}, {lons.shape}")
        if np.any(np.abs(lats) > 90) or np.any(lons < 0) or np.any(lons >= 360):
            raise ValueError("Latitudes must lie in [-90, 90] and longitudes in [0, 360)")
        for label, axis in (("latitude", lats), ("longitude", lons)):
            steps = np.diff(axis)
            if np.any(steps == 0):
                raise ValueError(f"Duplicate {label} coordinates")
            if not (np.all(steps > 0) or np.all(steps < 0)):
                raise ValueError(f"{label.capitalize()}s must be strictly monotonic")
            if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
                raise ValueError(f"{label.capitalize()} spacing must be uniform")

    @classmethod
    def equiangular(cls, height: int, width: int) -> "LatLonGrid":
        """Cell-centred grid, north to south, starting at 0 degrees east."""
        lats = 90.0 - (np.arange(height) + 0.5) * 180.0 / height
        lons = np.arange(width) * 360.0 / width
        return cls(lats, lons)

    @property
    def height(self) -> int:
        return int(self.lats.size)

    @property
    def width(self) -> int:
        return int(self.lons.size)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def dlat_rad(self) -> float:
        return float(np.deg2rad(abs(self.lats[1] - self.lats[0])))

    @property
    def dlon_rad(self) -> float:
        return float(np.deg2rad(abs(self.lons[1] - self.lons[0])))

    def dx_m(self) -> np.ndarray:
        """Zonal cell spacing in metres per latitude row."""
        return EARTH_RADIUS_M * np.cos(np.deg2rad(self.lats)) * self.dlon_rad

    def dy_m(self) -> float:
        return EARTH_RADIUS_M * self.dlat_rad


@dataclass
class GridSample:
    time: int
    fields: np.ndarray
    var_names: Tuple[str, ...]
    dt_hours: float = DEFAULT_DT_HOURS

    def __post_init__(self):
        self.var_names = tuple(self.var_names)
        if self.fields.ndim != 3:
            raise ValueError(f"Sample fields must be [V, H, W], got shape {self.fields.shape}")
        if len(self.var_names) != self.fields.shape[0]:
            raise ValueError(f"{len(self.var_names)} variable names for {self.fields.shape[0]} channels")
        if len(set(self.var_names)) != len(self.var_names):
            raise ValueError(f"Variable names must be unique: {self.var_names}")
        if self.dt_hours <= 0:
            raise ValueError(f"dt_hours must be positive, got {self.dt_hours}")
        if not np.all(np.isfinite(self.fields)):
            raise ValueError(f"Sample at time {self.time} holds non-finite values")


@dataclass
class GridSequence:
    """A grid file in memory."""

    grid: LatLonGrid
    var_names: Tuple[str, ...]
    dt_hours: float = DEFAULT_DT_HOURS
    samples: List[GridSample] = field(default_factory=list)

    def __post_init__(self):
        self.var_names = tuple(self.var_names)
        for s in self.samples:
            if s.var_names != self.var_names or s.fields.shape[1:] != self.grid.shape:
                raise ValueError(f"Sample at time {s.time} does not match the sequence grid/variables")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return GridSequence(self.grid, self.var_names, self.dt_hours, self.samples[index])
        return self.samples[index]

    def __iter__(self):
        return iter(self.samples)

    def stack(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(self.var_names)) + self.grid.shape, dtype=np.float32)
        return np.stack([s.fields for s in self.samples])


@dataclass
class WindowedExample:
    x_prev: GridSample
    x_curr: GridSample
    target: GridSample
    lead_steps: int = 1

    def __post_init__(self):
        if self.lead_steps < 1:
            raise ValueError(f"lead_steps must be positive, got {self.lead_steps}")
        if self.x_prev.time + 1 != self.x_curr.time or self.target.time != self.x_curr.time + self.lead_steps:
            raise ValueError(
                f"Window times inconsistent: prev={self.x_prev.time} curr={self.x_curr.time} "
                f"target={self.target.time} lead={self.lead_steps}"
            )
        names = self.x_curr.var_names
        shape = self.x_curr.fields.shape
        for s in (self.x_prev, self.target):
            if s.var_names != names or s.fields.shape != shape:
                raise ValueError("Window samples must share grid and variable names")


@dataclass
class NormalizationStats:
    var_names: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.var_names = tuple(self.var_names)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        for name, s in zip(self.var_names, self.std):
            if not s > 0:
                raise ZeroVarianceError(f"Channel '{name}' has zero variance")

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Standardize an array whose channel axis is third from last."""
        dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
        return ((x - self.mean[:, None, None]) / self.std[:, None, None]).astype(dtype)

    def invert(self, x: np.ndarray) -> np.ndarray:
        dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
        return (x * self.std[:, None, None] + self.mean[:, None, None]).astype(dtype)

    def subset(self, names: Sequence[str]) -> "NormalizationStats":
        idx = [self.var_names.index(n) for n in names]
        return NormalizationStats(tuple(names), self.mean[idx], self.std[idx])


def latitude_weights(grid: Union[LatLonGrid, Sequence[float], np.ndarray]) -> np.ndarray:
    """cos(lat) normalized to unit mean over the rows."""
    lats = grid.lats if isinstance(grid, LatLonGrid) else np.asarray(grid, dtype=np.float64)
    cos = np.cos(np.deg2rad(lats))
    return cos / cos.mean()


def _smooth_field(grid: LatLonGrid, rng: np.random.Generator, n_modes: int) -> np.ndarray:
    """Sum of low-order sinusoids, integer zonal wavenumbers so longitude wraps."""
    lat = np.deg2rad(grid.lats)[:, None]
    lon = np.deg2rad(grid.lons)[None, :]
    out = np.zeros(grid.shape)
    for _ in range(n_modes):
        m = rng.integers(0, 4)
        n = rng.integers(1, 4)
        amp = rng.normal() / (1.0 + m + n)
        phase_lon, phase_lat = rng.uniform(0, 2 * np.pi, size=2)
        out += amp * np.cos(m * lon + phase_lon) * np.cos(n * lat + phase_lat)
    return out / (np.abs(out).max() + 1e-12)


def _diffuse(x: np.ndarray, kappa: float) -> np.ndarray:
    """One explicit 5-point diffusion step, periodic in longitude, reflective at the poles."""
    padded = np.pad(x, ((1, 1), (0, 0)), mode="edge")
    lap = (
        padded[:-2] + padded[2:]
        + np.roll(x, 1, axis=1) + np.roll(x, -1, axis=1)
        - 4.0 * x
    )
    return x + kappa * lap


def generate_synthetic(grid: LatLonGrid, n_steps: int, seed: int, regime: str = "solid_rotation",
                       shift_cells: int = 1, kappa: float = 0.1, dt_hours: float = DEFAULT_DT_HOURS,
                       var_names: Sequence[str] = DEFAULT_VARIABLES, n_modes: int = 8) -> GridSequence:
    """
    Deterministic synthetic weather on `grid`.

    Every channel is rotated zonally by `shift_cells` per step; u10 carries the
    rotation's zonal wind (plus a small advected perturbation) so the physics
    penalties act on consistent channels. `advection_diffusion` then applies a
    diffusion step of strength `kappa`.
    """
    if regime not in SUPPORTED_REGIMES:
        raise ValueError(f"Unknown regime '{regime}'. Supported: {', '.join(SUPPORTED_REGIMES)}")
    if n_steps < 3:
        raise ValueError(f"n_steps must be >= 3, got {n_steps}")
    if not 1 <= n_modes <= 8:
        raise ValueError(f"n_modes must be in [1, 8], got {n_modes}")
    if regime == "advection_diffusion" and not 0 < kappa <= 0.2:
        raise ValueError(f"kappa must be in (0, 0.2] for a stable diffusion step, got {kappa}")

    rng = np.random.default_rng(seed)
    rotation_speed = shift_cells * grid.dx_m() / (dt_hours * SECONDS_PER_HOUR)

    base = []
    for name in var_names:
        pattern = _smooth_field(grid, rng, n_modes)
        if name.startswith("t"):
            base.append(280.0 + 10.0 * pattern)
        elif name.startswith("z"):
            base.append(5500.0 + 60.0 * pattern)
        elif name.startswith("u"):
            base.append(np.broadcast_to(rotation_speed[:, None], grid.shape) + 0.5 * pattern)
        elif name.startswith("v"):
            base.append(0.5 * pattern)
        else:
            base.append(pattern)
    state = np.stack(base)

    samples = []
    for t in range(n_steps):
        samples.append(GridSample(t, state.astype(np.float32), tuple(var_names), dt_hours))
        state = np.roll(state, shift_cells, axis=-1)
        if regime == "advection_diffusion":
            state = np.stack([_diffuse(c, kappa) for c in state])

    logger.info(
        f"Generated synthetic sequence",
        extra={"regime": regime, "steps": n_steps, "seed": seed, "grid": list(grid.shape)}
    )
    return GridSequence(grid, tuple(var_names), dt_hours, samples)


def _check_pair(x_curr: GridSample, x_prev: GridSample) -> None:
    if x_curr.var_names != x_prev.var_names:
        raise ValueError(f"Variable lists differ: {x_curr.var_names} vs {x_prev.var_names}")
    if x_curr.fields.shape != x_prev.fields.shape:
        raise ValueError(f"Grids differ: {x_curr.fields.shape} vs {x_prev.fields.shape}")


def temporal_derivative(x_curr: GridSample, x_prev: GridSample) -> np.ndarray:
    """Per-pixel (V(t) - V(t-1)) / dt in units per hour."""
    _check_pair(x_curr, x_prev)
    return ((x_curr.fields.astype(np.float64) - x_prev.fields) / x_curr.dt_hours).astype(np.float32)


def derivative_names(var_names: Sequence[str]) -> Tuple[str, ...]:
    return tuple(f"{DERIVATIVE_PREFIX}{n}" for n in var_names)


def input_channel_names(var_names: Sequence[str]) -> Tuple[str, ...]:
    return tuple(var_names) + derivative_names(var_names)


def augment_with_derivative(fields: np.ndarray, derivative: np.ndarray) -> np.ndarray:
    """[x, dx/dt] stacked along the channel axis."""
    return np.concatenate([fields, derivative], axis=-3)


def fit_normalization(samples: Iterable[Union[GridSample, np.ndarray]],
                      var_names: Optional[Sequence[str]] = None) -> NormalizationStats:
    """Per-channel mean/std streamed over the fit samples."""
    scaler = StandardScaler()
    count = 0
    for s in samples:
        if isinstance(s, GridSample):
            var_names = var_names or s.var_names
            arr = s.fields
        else:
            arr = np.asarray(s)
        scaler.partial_fit(arr.reshape(arr.shape[0], -1).T.astype(np.float64))
        count += 1
    if count < 2:
        raise ValueError(f"Normalization needs at least 2 samples, got {count}")
    if var_names is None:
        var_names = tuple(f"ch{i}" for i in range(scaler.mean_.size))
    std = np.sqrt(scaler.var_)
    for name, s in zip(var_names, std):
        if not s > 0:
            raise ZeroVarianceError(f"Channel '{name}' has zero variance")
    return NormalizationStats(tuple(var_names), scaler.mean_.copy(), std)


def fit_input_normalization(sequence: GridSequence) -> NormalizationStats:
    """Raw channels and derivative channels, each with its own statistics."""
    raw = fit_normalization(sequence.samples, sequence.var_names)
    derivs = [temporal_derivative(b, a) for a, b in zip(sequence.samples[:-1], sequence.samples[1:])]
    deriv = fit_normalization(derivs, derivative_names(sequence.var_names))
    return NormalizationStats(
        raw.var_names + deriv.var_names,
        np.concatenate([raw.mean, deriv.mean]),
        np.concatenate([raw.std, deriv.std]),
    )


def make_windows(sequence: Union[GridSequence, Sequence[GridSample]], lead_steps: int = 1) -> List[WindowedExample]:
    samples = list(sequence)
    if lead_steps < 1:
        raise ValueError(f"lead_steps must be positive, got {lead_steps}")
    if len(samples) < lead_steps + 2:
        raise ValueError(f"Need at least {lead_steps + 2} samples for lead {lead_steps}, got {len(samples)}")
    return [
        WindowedExample(samples[i], samples[i + 1], samples[i + 1 + lead_steps], lead_steps)
        for i in range(len(samples) - 1 - lead_steps)
    ]


def split_by_time(sequence: GridSequence, train_fraction: float = 0.8,
                  val_fraction: float = 0.1) -> Tuple[GridSequence, GridSequence, GridSequence]:
    """Contiguous, time-ordered train/val/test ranges."""
    if not 0 < train_fraction < 1 or not 0 <= val_fraction < 1 or train_fraction + val_fraction > 1:
        raise ValueError(f"Invalid split fractions train={train_fraction} val={val_fraction}")
    n = len(sequence)
    n_train = int(round(n * train_fraction))
    n_val = int(round(n * val_fraction))
    return sequence[:n_train], sequence[n_train:n_train + n_val], sequence[n_train + n_val:]


def prepare_inputs(x_prev: np.ndarray, x_curr: np.ndarray, dt_hours: float,
                   stats: NormalizationStats) -> Tuple[np.ndarray, np.ndarray]:
    """
    Normalized model inputs for one (t-1, t0) pair of raw fields.

    Only one temporal difference is visible, so both time steps carry it as
    their derivative channels.
    """
    deriv = ((x_curr.astype(np.float64) - x_prev) / dt_hours).astype(np.float32)
    curr_in = stats.apply(augment_with_derivative(x_curr, deriv))
    prev_in = stats.apply(augment_with_derivative(x_prev, deriv))
    return curr_in, prev_in


def stack_windows(windows: Sequence[WindowedExample],
                  stats: NormalizationStats) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(curr_in [N,2V,H,W], prev_in [N,2V,H,W], target [N,V,H,W]), all normalized."""
    var_names = windows[0].x_curr.var_names
    raw_stats = stats.subset(var_names)
    curr, prev, target = [], [], []
    for w in windows:
        c, p = prepare_inputs(w.x_prev.fields, w.x_curr.fields, w.x_curr.dt_hours, stats)
        curr.append(c)
        prev.append(p)
        target.append(raw_stats.apply(w.target.fields))
    return np.stack(curr), np.stack(prev), np.stack(target)
