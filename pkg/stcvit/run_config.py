"""
Flat `key = value` run configuration, validated in full before any work starts.

    # comment
    preset = desk
    dim = 64
    leads = 6, 12, 24

`preset` (desk or paper) supplies defaults; explicit keys override it.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .config import DEFAULT_LEADS, DEFAULT_VARIABLES
from .model import ModelConfig
from .physics import ChannelBindings, LossWeights
from .trainer import TrainConfig

PRESETS: Dict[str, Dict[str, object]] = {
    "desk": dict(dim=128, heads=4, depth=2, patch_size=2, dropout=0.1, ode_steps=2, ode_solver="rk4",
                 epochs=20, batch_size=4, base_lr=5e-4, weight_decay=1e-5, warmup_fraction=0.1,
                 alpha=0.3, beta=0.3, gamma=0.8, early_stop_tolerance=10),
    "paper": dict(dim=1024, heads=16, depth=4, patch_size=2, dropout=0.1, ode_steps=2, ode_solver="rk4",
                  epochs=50, batch_size=12, base_lr=5e-5, weight_decay=1e-5, warmup_fraction=0.1,
                  alpha=0.3, beta=0.3, gamma=0.8, early_stop_tolerance=10),
}


class RunConfigError(ValueError):
    def __init__(self, problems: List[str]):
        self.problems = problems
        super().__init__("Invalid run configuration:\n" + "\n".join(f"  - {p}" for p in problems))


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: str = "desk"

    # network
    variant: str = "full"
    patch_size: int = 2
    heads: int = 4
    depth: int = 2
    dim: int = 128
    dropout: float = 0.1
    mlp_ratio: int = 4
    ode_steps: int = 2
    ode_solver: str = "rk4"
    adaptive_eval: bool = False
    dtype: str = "float32"
    seed: int = 0

    # loss
    alpha: float = Field(0.3, ge=0.0)
    beta: float = Field(0.3, ge=0.0)
    gamma: float = Field(0.8, ge=0.0)
    u_channel: str = "u10"
    v_channel: str = "v10"
    temperature_channel: str = "t2m"
    geopotential_channel: str = "z500"

    # optimization
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(4, ge=1)
    base_lr: float = Field(5e-4, ge=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    warmup_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    early_stop_tolerance: int = Field(10, ge=1)

    # data
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    val_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    leads: List[float] = Field(default_factory=lambda: [float(v) for v in DEFAULT_LEADS])

    # paths
    data: Optional[str] = None
    out: Optional[str] = None

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, v: str) -> str:
        if v not in PRESETS:
            raise ValueError(f"Unknown preset '{v}'. Supported: {', '.join(PRESETS)}")
        return v

    @field_validator("leads", mode="before")
    @classmethod
    def _split_leads(cls, v):
        if isinstance(v, str):
            return [item.strip() for item in v.split(",") if item.strip()]
        return v

    def model_settings(self, variables: Sequence[str] = DEFAULT_VARIABLES, height: int = 8,
                       width: int = 16) -> ModelConfig:
        return ModelConfig(
            variables=list(variables), height=height, width=width, patch_size=self.patch_size, heads=self.heads,
            depth=self.depth, dim=self.dim, dropout=self.dropout, mlp_ratio=self.mlp_ratio,
            ode_steps=self.ode_steps, ode_solver=self.ode_solver, adaptive_eval=self.adaptive_eval,
            variant=self.variant, dtype=self.dtype, seed=self.seed,
        )

    def train_settings(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.base_lr, weight_decay=self.weight_decay,
            warmup_fraction=self.warmup_fraction, early_stop_tolerance=self.early_stop_tolerance, seed=self.seed,
            loss_weights=LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma),
            bindings=ChannelBindings(u=self.u_channel, v=self.v_channel, temperature=self.temperature_channel,
                                     geopotential=self.geopotential_channel),
        )

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for key, value in self.model_dump().items():
            if value is None:
                continue
            if isinstance(value, list):
                value = ", ".join(f"{v:g}" for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_run_config(text: str) -> RunConfig:
    problems: List[str] = []
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            problems.append(f"line {lineno}: missing key")
        elif key in values:
            problems.append(f"line {lineno}: duplicate key '{key}'")
        else:
            values[key] = value

    preset = values.get("preset", "desk")
    merged: Dict[str, object] = dict(PRESETS.get(preset, {}))
    merged.update(values)
    try:
        config = RunConfig(**merged)
    except ValidationError as e:
        for err in e.errors():
            where = ".".join(str(p) for p in err["loc"]) or "config"
            problems.append(f"{where}: {err['msg']}")
        config = None
    if config is not None:
        try:
            config.model_settings()
        except ValidationError as e:
            problems.extend(f"model: {err['msg']}" for err in e.errors())
        if config.train_fraction + config.val_fraction >= 1.0:
            problems.append("train_fraction + val_fraction must leave a test range")
    if problems:
        raise RunConfigError(problems)
    return config


def load_run_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return parse_run_config("")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    return parse_run_config(path.read_text(encoding="utf-8"))
