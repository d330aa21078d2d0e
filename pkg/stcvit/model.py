"""
STC-ViT encoder: variable tokenization, Temporal Continuous Attention (TCA),
Spatial Attention (SA), concat fusion, Neural-ODE residual blocks, tendency
head, and the ablation variants.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .config import DEFAULT_VARIABLES, SUPPORTED_SOLVERS, SUPPORTED_VARIANTS
from .data_pipeline import NormalizationStats, WindowedExample, input_channel_names, prepare_inputs
from .logger import logger
from .nn import Dropout, FeedForward, LayerNorm, Linear, Module, parameter
from .ode import OdeDivergenceError, OdeProblem, integrate, integrate_adaptive
from .tensor import Tensor, concat, softmax


class BlockDivergenceError(FloatingPointError):
    def __init__(self, block: int, step: int):
        self.block = block
        self.step = step
        super().__init__(f"Block {block}: ODE state became non-finite at solver step {step}")


class ModelConfig(BaseModel):
    """Network hyperparameters; defaults are the desk profile."""

    model_config = ConfigDict(extra="forbid")

    variables: List[str] = list(DEFAULT_VARIABLES)
    height: int = 8
    width: int = 16
    patch_size: int = 2
    heads: int = 4
    depth: int = 2
    dim: int = 128
    dropout: float = 0.1
    mlp_ratio: int = 4
    ode_steps: int = 2
    ode_solver: str = "rk4"
    adaptive_eval: bool = False
    variant: str = "full"
    dtype: str = "float32"
    seed: int = 0

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, v: str) -> str:
        if v not in SUPPORTED_VARIANTS:
            raise ValueError(f"Unknown variant '{v}'. Supported: {', '.join(SUPPORTED_VARIANTS)}")
        return v

    @field_validator("ode_solver")
    @classmethod
    def _known_solver(cls, v: str) -> str:
        if v not in SUPPORTED_SOLVERS:
            raise ValueError(f"Unknown ODE solver '{v}'. Supported: {', '.join(SUPPORTED_SOLVERS)}")
        return v

    @field_validator("dtype")
    @classmethod
    def _known_dtype(cls, v: str) -> str:
        if v not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return v

    @field_validator("dropout")
    @classmethod
    def _dropout_range(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        return v

    @field_validator("patch_size", "heads", "depth", "dim", "mlp_ratio", "ode_steps", "height", "width")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be a positive integer")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "ModelConfig":
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(f"Grid {self.height}x{self.width} is not divisible by patch size {self.patch_size}")
        if not self.variables or len(set(self.variables)) != len(self.variables):
            raise ValueError("variables must be a non-empty list of unique names")
        return self

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        values = dict(patch_size=2, heads=16, depth=4, dim=1024, dropout=0.1)
        values.update(overrides)
        return cls(**values)

    @property
    def channels(self) -> Tuple[str, ...]:
        return input_channel_names(self.variables)

    @property
    def token_grid(self) -> Tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def sinusoidal_position_embedding(rows: int, cols: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos table, [rows*cols, dim]; half the width encodes rows, half columns."""
    quarter = max(dim // 4, 1)
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    r = r.reshape(-1, 1) * omega
    c = c.reshape(-1, 1) * omega
    table = np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=1)
    if table.shape[1] < dim:
        table = np.pad(table, ((0, 0), (0, dim - table.shape[1])))
    return table[:, :dim]


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., T, D] -> [..., heads, T, D/heads]"""
    *lead, t, d = x.shape
    x = x.reshape(tuple(lead) + (t, heads, d // heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return x.transpose(tuple(axes))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return x.transpose(tuple(axes)).reshape(tuple(lead) + (t, h * dk))


def patchify(x: Tensor, p: int) -> Tensor:
    """[B, C, H, W] -> [B, C, (H/p)*(W/p), p*p]"""
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 1, 2, 4, 3, 5)
    return x.reshape(b, c, (h // p) * (w // p), p * p)


def unpatchify(tokens: Tensor, channels: int, h: int, w: int, p: int) -> Tensor:
    """[B, T, C*p*p] -> [B, C, H, W]"""
    b = tokens.shape[0]
    x = tokens.reshape(b, h // p, w // p, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, h, w)


@dataclass
class TokenGrid:
    tokens: Tensor
    variable_tokens: Tensor
    grid_shape: Tuple[int, int]

    @property
    def count(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]


class VariableTokenizer(Module):
    """
    Per-variable patch embedding looked up by channel name, then cross-variable
    attention pooling to one token per patch, then the positional table.
    """

    def __init__(self, channel_names: Sequence[str], patch_size: int, dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.channel_names = tuple(channel_names)
        self.patch_size = patch_size
        self.dim = dim
        self.dtype = dtype
        self.embed = {name: Linear(patch_size * patch_size, dim, rng, dtype) for name in self.channel_names}
        self.agg_query = parameter((rng.standard_normal((dim, 1)) * 0.02).astype(dtype))
        self.agg_key = Linear(dim, dim, rng, dtype, bias=False)
        self.agg_value = Linear(dim, dim, rng, dtype, bias=False)
        self._pos_cache = {}

    def position_table(self, rows: int, cols: int) -> Tensor:
        key = (rows, cols)
        if key not in self._pos_cache:
            table = sinusoidal_position_embedding(rows, cols, self.dim).astype(self.dtype)
            self._pos_cache[key] = Tensor(table)
        return self._pos_cache[key]

    def forward(self, x: Tensor, channel_names: Optional[Sequence[str]] = None) -> TokenGrid:
        names = tuple(channel_names) if channel_names is not None else self.channel_names
        batched = x.ndim == 4
        if not batched:
            x = x.reshape((1,) + x.shape)
        b, c, h, w = x.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"Spatial extents {h}x{w} are not divisible by patch size {p}")
        if len(names) != c:
            raise ValueError(f"{len(names)} channel names for {c} input channels")
        unknown = [n for n in names if n not in self.embed]
        if unknown:
            raise KeyError(f"No embedding for channels {unknown}")

        patches = patchify(x, p)
        t = patches.shape[2]
        streams = [self.embed[name](patches[:, i]).reshape(b, t, 1, self.dim) for i, name in enumerate(names)]
        variable_tokens = concat(streams, axis=2)

        scores = self.agg_key(variable_tokens) @ self.agg_query * (1.0 / math.sqrt(self.dim))
        weights = softmax(scores, axis=2)
        pooled = (weights * self.agg_value(variable_tokens)).sum(axis=2)
        tokens = pooled + self.position_table(h // p, w // p)

        if not batched:
            tokens = tokens.reshape(t, self.dim)
            variable_tokens = variable_tokens.reshape(t, c, self.dim)
        return TokenGrid(tokens, variable_tokens, (h // p, w // p))


class SpatialAttention(Module):
    """Multi-head scaled dot-product self-attention over the tokens of one time step."""

    def __init__(self, dim: int, heads: int, rate: float, rng: np.random.Generator, dtype=np.float32,
                 dropout_rng: Optional[np.random.Generator] = None):
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype, bias=False)
        self.k = Linear(dim, dim, rng, dtype, bias=False)
        self.v = Linear(dim, dim, rng, dtype, bias=False)
        self.o = Linear(dim, dim, rng, dtype, bias=False)
        self.drop = Dropout(rate, dropout_rng or rng)
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = (split_heads(proj(x), self.heads) for proj in (self.q, self.k, self.v))
        scale = 1.0 / math.sqrt(q.shape[-1])
        weights = softmax(q @ k.swap_last() * scale, axis=-1)
        self.last_weights = weights.data
        return self.o(merge_heads(self.drop(weights) @ v))


class TemporalContinuousAttention(Module):
    """
    Attention scored by the product rule on the query/key evolution between
    t-1 and t0, token by token:

        Y_i = sum_c (Q_ic dK_ic + dQ_ic K_ic),  a = softmax(Y / sqrt(d_k)) over tokens

    Q = W_Q (x_t0 - x_t-1), K = W_K (x_t-1 + dx/dt), V = W_V x_t-1, all
    derivatives are unit-step finite differences in embedding space. The
    context sum_i a_i V_i is shared by every token position.
    """

    def __init__(self, dim: int, heads: int, rate: float, rng: np.random.Generator, dtype=np.float32,
                 dropout_rng: Optional[np.random.Generator] = None):
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype, bias=False)
        self.k = Linear(dim, dim, rng, dtype, bias=False)
        self.v = Linear(dim, dim, rng, dtype, bias=False)
        self.o = Linear(dim, dim, rng, dtype, bias=False)
        self.drop = Dropout(rate, dropout_rng or rng)
        self.last_scores: Optional[np.ndarray] = None
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, tok_curr: Tensor, tok_prev: Tensor) -> Tensor:
        if tok_curr.shape != tok_prev.shape:
            raise ValueError(f"Token grids differ between time steps: {tok_curr.shape} vs {tok_prev.shape}")
        deriv = tok_curr - tok_prev
        q = split_heads(self.q(deriv), self.heads)
        k = split_heads(self.k(tok_prev + deriv), self.heads)
        # projections are linear, so the difference of projected streams is the projected difference
        dq = q
        dk = split_heads(self.k(deriv), self.heads)
        v = split_heads(self.v(tok_prev), self.heads)

        # [..., heads, T]
        scores = (q * dk + dq * k).sum(axis=-1)
        weights = softmax(scores * (1.0 / math.sqrt(q.shape[-1])), axis=-1)
        self.last_scores = scores.data
        self.last_weights = weights.data

        t = v.shape[-2]
        pooled = self.drop(weights).reshape(weights.shape[:-1] + (1, t)) @ v
        context = pooled * Tensor(np.ones((t, 1), dtype=v.dtype))
        return self.o(merge_heads(context))


class Fusion(Module):
    """concat(TCA, SA) along features, projected 2D -> D, then dropout."""

    def __init__(self, dim: int, rate: float, rng: np.random.Generator, dtype=np.float32,
                 dropout_rng: Optional[np.random.Generator] = None):
        self.proj = Linear(2 * dim, dim, rng, dtype)
        self.drop = Dropout(rate, dropout_rng or rng)

    def concat(self, tca_out: Tensor, sa_out: Tensor) -> Tensor:
        if tca_out.shape != sa_out.shape:
            raise ValueError(f"Cannot fuse {tca_out.shape} with {sa_out.shape}")
        return concat([tca_out, sa_out], axis=-1)

    def forward(self, tca_out: Tensor, sa_out: Tensor) -> Tensor:
        return self.drop(self.proj(self.concat(tca_out, sa_out)))


def _solve(field: Callable[[Tensor, float], Tensor], h: Tensor, steps: int, method: str, block: int,
           adaptive: bool) -> Tensor:
    problem = OdeProblem(field, 0.0, 1.0, steps, method)
    try:
        if adaptive:
            return integrate_adaptive(problem, h)
        return integrate(problem, h)
    except OdeDivergenceError as e:
        logger.error(f"Solver diverged in block {block}", extra={"block": block, "step": e.step})
        raise BlockDivergenceError(block, e.step) from e


class STCBlock(Module):
    """
    g(h) = fuse(TCA(LN h, LN tok_prev), SA(LN h)); the attention residual is
    h(1) = ODESolve(g, h, 0 -> 1) (or h + g(h) without the ODE), followed by a
    pre-norm feed-forward with a plain residual.
    """

    def __init__(self, config: ModelConfig, index: int, rng: np.random.Generator,
                 dropout_rng: np.random.Generator, use_ode: bool = True):
        dim, dtype = config.dim, np.dtype(config.dtype)
        self.index = index
        self.use_ode = use_ode
        self.ode_steps = config.ode_steps
        self.ode_solver = config.ode_solver
        self.adaptive_eval = config.adaptive_eval
        self.norm1 = LayerNorm(dim, dtype)
        self.tca = TemporalContinuousAttention(dim, config.heads, config.dropout, rng, dtype, dropout_rng)
        self.sa = SpatialAttention(dim, config.heads, config.dropout, rng, dtype, dropout_rng)
        self.fusion = Fusion(dim, config.dropout, rng, dtype, dropout_rng)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, config.mlp_ratio * dim, rng, dtype)

    def vector_field(self, tok_prev: Tensor) -> Callable[[Tensor, float], Tensor]:
        prev = self.norm1(tok_prev)

        def g(h: Tensor, t: float) -> Tensor:
            z = self.norm1(h)
            return self.fusion(self.tca(z, prev), self.sa(z))
        return g

    def forward(self, h: Tensor, tok_prev: Tensor) -> Tensor:
        g = self.vector_field(tok_prev)
        if self.use_ode:
            h = _solve(g, h, self.ode_steps, self.ode_solver, self.index, self.adaptive_eval and not self.training)
        else:
            h = h + g(h, 0.0)
        if not np.all(np.isfinite(h.data)):
            raise BlockDivergenceError(self.index, self.ode_steps)
        return h + self.ffn(self.norm2(h))


class ViTBlock(Module):
    """Standard pre-norm block; `ode_ffn` integrates the feed-forward as a vector field."""

    def __init__(self, config: ModelConfig, index: int, rng: np.random.Generator,
                 dropout_rng: np.random.Generator, ode_ffn: bool = False):
        dim, dtype = config.dim, np.dtype(config.dtype)
        self.index = index
        self.ode_ffn = ode_ffn
        self.ode_steps = config.ode_steps
        self.ode_solver = config.ode_solver
        self.adaptive_eval = config.adaptive_eval
        self.norm1 = LayerNorm(dim, dtype)
        self.sa = SpatialAttention(dim, config.heads, config.dropout, rng, dtype, dropout_rng)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, config.mlp_ratio * dim, rng, dtype)

    def forward(self, h: Tensor, tok_prev: Optional[Tensor] = None) -> Tensor:
        h = h + self.sa(self.norm1(h))
        if self.ode_ffn:
            return _solve(lambda s, t: self.ffn(self.norm2(s)), h, self.ode_steps, self.ode_solver, self.index,
                          self.adaptive_eval and not self.training)
        return h + self.ffn(self.norm2(h))


class ForecastModel(Module):
    """Maps normalized (x_t0, x_t-1) input stacks [B, 2V, H, W] to the normalized state at t0 + lead."""

    def __init__(self, config: ModelConfig):
        self.config = config

    @property
    def n_variables(self) -> int:
        return len(self.config.variables)

    def _check_input(self, x: Tensor) -> None:
        expected = (len(self.config.channels), self.config.height, self.config.width)
        if tuple(x.shape[-3:]) != expected:
            raise ValueError(f"Input shape {x.shape} does not match config channels/grid {expected}")

    def predict(self, curr_in: np.ndarray, prev_in: np.ndarray) -> np.ndarray:
        """Evaluation-mode forward on arrays."""
        was_training = self.training
        self.eval()
        try:
            dtype = np.dtype(self.config.dtype)
            return self(Tensor(curr_in.astype(dtype)), Tensor(prev_in.astype(dtype))).data
        finally:
            self.train(was_training)


class STCViT(ForecastModel):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        dropout_rng = np.random.default_rng([config.seed, 1])
        variant = config.variant
        self.uses_tca = variant in ("full", "continuous_attention_only")
        self.tokenizer = VariableTokenizer(config.channels, config.patch_size, config.dim, rng, dtype)
        if self.uses_tca:
            use_ode = variant == "full"
            self.blocks = [STCBlock(config, i, rng, dropout_rng, use_ode) for i in range(config.depth)]
        else:
            ode_ffn = variant == "vanilla_attention_plus_node"
            self.blocks = [ViTBlock(config, i, rng, dropout_rng, ode_ffn) for i in range(config.depth)]
        self.norm = LayerNorm(config.dim, dtype)
        p = config.patch_size
        self.head = Linear(config.dim, len(config.variables) * p * p, rng, dtype)

    def forward(self, x_curr: Tensor, x_prev: Tensor) -> Tensor:
        batched = x_curr.ndim == 4
        if not batched:
            x_curr = x_curr.reshape((1,) + x_curr.shape)
            x_prev = x_prev.reshape((1,) + x_prev.shape)
        self._check_input(x_curr)
        self._check_input(x_prev)
        cfg = self.config
        h = self.tokenizer(x_curr).tokens
        tok_prev = self.tokenizer(x_prev).tokens if self.uses_tca else None
        for block in self.blocks:
            h = block(h, tok_prev)
        delta = unpatchify(self.head(self.norm(h)), self.n_variables, cfg.height, cfg.width, cfg.patch_size)
        out = x_curr[:, :self.n_variables] + delta
        return out if batched else out.reshape(out.shape[1:])


class VanillaNODE(ForecastModel):
    """
    No transformer: the flattened input grid is encoded to a D-dimensional
    state, evolved by a feed-forward vector field, and decoded.
    """

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        n_in = len(config.channels) * config.height * config.width
        n_out = len(config.variables) * config.height * config.width
        self.encoder = Linear(n_in, config.dim, rng, dtype)
        self.field = FeedForward(config.dim, config.mlp_ratio * config.dim, rng, dtype)
        self.decoder = Linear(config.dim, n_out, rng, dtype)

    def forward(self, x_curr: Tensor, x_prev: Optional[Tensor] = None) -> Tensor:
        batched = x_curr.ndim == 4
        if not batched:
            x_curr = x_curr.reshape((1,) + x_curr.shape)
        self._check_input(x_curr)
        cfg = self.config
        b = x_curr.shape[0]
        z = self.encoder(x_curr.reshape(b, int(np.prod(x_curr.shape[1:]))))
        z = _solve(lambda s, t: self.field(s), z, cfg.ode_steps, cfg.ode_solver, 0,
                   cfg.adaptive_eval and not self.training)
        delta = self.decoder(z).reshape(b, self.n_variables, cfg.height, cfg.width)
        out = x_curr[:, :self.n_variables] + delta
        return out if batched else out.reshape(out.shape[1:])


def build_variant(config: ModelConfig) -> ForecastModel:
    if config.variant not in SUPPORTED_VARIANTS:
        raise ValueError(f"Unknown variant '{config.variant}'")
    model = VanillaNODE(config) if config.variant == "vanilla_node" else STCViT(config)
    logger.info(
        f"Built {config.variant} model",
        extra={"variant": config.variant, "parameters": model.num_parameters(), "dim": config.dim,
               "depth": config.depth}
    )
    return model


def forward(example: WindowedExample, model: ForecastModel, stats: NormalizationStats) -> np.ndarray:
    """Normalized prediction for one WindowedExample."""
    curr_in, prev_in = prepare_inputs(example.x_prev.fields, example.x_curr.fields, example.x_curr.dt_hours, stats)
    return model.predict(curr_in, prev_in)
