"""STC-ViT: spatio-temporal continuous vision transformer for gridded weather forecasting."""

from .data_pipeline import GridSequence, LatLonGrid, NormalizationStats, generate_synthetic
from .model import ModelConfig, build_variant
from .physics import ChannelBindings, LossWeights, MetricsReport
from .tensor import GradientTape, Tensor
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
