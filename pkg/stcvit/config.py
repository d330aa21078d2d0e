import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables from .env file
env_path = Path(__file__).parent.parent / '.env'
load_dotenv(dotenv_path=env_path)

# Logging
LOG_LEVEL = os.getenv("STC_LOG_LEVEL", "INFO")

# Tensor engine
DEBUG_FINITE = os.getenv("STC_DEBUG_FINITE", "false").lower() in ("1", "true", "yes")
DEFAULT_DTYPE = os.getenv("STC_DEFAULT_DTYPE", "float32")

# Artifact names
CHECKPOINT_NAME = os.getenv("STC_CHECKPOINT_NAME", "model.stck")
EPOCH_LOG_NAME = os.getenv("STC_EPOCH_LOG_NAME", "epoch_log.csv")
LOSS_BREAKDOWN_NAME = os.getenv("STC_LOSS_BREAKDOWN_NAME", "loss_breakdown.json")
RESOLVED_CONFIG_NAME = os.getenv("STC_RESOLVED_CONFIG_NAME", "run_config.txt")
DEFAULT_LEADS = [int(v) for v in os.getenv("STC_DEFAULT_LEADS", "6,12,18,24,36").split(",") if v.strip()]

# Physical constants
EARTH_RADIUS_M = 6.371e6
GRAVITY = 9.81
SECONDS_PER_HOUR = 3600.0

# Synthetic data
DEFAULT_VARIABLES = ("t2m", "u10", "v10", "z500")
DEFAULT_DT_HOURS = 6.0
SUPPORTED_REGIMES = {
    'solid_rotation': 'Rigid zonal rotation by an integer number of cells per step',
    'advection_diffusion': 'Solid rotation followed by an explicit diffusion step'
}

# Model
SUPPORTED_VARIANTS = {
    'full': 'TCA + SA fused, Neural-ODE residual',
    'vanilla_vit': 'Standard attention, discrete residual',
    'vanilla_node': 'Feed-forward vector field over the flattened grid',
    'continuous_attention_only': 'TCA + SA fused, discrete residual',
    'vanilla_attention_plus_node': 'Standard attention, Neural-ODE feed-forward'
}
SUPPORTED_SOLVERS = ('rk4', 'euler')
