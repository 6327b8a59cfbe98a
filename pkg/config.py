import os
from typing import Dict

from dotenv import load_dotenv

load_dotenv()

SCHEMA_VERSION = "heatlab/1"

# Parallelism cap for independent checks and limit experiments
HEATLAB_THREADS = max(1, int(os.getenv("HEATLAB_THREADS", "1")))
HEATLAB_OUTPUT = os.getenv("HEATLAB_OUTPUT", "runs")
HEATLAB_LOG_LEVEL = os.getenv("HEATLAB_LOG_LEVEL", "INFO")

# Flow integrator
DEFAULT_CFL = 0.2
DEFAULT_FILTER_STRENGTH = 36.0
DEFAULT_FILTER_ORDER = 36
SINGULARITY_FLOOR = 1e-8

# Kernel solver
DEFAULT_KERNEL_DT = 1e-3
DEFAULT_SEED_FACTOR = 10
UNDERSHOOT_TOLERANCE = 1e-10
SERIES_TOLERANCE = 1e-12
SERIES_MAX_TERMS = 20000

# Samples below this fraction of the field maximum are treated as degenerate
DEGENERATE_FRACTION = 1e-10
DENSITY_FLOOR = 1e-300

DEFAULT_CAPS: Dict[str, float] = {
    "on_diag_upper": 100.0,
    "on_diag_lower_floor": 1e-2,
    "gaussian_exponent_lo": 1.0 / 16.0,
    "gaussian_exponent_hi": 4.0,
    "gaussian_envelope": 100.0,
    "gaussian_eta": 1.0,
    "mean_value": 1e4,
    "mass_tolerance": 1e-4,
    "doubling_c": 10.0,
    "log_sobolev_alpha": 100.0,
    "sobolev_A": 100.0,
    "nonflat_W": 1e-4,
    "nonflat_R": 1e-6,
}


def caps_with(overrides: Dict[str, float] = None) -> Dict[str, float]:
    """Default caps updated with scenario overrides."""
    caps = dict(DEFAULT_CAPS)
    if overrides:
        caps.update(overrides)
    return caps
