"""Channel search for ultra-low-precision quantized CNNs."""
from nce.arch import Arch, build_arch
from nce.config import ExperimentConfig, parse_config, resolve_config
from nce.costmodel import CostBudget, exact_cost, expected_cost
from nce.estimator import NCEClassifier
from nce.network import SuperNet

__version__ = "0.1.0"

__all__ = ["Arch", "CostBudget", "ExperimentConfig", "NCEClassifier", "SuperNet", "build_arch",
           "exact_cost", "expected_cost", "parse_config", "resolve_config", "__version__"]
