"""Multi-source-free domain adaptation by uncertainty-aware adaptive distillation."""
from uad.errors import DivergenceError, InvalidConfig, InvalidInput, InvalidTemperature, UADError

__version__ = "0.1.0"
