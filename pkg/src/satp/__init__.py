"""Self-aware trajectory prediction at desk scale.

A graph-convolutional trajectory predictor, a supervised module that
estimates the predictor's own per-step error online, four diagnostic
baselines, synthetic intersection data, and a cutoff-curve evaluation suite,
all on a small float64 autodiff engine.
"""

from .autodiff import Tensor, backward, no_grad
from .config import RunConfig, load_config
from .data import AgentType, GeneratorConfig, Record, Sample, generate, load_csv
from .evaluation import aucoc, aucoc_optimal, aucoc_random, cutoff_curve, sas
from .optim import Adam, ParameterSet, step_lr
from .predictor import TrajectoryPredictor, build_scene, tp_loss
from .rng import Rng
from .selfaware import SaConfig, SelfAwareness, error_labels, integrate_diagnostics, sa_loss

__all__ = [
    "Adam", "AgentType", "GeneratorConfig", "ParameterSet", "Record", "Rng",
    "RunConfig", "SaConfig", "Sample", "SelfAwareness", "Tensor",
    "TrajectoryPredictor", "aucoc", "aucoc_optimal", "aucoc_random", "backward",
    "build_scene", "cutoff_curve", "error_labels", "generate",
    "integrate_diagnostics", "load_config", "load_csv", "no_grad", "sa_loss",
    "sas", "step_lr", "tp_loss",
]
__version__ = "0.1.0"
