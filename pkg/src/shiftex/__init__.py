"""Deterministic simulation lab for federated learning under streaming
covariate and label shift: drift detection, a mixture-of-experts registry,
facility-location expert assignment, and a reproducible experiment harness.
"""

from .aggregator import ExpertRegistry, Thresholds, run_window
from .assignment import AssignmentProblem, solve_exact, solve_greedy
from .harness import MethodSpec, RunConfig, run_experiment, write_run
from .models import ModelShapes, TrainConfig
from .party import PartyReport, detect_shift
from .stats import KernelSpec, jsd, mmd_squared
from .streams import PartyStream, ShiftEvent, ShiftSchedule, sample_window

__version__ = "0.1.0"

__all__ = [
    "AssignmentProblem",
    "ExpertRegistry",
    "KernelSpec",
    "MethodSpec",
    "ModelShapes",
    "PartyReport",
    "PartyStream",
    "RunConfig",
    "ShiftEvent",
    "ShiftSchedule",
    "Thresholds",
    "TrainConfig",
    "detect_shift",
    "jsd",
    "mmd_squared",
    "run_experiment",
    "run_window",
    "sample_window",
    "solve_exact",
    "solve_greedy",
    "write_run",
    "__version__",
]
