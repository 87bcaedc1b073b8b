"""Bayes linear emulation and history matching for computer models."""

__version__ = "0.1.0"

from .analysis import (
    StoppingRule,
    WaveOptions,
    WaveState,
    check_stopping,
    emulator_slice,
    lattice_summary,
    match_count,
    run_wave,
    space_removed,
)
from .correlation import Correlator
from .diagnostics import validation_diagnostics
from .emulator import EmulatorPrior, Target, TrainedEmulator, implausibility, nth_implausibility
from .errors import HistMatchError
from .proposal import ProposalOptions, generate_new_design
from .space import ParameterSpace, RunTable, enclosing_hyperrectangle, latin_hypercube, maximin_thin
from .training import EmulatorSet, TrainingOptions, emulator_from_data, train_variance_emulators

__all__ = [
    "__version__",
    "ParameterSpace",
    "RunTable",
    "latin_hypercube",
    "maximin_thin",
    "enclosing_hyperrectangle",
    "Correlator",
    "EmulatorPrior",
    "TrainedEmulator",
    "Target",
    "implausibility",
    "nth_implausibility",
    "TrainingOptions",
    "EmulatorSet",
    "emulator_from_data",
    "train_variance_emulators",
    "validation_diagnostics",
    "ProposalOptions",
    "generate_new_design",
    "WaveOptions",
    "WaveState",
    "StoppingRule",
    "run_wave",
    "check_stopping",
    "match_count",
    "space_removed",
    "lattice_summary",
    "emulator_slice",
    "HistMatchError",
]
