"""Personality-trait micro-segmentation from spending trajectories of a small LSTM."""

from microseg.domain import (
    TRAIT_INITIALS,
    TRAIT_NAMES,
    CoefficientMatrix,
    DominantOrder,
    SpendingProfile,
    TraitScaler,
    TraitVector,
    dominant_order,
    score_traits,
)
from microseg.errors import MicrosegError
from microseg.rnn import LstmModel, TrainConfig, Trajectory, backward, extract_trajectories, forward, train
from microseg.segmentation import (
    ClusterTree,
    StabilityReport,
    build_hierarchy,
    detect_course_change,
    geometric_purity,
    stability_check,
)
from microseg.surrogate import FidelityReport, LinearSurrogate, evaluate_fidelity, fit_linear
from microseg.synth import Dataset, SynthConfig, aggregate_transactions, generate_coefficients, generate_population

__version__ = "0.1.0"
