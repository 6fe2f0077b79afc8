"""Noise-driven self-healing dynamics in one-dimensional non-Hermitian lattices."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    NumericError,
    PartialResultError,
    SelfHealError,
)
from .lattice import (  # noqa: E402
    BoundaryCondition,
    HoppingModel,
    ScatteringWindow,
    build_hamiltonian,
    eigensystem,
)
from .noise import OUParams, WhiteNoiseParams  # noqa: E402
from .dynamics import EvolutionConfig, InitialState, Integrator, evolve_pair, evolve_single  # noqa: E402
from .ensemble import EnsembleConfig, run_ensemble  # noqa: E402

MAIN_MODEL = HoppingModel.from_pairs(0.7, 1.0, 0.8, 1.0)

__all__ = [
    "__version__",
    "MAIN_MODEL",
    "SelfHealError",
    "ConfigError",
    "NumericError",
    "PartialResultError",
    "HoppingModel",
    "BoundaryCondition",
    "ScatteringWindow",
    "build_hamiltonian",
    "eigensystem",
    "OUParams",
    "WhiteNoiseParams",
    "EvolutionConfig",
    "InitialState",
    "Integrator",
    "evolve_pair",
    "evolve_single",
    "EnsembleConfig",
    "run_ensemble",
]
