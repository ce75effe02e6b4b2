"""Multi-host schistosomiasis transmission engine.

Simulation of a snail-vectored multi-host transmission ODE, equilibrium and
reproduction-number analysis, optimal-control solving by forward-backward
sweep, parameter calibration by rejection sampling, and a scenario CLI.
"""

__version__ = "0.1.0"

from .model import (
    ControlValue,
    DomainBounds,
    FreeStageParams,
    ModelParams,
    SnailParams,
    SpeciesParams,
    State,
    check_in_domain,
    default_params,
    domain_bounds,
    params_from_dict,
    params_to_dict,
    rhs_controlled,
    rhs_uncontrolled,
)

__all__ = [
    "__version__",
    "ControlValue", "DomainBounds", "FreeStageParams", "ModelParams",
    "SnailParams", "SpeciesParams", "State",
    "check_in_domain", "default_params", "domain_bounds",
    "params_from_dict", "params_to_dict", "rhs_controlled", "rhs_uncontrolled",
]
