"""Four-wire distribution network modelling, neutral-eliminating transforms,
power flow and neutral voltage recovery."""

__version__ = "0.1.0"

from .errors import FourWireError
from .model import Conductor, Network, network_from_json, network_to_json, validate_network
from .recover import recover_neutral, recovery_error
from .solver import Solution, SolveOptions, solve_powerflow
from .transform import TransformKind, transform_network

__all__ = [
    "Conductor",
    "FourWireError",
    "Network",
    "Solution",
    "SolveOptions",
    "TransformKind",
    "network_from_json",
    "network_to_json",
    "recover_neutral",
    "recovery_error",
    "solve_powerflow",
    "transform_network",
    "validate_network",
    "__version__",
]
