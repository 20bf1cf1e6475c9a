"""Continuous-measurement simulation, projection filtering and spin-state tomography."""

__version__ = "0.1.0"

from .errors import SpinFilterError  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .spin import SpinBasis, build_operators, scs_state, squeezing_xi2  # noqa: E402

__all__ = ["__version__", "BACKEND", "SpinBasis", "SpinFilterError", "build_operators", "scs_state",
           "squeezing_xi2"]
