"""One neural network for AC optimal power flow across several (and growing) grids.

The package bundles a MATPOWER case reader, a Newton-Raphson power flow, an
interior-point OPF solver used to label data, an elastic-layer network that
maps loads to voltages for every grid it has seen, and the evaluation tooling
around it.
"""
from .grid_model import NetworkCase, builtin_case, derive_subnetwork, load_case, parse_case
from .opf import SolverOptions, solve_opf
from .powerflow import evaluate_constraints, solve_powerflow

__version__ = "0.1.0"

__all__ = ["NetworkCase", "SolverOptions", "builtin_case", "derive_subnetwork",
           "evaluate_constraints", "load_case", "parse_case", "solve_opf", "solve_powerflow"]
