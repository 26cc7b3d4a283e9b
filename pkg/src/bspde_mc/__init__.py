"""bspde-mc - Monte Carlo solutions of degenerate backward SPDEs in bounded domains."""

from importlib.metadata import version, PackageNotFoundError

# Get version from installed package metadata (reads from pyproject.toml)
try:
    __version__ = version("bspde-mc")
except PackageNotFoundError:
    # Package not installed (development mode)
    __version__ = "0.0.0.dev"

from bspde_mc.characteristics import SimConfig, simulate_batch, simulate_path
from bspde_mc.exit_stats import estimate_survival, exit_time_l1_distance
from bspde_mc.model import CoefficientSet, Domain, complete_diffusion, preset_model, validate_coercivity
from bspde_mc.nonlocal_terminal import gamma_norm_bound, solve_nonlocal
from bspde_mc.pde_oracle import FDGrid, solve_backward_pde
from bspde_mc.portfolio import MarketSpec, replicate, solve_hedge
from bspde_mc.solver import GridSpec, TerminalData, solve_cauchy

__all__ = [
    "__version__",
    "CoefficientSet",
    "Domain",
    "FDGrid",
    "GridSpec",
    "MarketSpec",
    "SimConfig",
    "TerminalData",
    "complete_diffusion",
    "estimate_survival",
    "exit_time_l1_distance",
    "gamma_norm_bound",
    "preset_model",
    "replicate",
    "simulate_batch",
    "simulate_path",
    "solve_backward_pde",
    "solve_cauchy",
    "solve_hedge",
    "solve_nonlocal",
    "validate_coercivity",
]
