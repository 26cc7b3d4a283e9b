"""YAML run configuration.

A run file is a mapping of sections::

    command: solve            # solve | nonlocal | oracle-compare | exit-stats | replicate
    constants: {sigma: 0.2}
    model: {...}
    grid: {...}
    sim: {...}
    kernel: {...}             # nonlocal
    oracle: {...}             # oracle-compare
    exit_stats: {...}         # exit-stats
    market: {...}             # replicate
    output: {dir: out}

See README.md for the keys of every section. ``load_config`` resolves the
file, applies command-line overrides and smoke-evaluates every expression
before anything is simulated.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from bspde_mc.characteristics import SimConfig
from bspde_mc.errors import BspdeError, ConfigError
from bspde_mc.expr import (
    compile_matrix_field,
    compile_price_function,
    compile_space_time_kernel,
    compile_state_function,
    compile_time_function,
    compile_vector_field,
)
from bspde_mc.model import (
    PRESETS,
    CoefficientSet,
    Domain,
    check_boundary_vanishing,
    complete_diffusion,
    preset_model,
    regularize_diffusion,
)
from bspde_mc.nonlocal_terminal import (
    Combo,
    GammaKernel,
    PointScaled,
    SpaceTimeKernel,
    TimeKernel,
    TwoPoint,
    periodic_kernel,
)
from bspde_mc.pde_oracle import FDGrid
from bspde_mc.portfolio import MarketSpec
from bspde_mc.solver import GridSpec, TerminalData


logger = logging.getLogger(__name__)

COMMANDS = ("solve", "nonlocal", "oracle-compare", "exit-stats", "replicate")
SECTIONS = ("command", "constants", "model", "grid", "sim", "kernel", "market", "oracle", "exit_stats", "output")
KERNEL_TYPES = ("point", "periodic", "two-point", "time", "space-time", "combo")
SEED_LIMIT = 2**64


def load_yaml(yaml_path):
    """Load YAML configuration file."""
    with open(yaml_path, "r") as f:
        return yaml.safe_load(f)


def _section(data: dict, name: str) -> dict:
    value = data.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"Section {name!r} must be a mapping")
    return dict(value)


def _number(section: dict, key: str, where: str, default: Any = None, kind=float):
    value = section.get(key, default)
    if value is None:
        raise ConfigError(f"{where}.{key} is required")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {value!r}")
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{where}.{key} must be an integer, got {value!r}")
    return kind(value)


def _text(section: dict, key: str, where: str, default: Optional[str] = None) -> str:
    value = section.get(key, default)
    if value is None:
        raise ConfigError(f"{where}.{key} is required")
    if isinstance(value, bool):
        raise ConfigError(f"{where}.{key} must be an expression, got {value!r}")
    return str(value)


def _numbers(values, where: str) -> np.ndarray:
    try:
        return np.asarray(values, dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where} must be a list of numbers") from e


@dataclass(frozen=True)
class RunConfig:
    """A resolved run file."""

    command: str
    constants: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    kernel: dict = field(default_factory=dict)
    market: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    exit_stats: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Any) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("A run file must be a mapping of sections")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"Unknown section(s): {', '.join(unknown)}")
        command = data.get("command")
        if command not in COMMANDS:
            raise ConfigError(f"command must be one of {', '.join(COMMANDS)}, got {command!r}")
        constants = _section(data, "constants")
        for name, value in constants.items():
            _number(constants, name, "constants")
        return cls(command, constants, **{name: _section(data, name) for name in SECTIONS[2:]})

    def resolved(self) -> dict:
        """Plain mapping suitable for ``yaml.safe_dump``."""
        return asdict(self)

    def with_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None, out: Optional[Path] = None) -> "RunConfig":
        sim = dict(self.sim)
        output = dict(self.output)
        if seed is not None:
            sim["seed"] = int(seed)
        if threads is not None:
            sim["threads"] = int(threads)
        if out is not None:
            output["dir"] = str(out)
        return replace(self, sim=sim, output=output)

    @property
    def out_dir(self) -> Path:
        return Path(self.output.get("dir", "out"))

    @property
    def seed(self) -> int:
        return self.sim_config().base_seed

    # -- builders ---------------------------------------------------------

    def sim_config(self) -> SimConfig:
        sim = self.sim
        seed = _number(sim, "seed", "sim", 0, int)
        if not 0 <= seed < SEED_LIMIT:
            raise ConfigError(f"sim.seed must be an unsigned 64-bit integer, got {seed}")
        return SimConfig(
            step_h=_number(sim, "step_h", "sim", 1e-3),
            path_count=_number(sim, "paths", "sim", 10_000, int),
            base_seed=seed,
            bridge_correction=bool(sim.get("bridge", False)),
            threads=_number(sim, "threads", "sim", 1, int),
            escape_bound=_number(sim, "escape_bound", "sim", 1e6),
        )

    def build_domain(self) -> Domain:
        spec = self.model.get("domain")
        if isinstance(spec, (list, tuple)) and len(spec) == 2:
            lo, hi = _numbers(spec, "model.domain")
            return Domain.interval(lo, hi)
        if isinstance(spec, dict):
            return Domain.spherical_layer(
                _number(spec, "r1", "model.domain"),
                _number(spec, "r2", "model.domain"),
                _number(spec, "dim", "model.domain", kind=int),
            )
        raise ConfigError("model.domain must be [lo, hi] or {r1, r2, dim}")

    def build_model(self) -> tuple[CoefficientSet, Domain]:
        """Completed coefficients and domain, from a preset or from expressions."""
        model = self.model
        if "preset" in model:
            name = model["preset"]
            if name not in PRESETS:
                raise ConfigError(f"model.preset must be one of {', '.join(PRESETS)}, got {name!r}")
            coeffs, domain = preset_model(
                name,
                T=_number(model, "T", "model") if "T" in model else None,
                sigma=_number(model, "sigma", "model", 0.2),
                lam=_number(model, "lambda", "model", 0.0),
            )
        else:
            domain = self.build_domain()
            n = domain.dim
            beta = model.get("beta") or []
            if not isinstance(beta, list):
                raise ConfigError("model.beta must be a list")
            coeffs = CoefficientSet(
                n=n,
                T=_number(model, "T", "model"),
                b=compile_matrix_field(model.get("b") if isinstance(model.get("b"), list) else _text(model, "b", "model"), n, self.constants),
                f=compile_vector_field(model.get("f") if isinstance(model.get("f"), list) else _text(model, "f", "model", "0"), n, self.constants),
                lam=compile_state_function(_text(model, "lambda", "model", "0"), n, self.constants),
                beta=tuple(compile_vector_field(column, n, self.constants) for column in beta),
                name=str(model.get("name", "custom")),
            )
            coeffs = complete_diffusion(coeffs, domain)
        if "regularize" in model:
            coeffs = regularize_diffusion(coeffs, _number(model, "regularize", "model"), domain)
        return coeffs, domain

    def build_terminal(self, domain: Domain, grid: Optional[GridSpec] = None) -> TerminalData:
        source = _text(self.model, "xi", "model")
        return TerminalData.create(compile_state_function(source, domain.dim, self.constants, time=False), domain, grid)

    def build_grid(self, domain: Domain, T: float) -> GridSpec:
        grid = self.grid
        if "s_nodes" in grid:
            s_nodes = _numbers(grid["s_nodes"], "grid.s_nodes")
        else:
            s_nodes = np.linspace(0.0, T, _number(grid, "ns", "grid", 17, int))
        if "points" in grid:
            x_nodes = _numbers(grid["points"], "grid.points").reshape(-1, domain.dim)
        elif "x_nodes" in grid:
            x_nodes = _numbers(grid["x_nodes"], "grid.x_nodes")
        elif domain.is_interval:
            x_nodes = np.linspace(domain.r1, domain.r2, _number(grid, "nx", "grid", 33, int))
        else:
            raise ConfigError("A spherical-layer model needs grid.points")
        spec = GridSpec(x_nodes, s_nodes)
        spec.validate(domain, T)
        return spec

    def build_kernel(self, section: Optional[dict] = None, where: str = "kernel") -> GammaKernel:
        spec = self.kernel if section is None else section
        kind = spec.get("type")
        if kind not in KERNEL_TYPES:
            raise ConfigError(f"{where}.type must be one of {', '.join(KERNEL_TYPES)}, got {kind!r}")
        if kind == "periodic":
            return periodic_kernel()
        if kind == "point":
            return PointScaled(_number(spec, "kappa", where), _number(spec, "t1", where, 0.0))
        if kind == "two-point":
            return TwoPoint(
                _number(spec, "alpha1", where), _number(spec, "t1", where),
                _number(spec, "alpha2", where), _number(spec, "t2", where),
            )
        if kind == "time":
            source = _text(spec, "k", where)
            return TimeKernel(compile_time_function(source, self.constants), _number(spec, "theta", where), source)
        if kind == "space-time":
            source = _text(spec, "k", where)
            return SpaceTimeKernel(compile_space_time_kernel(source, self.constants), _number(spec, "theta", where), source)
        parts = spec.get("parts")
        if not isinstance(parts, list) or not parts:
            raise ConfigError(f"{where}.parts must be a nonempty list")
        return Combo(tuple(
            (_number(part, "weight", f"{where}.parts[{i}]"), self.build_kernel(part, f"{where}.parts[{i}]"))
            for i, part in enumerate(parts)
        ))

    def build_fd(self) -> FDGrid:
        return FDGrid(
            nx=_number(self.oracle, "nx", "oracle", 127, int),
            nt=_number(self.oracle, "nt", "oracle", 200, int),
            scheme=str(self.oracle.get("scheme", "crank-nicolson")),
        )

    def build_market(self) -> MarketSpec:
        m = self.market
        labels = {key: _text(m, key, "market") for key in ("sigma", "k1", "k2", "zeta")}
        labels["k"] = f"({labels['k1']}) + ({labels['k2']})"
        return MarketSpec(
            sigma=compile_time_function(labels["sigma"], self.constants),
            S0=_number(m, "S0", "market"),
            s_L=_number(m, "s_L", "market"),
            s_U=_number(m, "s_U", "market"),
            W_L=_number(m, "W_L", "market"),
            W_U=_number(m, "W_U", "market"),
            T=_number(m, "T", "market"),
            theta=_number(m, "theta", "market"),
            k1=compile_time_function(labels["k1"], self.constants),
            k2=compile_time_function(labels["k2"], self.constants),
            zeta=compile_price_function(labels["zeta"], self.constants),
            c_bar=_number(m, "c_bar", "market", 0.99),
            labels=labels,
        )

    def iteration_settings(self, section: dict, where: str) -> tuple[Optional[float], int]:
        """``(tol, max_iter)`` of a fixed-point section; ``tol`` None keeps the solver default."""
        tol = _number(section, "tol", where) if "tol" in section else None
        return tol, _number(section, "max_iter", where, 50, int)

    def replication_paths(self, cfg: SimConfig) -> int:
        return _number(self.market, "paths", "market", cfg.path_count, int)

    def exit_stats_settings(self, domain: Domain) -> dict:
        stats = self.exit_stats
        if "thetas" not in stats:
            raise ConfigError("exit_stats.thetas is required")
        thetas = [float(t) for t in _numbers(stats["thetas"], "exit_stats.thetas").ravel()]
        if not thetas:
            raise ConfigError("exit_stats.thetas must not be empty")
        settings = {
            "x": domain.as_points(stats.get("x", domain.midpoint()))[0],
            "s": _number(stats, "s", "exit_stats", 0.0),
            "thetas": thetas,
            "decay": _numbers(stats["decay"], "exit_stats.decay") if "decay" in stats else None,
            "decay_theta": _number(stats, "decay_theta", "exit_stats", max(thetas)),
            "perturb_x": domain.as_points(stats["perturb_x"])[0] if "perturb_x" in stats else None,
            "perturb_delta": _number(stats, "perturb_delta", "exit_stats") if "perturb_delta" in stats else None,
        }
        return settings

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        """Build every object the command needs and evaluate it once.

        Raises:
            ConfigError: on missing or mistyped keys.
            ExpressionSyntaxError, EvaluationError: on bad expressions.
        """
        cfg = self.sim_config()
        if self.command == "replicate":
            market = self.build_market()
            market.rates(np.array([0.0]))
            market.zeta(np.array([market.S0]))
            self.replication_paths(cfg)
            self.iteration_settings(self.market, "market")
            self.build_grid(Domain.interval(market.s_L, market.s_U), market.T)
            return

        coeffs, domain = self.build_model()
        mid = domain.midpoint()[None, :]
        coeffs.diffusion(mid, 0.0)
        coeffs.drift(mid, 0.0)
        coeffs.rate(mid, 0.0)
        coeffs.beta_matrix(mid, 0.0)
        check_boundary_vanishing(coeffs, domain)
        cfg.check_horizon(coeffs.T)

        if self.command == "exit-stats":
            self.exit_stats_settings(domain)
            return

        grid = self.build_grid(domain, coeffs.T)
        self.build_terminal(domain, grid)
        if self.command == "nonlocal":
            self.build_kernel()
            self.iteration_settings(self.kernel, "kernel")
        elif self.command == "oracle-compare":
            self.build_fd()


def load_config(
    path: Path,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    out: Optional[Path] = None,
) -> RunConfig:
    """Read, override and validate a run file.

    Raises:
        ConfigError: if the file is missing, is not YAML or is malformed.
    """
    try:
        data = load_yaml(path)
    except OSError as e:
        raise ConfigError(f"Cannot read {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path} is not valid YAML: {e}") from e
    config = RunConfig.from_dict(data).with_overrides(seed, threads, out)
    try:
        config.validate()
    except BspdeError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e
    logger.info("Loaded %s configuration from %s", config.command, path)
    return config
