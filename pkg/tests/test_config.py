"""Tests for the config module."""

from pathlib import Path

import numpy as np
import pytest
import yaml

from bspde_mc.errors import ConfigError, ExpressionSyntaxError, UnknownIdentifier, ValidationError
from bspde_mc.config import RunConfig, load_config
from bspde_mc.nonlocal_terminal import Combo, PointScaled, SpaceTimeKernel, TimeKernel, TwoPoint


def heat_run(**sections) -> dict:
    data = {
        "command": "solve",
        "model": {"preset": "heat", "xi": "sin(pi * x)"},
        "grid": {"nx": 9, "ns": 3},
        "sim": {"paths": 200, "step_h": 0.01, "seed": 7},
    }
    data.update(sections)
    return data


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


class TestFromDict:
    """Section structure."""

    def test_unknown_section(self):
        """Sections outside the known set are refused."""
        with pytest.raises(ConfigError, match="solver"):
            RunConfig.from_dict(heat_run(solver={}))

    def test_bad_command(self):
        """The command must be one of the five run kinds."""
        with pytest.raises(ConfigError):
            RunConfig.from_dict(heat_run(command="plot"))

    def test_not_a_mapping(self):
        """A run file is a mapping."""
        with pytest.raises(ConfigError):
            RunConfig.from_dict(["solve"])

    def test_constants_are_numbers(self):
        """Constants bind names to numbers."""
        with pytest.raises(ConfigError):
            RunConfig.from_dict(heat_run(constants={"sigma": "fast"}))

    def test_overrides(self, tmp_path):
        """Command-line values replace seed, threads and output directory."""
        config = RunConfig.from_dict(heat_run()).with_overrides(seed=99, threads=2, out=tmp_path)
        assert config.seed == 99
        assert config.sim_config().threads == 2
        assert config.out_dir == tmp_path

    def test_default_output(self):
        """Without an output section artifacts go to ./out."""
        assert str(RunConfig.from_dict(heat_run()).out_dir) == "out"


class TestSimConfig:
    """The sim section."""

    def test_mapping(self):
        """Keys map onto the Monte Carlo settings."""
        cfg = RunConfig.from_dict(heat_run(sim={"paths": 500, "step_h": 0.002, "seed": 3, "bridge": True})).sim_config()
        assert (cfg.path_count, cfg.step_h, cfg.base_seed, cfg.bridge_correction) == (500, 0.002, 3, True)

    def test_seed_range(self):
        """Seeds are unsigned 64-bit integers."""
        assert RunConfig.from_dict(heat_run(sim={"seed": 2**64 - 1})).seed == 2**64 - 1
        with pytest.raises(ConfigError):
            RunConfig.from_dict(heat_run(sim={"seed": 2**64})).sim_config()
        with pytest.raises(ConfigError):
            RunConfig.from_dict(heat_run(sim={"seed": -1})).sim_config()

    def test_integer_paths(self):
        """Path counts must be whole numbers."""
        with pytest.raises(ConfigError):
            RunConfig.from_dict(heat_run(sim={"paths": 10.5})).sim_config()


class TestBuildModel:
    """Models from presets and expressions."""

    def test_preset_with_horizon(self):
        """Preset keys override T and the rate."""
        config = RunConfig.from_dict(heat_run(model={"preset": "heat", "T": 0.25, "lambda": 0.5, "xi": "0"}))
        coeffs, domain = config.build_model()
        assert coeffs.T == 0.25
        assert coeffs.rate(np.array([[0.5]]), 0.0)[0] == 0.5

    def test_unknown_preset(self):
        """Preset names are checked."""
        with pytest.raises(ConfigError):
            RunConfig.from_dict(heat_run(model={"preset": "levy", "xi": "0"})).build_model()

    def test_expressions(self):
        """A price model written out with constants."""
        config = RunConfig.from_dict(heat_run(
            constants={"sigma": 0.2},
            model={
                "domain": [1.0, 2.0],
                "T": 1.0,
                "b": "0.5 * sigma^2 * x^2",
                "beta": ["sigma * x"],
                "xi": "(x - 1) * (2 - x)",
            },
        ))
        coeffs, domain = config.build_model()
        assert (domain.r1, domain.r2) == (1.0, 2.0)
        assert coeffs.N == 1 and coeffs.completed
        assert coeffs.diffusion(np.array([[1.5]]), 0.0)[0, 0, 0] == pytest.approx(0.045)
        assert coeffs.noise_matrix(np.array([[1.5]]), 0.0)[0, 0, 0] == pytest.approx(0.3)

    def test_spherical_layer(self):
        """Layers take r1, r2 and dim; scattered points form the grid."""
        config = RunConfig.from_dict(heat_run(
            model={"domain": {"r1": 1, "r2": 2, "dim": 2}, "T": 0.5, "b": "0.5", "xi": "(x1^2 + x2^2 - 1) * (4 - x1^2 - x2^2)"},
            grid={"points": [[1.5, 0.0], [0.0, 1.2]], "ns": 2},
        ))
        coeffs, domain = config.build_model()
        grid = config.build_grid(domain, coeffs.T)
        assert domain.dim == 2 and coeffs.n == 2
        assert grid.x_nodes.shape == (2, 2)

    def test_layer_needs_points(self):
        """Spherical layers have no default grid."""
        config = RunConfig.from_dict(heat_run(model={"domain": {"r1": 1, "r2": 2, "dim": 2}, "T": 0.5, "b": "0.5", "xi": "0"}))
        coeffs, domain = config.build_model()
        with pytest.raises(ConfigError):
            config.build_grid(domain, coeffs.T)

    def test_regularize(self):
        """regularize adds delta/2 to the diffusion."""
        config = RunConfig.from_dict(heat_run(model={"preset": "gbm", "regularize": 0.1, "xi": "0"}))
        coeffs, _ = config.build_model()
        assert coeffs.diffusion(np.array([[1.0]]), 0.0)[0, 0, 0] == pytest.approx(0.02 + 0.05)

    def test_bad_domain(self):
        """A domain needs two ends or a layer mapping."""
        config = RunConfig.from_dict(heat_run(model={"domain": [0.0], "T": 1.0, "b": "0.5", "xi": "0"}))
        with pytest.raises(ConfigError):
            config.build_model()


class TestBuildGrid:
    """The grid section."""

    def test_defaults(self):
        """Default grids have 33 x nodes and 17 s nodes."""
        config = RunConfig.from_dict(heat_run(grid={}))
        coeffs, domain = config.build_model()
        assert config.build_grid(domain, coeffs.T).shape == (33, 17)

    def test_explicit_nodes(self):
        """Explicit nodes are validated against the domain and T."""
        config = RunConfig.from_dict(heat_run(grid={"x_nodes": [0, 0.5, 1], "s_nodes": [0, 0.5]}))
        coeffs, domain = config.build_model()
        assert config.build_grid(domain, coeffs.T).shape == (3, 2)
        bad = RunConfig.from_dict(heat_run(grid={"x_nodes": [0, 0.5], "s_nodes": [0, 0.5]}))
        with pytest.raises(ValidationError):
            bad.build_grid(domain, coeffs.T)


class TestBuildKernel:
    """The kernel catalog."""

    def test_types(self):
        """Each kernel type builds its class."""
        config = RunConfig.from_dict(heat_run(command="nonlocal"))
        assert config.build_kernel({"type": "periodic"}) == PointScaled(1.0, 0.0)
        assert isinstance(config.build_kernel({"type": "point", "kappa": 0.5, "t1": 0.1}), PointScaled)
        assert isinstance(
            config.build_kernel({"type": "two-point", "alpha1": 0.2, "t1": 0, "alpha2": 0.3, "t2": 0.1}), TwoPoint
        )
        time = config.build_kernel({"type": "time", "k": "2", "theta": 0.25})
        assert isinstance(time, TimeKernel) and time.label == "2"
        assert isinstance(config.build_kernel({"type": "space-time", "k": "t * y", "theta": 0.25}), SpaceTimeKernel)

    def test_combo(self):
        """Combo parts carry their weights."""
        config = RunConfig.from_dict(heat_run(command="nonlocal"))
        kernel = config.build_kernel({
            "type": "combo",
            "parts": [{"weight": 0.5, "type": "periodic"}, {"weight": 0.5, "type": "point", "kappa": 0.5, "t1": 0.5}],
        })
        assert isinstance(kernel, Combo)
        assert [w for w, _ in kernel.parts] == [0.5, 0.5]

    def test_unknown_type(self):
        """Kernel types are checked."""
        with pytest.raises(ConfigError):
            RunConfig.from_dict(heat_run()).build_kernel({"type": "fourier"})

    def test_time_kernel_reads_time_only(self):
        """A time kernel may not read x."""
        with pytest.raises(UnknownIdentifier):
            RunConfig.from_dict(heat_run()).build_kernel({"type": "time", "k": "x", "theta": 0.25})


class TestBuildMarket:
    """The market section."""

    def test_market(self):
        """Expressions compile and the combined kernel keeps a readable label."""
        config = RunConfig.from_dict({
            "command": "replicate",
            "market": {
                "sigma": "0.2", "S0": 1.5, "s_L": 1, "s_U": 2, "W_L": 1, "W_U": 2,
                "T": 1, "theta": 0.5, "k1": "0.5", "k2": "0", "zeta": "0.75 * x",
            },
        })
        market = config.build_market()
        assert market.kappas() == pytest.approx((0.25, 0.0))
        assert market.labels["k"] == "(0.5) + (0)"
        assert market.zeta(np.array([2.0])).tolist() == [1.5]


class TestCommandSettings:
    """Iteration and exit-statistics keys."""

    def test_iteration_defaults(self):
        """Without keys the solver tolerance is kept and 50 iterations are allowed."""
        config = RunConfig.from_dict(heat_run(command="nonlocal", kernel={"type": "periodic"}))
        assert config.iteration_settings(config.kernel, "kernel") == (None, 50)

    def test_iteration_values(self):
        """tol and max_iter are numbers."""
        config = RunConfig.from_dict(heat_run(command="nonlocal", kernel={"type": "periodic", "tol": 1e-5, "max_iter": 8}))
        assert config.iteration_settings(config.kernel, "kernel") == (1e-5, 8)
        bad = RunConfig.from_dict(heat_run(command="nonlocal", kernel={"type": "periodic", "max_iter": "many"}))
        with pytest.raises(ConfigError, match="kernel.max_iter"):
            bad.iteration_settings(bad.kernel, "kernel")

    def test_exit_stats_defaults(self):
        """The start point defaults to the midpoint and the decay horizon to the longest theta."""
        config = RunConfig.from_dict({"command": "exit-stats", "model": {"preset": "brownian"}, "exit_stats": {"thetas": [0.5, 1.0]}})
        _, domain = config.build_model()
        settings = config.exit_stats_settings(domain)
        assert settings["x"].tolist() == [0.0]
        assert settings["decay_theta"] == 1.0
        assert settings["decay"] is None and settings["perturb_delta"] is None

    def test_exit_stats_needs_horizons(self):
        """An empty horizon list is refused."""
        config = RunConfig.from_dict({"command": "exit-stats", "model": {"preset": "brownian"}, "exit_stats": {"thetas": []}})
        _, domain = config.build_model()
        with pytest.raises(ConfigError):
            config.exit_stats_settings(domain)


class TestLoadConfig:
    """Reading and validating run files."""

    def test_round_trip(self, tmp_path):
        """A valid file loads with its overrides applied."""
        path = write_yaml(tmp_path / "run.yaml", heat_run())
        config = load_config(path, seed=5)
        assert config.command == "solve"
        assert config.seed == 5

    def test_missing_file(self, tmp_path):
        """A missing file is a configuration error."""
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path):
        """Unparseable YAML is a configuration error."""
        path = tmp_path / "run.yaml"
        path.write_text("command: [solve\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_expression_errors_surface(self, tmp_path):
        """Syntax errors are found before any simulation."""
        data = heat_run(model={"domain": [0, 1], "T": 1, "b": "x +", "xi": "0"})
        with pytest.raises(ExpressionSyntaxError) as info:
            load_config(write_yaml(tmp_path / "run.yaml", data))
        assert info.value.offset == 3

    def test_exit_stats_needs_thetas(self, tmp_path):
        """exit-stats runs need survival horizons."""
        data = {"command": "exit-stats", "model": {"preset": "brownian"}}
        with pytest.raises(ConfigError):
            load_config(write_yaml(tmp_path / "run.yaml", data))


CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    """Every example run file loads and validates."""
    config = load_config(path)
    assert config.out_dir.parts[0] == "out"
