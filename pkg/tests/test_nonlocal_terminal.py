"""Tests for the nonlocal_terminal module."""

from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from bspde_mc.errors import CondLViolated, InvalidKernel, NoConvergence, SupportOutsideGrid
from bspde_mc.exit_stats import uniform_survival_bound
from bspde_mc.model import preset_model
from bspde_mc.nonlocal_terminal import (
    Combo,
    PointScaled,
    SpaceTimeKernel,
    TimeKernel,
    TwoPoint,
    apply_gamma,
    contraction_from,
    default_tolerance,
    gamma_norm_bound,
    nodal_terminal,
    periodic_kernel,
    solve_nonlocal,
)
from bspde_mc.solver import GridSpec, SolutionField, TerminalData, solve_cauchy
from tests.conftest import FAST, sine_terminal


DECAY = np.exp(-np.pi**2 / 4.0)


def constant_field(value: float, T: float = 0.5) -> SolutionField:
    grid = GridSpec(np.linspace(0.0, 1.0, 5), np.linspace(0.0, T, 5))
    return SolutionField(np.full(grid.shape, value), np.zeros(grid.shape), grid)


class TestGammaNormBound:
    """Catalog bounds and contraction regimes."""

    def test_point_before_horizon(self):
        """kappa = 1 at t1 < T is a condG(i) kernel."""
        bound = gamma_norm_bound(periodic_kernel(), 1.0)
        assert bound.bound == 1.0
        assert bound.regime == "condG(i)"

    def test_point_at_horizon(self):
        """Reading u(., T) needs a bound strictly below 1."""
        assert gamma_norm_bound(PointScaled(0.5, 1.0), 1.0).regime == "condG(ii)"
        assert gamma_norm_bound(PointScaled(1.0, 1.0), 1.0).regime == "invalid"

    def test_large_kappa(self):
        """|kappa| > 1 is invalid whatever the time."""
        assert gamma_norm_bound(PointScaled(-1.2, 0.0), 1.0).regime == "invalid"

    def test_two_point(self):
        """The bound of two point reads is |alpha1| + |alpha2|."""
        bound = gamma_norm_bound(TwoPoint(0.3, 0.1, -0.4, 0.2), 1.0)
        assert bound.bound == pytest.approx(0.7)
        assert bound.regime == "condG(i)"

    def test_time_average(self):
        """k = 1/theta integrates to 1; it is valid only before T."""
        kernel = TimeKernel(lambda t: 1.0 / 0.4 + 0.0 * t, 0.4)
        bound = gamma_norm_bound(kernel, 0.5)
        assert bound.bound == pytest.approx(1.0, abs=1e-9)
        assert bound.regime == "condG(i)"
        assert gamma_norm_bound(TimeKernel(lambda t: 2.0 + 0.0 * t, 0.5), 0.5).regime == "invalid"

    def test_space_time(self, heat):
        """A unit kernel on [0, theta] x (0, 1) has bound theta."""
        _, domain = heat
        kernel = SpaceTimeKernel(lambda t, y, x: 1.0 + 0.0 * t, 0.25)
        assert gamma_norm_bound(kernel, 0.5, domain).bound == pytest.approx(0.25)

    def test_space_time_needs_domain(self):
        """Without an interval the space-time bound is undefined."""
        with pytest.raises(InvalidKernel):
            gamma_norm_bound(SpaceTimeKernel(lambda t, y, x: 1.0 + 0.0 * t, 0.25), 0.5)

    def test_combo(self):
        """A convex combination has the weighted bound and the largest horizon."""
        kernel = Combo(((0.5, PointScaled(1.0, 0.0)), (0.5, PointScaled(0.5, 1.0))))
        bound = gamma_norm_bound(kernel, 1.0)
        assert bound.bound == pytest.approx(0.75)
        assert bound.horizon == 1.0
        assert bound.regime == "condG(ii)"

    def test_combo_weights(self):
        """Combo weights must sum to one."""
        with pytest.raises(InvalidKernel):
            Combo(((0.5, periodic_kernel()), (0.2, periodic_kernel())))

    def test_malformed(self):
        """Negative times and non-positive theta are malformed."""
        with pytest.raises(InvalidKernel):
            gamma_norm_bound(PointScaled(0.5, -0.1), 1.0)
        with pytest.raises(InvalidKernel):
            gamma_norm_bound(TimeKernel(lambda t: t, 0.0), 1.0)


class TestApplyGamma:
    """Kernels applied to a stored field."""

    def test_constant_field(self, heat):
        """Each kernel reads a constant field as its total weight."""
        _, domain = heat
        field = constant_field(2.0)
        assert np.allclose(apply_gamma(PointScaled(0.5, 0.25), field), 1.0)
        assert np.allclose(apply_gamma(TimeKernel(lambda t: 1.0 + 0.0 * t, 0.25), field), 0.5)
        assert np.allclose(apply_gamma(SpaceTimeKernel(lambda t, y, x: 1.0 + 0.0 * t, 0.25), field), 0.5)

    def test_between_columns(self):
        """Point reads between time nodes interpolate linearly."""
        grid = GridSpec(np.array([0.0, 0.5, 1.0]), np.array([0.0, 1.0]))
        field = SolutionField(np.array([[0.0, 0.0], [1.0, 3.0], [0.0, 0.0]]), np.zeros((3, 2)), grid)
        assert apply_gamma(PointScaled(1.0, 0.5), field).tolist() == [0.0, 2.0, 0.0]

    def test_support_outside_grid(self):
        """Reading past the last column raises."""
        with pytest.raises(SupportOutsideGrid):
            apply_gamma(PointScaled(0.5, 0.8), constant_field(1.0))


class TestSolveNonlocal:
    """Neumann iteration for the terminal value."""

    def test_invalid_kernel_before_simulation(self, heat, heat_grid):
        """An invalid kernel is refused before any path is drawn."""
        coeffs, domain = heat
        with patch("bspde_mc.nonlocal_terminal.PropagationOperator.build") as build:
            with pytest.raises(InvalidKernel):
                solve_nonlocal(coeffs, domain, sine_terminal(domain), PointScaled(1.0, coeffs.T), heat_grid, FAST)
        build.assert_not_called()

    def test_negative_rate(self, heat_grid):
        """lambda < 0 violates the discount condition."""
        coeffs, domain = preset_model("heat", lam=-1.0)
        with pytest.raises(CondLViolated):
            solve_nonlocal(coeffs, domain, sine_terminal(domain), PointScaled(0.5, 0.0), heat_grid, FAST)

    def test_scaled_initial_value(self, heat, heat_grid):
        """phi = xi + u(., 0) / 2 gives a sine of amplitude 1 / (1 - exp(-pi^2/4) / 2)."""
        coeffs, domain = heat
        result = solve_nonlocal(coeffs, domain, sine_terminal(domain), PointScaled(0.5, 0.0), heat_grid, FAST)
        amplitude = 1.0 / (1.0 - 0.5 * DECAY)
        assert result.report.phi_star[4] == pytest.approx(amplitude, abs=1e-2)
        assert result.report.contraction_estimate < 0.5
        assert result.report.residual_history[-1] <= 1e-3
        assert result.report.iterations <= 15
        assert result.field.values[4, -1] == pytest.approx(result.report.phi_star[4])
        assert result.field.values[4, 0] == pytest.approx(amplitude * DECAY, abs=1e-2)

    def test_periodic(self, heat, heat_grid):
        """u(., T) - u(., 0) = xi amplifies the sine by 1 / (1 - exp(-pi^2/4))."""
        coeffs, domain = heat
        result = solve_nonlocal(coeffs, domain, sine_terminal(domain), periodic_kernel(), heat_grid, FAST)
        terminal, initial = result.field.values[4, -1], result.field.values[4, 0]
        assert result.report.phi_star[4] == pytest.approx(1.0 / (1.0 - DECAY), abs=2e-2)
        assert terminal - initial == pytest.approx(1.0, abs=1e-2)

    def test_time_average_contracts_with_survival(self, heat, heat_grid):
        """A unit-mass average over [0, 0.4] contracts at least as fast as sqrt(nu)."""
        coeffs, domain = heat
        theta = 0.4
        cfg = replace(FAST, path_count=1000)
        kernel = TimeKernel(lambda t: 1.0 / theta + 0.0 * t, theta)
        assert gamma_norm_bound(kernel, coeffs.T).regime == "condG(i)"
        result = solve_nonlocal(coeffs, domain, sine_terminal(domain), kernel, heat_grid, cfg)
        nu, _ = uniform_survival_bound(coeffs, domain, 0.0, coeffs.T - theta, cfg)
        assert result.report.contraction_estimate <= np.sqrt(nu.p_hat) + 0.05

    def test_unique_fixed_point(self, heat, heat_grid):
        """Different starting values reach the same terminal value."""
        coeffs, domain = heat
        xi = sine_terminal(domain)
        tol = 1e-6
        cfg = replace(FAST, path_count=1000)
        a = solve_nonlocal(coeffs, domain, xi, PointScaled(0.5, 0.0), heat_grid, cfg, tol=tol)
        b = solve_nonlocal(coeffs, domain, xi, PointScaled(0.5, 0.0), heat_grid, cfg, tol=tol, initial=np.zeros(9))
        assert np.max(np.abs(a.report.phi_star - b.report.phi_star)) <= 2 * tol

    def test_terminal_identity(self, heat, heat_grid):
        """The returned field satisfies u(., T) - Gamma u = xi on interior nodes within 2 tol."""
        coeffs, domain = heat
        xi = sine_terminal(domain)
        kernel = PointScaled(0.5, 0.0)
        tol = 1e-6
        result = solve_nonlocal(coeffs, domain, xi, kernel, heat_grid, replace(FAST, path_count=1000), tol=tol)
        xs = heat_grid.x_nodes
        gap = result.field.column_at(coeffs.T) - apply_gamma(kernel, result.field) - xi(xs[:, None])
        assert np.max(np.abs(gap[1:-1])) <= 2 * tol
        assert result.report.tol == tol

    def test_residuals_shrink_at_kernel_bound(self, heat, heat_grid):
        """Each Neumann residual is at most the kernel bound times the previous one."""
        coeffs, domain = heat
        kernel = TwoPoint(0.4, 0.0, 0.4, 0.25)
        bound = gamma_norm_bound(kernel, coeffs.T).bound
        result = solve_nonlocal(
            coeffs, domain, sine_terminal(domain), kernel, heat_grid, replace(FAST, path_count=1000), tol=1e-10
        )
        history = result.report.residual_history
        assert len(history) >= 3
        for before, after in zip(history, history[1:]):
            assert after <= bound * before + 1e-14
        assert result.report.contraction_estimate <= bound

    def test_zero_kernel_is_plain_solve(self, heat, heat_grid):
        """kappa = 0 converges in one iteration to the Cauchy solution of the nodal data."""
        coeffs, domain = heat
        xi = sine_terminal(domain)
        cfg = replace(FAST, path_count=1000)
        result = solve_nonlocal(coeffs, domain, xi, PointScaled(0.0, 0.0), heat_grid, cfg)
        assert result.report.iterations == 1
        assert result.report.residual_history == (0.0,)
        xs = heat_grid.x_nodes
        nodal = TerminalData.from_nodes(xs, nodal_terminal(xi, domain, xs), domain)
        np.testing.assert_array_equal(result.field.values, solve_cauchy(coeffs, domain, nodal, heat_grid, cfg).values)
        plain = solve_cauchy(coeffs, domain, xi, heat_grid, cfg)
        assert np.max(np.abs(result.field.values - plain.values)) <= 0.02

    def test_default_tolerance_uses_nodes(self, heat):
        """Without tol the stopping level is 1e-3 of the largest nodal terminal value."""
        coeffs, domain = heat
        grid = GridSpec(np.array([0.0, 0.3, 0.7, 1.0]), np.array([0.0, coeffs.T]))
        xi = sine_terminal(domain)
        result = solve_nonlocal(coeffs, domain, xi, PointScaled(0.5, 0.0), grid, replace(FAST, path_count=500))
        assert result.report.tol == pytest.approx(1e-3 * np.sin(0.3 * np.pi))
        assert result.report.tol == default_tolerance(nodal_terminal(xi, domain, grid.x_nodes))

    def test_no_convergence(self, heat, heat_grid):
        """An exhausted budget raises with the residual history and the noise floor."""
        coeffs, domain = heat
        with pytest.raises(NoConvergence) as info:
            solve_nonlocal(
                coeffs, domain, sine_terminal(domain), PointScaled(0.5, 0.0), heat_grid,
                replace(FAST, path_count=500), tol=1e-12, max_iter=1,
            )
        assert len(info.value.residual_history) == 1
        assert info.value.noise_floor > 0

    def test_report_csv(self, heat, heat_grid, tmp_path):
        """The report lists one residual per iteration after a commented header."""
        coeffs, domain = heat
        result = solve_nonlocal(
            coeffs, domain, sine_terminal(domain), PointScaled(0.5, 0.0), heat_grid, replace(FAST, path_count=500)
        )
        lines = result.report.to_csv(tmp_path / "fixed_point.csv").read_text().splitlines()
        assert lines[0].startswith("# kernel: PointScaled")
        header = lines.index("iter,residual")
        assert len(lines) - header - 1 == result.report.iterations
        assert lines[header + 1].startswith("1,")


class TestContraction:
    """Residual ratio estimate."""

    def test_ratio(self):
        """The estimate is the largest ratio of successive residuals."""
        assert contraction_from([1.0, 0.1, 0.02]) == pytest.approx(0.2)
        assert contraction_from([0.3]) == 0.0
