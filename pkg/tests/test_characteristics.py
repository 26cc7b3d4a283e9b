"""Tests for the characteristics module."""

from dataclasses import replace

import numpy as np
import pytest

from bspde_mc.characteristics import (
    SimConfig,
    lattice_steps,
    simulate_batch,
    simulate_outcomes,
    simulate_path,
)
from bspde_mc.errors import NumericalBlowup, ValidationError
from bspde_mc.model import CoefficientSet, Domain, complete_diffusion, discount_growth_constant, preset_model


SMALL = SimConfig(step_h=5e-3, path_count=300, base_seed=3)


def frozen_model(lam: float = 0.0, T: float = 1.0):
    """No diffusion at all: characteristics stay where they start."""
    domain = Domain.interval(0.0, 1.0)
    coeffs = CoefficientSet(n=1, T=T, b=lambda x, t: 0.0, lam=lambda x, t: lam, name="frozen")
    return complete_diffusion(coeffs, domain), domain


class TestSimConfig:
    """Validation of Monte Carlo settings."""

    def test_rejects_bad_values(self):
        """Step, path count and thread count must be positive."""
        with pytest.raises(ValidationError):
            SimConfig(step_h=0.0)
        with pytest.raises(ValidationError):
            SimConfig(path_count=0)
        with pytest.raises(ValidationError):
            SimConfig(threads=0)

    def test_step_longer_than_horizon(self, heat):
        """A step longer than T is refused."""
        coeffs, domain = heat
        with pytest.raises(ValidationError):
            simulate_outcomes(coeffs, domain, [0.5], 0.0, SimConfig(step_h=1.0, path_count=10))


class TestLattice:
    """The shared time lattice."""

    def test_partial_first_and_last_steps(self):
        """Runs starting off the lattice get a partial first and last step."""
        steps = list(lattice_steps(0.25, 1.0, 0.3))
        assert [m for m, _, _ in steps] == [0, 1, 2, 3]
        assert steps[0][1:] == (0.25, 0.3)
        assert steps[-1][2] == 1.0
        assert steps[-1][1] == pytest.approx(0.9)

    def test_cells_are_shared(self):
        """Two runs from different start times address the same cells."""
        a = {m: t1 for m, _, t1 in lattice_steps(0.0, 1.0, 0.1)}
        b = {m: t1 for m, _, t1 in lattice_steps(0.45, 1.0, 0.1)}
        assert all(a[m] == pytest.approx(t1) for m, t1 in b.items())


class TestSimulatePath:
    """Single paths and batches."""

    def test_deterministic(self, heat):
        """The same seed and index reproduce the same path."""
        coeffs, domain = heat
        a = simulate_path(coeffs, domain, [0.5], 0.0, SMALL, 17)
        b = simulate_path(coeffs, domain, [0.5], 0.0, SMALL, 17)
        assert a == b

    def test_batch_of_one(self, heat):
        """A batch of one path is path 0."""
        coeffs, domain = heat
        batch = simulate_batch(coeffs, domain, [0.5], 0.0, replace(SMALL, path_count=1))
        assert batch == [simulate_path(coeffs, domain, [0.5], 0.0, SMALL, 0)]

    def test_start_on_boundary(self, heat):
        """Paths starting on the boundary stop immediately."""
        coeffs, domain = heat
        outcome = simulate_path(coeffs, domain, [1.0], 0.1, SMALL, 0)
        assert outcome.exited
        assert outcome.tau_T == 0.1
        assert outcome.y_exit == (1.0,)
        assert outcome.discount == 1.0

    def test_frozen_dynamics(self):
        """Without noise a path never exits and is discounted over [s, T]."""
        coeffs, domain = frozen_model(lam=1.0)
        outcome = simulate_path(coeffs, domain, [0.3], 0.2, SMALL, 4)
        assert not outcome.exited
        assert outcome.tau_T == 1.0
        assert outcome.y_exit == (0.3,)
        assert outcome.discount == pytest.approx(np.exp(-0.8), rel=1e-12)

    def test_negative_rate_grows(self):
        """lambda = -1 grows the discount by exp(T - s)."""
        coeffs, domain = frozen_model(lam=-1.0)
        outcome = simulate_path(coeffs, domain, [0.3], 0.2, SMALL, 4)
        assert outcome.discount == pytest.approx(np.exp(0.8), rel=1e-12)

    def test_start_outside(self, heat):
        """Start points outside the closed domain are rejected."""
        coeffs, domain = heat
        with pytest.raises(ValidationError):
            simulate_path(coeffs, domain, [1.5], 0.0, SMALL, 0)

    def test_blowup_names_path(self, brownian):
        """Escaping the bound raises NumericalBlowup with the global path index."""
        coeffs, domain = brownian
        cfg = replace(SMALL, escape_bound=0.5)
        with pytest.raises(NumericalBlowup) as info:
            simulate_path(coeffs, domain, [0.8], 0.0, cfg, 1500)
        assert info.value.path_index == 1500


class TestSimulateOutcomes:
    """Batched simulation invariants."""

    def test_outcome_bounds(self):
        """Exit times stay in [s, T], exit states in the closure, discounts under C_lambda."""
        coeffs, domain = preset_model("brownian", lam=-0.5)
        out = simulate_outcomes(coeffs, domain, [[0.0], [0.7]], 0.3, replace(SMALL, bridge_correction=True))
        assert out.shape == (2, 300)
        assert np.all((out.tau >= 0.3) & (out.tau <= coeffs.T))
        assert np.all(domain.in_closure(out.y.reshape(-1, 1)))
        assert np.all(out.discount <= discount_growth_constant(coeffs, domain) * (1 + 1e-12))
        exited_y = out.y[out.exited][:, 0]
        assert np.all(np.isin(exited_y, [-1.0, 1.0]))
        assert np.all(out.tau[~out.exited] == coeffs.T)

    def test_thread_count_does_not_matter(self, heat):
        """Outcomes are identical with 1 and 4 worker threads."""
        coeffs, domain = heat
        cfg = SimConfig(step_h=1e-2, path_count=2500, base_seed=9)
        a = simulate_outcomes(coeffs, domain, [[0.2], [0.6]], 0.0, cfg)
        b = simulate_outcomes(coeffs, domain, [[0.2], [0.6]], 0.0, replace(cfg, threads=4))
        assert np.array_equal(a.tau, b.tau)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.discount, b.discount)

    def test_subset_matches_full_run(self, heat):
        """A path sees the same increments whichever other paths run with it."""
        coeffs, domain = heat
        cfg = SimConfig(step_h=1e-2, path_count=1200, base_seed=9)
        full = simulate_outcomes(coeffs, domain, [0.4], 0.0, cfg)
        ids = np.array([3, 700, 1100])
        part = simulate_outcomes(coeffs, domain, [0.4], 0.0, cfg, path_indices=ids)
        assert np.array_equal(part.tau[0], full.tau[0, ids])
        assert np.array_equal(part.y[0], full.y[0, ids])

    def test_common_random_numbers_across_start_points(self, heat):
        """Nearby start points driven by the same noise stay close."""
        coeffs, domain = heat
        cfg = SimConfig(step_h=1e-2, path_count=200, base_seed=1)
        out = simulate_outcomes(coeffs, domain, [[0.5], [0.5 + 1e-9]], 0.0, cfg, t_end=0.05)
        live = ~out.exited[0] & ~out.exited[1]
        assert np.max(np.abs(out.y[0, live] - out.y[1, live])) < 1e-8

    def test_restart_from_checkpoint(self, heat):
        """Per-path start states continue each path on its own stream."""
        coeffs, domain = heat
        cfg = SimConfig(step_h=1e-2, path_count=50, base_seed=2)
        first = simulate_outcomes(coeffs, domain, [0.5], 0.0, cfg, t_end=0.2)
        live = ~first.exited[0]
        resumed = simulate_outcomes(coeffs, domain, first.y[:, :, :], 0.2, cfg)
        whole = simulate_outcomes(coeffs, domain, [0.5], 0.0, cfg)
        assert np.allclose(resumed.y[0, live], whole.y[0, live], atol=1e-12)

    def test_multidimensional_layer(self):
        """Paths in a spherical layer stop on one of its spheres."""
        domain = Domain.spherical_layer(1.0, 2.0, 2)
        coeffs = complete_diffusion(CoefficientSet(n=2, T=0.5, b=lambda x, t: 0.5, name="layer"), domain)
        out = simulate_outcomes(coeffs, domain, [1.5, 0.0], 0.0, replace(SMALL, path_count=200))
        r = np.linalg.norm(out.y[0, out.exited[0]], axis=1)
        assert np.allclose(np.minimum(np.abs(r - 1.0), np.abs(r - 2.0)), 0.0, atol=1e-12)
