"""Tests for the model module."""

import logging

import numpy as np
import pytest

from bspde_mc.errors import EvaluationError, NotPSD, ValidationError
from bspde_mc.model import (
    CoefficientSet,
    Domain,
    ProbeGrid,
    check_boundary_vanishing,
    complete_diffusion,
    discount_growth_constant,
    lambda_bounds,
    preset_model,
    regularize_diffusion,
    validate_coercivity,
)


class TestDomain:
    """Geometry of intervals and spherical layers."""

    def test_interval_needs_order(self):
        """r1 must be below r2."""
        with pytest.raises(ValidationError):
            Domain.interval(1.0, 0.0)

    def test_layer_needs_positive_inner_radius(self):
        """A spherical layer needs r1 > 0 and dim >= 2."""
        with pytest.raises(ValidationError):
            Domain.spherical_layer(0.0, 1.0, 2)
        with pytest.raises(ValidationError):
            Domain.spherical_layer(1.0, 2.0, 1)

    def test_interval_membership(self):
        """The open interval excludes its end points."""
        domain = Domain.interval(0.0, 1.0)
        inside = domain.contains(np.array([[0.5], [0.0], [1.0], [1e-13], [-0.1]]))
        assert inside.tolist() == [True, False, False, False, False]

    def test_layer_membership(self):
        """Membership in a layer depends on the radius only."""
        domain = Domain.spherical_layer(1.0, 2.0, 2)
        pts = np.array([[1.5, 0.0], [0.0, -1.5], [0.5, 0.0], [2.0, 0.0]])
        assert domain.contains(pts).tolist() == [True, True, False, False]

    def test_distance_to_boundary(self):
        """Distance is measured to the nearest face."""
        domain = Domain.interval(0.0, 1.0)
        assert np.allclose(domain.distance_to_boundary(np.array([[0.25], [0.9], [1.0]])), [0.25, 0.1, 0.0])

    def test_interval_snap(self):
        """Exiting steps are cut where they meet the boundary."""
        domain = Domain.interval(0.0, 1.0)
        alpha, hit = domain.snap_exit(np.array([[0.9], [0.2]]), np.array([[1.1], [-0.2]]))
        assert np.allclose(alpha, [0.5, 0.5])
        assert np.allclose(hit[:, 0], [1.0, 0.0])

    def test_layer_snap_lands_on_sphere(self):
        """Snapped points of a layer lie exactly on the crossed sphere."""
        domain = Domain.spherical_layer(1.0, 2.0, 3)
        alpha, hit = domain.snap_exit(np.array([[1.5, 0.0, 0.0]]), np.array([[2.5, 0.0, 0.0]]))
        assert alpha[0] == pytest.approx(0.5)
        assert np.linalg.norm(hit[0]) == pytest.approx(2.0)

    def test_bridge_probability_far_from_boundary(self):
        """Steps far from both faces almost surely did not cross."""
        domain = Domain.interval(0.0, 1.0)
        noise = np.ones((1, 1, 1))
        p = domain.bridge_exit_probability(np.array([[0.5]]), np.array([[0.5]]), noise, 1e-4)
        assert p[0] < 1e-100

    def test_bridge_probability_near_face(self):
        """The crossing probability of a single face is exp(-2 d1 d2 / var)."""
        domain = Domain.interval(0.0, 10.0)
        noise = np.ones((1, 1, 1))
        p = domain.bridge_exit_probability(np.array([[0.1]]), np.array([[0.2]]), noise, 0.01)
        assert p[0] == pytest.approx(np.exp(-2 * 0.1 * 0.2 / 0.01), rel=1e-9)

    def test_bridge_probability_without_noise(self):
        """A face without diffusion across it cannot be crossed."""
        domain = Domain.interval(0.0, 1.0)
        p = domain.bridge_exit_probability(np.array([[0.01]]), np.array([[0.01]]), np.zeros((1, 1, 1)), 0.01)
        assert p[0] == 0.0


class TestCoefficientSet:
    """Evaluation and broadcasting of coefficient fields."""

    def test_constant_diffusion_broadcasts(self):
        """A constant diffusion becomes a (P, 1, 1) array."""
        coeffs = CoefficientSet(n=1, T=1.0, b=lambda x, t: 0.5)
        b = coeffs.diffusion(np.array([[0.1], [0.2], [0.3]]), 0.0)
        assert b.shape == (3, 1, 1)
        assert np.all(b == 0.5)

    def test_scalar_diffusion_in_two_dimensions(self):
        """A scalar diffusion means a multiple of the identity when n > 1."""
        coeffs = CoefficientSet(n=2, T=1.0, b=lambda x, t: 0.5)
        b = coeffs.diffusion(np.array([[1.5, 0.0]]), 0.0)
        assert np.allclose(b[0], 0.5 * np.eye(2))

    def test_non_finite_value(self):
        """Non-finite coefficient values raise EvaluationError."""
        coeffs = CoefficientSet(n=1, T=1.0, b=lambda x, t: np.log(x[:, 0] - 1.0))
        with pytest.raises(EvaluationError):
            coeffs.diffusion(np.array([[0.5]]), 0.0)

    def test_horizon_must_be_positive(self):
        """T must be positive."""
        with pytest.raises(ValidationError):
            CoefficientSet(n=1, T=0.0, b=lambda x, t: 0.5)


class TestCompleteDiffusion:
    """Auxiliary noise completing 2b - sum(beta beta^T)."""

    def test_heat_completion(self, heat):
        """Brownian heat flow gets a unit auxiliary column."""
        coeffs, _ = heat
        assert coeffs.completed and coeffs.N == 0 and coeffs.M == 1
        assert np.allclose(coeffs.noise_matrix(np.array([[0.5]]), 0.0), [[[1.0]]])

    def test_gbm_is_fully_degenerate(self, gbm):
        """The price noise already exhausts the diffusion, so the completion is zero."""
        coeffs, _ = gbm
        G = coeffs.noise_matrix(np.array([[1.5]]), 0.0)
        assert G.shape == (1, 1, 2)
        assert G[0, 0, 0] == pytest.approx(0.3)
        assert G[0, 0, 1] == 0.0

    def test_reconstruction_two_dimensions(self):
        """tilde_beta tilde_beta^T + beta beta^T = 2b in a spherical layer."""
        domain = Domain.spherical_layer(1.0, 2.0, 2)
        coeffs = complete_diffusion(
            CoefficientSet(
                n=2,
                T=1.0,
                b=lambda x, t: np.stack([np.stack([1.0 + 0 * x[:, 0], 0.2 * x[:, 0]], -1),
                                         np.stack([0.2 * x[:, 0], 1.0 + 0 * x[:, 0]], -1)], -2),
                beta=(lambda x, t: 0.3 * x,),
            ),
            domain,
        )
        x = np.array([[1.2, 0.3], [-0.5, 1.5]])
        G = coeffs.noise_matrix(x, 0.0)
        assert np.allclose(np.einsum("pik,pjk->pij", G, G), 2.0 * coeffs.diffusion(x, 0.0), atol=1e-9)

    def test_not_psd(self):
        """Noise stronger than the diffusion allows is rejected."""
        domain = Domain.interval(0.0, 1.0)
        coeffs = CoefficientSet(n=1, T=1.0, b=lambda x, t: 0.01, beta=(lambda x, t: 1.0,))
        with pytest.raises(NotPSD):
            complete_diffusion(coeffs, domain)

    def test_regularize_adds_identity(self, gbm):
        """The elliptic perturbation adds sqrt(delta) of auxiliary noise."""
        coeffs, domain = gbm
        perturbed = regularize_diffusion(coeffs, 0.1, domain)
        x = np.array([[1.2], [1.8]])
        assert np.allclose(perturbed.diffusion(x, 0.0) - coeffs.diffusion(x, 0.0), 0.05)
        assert np.allclose(perturbed.tilde_beta_matrix(x, 0.0)[:, 0, 0], np.sqrt(0.1))


class TestConditions:
    """Coercivity, boundary vanishing and discount bounds."""

    def test_heat_is_coercive(self, heat):
        """Heat flow has rho_hat = b = 1/2."""
        coeffs, domain = heat
        report = validate_coercivity(coeffs, domain)
        assert report.rho_hat == pytest.approx(0.5)
        assert report.satisfied

    def test_gbm_is_degenerate(self, gbm):
        """The price model sits exactly on the coercivity boundary."""
        coeffs, domain = gbm
        report = validate_coercivity(coeffs, domain)
        assert abs(report.rho_hat) < 1e-12
        assert report.satisfied

    def test_coercivity_failure_warns(self, caplog):
        """Too much noise reports a negative rho_hat with a warning."""
        domain = Domain.interval(1.0, 2.0)
        coeffs = CoefficientSet(n=1, T=1.0, b=lambda x, t: 0.02 * x[:, 0] ** 2, beta=(lambda x, t: 0.4 * x[:, 0],))
        with caplog.at_level(logging.WARNING, logger="bspde_mc.model"):
            report = validate_coercivity(coeffs, domain, ProbeGrid(5, 3))
        assert not report.satisfied
        assert report.rho_hat < 0
        assert "Coercivity fails" in caplog.text

    def test_boundary_vanishing_warns(self, gbm, caplog):
        """beta = sigma x does not vanish at the barriers: a warning, not an error."""
        coeffs, domain = gbm
        with caplog.at_level(logging.WARNING, logger="bspde_mc.model"):
            report = check_boundary_vanishing(coeffs, domain)
        assert report.status == "warn"
        assert report.max_abs[0] == pytest.approx(0.4)

    def test_boundary_vanishing_without_noise(self, heat):
        """Models without beta pass trivially."""
        coeffs, domain = heat
        assert check_boundary_vanishing(coeffs, domain).status == "pass"

    def test_discount_growth(self):
        """A negative rate lets the discount grow to exp(T sup(-lambda))."""
        coeffs, domain = preset_model("brownian", lam=-1.0)
        assert lambda_bounds(coeffs, domain) == (-1.0, -1.0)
        assert discount_growth_constant(coeffs, domain) == pytest.approx(np.e)

    def test_discount_bounded_for_killing(self, heat):
        """Nonnegative rates never amplify."""
        coeffs, domain = heat
        assert discount_growth_constant(coeffs, domain) == 1.0


class TestPresets:
    """Named models."""

    def test_horizons(self):
        """Presets carry their documented domains and horizons."""
        coeffs, domain = preset_model("brownian")
        assert (domain.r1, domain.r2, coeffs.T) == (-1.0, 1.0, 1.0)
        coeffs, domain = preset_model("heat")
        assert (domain.r1, domain.r2, coeffs.T) == (0.0, 1.0, 0.5)
        coeffs, domain = preset_model("gbm", T=0.5)
        assert (domain.r1, domain.r2, coeffs.T) == (1.0, 2.0, 0.5)

    def test_unknown_preset(self):
        """Unknown names are rejected."""
        with pytest.raises(ValidationError):
            preset_model("ornstein")
