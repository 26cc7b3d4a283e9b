"""Finite-difference oracle for one-dimensional backward problems.

Solves ``u_t + b u_xx + f u_x - lambda u = 0`` on an interval with zero
Dirichlet data and ``u(., T) = xi``, marching backward from ``T``. This is
the generator of the Monte Carlo representation, so on uniformly elliptic
models both solvers approximate the same function.
"""

import logging
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from scipy.linalg import solve_banded

from bspde_mc.errors import GridMismatch, Instability, InterpolationOutOfRange, NotElliptic, ValidationError
from bspde_mc.model import CoefficientSet, Domain, discount_growth_constant
from bspde_mc.solver import GridSpec, SolutionField, TerminalData


logger = logging.getLogger(__name__)

# Relative size below which two deterministic values count as equal.
EXACT_RTOL = 1e-9


@dataclass(frozen=True)
class FDGrid:
    """Finite-difference resolution.

    Attributes:
        nx: interior node count; the grid has ``nx + 2`` nodes with the ends on the boundary.
        nt: number of time steps over ``[0, T]``.
        scheme: ``crank-nicolson`` (with one implicit-Euler start-up step) or ``implicit-euler``.
        ellipticity_floor: smallest admissible diffusion coefficient.
    """

    nx: int = 127
    nt: int = 200
    scheme: Literal["crank-nicolson", "implicit-euler"] = "crank-nicolson"
    ellipticity_floor: float = 1e-8

    def __post_init__(self):
        if self.nx < 3:
            raise ValidationError(f"FDGrid needs nx >= 3, got {self.nx}")
        if self.nt < 1:
            raise ValidationError(f"FDGrid needs nt >= 1, got {self.nt}")
        if self.scheme not in ("crank-nicolson", "implicit-euler"):
            raise ValidationError(f"Unknown scheme {self.scheme!r}")


def _operator_bands(coeffs: CoefficientSet, x: np.ndarray, t: float, dx: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower, diagonal and upper entries of the spatial operator on interior nodes."""
    pts = x[:, None]
    b = coeffs.diffusion(pts, t)[:, 0, 0]
    f = coeffs.drift(pts, t)[:, 0]
    lam = coeffs.rate(pts, t)
    diff = b / dx**2
    conv = f / (2.0 * dx)
    return diff - conv, -2.0 * diff - lam, diff + conv


def _apply(lower: np.ndarray, diag: np.ndarray, upper: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = diag * u
    out[1:] += lower[1:] * u[:-1]
    out[:-1] += upper[:-1] * u[1:]
    return out


def _implicit_matrix(lower, diag, upper, weight: float) -> np.ndarray:
    """Banded storage of ``I - weight * L`` for ``solve_banded``."""
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = -weight * upper[:-1]
    ab[1, :] = 1.0 - weight * diag
    ab[2, :-1] = -weight * lower[1:]
    return ab


def _diagonally_dominant(ab: np.ndarray) -> bool:
    off = np.zeros(ab.shape[1])
    off[:-1] += np.abs(ab[0, 1:])
    off[1:] += np.abs(ab[2, :-1])
    return bool(np.all(np.abs(ab[1]) >= off))


def _step(coeffs, x, dx, u, t_old, t_new, theta) -> tuple[np.ndarray, bool]:
    """One theta-step from ``t_old`` back to ``t_new``; returns (u, dominant)."""
    dt = t_old - t_new
    l_new, d_new, u_new = _operator_bands(coeffs, x, t_new, dx)
    ab = _implicit_matrix(l_new, d_new, u_new, theta * dt)
    rhs = u.copy()
    if theta < 1.0:
        l_old, d_old, u_old = _operator_bands(coeffs, x, t_old, dx)
        rhs = rhs + (1.0 - theta) * dt * _apply(l_old, d_old, u_old, u)
    return solve_banded((1, 1), ab, rhs), _diagonally_dominant(ab)


def solve_backward_pde(
    coeffs: CoefficientSet,
    domain: Domain,
    xi: TerminalData,
    fd: FDGrid,
    grid: Optional[GridSpec] = None,
) -> SolutionField:
    """March the backward problem from ``T`` to 0.

    Args:
        coeffs: one-dimensional coefficients.
        domain: an interval.
        xi: terminal data.
        fd: resolution and scheme.
        grid: optional output grid; the native grid is returned when omitted.

    Returns:
        SolutionField with zero stderr.

    Raises:
        NotElliptic: if b drops below ``fd.ellipticity_floor`` on the closed domain.
        Instability: if the march produces non-finite values.
    """
    if coeffs.n != 1 or not domain.is_interval:
        raise ValidationError("The finite-difference oracle is one-dimensional")
    T = coeffs.T
    x = np.linspace(domain.r1, domain.r2, fd.nx + 2)
    dx = x[1] - x[0]
    times = np.linspace(0.0, T, fd.nt + 1)

    probe_x = np.repeat(x, times.size)[:, None]
    probe_t = np.tile(times, x.size)
    b_min = float(coeffs.diffusion(probe_x, probe_t).min())
    if b_min < fd.ellipticity_floor:
        raise NotElliptic(f"Diffusion falls to {b_min:.3g}, below the floor {fd.ellipticity_floor:g}")

    interior = x[1:-1]
    u = xi(interior[:, None]).astype(float)
    values = np.zeros((x.size, times.size))
    values[1:-1, -1] = u
    fallback_steps = 0

    for k in range(fd.nt, 0, -1):
        t_old, t_new = times[k], times[k - 1]
        startup = k == fd.nt
        theta = 1.0 if fd.scheme == "implicit-euler" or startup else 0.5
        stepped, dominant = _step(coeffs, interior, dx, u, t_old, t_new, theta)
        if not dominant:
            t_mid = 0.5 * (t_old + t_new)
            half, _ = _step(coeffs, interior, dx, u, t_old, t_mid, 1.0)
            stepped, _ = _step(coeffs, interior, dx, half, t_mid, t_new, 1.0)
            fallback_steps += 1
        u = stepped
        if not np.all(np.isfinite(u)):
            raise Instability(f"Finite-difference march became non-finite at t={t_new:.6g}")
        values[1:-1, k - 1] = u

    if fallback_steps:
        logger.warning("Implicit matrix not diagonally dominant; %d steps fell back to halved implicit Euler", fallback_steps)

    native = SolutionField(
        values,
        np.zeros_like(values),
        GridSpec(x, times),
        {"scheme": fd.scheme, "nx": fd.nx, "nt": fd.nt, "C_lambda": discount_growth_constant(coeffs, domain)},
    )
    logger.info("Finite-difference solve of %s on %d x %d nodes", coeffs.name, x.size, times.size)
    return native if grid is None else native.resample(grid)


@dataclass(frozen=True)
class FieldComparison:
    max_abs_diff: float
    rms_diff: float
    z_scores: np.ndarray

    @property
    def max_abs_z(self) -> float:
        return float(np.abs(self.z_scores).max(initial=0.0))

    @property
    def deterministic_mismatches(self) -> int:
        """Nodes where two exact values disagree."""
        return int(np.isinf(self.z_scores).sum())


def compare_fields(a: SolutionField, b: SolutionField, on: GridSpec) -> FieldComparison:
    """Differences of two fields resampled to ``on``.

    z-scores divide by the combined standard error; nodes where both fields
    are deterministic get 0 when they agree to ``EXACT_RTOL`` of the field
    scale and ``inf`` otherwise, so a deterministic disagreement fails any
    z-score threshold.

    Raises:
        GridMismatch: if either field does not cover ``on``.
    """
    try:
        ra = a if a.grid is on else a.resample(on)
        rb = b if b.grid is on else b.resample(on)
    except InterpolationOutOfRange as e:
        raise GridMismatch(f"Fields do not cover the comparison grid: {e}") from e
    diff = ra.values - rb.values
    se = np.hypot(ra.stderr, rb.stderr)
    scale = max(1.0, float(np.abs(ra.values).max(initial=0.0)), float(np.abs(rb.values).max(initial=0.0)))
    agree = np.abs(diff) <= EXACT_RTOL * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(agree, 0.0, np.inf))
    return FieldComparison(
        max_abs_diff=float(np.abs(diff).max(initial=0.0)),
        rms_diff=float(np.sqrt(np.mean(diff**2))),
        z_scores=z,
    )
