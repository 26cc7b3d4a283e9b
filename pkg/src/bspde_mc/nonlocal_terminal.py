"""Non-local terminal conditions ``u(., T) - Gamma u = xi``.

``Gamma`` reads the solution along the time axis (point values, time averages,
space-time integrals) and feeds the result back as terminal data. When the
composed map ``Q = Gamma o L_T`` is a contraction, the terminal value solves
``phi = xi + Q phi`` and is found by Neumann iteration; the solution is then
``u = L_T phi``.

The kernel catalog:

- ``PointScaled``: ``kappa * u(., t1)``
- ``TwoPoint``: ``alpha1 * u(., t1) + alpha2 * u(., t2)``
- ``TimeKernel``: ``int_0^theta k(t) u(., t) dt``
- ``SpaceTimeKernel``: ``int_0^theta int_D k(t, y, x) u(y, t) dy dt``
- ``Combo``: convex combination of the above
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, Union

import numpy as np
from scipy.integrate import quad, trapezoid

from bspde_mc.characteristics import SimConfig
from bspde_mc.errors import CondLViolated, InvalidKernel, NoConvergence, SupportOutsideGrid, ValidationError
from bspde_mc.model import CoefficientSet, Domain, lambda_bounds
from bspde_mc.solver import (
    NODE_TOL,
    GridSpec,
    PropagationOperator,
    SolutionField,
    TerminalData,
    format_float,
    solve_cauchy,
)


logger = logging.getLogger(__name__)

BOUND_TOL = 1e-10
QUAD_NODES = 129

Regime = Literal["condG(i)", "condG(ii)", "invalid"]


@dataclass(frozen=True)
class PointScaled:
    kappa: float
    t1: float = 0.0

    @property
    def horizon(self) -> float:
        return self.t1

    def describe(self) -> str:
        return f"PointScaled(kappa={self.kappa:g}, t1={self.t1:g})"


@dataclass(frozen=True)
class TwoPoint:
    alpha1: float
    t1: float
    alpha2: float
    t2: float

    @property
    def horizon(self) -> float:
        return max(self.t1, self.t2)

    def describe(self) -> str:
        return f"TwoPoint(alpha1={self.alpha1:g}, t1={self.t1:g}, alpha2={self.alpha2:g}, t2={self.t2:g})"


@dataclass(frozen=True)
class TimeKernel:
    """Time average with weight ``k`` over ``[0, theta]``; ``k`` is vectorised in t."""

    k: Callable[[np.ndarray], np.ndarray]
    theta: float
    label: str = "k(t)"

    @property
    def horizon(self) -> float:
        return self.theta

    def weights(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self.k(t), dtype=float), t.shape)

    def describe(self) -> str:
        return f"TimeKernel(k={self.label}, theta={self.theta:g})"


@dataclass(frozen=True)
class SpaceTimeKernel:
    """Weight ``k(t, y, x)`` over ``[0, theta] x D``, vectorised by broadcasting."""

    k: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    theta: float
    label: str = "k(t,y,x)"

    @property
    def horizon(self) -> float:
        return self.theta

    def weights(self, t: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Array ``[t, y, x]`` of kernel values."""
        tt, yy, xx = np.meshgrid(t, y, x, indexing="ij")
        return np.broadcast_to(np.asarray(self.k(tt, yy, xx), dtype=float), tt.shape)

    def describe(self) -> str:
        return f"SpaceTimeKernel(k={self.label}, theta={self.theta:g})"


@dataclass(frozen=True)
class Combo:
    """Convex combination ``sum_i w_i Gamma_i``."""

    parts: tuple[tuple[float, "GammaKernel"], ...]

    def __post_init__(self):
        weights = np.array([w for w, _ in self.parts], dtype=float)
        if weights.size == 0 or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidKernel("Combo weights must be nonnegative and sum to 1")

    @property
    def horizon(self) -> float:
        return max(kernel.horizon for _, kernel in self.parts)

    def describe(self) -> str:
        return "Combo(" + ", ".join(f"{w:g}*{kernel.describe()}" for w, kernel in self.parts) + ")"


GammaKernel = Union[PointScaled, TwoPoint, TimeKernel, SpaceTimeKernel, Combo]


def periodic_kernel() -> PointScaled:
    """``Gamma u = u(., 0)``: terminal value equal to the initial one."""
    return PointScaled(kappa=1.0, t1=0.0)


@dataclass(frozen=True)
class GammaBound:
    bound: float
    regime: Regime
    horizon: float


def _check_structure(kernel: GammaKernel) -> None:
    if isinstance(kernel, (TimeKernel, SpaceTimeKernel)) and not kernel.theta > 0:
        raise InvalidKernel(f"{kernel.describe()}: theta must be positive")
    if isinstance(kernel, PointScaled) and kernel.t1 < 0:
        raise InvalidKernel(f"{kernel.describe()}: t1 must be nonnegative")
    if isinstance(kernel, TwoPoint) and min(kernel.t1, kernel.t2) < 0:
        raise InvalidKernel(f"{kernel.describe()}: times must be nonnegative")


def _raw_bound(kernel: GammaKernel, domain: Optional[Domain]) -> float:
    if isinstance(kernel, PointScaled):
        return abs(kernel.kappa)
    if isinstance(kernel, TwoPoint):
        return abs(kernel.alpha1) + abs(kernel.alpha2)
    if isinstance(kernel, TimeKernel):
        value, _ = quad(lambda t: abs(float(kernel.weights(np.array([t]))[0])), 0.0, kernel.theta, limit=200)
        return float(value)
    if isinstance(kernel, SpaceTimeKernel):
        if domain is None or not domain.is_interval:
            raise InvalidKernel("Space-time kernels need an interval domain to be bounded")
        t = np.linspace(0.0, kernel.theta, QUAD_NODES)
        y = np.linspace(domain.r1, domain.r2, QUAD_NODES)
        inner = trapezoid(np.abs(kernel.weights(t, y, y)), y, axis=1)
        return float(trapezoid(inner, t, axis=0).max())
    return float(sum(w * _raw_bound(part, domain) for w, part in kernel.parts))


def gamma_norm_bound(kernel: GammaKernel, T: float, domain: Optional[Domain] = None) -> GammaBound:
    """Catalog operator-norm bound and the contraction regime it falls in.

    ``condG(i)``: the kernel only reads times before ``T`` and the bound is
    at most 1. ``condG(ii)``: the bound is strictly below 1. Anything else,
    including reading ``u(., T)`` with bound 1, is ``invalid``.
    """
    _check_structure(kernel)
    bound = _raw_bound(kernel, domain)
    horizon = kernel.horizon
    if horizon > T + NODE_TOL:
        regime: Regime = "invalid"
    elif horizon < T - NODE_TOL and bound <= 1.0 + BOUND_TOL:
        regime = "condG(i)"
    elif bound < 1.0 - BOUND_TOL:
        regime = "condG(ii)"
    else:
        regime = "invalid"
    return GammaBound(bound=bound, regime=regime, horizon=horizon)


def _time_quadrature(field: SolutionField, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Times in ``[0, theta]`` (nodes plus ``theta``) and ``u`` columns there."""
    s = field.grid.s_nodes
    times = s[s <= theta + NODE_TOL]
    if times.size == 0 or abs(times[-1] - theta) > NODE_TOL:
        times = np.append(times, theta)
    columns = np.column_stack([field.column_at(t) for t in times])
    return times, columns


def apply_gamma(kernel: GammaKernel, field: SolutionField) -> np.ndarray:
    """``Gamma u`` on the x nodes of ``field``.

    Raises:
        SupportOutsideGrid: if the kernel reads times the field does not cover.
    """
    s = field.grid.s_nodes
    lo = min(_earliest(kernel), kernel.horizon)
    if lo < s[0] - NODE_TOL or kernel.horizon > s[-1] + NODE_TOL:
        raise SupportOutsideGrid(f"{kernel.describe()} reads outside [{s[0]:g}, {s[-1]:g}]")

    if isinstance(kernel, PointScaled):
        return kernel.kappa * field.column_at(kernel.t1)
    if isinstance(kernel, TwoPoint):
        return kernel.alpha1 * field.column_at(kernel.t1) + kernel.alpha2 * field.column_at(kernel.t2)
    if isinstance(kernel, TimeKernel):
        times, columns = _time_quadrature(field, kernel.theta)
        return trapezoid(columns * kernel.weights(times)[None, :], times, axis=1)
    if isinstance(kernel, SpaceTimeKernel):
        if not field.grid.one_dimensional:
            raise SupportOutsideGrid("Space-time kernels need a one-dimensional x grid")
        times, columns = _time_quadrature(field, kernel.theta)
        xs = field.grid.x_nodes
        k = kernel.weights(times, xs, xs)
        inner = trapezoid(k * columns.T[:, :, None], xs, axis=1)
        return trapezoid(inner, times, axis=0)
    return sum(w * apply_gamma(part, field) for w, part in kernel.parts)


def _earliest(kernel: GammaKernel) -> float:
    if isinstance(kernel, PointScaled):
        return kernel.t1
    if isinstance(kernel, TwoPoint):
        return min(kernel.t1, kernel.t2)
    if isinstance(kernel, Combo):
        return min(_earliest(part) for _, part in kernel.parts)
    return 0.0


@dataclass(frozen=True)
class FixedPointReport:
    """Outcome of the Neumann iteration for the terminal value."""

    phi_star: np.ndarray
    iterations: int
    residual_history: tuple[float, ...]
    contraction_estimate: float
    description: str = ""
    tol: float = 0.0
    bound: Optional[GammaBound] = field(default=None, compare=False)

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        lines = [
            f"# kernel: {self.description}",
            f"# contraction_estimate: {format_float(self.contraction_estimate)}",
            f"# iterations: {self.iterations}",
            f"# tol: {format_float(self.tol)}",
            "iter,residual",
        ]
        lines += [f"{m + 1},{format_float(r)}" for m, r in enumerate(self.residual_history)]
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return path


@dataclass(frozen=True)
class NonlocalSolution:
    field: SolutionField
    report: FixedPointReport


def contraction_from(history: list[float]) -> float:
    """Largest ratio of successive residuals."""
    ratios = [b / a for a, b in zip(history, history[1:]) if a > 0]
    return float(max(ratios, default=0.0))


def nodal_terminal(xi: TerminalData, domain: Domain, x_nodes: np.ndarray) -> np.ndarray:
    """``xi`` at the x nodes, 0 on and outside the boundary."""
    xs = np.asarray(x_nodes, dtype=float)
    return np.where(domain.contains(xs[:, None]), xi(xs[:, None]), 0.0)


def default_tolerance(xi_nodes: np.ndarray) -> float:
    """``1e-3`` of the largest nodal terminal value, floored at ``1e-14``."""
    return max(1e-3 * float(np.abs(xi_nodes).max(initial=0.0)), 1e-14)


def check_condition_l(coeffs: CoefficientSet, domain: Domain) -> None:
    """Refuse rates that let the discount expand (lambda < 0 somewhere)."""
    lam_min, _ = lambda_bounds(coeffs, domain)
    if lam_min < 0:
        raise CondLViolated(f"lambda reaches {lam_min:.3g} < 0; the discount may expand")


def solve_nonlocal(
    coeffs: CoefficientSet,
    domain: Domain,
    xi: TerminalData,
    kernel: GammaKernel,
    grid: GridSpec,
    cfg: SimConfig,
    tol: Optional[float] = None,
    max_iter: int = 50,
    initial: Optional[np.ndarray] = None,
) -> NonlocalSolution:
    """Solve ``u(., T) - Gamma u = xi`` by Neumann iteration on the terminal value.

    The solution map is discretised once with fixed paths (common random
    numbers), so every iteration applies the same linear contraction and the
    residuals decay geometrically. The returned field is ``solve_cauchy`` of
    the converged terminal value.

    Args:
        tol: stop when the sup-norm change drops to ``tol``; default
            ``1e-3 * max|xi|`` over the interior x nodes.
        max_iter: iteration budget.
        initial: starting terminal values on the x nodes (``xi`` by default).

    Raises:
        InvalidKernel: if the kernel is outside both contraction regimes;
            checked before any simulation.
        CondLViolated: if the rate is negative somewhere.
        NoConvergence: if ``max_iter`` iterations do not reach ``tol``.
    """
    bound = gamma_norm_bound(kernel, coeffs.T, domain)
    if bound.regime == "invalid":
        raise InvalidKernel(
            f"{kernel.describe()} has bound {bound.bound:.6g} with horizon {bound.horizon:g}; "
            f"not a contraction on [0, {coeffs.T:g}]"
        )
    check_condition_l(coeffs, domain)
    if not grid.one_dimensional or not domain.is_interval:
        raise ValidationError("Non-local solves need an interval domain")
    grid.validate(domain, coeffs.T)

    xs = grid.x_nodes
    interior = domain.contains(xs[:, None])
    xi_nodes = nodal_terminal(xi, domain, xs)
    tol = default_tolerance(xi_nodes) if tol is None else float(tol)

    op = PropagationOperator.build(coeffs, domain, grid, cfg, horizon=kernel.horizon)
    phi = xi_nodes.copy() if initial is None else np.where(interior, np.asarray(initial, dtype=float), 0.0)
    if initial is not None and np.any(np.abs(np.asarray(initial)[~interior]) > 0):
        logger.warning("Initial guess is nonzero on the boundary; projected to 0")

    history: list[float] = []
    converged = False
    for m in range(1, max_iter + 1):
        updated = np.where(interior, xi_nodes + apply_gamma(kernel, op.apply(phi)), 0.0)
        residual = float(np.abs(updated - phi).max(initial=0.0))
        history.append(residual)
        phi = updated
        logger.debug("Neumann iteration %d: residual %.3e", m, residual)
        if residual <= tol:
            converged = True
            break

    if not converged:
        floor = 3.0 * float(solve_cauchy(coeffs, domain, xi, grid, cfg).stderr.max(initial=0.0))
        raise NoConvergence(
            f"No convergence after {max_iter} iterations: residual {history[-1]:.3e} > tol {tol:.3e} "
            f"(Monte Carlo noise floor {floor:.3e})",
            residual_history=history,
            noise_floor=floor,
        )

    field = solve_cauchy(coeffs, domain, TerminalData.from_nodes(xs, phi, domain), grid, cfg)
    report = FixedPointReport(
        phi_star=phi,
        iterations=len(history),
        residual_history=tuple(history),
        contraction_estimate=contraction_from(history),
        description=kernel.describe(),
        tol=tol,
        bound=bound,
    )
    logger.info(
        "Non-local solve with %s converged in %d iterations (contraction %.4f)",
        report.description, report.iterations, report.contraction_estimate,
    )
    return NonlocalSolution(field, report)
