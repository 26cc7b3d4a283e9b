"""Monte Carlo estimates of exit-time behaviour.

Survival probabilities ``P(tau > s + theta)`` bound how much of the terminal
data reaches back to earlier times, which is what makes the non-local map a
contraction. The L1 distance between coupled exit times measures how exit
times respond to perturbing the coefficients or the start point.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from bspde_mc.characteristics import SimConfig, simulate_outcomes
from bspde_mc.errors import DimensionMismatch, ValidationError
from bspde_mc.model import CoefficientSet, Domain
from bspde_mc.solver import NODE_TOL, format_float


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurvivalEstimate:
    p_hat: float
    stderr: float


@dataclass(frozen=True)
class SurvivalEntry:
    x: tuple[float, ...]
    theta: float
    p_hat: float
    stderr: float


@dataclass(frozen=True)
class SurvivalCurve:
    entries: tuple[SurvivalEntry, ...]
    degenerate: bool = False

    @property
    def p_hat(self) -> np.ndarray:
        return np.array([e.p_hat for e in self.entries])

    @property
    def stderr(self) -> np.ndarray:
        return np.array([e.stderr for e in self.entries])

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        dim = len(self.entries[0].x) if self.entries else 1
        x_header = ["x"] if dim == 1 else [f"x{k + 1}" for k in range(dim)]
        lines = [",".join(x_header + ["theta", "p_hat", "stderr"])]
        for e in self.entries:
            cells = [format_float(v) for v in e.x] + [format_float(e.theta), format_float(e.p_hat), format_float(e.stderr)]
            lines.append(",".join(cells))
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return path


@dataclass(frozen=True)
class L1Distance:
    d_hat: float
    stderr: float


def _binomial(survived: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    count = survived.shape[-1]
    p = survived.mean(axis=-1)
    return p, np.sqrt(p * (1.0 - p) / count)


def _survival_cfg(cfg: SimConfig, bridge: Optional[bool]) -> SimConfig:
    return replace(cfg, bridge_correction=True if bridge is None else bridge)


def _check_horizon(coeffs: CoefficientSet, s: float, theta: float) -> None:
    if theta < 0 or s + theta > coeffs.T + NODE_TOL:
        raise ValidationError(f"Need theta >= 0 and s + theta <= T, got s={s}, theta={theta}, T={coeffs.T}")


def estimate_survival(
    coeffs: CoefficientSet,
    domain: Domain,
    x,
    s: float,
    theta: float,
    cfg: SimConfig,
    bridge: Optional[bool] = None,
) -> SurvivalEstimate:
    """Fraction of paths from ``(x, s)`` still inside at ``s + theta``.

    The bridge correction is on unless ``bridge=False`` is passed.
    """
    _check_horizon(coeffs, s, theta)
    out = simulate_outcomes(coeffs, domain, x, s, _survival_cfg(cfg, bridge), t_end=s + theta)
    p, se = _binomial(~out.exited[0])
    return SurvivalEstimate(float(p), float(se))


def survival_profile(
    coeffs: CoefficientSet,
    domain: Domain,
    x,
    s: float,
    thetas: Sequence[float],
    cfg: SimConfig,
    bridge: Optional[bool] = None,
) -> list[SurvivalEstimate]:
    """Survival at several horizons from a single simulation.

    Every horizon reads the same exit times, so the profile is exactly
    nonincreasing in ``theta``.
    """
    longest = max(thetas)
    _check_horizon(coeffs, s, longest)
    out = simulate_outcomes(coeffs, domain, x, s, _survival_cfg(cfg, bridge), t_end=s + longest)
    tau, exited = out.tau[0], out.exited[0]
    estimates = []
    for theta in thetas:
        p, se = _binomial(~exited | (tau > s + theta))
        estimates.append(SurvivalEstimate(float(p), float(se)))
    return estimates


def boundary_decay_curve(
    coeffs: CoefficientSet,
    domain: Domain,
    s: float,
    theta: float,
    x_sequence,
    cfg: SimConfig,
    bridge: Optional[bool] = None,
) -> SurvivalCurve:
    """Survival along start points approaching the boundary.

    A curve that stays at 1 for every interior point means the dynamics never
    move paths; it is flagged ``degenerate`` rather than rejected.
    """
    _check_horizon(coeffs, s, theta)
    pts = domain.as_points(x_sequence)
    out = simulate_outcomes(coeffs, domain, pts, s, _survival_cfg(cfg, bridge), t_end=s + theta)
    p, se = _binomial(~out.exited)
    entries = tuple(
        SurvivalEntry(tuple(float(v) for v in pt), float(theta), float(pi), float(si))
        for pt, pi, si in zip(pts, p, se)
    )
    inside = domain.contains(pts)
    degenerate = bool(np.any(inside) and np.all(p[inside] == 1.0))
    if degenerate:
        logger.warning("Survival is 1 at every interior start point of %s; the dynamics look frozen", coeffs.name)
    return SurvivalCurve(entries, degenerate)


def uniform_survival_bound(
    coeffs: CoefficientSet,
    domain: Domain,
    s: float,
    theta: float,
    cfg: SimConfig,
    points=None,
    bridge: Optional[bool] = None,
) -> tuple[SurvivalEstimate, tuple[float, ...]]:
    """Largest survival probability over a probe set (9 interior points by default).

    This is the per-model ``nu`` of the contraction estimate: every
    characteristic started before ``T - theta`` survives to ``T`` with
    probability at most ``nu``.
    """
    _check_horizon(coeffs, s, theta)
    pts = domain.interior_points(9) if points is None else domain.as_points(points)
    out = simulate_outcomes(coeffs, domain, pts, s, _survival_cfg(cfg, bridge), t_end=s + theta)
    p, se = _binomial(~out.exited)
    worst = int(np.argmax(p))
    return SurvivalEstimate(float(p[worst]), float(se[worst])), tuple(float(v) for v in pts[worst])


def exit_time_l1_distance(
    coeffs_a: CoefficientSet,
    coeffs_b: CoefficientSet,
    domain: Domain,
    x,
    s: float,
    cfg: SimConfig,
    x_b=None,
) -> L1Distance:
    """``E|tau_T^a - tau_T^b|`` with both dynamics driven by the same increments.

    ``x_b`` starts the second process elsewhere (perturbed start point).

    Raises:
        DimensionMismatch: if the two models have different noise dimensions.
    """
    if (coeffs_a.N, coeffs_a.M) != (coeffs_b.N, coeffs_b.M) or coeffs_a.n != coeffs_b.n:
        raise DimensionMismatch(
            f"Noise dimensions differ: (N, M) = ({coeffs_a.N}, {coeffs_a.M}) vs ({coeffs_b.N}, {coeffs_b.M})"
        )
    if abs(coeffs_a.T - coeffs_b.T) > NODE_TOL:
        raise DimensionMismatch("Both models need the same horizon T")
    tau_a = simulate_outcomes(coeffs_a, domain, x, s, cfg).tau[0]
    tau_b = simulate_outcomes(coeffs_b, domain, x if x_b is None else x_b, s, cfg).tau[0]
    gap = np.abs(tau_a - tau_b)
    se = gap.std(ddof=1) / np.sqrt(gap.size) if gap.size > 1 else 0.0
    logger.debug("Exit-time L1 distance %s vs %s: %.4g", coeffs_a.name, coeffs_b.name, gap.mean())
    return L1Distance(float(gap.mean()), float(se))
