"""Goal-achieving replication between two price barriers.

A single stock follows ``dS = sigma(t) S dw`` under the martingale measure
(zero interest rate). The investor wants wealth ``W_L`` if the price first
hits ``s_L``, ``W_U`` if it first hits ``s_U``, and otherwise a terminal
wealth tied to its own history:

    X(T) - int_0^theta k1(t) X(t) dt - E int_0^theta k2(t) X(t) dt = zeta(S(T)).

Writing the wealth as ``H(S(t), t)`` with ``H = u + l`` for the affine ``l``
through the barrier targets turns this into a non-local backward problem for
``u`` with zero boundary data and terminal data ``xi = zeta + Gamma l - l``.
The hedge holds ``dH/dx`` shares.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad

from bspde_mc.characteristics import SimConfig, lattice_steps
from bspde_mc.errors import FieldOutOfRange, KernelBudgetExceeded, ValidationError, ZetaBoundaryViolation
from bspde_mc.model import CoefficientSet, Domain, complete_diffusion
from bspde_mc.nonlocal_terminal import (
    FixedPointReport,
    TimeKernel,
    apply_gamma,
    gamma_norm_bound,
    nodal_terminal,
    solve_nonlocal,
)
from bspde_mc.solver import NODE_TOL, GridSpec, SolutionField, TerminalData, format_float
from bspde_mc.streams import NoiseStream, group_by_block


logger = logging.getLogger(__name__)

ZETA_TOL = 1e-9
BUDGET_TOL = 1e-10


@dataclass(frozen=True)
class MarketSpec:
    """Market and goal data.

    ``sigma``, ``k1`` and ``k2`` are vectorised functions of time, ``zeta`` a
    vectorised function of price. ``c_bar`` caps the kernel budget when the
    kernels reach the terminal time (``theta == T``).
    """

    sigma: Callable[[np.ndarray], np.ndarray]
    S0: float
    s_L: float
    s_U: float
    W_L: float
    W_U: float
    T: float
    theta: float
    k1: Callable[[np.ndarray], np.ndarray]
    k2: Callable[[np.ndarray], np.ndarray]
    zeta: Callable[[np.ndarray], np.ndarray]
    c_bar: float = 0.99
    labels: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0 < self.s_L < self.S0 < self.s_U:
            raise ValidationError(f"Need 0 < s_L < S0 < s_U, got {self.s_L}, {self.S0}, {self.s_U}")
        if not self.T > 0 or not 0 < self.theta <= self.T + NODE_TOL:
            raise ValidationError(f"Need T > 0 and 0 < theta <= T, got T={self.T}, theta={self.theta}")
        t = np.linspace(0.0, self.T, 257)
        vol = self.volatility(t)
        if not np.all(np.isfinite(vol)) or vol.min() <= 0:
            raise ValidationError("sigma must be positive and bounded on [0, T]")

    def volatility(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self.sigma(t), dtype=float), t.shape)

    def rates(self, t) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)
        return (
            np.broadcast_to(np.asarray(self.k1(t), dtype=float), t.shape),
            np.broadcast_to(np.asarray(self.k2(t), dtype=float), t.shape),
        )

    def kappas(self) -> tuple[float, float]:
        """``(int_0^theta k1, int_0^theta k2)``."""
        k1 = quad(lambda t: float(self.rates(np.array([t]))[0][0]), 0.0, self.theta, limit=200)[0]
        k2 = quad(lambda t: float(self.rates(np.array([t]))[1][0]), 0.0, self.theta, limit=200)[0]
        return float(k1), float(k2)

    def budget(self) -> float:
        """``int_0^theta (|k1| + |k2|)``."""
        def integrand(t):
            a, b = self.rates(np.array([t]))
            return abs(float(a[0])) + abs(float(b[0]))

        return float(quad(integrand, 0.0, self.theta, limit=200)[0])


@dataclass(frozen=True)
class AffineTarget:
    """``l(x) = c1 x + c0``."""

    c1: float
    c0: float

    @classmethod
    def through(cls, s_L: float, W_L: float, s_U: float, W_U: float) -> "AffineTarget":
        c1 = (W_U - W_L) / (s_U - s_L)
        return cls(c1, W_L - c1 * s_L)

    def __call__(self, x) -> np.ndarray:
        return self.c1 * np.asarray(x, dtype=float) + self.c0


@dataclass(frozen=True)
class GoalProblem:
    market: MarketSpec
    coeffs: CoefficientSet
    domain: Domain
    xi: TerminalData
    kernel: TimeKernel
    ell: AffineTarget
    kappa: tuple[float, float]


def build_goal_problem(market: MarketSpec) -> GoalProblem:
    """Translate the goal into coefficients, terminal data and a kernel.

    Raises:
        KernelBudgetExceeded: if ``int |k1| + |k2|`` exceeds 1, or ``c_bar``
            when the kernels reach ``T``.
        ZetaBoundaryViolation: if ``zeta`` does not equal ``(1 - kappa1 - kappa2) W``
            at the barriers.
    """
    budget = market.budget()
    reaches_T = market.theta >= market.T - NODE_TOL
    cap = market.c_bar if reaches_T else 1.0
    if reaches_T and not market.c_bar < 1.0:
        raise KernelBudgetExceeded("Kernels reaching T need a budget cap c_bar < 1")
    if budget > cap + BUDGET_TOL:
        raise KernelBudgetExceeded(f"int (|k1| + |k2|) = {budget:.6g} exceeds {cap:g}")

    kappa1, kappa2 = market.kappas()
    scale = 1.0 - kappa1 - kappa2
    for price, wealth, side in ((market.s_L, market.W_L, "lower"), (market.s_U, market.W_U, "upper")):
        got = float(np.asarray(market.zeta(np.array([price]))).reshape(-1)[0])
        want = scale * wealth
        if abs(got - want) > ZETA_TOL * max(1.0, abs(want)):
            raise ZetaBoundaryViolation(
                f"zeta({price:g}) = {got:.10g} but the {side} barrier needs (1 - kappa1 - kappa2) * W = {want:.10g}"
            )

    domain = Domain.interval(market.s_L, market.s_U)
    ell = AffineTarget.through(market.s_L, market.W_L, market.s_U, market.W_U)

    def b(x, t):
        return 0.5 * market.volatility(t) ** 2 * x[:, 0] ** 2

    def beta(x, t):
        return market.volatility(t) * x[:, 0]

    coeffs = complete_diffusion(CoefficientSet(n=1, T=market.T, b=b, beta=(beta,), name="goal-problem"), domain)

    def xi(y):
        price = np.asarray(y, dtype=float)[:, 0]
        return np.asarray(market.zeta(price), dtype=float) + (kappa1 + kappa2 - 1.0) * ell(price)

    label = market.labels.get("k", "k1(t) + k2(t)")
    kernel = TimeKernel(k=lambda t: np.add(*market.rates(t)), theta=market.theta, label=label)
    problem = GoalProblem(market, coeffs, domain, TerminalData.create(xi, domain), kernel, ell, (kappa1, kappa2))
    logger.info(
        "Goal problem: l(x) = %.6g x + %.6g, kappa = (%.4g, %.4g), kernel bound %.4g",
        ell.c1, ell.c0, kappa1, kappa2, gamma_norm_bound(kernel, market.T, domain).bound,
    )
    return problem


@dataclass(frozen=True)
class HedgeSolution:
    problem: GoalProblem
    u_field: SolutionField
    H_field: SolutionField
    delta_field: SolutionField
    X0: float
    tol: float
    report: Optional[FixedPointReport] = None

    def identity_residual(self) -> float:
        """``max |H(., T) - Gamma H - zeta|`` on the x nodes."""
        xs = self.H_field.grid.x_nodes
        gap = self.H_field.column_at(self.problem.market.T) - apply_gamma(self.problem.kernel, self.H_field)
        return float(np.abs(gap - self.problem.market.zeta(xs)).max())

    def interpolation_bound(self) -> float:
        """Bilinear interpolation error estimate of ``H`` from its second differences.

        On a uniform grid the second difference is ``h^2 H''``, and linear
        interpolation is off by at most ``h^2 |H''| / 8`` per direction.
        """
        H = self.H_field.values
        bound = 0.0
        if H.shape[0] > 2:
            bound += float(np.abs(np.diff(H, 2, axis=0)).max()) / 8.0
        if H.shape[1] > 2:
            bound += float(np.abs(np.diff(H, 2, axis=1)).max()) / 8.0
        return bound


def solve_hedge(
    market: MarketSpec,
    grid: Optional[GridSpec] = None,
    cfg: Optional[SimConfig] = None,
    tol: Optional[float] = None,
    max_iter: int = 50,
) -> HedgeSolution:
    """Solve for ``H = u + l`` and its delta.

    The barrier rows of ``H`` are pinned to ``W_L`` and ``W_U``. Delta is
    ``c1`` plus central differences of ``u`` (second-order one-sided at the
    barriers).
    """
    problem = build_goal_problem(market)
    grid = grid or GridSpec.uniform(problem.domain, market.T)
    cfg = cfg or SimConfig()
    xs = grid.x_nodes
    zero_scale = 1e-12 * max(1.0, abs(market.W_L), abs(market.W_U))

    xi_nodes = nodal_terminal(problem.xi, problem.domain, xs)
    if float(np.abs(xi_nodes).max(initial=0.0)) <= zero_scale:
        logger.info("Terminal data vanishes; the hedge is static (%.6g shares)", problem.ell.c1)
        values = np.zeros(grid.shape)
        u_field = SolutionField(values, np.zeros_like(values), grid, {"static": True})
        report = None
        tol = 0.0 if tol is None else tol
    else:
        solution = solve_nonlocal(problem.coeffs, problem.domain, problem.xi, problem.kernel, grid, cfg, tol=tol, max_iter=max_iter)
        u_field, report = solution.field, solution.report
        tol = report.tol

    H = u_field.values + problem.ell(xs)[:, None]
    H[0, :] = market.W_L
    H[-1, :] = market.W_U
    H_field = SolutionField(H, u_field.stderr.copy(), grid, dict(u_field.meta))
    delta = problem.ell.c1 + np.gradient(u_field.values, xs, axis=0, edge_order=2 if xs.size > 2 else 1)
    delta_field = SolutionField(delta, np.zeros_like(delta), grid, {"derivative": "x"})
    X0 = float(H_field.interpolate([market.S0], [0.0])[0])
    logger.info("Initial wealth X0 = %.8g", X0)
    return HedgeSolution(problem, u_field, H_field, delta_field, X0, float(tol), report)


@dataclass(frozen=True)
class ReplicationReport:
    """Pathwise replication diagnostics.

    ``survivor_max_residual`` is ``X(T) - (Gamma H)(S(T)) - zeta(S(T))``;
    ``functional_max_residual`` is the literal goal functional with the k2
    expectation taken over paths. ``tracking_max`` is ``max |X(T) - H(S(T), T)|``.
    """

    X0: float
    path_count: int
    barrier_count: int
    barrier_max_residual: float
    barrier_mean_residual: float
    survivor_count: int
    survivor_max_residual: float
    survivor_rms_residual: float
    functional_max_residual: float
    tracking_max: float
    max_abs_gamma: float
    turnover: float
    terminal_wealth_mean: float
    terminal_wealth_stderr: float
    field_tol: float
    interpolation_bound: float
    hit: np.ndarray = field(repr=False, compare=False, default=None)
    hit_time: np.ndarray = field(repr=False, compare=False, default=None)
    residual: np.ndarray = field(repr=False, compare=False, default=None)

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("X0", self.X0),
            ("path_count", self.path_count),
            ("barrier_count", self.barrier_count),
            ("barrier_max_residual", self.barrier_max_residual),
            ("barrier_mean_residual", self.barrier_mean_residual),
            ("survivor_count", self.survivor_count),
            ("survivor_max_residual", self.survivor_max_residual),
            ("survivor_rms_residual", self.survivor_rms_residual),
            ("functional_max_residual", self.functional_max_residual),
            ("tracking_max", self.tracking_max),
            ("max_abs_gamma", self.max_abs_gamma),
            ("turnover", self.turnover),
            ("terminal_wealth_mean", self.terminal_wealth_mean),
            ("terminal_wealth_stderr", self.terminal_wealth_stderr),
            ("field_tol", self.field_tol),
            ("interpolation_bound", self.interpolation_bound),
        ]

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        lines = ["key,value"] + [f"{k},{format_float(v)}" for k, v in self.rows()]
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return path

    def paths_to_csv(self, path: Path) -> Path:
        """Per-path rows ``path_id,hit,hit_time,residual``."""
        path = Path(path)
        lines = ["path_id,hit,hit_time,residual"]
        for k, (h, t, r) in enumerate(zip(self.hit, self.hit_time, self.residual)):
            lines.append(f"{k},{int(h)},{format_float(t)},{format_float(r)}")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return path

    def summary(self) -> str:
        return "\n".join(
            [
                f"Replication over {self.path_count} paths",
                f"  Initial wealth X0:         {self.X0:.8g}",
                f"  Mean terminal wealth:      {self.terminal_wealth_mean:.8g} +/- {self.terminal_wealth_stderr:.2g}",
                f"  Barrier paths:             {self.barrier_count} (max |X - W| = {self.barrier_max_residual:.3g})",
                f"  Surviving paths:           {self.survivor_count} (max residual {self.survivor_max_residual:.3g}, "
                f"rms {self.survivor_rms_residual:.3g})",
                f"  Goal functional residual:  {self.functional_max_residual:.3g}",
                f"  Hedge: max |gamma| = {self.max_abs_gamma:.4g}, turnover = {self.turnover:.4g}",
                f"  Field tol {self.field_tol:.3g}, interpolation bound {self.interpolation_bound:.3g}",
            ]
        )


@dataclass(frozen=True)
class _BlockPaths:
    S: np.ndarray
    X: np.ndarray
    hit: np.ndarray
    hit_time: np.ndarray
    target: np.ndarray
    I1: np.ndarray
    I2: np.ndarray
    max_gamma: float
    turnover: np.ndarray


def _replicate_block(market: MarketSpec, delta_field: SolutionField, X0: float, cfg: SimConfig, stream: NoiseStream, block_index: int, rows: np.ndarray) -> _BlockPaths:
    P = rows.size
    S = np.full(P, market.S0)
    X = np.full(P, X0)
    position = np.zeros(P)
    turnover = np.zeros(P)
    hit = np.zeros(P, dtype=bool)
    hit_time = np.full(P, market.T)
    target = np.full(P, np.nan)
    I1 = np.zeros(P)
    I2 = np.zeros(P)
    max_gamma = 0.0

    for m, t, t_next in lattice_steps(0.0, market.T, cfg.step_h):
        dt = t_next - t
        overlap = max(0.0, min(t_next, market.theta) - t)
        if overlap > 0:
            k1, k2 = market.rates(np.array([t]))
            I1 += float(k1[0]) * X * overlap
            I2 += float(k2[0]) * X * overlap
        alive = np.flatnonzero(~hit)
        if alive.size == 0:
            continue
        normals, _ = stream.block(m, block_index)
        gamma = delta_field.interpolate(S[alive], t)
        turnover[alive] += np.abs(gamma - position[alive])
        position[alive] = gamma
        max_gamma = max(max_gamma, float(np.abs(gamma).max()))
        vol = float(market.volatility(np.array([t]))[0])
        S_new = S[alive] * (1.0 + vol * np.sqrt(dt) * normals[rows[alive], 0])
        X[alive] += gamma * (S_new - S[alive])
        S[alive] = S_new
        low = S_new <= market.s_L
        high = S_new >= market.s_U
        crossed = low | high
        if np.any(crossed):
            gone = alive[crossed]
            hit[gone] = True
            hit_time[gone] = t_next
            target[gone] = np.where(low[crossed], market.W_L, market.W_U)
            turnover[gone] += np.abs(position[gone])
            position[gone] = 0.0

    return _BlockPaths(S, X, hit, hit_time, target, I1, I2, max_gamma, turnover)


def replicate(
    market: MarketSpec,
    H_field: SolutionField,
    delta_field: SolutionField,
    path_count: int,
    cfg: SimConfig,
    hedge: Optional[HedgeSolution] = None,
) -> ReplicationReport:
    """Run the self-financing hedge along simulated prices.

    Positions are rebalanced on the simulation lattice at ``delta(S(t), t)``;
    a path that reaches a barrier is liquidated and its wealth frozen.
    Residuals are computed in a second pass after the cross-path mean of the
    k2 term is known.

    Raises:
        FieldOutOfRange: if the fields do not cover the corridor.
    """
    for name, fld in (("H_field", H_field), ("delta_field", delta_field)):
        xs, ss = fld.grid.x_nodes, fld.grid.s_nodes
        if xs[0] > market.s_L + NODE_TOL or xs[-1] < market.s_U - NODE_TOL or ss[0] > NODE_TOL or ss[-1] < market.T - NODE_TOL:
            raise FieldOutOfRange(f"{name} does not cover [{market.s_L}, {market.s_U}] x [0, {market.T}]")
    cfg.check_horizon(market.T)
    problem = hedge.problem if hedge is not None else build_goal_problem(market)
    X0 = float(H_field.interpolate([market.S0], [0.0])[0])

    stream = NoiseStream(cfg.base_seed, 1)
    groups = group_by_block(np.arange(path_count))

    def run(group):
        block_index, rows, _ = group
        return _replicate_block(market, delta_field, X0, cfg, stream, block_index, rows)

    if cfg.threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(run, groups))
    else:
        parts = [run(g) for g in groups]

    def gather(name):
        return np.concatenate([getattr(p, name) for p in parts])

    S, X, hit, hit_time, target = gather("S"), gather("X"), gather("hit"), gather("hit_time"), gather("target")
    I1, I2, turnover = gather("I1"), gather("I2"), gather("turnover")
    survivors = ~hit

    residual = np.zeros(path_count)
    residual[hit] = X[hit] - target[hit]

    gamma_H = apply_gamma(problem.kernel, H_field)
    xs = H_field.grid.x_nodes
    S_T = S[survivors]
    zeta_T = np.asarray(market.zeta(S_T), dtype=float).reshape(-1)
    residual[survivors] = X[survivors] - np.interp(S_T, xs, gamma_H) - zeta_T
    functional = X[survivors] - I1[survivors] - I2.mean() - zeta_T
    tracking = X[survivors] - np.interp(S_T, xs, H_field.column_at(market.T))

    def max_abs(a):
        return float(np.abs(a).max(initial=0.0))

    field_tol = hedge.tol if hedge is not None else 0.0
    interp = hedge.interpolation_bound() if hedge is not None else 0.0
    report = ReplicationReport(
        X0=X0,
        path_count=path_count,
        barrier_count=int(hit.sum()),
        barrier_max_residual=max_abs(residual[hit]),
        barrier_mean_residual=float(np.abs(residual[hit]).mean()) if hit.any() else 0.0,
        survivor_count=int(survivors.sum()),
        survivor_max_residual=max_abs(residual[survivors]),
        survivor_rms_residual=float(np.sqrt(np.mean(residual[survivors] ** 2))) if survivors.any() else 0.0,
        functional_max_residual=max_abs(functional),
        tracking_max=max_abs(tracking),
        max_abs_gamma=max(p.max_gamma for p in parts),
        turnover=float(turnover.mean()),
        terminal_wealth_mean=float(X.mean()),
        terminal_wealth_stderr=float(X.std(ddof=1) / np.sqrt(path_count)) if path_count > 1 else 0.0,
        field_tol=field_tol,
        interpolation_bound=interp,
        hit=hit,
        hit_time=hit_time,
        residual=residual,
    )
    logger.info(
        "Replication: %d barrier paths (max residual %.3g), %d survivors (max residual %.3g)",
        report.barrier_count, report.barrier_max_residual, report.survivor_count, report.survivor_max_residual,
    )
    return report
