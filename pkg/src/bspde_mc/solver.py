"""Representation-sense solutions by Monte Carlo.

For deterministic coefficients the solution of the backward problem with
terminal data ``xi`` is

    u(x, s) = E[ gamma(T ^ tau) * xi(y(T ^ tau)) ],

the expectation taken over characteristics started at ``(x, s)`` and killed
at the boundary. Killed paths contribute 0 since ``xi`` vanishes there.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.stats import norm

from bspde_mc.characteristics import PathOutcomes, SimConfig, simulate_outcomes
from bspde_mc.errors import InterpolationOutOfRange, InvalidTerminal, ValidationError
from bspde_mc.model import CoefficientSet, Domain, discount_growth_constant
from bspde_mc.streams import BLOCK


logger = logging.getLogger(__name__)

TERMINAL_TOL = 1e-9
NODE_TOL = 1e-12
CHUNK_BLOCKS = 16


def format_float(value: float) -> str:
    """12 significant digits, locale independent."""
    return format(float(value), ".12g")


@dataclass(frozen=True)
class GridSpec:
    """Space-time nodes of a solution field.

    ``x_nodes`` is ``(nx,)`` for an interval or ``(G, n)`` for points of a
    spherical layer. ``validate`` enforces the boundary and terminal nodes.
    """

    x_nodes: np.ndarray
    s_nodes: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_nodes, dtype=float)
        s = np.asarray(self.s_nodes, dtype=float)
        if x.ndim == 1 and np.any(np.diff(x) <= 0):
            raise ValidationError("x_nodes must be strictly increasing")
        if s.ndim != 1 or s.size == 0 or np.any(np.diff(s) <= 0):
            raise ValidationError("s_nodes must be a nonempty strictly increasing list")
        x.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "x_nodes", x)
        object.__setattr__(self, "s_nodes", s)

    @classmethod
    def uniform(cls, domain: Domain, T: float, nx: int = 65, ns: int = 33) -> "GridSpec":
        if not domain.is_interval:
            raise ValidationError("Uniform grids are defined for interval domains")
        return cls(np.linspace(domain.r1, domain.r2, nx), np.linspace(0.0, T, ns))

    @property
    def one_dimensional(self) -> bool:
        return self.x_nodes.ndim == 1

    @property
    def shape(self) -> tuple[int, int]:
        return (self.x_nodes.shape[0], self.s_nodes.size)

    def points(self, dim: int) -> np.ndarray:
        return self.x_nodes.reshape(-1, dim)

    def validate(self, domain: Domain, T: float) -> None:
        s = self.s_nodes
        if s[0] < -NODE_TOL or s[-1] > T + NODE_TOL:
            raise ValidationError(f"s_nodes must lie in [0, {T}]")
        if abs(s[0]) > NODE_TOL or abs(s[-1] - T) > NODE_TOL:
            raise ValidationError("s_nodes must include 0 and T")
        pts = self.points(domain.dim)
        if not np.all(domain.in_closure(pts)):
            raise ValidationError("x_nodes must lie in the closure of the domain")
        if self.one_dimensional and domain.is_interval:
            if abs(self.x_nodes[0] - domain.r1) > NODE_TOL or abs(self.x_nodes[-1] - domain.r2) > NODE_TOL:
                raise ValidationError("x_nodes must start at r1 and end at r2")


@dataclass(frozen=True)
class TerminalData:
    """Terminal function ``xi`` evaluated on ``(P, n)`` points."""

    xi: Callable[[np.ndarray], np.ndarray]
    sup_norm: float = 0.0
    nodes: Optional[tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False, compare=False)

    @classmethod
    def create(cls, xi: Callable[[np.ndarray], np.ndarray], domain: Domain, grid: Optional[GridSpec] = None) -> "TerminalData":
        """Wrap ``xi``, checking that it vanishes on the boundary."""
        data = cls(xi)
        pts = grid.points(domain.dim) if grid is not None else domain.interior_points(65)
        sup = float(np.max(np.abs(data(pts)), initial=0.0))
        data = cls(xi, sup)
        data.check_boundary(domain)
        return data

    @classmethod
    def from_nodes(cls, x_nodes: np.ndarray, values: np.ndarray, domain: Domain) -> "TerminalData":
        """Piecewise-linear interpolant of nodal values on a 1-D grid."""
        x_nodes = np.asarray(x_nodes, dtype=float)
        values = np.asarray(values, dtype=float).copy()
        if x_nodes.ndim != 1 or values.shape != x_nodes.shape:
            raise ValidationError("Nodal terminal data needs matching 1-D nodes and values")

        def xi(y: np.ndarray) -> np.ndarray:
            return np.interp(np.asarray(y, dtype=float).reshape(-1), x_nodes, values)

        data = cls(xi, float(np.max(np.abs(values), initial=0.0)), (x_nodes, values))
        data.check_boundary(domain)
        return data

    def __call__(self, y: np.ndarray) -> np.ndarray:
        pts = np.asarray(y, dtype=float)
        out = np.asarray(self.xi(pts), dtype=float)
        if out.size == 1:
            return np.full(pts.shape[0] if pts.ndim else 1, float(out.reshape(())))
        return out.reshape(-1)

    def check_boundary(self, domain: Domain) -> None:
        worst = float(np.max(np.abs(self(domain.boundary_points())), initial=0.0))
        if worst > TERMINAL_TOL * max(1.0, self.sup_norm):
            raise InvalidTerminal(f"Terminal data is {worst:.3g} on the boundary; it must vanish there")


@dataclass
class RunningMoments:
    """Mean and sum of squared deviations merged batch by batch (Chan et al.)."""

    count: int = 0
    mean: np.ndarray = 0.0
    m2: np.ndarray = 0.0

    def add(self, samples: np.ndarray) -> None:
        """Merge a batch whose last axis runs over samples."""
        k = samples.shape[-1]
        if k == 0:
            return
        b_mean = samples.mean(axis=-1)
        b_m2 = ((samples - b_mean[..., None]) ** 2).sum(axis=-1)
        if self.count == 0:
            self.count, self.mean, self.m2 = k, b_mean, b_m2
            return
        total = self.count + k
        delta = b_mean - self.mean
        self.m2 = self.m2 + b_m2 + delta**2 * (self.count * k / total)
        self.mean = (self.count * self.mean + k * b_mean) / total
        self.count = total

    @property
    def stderr(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(np.asarray(self.mean, dtype=float))
        return np.sqrt(np.maximum(self.m2, 0.0) / (self.count - 1) / self.count)


@dataclass(frozen=True)
class SolutionField:
    """``u[i, j]`` at ``(x_nodes[i], s_nodes[j])`` with Monte Carlo standard errors."""

    values: np.ndarray
    stderr: np.ndarray
    grid: GridSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != self.grid.shape or self.stderr.shape != self.grid.shape:
            raise ValidationError(f"Field arrays must have shape {self.grid.shape}")

    def _interpolators(self) -> tuple[RegularGridInterpolator, RegularGridInterpolator]:
        if not self.grid.one_dimensional:
            raise ValidationError("Interpolation needs a one-dimensional x grid")
        axes = (self.grid.x_nodes, self.grid.s_nodes)
        return (
            RegularGridInterpolator(axes, self.values, method="linear", bounds_error=True),
            RegularGridInterpolator(axes, self.stderr, method="linear", bounds_error=True),
        )

    def _query(self, x, s) -> np.ndarray:
        xq = np.asarray(x, dtype=float).reshape(-1)
        sq = np.asarray(s, dtype=float).reshape(-1)
        if sq.size == 1:
            sq = np.full(xq.shape, sq[0])
        elif sq.shape != xq.shape:
            raise ValidationError("Interpolation needs one time per point or a single time")
        xs, ss = self.grid.x_nodes, self.grid.s_nodes
        outside = (xq < xs[0] - NODE_TOL) | (xq > xs[-1] + NODE_TOL) | (sq < ss[0] - NODE_TOL) | (sq > ss[-1] + NODE_TOL)
        if np.any(outside):
            i = int(np.argmax(outside))
            raise InterpolationOutOfRange(f"Point (x={xq[i]:.6g}, s={sq[i]:.6g}) is outside the field grid")
        return np.column_stack([np.clip(xq, xs[0], xs[-1]), np.clip(sq, ss[0], ss[-1])])

    def interpolate(self, x, s) -> np.ndarray:
        """Bilinear interpolation of ``u`` at points ``x`` and times ``s``."""
        return self._interpolators()[0](self._query(x, s))

    def interpolate_stderr(self, x, s) -> np.ndarray:
        return self._interpolators()[1](self._query(x, s))

    def column_at(self, t: float) -> np.ndarray:
        """``u(., t)`` on the x nodes, linear in time between columns."""
        s = self.grid.s_nodes
        if t < s[0] - NODE_TOL or t > s[-1] + NODE_TOL:
            raise InterpolationOutOfRange(f"Time {t} is outside [{s[0]}, {s[-1]}]")
        j = int(np.clip(np.searchsorted(s, t, side="right") - 1, 0, s.size - 1))
        if j == s.size - 1 or abs(t - s[j]) <= NODE_TOL:
            return self.values[:, j].copy()
        w = (t - s[j]) / (s[j + 1] - s[j])
        return (1.0 - w) * self.values[:, j] + w * self.values[:, j + 1]

    def resample(self, grid: GridSpec) -> "SolutionField":
        xx, ss = np.meshgrid(grid.x_nodes, grid.s_nodes, indexing="ij")
        values = self.interpolate(xx.ravel(), ss.ravel()).reshape(grid.shape)
        stderr = self.interpolate_stderr(xx.ravel(), ss.ravel()).reshape(grid.shape)
        return SolutionField(values, stderr, grid, dict(self.meta))

    def shifted(self, offset: np.ndarray) -> "SolutionField":
        """Add a function of x (given on the x nodes) to every column."""
        return SolutionField(self.values + np.asarray(offset)[:, None], self.stderr.copy(), self.grid, dict(self.meta))

    def to_csv(self, path: Path) -> Path:
        """Write ``x,s,u,stderr`` rows, x varying slowest."""
        path = Path(path)
        pts = self.grid.x_nodes.reshape(self.grid.shape[0], -1)
        x_header = ["x"] if pts.shape[1] == 1 else [f"x{k + 1}" for k in range(pts.shape[1])]
        lines = [",".join(x_header + ["s", "u", "stderr"])]
        for i, xi in enumerate(pts):
            prefix = ",".join(format_float(v) for v in xi)
            for j, s in enumerate(self.grid.s_nodes):
                lines.append(f"{prefix},{format_float(s)},{format_float(self.values[i, j])},{format_float(self.stderr[i, j])}")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        return path


def path_chunks(path_count: int, chunk_blocks: int = CHUNK_BLOCKS):
    """Path index ranges aligned to stream blocks."""
    size = chunk_blocks * BLOCK
    for start in range(0, path_count, size):
        yield np.arange(start, min(start + size, path_count))


def _terminal_samples(out: PathOutcomes, xi: TerminalData) -> np.ndarray:
    G, P = out.shape
    values = np.zeros((G, P))
    live = ~out.exited
    if np.any(live):
        values[live] = out.discount[live] * xi(out.y[live])
    return values


def _prepare(coeffs: CoefficientSet, domain: Domain, grid: GridSpec, cfg: SimConfig) -> None:
    if not coeffs.completed:
        raise ValidationError("Coefficients must be completed before solving")
    grid.validate(domain, coeffs.T)
    cfg.check_horizon(coeffs.T)


def solve_cauchy(
    coeffs: CoefficientSet,
    domain: Domain,
    xi: TerminalData,
    grid: GridSpec,
    cfg: SimConfig,
) -> SolutionField:
    """Monte Carlo solution ``u = L_T xi`` on ``grid``.

    Path ``k`` uses the same noise stream for every grid node, so fields for
    different terminal data are coupled and linear in ``xi`` under a fixed
    seed. The ``s = T`` column is ``xi`` itself and boundary rows are 0.

    Raises:
        InvalidTerminal: if ``xi`` does not vanish on the boundary.
        NumericalBlowup: propagated from the simulation.
    """
    _prepare(coeffs, domain, grid, cfg)
    xi.check_boundary(domain)
    pts = grid.points(domain.dim)
    interior = np.flatnonzero(domain.contains(pts))
    values = np.zeros(grid.shape)
    stderr = np.zeros(grid.shape)

    for j, s in enumerate(grid.s_nodes):
        if s >= coeffs.T - NODE_TOL:
            column = np.zeros(pts.shape[0])
            column[interior] = xi(pts[interior])
            values[:, j] = column
            continue
        if interior.size == 0:
            continue
        moments = RunningMoments()
        for ids in path_chunks(cfg.path_count):
            out = simulate_outcomes(coeffs, domain, pts[interior], s, cfg, path_indices=ids)
            moments.add(_terminal_samples(out, xi))
        values[interior, j] = moments.mean
        stderr[interior, j] = moments.stderr

    meta = {
        "path_count": cfg.path_count,
        "base_seed": cfg.base_seed,
        "step_h": cfg.step_h,
        "bridge_correction": cfg.bridge_correction,
        "C_lambda": discount_growth_constant(coeffs, domain),
    }
    logger.info(
        "Solved %s on %d x %d grid with %d paths (max stderr %.3g)",
        coeffs.name, grid.shape[0], grid.shape[1], cfg.path_count, float(stderr.max(initial=0.0)),
    )
    return SolutionField(values, stderr, grid, meta)


def hat_weights(x_nodes: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left node index and right weight of the piecewise-linear basis at ``y``."""
    left = np.clip(np.searchsorted(x_nodes, y, side="right") - 1, 0, x_nodes.size - 2)
    w = (y - x_nodes[left]) / (x_nodes[left + 1] - x_nodes[left])
    return left, np.clip(w, 0.0, 1.0)


@dataclass(frozen=True)
class PropagationOperator:
    """The discretised solution map on piecewise-linear terminal data.

    ``weights[j, i, l]`` is the path average of ``gamma * hat_l(y)`` from
    ``(x_i, s_j)``, so ``weights @ phi`` reproduces ``solve_cauchy`` values
    for the interpolant of ``phi`` with the same paths. One simulation pass
    builds it; applying it afterwards is a matrix product.
    """

    grid: GridSpec
    weights: np.ndarray

    @classmethod
    def build(
        cls, coeffs: CoefficientSet, domain: Domain, grid: GridSpec, cfg: SimConfig, horizon: Optional[float] = None
    ) -> "PropagationOperator":
        """Simulate once for all columns with ``s <= horizon`` (all by default).

        Columns past the horizon are omitted from the returned grid.
        """
        if not grid.one_dimensional or not domain.is_interval:
            raise ValidationError("The propagation operator needs an interval domain")
        _prepare(coeffs, domain, grid, cfg)
        xs = grid.x_nodes
        nx = xs.size
        s_nodes = grid.s_nodes
        if horizon is not None:
            last = int(min(np.searchsorted(s_nodes, horizon - NODE_TOL, side="left"), s_nodes.size - 1))
            s_nodes = s_nodes[: last + 1]
        interior = np.flatnonzero(domain.contains(xs[:, None]))
        weights = np.zeros((s_nodes.size, nx, nx))

        for j, s in enumerate(s_nodes):
            if s >= coeffs.T - NODE_TOL:
                weights[j, interior, interior] = 1.0
                continue
            acc = np.zeros((interior.size, nx))
            for ids in path_chunks(cfg.path_count):
                out = simulate_outcomes(coeffs, domain, xs[interior][:, None], s, cfg, path_indices=ids)
                live = ~out.exited
                rows = np.broadcast_to(np.arange(interior.size)[:, None], live.shape)[live]
                left, w = hat_weights(xs, out.y[..., 0][live])
                d = out.discount[live]
                acc += np.bincount(rows * nx + left, weights=d * (1.0 - w), minlength=interior.size * nx).reshape(interior.size, nx)
                acc += np.bincount(rows * nx + left + 1, weights=d * w, minlength=interior.size * nx).reshape(interior.size, nx)
            weights[j, interior, :] = acc / cfg.path_count

        sub = GridSpec(xs, s_nodes) if s_nodes.size != grid.s_nodes.size else grid
        logger.debug("Built propagation operator on %d columns", s_nodes.size)
        return cls(sub, weights)

    def apply(self, phi: np.ndarray) -> SolutionField:
        """Field of ``L_T`` applied to nodal terminal values (stderr not tracked)."""
        values = np.einsum("jil,l->ij", self.weights, np.asarray(phi, dtype=float))
        return SolutionField(values, np.zeros_like(values), self.grid, {"propagated": True})


@dataclass(frozen=True)
class CheckpointDrift:
    t: float
    mean: float
    deviation: float
    stderr: float
    half_width: float
    z: float


@dataclass(frozen=True)
class MartingaleReport:
    u0: float
    checkpoints: tuple[CheckpointDrift, ...]

    @property
    def max_abs_drift(self) -> float:
        return max((abs(c.deviation) for c in self.checkpoints), default=0.0)

    @property
    def max_abs_z(self) -> float:
        return max((abs(c.z) for c in self.checkpoints), default=0.0)


def martingale_check(
    coeffs: CoefficientSet,
    domain: Domain,
    x: float,
    s: float,
    checkpoints: Sequence[float],
    field: SolutionField,
    cfg: SimConfig,
    confidence: float = 0.95,
) -> MartingaleReport:
    """Drift of ``gamma(t ^ tau) u(y(t ^ tau), t ^ tau)`` away from ``u(x, s)``.

    For each checkpoint the process is simulated afresh to ``t`` and ``u`` is
    read off ``field`` by bilinear interpolation. A correct solution has a
    statistically zero drift at every checkpoint.

    Raises:
        InterpolationOutOfRange: if a stopped state falls outside the field grid.
    """
    if any(t < s - NODE_TOL or t > coeffs.T + NODE_TOL for t in checkpoints):
        raise ValidationError("Checkpoints must lie in [s, T]")
    u0 = float(field.interpolate([x], [s])[0])
    field_se = float(field.interpolate_stderr([x], [s])[0])
    quantile = float(norm.ppf(0.5 + confidence / 2.0))
    drifts = []
    for t in checkpoints:
        if t <= s + NODE_TOL:
            drifts.append(CheckpointDrift(float(t), u0, 0.0, 0.0, 0.0, 0.0))
            continue
        moments = RunningMoments()
        for ids in path_chunks(cfg.path_count):
            out = simulate_outcomes(coeffs, domain, [x], s, cfg, t_end=t, path_indices=ids)
            u = field.interpolate(out.y[0, :, 0], out.tau[0])
            moments.add((out.discount[0] * u)[None, :])
        mean = float(moments.mean[0])
        se = float(np.hypot(moments.stderr[0], field_se))
        deviation = mean - u0
        z = deviation / se if se > 0 else (0.0 if deviation == 0 else float("inf"))
        drifts.append(CheckpointDrift(float(t), mean, deviation, se, quantile * se, z))
        logger.debug("Martingale checkpoint t=%.4g: drift %.3g (z=%.2f)", t, deviation, z)
    return MartingaleReport(u0, tuple(drifts))
