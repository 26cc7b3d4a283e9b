"""Characteristic diffusions killed at the boundary.

The characteristic started at ``(x, s)`` solves

    dy = f dt + sum_i beta_i dw_i + sum_j tilde_beta_j dw~_j,

and carries the discount ``gamma(t) = exp(-int_s^t lambda(y(r), r) dr)``.
Paths are advanced by Euler-Maruyama on a time lattice anchored at 0 with
spacing ``step_h`` (the first and last steps may be partial), and stopped at
the first exit from the domain or at the horizon.

All paths of a simulation read their increments from a ``NoiseStream``: path
``k`` sees the same increments whatever its start point, so simulations from
different grid points or with different coefficients are coupled (common
random numbers).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from bspde_mc.errors import NumericalBlowup, ValidationError
from bspde_mc.model import CoefficientSet, Domain
from bspde_mc.streams import NoiseStream, group_by_block


logger = logging.getLogger(__name__)

TIME_EPS = 1e-12


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo settings.

    Attributes:
        step_h: Euler-Maruyama step.
        path_count: number of paths M.
        base_seed: seed of the counter-based streams.
        bridge_correction: add a Brownian-bridge crossing test per step.
        threads: worker threads over path blocks; results do not depend on it.
        escape_bound: |y| beyond this aborts with NumericalBlowup.
    """

    step_h: float = 1e-3
    path_count: int = 10_000
    base_seed: int = 0
    bridge_correction: bool = False
    threads: int = 1
    escape_bound: float = 1e6

    def __post_init__(self):
        if not self.step_h > 0:
            raise ValidationError(f"step_h must be positive, got {self.step_h}")
        if self.path_count < 1:
            raise ValidationError(f"path_count must be at least 1, got {self.path_count}")
        if self.threads < 1:
            raise ValidationError(f"threads must be at least 1, got {self.threads}")

    def check_horizon(self, T: float) -> None:
        if self.step_h > T:
            raise ValidationError(f"step_h={self.step_h} exceeds the horizon T={T}")


@dataclass(frozen=True)
class PathOutcome:
    """One stopped characteristic."""

    tau_T: float
    y_exit: tuple[float, ...]
    discount: float
    exited: bool


@dataclass(frozen=True)
class PathOutcomes:
    """Stopped states for ``G`` start points times ``P`` paths.

    Arrays are indexed ``[g, p]``; ``y`` has a trailing state axis.
    """

    s: float
    t_end: float
    tau: np.ndarray
    y: np.ndarray
    discount: np.ndarray
    exited: np.ndarray
    path_indices: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.tau.shape

    def outcome(self, g: int, p: int) -> PathOutcome:
        return PathOutcome(
            tau_T=float(self.tau[g, p]),
            y_exit=tuple(float(v) for v in self.y[g, p]),
            discount=float(self.discount[g, p]),
            exited=bool(self.exited[g, p]),
        )

    def outcomes(self, g: int = 0) -> list[PathOutcome]:
        return [self.outcome(g, p) for p in range(self.tau.shape[1])]


def lattice_steps(s: float, t_end: float, h: float) -> Iterator[tuple[int, float, float]]:
    """Yield ``(step_index, t, t_next)`` covering ``[s, t_end]``.

    Step ``m`` is the lattice cell ``[m h, (m + 1) h]`` clipped to the range,
    so runs that start at different times share the increments of every
    common cell.
    """
    m = int(np.floor(s / h + 1e-9))
    t = s
    while t < t_end - TIME_EPS:
        t_next = (m + 1) * h
        if t_next >= t_end - TIME_EPS:
            t_next = t_end
        if t_next - t > TIME_EPS:
            yield m, t, t_next
            t = t_next
        m += 1


def _snap_to_nearest_face(domain: Domain, y: np.ndarray) -> np.ndarray:
    r = domain.radius(y)
    target = np.where(r - domain.r1 <= domain.r2 - r, domain.r1, domain.r2)
    if domain.is_interval:
        return target[:, None].copy()
    return y * (target / np.where(r > 0, r, 1.0))[:, None]


def _simulate_block(
    coeffs: CoefficientSet,
    domain: Domain,
    start: np.ndarray,
    s: float,
    t_end: float,
    cfg: SimConfig,
    stream: NoiseStream,
    block_index: int,
    rows: np.ndarray,
    path_ids: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Advance all start points for the paths of one stream block.

    ``start`` has shape ``(G, B, n)``; returns flat-then-reshaped arrays.
    """
    G, B, n = start.shape
    y = start.reshape(G * B, n).copy()
    row_of = np.tile(rows, G)
    id_of = np.tile(path_ids, G)
    tau = np.full(G * B, t_end)
    discount = np.ones(G * B)
    alive = domain.contains(y)
    exited = ~alive
    tau[exited] = s

    for m, t, t_next in lattice_steps(s, t_end, cfg.step_h):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        dt = t_next - t
        normals, uniforms = stream.block(m, block_index)
        yi = y[idx]
        noise = coeffs.noise_matrix(yi, t)
        lam = coeffs.rate(yi, t)
        dw = normals[row_of[idx]] * np.sqrt(dt)
        y_new = yi + coeffs.drift(yi, t) * dt + np.einsum("knw,kw->kn", noise, dw)

        bad = ~np.all(np.isfinite(y_new), axis=1) | (np.linalg.norm(y_new, axis=1) > cfg.escape_bound)
        if np.any(bad):
            culprit = int(id_of[idx[np.argmax(bad)]])
            raise NumericalBlowup(f"State left the escape bound {cfg.escape_bound:g} at t={t_next:.6g}", culprit)

        inside = domain.contains(y_new)
        step_frac = np.ones(idx.size)
        hit_state = y_new.copy()

        leaving = ~inside
        if np.any(leaving):
            alpha, hit = domain.snap_exit(yi[leaving], y_new[leaving])
            step_frac[leaving] = alpha
            hit_state[leaving] = hit

        if cfg.bridge_correction and np.any(inside):
            p_cross = domain.bridge_exit_probability(yi[inside], y_new[inside], noise[inside], dt)
            crossed = np.zeros(idx.size, dtype=bool)
            crossed[inside] = uniforms[row_of[idx[inside]]] < p_cross
            if np.any(crossed):
                hit_state[crossed] = _snap_to_nearest_face(domain, y_new[crossed])
                leaving = leaving | crossed

        discount[idx] *= np.exp(-lam * step_frac * dt)
        y[idx] = hit_state
        if np.any(leaving):
            gone = idx[leaving]
            tau[gone] = t + step_frac[leaving] * dt
            exited[gone] = True
            alive[gone] = False

    return (
        tau.reshape(G, B),
        y.reshape(G, B, n),
        discount.reshape(G, B),
        exited.reshape(G, B),
    )


def _check_start(coeffs: CoefficientSet, domain: Domain, start: np.ndarray, s: float, t_end: float, cfg: SimConfig) -> None:
    if not coeffs.completed:
        raise ValidationError(f"Coefficients {coeffs.name!r} have no tilde_beta; run complete_diffusion first")
    if domain.dim != coeffs.n:
        raise ValidationError(f"Domain dimension {domain.dim} does not match n={coeffs.n}")
    if not 0.0 <= s <= t_end + TIME_EPS or t_end > coeffs.T + TIME_EPS:
        raise ValidationError(f"Need 0 <= s <= t_end <= T, got s={s}, t_end={t_end}, T={coeffs.T}")
    cfg.check_horizon(coeffs.T)
    if not np.all(domain.in_closure(start)):
        raise ValidationError("Start points must lie in the closure of the domain")


def simulate_outcomes(
    coeffs: CoefficientSet,
    domain: Domain,
    x,
    s: float,
    cfg: SimConfig,
    t_end: Optional[float] = None,
    path_indices: Optional[np.ndarray] = None,
) -> PathOutcomes:
    """Simulate stopped characteristics from one or many start points.

    Args:
        coeffs: completed coefficient set.
        domain: the killing domain.
        x: start points, ``(n,)`` or ``(G, n)``; a ``(G, P, n)`` array gives
            every path its own start state (restart from a checkpoint).
        s: start time.
        cfg: Monte Carlo settings; ``cfg.path_count`` paths unless
            ``path_indices`` selects specific ones.
        t_end: stopping horizon, ``coeffs.T`` by default.
        path_indices: explicit stream indices of the paths to run.

    Returns:
        PathOutcomes with arrays of shape ``(G, P)``.

    Raises:
        NumericalBlowup: a path escaped ``cfg.escape_bound``.
    """
    t_end = coeffs.T if t_end is None else float(t_end)
    s = float(s)
    ids = np.arange(cfg.path_count) if path_indices is None else np.sort(np.asarray(path_indices, dtype=np.int64))
    P = ids.size

    raw = np.asarray(x, dtype=float)
    if raw.ndim == 3:
        if raw.shape[1] != P:
            raise ValidationError(f"Per-path start states cover {raw.shape[1]} paths, expected {P}")
        start = raw
    else:
        pts = domain.as_points(raw)
        start = np.broadcast_to(pts[:, None, :], (pts.shape[0], P, domain.dim))
    _check_start(coeffs, domain, start.reshape(-1, domain.dim), s, t_end, cfg)

    stream = NoiseStream(cfg.base_seed, coeffs.noise_width)
    groups = group_by_block(ids)

    def run(group):
        block_index, rows, positions = group
        return _simulate_block(
            coeffs, domain, np.ascontiguousarray(start[:, positions]), s, t_end, cfg, stream, block_index, rows, ids[positions]
        )

    if cfg.threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(run, groups))
    else:
        parts = [run(g) for g in groups]

    tau, y, discount, exited = (np.concatenate([p[k] for p in parts], axis=1) for k in range(4))
    logger.debug(
        "Simulated %d x %d paths of %s from s=%.4g to %.4g: %.1f%% exited",
        tau.shape[0], P, coeffs.name, s, t_end, 100.0 * exited.mean(),
    )
    return PathOutcomes(s=s, t_end=t_end, tau=tau, y=y, discount=discount, exited=exited, path_indices=ids)


def simulate_path(coeffs: CoefficientSet, domain: Domain, x, s: float, cfg: SimConfig, path_index: int) -> PathOutcome:
    """Simulate the single path ``path_index`` of the stream family ``cfg.base_seed``."""
    out = simulate_outcomes(coeffs, domain, x, s, cfg, path_indices=np.array([path_index]))
    return out.outcome(0, 0)


def simulate_batch(coeffs: CoefficientSet, domain: Domain, x, s: float, cfg: SimConfig) -> list[PathOutcome]:
    """Paths ``0 .. cfg.path_count - 1`` from a single start point."""
    out = simulate_outcomes(coeffs, domain, x, s, cfg)
    if out.shape[0] != 1:
        raise ValidationError("simulate_batch takes a single start point")
    return out.outcomes(0)