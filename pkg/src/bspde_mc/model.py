"""Domain geometry and coefficient fields of the backward problem.

A model is a bounded ``Domain`` (an interval or a spherical layer) plus a
``CoefficientSet`` holding the deterministic fields of the second-order
operator ``A`` (diffusion ``b``, drift ``f``, rate ``lam``) and of the
first-order noise operators ``B_i`` (vectors ``beta_i``).

Coefficient functions take a batch of points ``x`` with shape ``(P, n)`` and
times ``t`` with shape ``(P,)`` and return arrays whose leading axis is ``P``.
Constants and unbatched results are broadcast, so ``lambda x, t: 0.5`` is a
valid diffusion for a one-dimensional model.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Optional

import numpy as np

from bspde_mc.errors import BspdeError, EvaluationError, NotPSD, ValidationError


logger = logging.getLogger(__name__)

FieldFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

MEMBERSHIP_TOL = 1e-12
CLAMP_RTOL = 1e-10
COERCIVITY_TOL = 1e-10


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    """Bounded state region.

    ``interval`` is ``r1 < x < r2`` in one dimension; ``spherical-layer`` is
    ``r1 < |x| < r2`` in ``dim >= 2`` dimensions with ``r1 > 0``.
    """

    kind: Literal["interval", "spherical-layer"]
    r1: float
    r2: float
    dim: int = 1

    def __post_init__(self):
        if self.kind not in ("interval", "spherical-layer"):
            raise ValidationError(f"Unknown domain kind: {self.kind!r}")
        if not self.r1 < self.r2:
            raise ValidationError(f"Domain needs r1 < r2, got r1={self.r1}, r2={self.r2}")
        if self.kind == "interval" and self.dim != 1:
            raise ValidationError("An interval domain is one-dimensional")
        if self.kind == "spherical-layer":
            if self.dim < 2:
                raise ValidationError("A spherical layer needs dim >= 2")
            if self.r1 <= 0:
                raise ValidationError("A spherical layer needs r1 > 0")

    @classmethod
    def interval(cls, lo: float, hi: float) -> "Domain":
        return cls("interval", float(lo), float(hi), 1)

    @classmethod
    def spherical_layer(cls, r1: float, r2: float, dim: int) -> "Domain":
        return cls("spherical-layer", float(r1), float(r2), int(dim))

    @property
    def is_interval(self) -> bool:
        return self.kind == "interval"

    def as_points(self, x) -> np.ndarray:
        """Coerce ``x`` to a ``(P, dim)`` float array."""
        pts = np.asarray(x, dtype=float)
        if pts.ndim == 0:
            pts = pts.reshape(1, 1)
        elif pts.ndim == 1:
            pts = pts.reshape(-1, 1) if self.dim == 1 else pts.reshape(1, -1)
        if pts.shape[-1] != self.dim:
            raise ValidationError(
                f"Points have dimension {pts.shape[-1]}, domain has {self.dim}"
            )
        return pts

    def radius(self, x: np.ndarray) -> np.ndarray:
        """Coordinate measured against r1, r2: x itself or |x|."""
        if self.is_interval:
            return x[..., 0]
        return np.linalg.norm(x, axis=-1)

    def contains(self, x) -> np.ndarray:
        """Membership in the open domain, with a 1e-12 guard band."""
        r = self.radius(np.asarray(x, dtype=float))
        return (r > self.r1 + MEMBERSHIP_TOL) & (r < self.r2 - MEMBERSHIP_TOL)

    def in_closure(self, x) -> np.ndarray:
        r = self.radius(np.asarray(x, dtype=float))
        return (r >= self.r1 - MEMBERSHIP_TOL) & (r <= self.r2 + MEMBERSHIP_TOL)

    def distance_to_boundary(self, x) -> np.ndarray:
        """Euclidean distance to the boundary set, zero exactly on it."""
        r = self.radius(np.asarray(x, dtype=float))
        return np.abs(np.minimum(r - self.r1, self.r2 - r))

    def snap_exit(self, y_prev: np.ndarray, y_new: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project exiting steps onto the boundary along the last increment.

        Args:
            y_prev: ``(K, dim)`` states inside the domain.
            y_new: ``(K, dim)`` states outside the open domain.

        Returns:
            ``(alpha, y_hit)`` where ``alpha`` in ``[0, 1]`` is the fraction of
            the step at which the segment meets the boundary and ``y_hit`` is
            the boundary point.
        """
        if self.is_interval:
            p = y_prev[:, 0]
            q = y_new[:, 0]
            low = q <= self.r1 + MEMBERSHIP_TOL
            target = np.where(low, self.r1, self.r2)
            span = q - p
            with np.errstate(divide="ignore", invalid="ignore"):
                alpha = np.where(span != 0, (target - p) / span, 0.0)
            return np.clip(alpha, 0.0, 1.0), target[:, None].copy()

        d = y_new - y_prev
        r_new = np.linalg.norm(y_new, axis=1)
        inner = r_new <= self.r1 + MEMBERSHIP_TOL
        target = np.where(inner, self.r1, self.r2)
        a = np.einsum("ij,ij->i", d, d)
        b = 2.0 * np.einsum("ij,ij->i", y_prev, d)
        c = np.einsum("ij,ij->i", y_prev, y_prev) - target**2
        disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.where(inner, (-b - disc) / (2.0 * a), (-b + disc) / (2.0 * a))
        alpha = np.clip(np.nan_to_num(root, nan=1.0), 0.0, 1.0)
        hit = y_prev + alpha[:, None] * d
        norm = np.linalg.norm(hit, axis=1)
        hit = hit * (target / np.where(norm > 0, norm, 1.0))[:, None]
        return alpha, hit

    def bridge_exit_probability(
        self, y_prev: np.ndarray, y_new: np.ndarray, noise: np.ndarray, dt
    ) -> np.ndarray:
        """Brownian-bridge probability that a step crossed and came back.

        Both endpoints are inside the domain. For each boundary face the
        crossing probability is ``exp(-2 d1 d2 / (sigma^2 dt))`` with ``d1``,
        ``d2`` the endpoint distances to the face and ``sigma^2 = |G^T nu|^2``
        the local diffusion along the face normal; the two faces combine as
        independent events. Faces without diffusion across them give 0.
        """
        if self.is_interval:
            sig2 = np.einsum("ij,ij->i", noise[:, 0, :], noise[:, 0, :])
            r_prev, r_new = y_prev[:, 0], y_new[:, 0]
        else:
            r_prev = np.linalg.norm(y_prev, axis=1)
            r_new = np.linalg.norm(y_new, axis=1)
            nu = y_prev / np.where(r_prev > 0, r_prev, 1.0)[:, None]
            proj = np.einsum("ij,ijk->ik", nu, noise)
            sig2 = np.einsum("ik,ik->i", proj, proj)
        dt = np.broadcast_to(np.asarray(dt, dtype=float), sig2.shape)
        var = sig2 * dt
        survive = np.ones_like(sig2)
        positive = var > 0
        with np.errstate(divide="ignore", over="ignore", under="ignore"):
            for d1, d2 in (
                (r_prev - self.r1, r_new - self.r1),
                (self.r2 - r_prev, self.r2 - r_new),
            ):
                expo = -2.0 * np.maximum(d1, 0.0) * np.maximum(d2, 0.0) / np.where(positive, var, 1.0)
                survive *= 1.0 - np.where(positive, np.exp(expo), 0.0)
        return 1.0 - survive

    def directions(self) -> np.ndarray:
        """Unit probe directions: +-e_i and +-(1,..,1)/sqrt(dim)."""
        eye = np.eye(self.dim)
        diag = np.ones((1, self.dim)) / np.sqrt(self.dim)
        return np.vstack([eye, -eye, diag, -diag])

    def boundary_points(self) -> np.ndarray:
        if self.is_interval:
            return np.array([[self.r1], [self.r2]])
        dirs = self.directions()
        return np.vstack([self.r1 * dirs, self.r2 * dirs])

    def interior_points(self, count: int) -> np.ndarray:
        radii = np.linspace(self.r1, self.r2, count + 2)[1:-1]
        if self.is_interval:
            return radii[:, None]
        dirs = self.directions()
        return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, self.dim)

    def midpoint(self) -> np.ndarray:
        mid = 0.5 * (self.r1 + self.r2)
        if self.is_interval:
            return np.array([mid])
        e1 = np.zeros(self.dim)
        e1[0] = mid
        return e1


@dataclass(frozen=True)
class ProbeGrid:
    """Tensor grid of interior space points and times used for validation."""

    n_space: int = 33
    n_time: int = 17

    def points(self, domain: Domain, T: float) -> tuple[np.ndarray, np.ndarray]:
        if self.n_space < 1 or self.n_time < 1:
            raise ValidationError("Probe grid must be nonempty")
        xs = domain.interior_points(self.n_space)
        ts = np.linspace(0.0, T, self.n_time)
        x = np.repeat(xs, len(ts), axis=0)
        t = np.tile(ts, len(xs))
        return x, t

    def boundary(self, domain: Domain, T: float) -> tuple[np.ndarray, np.ndarray]:
        xs = domain.boundary_points()
        ts = np.linspace(0.0, T, self.n_time)
        return np.repeat(xs, len(ts), axis=0), np.tile(ts, len(xs))


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

def _call(fn: FieldFn, x: np.ndarray, t: np.ndarray, what: str) -> np.ndarray:
    try:
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            return np.asarray(fn(x, t), dtype=float)
    except BspdeError:
        raise
    except Exception as e:
        raise EvaluationError(f"{what} failed near x={x[0].tolist()}, t={float(np.ravel(t)[0])}: {e}") from e


def evaluate_field(fn: FieldFn, x: np.ndarray, t: np.ndarray, shape: tuple, what: str) -> np.ndarray:
    """Call a coefficient function and broadcast its result to ``(P,) + shape``."""
    return _broadcast(_call(fn, x, t, what), x, shape, what)


def _broadcast(raw: np.ndarray, x: np.ndarray, shape: tuple, what: str) -> np.ndarray:
    P = x.shape[0]
    target = (P,) + shape
    if raw.shape == target:
        out = raw
    elif raw.size == 1:
        out = np.full(target, float(raw.reshape(())))
    elif raw.shape == shape:
        out = np.broadcast_to(raw, target)
    elif raw.size == int(np.prod(target)):
        out = raw.reshape(target)
    else:
        raise EvaluationError(f"{what} returned shape {raw.shape}, expected {target}")

    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.isfinite(out).reshape(P, -1).all(axis=1)))
        raise EvaluationError(f"{what} is not finite at x={x[bad].tolist()}")
    return out


def _zero(x, t):
    return 0.0


@dataclass(frozen=True)
class CoefficientSet:
    """Deterministic coefficient fields of A, B_i and the characteristic SDE.

    ``tilde_beta`` is ``None`` until ``complete_diffusion`` has run (or the
    caller supplies the auxiliary columns directly). ``N = len(beta)`` and
    ``M = len(tilde_beta)``.
    """

    n: int
    T: float
    b: FieldFn
    f: FieldFn = _zero
    lam: FieldFn = _zero
    beta: tuple[FieldFn, ...] = ()
    tilde_beta: Optional[tuple[FieldFn, ...]] = None
    name: str = "custom"
    remainder_root: Optional[FieldFn] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError("State dimension n must be positive")
        if not self.T > 0:
            raise ValidationError(f"Terminal time must be positive, got {self.T}")
        object.__setattr__(self, "beta", tuple(self.beta))
        if self.tilde_beta is not None:
            object.__setattr__(self, "tilde_beta", tuple(self.tilde_beta))

    @property
    def N(self) -> int:
        return len(self.beta)

    @property
    def M(self) -> int:
        return 0 if self.tilde_beta is None else len(self.tilde_beta)

    @property
    def completed(self) -> bool:
        return self.tilde_beta is not None

    @property
    def noise_width(self) -> int:
        return self.N + self.M

    def _prepare(self, x, t) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(x, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, self.n) if self.n == 1 else pts.reshape(1, -1)
        times = np.broadcast_to(np.asarray(t, dtype=float), (pts.shape[0],))
        return pts, times

    def diffusion(self, x, t) -> np.ndarray:
        """b at each point, shape ``(P, n, n)``; scalars mean a multiple of I."""
        pts, times = self._prepare(x, t)
        raw = _call(self.b, pts, times, "diffusion b")
        if self.n > 1 and (raw.size == 1 or raw.shape == (pts.shape[0],)):
            scalar = _broadcast(raw, pts, (), "diffusion b")
            return scalar[:, None, None] * np.eye(self.n)[None]
        return _broadcast(raw, pts, (self.n, self.n), "diffusion b")

    def drift(self, x, t) -> np.ndarray:
        pts, times = self._prepare(x, t)
        return evaluate_field(self.f, pts, times, (self.n,), "drift f")

    def rate(self, x, t) -> np.ndarray:
        pts, times = self._prepare(x, t)
        return evaluate_field(self.lam, pts, times, (), "rate lambda")

    def beta_matrix(self, x, t) -> np.ndarray:
        """Columns beta_i, shape ``(P, n, N)``."""
        pts, times = self._prepare(x, t)
        cols = [evaluate_field(fn, pts, times, (self.n,), f"beta[{i}]") for i, fn in enumerate(self.beta)]
        if not cols:
            return np.zeros((pts.shape[0], self.n, 0))
        return np.stack(cols, axis=-1)

    def tilde_beta_matrix(self, x, t) -> np.ndarray:
        """Columns tilde_beta_j, shape ``(P, n, M)``."""
        pts, times = self._prepare(x, t)
        if self.remainder_root is not None:
            return self.remainder_root(pts, times)
        cols = [
            evaluate_field(fn, pts, times, (self.n,), f"tilde_beta[{j}]")
            for j, fn in enumerate(self.tilde_beta or ())
        ]
        if not cols:
            return np.zeros((pts.shape[0], self.n, 0))
        return np.stack(cols, axis=-1)

    def noise_matrix(self, x, t) -> np.ndarray:
        """Full diffusion matrix ``[beta | tilde_beta]``, shape ``(P, n, N + M)``."""
        return np.concatenate([self.beta_matrix(x, t), self.tilde_beta_matrix(x, t)], axis=-1)


@dataclass(frozen=True)
class CoercivityReport:
    rho_hat: float
    worst_point: tuple[tuple[float, ...], float]
    tolerance: float = COERCIVITY_TOL

    @property
    def satisfied(self) -> bool:
        return self.rho_hat >= -self.tolerance


@dataclass(frozen=True)
class BoundaryReport:
    max_abs: tuple[float, ...]
    status: Literal["pass", "warn"]


def _outer_sum(B: np.ndarray) -> np.ndarray:
    return np.einsum("pik,pjk->pij", B, B)


def _check_symmetric(b: np.ndarray) -> None:
    asym = np.abs(b - np.swapaxes(b, 1, 2)).max(initial=0.0)
    scale = max(1.0, np.abs(b).max(initial=0.0))
    if asym > 1e-12 * scale:
        raise ValidationError(f"Diffusion b is not symmetric (max asymmetry {asym:.3g})")


def validate_coercivity(
    coeffs: CoefficientSet,
    domain: Domain,
    probe_grid: Optional[ProbeGrid] = None,
    tolerance: float = COERCIVITY_TOL,
) -> CoercivityReport:
    """Smallest eigenvalue of ``b - 1/2 sum(beta beta^T)`` over the probe grid.

    Args:
        coeffs: the model to check.
        domain: its domain; must match ``coeffs.n``.
        probe_grid: sampling grid, 33 x 17 interior points by default.
        tolerance: slack below zero still counted as coercive.

    Returns:
        CoercivityReport with ``rho_hat`` and the point where it is attained.

    Raises:
        EvaluationError: if a coefficient fails at a probe point.
    """
    if domain.dim != coeffs.n:
        raise ValidationError(f"Domain dimension {domain.dim} does not match n={coeffs.n}")
    x, t = (probe_grid or ProbeGrid()).points(domain, coeffs.T)
    b = coeffs.diffusion(x, t)
    _check_symmetric(b)
    B = coeffs.beta_matrix(x, t)
    form = b - 0.5 * _outer_sum(B)
    form = 0.5 * (form + np.swapaxes(form, 1, 2))
    smallest = np.linalg.eigvalsh(form)[:, 0]
    worst = int(np.argmin(smallest))
    report = CoercivityReport(
        rho_hat=float(smallest[worst]),
        worst_point=(tuple(float(v) for v in x[worst]), float(t[worst])),
        tolerance=tolerance,
    )
    if not report.satisfied:
        logger.warning(
            "Coercivity fails for %s: rho_hat=%.3g at %s", coeffs.name, report.rho_hat, report.worst_point
        )
    return report


def _remainder(coeffs: CoefficientSet, x: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``R = 2b - sum(beta beta^T)`` and the per-point clamp tolerance."""
    two_b = 2.0 * coeffs.diffusion(x, t)
    bbt = _outer_sum(coeffs.beta_matrix(x, t))
    R = two_b - bbt
    R = 0.5 * (R + np.swapaxes(R, 1, 2))
    scale = np.maximum(np.abs(two_b).max(axis=(1, 2)), np.abs(bbt).max(axis=(1, 2)))
    return R, CLAMP_RTOL * scale


def _psd_root(R: np.ndarray, tol: np.ndarray) -> np.ndarray:
    if R.shape[1] == 1:
        r = R[:, 0, 0]
        r = np.where(np.abs(r) <= tol, 0.0, r)
        return np.sqrt(np.maximum(r, 0.0))[:, None, None]
    w, V = np.linalg.eigh(R)
    w = np.where(np.abs(w) <= tol[:, None], 0.0, w)
    w = np.maximum(w, 0.0)
    return np.einsum("pik,pk,pjk->pij", V, np.sqrt(w), V)


def complete_diffusion(
    coeffs: CoefficientSet, domain: Domain, probe_grid: Optional[ProbeGrid] = None
) -> CoefficientSet:
    """Populate ``tilde_beta`` with the PSD square root of ``2b - sum(beta beta^T)``.

    The root is taken by symmetric eigendecomposition, eigenvalues within
    ``1e-10`` of zero (relative to the size of ``2b``) clamped to 0, so
    ``M = n``. The remainder is checked on the probe grid of ``domain`` first.

    Raises:
        NotPSD: if the remainder has an eigenvalue below tolerance anywhere
            on the probe grid.
    """
    if domain.dim != coeffs.n:
        raise ValidationError(f"Domain dimension {domain.dim} does not match n={coeffs.n}")
    x, t = (probe_grid or ProbeGrid()).points(domain, coeffs.T)
    R, tol = _remainder(coeffs, x, t)
    w = np.linalg.eigvalsh(R)
    bad = w[:, 0] < -tol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NotPSD(
            f"2b - sum(beta beta^T) has eigenvalue {w[i, 0]:.3g} at x={x[i].tolist()}, t={t[i]}"
        )

    def root(xs: np.ndarray, ts: np.ndarray) -> np.ndarray:
        Rp, tolp = _remainder(coeffs, xs, ts)
        return _psd_root(Rp, tolp)

    G = root(x, t)
    err = np.abs(_outer_sum(G) - R).max(initial=0.0)
    logger.debug("Diffusion completion for %s: reconstruction error %.3g", coeffs.name, err)

    columns = tuple(_column(root, j) for j in range(coeffs.n))
    return replace(coeffs, tilde_beta=columns, remainder_root=root)


def _column(root: Callable, j: int) -> FieldFn:
    def column(x, t):
        return root(np.asarray(x, dtype=float), np.asarray(t, dtype=float))[:, :, j]

    return column


def regularize_diffusion(coeffs: CoefficientSet, delta: float, domain: Domain) -> CoefficientSet:
    """Elliptic perturbation ``b -> b + delta/2 I``, completed.

    The auxiliary noise then covers ``2b - sum(beta beta^T) + delta I``.
    """
    if delta < 0:
        raise ValidationError(f"delta must be nonnegative, got {delta}")

    def b(x, t):
        return coeffs.diffusion(x, t) + 0.5 * delta * np.eye(coeffs.n)[None]

    perturbed = replace(
        coeffs, b=b, tilde_beta=None, remainder_root=None, name=f"{coeffs.name}+delta={delta:g}"
    )
    return complete_diffusion(perturbed, domain)


def check_boundary_vanishing(
    coeffs: CoefficientSet,
    domain: Domain,
    boundary_samples: Optional[tuple[np.ndarray, np.ndarray]] = None,
    tolerance: float = 1e-12,
) -> BoundaryReport:
    """Maximum of ``|beta_i|`` on the boundary; positive values only warn."""
    if not coeffs.beta:
        return BoundaryReport(max_abs=(), status="pass")
    if boundary_samples is None:
        x, t = ProbeGrid().boundary(domain, coeffs.T)
    else:
        x, t = boundary_samples
        x = domain.as_points(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    B = coeffs.beta_matrix(x, t)
    max_abs = tuple(float(v) for v in np.linalg.norm(B, axis=1).max(axis=0))
    status = "warn" if max(max_abs) > tolerance else "pass"
    if status == "warn":
        logger.warning(
            "beta does not vanish on the boundary of %s (max %s); continuing",
            coeffs.name,
            ", ".join(f"{v:.4g}" for v in max_abs),
        )
    return BoundaryReport(max_abs=max_abs, status=status)


def lambda_bounds(coeffs: CoefficientSet, domain: Domain, probe_grid: Optional[ProbeGrid] = None) -> tuple[float, float]:
    """``(min, max)`` of the rate over the closed probe grid."""
    grid = probe_grid or ProbeGrid()
    x, t = grid.points(domain, coeffs.T)
    xb, tb = grid.boundary(domain, coeffs.T)
    lam = np.concatenate([coeffs.rate(x, t), coeffs.rate(xb, tb)])
    return float(lam.min()), float(lam.max())


def discount_growth_constant(coeffs: CoefficientSet, domain: Domain, probe_grid: Optional[ProbeGrid] = None) -> float:
    """``C_lambda = exp(T sup max(0, -lambda))``, the sup-norm amplification."""
    lam_min, _ = lambda_bounds(coeffs, domain, probe_grid)
    return float(np.exp(coeffs.T * max(0.0, -lam_min)))


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

PRESETS = ("brownian", "heat", "gbm")


def preset_model(name: str, T: Optional[float] = None, sigma: float = 0.2, lam: float = 0.0) -> tuple[CoefficientSet, Domain]:
    """Named models used by the CLI and the tests.

    - ``brownian``: standard Brownian motion (b = 1/2) on (-1, 1), T = 1.
    - ``heat``: b = 1/2 on (0, 1), T = 0.5.
    - ``gbm``: b = sigma^2 x^2 / 2, beta = sigma x on (1, 2), T = 1.

    A constant rate ``lam`` can be attached to any preset.
    """
    rate = (lambda x, t: lam) if lam else _zero
    if name == "brownian":
        coeffs = CoefficientSet(n=1, T=1.0 if T is None else T, b=lambda x, t: 0.5, lam=rate, name=name)
        domain = Domain.interval(-1.0, 1.0)
    elif name == "heat":
        coeffs = CoefficientSet(n=1, T=0.5 if T is None else T, b=lambda x, t: 0.5, lam=rate, name=name)
        domain = Domain.interval(0.0, 1.0)
    elif name == "gbm":
        coeffs = CoefficientSet(
            n=1,
            T=1.0 if T is None else T,
            b=lambda x, t: 0.5 * sigma**2 * x[:, 0] ** 2,
            beta=(lambda x, t: sigma * x[:, 0],),
            lam=rate,
            name=name,
        )
        domain = Domain.interval(1.0, 2.0)
    else:
        raise ValidationError(f"Unknown preset {name!r}; choose one of {', '.join(PRESETS)}")
    return complete_diffusion(coeffs, domain), domain
