"""Command dispatch, artifact writing and the run manifest.

Every run writes its CSV artifacts into the output directory together with
``manifest.yaml``: the resolved configuration, the seed and a SHA-256 per
artifact. A failed run writes ``diagnostics.txt`` instead and reports the
exit code of its error family.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from bspde_mc.config import RunConfig, load_config, load_yaml
from bspde_mc.errors import EXIT_OK, BspdeError, NoConvergence, NumericalBlowup, exit_code_for
from bspde_mc.exit_stats import (
    SurvivalCurve,
    SurvivalEntry,
    boundary_decay_curve,
    exit_time_l1_distance,
    survival_profile,
    uniform_survival_bound,
)
from bspde_mc.model import Domain, regularize_diffusion
from bspde_mc.nonlocal_terminal import gamma_norm_bound, solve_nonlocal
from bspde_mc.pde_oracle import compare_fields, solve_backward_pde
from bspde_mc.portfolio import replicate, solve_hedge
from bspde_mc.solver import format_float, martingale_check, solve_cauchy


logger = logging.getLogger(__name__)

MANIFEST = "manifest.yaml"
DIAGNOSTICS = "diagnostics.txt"


@dataclass
class RunResult:
    exit_code: int
    out_dir: Path
    artifacts: dict[str, Path] = field(default_factory=dict)
    lines: list[str] = field(default_factory=list)
    error: Optional[BaseException] = None

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK


def write_rows(path: Path, header: list[str], rows: list[list]) -> Path:
    """CSV with 12 significant digits and ``\\n`` line endings."""
    def cell(v):
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return format_float(v)
        return str(v)

    lines = [",".join(header)] + [",".join(cell(v) for v in row) for row in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    return path


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _solve(config: RunConfig, out: Path, result: RunResult) -> None:
    coeffs, domain = config.build_model()
    grid = config.build_grid(domain, coeffs.T)
    xi = config.build_terminal(domain, grid)
    field_ = solve_cauchy(coeffs, domain, xi, grid, config.sim_config())
    result.artifacts["u.csv"] = field_.to_csv(out / "u.csv")
    result.lines.append(f"Solved {coeffs.name} on {grid.shape[0]} x {grid.shape[1]} nodes")
    result.lines.append(f"max stderr {float(field_.stderr.max(initial=0.0)):.3g}, C_lambda {field_.meta['C_lambda']:.6g}")


def _nonlocal(config: RunConfig, out: Path, result: RunResult) -> None:
    coeffs, domain = config.build_model()
    grid = config.build_grid(domain, coeffs.T)
    xi = config.build_terminal(domain, grid)
    kernel = config.build_kernel()
    bound = gamma_norm_bound(kernel, coeffs.T, domain)
    result.lines.append(f"{kernel.describe()}: bound {bound.bound:.6g}, regime {bound.regime}")
    tol, max_iter = config.iteration_settings(config.kernel, "kernel")
    solution = solve_nonlocal(coeffs, domain, xi, kernel, grid, config.sim_config(), tol=tol, max_iter=max_iter)
    result.artifacts["u.csv"] = solution.field.to_csv(out / "u.csv")
    result.artifacts["fixed_point.csv"] = solution.report.to_csv(out / "fixed_point.csv")
    result.lines.append(
        f"Converged in {solution.report.iterations} iterations, contraction {solution.report.contraction_estimate:.4g}"
    )


def _oracle_compare(config: RunConfig, out: Path, result: RunResult) -> None:
    coeffs, domain = config.build_model()
    grid = config.build_grid(domain, coeffs.T)
    xi = config.build_terminal(domain, grid)
    cfg = config.sim_config()
    mc = solve_cauchy(coeffs, domain, xi, grid, cfg)
    fd = solve_backward_pde(coeffs, domain, xi, config.build_fd(), grid)
    comparison = compare_fields(mc, fd, grid)
    result.artifacts["u.csv"] = mc.to_csv(out / "u.csv")
    result.artifacts["oracle.csv"] = fd.to_csv(out / "oracle.csv")
    result.artifacts["comparison.csv"] = write_rows(
        out / "comparison.csv",
        ["key", "value"],
        [
            ["max_abs_diff", comparison.max_abs_diff],
            ["rms_diff", comparison.rms_diff],
            ["max_abs_z", comparison.max_abs_z],
            ["deterministic_mismatches", comparison.deterministic_mismatches],
        ],
    )
    result.lines.append(f"max |MC - FD| = {comparison.max_abs_diff:.4g}, max |z| = {comparison.max_abs_z:.3g}")

    check = config.oracle.get("martingale")
    if check:
        x = float(check.get("x", domain.midpoint()[0]))
        s = float(check.get("s", 0.0))
        report = martingale_check(coeffs, domain, x, s, [float(t) for t in check["checkpoints"]], mc, cfg)
        result.artifacts["martingale.csv"] = write_rows(
            out / "martingale.csv",
            ["t", "mean", "deviation", "stderr", "half_width", "z"],
            [[c.t, c.mean, c.deviation, c.stderr, c.half_width, c.z] for c in report.checkpoints],
        )
        result.lines.append(f"Martingale check from x={x:g}: max |z| = {report.max_abs_z:.3g}")


def _exit_stats(config: RunConfig, out: Path, result: RunResult) -> None:
    coeffs, domain = config.build_model()
    settings = config.exit_stats_settings(domain)
    cfg = config.sim_config()
    x, s, thetas = settings["x"], settings["s"], settings["thetas"]

    profile = survival_profile(coeffs, domain, x, s, thetas, cfg)
    curve = SurvivalCurve(tuple(
        SurvivalEntry(tuple(float(v) for v in x), theta, e.p_hat, e.stderr) for theta, e in zip(thetas, profile)
    ))
    result.artifacts["survival.csv"] = curve.to_csv(out / "survival.csv")

    summary: list[list] = []
    theta_max = max(thetas)
    if settings["decay"] is not None:
        decay = boundary_decay_curve(coeffs, domain, s, settings["decay_theta"], settings["decay"], cfg)
        result.artifacts["decay.csv"] = decay.to_csv(out / "decay.csv")
        summary.append(["decay_degenerate", bool(decay.degenerate)])

    nu, point = uniform_survival_bound(coeffs, domain, s, theta_max, cfg)
    summary += [["nu_hat", nu.p_hat], ["nu_stderr", nu.stderr], ["nu_point", " ".join(format_float(v) for v in point)]]

    x_b, delta = settings["perturb_x"], settings["perturb_delta"]
    if x_b is not None or delta is not None:
        other = coeffs if delta is None else regularize_diffusion(coeffs, delta, domain)
        distance = exit_time_l1_distance(coeffs, other, domain, x, s, cfg, x_b=x_b)
        summary += [["l1_distance", distance.d_hat], ["l1_stderr", distance.stderr]]

    result.artifacts["exit_stats.csv"] = write_rows(out / "exit_stats.csv", ["key", "value"], summary)
    last = profile[thetas.index(theta_max)]
    result.lines.append(f"Survival at theta={theta_max:g}: {last.p_hat:.4g} +/- {last.stderr:.2g}")
    result.lines.append(f"Uniform survival bound nu = {nu.p_hat:.4g}")


def _replicate(config: RunConfig, out: Path, result: RunResult) -> None:
    market = config.build_market()
    cfg = config.sim_config()
    grid = config.build_grid(Domain.interval(market.s_L, market.s_U), market.T)
    tol, max_iter = config.iteration_settings(config.market, "market")
    hedge = solve_hedge(market, grid, cfg, tol=tol, max_iter=max_iter)
    path_count = config.replication_paths(cfg)
    report = replicate(market, hedge.H_field, hedge.delta_field, path_count, cfg, hedge)
    result.artifacts["hedge.csv"] = hedge.H_field.to_csv(out / "hedge.csv")
    result.artifacts["delta.csv"] = hedge.delta_field.to_csv(out / "delta.csv")
    if hedge.report is not None:
        result.artifacts["fixed_point.csv"] = hedge.report.to_csv(out / "fixed_point.csv")
    result.artifacts["replication.csv"] = report.to_csv(out / "replication.csv")
    if config.market.get("dump_paths", False):
        result.artifacts["paths.csv"] = report.paths_to_csv(out / "paths.csv")
    result.lines.extend(report.summary().splitlines())


COMMANDS: dict[str, Callable[[RunConfig, Path, RunResult], None]] = {
    "solve": _solve,
    "nonlocal": _nonlocal,
    "oracle-compare": _oracle_compare,
    "exit-stats": _exit_stats,
    "replicate": _replicate,
}


# ---------------------------------------------------------------------------
# Manifest and diagnostics
# ---------------------------------------------------------------------------

def write_manifest(config: RunConfig, result: RunResult) -> Path:
    manifest = {
        "command": config.command,
        "seed": config.seed,
        "config": config.resolved(),
        "artifacts": {name: sha256_of(path) for name, path in sorted(result.artifacts.items())},
    }
    path = result.out_dir / MANIFEST
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)
    return path


def write_diagnostics(out_dir: Path, error: BaseException) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"error: {type(error).__name__}",
        f"exit_code: {exit_code_for(error)}",
        f"message: {error}",
    ]
    if isinstance(error, NoConvergence):
        lines.append("residual_history: " + " ".join(format_float(r) for r in error.residual_history))
        if error.noise_floor is not None:
            lines.append(f"noise_floor: {format_float(error.noise_floor)}")
    if isinstance(error, NumericalBlowup):
        lines.append(f"path_index: {error.path_index}")
    if getattr(error, "offset", None) is not None:
        lines.append(f"offset: {error.offset}")
    path = out_dir / DIAGNOSTICS
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    return path


def run(config: RunConfig) -> RunResult:
    """Dispatch ``config.command`` and write its artifacts and manifest.

    Solver errors do not propagate: they become the exit code of their
    family and a ``diagnostics.txt`` in the output directory.
    """
    out = config.out_dir
    result = RunResult(EXIT_OK, out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for stale in (out / DIAGNOSTICS, out / MANIFEST):
            stale.unlink(missing_ok=True)
        COMMANDS[config.command](config, out, result)
    except BspdeError as e:
        logger.error("%s failed: %s", config.command, e)
        result.exit_code = exit_code_for(e)
        result.error = e
        result.artifacts["diagnostics.txt"] = write_diagnostics(out, e)
        return result
    result.artifacts[MANIFEST] = write_manifest(config, result)
    logger.info("Wrote %d artifacts to %s", len(result.artifacts), out)
    return result


def run_file(path: Path, seed: Optional[int] = None, threads: Optional[int] = None, out: Optional[Path] = None) -> RunResult:
    """Load and run a run file; configuration errors are reported like solver errors."""
    try:
        config = load_config(path, seed=seed, threads=threads, out=out)
    except BspdeError as e:
        target = Path(out) if out is not None else Path("out")
        result = RunResult(exit_code_for(e), target, error=e)
        result.artifacts["diagnostics.txt"] = write_diagnostics(target, e)
        return result
    return run(config)


@dataclass(frozen=True)
class ManifestCheck:
    name: str
    expected: str
    actual: Optional[str]

    @property
    def ok(self) -> bool:
        return self.expected == self.actual


def verify_manifest(out_dir: Path) -> list[ManifestCheck]:
    """Recompute the checksum of every artifact listed in the manifest."""
    out_dir = Path(out_dir)
    manifest = load_yaml(out_dir / MANIFEST) or {}
    checks = []
    for name, expected in sorted((manifest.get("artifacts") or {}).items()):
        path = out_dir / name
        checks.append(ManifestCheck(name, expected, sha256_of(path) if path.exists() else None))
    return checks
