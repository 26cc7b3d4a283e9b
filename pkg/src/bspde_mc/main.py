import logging
from pathlib import Path
from typing import Optional

import typer
from typing_extensions import Annotated

from bspde_mc import __version__
from bspde_mc.runner import RunResult, run_file, verify_manifest

app = typer.Typer(
    name="bspde-mc",
    help="Monte Carlo solver for degenerate backward SPDEs with non-local terminal conditions",
    add_completion=False,
)


def print_run_status(result: RunResult) -> None:
    """Print the outcome of a run to stdout."""
    if result.ok:
        print("✓ Run: SUCCESS")
        for line in result.lines:
            print(f"  {line}")
        print(f"  Output: {result.out_dir}")
        for name in sorted(result.artifacts):
            print(f"    {name}")
    else:
        print(f"✗ Run: FAILED (exit code {result.exit_code})")
        print(f"  {type(result.error).__name__}: {result.error}")
        if "diagnostics.txt" in result.artifacts:
            print(f"  Diagnostics: {result.artifacts['diagnostics.txt']}")


@app.command()
def run(
    config: Annotated[Path, typer.Option("--config", "-c", help="YAML run file")],
    seed: Annotated[Optional[int], typer.Option("--seed", min=0, help="Override sim.seed")] = None,
    threads: Annotated[Optional[int], typer.Option("--threads", min=1, help="Worker threads")] = None,
    out: Annotated[Optional[Path], typer.Option("--out", help="Override output.dir")] = None,
    verbose: Annotated[bool, typer.Option("--verbose", help="Log solver progress")] = False,
):
    """Run the command described by a configuration file."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    result = run_file(config, seed=seed, threads=threads, out=out)
    print_run_status(result)
    raise typer.Exit(code=result.exit_code)


@app.command()
def verify(
    out: Annotated[Path, typer.Argument(help="Output directory holding manifest.yaml")],
):
    """Check artifact checksums against the run manifest."""
    if not (out / "manifest.yaml").exists():
        print(f"✗ No manifest.yaml in {out}")
        raise typer.Exit(code=3)
    checks = verify_manifest(out)
    failed = [c for c in checks if not c.ok]
    if failed:
        print(f"✗ Manifest check: FAILED ({len(failed)} of {len(checks)} artifacts)")
        for c in failed:
            print(f"  {c.name}: {'missing' if c.actual is None else 'checksum differs'}")
        raise typer.Exit(code=1)
    print(f"✓ Manifest check: SUCCESS ({len(checks)} artifacts)")


@app.callback(invoke_without_command=True)
def main(
    ctx: typer.Context,
    version: Annotated[
        bool,
        typer.Option("--version", "-v", help="Show version and exit"),
    ] = False,
):
    """Main entry point for the bspde-mc CLI."""
    if version:
        print(f"bspde-mc version {__version__}")
        raise typer.Exit()

    if ctx.invoked_subcommand is None:
        print("bspde-mc: backward SPDE solver")
        print("\nUse --help to see available commands")


if __name__ == "__main__":
    app()
