# src/chronoscene/main_cli.py
import json
import os
from collections.abc import Iterator
from contextlib import contextmanager
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import typer

from chronoscene.errors import ChronosceneError, UsageError
from chronoscene.utils import setup_logging

app = typer.Typer(help="Chronoscene CLI — remember places, notice what changed, say where.")
visits_app = typer.Typer(help="List, rename, delete and restore stored visits.")
app.add_typer(visits_app, name="visits")


def _pkg_version() -> str:
    try:
        return version("chronoscene")
    except PackageNotFoundError:
        return "0.0.0+local"


@contextmanager
def _errors() -> Iterator[None]:
    """Engine errors end the command with exit code 1 and the message on stderr."""
    try:
        yield
    except (ChronosceneError, FileNotFoundError) as exc:
        typer.echo(f"Error: {exc}", err=True)
        raise typer.Exit(code=1) from exc


def _config(path: Path | None):
    from chronoscene.config import load_config

    return load_config(path)


def _resolve_location(store: Path, location: str | None) -> str:
    if location:
        return location
    if not store.is_dir():
        raise FileNotFoundError(f"Store directory not found: {store}")
    found = sorted(p.name for p in store.iterdir() if (p / "esm").is_dir())
    if len(found) != 1:
        raise UsageError(f"--location is required; {store} holds {len(found)} locations")
    return found[0]


@app.callback(invoke_without_command=True)
def _root(
    ctx: typer.Context,
    version_: bool = typer.Option(
        False, "--version", "-V", is_eager=True, help="Show version and exit."
    ),
    verbose: int = typer.Option(
        0, "--verbose", "-v", count=True, help="Increase verbosity (-v, -vv)."
    ),
):
    if version_:
        typer.echo(_pkg_version())
        raise typer.Exit()

    setup_logging(verbose)

    if ctx.invoked_subcommand is None:
        typer.echo(ctx.get_help())
        raise typer.Exit()


@app.command("gen")
def cmd_gen(
    seed: int = typer.Option(7, "--seed", "-s", help="Benchmark seed."),
    out: Path = typer.Option(Path("./bench"), "--out", "-o", help="Output directory."),
    validate: bool = typer.Option(
        True, "--validate/--no-validate", help="Refuse to write a location whose scripted changes are not all observable."
    ),
    as_json: bool = typer.Option(False, "--json", help="Machine-readable output."),
):
    """Write the standard synthetic benchmark: three locations, eleven visits each."""
    from chronoscene.synth import write_benchmark

    with _errors():
        scripts = write_benchmark(seed, out, validate=validate)
    summary = [
        {"location_id": s.location_id, "kind": s.kind, "visits": s.visits, "changes": len(s.changes)}
        for s in scripts
    ]
    if as_json:
        typer.echo(json.dumps(summary, indent=2))
        return
    for row in summary:
        typer.echo(f"[ok] {row['location_id']}: {row['visits']} visits, {row['changes']} scripted changes")
    typer.echo(f"[ok] Benchmark written to: {out.resolve()}")


@app.command("replay")
def cmd_replay(
    location: Path = typer.Option(..., "--location", "-l", help="Location directory with visit_* folders."),
    store: Path = typer.Option(Path("./store"), "--store", help="Engine store directory."),
    detector: str = typer.Option("oracle", "--detector", "-d", help="'oracle' or 'extern:<url>'."),
    live: str | None = typer.Option(
        None, "--live", help="Also narrate the scene: 'script', 'depth' or 'extern:<url>'."
    ),
    out: Path | None = typer.Option(
        None, "--out", "-o", help="Where to write events/narrations/pred (default: <store>/<location_id>)."
    ),
    echo: bool = typer.Option(False, "--echo", help="Print narrations as they are delivered."),
    config: Path | None = typer.Option(None, "--config", "-c", help="TOML configuration file."),
    as_json: bool = typer.Option(False, "--json", help="Machine-readable output."),
):
    """Replay recorded visits of one location through the change pipeline."""
    from chronoscene.session import replay_location

    with _errors():
        session, summaries = replay_location(
            location,
            detector=detector,
            root=store,
            out_dir=out,
            config=_config(config),
            live=live,
            echo=echo,
        )
    if as_json:
        typer.echo(json.dumps([s.model_dump() for s in summaries], indent=2))
        return
    for s in summaries:
        typer.echo(f"[ok] {s.visit_id}: {s.records} frames kept, {s.events} events, {s.narrations} narrations")
    if not summaries:
        typer.echo(f"[ok] Nothing to replay: every visit of {session.location_id} is already stored")
    typer.echo(f"[ok] Outputs in: {session.out_dir}")


@app.command("eval")
def cmd_eval(
    pred: Path = typer.Option(..., "--pred", help="Predictions (pred.jsonl)."),
    gt: Path = typer.Option(..., "--gt", help="Ground truth (gt.jsonl)."),
    report: Path | None = typer.Option(None, "--report", "-r", help="Write the full report as JSON."),
    min_precision: float | None = typer.Option(None, "--min-precision", help="Fail below this precision."),
    min_recall: float | None = typer.Option(None, "--min-recall", help="Fail below this recall."),
    min_f1: float | None = typer.Option(None, "--min-f1", help="Fail below this F1."),
    as_json: bool = typer.Option(False, "--json", help="Machine-readable output."),
):
    """Score predictions against ground truth."""
    from chronoscene.evalbench import evaluate_files

    with _errors():
        result = evaluate_files(pred, gt)
    if report is not None:
        report.parent.mkdir(parents=True, exist_ok=True)
        report.write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")

    if as_json:
        typer.echo(result.model_dump_json(indent=2, exclude={"matches"}))
    else:
        typer.echo(f"tp={result.tp} fp={result.fp} fn={result.fn} repetitive={result.repetitive}")
        typer.echo(f"precision={result.precision:.3f} recall={result.recall:.3f} f1={result.f1:.3f}")
        typer.echo(
            f"clock error {result.clock_error_mean:.2f} h (sd {result.clock_error_sd:.2f}), "
            f"distance error {result.distance_error_mean:.2f} ft (sd {result.distance_error_sd:.2f})"
        )

    failed = [
        f"{name} {value:.3f} < {floor}"
        for name, value, floor in (
            ("precision", result.precision, min_precision),
            ("recall", result.recall, min_recall),
            ("f1", result.f1, min_f1),
        )
        if floor is not None and value < floor
    ]
    if failed:
        typer.echo("Error: " + "; ".join(failed), err=True)
        raise typer.Exit(code=1)


@app.command("bench")
def cmd_bench(
    location: Path = typer.Option(..., "--location", "-l", help="Generated location directory."),
    repeat: int = typer.Option(10, "--repeat", min=1, help="How many times to replay the visits."),
    out: Path = typer.Option(Path("./bench-out"), "--out", "-o", help="Where to write latency.csv and footprint.csv."),
    config: Path | None = typer.Option(None, "--config", "-c", help="TOML configuration file."),
    as_json: bool = typer.Option(False, "--json", help="Machine-readable output."),
):
    """Extended-use benchmark: latency and memory footprint over repeated visits."""
    from chronoscene.evalbench import bench_extended

    with _errors():
        result = bench_extended(location, repeat=repeat, out=out, config=_config(config))
    if as_json:
        typer.echo(result.model_dump_json(indent=2))
        return
    typer.echo(f"[ok] {result.location_id}: {result.visits} visits, {result.frames} frames")
    typer.echo(
        f"reference matching median: first {result.reference_median_first * 1000:.2f} ms, "
        f"last {result.reference_median_last * 1000:.2f} ms"
    )
    if result.r_squared is not None:
        typer.echo(f"OTM bytes vs snapshots R^2 = {result.r_squared:.4f}")
    typer.echo(f"[ok] CSV series in: {out.resolve()}")


@app.command("repl")
def cmd_repl(
    store: Path = typer.Option(Path("./store"), "--store", help="Engine store directory."),
    location: str | None = typer.Option(None, "--location", "-l", help="Location id inside the store."),
    config: Path | None = typer.Option(None, "--config", "-c", help="TOML configuration file."),
):
    """Ask about the scene: scene | changes [--since D] [--limit K] | where <label> | quit."""
    from chronoscene.esm import EpisodicSceneMemory
    from chronoscene.otm import ObjectTemporalMemory
    from chronoscene.qa import USAGE, QAService, parse_command

    with _errors():
        cfg = _config(config)
        location_id = _resolve_location(store, location)
        service = QAService(
            EpisodicSceneMemory.load(store, location_id, config=cfg),
            ObjectTemporalMemory.load(store, location_id),
            qa_n=cfg.qa_n,
        )
    typer.echo(f"{location_id}: {len(service.esm)} frames, {len(service.otm)} tracked objects. {USAGE}")
    while True:
        try:
            line = typer.prompt("chronoscene", prompt_suffix="> ", default="", show_default=False)
        except typer.Abort:
            break
        if not line.strip():
            continue
        try:
            command = parse_command(line)
            if command.name == "quit":
                break
            typer.echo(service.answer(command).text)
        except UsageError as exc:
            typer.echo(str(exc), err=True)


@visits_app.command("list")
def cmd_visits_list(
    store: Path = typer.Option(Path("./store"), "--store", help="Engine store directory."),
    location: str | None = typer.Option(None, "--location", "-l", help="Location id inside the store."),
    as_json: bool = typer.Option(False, "--json", help="Machine-readable output."),
):
    """List stored visits with their status and record counts."""
    from chronoscene.esm import EpisodicSceneMemory

    with _errors():
        esm = EpisodicSceneMemory.load(store, _resolve_location(store, location))
    rows = [v.summary() for v in esm.visits()]
    if as_json:
        typer.echo(json.dumps(rows, indent=2))
        return
    for row in rows:
        typer.echo(
            f"{row['visit_id']}\tindex={row['visit_index']}\t{row['status']}\t"
            f"live={row['live_records']}\tarchived={row['archived_records']}"
        )


def _visit_change(store: Path, location: str | None, action) -> None:
    from chronoscene.esm import EpisodicSceneMemory

    with _errors():
        esm = EpisodicSceneMemory.load(store, _resolve_location(store, location))
        message = action(esm)
        esm.save()
    typer.echo(f"[ok] {message}")


@visits_app.command("rename")
def cmd_visits_rename(
    old: str = typer.Argument(..., help="Current visit id."),
    new: str = typer.Argument(..., help="New visit id."),
    store: Path = typer.Option(Path("./store"), "--store", help="Engine store directory."),
    location: str | None = typer.Option(None, "--location", "-l", help="Location id inside the store."),
):
    """Rename a visit."""

    def action(esm):
        esm.rename_visit(old, new)
        return f"Renamed {old} to {new}"

    _visit_change(store, location, action)


@visits_app.command("delete")
def cmd_visits_delete(
    visit_id: str = typer.Argument(..., help="Visit id to delete."),
    store: Path = typer.Option(Path("./store"), "--store", help="Engine store directory."),
    location: str | None = typer.Option(None, "--location", "-l", help="Location id inside the store."),
):
    """Delete a visit and its frames, live or archived."""

    def action(esm):
        esm.delete_visit(visit_id)
        return f"Deleted {visit_id}"

    _visit_change(store, location, action)


@visits_app.command("restore")
def cmd_visits_restore(
    visit_id: str = typer.Argument(..., help="Archived visit id to bring back."),
    store: Path = typer.Option(Path("./store"), "--store", help="Engine store directory."),
    location: str | None = typer.Option(None, "--location", "-l", help="Location id inside the store."),
):
    """Restore an archived visit into the queryable window."""

    def action(esm):
        count = esm.restore_visit(visit_id)
        return f"Restored {count} frames of {visit_id}"

    _visit_change(store, location, action)


@app.command("serve")
def cmd_serve(
    store: Path = typer.Option(Path("./store"), "--store", help="Engine store directory."),
    location: str | None = typer.Option(None, "--location", "-l", help="Location id inside the store."),
    host: str = typer.Option("0.0.0.0", "--host", help="Host to bind the server to."),  # noqa: S104
    port: int = typer.Option(8000, "--port", "-p", help="Port to run the server on."),
):
    """Start the HTTP query server over a store."""
    import uvicorn

    from chronoscene.api_server import LOCATION_ENV_VAR, STORE_ENV_VAR

    if not store.is_dir():
        typer.echo(f"Error: Store directory not found: {store}", err=True)
        raise typer.Exit(code=1)

    # the app resolves its store per request from the environment
    os.environ[STORE_ENV_VAR] = str(store.absolute())
    if location:
        os.environ[LOCATION_ENV_VAR] = location

    typer.echo(f"Serving {store} at http://{host}:{port}")
    uvicorn.run("chronoscene.api_server:app", host=host, port=port)


def main() -> None:
    app()
