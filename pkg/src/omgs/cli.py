"""``omgs`` command line."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Any

import click

from . import pipeline
from .deliberation import Mode
from .role_scoping import export_default_matrix

EXIT_PIPELINE_ERROR = 3
MODES = [m.value for m in Mode]


def _emit(obj: Any) -> None:
    click.echo(json.dumps(obj, indent=2, ensure_ascii=False, default=str))


def _fail(exc: Exception) -> None:
    stage = getattr(exc, "stage", None)
    _emit({"status": "error", "stage": stage, "error": str(exc)})
    sys.exit(EXIT_PIPELINE_ERROR)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Multi-agent tumour-board pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("corpus", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), help="JSON ingest config.")
@click.option("--out", type=click.Path(file_okay=False), help="Snapshot directory to write.")
@click.option("--phase", "phase_label", default="default", show_default=True)
@click.option("--dimension", default=256, show_default=True)
def ingest(corpus: tuple[str, ...], config: str | None, out: str | None, phase_label: str, dimension: int) -> None:
    """Freeze JSONL corpus files into a snapshot directory."""
    try:
        if config:
            snap = pipeline.cmd_ingest_config(config)
        else:
            if not out:
                raise click.UsageError("--out is required without --config")
            snap = pipeline.cmd_ingest(list(corpus), out, phase_label, dimension)
    except pipeline.PipelineError as exc:
        _fail(exc)
    _emit({"status": "ok", "snapshot_id": snap.snapshot_id, "entries": len(snap)})


@main.command()
@click.argument("case_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--backend", required=True, help="scripted:<file> or http:<url>")
@click.option("--out", type=click.Path(dir_okay=False), help="Defaults to <case_dir>/structured_case.json")
def structure(case_dir: str, backend: str, out: str | None) -> None:
    """Extract and merge a case packet into structured_case.json."""
    try:
        case = pipeline.cmd_structure(case_dir, backend, out)
    except pipeline.PipelineError as exc:
        _fail(exc)
    _emit({"status": "ok", "case_id": case.case_id, "scene": case.scene.id if case.scene else None})


@main.command()
@click.argument("case_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--snapshot", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--backend", required=True, help="scripted:<file> or http:<url>")
@click.option("--mode", type=click.Choice(MODES), default=None, help="Overrides the config's mode (default omgs).")
@click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), help="Deliberation config JSON.")
@click.option("--access-matrix", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", default=0, show_default=True, help="Recorded in the manifest and the run id.")
@click.option("--out", default="runs", show_default=True, type=click.Path(file_okay=False))
def run(
    case_dirs: tuple[str, ...],
    snapshot: str,
    backend: str,
    mode: str | None,
    config: str | None,
    access_matrix: str | None,
    seed: int,
    out: str,
) -> None:
    """Deliberate one or more cases; exit 0 iff every summary validates."""
    worst = 0
    results = []
    for case_dir in case_dirs:
        try:
            outcome = pipeline.cmd_run(case_dir, snapshot, backend, mode, out, config, seed, access_matrix)
        except pipeline.PipelineError as exc:
            _fail(exc)
        worst = max(worst, outcome.exit_code)
        results.append({"case_id": outcome.manifest.case_id, "run_dir": str(outcome.run_dir), "status": outcome.manifest.status})
    _emit(results)
    sys.exit(worst)


@main.command()
@click.argument("audit_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--scores", required=True, type=click.Path(exists=True, dir_okay=False), help="Score CSV giving the initial E.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def audit(audit_csv: str, scores: str, out: str) -> None:
    """Adjudicate citation verdicts and cap Evidence scores."""
    try:
        records = pipeline.cmd_audit(audit_csv, scores, out)
    except (pipeline.PipelineError, ValueError) as exc:
        _fail(exc)
    report = json.loads((Path(out) / "audit.json").read_text(encoding="utf-8"))
    _emit({"status": "ok", "records": len(records), "percentages": report["percentages"]})


@main.command()
@click.argument("score_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--capped-e", type=click.Path(exists=True, dir_okay=False), help="capped_e.csv from 'omgs audit'.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def score(score_csv: str, capped_e: str | None, out: str) -> None:
    """Median panel scores, post-audit E and the safety-gated overall."""
    try:
        rows = pipeline.cmd_score(score_csv, out, capped_e)
    except (pipeline.PipelineError, ValueError) as exc:
        _fail(exc)
    _emit({"status": "ok", "rows": len(rows)})


@main.command()
@click.argument("scored_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--arm-a", required=True)
@click.option("--arm-b", required=True)
@click.option("--metric", default="overall_gated", show_default=True)
@click.option("--wilcoxon", "wilcoxon_mode", type=click.Choice(["auto", "exact", "approx"]), default="auto", show_default=True)
@click.option("--margin", default=0.5, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def stats(scored_csv: str, arm_a: str, arm_b: str, metric: str, wilcoxon_mode: str, margin: float, out: str) -> None:
    """Paired arm comparison: Wilcoxon per scene with corrections, pooled TOST."""
    try:
        report = pipeline.cmd_stats(scored_csv, arm_a, arm_b, out, metric, wilcoxon_mode, margin)
    except (pipeline.PipelineError, ValueError) as exc:
        _fail(exc)
    _emit(report)


@main.command()
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True))
def usage(paths: tuple[str, ...]) -> None:
    """Median and IQR of tokens and wall time over run manifests or run directories."""
    try:
        report = pipeline.cmd_usage_summary(pipeline.find_manifests(paths))
    except pipeline.PipelineError as exc:
        _fail(exc)
    _emit(report)


@main.command("access-matrix")
@click.argument("path", type=click.Path(dir_okay=False))
def access_matrix_cmd(path: str) -> None:
    """Write the default role access matrix as editable JSON."""
    export_default_matrix(path)
    _emit({"status": "ok", "path": path})


@main.command()
@click.argument("root", type=click.Path(file_okay=False))
def synth(root: str) -> None:
    """Write the synthetic corpus, 20 case packets and a scripted replay file."""
    from .synthetic import write_fixture_workspace

    paths = write_fixture_workspace(root)
    _emit({k: str(v) for k, v in paths.items()})


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--replay", type=click.Path(exists=True, dir_okay=False), help="Serve /generate from this replay file.")
def serve(host: str, port: int, replay: str | None) -> None:
    """HTTP service exposing each command as a route."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(replay), host=host, port=port)


if __name__ == "__main__":  # pragma: no cover
    main()
