"""HTTP surface: one POST route per command plus ``/generate`` for agent calls.

Routes take the same arguments as the CLI (file paths on the server side) and
return the same JSON artifacts. No authentication: run it on a trusted host.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from fastapi import Body, FastAPI, HTTPException

from . import pipeline
from .backends import BackendError, GenerationRequest, ScriptedBackend


def _bad(exc: Exception) -> HTTPException:
    return HTTPException(status_code=422, detail={"stage": getattr(exc, "stage", None), "error": str(exc)})


def _need(body: dict[str, Any], *keys: str) -> list[Any]:
    missing = [k for k in keys if k not in body]
    if missing:
        raise HTTPException(status_code=422, detail={"error": f"missing fields: {missing}"})
    return [body[k] for k in keys]


def create_app(replay: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="omgs")
    scripted = ScriptedBackend.from_file(replay) if replay else None

    @app.post("/generate")
    def generate(body: dict[str, Any] = Body(...)) -> dict[str, Any]:
        if scripted is None:
            raise HTTPException(status_code=503, detail={"error": "no replay file loaded"})
        try:
            result = scripted.generate(GenerationRequest.from_wire(body))
        except (KeyError, TypeError) as exc:
            raise HTTPException(status_code=400, detail={"error": f"bad request: {exc}"}) from exc
        except BackendError as exc:
            raise HTTPException(status_code=404, detail={"error": str(exc)}) from exc
        return {"message": result.message, "usage": result.usage.to_dict()}

    @app.post("/ingest")
    def ingest(body: dict[str, Any] = Body(...)) -> dict[str, Any]:
        corpus, out = _need(body, "corpus", "out")
        try:
            snap = pipeline.cmd_ingest(corpus, out, body.get("phase_label", "default"), int(body.get("dimension", 256)))
        except pipeline.PipelineError as exc:
            raise _bad(exc) from exc
        return json.loads((Path(out) / "manifest.json").read_text(encoding="utf-8")) | {"entries": len(snap)}

    @app.post("/run")
    def run(body: dict[str, Any] = Body(...)) -> dict[str, Any]:
        case_dir, snapshot, backend = _need(body, "case_dir", "snapshot", "backend")
        try:
            outcome = pipeline.cmd_run(
                case_dir,
                snapshot,
                backend,
                body.get("mode"),
                body.get("out", "runs"),
                body.get("config"),
                int(body.get("seed", 0)),
                body.get("access_matrix"),
            )
        except (pipeline.PipelineError, ValueError) as exc:
            raise _bad(exc) from exc
        response: dict[str, Any] = {"exit_code": outcome.exit_code, "manifest": outcome.manifest.to_dict()}
        for name in ("summary.json", "failure.json"):
            path = outcome.run_dir / name
            if path.exists():
                response[name.removesuffix(".json")] = json.loads(path.read_text(encoding="utf-8"))
        return response

    @app.post("/audit")
    def audit(body: dict[str, Any] = Body(...)) -> dict[str, Any]:
        audit_csv, scores, out = _need(body, "audit_csv", "scores", "out")
        try:
            pipeline.cmd_audit(audit_csv, scores, out)
        except (pipeline.PipelineError, ValueError) as exc:
            raise _bad(exc) from exc
        return json.loads((Path(out) / "audit.json").read_text(encoding="utf-8"))

    @app.post("/score")
    def score(body: dict[str, Any] = Body(...)) -> dict[str, Any]:
        score_csv, out = _need(body, "score_csv", "out")
        try:
            rows = pipeline.cmd_score(score_csv, out, body.get("capped_e"))
        except (pipeline.PipelineError, ValueError) as exc:
            raise _bad(exc) from exc
        return {"rows": rows}

    @app.post("/stats")
    def stats(body: dict[str, Any] = Body(...)) -> dict[str, Any]:
        scored_csv, arm_a, arm_b, out = _need(body, "scored_csv", "arm_a", "arm_b", "out")
        try:
            return pipeline.cmd_stats(
                scored_csv,
                arm_a,
                arm_b,
                out,
                body.get("metric", "overall_gated"),
                body.get("wilcoxon_mode", "auto"),
                float(body.get("margin", 0.5)),
            )
        except (pipeline.PipelineError, ValueError) as exc:
            raise _bad(exc) from exc

    @app.post("/usage")
    def usage(body: dict[str, Any] = Body(...)) -> dict[str, Any]:
        (paths,) = _need(body, "paths")
        try:
            return pipeline.cmd_usage_summary(pipeline.find_manifests(paths))
        except pipeline.PipelineError as exc:
            raise _bad(exc) from exc

    return app
