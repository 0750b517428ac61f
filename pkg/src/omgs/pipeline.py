"""Command implementations: ingest, structure, run, audit, score, stats, usage.

Each command reads files and writes files; the CLI and the HTTP service are
thin wrappers over these functions.

Run directory layout (``<out>/<run_id>/``)::

    manifest.json          RunManifest; timestamps live under "volatile"
    config.json            the deliberation config, canonical bytes hashed into config_hash
    structured_case.json   the case the agents saw
    transcript.jsonl       hash-chained messages, one per line
    summary.json           the accepted DecisionSummary (absent on failure)
    summary.md             human-readable rendering of summary.json
    audit_worksheet.csv    one blank reviewer row per summary citation (absent on failure)
    usage.json             per-call token/latency ledger
    failure.json           machine-readable failure record (only on failure)
"""

from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any

from .backends import AgentBackend, backend_from_spec
from .canonical import canonical_bytes, content_hash, dump_pretty, sha256_hex
from .case_schema import (
    CasePacketError,
    StructuredCase,
    load_case_packet,
    load_structured_case,
    structure_case,
    validate_case,
    write_structured_case,
)
from .citation_audit import (
    AuditRecord,
    audit_case,
    audit_frequency_report,
    audit_worksheet_csv,
    claims_to_audit,
    format_percentages,
    read_audit_table,
)
from .deliberation import (
    CaseFailure,
    DeliberationConfig,
    Mode,
    UsageLedger,
    run_case,
    validate_decision_summary,
)
from .evidence_bank import (
    CHUNK_OVERLAP,
    CHUNK_SIZE,
    DEFAULT_DIMENSION,
    CorpusSnapshot,
    TokenHashEmbedder,
    dedup_normalize,
    embed_entries,
    freeze_snapshot,
    ingest_corpus,
    load_snapshot,
    save_snapshot,
)
from .role_scoping import DEFAULT_ACCESS_MATRIX, AccessMatrix, load_access_matrix
from .spear import (
    DIMENSIONS,
    SpearScore,
    median_scores,
    panels_from_rows,
    read_score_table,
    score_case_table,
    stratified_summary,
)
from .stats import (
    PairedSample,
    benjamini_hochberg,
    bonferroni,
    median_iqr,
    tost_equivalence,
    wilcoxon_signed_rank,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID_SUMMARY = 1
EXIT_CASE_FAILURE = 2


class PipelineError(RuntimeError):
    """A command stage failed; ``stage`` names it."""

    def __init__(self, stage: str, reason: str) -> None:
        super().__init__(f"stage {stage} failed: {reason}")
        self.stage = stage
        self.reason = reason


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load_json_config(config: Mapping[str, Any] | str | Path | None) -> dict[str, Any]:
    if config is None:
        return {}
    if isinstance(config, Mapping):
        return dict(config)
    try:
        return json.loads(Path(config).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise PipelineError("config", f"cannot read {config}: {exc}") from exc


# --------------------------------------------------------------------------
# ingest


def cmd_ingest(
    corpus: Sequence[str | Path],
    out_dir: str | Path,
    phase_label: str = "default",
    dimension: int = DEFAULT_DIMENSION,
    chunk_size: int = CHUNK_SIZE,
    chunk_overlap: int = CHUNK_OVERLAP,
) -> CorpusSnapshot:
    """ingest -> dedup/chunk -> embed -> freeze -> save; any failure names its stage."""
    if not corpus:
        raise PipelineError("ingest", "no corpus files given")
    try:
        records = ingest_corpus(corpus)
    except Exception as exc:
        raise PipelineError("ingest", str(exc)) from exc
    try:
        entries = dedup_normalize(records, chunk_size, chunk_overlap)
    except Exception as exc:
        raise PipelineError("chunk", str(exc)) from exc
    embedder = TokenHashEmbedder(dimension)
    try:
        entries = embed_entries(entries, embedder)
    except Exception as exc:
        raise PipelineError("embed", str(exc)) from exc
    try:
        snap = freeze_snapshot(entries, embedder.embedder_id, phase_label, dimension)
    except Exception as exc:
        raise PipelineError("freeze", str(exc)) from exc
    try:
        save_snapshot(snap, out_dir)
    except OSError as exc:
        raise PipelineError("save", str(exc)) from exc
    logger.info("froze %d entries as %s", len(snap), snap.snapshot_id)
    return snap


def cmd_ingest_config(config: Mapping[str, Any] | str | Path) -> CorpusSnapshot:
    """Config keys: corpus (list of paths), out, phase_label, dimension, chunk_size, chunk_overlap."""
    cfg = _load_json_config(config)
    base = Path(config).parent if isinstance(config, (str, Path)) else Path(".")
    try:
        corpus = [base / p for p in cfg["corpus"]]
        out = base / cfg["out"]
    except KeyError as exc:
        raise PipelineError("config", f"missing key {exc}") from exc
    return cmd_ingest(
        corpus,
        out,
        cfg.get("phase_label", "default"),
        int(cfg.get("dimension", DEFAULT_DIMENSION)),
        int(cfg.get("chunk_size", CHUNK_SIZE)),
        int(cfg.get("chunk_overlap", CHUNK_OVERLAP)),
    )


# --------------------------------------------------------------------------
# structure


def cmd_structure(case_dir: str | Path, backend: AgentBackend | str, out: str | Path | None = None) -> StructuredCase:
    """Structure a case packet and write ``structured_case.json`` (into the packet by default)."""
    backend = backend_from_spec(backend) if isinstance(backend, str) else backend
    try:
        record = load_case_packet(case_dir)
    except CasePacketError as exc:
        raise PipelineError("load_case", str(exc)) from exc
    case, failures = structure_case(record, backend)
    for f in failures:
        logger.warning("extraction failed for %s: %s", f.doc_id, f.reason)
    problems = validate_case(case)
    if problems:
        raise PipelineError("structure", "; ".join(problems))
    write_structured_case(case, out or Path(case_dir) / "structured_case.json")
    return case


def _case_from_dir(case_dir: Path, backend: AgentBackend) -> StructuredCase:
    try:
        record = load_case_packet(case_dir)
    except CasePacketError as exc:
        raise PipelineError("load_case", str(exc)) from exc
    pre = case_dir / "structured_case.json"
    if pre.exists():
        return load_structured_case(pre, record)
    case, failures = structure_case(record, backend)
    for f in failures:
        logger.warning("extraction failed for %s: %s", f.doc_id, f.reason)
    return case


# --------------------------------------------------------------------------
# run


@dataclass
class RunManifest:
    run_id: str
    case_id: str
    snapshot_id: str
    backend_id: str
    config_hash: str
    mode: str
    seeds: dict[str, int]
    status: str
    dossier_included: bool
    transcript_head: str
    usage: dict[str, int]
    artifacts: dict[str, str] = field(default_factory=dict)
    volatile: dict[str, str] = field(default_factory=dict)

    def stable_dict(self) -> dict[str, Any]:
        """Everything except wall-clock fields; identical across reruns."""
        return {
            "run_id": self.run_id,
            "case_id": self.case_id,
            "snapshot_id": self.snapshot_id,
            "backend_id": self.backend_id,
            "config_hash": self.config_hash,
            "mode": self.mode,
            "seeds": dict(self.seeds),
            "status": self.status,
            "dossier_included": self.dossier_included,
            "transcript_head": self.transcript_head,
            "usage": dict(self.usage),
            "artifacts": dict(sorted(self.artifacts.items())),
        }

    def to_dict(self) -> dict[str, Any]:
        return self.stable_dict() | {"volatile": dict(self.volatile)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunManifest:
        return cls(
            run_id=d["run_id"],
            case_id=d["case_id"],
            snapshot_id=d["snapshot_id"],
            backend_id=d["backend_id"],
            config_hash=d["config_hash"],
            mode=d["mode"],
            seeds=dict(d.get("seeds", {})),
            status=d["status"],
            dossier_included=bool(d.get("dossier_included", False)),
            transcript_head=d.get("transcript_head", ""),
            usage=dict(d.get("usage", {})),
            artifacts=dict(d.get("artifacts", {})),
            volatile=dict(d.get("volatile", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        return cls.from_dict(json.loads(p.read_text(encoding="utf-8")))


@dataclass(frozen=True)
class RunOutcome:
    exit_code: int
    run_dir: Path
    manifest: RunManifest


def make_run_id(case_id: str, snapshot_id: str, backend_id: str, config_hash: str, seed: int) -> str:
    return "run-" + content_hash(
        {"case_id": case_id, "snapshot_id": snapshot_id, "backend_id": backend_id, "config_hash": config_hash, "seed": seed}
    )[:16]


def load_run_config(config: Mapping[str, Any] | str | Path | None, mode: Mode | str | None) -> DeliberationConfig:
    """Deliberation config from a file or dict; ``mode`` overrides the file's mode."""
    cfg = _load_json_config(config)
    cfg = cfg.get("deliberation", cfg)
    if mode is not None:
        cfg = dict(cfg) | {"mode": Mode(mode).value}
    try:
        return DeliberationConfig.from_dict(cfg)
    except (KeyError, ValueError, TypeError) as exc:
        raise PipelineError("config", str(exc)) from exc


def cmd_run(
    case_dir: str | Path,
    snapshot: CorpusSnapshot | str | Path,
    backend: AgentBackend | str,
    mode: Mode | str | None = None,
    out_dir: str | Path = "runs",
    config: Mapping[str, Any] | str | Path | None = None,
    seed: int = 0,
    matrix: AccessMatrix | str | Path | None = None,
) -> RunOutcome:
    """Run one case end to end and persist every artifact of the run.

    Exit code 0 iff the persisted DecisionSummary passes validation; a failed
    case writes ``failure.json`` and exits nonzero.
    """
    snap = snapshot if isinstance(snapshot, CorpusSnapshot) else load_snapshot(snapshot)
    backend = backend_from_spec(backend) if isinstance(backend, str) else backend
    access = matrix if isinstance(matrix, AccessMatrix) else (load_access_matrix(matrix) if matrix else DEFAULT_ACCESS_MATRIX)
    cfg = load_run_config(config, mode)
    started = _utc_now()
    case = _case_from_dir(Path(case_dir), backend)

    cfg_bytes = canonical_bytes(cfg.to_dict())
    config_hash = sha256_hex(cfg_bytes)
    run_id = make_run_id(case.case_id, snap.snapshot_id, backend.backend_id, config_hash, seed)
    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("summary.json", "summary.md", "audit_worksheet.csv", "failure.json"):
        (run_dir / stale).unlink(missing_ok=True)

    artifacts: dict[str, bytes] = {
        "config.json": cfg_bytes,
        "structured_case.json": dump_pretty(case.to_dict()).encode("utf-8"),
    }
    summary_violations: list[str] = []
    try:
        result = run_case(case, snap, backend, cfg, access)
        transcript, ledger = result.transcript, result.ledger
        violations = validate_decision_summary(result.summary, snap, case, cfg.template)
        summary_violations = [str(v) for v in violations]
        artifacts["summary.json"] = dump_pretty(result.summary.to_dict() | {"run_id": run_id}).encode("utf-8")
        artifacts["summary.md"] = result.summary.render_markdown(cfg.template).encode("utf-8")
        worksheet = audit_worksheet_csv(case.case_id, claims_to_audit(result.summary), arm=cfg.mode.value)
        artifacts["audit_worksheet.csv"] = worksheet.encode("utf-8")
        status = "ok" if not violations else "invalid_summary"
        exit_code = EXIT_OK if not violations else EXIT_INVALID_SUMMARY
    except CaseFailure as exc:
        transcript, ledger = exc.transcript, exc.ledger
        artifacts["failure.json"] = dump_pretty(exc.to_dict() | {"run_id": run_id}).encode("utf-8")
        status = "failed"
        exit_code = EXIT_CASE_FAILURE
    if summary_violations:
        artifacts["failure.json"] = dump_pretty(
            {"status": "invalid_summary", "stage": "validate_summary", "violations": summary_violations, "run_id": run_id}
        ).encode("utf-8")

    artifacts["transcript.jsonl"] = transcript.to_jsonl().encode("utf-8")
    artifacts["usage.json"] = dump_pretty(_usage_doc(ledger, run_id, case.case_id)).encode("utf-8")
    for name, data in artifacts.items():
        (run_dir / name).write_bytes(data)

    manifest = RunManifest(
        run_id=run_id,
        case_id=case.case_id,
        snapshot_id=snap.snapshot_id,
        backend_id=backend.backend_id,
        config_hash=config_hash,
        mode=cfg.mode.value,
        seeds={"run": seed},
        status=status,
        dossier_included=cfg.mode is Mode.CHAIR_D,
        transcript_head=transcript.head,
        usage=ledger.totals(),
        artifacts={name: sha256_hex(data) for name, data in artifacts.items()},
        volatile={"started_at": started, "finished_at": _utc_now()},
    )
    (run_dir / "manifest.json").write_text(dump_pretty(manifest.to_dict()), encoding="utf-8")
    return RunOutcome(exit_code, run_dir, manifest)


def _usage_doc(ledger: UsageLedger, run_id: str, case_id: str) -> dict[str, Any]:
    return {"run_id": run_id, "case_id": case_id} | ledger.to_dict()


# --------------------------------------------------------------------------
# audit / score / stats


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Mapping[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in header})


def initial_e_from_scores(score_csv: str | Path) -> dict[tuple[str, str], int]:
    """Median panel Evidence score per (case_id, arm), before any cap."""
    return {key: median_scores(panel).E for key, (_, panel) in panels_from_rows(read_score_table(score_csv)).items()}


def cmd_audit(
    audit_csv: str | Path,
    initial_e: Mapping[tuple[str, str], int] | str | Path,
    out_dir: str | Path,
) -> list[AuditRecord]:
    """Adjudicate claim-level verdicts and cap E.

    ``initial_e`` is a mapping or a score CSV (panel medians are used).
    Writes ``audit.json`` (records and frequency report) and ``capped_e.csv``.
    """
    e0 = initial_e if isinstance(initial_e, Mapping) else initial_e_from_scores(initial_e)
    claims = read_audit_table(audit_csv)
    records = []
    for key in sorted(set(e0) | set(claims)):
        if key not in e0:
            raise PipelineError("audit", f"no initial E for case {key[0]} arm {key[1]!r}")
        records.append(audit_case(key[0], e0[key], claims.get(key, []), arm=key[1]))
    report = audit_frequency_report(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "audit.json").write_text(
        dump_pretty(
            {
                "records": [r.to_dict() for r in records],
                "frequency": {cls.value: f"{frac.numerator}/{frac.denominator}" for cls, frac in report.items()},
                "percentages": format_percentages(report),
            }
        ),
        encoding="utf-8",
    )
    _write_csv(
        out / "capped_e.csv",
        ("case_id", "arm", "initial_E", "capped_E", "cap_class"),
        [
            {"case_id": r.case_id, "arm": r.arm, "initial_E": r.initial_e, "capped_E": r.capped_e, "cap_class": r.cap_class.value}
            for r in records
        ],
    )
    return records


def read_capped_e(path: str | Path) -> dict[tuple[str, str], int]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {(r["case_id"], r["arm"]): int(r["capped_E"]) for r in csv.DictReader(fh)}


SCORED_COLUMNS = ("case_id", "scene", "arm", "raters", *DIMENSIONS, "E_initial", "overall_raw", "overall_gated", "gate_applied")


def cmd_score(score_csv: str | Path, out_dir: str | Path, capped_e: str | Path | None = None) -> list[dict[str, Any]]:
    """Median panel scores with post-audit E, then the safety gate, then strata.

    Writes ``scores.csv`` (one row per case and arm) and ``strata.json``.
    """
    rows = read_score_table(score_csv)
    caps = read_capped_e(capped_e) if capped_e else None
    scored = score_case_table(rows, caps)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "scores.csv", SCORED_COLUMNS, scored)
    strata = stratified_summary(
        (r["scene"], r["arm"], SpearScore(**{d: r[d] for d in DIMENSIONS})) for r in scored
    )
    (out / "strata.json").write_text(
        dump_pretty(
            [
                {"scene": scene, "arm": arm, "dimension": dim, "n": s.n, "mean": s.mean, "sd": s.sd}
                for (scene, arm, dim), s in strata.items()
            ]
        ),
        encoding="utf-8",
    )
    return scored


def _read_metric(path: str | Path, metric: str) -> list[dict[str, Any]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in ("case_id", "arm", metric):
            if col not in (reader.fieldnames or ()):
                raise PipelineError("stats", f"column {col} missing from {path}")
        out = []
        for i, r in enumerate(reader, start=2):
            try:
                value = float(Fraction(r[metric]))
            except (ValueError, ZeroDivisionError):
                raise PipelineError("stats", f"row {i}, column {metric}: not a number: {r[metric]!r}") from None
            out.append({"case_id": r["case_id"], "scene": r.get("scene", ""), "arm": r["arm"], "value": value})
    return out


def cmd_stats(
    scored_csv: str | Path,
    arm_a: str,
    arm_b: str,
    out_dir: str | Path,
    metric: str = "overall_gated",
    wilcoxon_mode: str = "auto",
    margin: float = 0.5,
) -> dict[str, Any]:
    """Paired arm comparison per scene and pooled.

    Per scene: two-sided Wilcoxon signed-rank, Bonferroni across scenes and
    BH. Pooled: Wilcoxon and TOST equivalence with the given margin.
    Cases are paired on case_id. Writes ``stats.json``.
    """
    rows = _read_metric(scored_csv, metric)
    by_case: dict[str, dict[str, Any]] = defaultdict(dict)
    for r in rows:
        by_case[r["case_id"]]["scene"] = r["scene"]
        by_case[r["case_id"]][r["arm"]] = r["value"]
    paired = {cid: v for cid, v in sorted(by_case.items()) if arm_a in v and arm_b in v}
    if not paired:
        raise PipelineError("stats", f"no cases scored in both arms {arm_a!r} and {arm_b!r}")

    def sample(ids: Sequence[str]) -> PairedSample:
        return PairedSample(tuple((paired[c][arm_a], paired[c][arm_b]) for c in ids), tuple(ids))

    scenes: dict[str, list[str]] = defaultdict(list)
    for cid, v in paired.items():
        scenes[v["scene"]].append(cid)
    per_scene = []
    for scene in sorted(scenes):
        s = sample(scenes[scene])
        row: dict[str, Any] = {"scene": scene, "n_pairs": len(s.pairs)}
        try:
            row |= wilcoxon_signed_rank(s, wilcoxon_mode).to_dict()
        except ValueError as exc:
            row |= {"p_value": 1.0, "method": "degenerate", "note": str(exc)}
        per_scene.append(row)
    ps = [r["p_value"] for r in per_scene]
    for r, pb, padj, rej in zip(per_scene, bonferroni(ps), benjamini_hochberg(ps).adjusted, benjamini_hochberg(ps).rejected):
        r |= {"p_bonferroni": pb, "p_bh": padj, "bh_rejected": rej}

    pooled_sample = sample(list(paired))
    pooled: dict[str, Any] = {"n_pairs": len(pooled_sample.pairs)}
    try:
        pooled["wilcoxon"] = wilcoxon_signed_rank(pooled_sample, wilcoxon_mode).to_dict()
    except ValueError as exc:
        pooled["wilcoxon"] = {"p_value": 1.0, "method": "degenerate", "note": str(exc)}
    diffs = pooled_sample.differences()
    if len(diffs) >= 2 or (diffs and diffs[0] == 0):
        pooled["tost"] = tost_equivalence(diffs, margin).to_dict()
    report = {"metric": metric, "arm_a": arm_a, "arm_b": arm_b, "per_scene": per_scene, "pooled": pooled}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(dump_pretty(report), encoding="utf-8")
    return report


# --------------------------------------------------------------------------
# usage


def cmd_usage_summary(manifests: Sequence[str | Path | RunManifest]) -> dict[str, Any]:
    """Median and IQR of total tokens and wall time per case across runs.

    Both renderings are reported: bracket (``median [q1;q3]``) and width
    (``median (IQR, q3-q1)``).
    """
    loaded = [m if isinstance(m, RunManifest) else RunManifest.load(m) for m in manifests]
    if not loaded:
        raise PipelineError("usage", "no run manifests given")
    tokens = [m.usage.get("total_tokens", 0) for m in loaded]
    wall_s = [m.usage.get("wall_ms", 0) / 1000 for m in loaded]
    out: dict[str, Any] = {"runs": len(loaded)}
    for name, values, digits in (("total_tokens", tokens, 0), ("wall_s", wall_s, 1)):
        s = median_iqr(values)
        out[name] = s.to_dict() | {
            "bracket": s.format("bracket", digits=digits, thousands=digits == 0),
            "width": s.format("width", digits=digits, thousands=digits == 0),
        }
    return out


def find_manifests(paths: Sequence[str | Path]) -> list[Path]:
    """Expand run directories / parents of run directories into manifest paths."""
    found: list[Path] = []
    for p in map(Path, paths):
        if p.is_file():
            found.append(p)
        elif (p / "manifest.json").is_file():
            found.append(p / "manifest.json")
        elif p.is_dir():
            found.extend(sorted(p.glob("*/manifest.json")))
    return found
