"""Synthetic fixtures: a small evidence corpus, 20 de-identified-style cases
across all five scenes, and deterministic offline agents.

Nothing here is clinical data. The cases are written so that every scene
rule, the precedence merge (including one stage conflict per scene) and the
index-date cutoff get exercised; the agent policy is a plain rule table so
runs are reproducible without a model server.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Any

from .backends import FunctionBackend, GenerationRequest, RecordingBackend, Usage, estimate_usage
from .case_schema import (
    DocType,
    RawCaseRecord,
    SourceDocument,
    StructuredCase,
    structure_case,
    write_case_packet,
    write_structured_case,
)
from .deliberation import INITIAL_SCHEMA, SUMMARY_SCHEMA, TURN_SCHEMA, DeliberationConfig, Mode, run_case
from .evidence_bank import (
    CorpusSnapshot,
    RawEvidenceRecord,
    Stream,
    TokenHashEmbedder,
    build_snapshot_from_records,
    ingest_corpus,
)

FIXTURE_PHASE = "fixture"
HALLUCINATED_ID = "EB-00000000deadbeef"

# --------------------------------------------------------------------------
# evidence corpus

_TOPICS: tuple[tuple[str, str], ...] = (
    ("primary debulking surgery", "complete cytoreduction to no residual disease in advanced epithelial ovarian carcinoma"),
    ("neoadjuvant chemotherapy and interval debulking", "carboplatin paclitaxel for three cycles before interval cytoreduction when primary resection is not feasible"),
    ("PARP inhibitor maintenance", "olaparib or niraparib maintenance after response to first-line platinum in BRCA mutated or HRD positive disease"),
    ("bevacizumab maintenance", "bevacizumab added to chemotherapy and continued as maintenance in high risk stage III or IV disease"),
    ("platinum-resistant relapse", "single-agent non-platinum chemotherapy such as weekly paclitaxel or pegylated liposomal doxorubicin with bevacizumab"),
    ("platinum-sensitive relapse", "platinum doublet rechallenge followed by PARP inhibitor maintenance and consideration of secondary cytoreduction"),
    ("secondary cytoreduction", "AGO score positive patients with platinum-sensitive relapse benefit from complete secondary cytoreduction"),
    ("germ cell tumour", "fertility-sparing surgery and BEP chemotherapy for malignant ovarian germ cell tumour with AFP and beta-hCG monitoring"),
    ("sex cord-stromal tumour", "granulosa cell tumour managed by surgical staging with inhibin surveillance and platinum chemotherapy for advanced disease"),
    ("borderline epithelial tumour", "borderline ovarian tumour treated with surgery alone and fertility preservation where appropriate"),
    ("ovarian sarcoma and rare aggressive histology", "carcinosarcoma and other rare aggressive ovarian malignancy managed with platinum-based regimens and early referral"),
    ("neuroendocrine neoplasm of the ovary", "small cell carcinoma of the ovary hypercalcaemic type treated with multimodal intensive therapy"),
    ("PET/CT restaging", "FDG PET/CT for suspected recurrence with rising CA-125 and equivocal CT findings, metabolic response assessment"),
    ("CT response assessment", "contrast CT staging and RECIST response assessment, peritoneal carcinomatosis index and ascites"),
    ("BRCA and HRD testing", "germline and somatic BRCA1 BRCA2 testing and homologous recombination deficiency assays at diagnosis"),
    ("immunohistochemistry panels", "WT1 PAX8 p53 immunohistochemistry to classify high-grade serous carcinoma and distinguish metastases"),
    ("CA-125 surveillance", "serial CA-125 and HE4 tumour markers for surveillance and response, GCIG CA-125 criteria"),
    ("bowel obstruction and acute events", "malignant bowel obstruction, venous thromboembolism and acute events needing urgent multidisciplinary reassessment"),
    ("toxicity-driven treatment change", "grade 3 or 4 toxicity, neuropathy and haematological toxicity leading to dose reduction or regimen change"),
    ("elderly and frail patients", "geriatric assessment and dose-adapted chemotherapy for elderly or frail patients with ovarian cancer"),
)

_LIT_DESIGNS = (
    "Phase III randomized trial",
    "Systematic review and meta-analysis",
    "Prospective cohort study",
    "Meta-analysis of individual patient data",
    "Retrospective cohort study",
)


def synthetic_corpus_records() -> list[dict[str, Any]]:
    """40 JSONL-ready records: one guideline and one literature record per topic."""
    out: list[dict[str, Any]] = []
    for i, (topic, detail) in enumerate(_TOPICS):
        guideline_text = (
            f"Recommendation on {topic}. In ovarian tumour care, {detail}. "
            f"Multidisciplinary tumour board review is recommended before treatment decisions on {topic}. "
            "Decisions should account for performance status, histology, FIGO stage, prior treatment lines "
            "and the platinum-free interval. "
        )
        if i % 4 == 0:
            # a few long records so chunking produces several entries
            guideline_text += " ".join(
                f"Point {j + 1}: {detail}; document the rationale, safety considerations and follow-up plan."
                for j in range(12)
            )
        out.append(
            {
                "stream": "Guideline",
                "title": f"Synthetic guideline: {topic}",
                "text": guideline_text,
                "meta": {"source": "synthetic guideline set", "section": f"G{i + 1:02d}"},
            }
        )
        design = _LIT_DESIGNS[i % len(_LIT_DESIGNS)]
        out.append(
            {
                "stream": "Literature",
                "title": f"{design} of {topic} in ovarian cancer",
                "pmid": str(90000000 + i),
                "text": (
                    f"Background: {topic} in ovarian cancer. Methods: {design.lower()}. "
                    f"Findings: {detail}. Outcomes included progression-free survival, overall survival "
                    "and toxicity. Conclusion: results support individualised decisions at tumour board."
                ),
                "meta": {"publication_type": design},
            }
        )
    return out


def write_corpus(path: str | Path, records: Sequence[Mapping[str, Any]] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in (records or synthetic_corpus_records())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def fixture_snapshot(tmp_corpus: str | Path | None = None, dimension: int = 256) -> CorpusSnapshot:
    """Freeze the synthetic corpus under the token-hash test embedder."""
    if tmp_corpus is None:
        records = [
            RawEvidenceRecord(Stream(r["stream"]), r["title"], r["text"], r.get("pmid"), r.get("meta", {}))
            for r in synthetic_corpus_records()
        ]
    else:
        records = ingest_corpus([tmp_corpus])
    return build_snapshot_from_records(records, TokenHashEmbedder(dimension), FIXTURE_PHASE)


# --------------------------------------------------------------------------
# cases


@dataclass(frozen=True)
class CaseSpec:
    case_id: str
    index_date: date
    age: int
    histology: str
    stage: str
    strategy: str
    treatments: tuple[tuple[str, date, date | None, int], ...] = ()
    pfi: str | None = None
    events: tuple[str, ...] = ()
    ca125: str = "35"
    brca: str | None = None
    hrd: str | None = None
    pet: bool = False
    imaging_stage: str | None = None  # differs from operative stage -> recorded conflict
    late_note: bool = False  # a document dated after the index date
    extra_markers: Mapping[str, str] = field(default_factory=dict)


def _d(s: str) -> date:
    return date.fromisoformat(s)


_PLAT = "carboplatin paclitaxel"

CASE_SPECS: tuple[CaseSpec, ...] = (
    # scene 1: primary management
    CaseSpec("OV-001", _d("2024-03-04"), 58, "EOC", "III", "PDS", brca="BRCA1 pathogenic", hrd="positive", imaging_stage="IV"),
    CaseSpec("OV-002", _d("2024-03-11"), 66, "EOC", "IV", "NACT_IDS", ca125="1450", hrd="negative", pet=True),
    CaseSpec("OV-003", _d("2024-04-02"), 49, "EOC", "I", "PDS", ca125="48", late_note=True),
    CaseSpec("OV-004", _d("2024-04-15"), 73, "EOC", "III", "NACT_IDS", ca125="880", brca="wild type",
             treatments=(( _PLAT, _d("2024-02-01"), None, 1),)),
    # scene 2: histology-driven pathways
    CaseSpec("OV-005", _d("2024-05-06"), 24, "GCT", "I", "PST", extra_markers={"AFP": "410", "BETA-HCG": "12"}),
    CaseSpec("OV-006", _d("2024-05-13"), 55, "SCST", "II", "PDS", extra_markers={"INHIBIN": "96"}, imaging_stage="III"),
    CaseSpec("OV-007", _d("2024-05-20"), 38, "BET", "I", "PST", ca125="60"),
    CaseSpec("OV-008", _d("2024-06-03"), 62, "Sarcoma", "III", "PDS", pet=True, late_note=True),
    # scene 3: platinum-resistant relapse
    CaseSpec("OV-009", _d("2024-06-10"), 61, "EOC", "III", "PDS", pfi="3.9", ca125="520", brca="wild type",
             treatments=((_PLAT, _d("2023-08-01"), _d("2023-11-20"), 1), ("weekly paclitaxel", _d("2024-04-01"), None, 2))),
    CaseSpec("OV-010", _d("2024-06-17"), 70, "EOC", "IV", "NACT_IDS", pfi="2.1", ca125="910", pet=True,
             treatments=((_PLAT, _d("2023-10-01"), _d("2024-04-15"), 1),)),
    CaseSpec("OV-011", _d("2024-07-01"), 57, "EOC", "III", "PDS", pfi="5.5", hrd="negative", imaging_stage="IV",
             treatments=((_PLAT, _d("2023-09-01"), _d("2024-01-10"), 1), ("pegylated liposomal doxorubicin", _d("2024-05-01"), None, 2))),
    CaseSpec("OV-012", _d("2024-07-08"), 68, "EOC", "III", "NACT_IDS", pfi="1.2", ca125="300",
             treatments=((_PLAT, _d("2024-01-01"), _d("2024-05-30"), 1),)),
    # scene 4: platinum-sensitive relapse
    CaseSpec("OV-013", _d("2024-07-15"), 52, "EOC", "III", "PDS", pfi="14.2", brca="BRCA2 pathogenic", hrd="positive",
             treatments=((_PLAT, _d("2022-09-01"), _d("2023-02-15"), 1), ("olaparib", _d("2023-03-01"), _d("2024-04-01"), 1))),
    CaseSpec("OV-014", _d("2024-08-05"), 64, "EOC", "IV", "NACT_IDS", pfi="8.0", pet=True, imaging_stage="III",
             treatments=((_PLAT, _d("2023-06-01"), _d("2023-12-05"), 1),)),
    CaseSpec("OV-015", _d("2024-08-12"), 59, "EOC", "II", "PDS", pfi="26.0",
             treatments=((_PLAT, _d("2021-12-01"), _d("2022-06-10"), 1), ("carboplatin pegylated liposomal doxorubicin", _d("2024-07-01"), None, 2))),
    CaseSpec("OV-016", _d("2024-08-19"), 47, "EOC", "III", "PDS", pfi="6.0", late_note=True,
             treatments=((_PLAT, _d("2023-08-01"), _d("2024-02-19"), 1),)),
    # scene 5: event-driven reassessment
    CaseSpec("OV-017", _d("2024-09-02"), 71, "EOC", "III", "NACT_IDS", events=("bowel obstruction",),
             treatments=((_PLAT, _d("2024-06-01"), None, 1),)),
    CaseSpec("OV-018", _d("2024-09-09"), 63, "EOC", "IV", "PDS", events=("grade 4 neutropenia", "toxicity-driven change"),
             pfi="9.5", treatments=((_PLAT, _d("2023-06-01"), _d("2023-11-20"), 1), (_PLAT, _d("2024-08-01"), None, 2))),
    CaseSpec("OV-019", _d("2024-09-16"), 44, "GCT", "II", "PST", events=("pulmonary embolism",), extra_markers={"AFP": "55"}, pet=True),
    # relapse on a second line with no recorded PFI: falls back to scene 5 with a note
    CaseSpec("OV-020", _d("2024-09-23"), 67, "EOC", "III", "PDS", imaging_stage="IV",
             treatments=((_PLAT, _d("2023-01-01"), None, 1), ("gemcitabine", _d("2024-05-01"), None, 2))),
)

# four cases per scene, in order
EXPECTED_SCENES = {s.case_id: (int(s.case_id[3:]) - 1) // 4 + 1 for s in CASE_SPECS}


@dataclass(frozen=True)
class FixtureCase:
    record: RawCaseRecord
    extractions: Mapping[str, Mapping[str, Any]]  # doc_id -> raw extractor output


def _treatment_json(t: tuple[str, date, date | None, int]) -> dict[str, Any]:
    label, start, end, line = t
    return {"label": label, "start": start.isoformat(), "end": end.isoformat() if end else None, "line": line}


def build_fixture_case(spec: CaseSpec) -> FixtureCase:
    cid, idx = spec.case_id, spec.index_date
    centre = "C1" if int(cid[3:]) % 2 else "C2"
    docs: list[SourceDocument] = []
    ext: dict[str, dict[str, Any]] = {}

    def add(suffix: str, doc_type: DocType, days_before: int, body: str, fields: dict[str, str],
            treatments: Sequence[tuple[str, date, date | None, int]] = (), flags: Sequence[str] = (),
            meta: Mapping[str, Any] | None = None) -> None:
        doc_id = f"{cid}-{suffix}"
        docs.append(SourceDocument(doc_id, doc_type, idx - timedelta(days=days_before), centre, body, dict(meta or {})))
        ext[doc_id] = {
            "fields": fields,
            "treatments": [_treatment_json(t) for t in treatments],
            "event_flags": list(flags),
        }

    path_fields = {"histology_group": spec.histology}
    path_body = f"Histopathology report. Final diagnosis: {spec.histology} ovarian primary. "
    if spec.histology == "EOC":
        path_body += "High-grade serous carcinoma, WT1 and PAX8 positive, p53 aberrant. "
    add("PATH", DocType.PATHOLOGY, 40, path_body, path_fields)

    img_stage = spec.imaging_stage or spec.stage
    add(
        "CT",
        DocType.IMAGING,
        30,
        f"Contrast CT chest abdomen pelvis. Findings in keeping with FIGO stage {img_stage} disease.",
        {"figo_stage": img_stage},
    )
    if spec.pet:
        add(
            "PET",
            DocType.IMAGING,
            20,
            "FDG PET/CT. Metabolically active peritoneal deposits; no unexpected distant uptake.",
            {},
            meta={"nuclear": True},
        )
    lab_fields = {"biomarkers.CA-125": spec.ca125}
    lab_body = f"Laboratory results. CA-125 {spec.ca125} U/mL."
    for marker, value in sorted(spec.extra_markers.items()):
        lab_fields[f"biomarkers.{marker}"] = value
        lab_body += f" {marker} {value}."
    add("LAB", DocType.LABORATORY, 15, lab_body, lab_fields)

    if spec.brca or spec.hrd:
        gen_fields = {}
        body = "Genomic testing report."
        if spec.brca:
            gen_fields["biomarkers.BRCA"] = spec.brca
            body += f" BRCA status: {spec.brca}."
        if spec.hrd:
            gen_fields["biomarkers.HRD"] = spec.hrd
            body += f" HRD status: {spec.hrd}."
        add("GEN", DocType.GENOMIC, 25, body, gen_fields)

    if spec.strategy in ("PDS", "NACT_IDS"):
        add(
            "OP",
            DocType.OPERATIVE,
            35 if spec.strategy == "PDS" else 10,
            f"Operative note. Surgical staging consistent with FIGO stage {spec.stage}; strategy {spec.strategy}.",
            {"figo_stage": spec.stage, "primary_strategy": spec.strategy},
        )

    note_fields: dict[str, str] = {"age": str(spec.age)}
    if spec.strategy == "PST":
        note_fields["primary_strategy"] = "PST"
    note_body = f"Clinical note. {spec.age}-year-old patient."
    if spec.pfi is not None:
        note_fields["platinum_free_interval_months"] = spec.pfi
        note_body += f" Platinum-free interval {spec.pfi} months."
    for t in spec.treatments:
        note_body += f" Line {t[3]}: {t[0]} from {t[1].isoformat()}" + (f" to {t[2].isoformat()}." if t[2] else ", ongoing.")
    for e in spec.events:
        note_body += f" Acute event: {e}."
    if spec.strategy == "PST" and spec.stage != "Unknown":
        note_body += " Primary surgical treatment performed at referring centre."
    add("CN", DocType.CLINICAL_NOTE, 5, note_body, note_fields, spec.treatments, spec.events)

    if spec.late_note:
        # written after the meeting; must never reach the structured case
        add("LATE", DocType.CLINICAL_NOTE, -7, "Post-MDT addendum. Age 99. New event: sepsis.",
            {"age": "99"}, flags=("sepsis",))

    record = RawCaseRecord(cid, idx, tuple(docs), centre)
    return FixtureCase(record, ext)


def fixture_cases() -> list[FixtureCase]:
    return [build_fixture_case(s) for s in CASE_SPECS]


# --------------------------------------------------------------------------
# offline agents


def _usage(request: GenerationRequest, message: Any) -> Usage:
    est = estimate_usage(request, message)
    # fixed synthetic latency: 2 ms per token
    return Usage(est.prompt_tokens, est.completion_tokens, 2 * (est.prompt_tokens + est.completion_tokens))


def extractor_fn(extractions: Mapping[str, Mapping[str, Any]]) -> Callable[[GenerationRequest], Any]:
    def fn(request: GenerationRequest) -> Any:
        doc_id = request.context["document"]["doc_id"]
        message = extractions[doc_id]
        return message, _usage(request, message)

    return fn


def _package_ids(package: Mapping[str, Any]) -> tuple[list[str], list[str]]:
    evidence = [e["entry_id"] for e in package.get("evidence", [])]
    docs = [d["doc_id"] for d in package.get("documents", [])]
    if not docs:
        docs = [d["doc_id"] for d in package.get("case", {}).get("document_index", [])]
    return evidence, docs


def _scene(case: Mapping[str, Any]) -> int | None:
    scene = case.get("scene")
    return scene.get("id") if isinstance(scene, Mapping) else None


def _value(case: Mapping[str, Any], key: str) -> str:
    fv = case.get(key)
    return fv.get("value", "Unknown") if isinstance(fv, Mapping) else "Unknown"


_SCENE_PLANS = {
    1: "Proceed with primary management: cytoreductive surgery aiming at no residual disease with platinum-based chemotherapy; maintenance according to BRCA/HRD status.",
    2: "Follow the histology-specific pathway: surgery with fertility preservation where appropriate and histology-directed systemic therapy with tumour-marker surveillance.",
    3: "Platinum-resistant relapse: non-platinum single-agent chemotherapy, with bevacizumab if not contraindicated; consider trial enrolment and early supportive care.",
    4: "Platinum-sensitive relapse: platinum-based rechallenge, evaluate secondary cytoreduction, then maintenance guided by BRCA/HRD status.",
    5: "Event-driven reassessment: manage the acute event first, then re-stage and revisit the systemic plan at the next board.",
}


def _initial(request: GenerationRequest) -> dict[str, Any]:
    package = request.context["package"]
    case = package["case"]
    evidence, docs = _package_ids(package)
    scene = _scene(case)
    return {
        "kind": "InitialAssessment",
        "assessment": (
            f"{request.role} assessment: scene {scene}, histology {_value(case, 'histology_group')}, "
            f"FIGO stage {_value(case, 'figo_stage')}; {len(docs)} source documents reviewed."
        ),
        "recommendation": _SCENE_PLANS.get(scene or 5, _SCENE_PLANS[5]),
        "safety_considerations": ["confirm performance status and organ function before systemic therapy"],
        "uncertainties": ["no molecular results in package"] if "biomarkers" not in case else ["none beyond routine staging"],
        "citations": evidence[:2] + docs[:1],
    }


def _turn(request: GenerationRequest) -> dict[str, Any]:
    package = request.context["package"]
    case = package["case"]
    round_idx = request.context["round"]
    already = any(
        m["role"] == request.role and m["kind"] == "Intervention" for m in request.context["transcript"]
    )
    if round_idx != 1 or already:
        return {"kind": "Silence"}
    evidence, docs = _package_ids(package)
    scene = _scene(case)
    role = request.role
    trigger = target = None
    content = ""
    if role == "Oncologist" and scene == 3:
        trigger, target = "SafetyConcern", "Chair"
        content = "Platinum-resistant relapse: avoid platinum rechallenge; prefer a non-platinum regimen."
    elif role == "Pathologist" and _value(case, "histology_group") not in ("EOC", "Unknown"):
        trigger, target = "NewEvidence", "Oncologist"
        content = "Non-epithelial histology confirmed; histology-specific pathway applies."
    elif role == "Radiologist" and case.get("event_flags"):
        trigger, target = "MissingInfo", "Chair"
        content = "Acute event reported; urgent restaging imaging is needed before any systemic decision."
    elif role == "NuclearMedicine" and docs and scene in (3, 4):
        trigger, target = "NewEvidence", "Radiologist"
        content = "PET/CT shows metabolically active disease relevant to the relapse pattern."
    if trigger is None:
        return {"kind": "Silence"}
    return {
        "kind": "Intervention",
        "trigger": trigger,
        "directed_to": target,
        "rationale": f"{trigger} identified from the {role} package",
        "content": content,
        "citations": evidence[:1] + docs[:1],
    }


def _summary(request: GenerationRequest) -> dict[str, Any]:
    ctx = request.context
    if "package" in ctx:
        case = ctx["package"]["case"]
        evidence, docs = _package_ids(ctx["package"])
    else:
        case = ctx["case"]
        evidence = [e["entry_id"] for e in ctx.get("evidence", [])]
        docs = [d["doc_id"] for d in ctx.get("dossier", [])] or [d["doc_id"] for d in case.get("documents", [])]
    scene = _scene(case) or 5
    pool = evidence or docs
    interventions = [m for m in ctx.get("transcript", []) if m["kind"] == "Intervention"]
    concerns = "; ".join(m["content"]["content"] for m in interventions) or "no open inter-role conflicts"
    return {
        "final_assessment": {
            "text": (
                f"Scene {scene} ({case.get('scene', {}).get('label', 'unassigned')}). Histology "
                f"{_value(case, 'histology_group')}, FIGO stage {_value(case, 'figo_stage')}. Board points: {concerns}."
            )[:1200],
            "citations": pool[:2] + docs[:1],
        },
        "core_treatment_strategy": {"text": _SCENE_PLANS[scene], "citations": pool[:3]},
        "change_triggers": [
            {"condition": "Radiological or marker progression on current therapy.", "citations": pool[:1]},
            {"condition": "New grade 3 or higher toxicity or acute clinical event.", "citations": (evidence[1:2] or docs[:1])},
        ],
    }


def agent_policy(request: GenerationRequest) -> Any:
    """Deterministic stand-in for the role agents; cites only ids present in its input."""
    if request.schema_id == INITIAL_SCHEMA:
        message = _initial(request)
    elif request.schema_id == TURN_SCHEMA:
        message = _turn(request)
    elif request.schema_id == SUMMARY_SCHEMA:
        message = _summary(request)
    else:
        raise ValueError(f"policy has no rule for schema {request.schema_id}")
    return message, _usage(request, message)


def hallucinating_policy(persistent: bool) -> Callable[[GenerationRequest], Any]:
    """Chair summaries cite an id that exists nowhere.

    With ``persistent`` the bad id survives every retry; otherwise the agent
    drops it once it receives a policy notice.
    """

    def fn(request: GenerationRequest) -> Any:
        message, usage = agent_policy(request)
        if request.schema_id == SUMMARY_SCHEMA and (persistent or "policy_notices" not in request.context):
            message = json.loads(json.dumps(message))
            message["final_assessment"]["citations"].append(HALLUCINATED_ID)
        return message, usage

    return fn


def fixture_backend(extractions: Mapping[str, Mapping[str, Any]], backend_id: str = "synthetic-policy") -> FunctionBackend:
    """One backend serving both the extractor and the deliberation roles."""
    extract = extractor_fn(extractions)

    def fn(request: GenerationRequest) -> Any:
        return extract(request) if request.role == "Extractor" else agent_policy(request)

    return FunctionBackend(fn, backend_id)


def all_extractions(cases: Sequence[FixtureCase]) -> dict[str, Mapping[str, Any]]:
    return {doc_id: out for c in cases for doc_id, out in c.extractions.items()}


def structured_fixture_cases(cases: Sequence[FixtureCase] | None = None) -> list[StructuredCase]:
    cases = cases if cases is not None else fixture_cases()
    extractor = FunctionBackend(extractor_fn(all_extractions(cases)), "synthetic-extractor")
    out = []
    for c in cases:
        sc, failures = structure_case(c.record, extractor)
        if failures:
            raise RuntimeError(f"fixture extraction failed for {c.record.case_id}")
        out.append(sc)
    return out


# --------------------------------------------------------------------------
# workspace generator


def write_fixture_workspace(root: str | Path, modes: Sequence[Mode] = tuple(Mode)) -> dict[str, Path]:
    """Write corpus, case packets, structured cases and a scripted replay file.

    The replay file is recorded by running every case in every requested mode
    against the rule-based policy, so ``--backend scripted:<replay.json>``
    reproduces those runs offline.
    """
    root = Path(root)
    corpus = write_corpus(root / "corpus" / "corpus.jsonl")
    snapshot = fixture_snapshot(corpus)
    cases = fixture_cases()
    recorder = RecordingBackend(fixture_backend(all_extractions(cases)), backend_id="scripted-fixture")
    for c in cases:
        case_dir = write_case_packet(c.record, root / "cases" / c.record.case_id)
        structured, _ = structure_case(c.record, recorder)
        write_structured_case(structured, case_dir / "structured_case.json")
        for mode in modes:
            run_case(structured, snapshot, recorder, DeliberationConfig(mode=mode))
    replay = root / "replay.json"
    recorder.save(replay)
    return {"corpus": corpus, "cases": root / "cases", "replay": replay}
