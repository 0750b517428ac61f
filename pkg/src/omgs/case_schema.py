"""Case ingestion: per-document extraction, merge, validation and scene assignment.

A raw case record is a list of dated source documents. Each document is sent
to an extractor backend that returns the facts it states explicitly; the
partial extractions are then merged field by field with modality- and
time-based precedence. Nothing is imputed: a field no document supports is
``Unknown``.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from datetime import date
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Any

from .backends import AgentBackend, BackendError, GenerationRequest
from .canonical import dump_pretty

logger = logging.getLogger(__name__)

UNKNOWN = "Unknown"
EXTRACTION_SCHEMA_ID = "case-extraction/v1"
EXTRACTION_RETRIES = 2


class DocType(str, Enum):
    PATHOLOGY = "Pathology"
    IMAGING = "Imaging"
    LABORATORY = "Laboratory"
    GENOMIC = "Genomic"
    OPERATIVE = "Operative"
    CLINICAL_NOTE = "ClinicalNote"
    MDT_NOTE = "MdtNote"


class HistologyGroup(str, Enum):
    EOC = "EOC"
    BET = "BET"
    GCT = "GCT"
    SCST = "SCST"
    GCSCST = "GCSCST"
    NEN = "NEN"
    SARCOMA = "Sarcoma"
    OTHER_AGGRESSIVE = "OtherAggressive"
    UNKNOWN = "Unknown"


class FigoStage(str, Enum):
    I = "I"  # noqa: E741
    II = "II"
    III = "III"
    IV = "IV"
    UNKNOWN = "Unknown"


class PrimaryStrategy(str, Enum):
    PDS = "PDS"
    NACT_IDS = "NACT_IDS"
    PST = "PST"
    UNKNOWN = "Unknown"


HISTOLOGY_LABELS = {
    "EOC": "epithelial ovarian carcinoma",
    "BET": "borderline epithelial tumour",
    "GCT": "germ cell tumour",
    "SCST": "sex cord-stromal tumour",
    "GCSCST": "mixed germ cell sex cord-stromal tumour",
    "NEN": "neuroendocrine neoplasm",
    "Sarcoma": "ovarian sarcoma",
    "OtherAggressive": "rare aggressive ovarian malignancy",
}

SCENE_LABELS = {
    1: "primary management",
    2: "histology-driven pathways",
    3: "platinum-resistant relapse",
    4: "platinum-sensitive relapse",
    5: "event-driven reassessment",
}

SCALAR_FIELDS = (
    "age",
    "histology_group",
    "figo_stage",
    "primary_strategy",
    "platinum_free_interval_months",
)
BIOMARKER_PREFIX = "biomarkers."
LAB_MARKERS = frozenset({"CA-125", "HE4", "CEA", "AFP", "LDH", "INHIBIN", "BETA-HCG"})

# Allowed values for enumerated scalars; everything else is free text.
_ENUM_FIELDS: dict[str, type[Enum]] = {
    "histology_group": HistologyGroup,
    "figo_stage": FigoStage,
    "primary_strategy": PrimaryStrategy,
}

# Ranked authoritative modalities; modalities not listed share the lowest rank.
AUTHORITATIVE_MODALITIES: dict[str, tuple[DocType, ...]] = {
    "histology_group": (DocType.PATHOLOGY,),
    "figo_stage": (DocType.OPERATIVE, DocType.IMAGING),
    "primary_strategy": (DocType.OPERATIVE, DocType.MDT_NOTE, DocType.CLINICAL_NOTE),
    "platinum_free_interval_months": (DocType.CLINICAL_NOTE, DocType.MDT_NOTE),
    "biomarker": (DocType.GENOMIC, DocType.PATHOLOGY),
    "lab": (DocType.LABORATORY,),
}


class ExtractionError(Exception):
    """Extractor output could not be used; ``raw_output`` is kept for audit."""

    def __init__(self, doc_id: str, reason: str, raw_output: Any = None, attempts: int = 0):
        super().__init__(f"{doc_id}: {reason}")
        self.doc_id = doc_id
        self.reason = reason
        self.raw_output = raw_output
        self.attempts = attempts


class CasePacketError(ValueError):
    pass


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    doc_type: DocType
    doc_date: date
    centre_id: str
    body: str
    meta: Mapping[str, Any] = field(default_factory=dict)

    def index_entry(self) -> dict[str, Any]:
        entry: dict[str, Any] = {
            "doc_id": self.doc_id,
            "doc_type": self.doc_type.value,
            "doc_date": self.doc_date.isoformat(),
            "centre_id": self.centre_id,
        }
        if self.meta:
            entry["meta"] = dict(sorted(self.meta.items()))
        return entry


@dataclass(frozen=True)
class RawCaseRecord:
    case_id: str
    index_mdt_date: date
    documents: tuple[SourceDocument, ...]
    centre_id: str = ""

    def __post_init__(self) -> None:
        if not self.documents:
            raise CasePacketError(f"case {self.case_id} has no documents")
        ids = [d.doc_id for d in self.documents]
        if len(set(ids)) != len(ids):
            raise CasePacketError(f"case {self.case_id} has duplicate doc_ids")

    def decision_time_documents(self) -> tuple[SourceDocument, ...]:
        return tuple(d for d in self.documents if d.doc_date <= self.index_mdt_date)


@dataclass(frozen=True, order=True)
class Provenance:
    doc_id: str
    doc_type: DocType
    doc_date: date

    @classmethod
    def of(cls, doc: SourceDocument) -> Provenance:
        return cls(doc.doc_id, doc.doc_type, doc.doc_date)

    def to_dict(self) -> dict[str, str]:
        return {
            "doc_id": self.doc_id,
            "doc_type": self.doc_type.value,
            "doc_date": self.doc_date.isoformat(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Provenance:
        return cls(d["doc_id"], DocType(d["doc_type"]), date.fromisoformat(d["doc_date"]))


@dataclass(frozen=True)
class FieldValue:
    value: str
    provenance: tuple[Provenance, ...] = ()

    @property
    def is_unknown(self) -> bool:
        return self.value == UNKNOWN

    def to_dict(self) -> dict[str, Any]:
        return {"value": self.value, "provenance": [p.to_dict() for p in self.provenance]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FieldValue:
        return cls(str(d["value"]), tuple(Provenance.from_dict(p) for p in d.get("provenance", ())))


UNKNOWN_VALUE = FieldValue(UNKNOWN)


@dataclass(frozen=True)
class TreatmentLine:
    label: str
    start: date
    end: date | None
    line: int
    provenance: tuple[Provenance, ...] = ()

    @property
    def sort_key(self) -> tuple[date, int, str]:
        return (self.start, self.line, self.label)

    @property
    def is_platinum(self) -> bool:
        return "platin" in self.label.lower()

    def to_dict(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "start": self.start.isoformat(),
            "end": self.end.isoformat() if self.end else None,
            "line": self.line,
            "provenance": [p.to_dict() for p in self.provenance],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TreatmentLine:
        return cls(
            label=str(d["label"]),
            start=date.fromisoformat(d["start"]),
            end=date.fromisoformat(d["end"]) if d.get("end") else None,
            line=int(d["line"]),
            provenance=tuple(Provenance.from_dict(p) for p in d.get("provenance", ())),
        )


@dataclass(frozen=True)
class ClinicalScene:
    id: int

    def __post_init__(self) -> None:
        if self.id not in SCENE_LABELS:
            raise ValueError(f"scene id must be 1..5, got {self.id}")

    @property
    def label(self) -> str:
        return SCENE_LABELS[self.id]


@dataclass(frozen=True)
class Conflict:
    field: str
    candidates: tuple[FieldValue, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"field": self.field, "candidates": [c.to_dict() for c in self.candidates]}


@dataclass(frozen=True)
class Extraction:
    """Facts one document states explicitly. Absent keys were not mentioned."""

    doc_id: str
    fields: Mapping[str, FieldValue] = field(default_factory=dict)
    treatments: tuple[TreatmentLine, ...] = ()
    event_flags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class StructuredCase:
    case_id: str
    index_mdt_date: date
    age: FieldValue
    histology_group: FieldValue
    figo_stage: FieldValue
    primary_strategy: FieldValue
    biomarkers: Mapping[str, FieldValue]
    treatment_history: tuple[TreatmentLine, ...]
    platinum_free_interval_months: FieldValue
    event_flags: frozenset[str]
    scene: ClinicalScene | None
    conflicts: tuple[Conflict, ...]
    documents: tuple[SourceDocument, ...]
    scene_note: str | None = None
    centre_id: str = ""

    def get_field(self, name: str) -> FieldValue:
        if name.startswith(BIOMARKER_PREFIX):
            return self.biomarkers.get(name[len(BIOMARKER_PREFIX):], UNKNOWN_VALUE)
        if name in SCALAR_FIELDS:
            return getattr(self, name)
        raise KeyError(name)

    def document(self, doc_id: str) -> SourceDocument | None:
        for doc in self.documents:
            if doc.doc_id == doc_id:
                return doc
        return None

    @property
    def doc_ids(self) -> frozenset[str]:
        return frozenset(d.doc_id for d in self.documents)

    def pfi_months(self) -> Decimal | None:
        return _as_decimal(self.platinum_free_interval_months)

    def to_dict(self, *, include_bodies: bool = False) -> dict[str, Any]:
        """Serialize with the documented key order of ``structured_case.json``."""
        docs = []
        for d in self.documents:
            entry = d.index_entry()
            if include_bodies:
                entry["body"] = d.body
            docs.append(entry)
        return {
            "case_id": self.case_id,
            "centre_id": self.centre_id,
            "index_mdt_date": self.index_mdt_date.isoformat(),
            "scene": {"id": self.scene.id, "label": self.scene.label} if self.scene else None,
            "scene_note": self.scene_note,
            "demographics": {"age": self.age.to_dict()},
            "histology_group": self.histology_group.to_dict(),
            "figo_stage": self.figo_stage.to_dict(),
            "primary_strategy": self.primary_strategy.to_dict(),
            "biomarkers": {k: v.to_dict() for k, v in sorted(self.biomarkers.items())},
            "treatment_history": [t.to_dict() for t in self.treatment_history],
            "platinum_free_interval_months": self.platinum_free_interval_months.to_dict(),
            "event_flags": sorted(self.event_flags),
            "conflicts": [c.to_dict() for c in self.conflicts],
            "documents": docs,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> StructuredCase:
        docs = tuple(
            SourceDocument(
                doc_id=e["doc_id"],
                doc_type=DocType(e["doc_type"]),
                doc_date=date.fromisoformat(e["doc_date"]),
                centre_id=e.get("centre_id", ""),
                body=e.get("body", ""),
                meta=e.get("meta", {}),
            )
            for e in d.get("documents", ())
        )
        scene = d.get("scene")
        return cls(
            case_id=d["case_id"],
            centre_id=d.get("centre_id", ""),
            index_mdt_date=date.fromisoformat(d["index_mdt_date"]),
            age=FieldValue.from_dict(d["demographics"]["age"]),
            histology_group=FieldValue.from_dict(d["histology_group"]),
            figo_stage=FieldValue.from_dict(d["figo_stage"]),
            primary_strategy=FieldValue.from_dict(d["primary_strategy"]),
            biomarkers={k: FieldValue.from_dict(v) for k, v in d.get("biomarkers", {}).items()},
            treatment_history=tuple(TreatmentLine.from_dict(t) for t in d.get("treatment_history", ())),
            platinum_free_interval_months=FieldValue.from_dict(d["platinum_free_interval_months"]),
            event_flags=frozenset(d.get("event_flags", ())),
            scene=ClinicalScene(scene["id"]) if scene else None,
            scene_note=d.get("scene_note"),
            conflicts=tuple(
                Conflict(c["field"], tuple(FieldValue.from_dict(v) for v in c["candidates"]))
                for c in d.get("conflicts", ())
            ),
            documents=docs,
        )


def _as_decimal(fv: FieldValue) -> Decimal | None:
    if fv.is_unknown:
        return None
    try:
        return Decimal(fv.value)
    except InvalidOperation:
        return None


# --------------------------------------------------------------------------
# extraction


def extraction_request(doc: SourceDocument, feedback: Sequence[str] = ()) -> GenerationRequest:
    instruction = (
        "Extract only facts stated explicitly in this document into the case template. "
        "Omit fields the document does not mention; use \"Unknown\" when the document "
        "mentions a field but does not support a definite value."
    )
    if feedback:
        instruction += "\nSchema violations in previous output:\n" + "\n".join(f"- {f}" for f in feedback)
    return GenerationRequest(
        role="Extractor",
        instruction=instruction,
        context={"document": doc.index_entry() | {"body": doc.body}},
        schema_id=EXTRACTION_SCHEMA_ID,
    )


def _check_field(name: str, value: Any) -> str | None:
    if not isinstance(value, str) or not value.strip():
        return f"{name}: value must be a nonempty string"
    if name in _ENUM_FIELDS and value != UNKNOWN:
        allowed = {m.value for m in _ENUM_FIELDS[name]}
        if value not in allowed:
            return f"{name}: {value!r} not in {sorted(allowed)}"
    if name in ("age", "platinum_free_interval_months") and value != UNKNOWN:
        try:
            num = Decimal(value)
        except InvalidOperation:
            return f"{name}: {value!r} is not numeric"
        if num < 0:
            return f"{name}: must be nonnegative"
    if name not in SCALAR_FIELDS and not name.startswith(BIOMARKER_PREFIX):
        return f"{name}: unknown field"
    return None


def parse_extraction(doc: SourceDocument, raw: Any) -> tuple[Extraction | None, list[str]]:
    """Validate extractor output; return the extraction or a list of violations."""
    problems: list[str] = []
    if not isinstance(raw, Mapping):
        return None, ["output must be a JSON object"]
    unexpected = set(raw) - {"fields", "treatments", "event_flags"}
    if unexpected:
        problems.append(f"unexpected keys: {sorted(unexpected)}")
    prov = (Provenance.of(doc),)
    fields: dict[str, FieldValue] = {}
    raw_fields = raw.get("fields", {})
    if not isinstance(raw_fields, Mapping):
        problems.append("fields must be an object")
        raw_fields = {}
    for name, value in raw_fields.items():
        if isinstance(value, Mapping):
            value = value.get("value")
        err = _check_field(name, value)
        if err:
            problems.append(err)
            continue
        fields[name] = UNKNOWN_VALUE if value == UNKNOWN else FieldValue(value.strip(), prov)

    treatments: list[TreatmentLine] = []
    for i, t in enumerate(raw.get("treatments", ()) or ()):
        try:
            treatments.append(
                TreatmentLine(
                    label=str(t["label"]).strip(),
                    start=date.fromisoformat(t["start"]),
                    end=date.fromisoformat(t["end"]) if t.get("end") else None,
                    line=int(t["line"]),
                    provenance=prov,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"treatments[{i}]: {exc}")
    flags = raw.get("event_flags", ()) or ()
    if not isinstance(flags, (list, tuple)) or not all(isinstance(f, str) and f for f in flags):
        problems.append("event_flags must be a list of nonempty strings")
        flags = ()
    if problems:
        return None, problems
    return Extraction(doc.doc_id, fields, tuple(treatments), frozenset(flags)), []


def extract_document(
    doc: SourceDocument, extractor: AgentBackend, retries: int = EXTRACTION_RETRIES
) -> Extraction:
    """Ask ``extractor`` for the explicit facts in ``doc``.

    Schema violations are fed back and retried ``retries`` times before an
    :class:`ExtractionError` carrying the last raw output is raised.
    """
    if not doc.body.strip():
        raise ExtractionError(doc.doc_id, "empty document body")
    feedback: list[str] = []
    raw: Any = None
    for attempt in range(retries + 1):
        try:
            raw = extractor.generate(extraction_request(doc, feedback)).message
        except BackendError as exc:
            if exc.retryable and attempt < retries:
                continue
            raise ExtractionError(doc.doc_id, f"backend failure: {exc}", raw, attempt + 1) from exc
        extraction, feedback = parse_extraction(doc, raw)
        if extraction is not None:
            return extraction
    raise ExtractionError(doc.doc_id, "; ".join(feedback), raw, retries + 1)


# --------------------------------------------------------------------------
# merge


def _modality_key(field_name: str) -> str:
    if field_name.startswith(BIOMARKER_PREFIX):
        marker = field_name[len(BIOMARKER_PREFIX):]
        return "lab" if marker.upper() in LAB_MARKERS else "biomarker"
    return field_name


def _precedence(field_name: str, prov: Provenance) -> tuple[int, int, str]:
    ranked = AUTHORITATIVE_MODALITIES.get(_modality_key(field_name), ())
    rank = ranked.index(prov.doc_type) if prov.doc_type in ranked else len(ranked)
    # lower sorts first: best modality, latest date, smallest doc_id
    return (rank, -prov.doc_date.toordinal(), prov.doc_id)


def _merge_field(name: str, candidates: list[FieldValue]) -> tuple[FieldValue, Conflict | None]:
    concrete = [c for c in candidates if not c.is_unknown]
    if not concrete:
        return UNKNOWN_VALUE, None
    concrete.sort(key=lambda c: _precedence(name, c.provenance[0]))
    winner_value = concrete[0].value
    support = tuple(c.provenance[0] for c in concrete if c.value == winner_value)
    winner = FieldValue(winner_value, support)
    losers = [c for c in concrete if c.value != winner_value]
    if not losers:
        return winner, None
    return winner, Conflict(name, (winner, *losers))


def merge_extractions(
    record: RawCaseRecord,
    partials: Iterable[Extraction],
    rules: SceneRuleTable | None = None,
) -> StructuredCase:
    """Fold per-document extractions into one :class:`StructuredCase`.

    Documents dated after the index MDT date are ignored. Inputs are sorted
    by (doc_date, doc_type, doc_id) first so the fold does not depend on the
    order partials arrive in.
    """
    docs = {d.doc_id: d for d in record.decision_time_documents()}
    kept = [p for p in partials if p.doc_id in docs]
    dropped = {p.doc_id for p in partials} - set(docs)
    if dropped:
        logger.info("case %s: ignoring extractions after index date: %s", record.case_id, sorted(dropped))
    kept.sort(key=lambda p: (docs[p.doc_id].doc_date, docs[p.doc_id].doc_type.value, p.doc_id))

    candidates: dict[str, list[FieldValue]] = {}
    treatments: dict[tuple[date, int, str], TreatmentLine] = {}
    flags: set[str] = set()
    for part in kept:
        for name, fv in part.fields.items():
            candidates.setdefault(name, []).append(
                fv if not fv.is_unknown else UNKNOWN_VALUE
            )
        for t in part.treatments:
            prev = treatments.get(t.sort_key)
            if prev is None:
                treatments[t.sort_key] = t
            else:
                end = prev.end or t.end
                treatments[t.sort_key] = replace(
                    prev, end=end, provenance=tuple(sorted(set(prev.provenance) | set(t.provenance)))
                )
        flags |= part.event_flags

    merged: dict[str, FieldValue] = {}
    conflicts: list[Conflict] = []
    for name in sorted(candidates):
        value, conflict = _merge_field(name, candidates[name])
        merged[name] = value
        if conflict:
            conflicts.append(conflict)

    biomarkers = {
        name[len(BIOMARKER_PREFIX):]: fv
        for name, fv in merged.items()
        if name.startswith(BIOMARKER_PREFIX)
    }
    case = StructuredCase(
        case_id=record.case_id,
        centre_id=record.centre_id,
        index_mdt_date=record.index_mdt_date,
        age=merged.get("age", UNKNOWN_VALUE),
        histology_group=merged.get("histology_group", UNKNOWN_VALUE),
        figo_stage=merged.get("figo_stage", UNKNOWN_VALUE),
        primary_strategy=merged.get("primary_strategy", UNKNOWN_VALUE),
        biomarkers=biomarkers,
        treatment_history=tuple(treatments[k] for k in sorted(treatments)),
        platinum_free_interval_months=merged.get("platinum_free_interval_months", UNKNOWN_VALUE),
        event_flags=frozenset(flags),
        scene=None,
        conflicts=tuple(conflicts),
        documents=tuple(sorted(docs.values(), key=lambda d: (d.doc_date, d.doc_id))),
    )
    scene, note = assign_scene_with_note(case, rules or DEFAULT_SCENE_RULES)
    return replace(case, scene=scene, scene_note=note)


def structure_case(
    record: RawCaseRecord,
    extractor: AgentBackend,
    rules: SceneRuleTable | None = None,
    retries: int = EXTRACTION_RETRIES,
) -> tuple[StructuredCase, list[ExtractionError]]:
    """The full structuring function: extract every decision-time document, then merge.

    Documents whose extraction fails are skipped and returned for the audit log.
    """
    partials: list[Extraction] = []
    failures: list[ExtractionError] = []
    for doc in record.decision_time_documents():
        try:
            partials.append(extract_document(doc, extractor, retries))
        except ExtractionError as exc:
            logger.warning("case %s: skipping document %s: %s", record.case_id, doc.doc_id, exc.reason)
            failures.append(exc)
    return merge_extractions(record, partials, rules), failures


# --------------------------------------------------------------------------
# validation


def validate_case(case: StructuredCase) -> list[str]:
    """List invariant violations; an empty list means the case is valid."""
    violations: list[str] = []
    doc_ids = case.doc_ids

    def check(name: str, fv: FieldValue) -> None:
        if fv.is_unknown and fv.provenance:
            violations.append(f"{name}: Unknown value carries provenance")
        if not fv.is_unknown and not fv.provenance:
            violations.append(f"{name}: value {fv.value!r} has no provenance")
        for p in fv.provenance:
            if p.doc_id not in doc_ids:
                violations.append(f"{name}: provenance {p.doc_id} not among case documents")

    for name in SCALAR_FIELDS:
        check(name, getattr(case, name))
    for marker, fv in case.biomarkers.items():
        check(BIOMARKER_PREFIX + marker, fv)
    for name, enum_cls in _ENUM_FIELDS.items():
        value = getattr(case, name).value
        if value not in {m.value for m in enum_cls}:
            violations.append(f"{name}: {value!r} outside vocabulary")
    pfi = case.platinum_free_interval_months
    if not pfi.is_unknown and (case.pfi_months() is None or case.pfi_months() < 0):
        violations.append("platinum_free_interval_months: must be a nonnegative number")

    keys = [t.sort_key for t in case.treatment_history]
    for i in range(1, len(keys)):
        if not keys[i - 1] < keys[i]:
            violations.append(f"treatment_history: entry {i} out of time order")
    for i, t in enumerate(case.treatment_history):
        if not t.provenance:
            violations.append(f"treatment_history[{i}]: no provenance")
        if t.end is not None and t.end < t.start:
            violations.append(f"treatment_history[{i}]: ends before it starts")
    if case.scene is None:
        violations.append("scene: not assigned")
    for d in case.documents:
        if d.doc_date > case.index_mdt_date:
            violations.append(f"document {d.doc_id} dated after index MDT date")
    return violations


# --------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneRuleTable:
    evaluation_order: tuple[int, ...] = (5, 2, 3, 4, 1)
    resistant_pfi_below_months: Decimal = Decimal(6)
    histology_pathway_groups: frozenset[str] = frozenset(
        h.value for h in HistologyGroup if h not in (HistologyGroup.EOC, HistologyGroup.UNKNOWN)
    )
    fallback_scene: int = 5


DEFAULT_SCENE_RULES = SceneRuleTable()


def _is_relapse(case: StructuredCase) -> bool:
    return not case.platinum_free_interval_months.is_unknown or any(
        t.line >= 2 for t in case.treatment_history
    )


def assign_scene_with_note(case: StructuredCase, rules: SceneRuleTable) -> tuple[ClinicalScene, str | None]:
    pfi = case.pfi_months()
    relapse = _is_relapse(case)
    tests = {
        5: lambda: bool(case.event_flags),
        2: lambda: case.histology_group.value in rules.histology_pathway_groups,
        3: lambda: relapse and pfi is not None and pfi < rules.resistant_pfi_below_months,
        4: lambda: relapse and pfi is not None and pfi >= rules.resistant_pfi_below_months,
        1: lambda: not relapse,
    }
    for scene_id in rules.evaluation_order:
        if tests[scene_id]():
            return ClinicalScene(scene_id), None
    return ClinicalScene(rules.fallback_scene), "no scene rule matched (relapse without a known PFI); fell back"


def assign_scene(case: StructuredCase, rules: SceneRuleTable = DEFAULT_SCENE_RULES) -> ClinicalScene:
    return assign_scene_with_note(case, rules)[0]


def platinum_free_interval(history: Sequence[TreatmentLine], reference: date) -> Decimal | None:
    """Months from the end of the last platinum line to ``reference``, if both dates exist."""
    ends = [t.end for t in history if t.is_platinum and t.end is not None and t.end <= reference]
    if not ends:
        return None
    days = (reference - max(ends)).days
    return (Decimal(days) / Decimal("30.4375")).quantize(Decimal("0.1"))


# --------------------------------------------------------------------------
# case packets on disk

_DOC_META_SUFFIX = ".meta.json"


def load_case_packet(directory: str | Path) -> RawCaseRecord:
    """Read ``case.meta.json`` plus ``<doc>.txt``/``<doc>.meta.json`` pairs."""
    root = Path(directory)
    try:
        meta = json.loads((root / "case.meta.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CasePacketError(f"{root}: cannot read case.meta.json: {exc}") from exc
    docs = []
    for meta_path in sorted(root.glob(f"*{_DOC_META_SUFFIX}")):
        if meta_path.name == "case.meta.json":
            continue
        dmeta = json.loads(meta_path.read_text(encoding="utf-8"))
        body_path = meta_path.with_name(meta_path.name[: -len(_DOC_META_SUFFIX)] + ".txt")
        try:
            body = body_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise CasePacketError(f"{body_path}: missing document body") from exc
        try:
            docs.append(
                SourceDocument(
                    doc_id=dmeta["doc_id"],
                    doc_type=DocType(dmeta["doc_type"]),
                    doc_date=date.fromisoformat(dmeta["doc_date"]),
                    centre_id=dmeta.get("centre_id", meta.get("centre_id", "")),
                    body=body,
                    meta=dmeta.get("meta", {}),
                )
            )
        except (KeyError, ValueError) as exc:
            raise CasePacketError(f"{meta_path}: bad document metadata: {exc}") from exc
    return RawCaseRecord(
        case_id=meta["case_id"],
        index_mdt_date=date.fromisoformat(meta["index_mdt_date"]),
        documents=tuple(docs),
        centre_id=meta.get("centre_id", ""),
    )


def write_case_packet(record: RawCaseRecord, directory: str | Path) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    (root / "case.meta.json").write_text(
        dump_pretty(
            {
                "case_id": record.case_id,
                "index_mdt_date": record.index_mdt_date.isoformat(),
                "centre_id": record.centre_id,
            }
        ),
        encoding="utf-8",
    )
    for doc in record.documents:
        stem = re.sub(r"[^A-Za-z0-9_.-]", "_", doc.doc_id)
        (root / f"{stem}.txt").write_text(doc.body, encoding="utf-8")
        (root / f"{stem}{_DOC_META_SUFFIX}").write_text(dump_pretty(doc.index_entry()), encoding="utf-8")
    return root


def write_structured_case(case: StructuredCase, path: str | Path) -> None:
    Path(path).write_text(dump_pretty(case.to_dict()), encoding="utf-8")


def load_structured_case(path: str | Path, record: RawCaseRecord | None = None) -> StructuredCase:
    """Load ``structured_case.json``; document bodies are re-attached from ``record``."""
    case = StructuredCase.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    if record is not None:
        bodies = {d.doc_id: d for d in record.documents}
        case = replace(case, documents=tuple(bodies.get(d.doc_id, d) for d in case.documents))
    return case
