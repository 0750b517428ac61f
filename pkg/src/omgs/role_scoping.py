"""Role-scoped packages: which documents, structured fields and evidence each agent sees."""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any

from .canonical import canonical_bytes, dump_pretty
from .case_schema import BIOMARKER_PREFIX, DocType, SourceDocument, StructuredCase
from .evidence_bank import ROLE_QUERY_TERMS, CorpusSnapshot, build_query, search


class Role(str, Enum):
    CHAIR = "Chair"
    ONCOLOGIST = "Oncologist"
    RADIOLOGIST = "Radiologist"
    PATHOLOGIST = "Pathologist"
    NUCLEAR_MEDICINE = "NuclearMedicine"


SPECIALISTS = (Role.ONCOLOGIST, Role.RADIOLOGIST, Role.PATHOLOGIST, Role.NUCLEAR_MEDICINE)

# Field names a projection may carry. "biomarkers" grants every marker;
# "biomarkers.<NAME>" grants one.
PROJECTABLE_FIELDS = frozenset(
    {
        "age",
        "histology_group",
        "figo_stage",
        "primary_strategy",
        "biomarkers",
        "treatment_history",
        "platinum_free_interval_months",
        "event_flags",
        "scene",
        "conflicts",
        "document_index",
    }
)


class AccessConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DocumentRule:
    doc_type: DocType
    require_meta: tuple[tuple[str, Any], ...] = ()

    def admits(self, doc: SourceDocument) -> bool:
        if doc.doc_type is not self.doc_type:
            return False
        return all(doc.meta.get(k) == v for k, v in self.require_meta)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"doc_type": self.doc_type.value}
        if self.require_meta:
            d["require"] = dict(self.require_meta)
        return d


@dataclass(frozen=True)
class RoleAccess:
    documents: tuple[DocumentRule, ...]
    fields: frozenset[str]
    query_template: str

    @property
    def doc_types(self) -> frozenset[DocType]:
        return frozenset(r.doc_type for r in self.documents)

    def admits(self, doc: SourceDocument) -> bool:
        return any(rule.admits(doc) for rule in self.documents)


@dataclass(frozen=True)
class AccessMatrix:
    roles: Mapping[Role, RoleAccess]

    def __getitem__(self, role: Role) -> RoleAccess:
        return self.roles[role]

    def to_dict(self) -> dict[str, Any]:
        return {
            "roles": {
                role.value: {
                    "documents": [r.to_dict() for r in access.documents],
                    "fields": sorted(access.fields),
                    "query_template": access.query_template,
                }
                for role, access in self.roles.items()
            }
        }


DEFAULT_MATRIX_CONFIG: dict[str, Any] = {
    "roles": {
        "Chair": {
            "documents": [],
            "fields": sorted(PROJECTABLE_FIELDS),
            "query_template": "chair",
        },
        "Oncologist": {
            "documents": [
                {"doc_type": "ClinicalNote"},
                {"doc_type": "Laboratory"},
                {"doc_type": "Genomic"},
                {"doc_type": "Operative"},
                {"doc_type": "MdtNote"},
            ],
            "fields": sorted(PROJECTABLE_FIELDS - {"document_index"}),
            "query_template": "oncology",
        },
        "Radiologist": {
            "documents": [{"doc_type": "Imaging"}],
            "fields": ["age", "event_flags", "figo_stage", "histology_group", "primary_strategy", "scene", "treatment_history"],
            "query_template": "radiology",
        },
        "Pathologist": {
            "documents": [{"doc_type": "Pathology"}, {"doc_type": "Genomic"}],
            "fields": ["age", "biomarkers", "figo_stage", "histology_group", "scene"],
            "query_template": "pathology",
        },
        "NuclearMedicine": {
            "documents": [{"doc_type": "Imaging", "require": {"nuclear": True}}, {"doc_type": "Laboratory"}],
            "fields": [
                "biomarkers.CA-125",
                "biomarkers.HE4",
                "event_flags",
                "figo_stage",
                "histology_group",
                "platinum_free_interval_months",
                "scene",
                "treatment_history",
            ],
            "query_template": "nuclear",
        },
    }
}


def load_access_matrix(config: Mapping[str, Any] | str | Path | None = None) -> AccessMatrix:
    """Validate an access-matrix config (dict or JSON file path); ``None`` loads the default."""
    if config is None:
        config = DEFAULT_MATRIX_CONFIG
    elif isinstance(config, (str, Path)):
        try:
            config = json.loads(Path(config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise AccessConfigError(f"cannot read access matrix {config}: {exc}") from exc
    roles_cfg = config.get("roles") if isinstance(config, Mapping) else None
    if not isinstance(roles_cfg, Mapping):
        raise AccessConfigError("access matrix needs a 'roles' object")
    roles: dict[Role, RoleAccess] = {}
    for name, spec in roles_cfg.items():
        try:
            role = Role(name)
        except ValueError:
            raise AccessConfigError(f"unknown role {name!r}") from None
        rules = []
        for d in spec.get("documents", []):
            try:
                dt = DocType(d["doc_type"])
            except (KeyError, ValueError):
                raise AccessConfigError(f"{name}: unknown doc_type {d.get('doc_type')!r}") from None
            rules.append(DocumentRule(dt, tuple(sorted((d.get("require") or {}).items()))))
        fields = frozenset(spec.get("fields", ()))
        if not fields:
            raise AccessConfigError(f"{name}: field set must be nonempty")
        for f in fields:
            if f not in PROJECTABLE_FIELDS and not f.startswith(BIOMARKER_PREFIX):
                raise AccessConfigError(f"{name}: unknown field {f!r}")
        template = spec.get("query_template", "")
        if template not in ROLE_QUERY_TERMS:
            raise AccessConfigError(f"{name}: unknown query template {template!r}")
        roles[role] = RoleAccess(tuple(rules), fields, template)
    missing = [r.value for r in Role if r not in roles]
    if missing:
        raise AccessConfigError(f"access matrix is not total; missing roles: {missing}")
    return AccessMatrix({r: roles[r] for r in Role})


DEFAULT_ACCESS_MATRIX = load_access_matrix()


def project_case(case: StructuredCase, fields: Iterable[str]) -> dict[str, Any]:
    """Keep only the allowed structured fields, in the structured_case.json key order."""
    allowed = set(fields)
    full = case.to_dict()
    out: dict[str, Any] = {"case_id": case.case_id, "index_mdt_date": full["index_mdt_date"]}
    if "scene" in allowed:
        out["scene"] = full["scene"]
    if "age" in allowed:
        out["demographics"] = full["demographics"]
    for name in ("histology_group", "figo_stage", "primary_strategy"):
        if name in allowed:
            out[name] = full[name]
    markers = {
        k: v
        for k, v in full["biomarkers"].items()
        if "biomarkers" in allowed or f"{BIOMARKER_PREFIX}{k}" in allowed
    }
    if markers or "biomarkers" in allowed:
        out["biomarkers"] = markers
    for name in ("treatment_history", "platinum_free_interval_months", "event_flags", "conflicts"):
        if name in allowed:
            out[name] = full[name]
    if "document_index" in allowed:
        out["document_index"] = full["documents"]
    return out


@dataclass(frozen=True)
class RolePackage:
    role: Role
    case_projection: Mapping[str, Any]
    documents: tuple[SourceDocument, ...]
    evidence: tuple[tuple[str, float], ...]
    snapshot_id: str

    def to_dict(self, snapshot: CorpusSnapshot | None = None) -> dict[str, Any]:
        """Context handed to the agent; evidence text is included when ``snapshot`` is given."""
        evidence = []
        for eid, sim in self.evidence:
            item: dict[str, Any] = {"entry_id": eid, "similarity": round(sim, 12)}
            entry = snapshot.get(eid) if snapshot is not None else None
            if entry is not None:
                item |= {"title": entry.title, "pmid": entry.pmid, "tier": entry.tier.value, "text": entry.chunk_text}
            evidence.append(item)
        return {
            "role": self.role.value,
            "snapshot_id": self.snapshot_id,
            "case": dict(self.case_projection),
            "documents": [d.index_entry() | {"body": d.body} for d in self.documents],
            "evidence": evidence,
        }

    def serialize(self) -> bytes:
        return canonical_bytes(self.to_dict())


def build_role_package(
    case: StructuredCase,
    role: Role,
    matrix: AccessMatrix,
    snapshot: CorpusSnapshot,
    k: int = 10,
) -> RolePackage:
    access = matrix[role]
    docs = tuple(d for d in case.documents if access.admits(d))
    evidence = tuple(search(build_query(case, access.query_template), snapshot, k))
    return RolePackage(role, project_case(case, access.fields), docs, evidence, snapshot.snapshot_id)


def build_all_packages(
    case: StructuredCase, matrix: AccessMatrix, snapshot: CorpusSnapshot, k: int = 10
) -> dict[Role, RolePackage]:
    return {role: build_role_package(case, role, matrix, snapshot, k) for role in Role}


def export_default_matrix(path: str | Path) -> None:
    Path(path).write_text(dump_pretty(DEFAULT_MATRIX_CONFIG), encoding="utf-8")
