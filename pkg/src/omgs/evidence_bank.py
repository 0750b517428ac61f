"""Two-stream evidence bank: ingestion, chunking, embedding, dedup, frozen snapshots, search.

Snapshots are content addressed. ``snapshot_id`` hashes the embedder id, the
dimension and every entry (including the little-endian float32 bytes of its
embedding), so the same corpus frozen on another machine gets the same id.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Any, Protocol

import numpy as np

from .canonical import canonical_bytes, content_hash, dump_pretty, sha256_hex
from .case_schema import HISTOLOGY_LABELS, UNKNOWN, DocType, Provenance, StructuredCase

logger = logging.getLogger(__name__)

CHUNK_SIZE = 1000
CHUNK_OVERLAP = 200
DEFAULT_K = 10
DEFAULT_DIMENSION = 256
GENERIC_DISEASE_TERM = "ovarian tumour"


class Stream(str, Enum):
    GUIDELINE = "Guideline"
    LITERATURE = "Literature"


class Tier(str, Enum):
    SYSTEMATIC_REVIEW = "SystematicReview"
    META_ANALYSIS = "MetaAnalysis"
    PHASE_III_RCT = "PhaseIIIRCT"
    COHORT_STUDY = "CohortStudy"
    GUIDELINE_TEXT = "GuidelineText"
    OTHER = "Other"


class IngestionError(RuntimeError):
    pass


class CorpusFormatError(IngestionError):
    def __init__(self, path: str, line_no: int, reason: str) -> None:
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


class DimensionMismatchError(ValueError):
    pass


class EmbedderError(RuntimeError):
    def __init__(self, message: str, *, retryable: bool = True) -> None:
        super().__init__(message)
        self.retryable = retryable


class SnapshotIntegrityError(RuntimeError):
    pass


@dataclass(frozen=True)
class RawEvidenceRecord:
    stream: Stream
    title: str
    text: str
    pmid: str | None = None
    meta: Mapping[str, Any] = field(default_factory=dict)
    source: str = ""


@dataclass(frozen=True, eq=False)
class EvidenceEntry:
    entry_id: str
    stream: Stream
    title: str
    pmid: str | None
    tier: Tier
    chunk_text: str
    embedding: np.ndarray | None = None
    corpus_version: str | None = None

    def content_key(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "stream": self.stream.value,
            "title": self.title,
            "pmid": self.pmid,
            "tier": self.tier.value,
            "chunk_text": self.chunk_text,
        }


@dataclass(frozen=True)
class PatientReportProvenance:
    doc_id: str
    doc_type: DocType
    doc_date: Any

    @classmethod
    def of(cls, prov: Provenance) -> PatientReportProvenance:
        return cls(prov.doc_id, prov.doc_type, prov.doc_date)


@dataclass(frozen=True)
class Unresolved:
    citation_id: str


# --------------------------------------------------------------------------
# ingestion


def ingest_corpus(
    paths: Iterable[str | Path], stream: Stream | str | None = None
) -> list[RawEvidenceRecord]:
    """Read JSONL corpus files (``{stream, title, pmid?, text, meta?}`` per line).

    A line that is not valid JSON aborts with :class:`CorpusFormatError` naming
    the line. A valid JSON record missing required fields, or belonging to a
    different stream than ``stream``, is skipped and logged.
    """
    want = Stream(stream) if stream is not None else None
    out: list[RawEvidenceRecord] = []
    for path in paths:
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except (OSError, UnicodeDecodeError) as exc:
            raise IngestionError(f"cannot read corpus file {path}: {exc}") from exc
        for line_no, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise CorpusFormatError(str(path), line_no, f"invalid JSON: {exc}") from exc
            where = f"{path.name}:{line_no}"
            if not isinstance(obj, dict):
                logger.warning("skipping %s: record is not an object", where)
                continue
            title, text = obj.get("title"), obj.get("text")
            if not isinstance(title, str) or not title.strip() or not isinstance(text, str) or not text.strip():
                logger.warning("skipping %s: missing title or text", where)
                continue
            raw_stream = obj.get("stream", want.value if want else None)
            try:
                rec_stream = Stream(raw_stream)
            except ValueError:
                logger.warning("skipping %s: unknown stream %r", where, raw_stream)
                continue
            if want is not None and rec_stream is not want:
                logger.warning("skipping %s: stream %s not requested", where, rec_stream.value)
                continue
            pmid = obj.get("pmid")
            out.append(
                RawEvidenceRecord(
                    stream=rec_stream,
                    title=title,
                    text=text,
                    pmid=str(pmid) if pmid not in (None, "") else None,
                    meta=obj.get("meta") or {},
                    source=where,
                )
            )
    return out


# --------------------------------------------------------------------------
# chunking


def chunk_spans(text: str, size: int = CHUNK_SIZE, overlap: int = CHUNK_OVERLAP) -> list[tuple[int, int]]:
    """Character spans of chunks no longer than ``size`` that break after whitespace.

    Consecutive spans overlap by at most ``overlap`` characters; the overlap
    starts at a word boundary. A run without whitespace longer than ``size``
    is cut hard.
    """
    if size <= 0 or not 0 <= overlap < size:
        raise ValueError("need size > 0 and 0 <= overlap < size")
    n = len(text)
    spans: list[tuple[int, int]] = []
    start = 0
    while start < n:
        end = min(start + size, n)
        if end < n:
            cut = max(text.rfind(" ", start, end), text.rfind("\n", start, end), text.rfind("\t", start, end))
            if cut > start:
                end = cut + 1
        spans.append((start, end))
        if end >= n:
            break
        nxt = end
        if overlap:
            lo = max(end - overlap, start + 1)
            for i in range(lo, end):
                if text[i - 1].isspace() and not text[i].isspace():
                    nxt = i
                    break
        start = nxt
    return spans


def chunk_text(text: str, size: int = CHUNK_SIZE, overlap: int = CHUNK_OVERLAP) -> list[str]:
    return [text[a:b] for a, b in chunk_spans(text, size, overlap)]


# --------------------------------------------------------------------------
# embedding


class Embedder(Protocol):
    embedder_id: str
    dimension: int

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, dimension: int) -> int:
    return int(sha256_hex(token)[:16], 16) % dimension


class TokenHashEmbedder:
    """Offline test embedder: hash each token into one of ``dimension`` buckets, count, L2-normalize."""

    def __init__(self, dimension: int = DEFAULT_DIMENSION) -> None:
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.embedder_id = f"token-hash-bag/sha256/{dimension}"
        self._cache: dict[str, int] = {}

    def _bucket(self, token: str) -> int:
        b = self._cache.get(token)
        if b is None:
            b = self._cache[token] = token_bucket(token, self.dimension)
        return b

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for row, text in enumerate(texts):
            for tok in tokenize(text):
                out[row, self._bucket(tok)] += 1.0
        return out


def embed(texts: Sequence[str], embedder: Embedder, retries: int = 2) -> np.ndarray:
    """Unit-normalized float32 vectors, one row per text.

    Texts with no tokens map to the zero vector (cosine 0 with everything).
    """
    if embedder.dimension <= 0:
        raise DimensionMismatchError("embedder dimension must be positive")
    for attempt in range(retries + 1):
        try:
            raw = np.asarray(embedder.embed_batch(list(texts)), dtype=np.float64)
            break
        except EmbedderError as exc:
            if not exc.retryable or attempt == retries:
                raise
            logger.warning("embedder failure (attempt %d): %s", attempt + 1, exc)
    if raw.shape != (len(texts), embedder.dimension):
        raise DimensionMismatchError(
            f"embedder {embedder.embedder_id} returned shape {raw.shape}, "
            f"expected {(len(texts), embedder.dimension)}"
        )
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (raw / norms).astype(np.float32)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two float32 vectors with a correctly rounded dot product.

    float32 x float32 products are exact in float64 and ``math.fsum`` rounds
    the sum once, so the value does not depend on summation order or BLAS.
    """
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    dot = math.fsum((a64 * b64).tolist())
    na = math.fsum((a64 * a64).tolist())
    nb = math.fsum((b64 * b64).tolist())
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / math.sqrt(na * nb)


# --------------------------------------------------------------------------
# dedup / normalization


_WS_RE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    return _WS_RE.sub(" ", text).strip()


def classify_tier(stream: Stream, title: str, meta: Mapping[str, Any] | None = None) -> Tier:
    if stream is Stream.GUIDELINE:
        return Tier.GUIDELINE_TEXT
    parts = [title]
    for key in ("publication_type", "journal", "source", "design"):
        value = (meta or {}).get(key)
        if isinstance(value, str):
            parts.append(value)
        elif isinstance(value, (list, tuple)):
            parts.extend(str(v) for v in value)
    hay = " ".join(parts).lower()
    if "cochrane" in hay or "systematic review" in hay:
        return Tier.SYSTEMATIC_REVIEW
    if "meta-analysis" in hay or "meta analysis" in hay:
        return Tier.META_ANALYSIS
    if ("phase iii" in hay or "phase 3" in hay) and "randomi" in hay:
        return Tier.PHASE_III_RCT
    if "cohort" in hay:
        return Tier.COHORT_STUDY
    return Tier.OTHER


def make_entry_id(stream: Stream, title: str, chunk: str) -> str:
    return "EB-" + content_hash([stream.value, title, chunk])[:16]


def dedup_normalize(
    records: Iterable[RawEvidenceRecord | EvidenceEntry],
    size: int = CHUNK_SIZE,
    overlap: int = CHUNK_OVERLAP,
) -> list[EvidenceEntry]:
    """Collapse duplicate records, classify tiers and chunk into entries.

    Raw records collapse on shared PMID or identical normalized title+text
    (first occurrence wins). Entries passed back in are kept as they are and
    collapse only on ``entry_id``, so applying this twice changes nothing.
    Output is sorted by ``entry_id``.
    """
    seen_pmids: set[str] = set()
    seen_content: set[tuple[str, str]] = set()
    entries: dict[str, EvidenceEntry] = {}
    for rec in records:
        if isinstance(rec, EvidenceEntry):
            entries.setdefault(rec.entry_id, rec)
            continue
        title = normalize_text(rec.title)
        text = normalize_text(rec.text)
        key = (title.lower(), text.lower())
        if rec.pmid and rec.pmid in seen_pmids:
            logger.info("dedup: dropping %s (duplicate pmid %s)", rec.source, rec.pmid)
            continue
        if key in seen_content:
            logger.info("dedup: dropping %s (duplicate content)", rec.source)
            continue
        if rec.pmid:
            seen_pmids.add(rec.pmid)
        seen_content.add(key)
        tier = classify_tier(rec.stream, title, rec.meta)
        for chunk in chunk_text(text, size, overlap):
            chunk = chunk.strip()
            if not chunk:
                continue
            eid = make_entry_id(rec.stream, title, chunk)
            entries.setdefault(eid, EvidenceEntry(eid, rec.stream, title, rec.pmid, tier, chunk))
    return [entries[k] for k in sorted(entries)]


def embed_entries(entries: Sequence[EvidenceEntry], embedder: Embedder, batch: int = 256) -> list[EvidenceEntry]:
    out: list[EvidenceEntry] = []
    for i in range(0, len(entries), batch):
        part = entries[i : i + batch]
        vecs = embed([e.chunk_text for e in part], embedder)
        for e, v in zip(part, vecs):
            v = v.copy()
            v.setflags(write=False)
            out.append(
                EvidenceEntry(e.entry_id, e.stream, e.title, e.pmid, e.tier, e.chunk_text, v, e.corpus_version)
            )
    return out


# --------------------------------------------------------------------------
# snapshots


def _vector_b64(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def _vector_from_b64(data: str, dimension: int) -> np.ndarray:
    vec = np.frombuffer(base64.b64decode(data), dtype="<f4").astype(np.float32)
    if vec.shape != (dimension,):
        raise DimensionMismatchError(f"stored embedding has {vec.size} values, expected {dimension}")
    vec.setflags(write=False)
    return vec


def compute_snapshot_id(entries: Iterable[EvidenceEntry], embedder_id: str, dimension: int) -> str:
    rows = [
        e.content_key() | {"embedding": _vector_b64(e.embedding)}
        for e in sorted(entries, key=lambda e: e.entry_id)
    ]
    return "snap-" + sha256_hex(
        canonical_bytes({"embedder_id": embedder_id, "dimension": dimension, "entries": rows})
    )[:24]


@dataclass(frozen=True, eq=False)
class CorpusSnapshot:
    snapshot_id: str
    phase_label: str
    embedder_id: str
    dimension: int
    entries: Mapping[str, EvidenceEntry]
    _ids: tuple[str, ...] = field(repr=False, default=())
    _matrix: np.ndarray | None = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self.entries

    @property
    def entry_ids(self) -> tuple[str, ...]:
        return self._ids

    def get(self, entry_id: str) -> EvidenceEntry | None:
        return self.entries.get(entry_id)


def freeze_snapshot(entries: Sequence[EvidenceEntry], embedder_id: str, phase_label: str, dimension: int | None = None) -> CorpusSnapshot:
    """Freeze embedded entries into an immutable, content-addressed snapshot."""
    if dimension is None:
        dimension = entries[0].embedding.shape[0] if entries and entries[0].embedding is not None else 0
    if dimension <= 0:
        raise DimensionMismatchError("snapshot dimension must be positive")
    ids = [e.entry_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate entry_id in snapshot input")
    for e in entries:
        if e.embedding is None:
            raise DimensionMismatchError(f"entry {e.entry_id} has no embedding")
        if e.embedding.shape != (dimension,):
            raise DimensionMismatchError(
                f"entry {e.entry_id} embedding has shape {e.embedding.shape}, expected ({dimension},)"
            )
    snap_id = compute_snapshot_id(entries, embedder_id, dimension)
    frozen: dict[str, EvidenceEntry] = {}
    for e in sorted(entries, key=lambda e: e.entry_id):
        vec = np.array(e.embedding, dtype=np.float32)
        vec.setflags(write=False)
        frozen[e.entry_id] = EvidenceEntry(e.entry_id, e.stream, e.title, e.pmid, e.tier, e.chunk_text, vec, snap_id)
    order = tuple(frozen)
    matrix = (
        np.vstack([frozen[i].embedding for i in order]).astype(np.float64)
        if order
        else np.zeros((0, dimension))
    )
    matrix.setflags(write=False)
    return CorpusSnapshot(snap_id, phase_label, embedder_id, dimension, MappingProxyType(frozen), order, matrix)


def save_snapshot(snapshot: CorpusSnapshot, directory: str | Path) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "snapshot_id": snapshot.snapshot_id,
        "embedder_id": snapshot.embedder_id,
        "dimension": snapshot.dimension,
        "phase_label": snapshot.phase_label,
        "entry_count": len(snapshot),
    }
    (root / "manifest.json").write_text(dump_pretty(manifest), encoding="utf-8")
    with open(root / "entries.jsonl", "w", encoding="utf-8") as fh:
        for eid in snapshot.entry_ids:
            e = snapshot.entries[eid]
            row = e.content_key() | {"embedding": _vector_b64(e.embedding)}
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    return root


def load_snapshot(directory: str | Path) -> CorpusSnapshot:
    """Load a snapshot directory and verify its id against the content."""
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    dim = int(manifest["dimension"])
    entries = []
    with open(root / "entries.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            entries.append(
                EvidenceEntry(
                    row["entry_id"],
                    Stream(row["stream"]),
                    row["title"],
                    row.get("pmid"),
                    Tier(row["tier"]),
                    row["chunk_text"],
                    _vector_from_b64(row["embedding"], dim),
                )
            )
    snap = freeze_snapshot(entries, manifest["embedder_id"], manifest["phase_label"], dim)
    if snap.snapshot_id != manifest["snapshot_id"]:
        raise SnapshotIntegrityError(
            f"{root}: stored snapshot_id {manifest['snapshot_id']} != recomputed {snap.snapshot_id}"
        )
    return snap


# --------------------------------------------------------------------------
# queries and search


ROLE_QUERY_TERMS: dict[str, tuple[str, ...]] = {
    "chair": ("multidisciplinary tumour board", "guideline", "treatment strategy"),
    "oncology": ("systemic therapy", "chemotherapy", "maintenance", "PARP inhibitor", "bevacizumab"),
    "radiology": ("CT", "MRI", "imaging", "resectability", "radiological staging"),
    "pathology": ("histopathology", "immunohistochemistry", "BRCA", "HRD", "molecular testing"),
    "nuclear": ("PET/CT", "FDG", "metabolic response", "tumour markers", "CA-125"),
}


@dataclass(frozen=True)
class EvidenceQuery:
    disease_context: str
    scene_label: str
    prior_treatments: tuple[str, ...] = ()
    free_terms: tuple[str, ...] = ()

    def render(self) -> str:
        parts = [self.disease_context, f"scene: {self.scene_label}"]
        if self.prior_treatments:
            parts.append("prior treatments: " + ", ".join(self.prior_treatments))
        if self.free_terms:
            parts.append("focus: " + ", ".join(self.free_terms))
        return " | ".join(parts)


DEFAULT_ROLE_TEMPLATES = {
    "Chair": "chair",
    "Oncologist": "oncology",
    "Radiologist": "radiology",
    "Pathologist": "pathology",
    "NuclearMedicine": "nuclear",
}


def build_query(case: StructuredCase, role: str) -> EvidenceQuery:
    """Deterministic evidence query from the structured case and a role's query template.

    ``role`` is a role name (mapped through ``DEFAULT_ROLE_TEMPLATES``) or a
    template id from ``ROLE_QUERY_TERMS``.
    """
    template_id = DEFAULT_ROLE_TEMPLATES.get(str(getattr(role, "value", role)), role)
    hist = case.histology_group.value
    disease = GENERIC_DISEASE_TERM
    if hist != UNKNOWN:
        disease = f"{HISTOLOGY_LABELS.get(hist, hist)} ({GENERIC_DISEASE_TERM})"
        stage = case.figo_stage.value
        if stage != UNKNOWN:
            disease += f", FIGO stage {stage}"
    scene_label = case.scene.label if case.scene else "unassigned scene"
    prior = []
    for t in case.treatment_history:
        if t.label not in prior:
            prior.append(t.label)
    try:
        terms = ROLE_QUERY_TERMS[template_id]
    except KeyError:
        raise KeyError(f"unknown query template {template_id!r}") from None
    return EvidenceQuery(disease, scene_label, tuple(prior), terms)


def search(
    query: EvidenceQuery | str,
    snapshot: CorpusSnapshot,
    k: int = DEFAULT_K,
    embedder: Embedder | None = None,
    tiers: Iterable[Tier] | None = None,
) -> list[tuple[str, float]]:
    """Top-``k`` entries by cosine similarity, ties broken by ascending entry_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(snapshot) == 0:
        return []
    embedder = embedder or embedder_for(snapshot)
    if embedder.embedder_id != snapshot.embedder_id:
        raise ValueError(f"query embedder {embedder.embedder_id} != snapshot embedder {snapshot.embedder_id}")
    text = query.render() if isinstance(query, EvidenceQuery) else query
    q = embed([text], embedder)[0].astype(np.float64)
    qn = math.fsum((q * q).tolist())
    products = snapshot._matrix * q
    norms = snapshot._matrix * snapshot._matrix
    allowed = set(tiers) if tiers is not None else None
    scored = []
    for i, eid in enumerate(snapshot.entry_ids):
        if allowed is not None and snapshot.entries[eid].tier not in allowed:
            continue
        en = math.fsum(norms[i].tolist())
        sim = 0.0 if qn == 0.0 or en == 0.0 else math.fsum(products[i].tolist()) / math.sqrt(qn * en)
        scored.append((-sim, eid))
    scored.sort()
    return [(eid, -neg) for neg, eid in scored[:k]]


def embedder_for(snapshot: CorpusSnapshot) -> Embedder:
    """Rebuild the embedder a snapshot was frozen with (offline embedders only)."""
    if snapshot.embedder_id.startswith("token-hash-bag/"):
        return TokenHashEmbedder(snapshot.dimension)
    raise ValueError(f"no local embedder for {snapshot.embedder_id}; pass one explicitly")


def resolve_citation(
    citation_id: str, snapshot: CorpusSnapshot, case: StructuredCase | None
) -> EvidenceEntry | PatientReportProvenance | Unresolved:
    """Exact lookup against snapshot entry ids, then the case's document ids."""
    entry = snapshot.get(citation_id)
    if entry is not None:
        return entry
    if case is not None:
        doc = case.document(citation_id)
        if doc is not None:
            return PatientReportProvenance(doc.doc_id, doc.doc_type, doc.doc_date)
    return Unresolved(citation_id)


def build_snapshot_from_records(
    records: Sequence[RawEvidenceRecord],
    embedder: Embedder,
    phase_label: str,
    size: int = CHUNK_SIZE,
    overlap: int = CHUNK_OVERLAP,
) -> CorpusSnapshot:
    entries = embed_entries(dedup_normalize(records, size, overlap), embedder)
    return freeze_snapshot(entries, embedder.embedder_id, phase_label, embedder.dimension)
