"""Claim-level citation-fidelity audit and rule-based Evidence capping.

Reviewers judge each invoked citation against the claim it backs. The final
verdicts then bound the Evidence score from above: any partially supported
citation caps E at 3, any unsupported (or hallucinated) one caps it at 2.
The cap is an upper bound only; it never raises a score and never touches
S, P, A or R.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any

from .spear import SpearScore, TableError


class Verdict(str, Enum):
    SUPPORTED = "Supported"
    PARTIALLY_SUPPORTED = "PartiallySupported"
    UNSUPPORTED = "Unsupported"


class CapClass(str, Enum):
    NO_CAP = "NoCap"
    CAP_AT_3 = "CapAt3"
    CAP_AT_LE2 = "CapAtLe2"


CAP_CEILINGS = {CapClass.CAP_AT_3: 3, CapClass.CAP_AT_LE2: 2}


class UnresolvedClaimError(ValueError):
    pass


@dataclass(frozen=True)
class ReviewerVerdict:
    reviewer_id: str
    verdict: Verdict
    adjudicator: bool = False


@dataclass(frozen=True)
class ClaimCitation:
    claim_text: str
    citation_id: str
    verdicts: tuple[ReviewerVerdict, ...]
    claim_id: str = ""

    @property
    def final_verdict(self) -> Verdict | None:
        return adjudicate(self.verdicts) if self.verdicts else None


def adjudicate(verdicts: Sequence[ReviewerVerdict]) -> Verdict:
    """Agreeing primary reviewers decide; otherwise the adjudicator's verdict is final."""
    if not verdicts:
        raise UnresolvedClaimError("no verdicts recorded")
    primaries = [v for v in verdicts if not v.adjudicator]
    referee = [v for v in verdicts if v.adjudicator]
    if len(primaries) >= 2 and len({v.verdict for v in primaries}) == 1:
        return primaries[0].verdict
    if referee:
        return referee[-1].verdict
    if len(primaries) == 1:
        return primaries[0].verdict
    raise UnresolvedClaimError(
        "primary reviewers disagree (" + ", ".join(v.verdict.value for v in primaries) + ") and no adjudicator verdict"
    )


def apply_evidence_cap(initial_e: int, verdicts: Iterable[Verdict]) -> tuple[int, CapClass]:
    if isinstance(initial_e, bool) or initial_e not in (1, 2, 3, 4, 5):
        raise ValueError(f"initial E {initial_e!r} outside 1..5")
    vs = set(verdicts)
    if Verdict.UNSUPPORTED in vs:
        cls = CapClass.CAP_AT_LE2
    elif Verdict.PARTIALLY_SUPPORTED in vs:
        cls = CapClass.CAP_AT_3
    else:
        return initial_e, CapClass.NO_CAP
    return min(initial_e, CAP_CEILINGS[cls]), cls


@dataclass(frozen=True)
class AuditRecord:
    case_id: str
    initial_e: int
    claims: tuple[ClaimCitation, ...]
    capped_e: int
    cap_class: CapClass
    arm: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "arm": self.arm,
            "initial_E": self.initial_e,
            "capped_E": self.capped_e,
            "cap_class": self.cap_class.value,
            "claims": [
                {
                    "claim_id": c.claim_id,
                    "citation_id": c.citation_id,
                    "final_verdict": c.final_verdict.value if c.final_verdict else None,
                }
                for c in self.claims
            ],
        }


def audit_case(case_id: str, initial_e: int, claims: Sequence[ClaimCitation], arm: str = "") -> AuditRecord:
    finals = [adjudicate(c.verdicts) for c in claims]
    capped, cls = apply_evidence_cap(initial_e, finals)
    return AuditRecord(case_id, initial_e, tuple(claims), capped, cls, arm)


def apply_cap_to_score(score: SpearScore, record: AuditRecord) -> SpearScore:
    return score.replace(E=min(score.E, record.capped_e))


def audit_frequency_report(records: Sequence[AuditRecord]) -> dict[CapClass, Fraction]:
    if not records:
        raise ValueError("no audit records")
    n = len(records)
    return {cls: Fraction(sum(1 for r in records if r.cap_class is cls), n) for cls in CapClass}


def format_percentages(report: Mapping[CapClass, Fraction]) -> dict[str, str]:
    def pct(x: Fraction) -> str:
        v = x * 100
        return f"{int(v)}%" if v.denominator == 1 else f"{float(v):.1f}%"

    return {cls.value: pct(report[cls]) for cls in CapClass}


# --------------------------------------------------------------------------
# CSV input: case_id, claim_id, citation_id, reviewer_id, verdict [, role, arm, claim_text]

AUDIT_COLUMNS = ("case_id", "claim_id", "citation_id", "reviewer_id", "verdict")


def read_audit_table(path: str | Path) -> dict[tuple[str, str], list[ClaimCitation]]:
    """Group reviewer rows into claims per (case_id, arm).

    Without a ``role`` column the first two distinct reviewers of a claim are
    the primary reviewers and any later reviewer is the adjudicator.
    """
    claims: dict[tuple[str, str], dict[str, list[Any]]] = defaultdict(dict)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or ()
        missing = [c for c in AUDIT_COLUMNS if c not in header]
        if missing:
            raise TableError(1, missing[0], "column missing from header")
        has_role = "role" in header
        for i, rec in enumerate(reader, start=2):
            try:
                verdict = Verdict(rec["verdict"])
            except ValueError:
                raise TableError(i, "verdict", f"unknown verdict {rec['verdict']!r}") from None
            for col in ("case_id", "claim_id", "reviewer_id"):
                if not rec[col]:
                    raise TableError(i, col, "empty")
            key = (rec["case_id"], rec.get("arm") or "")
            slot = claims[key].setdefault(rec["claim_id"], [rec["citation_id"], rec.get("claim_text") or "", []])
            reviewers = slot[2]
            if has_role:
                role = (rec["role"] or "primary").lower()
                if role not in ("primary", "adjudicator"):
                    raise TableError(i, "role", f"unknown role {rec['role']!r}")
                is_ref = role == "adjudicator"
            else:
                is_ref = len({r.reviewer_id for r in reviewers}) >= 2 and rec["reviewer_id"] not in {
                    r.reviewer_id for r in reviewers
                }
            reviewers.append(ReviewerVerdict(rec["reviewer_id"], verdict, is_ref))
    return {
        key: [ClaimCitation(text, cid, tuple(revs), claim_id) for claim_id, (cid, text, revs) in sorted(per.items())]
        for key, per in sorted(claims.items())
    }


# --------------------------------------------------------------------------
# audit worksheets


@dataclass(frozen=True)
class ClaimToAudit:
    claim_id: str
    claim_text: str
    citation_id: str


def claims_to_audit(summary: Any, transcript: Any = None, include_transcript: bool = False) -> list[ClaimToAudit]:
    """Citations a reviewer must judge, one row per (claim, citation).

    By default only citations invoked in the final summary are listed. With
    ``include_transcript`` the accepted deliberation messages are added too.
    """
    rows = [
        ClaimToAudit("final_assessment", summary.final_assessment.text, c) for c in summary.final_assessment.citations
    ]
    rows += [
        ClaimToAudit("core_treatment_strategy", summary.core_treatment_strategy.text, c)
        for c in summary.core_treatment_strategy.citations
    ]
    for i, t in enumerate(summary.change_triggers):
        rows += [ClaimToAudit(f"change_triggers[{i}]", t.condition, c) for c in t.citations]
    if include_transcript:
        if transcript is None:
            raise ValueError("transcript-wide audit needs the transcript")
        for m in transcript.messages:
            if not m.accepted or m.kind.value == "ChairSummary":
                continue
            text = str(m.content.get("assessment") or m.content.get("content") or "")
            rows += [ClaimToAudit(f"msg{m.seq}:{m.role.value}", text, c) for c in m.citations]
    return rows


def audit_worksheet_csv(case_id: str, claims: Sequence[ClaimToAudit], arm: str = "") -> str:
    """Blank reviewer worksheet; reviewers fill reviewer_id and verdict."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*AUDIT_COLUMNS, "arm", "claim_text"])
    for c in claims:
        w.writerow([case_id, c.claim_id, c.citation_id, "", "", arm, c.claim_text])
    return buf.getvalue()
