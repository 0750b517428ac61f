from __future__ import annotations

import csv
import io
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from omgs.backends import FunctionBackend
from omgs.citation_audit import (
    AUDIT_COLUMNS,
    AuditRecord,
    CapClass,
    ClaimCitation,
    ReviewerVerdict,
    UnresolvedClaimError,
    Verdict,
    adjudicate,
    apply_cap_to_score,
    apply_evidence_cap,
    audit_case,
    audit_frequency_report,
    audit_worksheet_csv,
    claims_to_audit,
    format_percentages,
    read_audit_table,
)
from omgs.deliberation import run_case
from omgs.spear import SpearScore, TableError
from omgs.synthetic import agent_policy

SUP, PART, UNS = Verdict.SUPPORTED, Verdict.PARTIALLY_SUPPORTED, Verdict.UNSUPPORTED
verdict_lists = st.lists(st.sampled_from(list(Verdict)), max_size=6)


def rv(rid, v, adj=False):
    return ReviewerVerdict(rid, v, adj)


# --------------------------------------------------------------------------
# adjudication


def test_agreeing_primaries_decide():
    assert adjudicate([rv("a", SUP), rv("b", SUP)]) is SUP


def test_adjudicator_resolves_disagreement():
    assert adjudicate([rv("a", SUP), rv("b", UNS), rv("c", PART, True)]) is PART


def test_disagreement_without_adjudicator():
    with pytest.raises(UnresolvedClaimError):
        adjudicate([rv("a", SUP), rv("b", PART)])


def test_single_reviewer_passes_through():
    assert adjudicate([rv("a", UNS)]) is UNS


def test_final_verdict_absent_without_reviews():
    assert ClaimCitation("x", "EB-1", ()).final_verdict is None


# --------------------------------------------------------------------------
# capping


@pytest.mark.parametrize(
    "e, verdicts, out",
    [
        (5, [SUP, SUP], (5, CapClass.NO_CAP)),
        (5, [SUP, PART], (3, CapClass.CAP_AT_3)),
        (4, [UNS], (2, CapClass.CAP_AT_LE2)),
        (2, [PART], (2, CapClass.CAP_AT_3)),
    ],
)
def test_cap_examples(e, verdicts, out):
    assert apply_evidence_cap(e, verdicts) == out


@given(st.integers(1, 5), verdict_lists)
def test_cap_is_an_idempotent_upper_bound(e, vs):
    capped, cls = apply_evidence_cap(e, vs)
    assert capped <= e
    assert apply_evidence_cap(capped, vs) == (capped, cls)


@given(st.integers(1, 5), verdict_lists, st.sampled_from(list(Verdict)))
def test_adding_verdicts_never_raises_e(e, vs, extra):
    assert apply_evidence_cap(e, [*vs, extra])[0] <= apply_evidence_cap(e, vs)[0]
    assert apply_evidence_cap(e, [*vs, UNS])[0] <= apply_evidence_cap(e, vs)[0]


@given(st.tuples(*[st.integers(1, 5)] * 5), verdict_lists)
def test_cap_touches_only_evidence(t, vs):
    score = SpearScore(*t)
    claims = [ClaimCitation("c", f"EB-{i}", (rv("a", v),)) for i, v in enumerate(vs)]
    capped = apply_cap_to_score(score, audit_case("c", score.E, claims))
    assert (capped.S, capped.P, capped.A, capped.R) == (score.S, score.P, score.A, score.R)
    assert capped.E <= score.E


def test_invalid_initial_e():
    with pytest.raises(ValueError):
        apply_evidence_cap(0, [])


# --------------------------------------------------------------------------
# frequency report


def records(n_no, n3, n2):
    out = []
    for i in range(n_no + n3 + n2):
        v = SUP if i < n_no else PART if i < n_no + n3 else UNS
        out.append(audit_case(f"c{i}", 5, [ClaimCitation("claim", "EB-1", (rv("a", v), rv("b", v)))]))
    return out


def test_ninety_eight_percent_uncapped():
    report = audit_frequency_report(records(98, 2, 0))
    assert report == {CapClass.NO_CAP: Fraction(98, 100), CapClass.CAP_AT_3: Fraction(2, 100), CapClass.CAP_AT_LE2: 0}
    assert format_percentages(report) == {"NoCap": "98%", "CapAt3": "2%", "CapAtLe2": "0%"}


def test_other_reports():
    assert format_percentages(audit_frequency_report(records(5, 0, 0))) == {"NoCap": "100%", "CapAt3": "0%", "CapAtLe2": "0%"}
    assert format_percentages(audit_frequency_report(records(3, 0, 1))) == {"NoCap": "75%", "CapAt3": "0%", "CapAtLe2": "25%"}
    with pytest.raises(ValueError):
        audit_frequency_report([])


def test_record_serialization():
    r = records(0, 1, 0)[0]
    assert isinstance(r, AuditRecord)
    d = r.to_dict()
    assert (d["initial_E"], d["capped_E"], d["cap_class"]) == (5, 3, "CapAt3")
    assert d["claims"][0]["final_verdict"] == "PartiallySupported"


# --------------------------------------------------------------------------
# CSV input


def write_audit(path, rows, header=AUDIT_COLUMNS):
    path.write_text(",".join(header) + "\n" + "".join(",".join(r) + "\n" for r in rows))
    return path


def test_read_audit_infers_adjudicator(tmp_path):
    p = write_audit(
        tmp_path / "a.csv",
        [
            ("c1", "k1", "EB-1", "r1", "Supported"),
            ("c1", "k1", "EB-1", "r2", "Unsupported"),
            ("c1", "k1", "EB-1", "r3", "PartiallySupported"),
            ("c1", "k2", "EB-2", "r1", "Supported"),
        ],
    )
    claims = read_audit_table(p)[("c1", "")]
    assert [c.claim_id for c in claims] == ["k1", "k2"]
    assert claims[0].final_verdict is PART
    assert [v.adjudicator for v in claims[0].verdicts] == [False, False, True]


def test_read_audit_explicit_roles(tmp_path):
    p = write_audit(
        tmp_path / "a.csv",
        [("c1", "k1", "EB-1", "z", "Unsupported", "adjudicator", "omgs"), ("c1", "k1", "EB-1", "r1", "Supported", "primary", "omgs")],
        header=(*AUDIT_COLUMNS, "role", "arm"),
    )
    (claim,) = read_audit_table(p)[("c1", "omgs")]
    assert claim.final_verdict is UNS


def test_read_audit_bad_verdict(tmp_path):
    p = write_audit(tmp_path / "a.csv", [("c1", "k1", "EB-1", "r1", "Maybe")])
    with pytest.raises(TableError) as info:
        read_audit_table(p)
    assert (info.value.row, info.value.column) == (2, "verdict")


# --------------------------------------------------------------------------
# worksheets from runs


def test_claims_to_audit_lists_summary_citations(case_by_id, snapshot):
    r = run_case(case_by_id["OV-010"], snapshot, FunctionBackend(agent_policy))
    rows = claims_to_audit(r.summary)
    assert [c.citation_id for c in rows] == r.summary.all_citations()
    wide = claims_to_audit(r.summary, r.transcript, include_transcript=True)
    assert len(wide) > len(rows) and wide[: len(rows)] == rows
    with pytest.raises(ValueError):
        claims_to_audit(r.summary, include_transcript=True)

    sheet = list(csv.DictReader(io.StringIO(audit_worksheet_csv("OV-010", rows, "omgs"))))
    assert len(sheet) == len(rows)
    assert all(row["verdict"] == "" and row["arm"] == "omgs" for row in sheet)
