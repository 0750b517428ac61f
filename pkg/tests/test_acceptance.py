"""Acceptance criteria, each at its stated tolerance and runtime limit.

Every test prints one PASS/FAIL line; the lines are repeated in the terminal
summary under "acceptance criteria".
"""

from __future__ import annotations

import itertools
import json
import math
import random
from contextlib import contextmanager
from dataclasses import replace
from fractions import Fraction
from time import perf_counter

import numpy as np
import pytest

import acceptance_log
from omgs import pipeline
from omgs.backends import FunctionBackend, RecordingBackend, ScriptedBackend
from omgs.canonical import canonical_bytes
from omgs.citation_audit import CapClass, ClaimCitation, ReviewerVerdict, Verdict, apply_evidence_cap, audit_case, audit_frequency_report, format_percentages
from omgs.deliberation import (
    CaseFailure,
    DeliberationConfig,
    MessageKind,
    Mode,
    TamperError,
    mode_context,
    parse_summary,
    replay_transcript,
    run_case,
    validate_decision_summary,
)
from omgs.evidence_bank import RawEvidenceRecord, Stream, TokenHashEmbedder, Unresolved, build_snapshot_from_records, embed, resolve_citation, search
from omgs.role_scoping import DEFAULT_ACCESS_MATRIX, Role, build_all_packages
from omgs.spear import DIMENSIONS, SpearScore, fraction_str, safety_gated_overall
from omgs.stats import contingency_test, fisher_2x2, icc_2k, median_iqr, tost_equivalence, wilcoxon_signed_rank
from omgs.synthetic import HALLUCINATED_ID, agent_policy, hallucinating_policy, synthetic_corpus_records, write_case_packet
from oracles import (
    brute_force_search,
    fisher_2x2_enumeration,
    fisher_rxc_enumeration,
    icc2k_sums_of_squares,
    type7_quantile,
    wilcoxon_enumeration_p,
)


@contextmanager
def criterion(number: int, title: str, limit_s: float):
    t0 = perf_counter()
    try:
        yield
    except BaseException as exc:
        line = f"C{number} FAIL  {title} ({perf_counter() - t0:.2f}s; {type(exc).__name__}: {str(exc)[:120]})"
        print(line)
        acceptance_log.LINES.append(line)
        raise
    elapsed = perf_counter() - t0
    ok = elapsed < limit_s
    line = f"C{number} {'PASS' if ok else 'FAIL'}  {title} ({elapsed:.2f}s, limit {limit_s:g}s)"
    print(line)
    acceptance_log.LINES.append(line)
    assert ok, f"runtime {elapsed:.2f}s exceeds {limit_s}s"


# --------------------------------------------------------------------------


def test_c1_safety_gate():
    with criterion(1, "safety-gate fixture and 3,125-tuple properties", 1.0):
        fixture = [
            ((5, 5, 5, 5, 5), "5.0", "5.0"),
            ((2, 5, 5, 5, 5), "4.4", "2.0"),
            ((3, 4, 4, 4, 4), "3.8", "3.8"),
            ((5, 1, 1, 1, 1), "1.8", "1.8"),
            ((1, 1, 1, 1, 1), "1.0", "1.0"),
        ]
        for t, raw, gated in fixture:
            g = safety_gated_overall(SpearScore(*t))
            assert (fraction_str(g.raw), fraction_str(g.gated)) == (raw, gated)

        gated = {}
        for t in itertools.product(range(1, 6), repeat=5):
            g = safety_gated_overall(SpearScore(*t))
            assert g.gated <= g.raw
            assert (g.gated == g.raw) == (t[0] >= 3 or g.raw <= t[0])
            assert g.gate_applied == (t[0] < 3)
            gated[t] = g.gated
        assert len(gated) == 3125
        for t, v in gated.items():
            for i in range(5):
                if t[i] < 5:
                    assert gated[t[:i] + (t[i] + 1,) + t[i + 1 :]] >= v, (t, DIMENSIONS[i])


def test_c2_evidence_cap():
    with criterion(2, "evidence-cap examples and 98/2/0 audit", 1.0):
        S, P, U = Verdict.SUPPORTED, Verdict.PARTIALLY_SUPPORTED, Verdict.UNSUPPORTED
        assert apply_evidence_cap(5, [S, S]) == (5, CapClass.NO_CAP)
        assert apply_evidence_cap(5, [P]) == (3, CapClass.CAP_AT_3)
        assert apply_evidence_cap(4, [U]) == (2, CapClass.CAP_AT_LE2)
        assert apply_evidence_cap(2, [P]) == (2, CapClass.CAP_AT_3)

        records = []
        for i in range(100):
            v = P if i in (17, 63) else S
            claims = [ClaimCitation("claim", "EB-1", (ReviewerVerdict("r1", v), ReviewerVerdict("r2", v)))]
            records.append(audit_case(f"C{i:03d}", 5, claims))
        report = audit_frequency_report(records)
        assert report[CapClass.NO_CAP] == Fraction(98, 100)
        assert report[CapClass.CAP_AT_3] == Fraction(2, 100)
        assert report[CapClass.CAP_AT_LE2] == 0
        assert format_percentages(report) == {"NoCap": "98%", "CapAt3": "2%", "CapAtLe2": "0%"}


def test_c3_statistical_oracles():
    with criterion(3, "statistical oracle suite", 60.0):
        rnd = random.Random(20240601)

        # Wilcoxon: 200 random paired samples, n <= 10, exact equality with 2^n enumeration
        for _ in range(200):
            n = rnd.randint(1, 10)
            a = [rnd.randint(1, 5) for _ in range(n)]
            b = [rnd.randint(1, 5) for _ in range(n)]
            diffs = [x - y for x, y in zip(a, b)]
            if not any(diffs):
                diffs[0] = 1
            assert wilcoxon_signed_rank(diffs, "exact").p_value == float(wilcoxon_enumeration_p(diffs))

        # Fisher 2x2 against hypergeometric enumeration
        for _ in range(200):
            t = [[rnd.randint(0, 15) for _ in range(2)] for _ in range(2)]
            if sum(map(sum, t)) == 0:
                t[0][0] = 1
            assert abs(fisher_2x2(np.array(t)) - float(fisher_2x2_enumeration(t))) <= 1e-12

        # Monte Carlo r x c against full enumeration, 10^5 replicates
        tables = [
            [[1, 0, 2, 0], [0, 2, 0, 1], [2, 1, 0, 1]],
            [[2, 0, 1], [0, 3, 1], [1, 0, 2]],
            [[1, 2, 0, 1], [0, 1, 2, 0], [2, 0, 0, 1], [0, 1, 1, 0]],
            [[3, 0], [1, 2], [0, 3]],
        ]
        for t in tables:
            mc = contingency_test(t, "monte-carlo", replicates=100_000)
            assert mc.replicates == 100_000 and mc.seed is not None
            assert abs(mc.p_value - float(fisher_rxc_enumeration(t))) <= 0.01, t

        # ICC(2,k) against the sums-of-squares oracle
        checked = 0
        while checked < 100:
            n, k = rnd.randint(2, 8), rnd.randint(2, 5)
            m = [[rnd.randint(1, 5) for _ in range(k)] for _ in range(n)]
            r = icc_2k(m)
            if r.degenerate:
                continue
            assert abs(r.value - float(icc2k_sums_of_squares(m))) <= 1e-9
            checked += 1

        # TOST/CI duality on 500 random samples
        for _ in range(500):
            n = rnd.randint(2, 40)
            shift = rnd.uniform(-1, 1)
            diffs = [shift + rnd.gauss(0, rnd.uniform(0.05, 1.5)) for _ in range(n)]
            e = tost_equivalence(diffs, margin=0.5)
            assert not e.degenerate
            assert e.equivalent == (-0.5 < e.ci95[0] and e.ci95[1] < 0.5)


def test_c4_deliberation_determinism(cases, snapshot):
    with criterion(4, "deliberation determinism, replay and tamper evidence (20 cases)", 30.0):
        cfg = DeliberationConfig()
        recorder = RecordingBackend(FunctionBackend(agent_policy), backend_id="scripted")
        for case in cases:
            run_case(case, snapshot, recorder, cfg)
        responses = recorder.replay_document()["responses"]

        for case in cases:
            first = run_case(case, snapshot, ScriptedBackend(responses, backend_id="scripted"), cfg)
            second = run_case(case, snapshot, ScriptedBackend(responses, backend_id="scripted"), cfg)
            assert first.transcript.to_jsonl().encode() == second.transcript.to_jsonl().encode()
            assert canonical_bytes(first.summary.to_dict()) == canonical_bytes(second.summary.to_dict())

            assert replay_transcript(first.transcript, cfg, snapshot, case) == first.summary

            msgs = list(first.transcript.messages)
            i = len(msgs) // 2
            msgs[i] = replace(msgs[i], content=dict(msgs[i].content) | {"tampered": True})
            with pytest.raises(TamperError):
                replay_transcript(replace(first.transcript, messages=tuple(msgs)), cfg)


def test_c5_citation_closure(cases, raw_cases, snapshot, tmp_path):
    with criterion(5, "citation closure and hallucination bounce", 10.0):
        for case in cases:
            for mode in Mode:
                r = run_case(case, snapshot, FunctionBackend(agent_policy), DeliberationConfig(mode=mode))
                ids = r.summary.all_citations()
                assert ids
                assert not any(isinstance(resolve_citation(c, snapshot, case), Unresolved) for c in ids)
                assert validate_decision_summary(r.summary, snapshot, case) == []

        case = cases[0]
        # one bad id, corrected on retry
        bounced = FunctionBackend(hallucinating_policy(persistent=False))
        r = run_case(case, snapshot, bounced, DeliberationConfig(citation_retry_budget=2))
        final = r.transcript.messages[-1]
        assert final.kind is MessageKind.CHAIR_SUMMARY and final.attempts == 2
        assert HALLUCINATED_ID in final.notices[0]["unresolved_citations"]
        assert HALLUCINATED_ID not in r.summary.all_citations()

        # persistent: budget + 1 attempts, then failure
        for budget in (0, 1, 2):
            persistent = FunctionBackend(hallucinating_policy(persistent=True))
            with pytest.raises(CaseFailure):
                run_case(case, snapshot, persistent, DeliberationConfig(citation_retry_budget=budget))
            assert sum(q.schema_id == "decision-summary/v1" for q in persistent.requests) == budget + 1

        # a summary carrying the id never validates
        eid = snapshot.entry_ids[0]
        y, _ = parse_summary(
            {
                "final_assessment": {"text": "a", "citations": [eid, HALLUCINATED_ID]},
                "core_treatment_strategy": {"text": "b", "citations": [eid]},
                "change_triggers": [{"condition": "c", "citations": [eid]}],
            }
        )
        assert any(v.code == "unresolved" for v in validate_decision_summary(y, snapshot, case))

        # end to end: nonzero exit, no summary persisted
        rec = RecordingBackend(FunctionBackend(hallucinating_policy(persistent=True)), backend_id="halluc")
        with pytest.raises(CaseFailure):
            run_case(case, snapshot, rec)
        replay = tmp_path / "replay.json"
        rec.save(replay)
        case_dir = write_case_packet(raw_cases[0].record, tmp_path / "case")
        (case_dir / "structured_case.json").write_text(json.dumps(case.to_dict()))
        outcome = pipeline.cmd_run(case_dir, snapshot, f"scripted:{replay}", out_dir=tmp_path / "runs")
        assert outcome.exit_code != 0
        assert not (outcome.run_dir / "summary.json").exists()
        assert (outcome.run_dir / "failure.json").exists()


def test_c6_role_boundaries(cases, snapshot):
    with criterion(6, "role-boundary audit and round-0 isolation", 10.0):
        for case in cases:
            by_id = {d.doc_id: d for d in case.documents}
            for role, pkg in build_all_packages(case, DEFAULT_ACCESS_MATRIX, snapshot).items():
                access = DEFAULT_ACCESS_MATRIX[role]
                outside = [d.doc_id for d in pkg.documents if not access.admits(by_id[d.doc_id])]
                assert outside == [], (case.case_id, role, outside)
                text = pkg.serialize().decode()
                for d in case.documents:
                    if not access.admits(d):
                        assert json.dumps(d.body)[1:-1] not in text

            backend = FunctionBackend(agent_policy)
            run_case(case, snapshot, backend)
            initial = [q for q in backend.requests if q.schema_id == "initial-assessment/v1"]
            assert sorted(q.role for q in initial) == sorted(r.value for r in Role)
            for q in initial:
                assert q.context["transcript"] == []
                access = DEFAULT_ACCESS_MATRIX[Role(q.role)]
                for doc in q.context["package"]["documents"]:
                    assert access.admits(by_id[doc["doc_id"]])


def small_snapshot_records():
    recs = [
        RawEvidenceRecord(Stream(r["stream"]), r["title"], r["text"], r.get("pmid"), r.get("meta") or {})
        for r in synthetic_corpus_records()[:24]
    ]
    # identical text under different titles gives exact similarity ties
    recs += [RawEvidenceRecord(Stream.LITERATURE, f"Duplicate {i}", "platinum sensitive relapse maintenance", None, {}) for i in range(4)]
    return recs


def test_c7_retrieval_oracle():
    with criterion(7, "retrieval equals brute-force cosine sort (100 queries)", 10.0):
        emb = TokenHashEmbedder(256)
        records = small_snapshot_records()
        snap = build_snapshot_from_records(records, emb, "acceptance")
        assert len(snap) <= 50

        vocab = sorted({w for e in snap.entries.values() for w in e.chunk_text.lower().split() if w.isalpha()})
        rnd = random.Random(7)
        queries = ["platinum sensitive relapse maintenance"] + [
            " ".join(rnd.choice(vocab) for _ in range(rnd.randint(1, 8))) for _ in range(99)
        ]
        for q in queries:
            k = rnd.choice([1, 5, 10, len(snap)])
            ids, sims = brute_force_search(embed([q], emb)[0], snap, k)
            assert search(q, snap, k, embedder=emb) == list(zip(ids, sims)), q

        tied = search(queries[0], snap, 4, embedder=emb)
        assert [sim for _, sim in tied] == [1.0] * 4 and [i for i, _ in tied] == sorted(i for i, _ in tied)

        again = build_snapshot_from_records(list(records), emb, "acceptance")
        shuffled = list(records)
        rnd.shuffle(shuffled)
        assert again.snapshot_id == snap.snapshot_id
        assert build_snapshot_from_records(shuffled, emb, "other label").snapshot_id == snap.snapshot_id


def test_c8_mode_containment(cases, snapshot):
    with criterion(8, "CHAIR-R within CHAIR-E within CHAIR-D contexts", 5.0):
        for case in cases:
            r, e, d = (mode_context(case, snapshot, m) for m in (Mode.CHAIR_R, Mode.CHAIR_E, Mode.CHAIR_D))
            assert set(r) < set(e) < set(d)
            for small, big in ((r, e), (e, d)):
                for key, value in small.items():
                    assert canonical_bytes(value) == canonical_bytes(big[key])
            sr, se, sd = (canonical_bytes(x) for x in (r, e, d))
            assert len(sr) < len(se) < len(sd)


def quartile_vector(q1: float, median: float, q3: float, m: int = 1) -> list[float]:
    """A sample of n = 4m + 1 values whose type-7 quartiles are exactly (q1, median, q3).

    Type 7 reads position h = (n - 1) p of the sorted sample and interpolates
    between its neighbours. With n = 4m + 1 the three positions are the
    integers m, 2m and 3m, so placing q1, median and q3 there (and keeping the
    rest in order around them) inverts the formula with no interpolation.
    """
    lower = [q1 - (m - i) for i in range(m)]
    between_low = [(q1 + median) / 2] * (m - 1)
    between_high = [(median + q3) / 2] * (m - 1)
    upper = [q3 + i + 1 for i in range(m)]
    xs = lower + [q1] + between_low + [median] + between_high + [q3] + upper
    assert len(xs) == 4 * m + 1 and xs == sorted(xs)
    return xs


def scripted_usage_runs(tmp_path, case, raw, snapshot, targets):
    """Run the case once per (total_tokens, wall_ms) target with scripted usage."""
    manifests = []
    for i, (tokens, wall_ms) in enumerate(targets):
        rec = RecordingBackend(FunctionBackend(agent_policy), backend_id=f"usage-{i}")
        run_case(case, snapshot, rec)
        doc = rec.replay_document()
        keys = sorted(doc["responses"])
        for j, key in enumerate(keys):
            first = j == 0
            doc["responses"][key]["usage"] = {
                "prompt_tokens": tokens if first else 0,
                "completion_tokens": 0,
                "wall_ms": wall_ms if first else 0,
            }
        path = tmp_path / f"replay-{i}.json"
        path.write_text(json.dumps(doc))
        case_dir = tmp_path / "case"
        if not case_dir.exists():
            write_case_packet(raw.record, case_dir)
            (case_dir / "structured_case.json").write_text(json.dumps(case.to_dict()))
        outcome = pipeline.cmd_run(case_dir, snapshot, f"scripted:{path}", out_dir=tmp_path / "runs")
        assert outcome.exit_code == 0
        manifests.append(outcome.run_dir / "manifest.json")
    return manifests


def test_c9_summary_statistics(cases, raw_cases, snapshot, tmp_path):
    # the scripted runs are setup; the timed part is the summaries themselves
    targets = [
        (110_000, 120_000),
        (125_000, 140_000),
        (134_656, 155_300),
        (144_130, 173_100),
        (170_000, 200_000),
    ]
    manifests = scripted_usage_runs(tmp_path, cases[0], raw_cases[0], snapshot, targets)

    with criterion(9, "median/IQR presentation fixtures (bracket and width)", 1.0):
        ages = quartile_vector(47.0, 55.0, 62.0, m=2)
        assert [float(type7_quantile(ages, p)) for p in (0.25, 0.5, 0.75)] == [47.0, 55.0, 62.0]
        assert median_iqr(ages).format("bracket", digits=1) == "55.0 [47.0;62.0]"

        report = pipeline.cmd_usage_summary(manifests)
        assert report["runs"] == 5
        assert report["total_tokens"]["width"] == "134,656 (IQR, 19,130)"
        assert report["total_tokens"]["bracket"] == "134,656 [125,000;144,130]"
        assert report["wall_s"]["width"] == "155.3 (IQR, 33.1)"
        assert report["wall_s"]["bracket"] == "155.3 [140.0;173.1]"
        assert math.isclose(report["total_tokens"]["iqr_width"], 19_130)
