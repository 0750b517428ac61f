"""SPEAR rubric scores, panel aggregation and the safety-gated overall.

All score arithmetic is done in :class:`fractions.Fraction` so the gate's
``S < 3`` comparison and the overall mean (a multiple of 1/5) are exact.
"""

from __future__ import annotations

import csv
import math
import statistics
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from numbers import Rational
from pathlib import Path
from typing import Any

DIMENSIONS = ("S", "P", "E", "A", "R")
SAFETY_GATE = 3
HIGH_SCORE = 4

# Anchor text is editable rubric metadata; the arithmetic never reads it.
RUBRIC_ANCHORS: dict[str, str] = {
    "S": "Safety",
    "P": "Personalization",
    "E": "Evidence strength and traceability",
    "A": "Actionability",
    "R": "Robustness",
}


class ScoreError(ValueError):
    pass


class EvenPanelError(ScoreError):
    def __init__(self, n: int) -> None:
        super().__init__(
            f"median of an even panel ({n} raters) is not an integer score; "
            "reach consensus first and record it as a single-rater panel"
        )


@dataclass(frozen=True)
class SpearScore:
    S: int
    P: int
    E: int
    A: int
    R: int

    def __post_init__(self) -> None:
        for dim in DIMENSIONS:
            v = getattr(self, dim)
            if not isinstance(v, (int, Rational)) or isinstance(v, bool) or not 1 <= v <= 5:
                raise ScoreError(f"{dim}={v!r} outside 1..5")

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(getattr(self, d) for d in DIMENSIONS)

    def __getitem__(self, dim: str) -> int:
        if dim not in DIMENSIONS:
            raise KeyError(dim)
        return getattr(self, dim)

    def replace(self, **changes: int) -> SpearScore:
        values = {d: getattr(self, d) for d in DIMENSIONS} | changes
        return SpearScore(**values)


@dataclass(frozen=True)
class RaterPanelScores:
    case_id: str
    scores: tuple[SpearScore, ...]

    def __post_init__(self) -> None:
        if not self.scores:
            raise ScoreError(f"case {self.case_id}: panel has no raters")


@dataclass(frozen=True)
class GatedOverall:
    raw: Fraction
    gated: Fraction
    gate_applied: bool

    def to_dict(self) -> dict[str, Any]:
        return {"raw": fraction_str(self.raw), "gated": fraction_str(self.gated), "gate_applied": self.gate_applied}


def fraction_str(x: Fraction) -> str:
    """Exact decimal rendering for fifths (``4.4``); other rationals as ``p/q``."""
    x = Fraction(x)
    tenths = x * 10
    if tenths.denominator == 1:
        whole, rem = divmod(int(tenths), 10)
        return f"{whole}.{rem}"
    return f"{x.numerator}/{x.denominator}"


def median_scores(panel: RaterPanelScores) -> SpearScore:
    n = len(panel.scores)
    if n % 2 == 0:
        raise EvenPanelError(n)
    return SpearScore(**{d: sorted(s[d] for s in panel.scores)[n // 2] for d in DIMENSIONS})


def overall_raw(score: SpearScore) -> Fraction:
    return Fraction(sum(Fraction(v) for v in score.as_tuple()), 5)


def gate(raw: Fraction, safety: Fraction | int) -> GatedOverall:
    safety = Fraction(safety)
    if safety < SAFETY_GATE:
        return GatedOverall(raw, min(raw, safety), True)
    return GatedOverall(raw, raw, False)


def safety_gated_overall(score: SpearScore) -> GatedOverall:
    return gate(overall_raw(score), score.S)


def high_score_proportion(scores: Sequence[SpearScore], dimension: str) -> Fraction:
    if not scores:
        raise ScoreError("no scores")
    if dimension == "Overall":
        hits = sum(1 for s in scores if safety_gated_overall(s).gated >= HIGH_SCORE)
    else:
        hits = sum(1 for s in scores if s[dimension] >= HIGH_SCORE)
    return Fraction(hits, len(scores))


class Band(str, Enum):
    LOW = "Low"
    NEUTRAL = "Neutral"
    HIGH = "High"


def collapse_bands(value: int) -> Band:
    if isinstance(value, bool) or value not in (1, 2, 3, 4, 5):
        raise ScoreError(f"{value!r} outside 1..5")
    if value <= 2:
        return Band.LOW
    if value == 3:
        return Band.NEUTRAL
    return Band.HIGH


@dataclass(frozen=True)
class StratumStat:
    n: int
    mean: float
    sd: float | None  # None when n == 1


def stratified_summary(
    records: Iterable[tuple[Any, Any, SpearScore]]
) -> dict[tuple[Any, Any, str], StratumStat]:
    """Mean and sample s.d. per (scene, arm, dimension); "Overall" is the gated overall."""
    groups: dict[tuple[Any, Any], list[SpearScore]] = defaultdict(list)
    for scene, arm, score in records:
        groups[(scene, arm)].append(score)
    if not groups:
        raise ScoreError("no records")
    out: dict[tuple[Any, Any, str], StratumStat] = {}
    for (scene, arm), scores in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))):
        columns = {d: [Fraction(s[d]) for s in scores] for d in DIMENSIONS}
        columns["Overall"] = [safety_gated_overall(s).gated for s in scores]
        for dim, vals in columns.items():
            mean = statistics.mean(vals)
            sd = math.sqrt(statistics.variance(vals)) if len(vals) > 1 else None
            out[(scene, arm, dim)] = StratumStat(len(vals), float(mean), sd)
    return out


# --------------------------------------------------------------------------
# CSV score tables: case_id, scene, arm, rater_id, S, P, E, A, R

SCORE_COLUMNS = ("case_id", "scene", "arm", "rater_id", *DIMENSIONS)


class TableError(ValueError):
    def __init__(self, row: int, column: str, reason: str) -> None:
        super().__init__(f"row {row}, column {column}: {reason}")
        self.row = row
        self.column = column


@dataclass(frozen=True)
class ScoreRow:
    case_id: str
    scene: str
    arm: str
    rater_id: str
    score: SpearScore


def read_score_table(path: str | Path) -> list[ScoreRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SCORE_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise TableError(1, missing[0], "column missing from header")
        rows = []
        for i, rec in enumerate(reader, start=2):
            values = {}
            for dim in DIMENSIONS:
                try:
                    values[dim] = int(rec[dim])
                except (TypeError, ValueError):
                    raise TableError(i, dim, f"not an integer: {rec[dim]!r}") from None
                if not 1 <= values[dim] <= 5:
                    raise TableError(i, dim, f"{values[dim]} outside 1..5")
            for col in ("case_id", "arm"):
                if not rec[col]:
                    raise TableError(i, col, "empty")
            rows.append(ScoreRow(rec["case_id"], rec["scene"], rec["arm"], rec["rater_id"], SpearScore(**values)))
    return rows


def panels_from_rows(rows: Iterable[ScoreRow]) -> dict[tuple[str, str], tuple[str, RaterPanelScores]]:
    """Group rows into one panel per (case_id, arm); value is (scene, panel)."""
    grouped: dict[tuple[str, str], list[ScoreRow]] = defaultdict(list)
    for r in rows:
        grouped[(r.case_id, r.arm)].append(r)
    out = {}
    for key in sorted(grouped):
        rs = sorted(grouped[key], key=lambda r: r.rater_id)
        out[key] = (rs[0].scene, RaterPanelScores(key[0], tuple(r.score for r in rs)))
    return out


def score_case_table(
    rows: Iterable[ScoreRow], capped_e: Mapping[tuple[str, str], int] | None = None
) -> list[dict[str, Any]]:
    """Per (case, arm): median panel score, post-audit E, raw and gated overall.

    ``capped_e`` maps (case_id, arm) to the audited Evidence score; it can only
    lower E, never raise it.
    """
    out = []
    for (case_id, arm), (scene, panel) in panels_from_rows(rows).items():
        med = median_scores(panel)
        initial_e = med.E
        if capped_e and (case_id, arm) in capped_e:
            med = med.replace(E=min(med.E, capped_e[(case_id, arm)]))
        g = safety_gated_overall(med)
        out.append(
            {
                "case_id": case_id,
                "scene": scene,
                "arm": arm,
                "raters": len(panel.scores),
                **{d: med[d] for d in DIMENSIONS},
                "E_initial": initial_e,
                "overall_raw": fraction_str(g.raw),
                "overall_gated": fraction_str(g.gated),
                "gate_applied": g.gate_applied,
            }
        )
    return out
