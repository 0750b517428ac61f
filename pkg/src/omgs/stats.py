"""Statistical procedures used to evaluate runs.

Wilcoxon signed-rank (exact and normal approximation), Bonferroni and
Benjamini-Hochberg adjustment, ICC(2,k), Spearman correlation, TOST
equivalence, mean/CI and median/IQR summaries, and contingency-table tests
(chi-square, Fisher exact, Monte Carlo).

Distribution functions (t, F, chi-square, normal) come from scipy; the test
procedures themselves are written out here so each can be checked against a
brute-force oracle.
"""

from __future__ import annotations

import math
from collections.abc import Hashable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

import numpy as np
from scipy import special
from scipy import stats as sps

EXACT_WILCOXON_MAX_N = 12
DEFAULT_MC_REPLICATES = 100_000
DEFAULT_MC_SEED = 20240601
ENUMERATION_LIMIT = 200_000
_REL_TOL = 1e-7


class DegenerateSampleError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: str
    n_effective: int
    seed: int | None = None
    replicates: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "method": self.method,
            "n": self.n_effective,
        }
        if self.seed is not None:
            d["seed"] = self.seed
        if self.replicates is not None:
            d["replicates"] = self.replicates
        return d | self.extra


@dataclass(frozen=True)
class PairedSample:
    pairs: tuple[tuple[float, float], ...]
    keys: tuple[Hashable, ...] = ()

    def __post_init__(self) -> None:
        if self.keys:
            if len(self.keys) != len(self.pairs):
                raise ValueError("one pairing key per pair")
            if len(set(self.keys)) != len(self.keys):
                raise ValueError("pairing keys must be unique")

    @classmethod
    def from_columns(cls, a: Sequence[float], b: Sequence[float], keys: Sequence[Hashable] = ()) -> PairedSample:
        if len(a) != len(b):
            raise ValueError("paired columns differ in length")
        return cls(tuple(zip(map(float, a), map(float, b))), tuple(keys))

    def differences(self) -> list[float]:
        return [x - y for x, y in self.pairs]


def midranks(values: Sequence[float]) -> list[float]:
    """1-based ranks with ties given the mean of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


def _signed_rank_parts(diffs: Sequence[float]) -> tuple[list[float], list[float]]:
    nz = [d for d in diffs if d != 0]
    if not nz:
        raise DegenerateSampleError("all paired differences are zero")
    ranks = midranks([abs(d) for d in nz])
    return nz, ranks


def exact_signed_rank_counts(doubled_ranks: Sequence[int]) -> dict[int, int]:
    """Number of sign assignments giving each value of 2*W+ (dynamic programming)."""
    counts = {0: 1}
    for r in doubled_ranks:
        nxt: dict[int, int] = {}
        for s, c in counts.items():
            nxt[s] = nxt.get(s, 0) + c
            nxt[s + r] = nxt.get(s + r, 0) + c
        counts = nxt
    return counts


def wilcoxon_signed_rank(
    sample: PairedSample | Sequence[float], mode: str = "auto", continuity: bool = True
) -> TestResult:
    """Paired two-sided Wilcoxon signed-rank test.

    ``sample`` is a :class:`PairedSample` or a sequence of differences. Zero
    differences are dropped and tied magnitudes get mid-ranks. ``mode`` is
    ``exact`` (enumerate the sign-flip distribution), ``approx`` (normal with
    tie correction and, by default, a 0.5 continuity correction) or ``auto``
    (exact when n <= 12). The statistic is W+,
    the rank sum of positive differences; p = min(1, 2 * smaller tail).
    """
    diffs = sample.differences() if isinstance(sample, PairedSample) else [float(d) for d in sample]
    nz, ranks = _signed_rank_parts(diffs)
    n = len(nz)
    w_plus = sum(r for d, r in zip(nz, ranks) if d > 0)
    if mode == "auto":
        mode = "exact" if n <= EXACT_WILCOXON_MAX_N else "approx"
    if mode == "exact":
        doubled = [int(round(2 * r)) for r in ranks]
        counts = exact_signed_rank_counts(doubled)
        w2 = int(round(2 * w_plus))
        total = 2**n
        lower = sum(c for s, c in counts.items() if s <= w2)
        upper = sum(c for s, c in counts.items() if s >= w2)
        p = min(Fraction(1), 2 * Fraction(min(lower, upper), total))
        return TestResult(w_plus, float(p), "exact", n)
    if mode == "approx":
        mean = n * (n + 1) / 4
        _, tie_counts = np.unique(np.abs(nz), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tie_counts**3 - tie_counts)) / 48
        if var <= 0:
            raise DegenerateSampleError("zero variance in signed-rank statistic")
        dev = abs(w_plus - mean)
        if continuity:
            dev = max(0.0, dev - 0.5)
        z = math.copysign(dev, w_plus - mean) / math.sqrt(var)
        p = min(1.0, 2 * sps.norm.sf(abs(z)))
        return TestResult(w_plus, float(p), "normal-approx", n, extra={"z": z, "continuity": continuity})
    raise ValueError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------
# multiplicity


def bonferroni(p_values: Sequence[float], m: int | None = None) -> list[float]:
    m = len(p_values) if m is None else m
    if m < len(p_values):
        raise ValueError("m must be at least the number of tests")
    return [min(1.0, p * m) for p in p_values]


@dataclass(frozen=True)
class BHResult:
    rejected: tuple[bool, ...]
    adjusted: tuple[float, ...]


def benjamini_hochberg(p_values: Sequence[float], q: float = 0.05) -> BHResult:
    """Step-up BH; results are in input order."""
    if not 0 < q < 1:
        raise ValueError("q must be in (0, 1)")
    m = len(p_values)
    if m == 0:
        return BHResult((), ())
    order = sorted(range(m), key=lambda i: p_values[i])
    k_max = 0
    for rank, i in enumerate(order, start=1):
        if p_values[i] <= rank * q / m:
            k_max = rank
    rejected = [False] * m
    for rank, i in enumerate(order, start=1):
        rejected[i] = rank <= k_max
    adjusted = [0.0] * m
    running = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        running = min(running, p_values[i] * m / rank)
        adjusted[i] = min(1.0, running)
    return BHResult(tuple(rejected), tuple(adjusted))


# --------------------------------------------------------------------------
# ICC(2,k)


@dataclass(frozen=True)
class ICCResult:
    value: float
    ci_low: float
    ci_high: float
    f_value: float
    df1: int
    df2: int
    p_value: float
    n_subjects: int
    n_raters: int
    degenerate: bool = False
    ci_method: str = "F-based (McGraw & Wong)"


@dataclass(frozen=True)
class AnovaTerms:
    ms_rows: float
    ms_cols: float
    ms_error: float
    n: int
    k: int


def two_way_anova(matrix: np.ndarray) -> AnovaTerms:
    x = np.asarray(matrix, dtype=float)
    n, k = x.shape
    grand = x.mean()
    ss_rows = k * float(np.sum((x.mean(axis=1) - grand) ** 2))
    ss_cols = n * float(np.sum((x.mean(axis=0) - grand) ** 2))
    ss_total = float(np.sum((x - grand) ** 2))
    ss_err = max(ss_total - ss_rows - ss_cols, 0.0)
    return AnovaTerms(ss_rows / (n - 1), ss_cols / (k - 1), ss_err / ((n - 1) * (k - 1)), n, k)


def icc_2k(matrix: Sequence[Sequence[float]] | np.ndarray, confidence: float = 0.95) -> ICCResult:
    """Two-way random-effects, absolute-agreement, average-measures ICC with F-based CI."""
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("need an n x k matrix with n >= 2 and k >= 2")
    if np.isnan(x).any():
        raise ValueError("matrix has missing cells")
    t = two_way_anova(x)
    n, k = t.n, t.k
    df1, df2 = n - 1, (n - 1) * (k - 1)
    scale = max(1.0, float(np.max(np.abs(x))))
    if t.ms_rows <= 1e-12 * scale * scale:
        return ICCResult(0.0, math.nan, math.nan, math.nan, df1, df2, math.nan, n, k, degenerate=True)
    denominator = t.ms_rows + (t.ms_cols - t.ms_error) / n
    if abs(denominator) <= 1e-12 * scale * scale:
        # rater variance cancels the subject variance; the ratio is undefined
        return ICCResult(math.nan, math.nan, math.nan, math.nan, df1, df2, math.nan, n, k, degenerate=True)
    value = (t.ms_rows - t.ms_error) / denominator
    if t.ms_error == 0.0:
        return ICCResult(value, value, value, math.inf, df1, df2, 0.0, n, k)
    f_value = t.ms_rows / t.ms_error
    p_value = float(sps.f.sf(f_value, df1, df2))
    lo, hi = _icc_ak_bounds(t, 1 - confidence)
    return ICCResult(value, lo, hi, f_value, df1, df2, p_value, n, k)


def _ratio(num: float, den: float) -> float:
    return num / den if den != 0.0 else math.nan


def _icc_ak_bounds(t: AnovaTerms, alpha: float) -> tuple[float, float]:
    """McGraw-Wong F bounds for absolute-agreement average measures.

    Satterthwaite df from the single-measure estimate; the bounds are the
    single-measure bounds stepped up by Spearman-Brown, written in the
    reduced form that has no singularity of its own.
    """
    n, k = t.n, t.k
    msr, msc, mse = t.ms_rows, t.ms_cols, t.ms_error
    icc1 = (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)
    fj = msc / mse
    vn = (k - 1) * (n - 1) * (k * icc1 * fj + n * (1 + (k - 1) * icc1) - k * icc1) ** 2
    vd = (n - 1) * k**2 * icc1**2 * fj**2 + (n * (1 + (k - 1) * icc1) - k * icc1) ** 2
    v = vn / vd
    fl = float(sps.f.ppf(1 - alpha / 2, n - 1, v))
    fu = float(sps.f.ppf(1 - alpha / 2, v, n - 1))
    lo = _ratio(n * (msr - fl * mse), fl * (msc - mse) + n * msr)
    hi = _ratio(n * (fu * msr - mse), msc - mse + n * fu * msr)
    return lo, hi


# --------------------------------------------------------------------------
# Spearman


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson correlation of mid-ranks; ``None`` when either ranking is constant."""
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    rx, ry = midranks(list(x)), midranks(list(y))
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    if sxx == 0 or syy == 0:
        return None
    return sxy / math.sqrt(sxx * syy)


# --------------------------------------------------------------------------
# TOST equivalence


@dataclass(frozen=True)
class EquivalenceResult:
    mean_diff: float
    ci95: tuple[float, float]
    margin: float
    equivalent: bool
    p_lower: float
    p_upper: float
    n: int
    degenerate: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean_diff": self.mean_diff,
            "ci_low": self.ci95[0],
            "ci_high": self.ci95[1],
            "margin": self.margin,
            "equivalent": self.equivalent,
            "p_lower": self.p_lower,
            "p_upper": self.p_upper,
            "n": self.n,
            "degenerate": self.degenerate,
            "method": "TOST (paired t)",
        }


def tost_equivalence(diffs: Sequence[float], margin: float = 0.5, alpha_each: float = 0.025) -> EquivalenceResult:
    """Two one-sided t-tests of paired differences against +/-margin.

    Equivalent iff both one-sided tests reject at ``alpha_each``; the reported
    interval is the matching (1 - 2*alpha_each) CI.
    """
    d = np.asarray(diffs, dtype=float)
    n = d.size
    if n == 0:
        raise InsufficientDataError("no differences")
    mean = float(d.mean())
    se = float(d.std(ddof=1)) / math.sqrt(n) if n >= 2 else 0.0
    if n < 2 or float(np.ptp(d)) == 0.0 or se == 0.0:
        if n < 2 and mean != 0.0:
            raise InsufficientDataError("need n >= 2 to estimate variance")
        eq = abs(mean) < margin
        p = 0.0 if eq else 1.0
        return EquivalenceResult(mean, (mean, mean), margin, eq, p, p, n, degenerate=True)
    df = n - 1
    p_lower = float(sps.t.sf((mean + margin) / se, df))
    p_upper = float(sps.t.cdf((mean - margin) / se, df))
    half = float(sps.t.ppf(1 - alpha_each, df)) * se
    return EquivalenceResult(
        mean,
        (mean - half, mean + half),
        margin,
        p_lower < alpha_each and p_upper < alpha_each,
        p_lower,
        p_upper,
        n,
    )


# --------------------------------------------------------------------------
# descriptive summaries


@dataclass(frozen=True)
class MeanCI:
    mean: float
    low: float
    high: float
    n: int

    @property
    def half_width(self) -> float:
        return (self.high - self.low) / 2


def mean_ci95(values: Sequence[float]) -> MeanCI:
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise InsufficientDataError("need n >= 2 for a t interval")
    mean = float(x.mean())
    se = float(x.std(ddof=1)) / math.sqrt(x.size)
    half = float(sps.t.ppf(0.975, x.size - 1)) * se
    return MeanCI(mean, mean - half, mean + half, int(x.size))


def quantile7(sorted_values: Sequence[float], prob: float) -> float:
    """Linear-interpolation quantile (Hyndman-Fan type 7) of pre-sorted data."""
    n = len(sorted_values)
    h = (n - 1) * prob
    lo = math.floor(h)
    hi = min(lo + 1, n - 1)
    return sorted_values[lo] + (h - lo) * (sorted_values[hi] - sorted_values[lo])


@dataclass(frozen=True)
class MedianIQR:
    median: float
    q1: float
    q3: float
    n: int

    @property
    def width(self) -> float:
        return self.q3 - self.q1

    def format(self, style: str = "bracket", digits: int = 1, thousands: bool = False) -> str:
        """``bracket``: ``55.0 [47.0;62.0]``; ``width``: ``134,656 (IQR, 19,130)``."""
        sep = "," if thousands else ""

        def f(x: float) -> str:
            return f"{x:{sep}.{digits}f}"

        if style == "bracket":
            return f"{f(self.median)} [{f(self.q1)};{f(self.q3)}]"
        if style == "width":
            return f"{f(self.median)} (IQR, {f(self.width)})"
        raise ValueError(f"unknown style {style!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"median": self.median, "q1": self.q1, "q3": self.q3, "iqr_width": self.width, "n": self.n}


def median_iqr(values: Sequence[float]) -> MedianIQR:
    if not values:
        raise InsufficientDataError("no values")
    xs = sorted(float(v) for v in values)
    return MedianIQR(quantile7(xs, 0.5), quantile7(xs, 0.25), quantile7(xs, 0.75), len(xs))


# --------------------------------------------------------------------------
# contingency tables


def _as_table(table: Sequence[Sequence[int]]) -> np.ndarray:
    t = np.asarray(table)
    if t.ndim != 2 or t.shape[0] < 2 or t.shape[1] < 2:
        raise ValueError("need at least a 2 x 2 table")
    if not np.all(t == np.round(t)) or np.any(t < 0):
        raise ValueError("table must hold nonnegative integers")
    t = t.astype(np.int64)
    if t.sum() == 0:
        raise ValueError("table is all zeros")
    return t


def chi_square_statistic(t: np.ndarray) -> float:
    rows = t.sum(axis=1, keepdims=True)
    cols = t.sum(axis=0, keepdims=True)
    expected = rows * cols / t.sum()
    mask = expected > 0
    return float(np.sum((t - expected)[mask] ** 2 / expected[mask]))


def _log_table_prob(t: np.ndarray) -> float:
    rows, cols, total = t.sum(axis=1), t.sum(axis=0), t.sum()
    return float(
        np.sum(special.gammaln(rows + 1))
        + np.sum(special.gammaln(cols + 1))
        - special.gammaln(total + 1)
        - np.sum(special.gammaln(t + 1))
    )


def fisher_2x2(t: np.ndarray) -> float:
    """Two-sided Fisher p: sum of hypergeometric probabilities no larger than the observed one."""
    (a, b), (c, d) = t.tolist()
    r1, c1, total = a + b, a + c, a + b + c + d
    denom = math.comb(total, c1)
    lo, hi = max(0, c1 - (total - r1)), min(r1, c1)
    probs = {x: math.comb(r1, x) * math.comb(total - r1, c1 - x) for x in range(lo, hi + 1)}
    observed = probs[a]
    hits = sum(v for v in probs.values() if v <= observed * (1 + _REL_TOL))
    return min(1.0, hits / denom)


def _tables_with_margins(rows: Sequence[int], cols: Sequence[int]):
    """Yield every nonnegative integer table with the given margins."""
    r, c = len(rows), len(cols)

    def fill_row(i: int, col_left: list[int], acc: list[list[int]]):
        if i == r - 1:
            yield acc + [list(col_left)]
            return
        need = rows[i]
        rest_rows = sum(rows[i + 1 :])

        def fill_cell(j: int, remaining: int, row: list[int]):
            if j == c - 1:
                if remaining <= col_left[j] and col_left[j] - remaining <= rest_rows:
                    yield row + [remaining]
                return
            rest_cap = sum(col_left[j + 1 :])
            low = max(0, remaining - rest_cap)
            for v in range(low, min(remaining, col_left[j]) + 1):
                yield from fill_cell(j + 1, remaining - v, row + [v])

        for row in fill_cell(0, need, []):
            yield from fill_row(i + 1, [cl - v for cl, v in zip(col_left, row)], acc + [row])

    yield from fill_row(0, list(cols), [])


class EnumerationTooLarge(RuntimeError):
    pass


def fisher_exact_rxc(t: np.ndarray, limit: int = ENUMERATION_LIMIT) -> tuple[float, int]:
    """Exact r x c Fisher p by full enumeration; returns (p, tables enumerated)."""
    rows, cols = t.sum(axis=1).tolist(), t.sum(axis=0).tolist()
    obs = _log_table_prob(t)
    const = float(np.sum(special.gammaln(np.asarray(rows) + 1)) + np.sum(special.gammaln(np.asarray(cols) + 1)) - special.gammaln(sum(rows) + 1))
    p = 0.0
    count = 0
    for tab in _tables_with_margins(rows, cols):
        count += 1
        if count > limit:
            raise EnumerationTooLarge(f"more than {limit} tables")
        lp = const - float(np.sum(special.gammaln(np.asarray(tab) + 1)))
        if lp <= obs + _REL_TOL * max(1.0, abs(obs)):
            p += math.exp(lp)
    return min(1.0, p), count


def monte_carlo_pvalue(
    t: np.ndarray,
    statistic: str = "fisher",
    replicates: int = DEFAULT_MC_REPLICATES,
    seed: int = DEFAULT_MC_SEED,
    batch: int = 20_000,
) -> float:
    """Monte Carlo p over random tables with the observed margins.

    Tables are sampled by permuting column labels against fixed row labels,
    which gives the exact conditional (multiple hypergeometric) distribution.
    p = (1 + #{simulated at least as extreme}) / (replicates + 1).
    """
    rng = np.random.default_rng(seed)
    r, c = t.shape
    rows, cols = t.sum(axis=1), t.sum(axis=0)
    row_labels = np.repeat(np.arange(r), rows)
    col_labels = np.repeat(np.arange(c), cols)
    if statistic == "fisher":
        observed = -_log_table_prob(t)
    elif statistic == "chi2":
        observed = chi_square_statistic(t)
    else:
        raise ValueError(f"unknown statistic {statistic!r}")
    const = float(np.sum(special.gammaln(rows + 1)) + np.sum(special.gammaln(cols + 1)) - special.gammaln(t.sum() + 1))
    expected = np.outer(rows, cols) / t.sum()
    hits = 0
    done = 0
    while done < replicates:
        b = min(batch, replicates - done)
        perm = rng.permuted(np.tile(col_labels, (b, 1)), axis=1)
        cells = row_labels[None, :] * c + perm
        offsets = (np.arange(b) * r * c)[:, None]
        counts = np.bincount((cells + offsets).ravel(), minlength=b * r * c).reshape(b, r, c)
        if statistic == "fisher":
            sim = -(const - np.sum(special.gammaln(counts + 1), axis=(1, 2)))
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                terms = np.where(expected > 0, (counts - expected) ** 2 / expected, 0.0)
            sim = terms.sum(axis=(1, 2))
        hits += int(np.sum(sim >= observed - _REL_TOL * max(1.0, abs(observed))))
        done += b
    return (1 + hits) / (replicates + 1)


def contingency_test(
    table: Sequence[Sequence[int]],
    method: str = "auto",
    *,
    seed: int = DEFAULT_MC_SEED,
    replicates: int = DEFAULT_MC_REPLICATES,
    enumeration_limit: int = ENUMERATION_LIMIT,
) -> TestResult:
    """Independence test for an r x c count table.

    ``method``: ``chi2`` (Pearson, no continuity correction), ``fisher``
    (exact; 2x2 by hypergeometric enumeration, r x c by full enumeration,
    falling back to Monte Carlo when enumeration exceeds the limit),
    ``monte-carlo`` (Fisher statistic), ``chi2-monte-carlo``, or ``auto``
    (chi2 when every expected count >= 5, else Fisher).
    """
    t = _as_table(table)
    n = int(t.sum())
    chi2 = chi_square_statistic(t)
    if method == "auto":
        expected = np.outer(t.sum(axis=1), t.sum(axis=0)) / n
        method = "chi2" if np.all(expected >= 5) else "fisher"
    if method == "chi2":
        df = (t.shape[0] - 1) * (t.shape[1] - 1)
        return TestResult(chi2, float(sps.chi2.sf(chi2, df)), "chi2", n, extra={"df": df})
    if method == "fisher":
        if t.shape == (2, 2):
            return TestResult(chi2, fisher_2x2(t), "exact", n)
        try:
            p, count = fisher_exact_rxc(t, enumeration_limit)
            return TestResult(chi2, p, "exact", n, extra={"tables_enumerated": count})
        except EnumerationTooLarge:
            method = "monte-carlo"
    if method == "monte-carlo":
        p = monte_carlo_pvalue(t, "fisher", replicates, seed)
        return TestResult(chi2, p, "monte-carlo", n, seed=seed, replicates=replicates, extra={"statistic_kind": "fisher"})
    if method == "chi2-monte-carlo":
        p = monte_carlo_pvalue(t, "chi2", replicates, seed)
        return TestResult(chi2, p, "monte-carlo", n, seed=seed, replicates=replicates, extra={"statistic_kind": "chi2"})
    raise ValueError(f"unknown method {method!r}")

