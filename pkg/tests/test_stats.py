from __future__ import annotations

import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from omgs.stats import (
    DegenerateSampleError,
    EnumerationTooLarge,
    InsufficientDataError,
    PairedSample,
    benjamini_hochberg,
    bonferroni,
    contingency_test,
    fisher_2x2,
    fisher_exact_rxc,
    icc_2k,
    mean_ci95,
    median_iqr,
    midranks,
    monte_carlo_pvalue,
    spearman_rho,
    tost_equivalence,
    wilcoxon_signed_rank,
)
from oracles import fisher_2x2_enumeration, fisher_rxc_enumeration, icc2k_sums_of_squares, type7_quantile, wilcoxon_enumeration_p

likert_diffs = st.lists(st.integers(-4, 4), min_size=1, max_size=10)
pvals = st.lists(st.floats(0, 1), min_size=1, max_size=20)


# --------------------------------------------------------------------------
# Wilcoxon


def test_wilcoxon_examples():
    assert wilcoxon_signed_rank([1, 2, 3]).p_value == 0.25
    assert wilcoxon_signed_rank([2, -2]).p_value == 1.0
    with pytest.raises(DegenerateSampleError):
        wilcoxon_signed_rank([0, 0, 0])


def test_wilcoxon_frozen_oracle(frozen):
    for s in frozen["wilcoxon"]["samples"]:
        r = wilcoxon_signed_rank(s["diffs"], "exact")
        assert r.p_value == float(Fraction(s["p"])) and r.method == "exact"


@settings(max_examples=150, deadline=None)
@given(likert_diffs)
def test_wilcoxon_matches_enumeration(diffs):
    assume(any(diffs))
    assert wilcoxon_signed_rank(diffs, "exact").p_value == float(wilcoxon_enumeration_p(diffs))


def test_wilcoxon_exact_vs_approx_sanity_band():
    rnd = random.Random(7)
    for _ in range(200):
        n = rnd.randint(8, 12)
        diffs = [m * rnd.choice((-1, 1)) for m in rnd.sample(range(1, 100), n)]
        exact = wilcoxon_signed_rank(diffs, "exact").p_value
        approx = wilcoxon_signed_rank(diffs, "approx").p_value
        assert abs(exact - approx) <= 0.05


def test_wilcoxon_auto_switches_at_twelve():
    assert wilcoxon_signed_rank(list(range(1, 13))).method == "exact"
    assert wilcoxon_signed_rank(list(range(1, 14))).method == "normal-approx"


@given(likert_diffs, st.randoms())
def test_wilcoxon_permutation_invariant(diffs, rnd):
    assume(any(diffs))
    shuffled = list(diffs)
    rnd.shuffle(shuffled)
    assert wilcoxon_signed_rank(diffs).p_value == wilcoxon_signed_rank(shuffled).p_value


def test_paired_sample():
    s = PairedSample.from_columns([5, 4, 3], [4, 4, 1], keys=["a", "b", "c"])
    assert s.differences() == [1, 0, 2]
    assert wilcoxon_signed_rank(s).n_effective == 2
    with pytest.raises(ValueError):
        PairedSample.from_columns([1, 2], [1, 2], keys=["a", "a"])


def test_midranks():
    assert midranks([10, 20, 20, 30]) == [1, 2.5, 2.5, 4]


# --------------------------------------------------------------------------
# multiplicity


def test_bonferroni_examples():
    assert bonferroni([0.01], 5) == [0.05]
    assert bonferroni([0.5], 5) == [1.0]
    assert bonferroni([0.0], 3) == [0.0]
    with pytest.raises(ValueError):
        bonferroni([0.1, 0.2], 1)


def test_bh_examples():
    assert benjamini_hochberg([0.01, 0.02, 0.03, 0.04, 0.05], 0.05).rejected == (True,) * 5
    assert benjamini_hochberg([1.0] * 4, 0.05).rejected == (False,) * 4
    assert benjamini_hochberg([0.04], 0.05).rejected == (True,)


def test_bh_step_up_rejects_below_largest_passing_rank():
    # sorted ranks 1..3 sit exactly on i*q/m; rank 3 is the largest passing rank
    res = benjamini_hochberg([0.02, 0.001, 0.03, 0.9, 0.9], 0.05)
    assert res.rejected == (True, True, True, False, False)


@given(pvals, st.floats(0.001, 0.5))
def test_bh_adjusted_monotone_and_consistent(p, q):
    res = benjamini_hochberg(p, q)
    order = sorted(range(len(p)), key=lambda i: p[i])
    adj = [res.adjusted[i] for i in order]
    assert all(a <= b + 1e-15 for a, b in zip(adj, adj[1:]))
    assert all(res.adjusted[i] >= p[i] - 1e-15 for i in range(len(p)))
    assert res.rejected == tuple(a <= q for a in res.adjusted) or any(abs(a - q) < 1e-12 for a in res.adjusted)


@given(pvals)
def test_bonferroni_dominates_raw(p):
    assert all(a >= x for a, x in zip(bonferroni(p), p))


# --------------------------------------------------------------------------
# ICC


def test_icc_frozen_oracle(frozen):
    for case in frozen["icc2k"]:
        assert icc_2k(case["matrix"]).value == pytest.approx(float(Fraction(case["icc"])), abs=1e-12)


def test_icc_textbook_value():
    # the classic six-subject, four-judge illustration: ICC(2,4) is 0.62
    r = icc_2k([[9, 2, 5, 8], [6, 1, 3, 2], [8, 4, 6, 8], [7, 1, 2, 6], [10, 5, 6, 9], [6, 2, 4, 7]])
    assert round(r.value, 2) == 0.62
    assert r.ci_low < r.value < r.ci_high


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(2, 4), st.data())
def test_icc_matches_sums_of_squares_oracle(n, k, data):
    m = data.draw(st.lists(st.lists(st.integers(1, 5), min_size=k, max_size=k), min_size=n, max_size=n))
    oracle_den = None
    try:
        oracle = icc2k_sums_of_squares(m)
    except ZeroDivisionError:
        oracle_den = 0
    r = icc_2k(m)
    if oracle_den == 0 or r.degenerate:
        assert r.degenerate
        return
    assert r.value == pytest.approx(float(oracle), abs=1e-9)


def test_icc_ci_is_stepped_up_single_measure_interval():
    import scipy.stats as sps

    rnd = random.Random(3)
    for _ in range(30):
        n, k = rnd.randint(3, 8), rnd.randint(2, 5)
        m = np.array([[rnd.randint(1, 5) for _ in range(k)] for _ in range(n)], dtype=float)
        r = icc_2k(m)
        if r.degenerate or r.f_value == math.inf:
            continue
        grand = m.mean()
        msr = k * ((m.mean(axis=1) - grand) ** 2).sum() / (n - 1)
        msc = n * ((m.mean(axis=0) - grand) ** 2).sum() / (k - 1)
        mse = (((m - grand) ** 2).sum() - msr * (n - 1) - msc * (k - 1)) / ((n - 1) * (k - 1))
        a1 = (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)
        fj = msc / mse
        v = (k - 1) * (n - 1) * (k * a1 * fj + n * (1 + (k - 1) * a1) - k * a1) ** 2 / (
            (n - 1) * k**2 * a1**2 * fj**2 + (n * (1 + (k - 1) * a1) - k * a1) ** 2
        )
        fl, fu = sps.f.ppf(0.975, n - 1, v), sps.f.ppf(0.975, v, n - 1)
        lo1 = n * (msr - fl * mse) / (fl * (k * msc + (k * n - k - n) * mse) + n * msr)
        hi1 = n * (fu * msr - mse) / (k * msc + (k * n - k - n) * mse + n * fu * msr)
        for got, single in ((r.ci_low, lo1), (r.ci_high, hi1)):
            den = 1 + (k - 1) * single
            if abs(den) > 1e-9:
                assert got == pytest.approx(k * single / den, rel=1e-9, abs=1e-9)


def test_icc_identical_raters():
    r = icc_2k([[1, 1], [2, 2], [3, 3]])
    assert r.value == 1.0 and not r.degenerate
    assert r.ci_low == r.ci_high == 1.0


def test_icc_constant_matrix_is_degenerate():
    r = icc_2k([[3, 3], [3, 3], [3, 3]])
    assert r.degenerate and r.value == 0.0


def test_icc_shape_checks():
    with pytest.raises(ValueError):
        icc_2k([[1, 2]])
    with pytest.raises(ValueError):
        icc_2k([[1], [2]])


# --------------------------------------------------------------------------
# correlation


def test_spearman():
    assert spearman_rho([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)
    assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert spearman_rho([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)
    assert spearman_rho([1, 1, 1], [1, 2, 3]) is None


# --------------------------------------------------------------------------
# equivalence


def test_tost_examples():
    zero = tost_equivalence([0.0] * 10)
    assert zero.equivalent and zero.degenerate
    rnd = random.Random(1)
    shifted = tost_equivalence([0.8 + rnd.uniform(-0.01, 0.01) for _ in range(10)])
    assert not shifted.equivalent
    assert not tost_equivalence([0.0] * 10, margin=0).equivalent
    assert not tost_equivalence([0.1, -0.1, 0.05], margin=0).equivalent
    with pytest.raises(InsufficientDataError):
        tost_equivalence([0.3])


@settings(max_examples=500, deadline=None)
@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=2, max_size=30))
def test_tost_ci_duality(diffs):
    r = tost_equivalence(diffs)
    if r.degenerate:
        return
    lo, hi = r.ci95
    assert r.equivalent == (-r.margin < lo and hi < r.margin)


# --------------------------------------------------------------------------
# descriptive


def test_mean_ci95():
    assert mean_ci95([1, 1, 1, 1]).half_width == 0
    ci = mean_ci95([0, 2])
    assert ci.mean == 1 and ci.half_width == pytest.approx(12.706, abs=1e-3)
    assert mean_ci95([5] * 100).half_width == 0
    with pytest.raises(InsufficientDataError):
        mean_ci95([1])


def test_median_iqr_examples(frozen):
    m = median_iqr([1, 2, 3, 4, 5])
    assert (m.median, m.q1, m.q3) == (3, 2, 4)
    single = median_iqr([7])
    assert single.median == 7 and single.width == 0
    t = frozen["type7"]
    m = median_iqr(t["values"])
    assert (m.q1, m.median, m.q3) == tuple(float(Fraction(t[k])) for k in ("q1", "median", "q3"))
    assert m.format() == "55.0 [51.0;58.5]"


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=30), st.sampled_from([0.25, 0.5, 0.75]))
def test_quantiles_match_oracle(values, p):
    m = median_iqr(values)
    got = {0.25: m.q1, 0.5: m.median, 0.75: m.q3}[p]
    assert got == pytest.approx(float(type7_quantile(values, p)), abs=1e-9)


def test_width_style_with_thousands():
    m = median_iqr([120_000, 134_656, 139_130])
    assert m.format("width", digits=0, thousands=True) == "134,656 (IQR, 9,565)"


# --------------------------------------------------------------------------
# contingency tables


def test_fisher_examples():
    assert contingency_test([[10, 0], [0, 10]], "fisher").p_value == pytest.approx(2 / math.comb(20, 10), rel=1e-12)
    assert contingency_test([[5, 5], [5, 5]], "fisher").p_value == pytest.approx(1.0)
    with pytest.raises(ValueError):
        contingency_test([[0, 0], [0, 0]])


def test_fisher_2x2_frozen_oracle(frozen):
    for case in frozen["fisher_2x2"]:
        assert fisher_2x2(np.array(case["table"])) == pytest.approx(float(Fraction(case["p"])), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=4, max_size=4))
def test_fisher_2x2_matches_enumeration(cells):
    assume(sum(cells) > 0)
    table = [cells[:2], cells[2:]]
    assert fisher_2x2(np.array(table)) == pytest.approx(float(fisher_2x2_enumeration(table)), abs=1e-12)


def test_fisher_rxc_frozen_oracle(frozen):
    for case in frozen["fisher_rxc"]:
        p, _ = fisher_exact_rxc(np.array(case["table"]))
        assert p == pytest.approx(float(Fraction(case["p"])), abs=1e-12)


def test_rxc_enumeration_limit_falls_back_to_monte_carlo():
    table = [[1, 0, 2, 0], [0, 2, 0, 1], [2, 1, 0, 1]]
    with pytest.raises(EnumerationTooLarge):
        fisher_exact_rxc(np.array(table), limit=5)
    r = contingency_test(table, "fisher", enumeration_limit=5, replicates=20_000)
    assert r.method == "monte-carlo" and r.seed is not None and r.replicates == 20_000


def test_monte_carlo_close_to_enumeration():
    table = [[1, 0, 2, 0], [0, 2, 0, 1], [2, 1, 0, 1]]
    mc = contingency_test(table, "monte-carlo")
    assert abs(mc.p_value - float(fisher_rxc_enumeration(table))) <= 0.01
    assert mc.to_dict()["seed"] == mc.seed and mc.replicates == 100_000


def test_monte_carlo_is_seeded():
    t = np.array([[2, 0, 1], [0, 3, 1], [1, 0, 2]])
    assert monte_carlo_pvalue(t, replicates=5000, seed=3) == monte_carlo_pvalue(t, replicates=5000, seed=3)


def test_chi2_auto_and_monte_carlo():
    big = [[30, 20], [20, 30]]
    r = contingency_test(big)
    assert r.method == "chi2" and r.statistic == pytest.approx(4.0)
    assert contingency_test([[1, 2], [3, 0]]).method == "exact"
    mc = contingency_test(big, "chi2-monte-carlo")
    # conditional exact p of the chi2 statistic, by enumerating the free cell
    rows, cols, n = (50, 50), (50, 50), 100

    def chi2(a):
        t = np.array([[a, rows[0] - a], [cols[0] - a, rows[1] - cols[0] + a]])
        e = np.outer(rows, cols) / n
        return float(((t - e) ** 2 / e).sum())

    exact = sum(
        Fraction(math.comb(50, a) * math.comb(50, 50 - a), math.comb(100, 50)) for a in range(51) if chi2(a) >= 4.0 - 1e-9
    )
    assert abs(mc.p_value - float(exact)) <= 0.01


@given(st.lists(st.integers(0, 4), min_size=6, max_size=6), st.randoms())
def test_contingency_invariant_to_row_order(cells, rnd):
    table = [cells[:3], cells[3:]]
    assume(all(sum(r) for r in table) and all(table[0][j] + table[1][j] for j in range(3)))
    swapped = [table[1], table[0]]
    a = contingency_test(table, "fisher").p_value
    b = contingency_test(swapped, "fisher").p_value
    assert a == pytest.approx(b, abs=1e-12)
