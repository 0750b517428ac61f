"""Independent brute-force oracles. Deliberately naive: no shared code with the package."""

from __future__ import annotations

import hashlib
import itertools
import math
import re
from fractions import Fraction


def wilcoxon_enumeration_p(diffs):
    """Two-sided signed-rank p by listing all 2^n sign assignments (exact Fractions)."""
    nz = [d for d in diffs if d != 0]
    mags = sorted(abs(d) for d in nz)
    ranks = {}
    for m in set(mags):
        positions = [i + 1 for i, v in enumerate(mags) if v == m]
        ranks[m] = Fraction(sum(positions), len(positions))
    r = [ranks[abs(d)] for d in nz]
    observed = sum(ri for d, ri in zip(nz, r) if d > 0)
    lower = upper = 0
    total = 0
    for signs in itertools.product((0, 1), repeat=len(r)):
        w = sum(ri for s, ri in zip(signs, r) if s)
        total += 1
        lower += w <= observed
        upper += w >= observed
    return min(Fraction(1), 2 * Fraction(min(lower, upper), total))


def fisher_2x2_enumeration(table):
    """Two-sided Fisher p from the hypergeometric pmf, exact Fractions."""
    (a, b), (c, d) = table
    r1, r2, c1 = a + b, c + d, a + c
    n = r1 + r2

    def pmf(x):
        return Fraction(math.comb(r1, x) * math.comb(r2, c1 - x), math.comb(n, c1))

    support = range(max(0, c1 - r2), min(r1, c1) + 1)
    p_obs = pmf(a)
    return sum((pmf(x) for x in support if pmf(x) <= p_obs), Fraction(0))


def _all_tables(rows, cols):
    """Every nonnegative integer table with these margins, by brute force over cells."""
    r, c = len(rows), len(cols)
    free = [(i, j) for i in range(r - 1) for j in range(c - 1)]
    ranges = [range(min(rows[i], cols[j]) + 1) for i, j in free]
    for vals in itertools.product(*ranges):
        t = [[0] * c for _ in range(r)]
        for (i, j), v in zip(free, vals):
            t[i][j] = v
        ok = True
        for i in range(r - 1):
            t[i][c - 1] = rows[i] - sum(t[i][: c - 1])
            ok &= t[i][c - 1] >= 0
        for j in range(c):
            t[r - 1][j] = cols[j] - sum(t[i][j] for i in range(r - 1))
            ok &= t[r - 1][j] >= 0
        if ok and sum(t[r - 1]) == rows[r - 1]:
            yield t


def fisher_rxc_enumeration(table):
    """Exact r x c Fisher p (probability ordering), exact Fractions."""
    rows = [sum(r) for r in table]
    cols = [sum(c) for c in zip(*table)]
    n = sum(rows)
    num = math.prod(math.factorial(x) for x in rows + cols)

    def prob(t):
        return Fraction(num, math.factorial(n) * math.prod(math.factorial(x) for row in t for x in row))

    p_obs = prob(table)
    return sum((prob(t) for t in _all_tables(rows, cols) if prob(t) <= p_obs), Fraction(0))


def icc2k_sums_of_squares(matrix):
    """ICC(2,k) from explicit double sums over the grid, exact Fractions."""
    x = [[Fraction(v) for v in row] for row in matrix]
    n, k = len(x), len(x[0])
    grand = sum(sum(r) for r in x) / (n * k)
    row_means = [sum(r) / k for r in x]
    col_means = [sum(x[i][j] for i in range(n)) / n for j in range(k)]
    ssr = sum(k * (m - grand) ** 2 for m in row_means)
    ssc = sum(n * (m - grand) ** 2 for m in col_means)
    sst = sum((x[i][j] - grand) ** 2 for i in range(n) for j in range(k))
    sse = sst - ssr - ssc
    msr, msc, mse = ssr / (n - 1), ssc / (k - 1), sse / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (msc - mse) / n)


def type7_quantile(values, p):
    xs = sorted(values)
    h = (len(xs) - 1) * Fraction(p)
    lo = int(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


# retrieval: an embedder and exact cosine written from the documented definition


def oracle_embed(text, dimension=256):
    counts = [0] * dimension
    for tok in re.findall(r"[a-z0-9]+", text.lower()):
        bucket = int(hashlib.sha256(tok.encode("utf-8")).hexdigest()[:16], 16) % dimension
        counts[bucket] += 1
    return counts


def _sparse_fractions(vec):
    return {i: Fraction(float(v)) for i, v in enumerate(vec) if v != 0}


def exact_cosine(a, b):
    """Exact rational dot product and squared norms; returns (dot, na, nb)."""
    fa = a if isinstance(a, dict) else _sparse_fractions(a)
    fb = b if isinstance(b, dict) else _sparse_fractions(b)
    dot = sum(x * fb[i] for i, x in fa.items() if i in fb)
    return dot, sum(x * x for x in fa.values()), sum(y * y for y in fb.values())


_ENTRY_CACHE = {}


def brute_force_search(query_vec, snapshot, k):
    """Sort every entry by exact cosine (descending), ties by entry_id ascending."""
    q = _sparse_fractions(query_vec)
    scored = []
    for eid in snapshot.entry_ids:
        key = (snapshot.snapshot_id, eid)
        if key not in _ENTRY_CACHE:
            _ENTRY_CACHE[key] = _sparse_fractions(snapshot.entries[eid].embedding)
        dot, na, nb = exact_cosine(q, _ENTRY_CACHE[key])
        sim = 0.0 if na == 0 or nb == 0 else float(dot) / math.sqrt(float(na) * float(nb))
        scored.append((-sim, eid))
    scored.sort()
    return [eid for _, eid in scored[:k]], [(-s) for s, _ in scored[:k]]
