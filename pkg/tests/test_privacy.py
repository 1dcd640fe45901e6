import math
import random
from fractions import Fraction as F

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from allocations import APRIL_LEVELS, APRIL_QUERIES, PRODUCTION_LEVELS, PRODUCTION_QUERIES
from conftest import chain_spine, spine_from_parents
from topdown.privacy import (
    AllocationError,
    AllocationTable,
    NoisyMeasurement,
    as_fraction,
    epsilon_of_rho,
    pmf,
    privacy_report,
    sample_discrete_gaussian,
    sensitivity_audit,
    substream,
    total_rho,
    variance_of,
)
from topdown.schema import Schema, build_marginal, detailed_query, total_query, Recode
from topdown.spine import NodeRecord, Spine

mpmath.mp.dps = 40


def mp_moments(s2):
    """Independent high-precision normalizer and second moment."""
    s2 = mpmath.mpf(s2.numerator) / s2.denominator if isinstance(s2, F) else mpmath.mpf(s2)
    k = int(40 * mpmath.sqrt(s2)) + 40
    w = [mpmath.exp(-mpmath.mpf(y * y) / (2 * s2)) for y in range(-k, k + 1)]
    z = mpmath.fsum(w)
    m2 = mpmath.fsum(mpmath.mpf(y * y) * wi for y, wi in zip(range(-k, k + 1), w))
    return z, m2 / z


# conversion -------------------------------------------------------------------


@pytest.mark.parametrize("rho,eps,tol", [(1.095, 11.14, 0.01), (0.1885, 4.36, 0.01), (2.63, 18.20, 0.05)])
def test_epsilon_published_pairs(rho, eps, tol):
    assert abs(epsilon_of_rho(rho, 1e-10) - eps) <= tol


def test_epsilon_errors():
    with pytest.raises(ValueError):
        epsilon_of_rho(0, 1e-10)
    with pytest.raises(ValueError):
        epsilon_of_rho(1, 1.5)


@given(st.floats(0.01, 10), st.floats(0.01, 10))
def test_epsilon_monotone_in_rho(a, b):
    lo, hi = sorted((a, b))
    assert epsilon_of_rho(lo, 1e-10) <= epsilon_of_rho(hi, 1e-10)


# distribution -------------------------------------------------------------------


@pytest.mark.parametrize("s2", [F(1, 3), F(1), F(4), F(25), F(1000)])
def test_pmf_matches_oracle(s2):
    z, _ = mp_moments(s2)
    for x in (0, 1, 2, 5):
        expect = float(mpmath.exp(-mpmath.mpf(x * x) * s2.denominator / (2 * s2.numerator)) / z)
        assert pmf(x, s2) == pytest.approx(expect, rel=1e-10, abs=1e-300)
        assert pmf(x, s2) == pmf(-x, s2)


def test_pmf_at_zero_and_normalization():
    assert abs(pmf(0, 1) - 0.398942) < 1e-6
    for s2 in (1, 4, 25):
        r = int(8 * math.sqrt(s2))
        assert abs(math.fsum(pmf(x, s2) for x in range(-r, r + 1)) - 1) < 1e-9
    with pytest.raises(ValueError):
        pmf(0, 0)


@pytest.mark.parametrize("s2", [F(1, 2), F(1), F(2), F(4), F(25), F(400)])
def test_variance_matches_oracle(s2):
    _, var = mp_moments(s2)
    assert variance_of(s2) == pytest.approx(float(var), rel=1e-10)
    assert variance_of(s2) <= s2


def test_variance_at_one_is_essentially_one():
    # the discrete Gaussian with parameter 1 has variance 1 - 2e-7, not a visibly smaller value
    v = variance_of(1)
    assert abs(v - 0.99999979) < 1e-7


def test_variance_large_and_monotone():
    for s2 in (25, 100, 1000):
        assert abs(variance_of(s2) / s2 - 1) < 1e-6
    grid = [variance_of(s) for s in (F(1, 2), 1, 2, 4)]
    assert grid == sorted(grid) and len(set(grid)) == 4


# sampler ----------------------------------------------------------------------


def test_sampler_rejects_nonpositive():
    with pytest.raises(ValueError):
        sample_discrete_gaussian(0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_discrete_gaussian(F(-1), np.random.default_rng(0), size=3)


def test_sampler_determinism():
    a = sample_discrete_gaussian(F(7, 3), substream(5, "x", "TOTAL"), size=1000)
    b = sample_discrete_gaussian(F(7, 3), substream(5, "x", "TOTAL"), size=1000)
    c = sample_discrete_gaussian(F(7, 3), substream(5, "y", "TOTAL"), size=1000)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    s1 = [sample_discrete_gaussian(2, substream(1, "s")) for _ in range(1)]
    s2 = [sample_discrete_gaussian(2, substream(1, "s")) for _ in range(1)]
    assert s1 == s2


def test_substream_keys_are_not_concatenated():
    a = substream(0, "ab", "c").integers(1 << 62, size=4)
    b = substream(0, "a", "bc").integers(1 << 62, size=4)
    assert not np.array_equal(a, b)


def test_sampler_mean_and_pmf_at_zero():
    x = sample_discrete_gaussian(4, np.random.default_rng(2024), size=1_000_000)
    assert abs(x.mean()) < 0.01
    y = sample_discrete_gaussian(1, np.random.default_rng(2025), size=1_000_000)
    assert abs(np.mean(y == 0) - 0.39894) < 0.002


def chi2_pvalue(samples, s2):
    """Chi-squared goodness of fit against the pmf, tail bins pooled to expected count >= 5."""
    from scipy.stats import chisquare
    n = samples.size
    r = 1
    while n * pmf(r + 1, s2) >= 5:
        r += 1
    inner = np.arange(-r, r + 1)
    probs = np.array([pmf(int(x), s2) for x in inner])
    obs = np.array([np.sum(samples == x) for x in inner])
    tail_p = max(0.0, 1 - probs.sum())
    obs = np.append(obs, n - obs.sum())
    exp = np.append(probs, tail_p) * n
    if exp[-1] < 5:
        obs[-2] += obs[-1]
        exp[-2] += exp[-1]
        obs, exp = obs[:-1], exp[:-1]
    exp *= n / exp.sum()
    return chisquare(obs, exp).pvalue


@pytest.mark.parametrize("s2", [F(1, 7), F(3, 2), F(10)])
def test_scalar_and_vector_paths_fit_pmf(s2):
    rng = np.random.default_rng(11)
    scalar = np.array([sample_discrete_gaussian(s2, rng) for _ in range(20000)])
    vec = sample_discrete_gaussian(s2, np.random.default_rng(12), size=20000)
    for arr in (scalar, vec):
        assert chi2_pvalue(arr, s2) > 1e-3


def test_sampler_huge_denominator_falls_back():
    s2 = F(10 ** 30 + 1, 10 ** 29)
    x = sample_discrete_gaussian(s2, np.random.default_rng(0), size=2000)
    assert x.dtype == np.int64 and abs(x.var() / float(s2) - 1) < 0.1


# allocation -------------------------------------------------------------------


def test_as_fraction_is_exact_for_decimal_literals():
    assert as_fraction(2.56) == F(64, 25)
    assert as_fraction("3/7") == F(3, 7)
    assert 1 / as_fraction(2.56) == F(25, 64)


def test_psi_two_gives_quarter():
    alloc = AllocationTable(4, {"a": F(1, 2), "b": F(1, 2)}, {"a": {"T": 1}, "b": {"T": F(1, 3), "D": F(2, 3)}})
    assert total_rho(alloc) == F(1, 4)
    assert total_rho(alloc, chain_spine([2], ["a", "b"])) == F(1, 4)


@pytest.mark.parametrize("levels,queries", [(PRODUCTION_LEVELS, PRODUCTION_QUERIES), (APRIL_LEVELS, APRIL_QUERIES)])
def test_published_tables_accepted(levels, queries):
    alloc = AllocationTable.from_rho(2.56, levels, queries)
    assert total_rho(alloc) == F(64, 25)
    s = chain_spine([2, 1, 1, 1, 2], list(levels))
    assert total_rho(alloc, s) == F(64, 25)
    node = s["R.0.0.0.0.1"]
    assert alloc.sigma2(node, "DETAILED") == F(25, 64) / (levels["block"] * queries["block"]["DETAILED"])


def test_path_sum_error_names_leaf():
    alloc = AllocationTable(1, {"a": F(1, 2), "b": F(31, 64)}, {"a": {"T": 1}, "b": {"T": 1}})
    with pytest.raises(AllocationError, match="63/64"):
        total_rho(alloc)
    with pytest.raises(AllocationError, match="R.0"):
        total_rho(alloc, chain_spine([2], ["a", "b"]))


def test_query_sum_error_names_level():
    alloc = AllocationTable(1, {"a": F(1, 2), "b": F(1, 2)}, {"a": {"T": 1}, "b": {"T": F(1, 2), "D": F(1, 3)}})
    with pytest.raises(AllocationError, match="'b'"):
        total_rho(alloc, chain_spine([2], ["a", "b"]))


def test_shares_out_of_range_and_missing_group():
    with pytest.raises(AllocationError):
        AllocationTable(1, {"a": F(3, 2)}, {"a": {"T": 1}})
    alloc = AllocationTable(1, {"a": 1}, {"a": {"T": 1, "D": 0}})
    node = chain_spine([], ["a"])["R"]
    with pytest.raises(AllocationError):
        alloc.sigma2(node, "D")


def test_noisy_measurement_weight():
    m = NoisyMeasurement("n", "T", np.array([1]), F(9, 4))
    assert m.weight == pytest.approx(4 / 9)


def test_privacy_report_lists_epsilon():
    alloc = AllocationTable.from_rho(F(1095, 1000), {"a": 1}, {"a": {"T": 1}})
    text = privacy_report(alloc, deltas=(1e-10,))
    assert "219/200" in text and "11.1376" in text


# audit ----------------------------------------------------------------------


def two_leaf_spine():
    return Spine.build([NodeRecord("r", None, "top"), NodeRecord("x", "r", "leaf"), NodeRecord("y", "r", "leaf")])


def test_audit_tight_fixture():
    schema = Schema.from_levels({"a": ["0", "1"]})
    groups = {"DETAILED": detailed_query(schema)}
    alloc = AllocationTable(3, {"top": F(1, 2), "leaf": F(1, 2)}, {"top": {"DETAILED": 1}, "leaf": {"DETAILED": 1}})
    rep = sensitivity_audit(groups, alloc, two_leaf_spine(), schema)
    assert rep.max_loss == 2 * F(1, 3) and rep.tight
    # pairs: 2 leaves x 2 leaves x 2 cells x 2 cells minus 2 x 2 identical moves
    assert rep.pairs_checked == 12


def test_audit_total_only_same_leaf_is_free():
    schema = Schema.from_levels({"a": ["0", "1"]})
    groups = {"TOTAL": total_query(schema)}
    leaf_only = Spine.build([NodeRecord("x", None, "leaf")])
    alloc = AllocationTable(1, {"leaf": 1}, {"leaf": {"TOTAL": 1}})
    rep = sensitivity_audit(groups, alloc, leaf_only, schema)
    assert rep.max_loss == 0 and not rep.tight


def test_audit_detects_overspent_allocation():
    # shares are checked first, so a too-generous scale is emulated by repeating a group
    schema = Schema.from_levels({"a": ["0", "1"]})
    groups = {"A": detailed_query(schema), "B": detailed_query(schema)}
    alloc = AllocationTable(1, {"leaf": 1}, {"leaf": {"A": F(1, 2), "B": F(1, 2)}})
    rep = sensitivity_audit(groups, alloc, Spine.build([NodeRecord("x", None, "leaf")]), schema)
    assert rep.max_loss == 2


def test_audit_limits():
    schema = Schema.from_levels({"a": [str(i) for i in range(13)]})
    alloc = AllocationTable(1, {"leaf": 1}, {"leaf": {"DETAILED": 1}})
    with pytest.raises(ValueError):
        sensitivity_audit({"DETAILED": detailed_query(schema)}, alloc, Spine.build([NodeRecord("x", None, "leaf")]), schema)


def random_allocation(rng: random.Random, spine, groups):
    """Random valid shares with per-node overrides on the leaves so every path sums to 1."""
    depth_names = spine.level_names
    shares = {}
    for name in depth_names:
        shares[name] = F(rng.randint(0, 4), 16)
    node_shares = {}
    for leaf in spine.leaves():
        above = sum((shares[spine[n].level_name] for n in spine.path(leaf)[:-1]), F(0))
        if above >= 1:
            return None
        node_shares[leaf] = 1 - above
    qs = {}
    for name in depth_names:
        names = rng.sample(sorted(groups), rng.randint(1, len(groups)))
        w = [rng.randint(1, 5) for _ in names]
        qs[name] = {g: F(x, sum(w)) for g, x in zip(names, w)}
    return AllocationTable(F(rng.randint(1, 9), rng.randint(1, 9)), shares, qs, node_shares)


def test_audit_random_allocations_respect_bound():
    rng = random.Random(99)
    schema = Schema.from_levels({"a": ["0", "1", "2"], "b": ["0", "1"]})
    a, b = schema.attribute("a"), schema.attribute("b")
    groups = {
        "TOTAL": total_query(schema),
        "DETAILED": detailed_query(schema),
        "A": build_marginal(schema, [Recode.identity(a)], "A"),
        "B01": build_marginal(schema, [Recode.from_labels(b, [["0", "1"]]), Recode.from_labels(a, [["0", "1"]])], "B01"),
    }
    done = 0
    while done < 12:
        n = rng.randint(2, 7)
        parents = [None] + [rng.randrange(i) for i in range(1, n)]
        s = spine_from_parents(parents)
        if len(s.leaves()) > 6:
            continue
        depth = {}
        for i, p in enumerate(parents):
            depth[i] = 0 if p is None else depth[p] + 1
        s = Spine.build([NodeRecord(f"n{i}", None if p is None else f"n{p}", f"d{depth[i]}")
                         for i, p in enumerate(parents)], [f"d{k}" for k in range(max(depth.values()) + 1)])
        alloc = random_allocation(rng, s, groups)
        if alloc is None:
            continue
        rep = sensitivity_audit(groups, alloc, s, schema)
        assert rep.max_loss <= rep.bound
        done += 1
