from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from pirdeter.incentives import (
    CONSTANT,
    LINEAR,
    IncentiveParams,
    check_feasibility,
    check_statistical,
    coalition_gain_real,
    coalition_marginal_gain,
    coalition_max_size,
    coalition_prob,
    coalition_root,
    compute_q,
    existence_condition,
    exit_hit_probability,
    feasible_witness,
    frac,
    frange,
    generalized_fine_condition,
    insurance_fee_threshold,
    insurance_multi_exit,
    insurance_sigma,
    insurance_sigma_discounted,
    insurance_stream,
    linear_coefficients,
    q_binomial,
    scan_region,
    single_shot_condition,
    statistical_bound,
)

SAMPLE = dict(s=1, f=200, p=200, r=Fraction(99, 100), V=100, delta=Fraction(99, 100), omega=1, xi=Fraction(99, 100))


def sample(**changes) -> IncentiveParams:
    return IncentiveParams(**{**SAMPLE, **changes})


# -- oracles ----------------------------------------------------------------


def q_by_enumeration(ell: int, k: int) -> Fraction:
    """Share of (k-1)-subsets of the other ell-1 servers avoiding k-1 fixed former partners."""
    partners = set(range(k - 1))
    subsets = list(itertools.combinations(range(ell - 1), k - 1))
    avoid = sum(1 for c in subsets if partners.isdisjoint(c))
    return Fraction(avoid, len(subsets))


def coalition_prob_by_enumeration(ell: int, k: int, s: int) -> Fraction:
    members = set(range(s))
    sets = list(itertools.combinations(range(ell), k))
    return Fraction(sum(1 for c in sets if len(members.intersection(c)) >= k - 1), len(sets))


def bisect_root(fn, lo: float, hi: float) -> float:
    flo = fn(lo)
    for _ in range(200):
        mid = (lo + hi) / 2
        if (fn(mid) > 0) == (flo > 0):
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


# -- parameters ---------------------------------------------------------------


def test_frac_goes_through_decimal_repr():
    assert frac(0.1) == Fraction(1, 10)
    assert frac("0.99") == Fraction(99, 100)
    assert frac(3) == 3


@pytest.mark.parametrize(
    "changes", [dict(s=-1), dict(delta=1), dict(xi=1), dict(xi=0), dict(theta=1), dict(omega=0)]
)
def test_params_validation(changes):
    with pytest.raises(ValueError):
        sample(**changes)


# -- q ------------------------------------------------------------------------


@pytest.mark.parametrize("ell,k,q", [(10, 2, Fraction(8, 9)), (10, 3, Fraction(7, 12)), (5, 3, Fraction(1, 6))])
def test_compute_q_values(ell, k, q):
    assert compute_q(ell, k) == q
    assert q_by_enumeration(ell, k) == q


def test_compute_q_needs_enough_servers():
    with pytest.raises(ValueError):
        compute_q(4, 3)
    assert q_binomial(4, 3) == 0


@pytest.mark.parametrize("k", range(2, 7))
def test_compute_q_matches_enumeration(k):
    for ell in range(2 * k - 1, 21):
        assert compute_q(ell, k) == q_by_enumeration(ell, k) == q_binomial(ell, k)


@given(k=st.integers(2, 8), ell=st.integers(3, 400))
def test_q_increases_with_ell(k, ell):
    assume(ell >= 2 * k - 1)
    assert compute_q(ell + 1, k) > compute_q(ell, k)


# -- feasibility ------------------------------------------------------------


def test_sample_misses_reward_bound_by_small_margin():
    rep = check_feasibility(sample(), 10000, 2)
    assert [rep[i].passed for i in "12345"] == [True, True, False, True, True]
    assert rep["3"].rhs == Fraction(9900, 9999)
    assert rep["3"].margin == Fraction(99, 100) - Fraction(9900, 9999) == Fraction(-1, 10100)
    assert not rep.passed


def test_derived_sample_fails_strict_second_inequality():
    # r = 1.0 with s = 1 and k = 2 sits exactly on (k-1)s = r
    rep = check_feasibility(sample(r=1, f=Fraction(31, 10)), 10000, 2)
    assert not rep["2"].passed and rep["2"].margin == 0
    assert all(rep[i].passed for i in "1345")
    assert check_feasibility(sample(r=Fraction(995, 1000), f=Fraction(31, 10)), 10000, 2).passed


@given(
    s=st.fractions(0, 60), r=st.fractions(0, 60), p=st.fractions(0, 400), f=st.fractions(0, 400),
    k=st.integers(2, 5), ell=st.integers(10, 2000),
)
def test_report_is_conjunction_of_margins(s, r, p, f, k, ell):
    rep = check_feasibility(sample(s=s, r=r, p=p, f=f), ell, k)
    assert rep.passed == all(x.passed for x in rep.results)
    for x in rep.results:
        strict = x.id in ("1", "2", "4")
        if strict:
            assert x.passed == (x.margin > 0)
    assert rep["5"].passed == (rep["5"].margin >= 0)
    assert rep["3"].passed == (r > rep["3"].rhs and r <= p)


@pytest.mark.parametrize(
    "s,p,V,holds",
    [(1, 200, 100, True), (0, 0, 100, False), (50, 100, 100, False), (Fraction(1, 2), 199, 100, False), (Fraction(51, 100), 199, 100, True)],
)
def test_single_shot_condition(s, p, V, holds):
    assert bool(single_shot_condition(sample(s=s, p=p, V=V), 2)) is holds


def test_generalized_fine_reduces_to_first_inequality():
    params = sample()
    assert generalized_fine_condition(params, 0).rhs == check_feasibility(params, 10000, 2)["1"].rhs / 3 * 1
    assert generalized_fine_condition(params, Fraction(1, 2)).rhs == 3 * params.r
    with pytest.raises(ValueError):
        generalized_fine_condition(params, 1)


def smallest_feasible_ell(k: int, delta, xi=1) -> int:
    ell = 2 * k - 1
    while not existence_condition(ell, k, delta, xi):
        ell += 1
    return ell


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_existence_threshold_and_witness(k):
    ell = smallest_feasible_ell(k, Fraction(99, 100))
    assert not existence_condition(ell - 1, k, Fraction(99, 100))
    # the threshold grows like 99 k (k-1), not 100 k
    assert 0.9 < ell / (99 * k * (k - 1)) < 1.1
    w = feasible_witness(2 * ell, k, V=100, delta=Fraction(99, 100), xi=Fraction(999, 1000))
    assert w is not None and check_feasibility(w, 2 * ell, k).passed
    assert feasible_witness(ell - 1, k, V=100, delta=Fraction(99, 100), xi=Fraction(999, 1000)) is None


def test_hundred_k_suffices_only_for_two_servers():
    assert existence_condition(200, 2, Fraction(99, 100), 1)
    assert not existence_condition(300, 3, Fraction(99, 100), 1)


def test_scan_region_finds_feasible_points():
    grid = {"k": [2, 3], "s": frange(1, 10, 3), "p": [150, 200], "r": [Fraction(995, 1000), 2], "f": [Fraction(31, 10), 10]}
    rows = scan_region(grid, dict(V=100, delta=Fraction(99, 100), xi=Fraction(99, 100)), ell=10000)
    assert len(rows) == 2 * 4 * 2 * 2 * 2
    assert any(rep.passed for _, rep in rows)
    for point, rep in rows:
        assert rep.k == point["k"]
    with pytest.raises(ValueError):
        scan_region({"k": []}, {}, ell=10)


# -- malicious servers --------------------------------------------------------


def test_statistical_bound_value():
    v = statistical_bound(100, 3, Fraction(1, 10))
    assert v == Fraction(math.comb(10, 3) + 90 * math.comb(10, 2), math.comb(100, 3)) == Fraction(4170, 161700)
    assert not check_statistical(100, 3, Fraction(1, 10), 40)
    assert statistical_bound(100, 3, 0) == 0
    assert statistical_bound(100, 3, 1) == 1


def test_statistical_bound_floors_fractional_counts():
    assert statistical_bound(10, 2, Fraction(25, 100)) == statistical_bound(10, 2, Fraction(2, 10))


@given(k=st.integers(2, 6), ell=st.integers(6, 200), a=st.integers(0, 100), b=st.integers(0, 100))
def test_statistical_bound_monotone_in_theta(k, ell, a, b):
    assume(k <= ell)
    lo, hi = sorted((Fraction(a, 100), Fraction(b, 100)))
    assert statistical_bound(ell, k, lo) <= statistical_bound(ell, k, hi)


def test_statistical_bound_monte_carlo():
    rng = np.random.default_rng(11)
    ell, k, bad = 100, 3, 10
    draws, hits = 200_000, 0
    for _ in range(draws // 50_000):
        picks = rng.random((50_000, ell)).argpartition(k, axis=1)[:, :k]
        rational = (picks >= bad).sum(axis=1)
        hits += int((rational < 2).sum())
    p = float(statistical_bound(ell, k, Fraction(bad, ell)))
    assert abs(hits / draws - p) < 3 * math.sqrt(p * (1 - p) / draws)


# -- self-insurance -----------------------------------------------------------


def test_fee_threshold_example():
    thr = insurance_fee_threshold(2, 1000, 5000, 10_000, Fraction(1, 10**4), Fraction(1, 10**4))
    # float route: ((k-1) Omega - ell) / (k^2 Omega) * (1-r')^T / (1+r)^T
    assert float(thr) == pytest.approx(4000 / 20000 * 0.9999**10_000 / 1.0001**10_000, rel=1e-12)
    assert abs(float(thr) - 0.027) / 0.027 < 0.02
    p = 100
    assert insurance_sigma_discounted(2, 1000, 5000, 10_000, Fraction(1, 10**4), Fraction(1, 10**4), p, thr * p) == 1


def test_sigma_degenerate_cases():
    assert insurance_sigma(2, 1000, 1000, 7, 3) == 0
    assert insurance_sigma_discounted(3, 100, 80, 50, 0, 0, 7, 3) == insurance_sigma(3, 100, 80, 7, 3)
    assert insurance_sigma(2, 1000, 5000, 1, 1) == Fraction(4000, 4 * 5000)


def test_stream_hand_expansion():
    # T = 1, no rates: fines (k-1)/k * rate * p * 2 - p over fees rate * s
    k, ell, Omega, p, s = 2, 10, 20, 6, 1
    rate = Fraction(k * Omega, ell)
    expected = (Fraction(k - 1, k) * rate * p * 2 - p) / (rate * s)
    assert insurance_stream(k, ell, Omega, 1, 0, 0, p, s) == expected


def test_multi_exit_without_rates_counts_periods():
    k, ell, Omega, T, p, s = 3, 12, 10, 4, 5, 2
    one = insurance_multi_exit(1, k, ell, Omega, 0, 0, 0, p, s)
    hit = exit_hit_probability(1, k, ell, 1)
    per_fines = hit * Fraction(k - 1, k) * Omega * p
    per_fees = hit * Omega * k * s
    assert one == (per_fines - p) / per_fees
    assert insurance_multi_exit(1, k, ell, Omega, T, 0, 0, p, s) == ((T + 1) * per_fines - p) / ((T + 1) * per_fees)


@given(m=st.integers(1, 12), k=st.integers(2, 5))
def test_exit_hit_probabilities_sum_to_hit_rate(m, k):
    ell = 12
    total = sum(exit_hit_probability(m, k, ell, i) for i in range(0, min(m, k) + 1))
    assert total == 1


# -- coalitions ---------------------------------------------------------------


@pytest.mark.parametrize("ell,k,s", [(10, 2, 2), (10, 3, 4), (8, 4, 3), (9, 3, 9)])
def test_coalition_prob_matches_enumeration(ell, k, s):
    assert coalition_prob(ell, k, s) == coalition_prob_by_enumeration(ell, k, s)


def test_coalition_prob_examples():
    assert coalition_prob(10, 2, 2) == Fraction(17, 45)
    assert coalition_prob(10, 3, 10) == 1
    assert coalition_prob(10, 3, 2) == Fraction(8, math.comb(10, 3))
    assert coalition_prob(10, 3, 1) == 0


def test_linear_coefficients_example():
    c1, c2, c3 = linear_coefficients(100, 3)
    assert (c1, c2, c3) == (-2, -2, 298)
    assert c2 * c2 - 4 * c1 * c3 == 2388
    assert coalition_root(100, 3, LINEAR) == pytest.approx(11.7168, abs=1e-4)


@pytest.mark.parametrize("variant", [CONSTANT, LINEAR])
@pytest.mark.parametrize("k", [3, 4, 5])
@pytest.mark.parametrize("ell", [50, 100, 1000])
def test_root_matches_sign_change(variant, k, ell):
    root = coalition_root(ell, k, variant)
    lo, hi = max(k - 1, 1) + 1e-9, ell - 1.0
    found = bisect_root(lambda s: coalition_gain_real(ell, k, s, variant), lo, hi)
    assert abs(found - root) < 1e-9 * max(1.0, root)
    bound = coalition_max_size(ell, k, variant)
    assert abs(bound.closed_form - bound.scan) <= 1
    s = bound.scan
    assert coalition_marginal_gain(ell, k, s, variant) <= 0 < coalition_marginal_gain(ell, k, s - 1, variant)


def test_constant_example_off_by_one():
    bound = coalition_max_size(100, 3, CONSTANT)
    assert (bound.closed_form, bound.scan) == (74, 75)
    assert coalition_marginal_gain(100, 3, 74) > 0 > coalition_marginal_gain(100, 3, 75)


def test_linear_example():
    bound = coalition_max_size(100, 3, LINEAR)
    assert (bound.closed_form, bound.scan) == (11, 12)
    assert coalition_marginal_gain(100, 3, 11, LINEAR) > 0 > coalition_marginal_gain(100, 3, 12, LINEAR)


@pytest.mark.parametrize("variant", [CONSTANT, LINEAR])
@pytest.mark.parametrize("ell", [4, 10, 1000])
def test_two_servers_never_grow(variant, ell):
    assert coalition_max_size(ell, 2, variant).closed_form == 2
