"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Criteria are evaluated at their stated tolerances. A criterion that does not
hold fails its test; nothing here is loosened to make it pass.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from fractions import Fraction as F
from pathlib import Path

import numpy as np
import pytest

from oracles import (
    as_key,
    bits,
    oracle_is_spe,
    oracle_spe_set,
    q_by_enumeration,
    real_sign_change,
    sample_malicious_majority,
    sign_scan,
    thm1_params,
    violating_params,
)
from pirdeter.blind import blind_bruteforce, blind_p1, blind_p2, blind_pk, corrected_p1, corrected_p2
from pirdeter.dpf import Database, PirConfig, expand, gen_2party_dpf, query_gen, reconstruct, server_eval
from pirdeter.games import BAD, GOOD, PlayerStrategy, StrategyProfile, build_game, solve_spe, verify_spe
from pirdeter.incentives import (
    IncentiveParams,
    check_feasibility,
    coalition_max_size,
    coalition_root,
    compute_q,
    insurance_fee_threshold,
    statistical_bound,
)
from pirdeter.replay import replay
from pirdeter.simulator import GRIM, SimConfig, load_within, run_simulation

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion straight to the terminal, then assert it."""

    def emit(label: str, ok: bool, detail: str, started: float, budget: float):
        elapsed = time.perf_counter() - started
        in_time = elapsed < budget
        status = "PASS" if ok and in_time else "FAIL"
        with capsys.disabled():
            print(f"\nCRITERION {label}: {status} | {detail} | {elapsed:.2f}s (budget {budget:g}s)")
        assert ok, detail
        assert in_time, f"took {elapsed:.2f}s, budget {budget}s"

    return emit


def test_criterion_1_feasibility_margins(verdict):
    t0 = time.perf_counter()
    pr = IncentiveParams(s=1, r=F(99, 100), p=200, f=200, V=100, delta=F(99, 100), xi=F(99, 100), omega=1)
    rep = check_feasibility(pr, 10000, 2)
    flags = {r.id: r.passed for r in rep.results}
    bound = rep["3"].rhs
    float_bound = 0.99 / (1 - 0.99) * (1 - 9998 / 9999) * 100
    rel = abs(float(bound) - float_bound) / float_bound
    ok = (flags == {"1": True, "2": True, "3": False, "4": True, "5": True}
          and bound == F(9900, 9999) and rel <= 1e-12)
    verdict("1", ok, f"passes={flags} bound={bound} rel_err={rel:.1e}", t0, 1)


def test_criterion_2_self_insurance(verdict):
    t0 = time.perf_counter()
    thr = insurance_fee_threshold(2, 1000, 5000, 10**4, F(1, 10**4), F(1, 10**4))
    # float route: ((k-1) Omega - ell) / (k^2 Omega) * (1-r')^T / (1+r)^T
    float_route = (5000 - 1000) / (4 * 5000) * 0.9999**10_000 / 1.0001**10_000
    rel = abs(float(thr) - 0.027) / 0.027
    ok = rel <= 0.02 and math.isclose(float(thr), float_route, rel_tol=1e-12)
    verdict("2", ok, f"s >= {float(thr):.6f} p, {rel:.2%} from 0.027, float route agrees", t0, 1)


def test_criterion_3_q_identity(verdict):
    t0 = time.perf_counter()
    bad = []
    checked = enumerated = 0
    for k in range(2, 7):
        for ell in range(2 * k - 1, 41):
            q = compute_q(ell, k)
            closed = F(math.comb(ell - k, k - 1), math.comb(ell - 1, k - 1))
            checked += 1
            if q != closed:
                bad.append((ell, k))
            if ell <= 20:
                enumerated += 1
                if q_by_enumeration(ell, k) != q:
                    bad.append((ell, k, "enum"))
    verdict("3", not bad, f"{checked} pairs exact, {enumerated} enumerated, mismatches={bad[:5]}", t0, 10)


def _amicable_profiles(k, rng, limit):
    """Every A-on-path profile for k=2; a random sample of them otherwise."""
    n = 2**k
    if k == 2:
        strategies = list(itertools.product((True, False), (True, False), bits(n)))
        for s1, s2 in itertools.product(strategies, repeat=2):
            if s1[0] and s2[0] and (s1[1] or s2[1]):
                yield StrategyProfile((PlayerStrategy(*s1), PlayerStrategy(*s2)))
        return
    for _ in range(limit):
        am = tuple(bool(v) for v in rng.integers(0, 2, k))
        if not any(am):
            am = (True,) + am[1:]
        yield StrategyProfile(tuple(
            PlayerStrategy(True, am[i], tuple(bool(v) for v in rng.integers(0, 2, n))) for i in range(k)))


def test_criterion_4a_spe_reproduction(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    problems = []
    rejected = 0
    for i in range(100):
        k = (2, 3, 4)[i % 3]
        case = (GOOD, BAD)[(i // 3) % 2]
        pr = thm1_params(rng, k)
        tree = build_game(k, pr, case)
        spes = solve_spe(tree)
        keys = {as_key(p) for p in spes}
        if keys != oracle_spe_set(k, pr, case):
            problems.append((i, "spe set differs from oracle"))
        for p in spes:
            if set(p.projection()) - {"cD", "CD"} or p.report_at((True,) * k) != (True,) * k:
                problems.append((i, "unexpected projection"))
        if {lab for p in spes for lab in p.projection()} != {"cD", "CD"}:
            problems.append((i, "projection set"))
        for prof in _amicable_profiles(k, rng, 60 if k == 4 else 120):
            check = verify_spe(tree, prof)
            if k == 2:
                reports = {a: prof.report_at(a) for a in bits(2)}
                if oracle_is_spe(2, pr, case, prof.collude(), prof.amicable(), reports):
                    problems.append((i, "oracle accepts A on path"))
            if check:
                problems.append((i, "A on path accepted"))
            else:
                rejected += 1
    verdict("4a", not problems, f"100 draws, {rejected} A-on-path profiles rejected, problems={problems[:3]}", t0, 60)


def test_criterion_4b_collusion_when_condition_violated(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    good_hits = bad_hits = 0
    for i in range(100):
        k = (2, 3, 4)[i % 3]
        pr = violating_params(rng, k)
        good = [p for p in solve_spe(build_game(k, pr, GOOD)) if p.amicable_on_path()]
        good_hits += bool(good) and all(verify_spe(build_game(k, pr, GOOD), p) for p in good)
        bad_tree = build_game(k, pr, BAD)
        bad = [p for p in solve_spe(bad_tree) if p.amicable_on_path()]
        bad_hits += bool(bad) and all(verify_spe(bad_tree, p) for p in bad)
    detail = (f"good case: collusive profile passes in {good_hits}/100 draws "
              f"(a lone deceiver learns and is rewarded, so D dominates A); "
              f"bad case: {bad_hits}/100")
    verdict("4b", good_hits == 100, detail, t0, 60)


PRIORS = {
    2: [[F(1, 2)] * 2, [F(3, 4), F(1, 4)], [F(1, 10), F(9, 10)]],
    3: [[F(1, 3)] * 3, [F(1, 2), F(1, 3), F(1, 6)], [F(1, 10), F(1, 5), F(7, 10)]],
    4: [[F(1, 4)] * 4, [F(1, 2), F(1, 4), F(1, 8), F(1, 8)], [F(1, 10), F(7, 10), F(1, 10), F(1, 10)]],
}


def test_criterion_5_blind_collusion(verdict):
    t0 = time.perf_counter()
    literal_miss = corrected_miss = 0
    cases = 0
    for N, priors in PRIORS.items():
        for x in priors:
            for a in range(N):
                cases += 1
                t1 = blind_bruteforce(N, 1, x, a)
                t2 = blind_bruteforce(N, 2, x, a)
                oracle = (t1.single, t2.single, t2.recovered, t2.other_single)
                literal = (blind_p1(x, a), *blind_p2(x, a))
                corrected = (corrected_p1(x, a), *corrected_p2(x, a))
                literal_miss += literal != oracle
                corrected_miss += corrected != oracle
    covered = []
    x4 = PRIORS[4][1]
    for kp in (3, 4):
        sampled = blind_bruteforce(4, kp, x4, 0, mode="sampled", draws=10**6, seed=kp)
        covered.append(sampled.single.contains(blind_pk(x4, 0, kp)))
    ok = literal_miss == 0 and all(covered)
    detail = (f"closed forms as stated mismatch the oracle in {literal_miss}/{cases} cases "
              f"(re-derived forms: {corrected_miss}); p_k' inside Wilson 99% for k'=3,4: {covered}")
    verdict("5", ok, detail, t0, 300)


def test_criterion_6_statistical_bound(verdict):
    t0 = time.perf_counter()
    exact = statistical_bound(100, 3, F(1, 10))
    draws = 10**6
    hits = sample_malicious_majority(100, 3, 10, draws, np.random.default_rng(6))
    p = float(exact)
    z = (hits / draws - p) / math.sqrt(p * (1 - p) / draws)
    ok = exact == F(4170, 161700) and abs(z) <= 3
    verdict("6", ok, f"bound={exact} (4170/161700 reduced), MC z={z:+.2f}", t0, 30)


def test_criterion_7_coalition_bounds(verdict):
    t0 = time.perf_counter()
    worst_root = 0.0
    worst_size = 0
    for variant in ("constant", "linear"):
        linear = variant == "linear"
        for k in (3, 4, 5):
            for ell in (50, 100, 1000):
                root = coalition_root(ell, k, variant)
                worst_root = max(worst_root, abs(root - real_sign_change(ell, k, linear)))
                bound = coalition_max_size(ell, k, variant)
                worst_size = max(worst_size, abs(bound.closed_form - sign_scan(ell, k, linear)))
    k2 = all(coalition_max_size(ell, 2, v).closed_form == 2 for ell in (3, 50, 100, 1000)
             for v in ("constant", "linear"))
    ok = worst_root <= 1e-9 and worst_size <= 1 and k2
    verdict("7", ok, f"max root gap {worst_root:.1e}, max size gap {worst_size}, k=2 -> 2: {k2}", t0, 10)


def test_criterion_8_end_to_end_simulation(verdict):
    t0 = time.perf_counter()
    cfg = SimConfig(ell=200, k=2, runs=10**4)
    rows = []
    ok = True
    for seed in range(8):
        rep = run_simulation(cfg.with_(seed=seed))
        agg = rep.aggregate
        good = (rep.feasibility["pass"] and agg["unreported_successful_collusions"] == 0
                and agg["money_residual"] == 0 and load_within(rep, 4.0))
        ok &= good
        rows.append(agg["unreported_successful_collusions"])
    grim = run_simulation(cfg.with_(seed=100, r=0, mix={GRIM: 1.0}))
    rate = grim.aggregate["unreported_successful_collusions"] / grim.aggregate["runs"]
    ok &= rate >= 0.99
    detail = f"8 seeds x 1e4 runs: unreported collusions {rows}, residual 0, load in 4 sigma; grim r=0 rate {rate:.4f}"
    verdict("8", ok, detail, t0, 300)


GUARDS = {
    "already_fined": "already fined",
    "evidence_dedup": "evidence dedup",
    "timeout_autoconfirm": "timeout auto-confirm",
    "trivial_circuit": "triviality rejection",
    "reward_uniqueness": "first-reporter reward",
}


def test_criterion_9_coordinator_conformance(verdict):
    t0 = time.perf_counter()
    mismatched = []
    kinds = set()
    scenarios = sorted(GOLDEN.glob("*.json"))
    for path in scenarios:
        coord = replay(json.loads(path.read_text()))
        expected = [json.loads(line) for line in path.with_suffix(".jsonl").read_text().splitlines()]
        got = json.loads(json.dumps(coord.events))
        if got != expected or coord.money_residual() != 0:
            mismatched.append(path.stem)
        kinds |= {e.get(key) for e in coord.events for key in ("event", "kind", "status")}
    missing_guards = [g for g in GUARDS if not (GOLDEN / f"{g}.json").exists()]
    needed = {"timeout", "no_op", "rejected_trivial", "confirmed", "reward", "penalty", "service_fee"}
    ok = not mismatched and not missing_guards and needed <= kinds and len(scenarios) >= 10
    verdict("9", ok, f"{len(scenarios)} golden scenarios, mismatched={mismatched}, guards covered "
                     f"{sorted(GUARDS.values())}", t0, 10)


def test_criterion_10_dpf_correctness(verdict):
    t0 = time.perf_counter()
    failures = []
    reconstructions = 0
    for N in (16, 256, 1024):
        # key-pair expansions XOR to the unit vector at every index
        for a in range(N):
            kp = gen_2party_dpf(a, N, seed=a)
            v = expand(kp.key0) ^ expand(kp.key1)
            if v[a] != 1 or int(v.sum()) != 1:
                failures.append(("keys", N, a))
        for k in (2, 4, 8):
            cfg = PirConfig(ell=k, k=k, N=N)
            dbs = [Database.random(N, w, seed=N * 31 + w).with_word_count(k - 1) for w in (1, 64, 200)]
            for a in range(N):
                bundles, rmap = query_gen(a, cfg, seed=a * 7 + k)
                for db in dbs:
                    got = reconstruct([server_eval(b, db) for b in bundles], rmap, db.entry_width)
                    reconstructions += 1
                    if got != db.rows[a]:
                        failures.append(("pir", N, k, db.entry_width, a))
    verdict("10", not failures, f"{reconstructions} reconstructions over N in (16, 256, 1024), k in (2, 4, 8), "
                                f"widths (1, 64, 200); failures={failures[:3]}", t0, 30)
