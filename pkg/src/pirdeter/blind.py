"""Blind collusion: colluders who cannot check each other's inputs.

A cheater guesses the target index and fabricates a substituted XOR-PIR
query that redirects the joint output. The closed forms below are evaluated
exactly as stated; ``blind_bruteforce`` simulates the redirect strategies
directly and is the ground truth they are compared against.

Oracle universe: each cheater draws a guessed index g and a redirect index t
independently from the prior x. Substituting g by t toggles both indices in
the XOR of the query sets; when g == t the cheater inserts or deletes g alone.
The collusion output is {a} with every cheater's toggles applied.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from .incentives import IncentiveParams, frac

MAX_EXHAUSTIVE_COMBOS = 5_000_000


def _prior(x: Sequence) -> list[Fraction]:
    xs = [frac(v) for v in x]
    if not xs or any(v < 0 for v in xs) or sum(xs) != 1:
        raise ValueError("prior must be a non-negative vector summing to 1")
    return xs


def _check_index(xs: Sequence, a: int) -> None:
    if not 0 <= a < len(xs):
        raise ValueError(f"target {a} outside the prior's support of size {len(xs)}")


# ---------------------------------------------------------------------------
# Closed forms as stated


def blind_p1(x: Sequence, a: int) -> Fraction:
    """One cheater: single-index output probability x_a (2 - x_a)."""
    xs = _prior(x)
    _check_index(xs, a)
    return xs[a] * (2 - xs[a])


def blind_p21(x: Sequence, a: int) -> Fraction:
    xs = _prior(x)
    _check_index(xs, a)
    n = len(xs)
    return sum((4 * xs[i] ** 2 * xs[j] ** 2 for i in range(n) for j in range(n) if j != i), Fraction(0))


def blind_p22(x: Sequence, a: int) -> Fraction:
    xs = _prior(x)
    _check_index(xs, a)
    n = len(xs)
    return sum(
        (4 * xs[a] * xs[i] ** 2 * xs[j] for i in range(n) if i != a for j in range(n) if j not in (i, a)),
        Fraction(0),
    )


def blind_p2(x: Sequence, a: int) -> tuple[Fraction, Fraction, Fraction]:
    """Two cheaters: (single-index total, a recovered, some other single index)."""
    p21, p22 = blind_p21(x, a), blind_p22(x, a)
    return p21 + p22, p21, p22


def _chain(weights: Sequence[Fraction], length: int) -> Fraction:
    """Sum over index sequences of given length with consecutive entries distinct of prod weights."""
    if length == 0:
        return Fraction(1)
    cur = list(weights)
    for _ in range(length - 1):
        total = sum(cur, Fraction(0))
        cur = [w * (total - c) for w, c in zip(weights, cur)]
    return sum(cur, Fraction(0))


def _odd_up_to(limit: int) -> range:
    return range(1, limit + 1, 2)


def blind_pk(x: Sequence, a: int, kprime: int) -> Fraction:
    """Single-index output probability with k' cheaters, evaluated term by term.

    k' = 0, 1, 2 use the table rows; larger k' sum the even-appearance chain
    term and the (n_a, n_b) odd-appearance term, with b ranging over b != a.
    """
    xs = _prior(x)
    _check_index(xs, a)
    if kprime < 0:
        raise ValueError("k' must be non-negative")
    if kprime == 0:
        return Fraction(1)
    if kprime == 1:
        return blind_p1(xs, a)
    if kprime == 2:
        return blind_p2(xs, a)[0]
    sq = [v * v for v in xs]
    even = 2**kprime * _chain(sq, kprime)
    odd = Fraction(0)
    na_max = 2 * -(-kprime // 2) - 1
    for na in _odd_up_to(na_max):
        nb_max = min(2 * -(-(2 * kprime - na) // 2) - 1, kprime)
        for b in range(len(xs)):
            if b == a:
                continue
            rest = [w for i, w in enumerate(sq) if i not in (a, b)]
            for nb in _odd_up_to(nb_max):
                nc = 2 * kprime - na - nb
                odd += 2**kprime * xs[a] ** na * xs[b] ** nb * _chain(rest, nc)
    return even + odd


# ---------------------------------------------------------------------------
# Closed forms re-derived for the oracle universe


def corrected_p1(x: Sequence, a: int) -> Fraction:
    """One cheater yields a single index iff it toggles a together with another index."""
    xs = _prior(x)
    _check_index(xs, a)
    return 2 * xs[a] * (1 - xs[a])


def corrected_p21(x: Sequence, a: int) -> Fraction:
    """Two cheaters recover a iff their toggle sets coincide."""
    xs = _prior(x)
    n = len(xs)
    return sum((v**4 for v in xs), Fraction(0)) + 2 * sum(
        (xs[i] ** 2 * xs[j] ** 2 for i in range(n) for j in range(n) if i != j), Fraction(0)
    )


def corrected_p22(x: Sequence, a: int) -> Fraction:
    """Two cheaters output one index b != a: toggles {a},{b} or {a,c},{c,b}."""
    xs = _prior(x)
    _check_index(xs, a)
    n = len(xs)
    others = [b for b in range(n) if b != a]
    singles = 2 * xs[a] ** 2 * sum((xs[b] ** 2 for b in others), Fraction(0))
    pairs = 8 * xs[a] * sum(
        (xs[c] ** 2 * xs[b] for c in others for b in others if b != c), Fraction(0)
    )
    return singles + pairs


def corrected_p2(x: Sequence, a: int) -> tuple[Fraction, Fraction, Fraction]:
    p21, p22 = corrected_p21(x, a), corrected_p22(x, a)
    return p21 + p22, p21, p22


# ---------------------------------------------------------------------------
# Brute-force oracle


def toggle_distribution(x: Sequence) -> dict[int, Fraction]:
    """Distribution of one cheater's toggle mask over the index bitmask."""
    xs = _prior(x)
    out: dict[int, Fraction] = {}
    for g, t in itertools.product(range(len(xs)), repeat=2):
        mask = (1 << g) | (1 << t)
        out[mask] = out.get(mask, Fraction(0)) + xs[g] * xs[t]
    return out


@dataclass(frozen=True)
class Estimate:
    value: float
    count: int
    draws: int
    low: float
    high: float

    def contains(self, v) -> bool:
        return self.low <= float(v) <= self.high


@dataclass(frozen=True)
class BlindTally:
    """Probabilities of a single-index output and of recovering a."""

    mode: str
    single: Fraction | Estimate
    recovered: Fraction | Estimate

    @property
    def other_single(self):
        if self.mode == "exhaustive":
            return self.single - self.recovered
        return None

    def to_json(self) -> dict:
        def enc(v):
            if isinstance(v, Estimate):
                return {"value": v.value, "count": v.count, "draws": v.draws, "wilson": [v.low, v.high]}
            return {"exact": str(v), "value": float(v)}

        return {"mode": self.mode, "single": enc(self.single), "recovered": enc(self.recovered)}


def _wilson(count: int, draws: int, confidence: float) -> Estimate:
    ci = binomtest(count, draws).proportion_ci(confidence_level=confidence, method="wilson")
    return Estimate(count / draws, count, draws, float(ci.low), float(ci.high))


def blind_bruteforce(
    N: int,
    kprime: int,
    x: Sequence,
    a: int = 0,
    mode: str = "exhaustive",
    draws: int = 1_000_000,
    seed: int | None = 0,
    confidence: float = 0.99,
) -> BlindTally:
    """Enumerate (exhaustive) or sample every cheater's redirect and tally the joint output."""
    xs = _prior(x)
    if len(xs) != N:
        raise ValueError("prior length must equal N")
    _check_index(xs, a)
    if kprime < 0:
        raise ValueError("k' must be non-negative")
    target = 1 << a
    if mode == "exhaustive":
        if N > 12:
            raise ValueError("exhaustive mode supports N <= 12")
        dist = list(toggle_distribution(xs).items())
        if len(dist) ** kprime > MAX_EXHAUSTIVE_COMBOS:
            raise ValueError(f"{len(dist)}^{kprime} strategy combinations exceed the exhaustive budget")
        single = recovered = Fraction(0)
        for combo in itertools.product(dist, repeat=kprime):
            out, prob = target, Fraction(1)
            for mask, p in combo:
                out ^= mask
                prob *= p
            if out and out & (out - 1) == 0:
                single += prob
                if out == target:
                    recovered += prob
        return BlindTally("exhaustive", single, recovered)
    if mode == "sampled":
        rng = np.random.default_rng(seed)
        probs = np.array([float(v) for v in xs])
        out = np.full(draws, target, dtype=np.int64)
        for _ in range(kprime):
            g = rng.choice(N, size=draws, p=probs)
            t = rng.choice(N, size=draws, p=probs)
            out ^= (np.int64(1) << g) | (np.int64(1) << t)
        is_single = (out != 0) & ((out & (out - 1)) == 0)
        n_single = int(is_single.sum())
        n_rec = int((out == target).sum())
        return BlindTally("sampled", _wilson(n_single, draws, confidence), _wilson(n_rec, draws, confidence))
    raise ValueError(f"mode must be exhaustive or sampled, got {mode!r}")


# ---------------------------------------------------------------------------
# Sequential equilibrium without input verification (two servers)


@dataclass(frozen=True)
class Condition:
    name: str
    passed: bool
    detail: dict

    def to_json(self) -> dict:
        return {"name": self.name, "pass": self.passed, **{k: str(v) for k, v in self.detail.items()}}


@dataclass(frozen=True)
class SequentialReport:
    beliefs: dict[str, Fraction]
    conditions: tuple[Condition, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def __getitem__(self, name: str) -> Condition:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "pass": self.passed,
            "beliefs": {k: str(v) for k, v in self.beliefs.items()},
            "conditions": [c.to_json() for c in self.conditions],
        }


def _bayes(num: Fraction, other: Fraction) -> Fraction:
    return num / (num + other) if num + other else Fraction(0)


def verify_sequential_eq(
    params: IncentiveParams,
    x: Sequence,
    a: int = 0,
    alpha2=0,
    beta2=0,
    corrected: bool = False,
) -> SequentialReport:
    """Check the deceive-and-report profile with Bayes-consistent beliefs for k = 2.

    ``alpha2``/``beta2`` are the amicable probabilities of the two servers at
    the input stage; the equilibrium has both at 0.
    """
    alpha2, beta2 = frac(alpha2), frac(beta2)
    for v in (alpha2, beta2):
        if not 0 <= v <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
    s, r, p, f, V = params.s, params.r, params.p, params.f, params.V
    p1 = corrected_p1(x, a) if corrected else blind_p1(x, a)
    p2, p21, _ = corrected_p2(x, a) if corrected else blind_p2(x, a)

    # beliefs at the round-three information set, from server 1's side
    x1 = _bayes(beta2, (1 - beta2) * p1)
    x2 = _bayes((1 - beta2) * p1, beta2)
    y1 = _bayes(beta2 * p1, (1 - beta2) * p2)
    y2 = _bayes((1 - beta2) * p2, beta2 * p1)
    beliefs = {"b(A|I3,A)": x1, "b(D|I3,A)": x2, "b(A|I3,D)": y1, "b(D|I3,D)": y2}

    conds = []
    sums_ok = x1 + x2 == 1 and y1 + y2 == 1
    at_eq = beta2 != 0 or (x2 == 1 and y2 == 1)
    conds.append(Condition("consistency", sums_ok and at_eq, {"x1": x1, "x2": x2, "y1": y1, "y2": y2}))

    # amicable server sees others deceived: it holds no evidence, so reporting costs f
    conds.append(Condition("IS4 stay quiet", f > 0, {"gain_quiet": f}))
    # deceitful server sees others deceived: reporting never loses
    conds.append(Condition("IS5 report", True, {"gain_report": Fraction(0)}))

    beta4 = Fraction(1)
    coeff = y1 * r + y2 * p21 * (beta4 * (p + r) / 2 - r)
    conds.append(Condition("IS3 after D", coeff > 0, {"report_coefficient": coeff}))

    beta3 = Fraction(1)
    rep = x1 * (beta3 * (V - (p - r) / 2) + (1 - beta3) * (V + s + r)) - x2 * p
    quiet = x1 * (beta3 * (V - p) + (1 - beta3) * (V + s)) - x2 * p
    conds.append(Condition("IS3 after A", rep >= quiet, {"R": rep, "quiet": quiet}))

    amicable = beta2 * (V - (p - r) / 2) - (1 - beta2) * p
    deceive = beta2 * (V + s + r) + (1 - beta2) * (p2 * p21 * (V - (p - r) / 2 - s) + s)
    conds.append(Condition("IS2 deceive", deceive > amicable, {"A": amicable, "D": deceive}))

    quit_ = s
    conds.append(Condition("IS1 abstain", quit_ >= deceive, {"abstain": quit_, "collude_deceive": deceive}))
    return SequentialReport(beliefs, tuple(conds))
