"""Closed-form mechanism analysis in exact rational arithmetic.

Covers the feasibility of the four payment amounts, the re-meeting
probability q behind the repeated-game reward bound, the malicious-fraction
bound, self-insurance ratios for exiting servers, and coalition-size bounds.
Floats appear only where a square root or a report boundary forces them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

Number = int | float | str | Fraction


def frac(x: Number) -> Fraction:
    """Exact conversion; floats go through their shortest repr so 0.99 is 99/100."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def comb(n: int, r: int) -> int:
    if r < 0 or n < 0 or r > n:
        return 0
    return math.comb(n, r)


# ---------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class IncentiveParams:
    """Mechanism scalars in currency units (not cents)."""

    s: Fraction
    r: Fraction
    p: Fraction
    f: Fraction
    V: Fraction
    delta: Fraction = Fraction(0)
    xi: Fraction = Fraction(1, 2)
    omega: int = 1
    eta: int = 40
    theta: Fraction = Fraction(0)

    def __post_init__(self):
        for f_ in fields(self):
            v = getattr(self, f_.name)
            if f_.name in ("omega", "eta"):
                object.__setattr__(self, f_.name, int(v))
            else:
                object.__setattr__(self, f_.name, frac(v))
        for name in ("s", "r", "p", "f", "V"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.delta < 1:
            raise ValueError("discount delta must lie in [0, 1)")
        if not 0 < self.xi < 1:
            raise ValueError("practicality xi must lie in (0, 1)")
        if not 0 <= self.theta < 1:
            raise ValueError("malicious fraction theta must lie in [0, 1)")
        if self.omega < 1:
            raise ValueError("omega must be at least 1")

    def with_(self, **changes) -> IncentiveParams:
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# Re-meeting probability


def compute_q(ell: int, k: int) -> Fraction:
    """Probability that a fixed partner is absent from the next query set containing me.

    Product of the k-1 ratios (ell-k-i)/(ell-1-i) for i = 0..k-2.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if ell < 2 * k - 1:
        raise ValueError(f"q needs ell >= 2k-1 = {2 * k - 1}, got ell={ell}")
    q = Fraction(1)
    for i in range(k - 1):
        q *= Fraction(ell - k - i, ell - 1 - i)
    return q


def q_binomial(ell: int, k: int) -> Fraction:
    """C(ell-k, k-1) / C(ell-1, k-1); also defined (as 0) below ell = 2k-1."""
    return Fraction(comb(ell - k, k - 1), comb(ell - 1, k - 1))


def reward_lower_bound(ell: int, k: int, delta: Number, V: Number) -> Fraction:
    delta = frac(delta)
    return delta / (1 - delta) * (1 - q_binomial(ell, k)) * frac(V)


# ---------------------------------------------------------------------------
# Feasibility


@dataclass(frozen=True)
class InequalityResult:
    id: str
    text: str
    lhs: Fraction
    rhs: Fraction
    passed: bool
    margin: Fraction
    upper: Fraction | None = None

    @property
    def relative_margin(self) -> float:
        scale = max(abs(self.lhs), abs(self.rhs), Fraction(1, 10**30))
        return float(self.margin / scale)

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "text": self.text,
            "lhs": str(self.lhs),
            "rhs": str(self.rhs),
            "lhs_float": float(self.lhs),
            "rhs_float": float(self.rhs),
            "pass": self.passed,
            "margin": float(self.margin),
            "margin_exact": str(self.margin),
        }
        if self.upper is not None:
            out["upper"] = str(self.upper)
        return out


@dataclass(frozen=True)
class FeasibilityReport:
    results: tuple[InequalityResult, ...]
    ell: int
    k: int
    q: Fraction

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def __getitem__(self, ident: str) -> InequalityResult:
        for r in self.results:
            if r.id == ident:
                return r
        raise KeyError(ident)

    def to_json(self) -> dict:
        return {
            "ell": self.ell,
            "k": self.k,
            "q": str(self.q),
            "pass": self.passed,
            "inequalities": [r.to_json() for r in self.results],
        }


def check_feasibility(params: IncentiveParams, ell: int, k: int) -> FeasibilityReport:
    """Evaluate the five parameter inequalities; strict ones are strict."""
    s, r, p, f, V = params.s, params.r, params.p, params.f, params.V
    w = params.omega
    q = compute_q(ell, k)
    out = []

    rhs1 = Fraction(w + 2, w) * r
    out.append(InequalityResult("1", "f > ((w+2)/w) r", f, rhs1, f > rhs1, f - rhs1))

    lhs2 = (k - 1) * s
    out.append(InequalityResult("2", "(k-1) s > r", lhs2, r, lhs2 > r, lhs2 - r))

    low = params.delta / (1 - params.delta) * (1 - q) * V
    ok3 = low < r <= p
    out.append(InequalityResult("3", "(d/(1-d))(1-q)V < r <= p", r, low, ok3, min(r - low, p - r), upper=p))

    lhs4, rhs4 = s + p, (r + p) / k + V
    out.append(InequalityResult("4", "s + p > (r+p)/k + V", lhs4, rhs4, lhs4 > rhs4, lhs4 - rhs4))

    rhs5 = V / k * params.xi
    out.append(InequalityResult("5", "s <= (V/k) xi", s, rhs5, s <= rhs5, rhs5 - s))
    return FeasibilityReport(tuple(out), ell, k, q)


def generalized_fine_condition(params: IncentiveParams, p_tilde: Number) -> InequalityResult:
    """Fine bound when a false accusation succeeds with probability p_tilde."""
    pt = frac(p_tilde)
    if not 0 <= pt < 1:
        raise ValueError("p_tilde must lie in [0, 1)")
    w = params.omega
    rhs = (pt * w + 1) / ((1 - pt) * w) * params.r
    return InequalityResult("1'", "f > ((pw+1)/((1-p)w)) r", params.f, rhs, params.f > rhs, params.f - rhs)


@dataclass(frozen=True)
class SingleShotReport:
    penalty_positive: bool
    fee_penalty_exceeds_value: bool
    fine_positive: bool
    fee_positive: bool

    @property
    def holds(self) -> bool:
        return self.penalty_positive and self.fee_penalty_exceeds_value

    def __bool__(self) -> bool:
        return self.holds

    def to_json(self) -> dict:
        return {
            "p>0": self.penalty_positive,
            "s+((k-1)/k)p>V": self.fee_penalty_exceeds_value,
            "f>0": self.fine_positive,
            "s>0": self.fee_positive,
            "holds": self.holds,
        }


def single_shot_condition(params: IncentiveParams, k: int) -> SingleShotReport:
    """Conditions for the one-shot game: p > 0 and s + ((k-1)/k) p > V.

    Also reports f > 0 and s > 0, which keep servers and users from false
    accusations when the reward is zero.
    """
    return SingleShotReport(
        params.p > 0,
        params.s + Fraction(k - 1, k) * params.p > params.V,
        params.f > 0,
        params.s > 0,
    )


def existence_condition(ell: int, k: int, delta: Number, xi: Number = 1) -> bool:
    """Whether some reward fits between the repeated-game bound and (k-1) xi V / k.

    V cancels, so the answer depends only on the counts, the discount and xi.
    """
    delta = frac(delta)
    return delta / (1 - delta) * (1 - q_binomial(ell, k)) < Fraction(k - 1, k) * frac(xi)


def feasible_witness(ell: int, k: int, V: Number, delta: Number, xi: Number = Fraction(99, 100),
                     omega: int = 1) -> IncentiveParams | None:
    """Construct one feasible assignment following the existence argument, or None."""
    V, delta, xi = frac(V), frac(delta), frac(xi)
    low = reward_lower_bound(ell, k, delta, V)
    s = V / k * xi
    r_cap = (k - 1) * s
    if not low < r_cap:
        return None
    r = (low + r_cap) / 2
    p = max(r, (V + r / k - s) * Fraction(k, k - 1) + 1)
    f = Fraction(omega + 2, omega) * r + 1
    return IncentiveParams(s=s, r=r, p=p, f=f, V=V, delta=delta, xi=xi, omega=omega)


def scan_region(grid: Mapping[str, Sequence[Number]], base: Mapping[str, Number], ell: int) -> list[tuple[dict, FeasibilityReport]]:
    """Evaluate every point of a grid; ``grid`` may vary k and any IncentiveParams field."""
    keys = list(grid)
    if not keys or any(len(grid[k_]) == 0 for k_ in keys):
        raise ValueError("empty grid")
    rows = []
    for combo in itertools.product(*(grid[k_] for k_ in keys)):
        point = dict(base)
        point.update(zip(keys, combo))
        k = int(point.pop("k"))
        params = IncentiveParams(**point)
        rows.append(({"k": k, **{n: getattr(params, n) for n in ("s", "p", "r", "f")}}, check_feasibility(params, ell, k)))
    return rows


def frange(lo: Number, hi: Number, step: Number) -> list[Fraction]:
    lo, hi, step = frac(lo), frac(hi), frac(step)
    if step <= 0:
        raise ValueError("step must be positive")
    out, x = [], lo
    while x <= hi:
        out.append(x)
        x += step
    return out


# ---------------------------------------------------------------------------
# Malicious servers


def statistical_bound(ell: int, k: int, theta: Number) -> Fraction:
    """Probability that fewer than two of the k queried servers are rational."""
    if k > ell:
        raise ValueError("k cannot exceed ell")
    bad = math.floor(frac(theta) * ell)
    good = ell - bad
    return Fraction(comb(bad, k) + good * comb(bad, k - 1), comb(ell, k))


def check_statistical(ell: int, k: int, theta: Number, eta: int) -> bool:
    return statistical_bound(ell, k, theta) <= Fraction(1, 2**eta)


# ---------------------------------------------------------------------------
# Self-insurance


def insurance_sigma(k: int, ell: int, Omega: Number, p: Number, s: Number) -> Fraction:
    Omega = frac(Omega)
    return ((k - 1) * Omega - ell) / (k * k * Omega) * frac(p) / frac(s)


def insurance_sigma_discounted(k: int, ell: int, Omega: Number, T: int, r: Number, r2: Number,
                               p: Number, s: Number) -> Fraction:
    decay = (1 - frac(r2)) ** T
    growth = (1 + frac(r)) ** T
    return insurance_sigma(k, ell, Omega, p, s) * decay / growth


def insurance_fee_threshold(k: int, ell: int, Omega: Number, T: int, r: Number, r2: Number) -> Fraction:
    """Smallest s/p ratio with discounted sigma at most 1."""
    return insurance_sigma_discounted(k, ell, Omega, T, r, r2, 1, 1)


def _geometric(x: Fraction, lo: int, hi: int) -> Fraction:
    """Sum of x**j for j = lo..hi."""
    if hi < lo:
        return Fraction(0)
    if x == 1:
        return Fraction(hi - lo + 1)
    return (x ** (hi + 1) - x**lo) / (x - 1)


def insurance_stream(k: int, ell: int, Omega: Number, T: int, r: Number, r2: Number,
                     p: Number, s: Number) -> Fraction:
    """Single exiter, users arriving uniformly over the period, sums as written."""
    Omega, p, s = frac(Omega), frac(p), frac(s)
    rate = k * Omega / ell
    fines = Fraction(k - 1, k) * rate * p * _geometric(1 - frac(r2), 0, T) - p
    fees = rate * s * _geometric(1 + frac(r), 0, T - 1)
    return fines / fees


def exit_hit_probability(m: int, k: int, ell: int, i: int) -> Fraction:
    return Fraction(comb(m, i) * comb(ell - m, k - i), comb(ell, k))


def insurance_multi_exit(m: int, k: int, ell: int, Omega: Number, T: int, r: Number, r2: Number,
                         p: Number, s: Number) -> Fraction:
    """m exiters; b = min(m, k) of them can sit in one query set."""
    Omega, p, s = frac(Omega), frac(p), frac(s)
    b = min(m, k)
    hit = [exit_hit_probability(m, k, ell, i) for i in range(1, b + 1)]
    per_t_fines = sum(P * Fraction(k - i, k) * Omega * i * p for i, P in zip(range(1, b + 1), hit))
    per_t_fees = sum(P * Omega * k * s for P in hit)
    fines = per_t_fines * _geometric(1 - frac(r2), 0, T) - m * p
    fees = per_t_fees * _geometric(1 + frac(r), 0, T)
    return fines / fees


# ---------------------------------------------------------------------------
# Coalitions

CONSTANT = "constant"
LINEAR = "linear"


def coalition_prob(ell: int, k: int, s: int) -> Fraction:
    """Probability a coalition of size s receives at least k-1 of the k queries."""
    if s < k - 1:
        return Fraction(0)
    return Fraction(comb(s, k - 1) * comb(ell - s, 1) + comb(s, k), comb(ell, k))


def _falling_binom(x: float, j: int) -> float:
    out = 1.0
    for i in range(j):
        out *= (x - i) / (i + 1)
    return out


def coalition_prob_real(ell: int, k: int, s: float) -> float:
    """Polynomial extension of coalition_prob to real s (falling factorials)."""
    return (_falling_binom(s, k - 1) * (ell - s) + _falling_binom(s, k)) / math.comb(ell, k)


def coalition_marginal_gain(ell: int, k: int, s: int, variant: str = CONSTANT, c: Number = 1, V: Number = 1) -> Fraction:
    """One member's change in share when the coalition grows from s to s+1."""
    scale = frac(c) * frac(V)
    a, b = coalition_prob(ell, k, s + 1), coalition_prob(ell, k, s)
    if variant == CONSTANT:
        return (a / (s + 1) - b / s) * scale
    if variant == LINEAR:
        return (a / (s + 1) ** 2 - b / s**2) * scale
    raise ValueError(f"unknown variant {variant!r}")


def coalition_gain_real(ell: int, k: int, s: float, variant: str = CONSTANT) -> float:
    a, b = coalition_prob_real(ell, k, s + 1), coalition_prob_real(ell, k, s)
    if variant == CONSTANT:
        return a / (s + 1) - b / s
    return a / (s + 1) ** 2 - b / s**2


def linear_coefficients(ell: int, k: int) -> tuple[int, int, int]:
    c1 = -(k - 1) * (k - 2)
    c2 = (ell - 2) * k * k - (3 * ell - 7) * k - 5
    c3 = (k - 2) * (k * ell - k + 1)
    return c1, c2, c3


def coalition_root(ell: int, k: int, variant: str = CONSTANT) -> float:
    """Where the marginal gain changes sign (k >= 3)."""
    if k < 3:
        raise ValueError("the root is only meaningful for k >= 3")
    if variant == CONSTANT:
        return float(Fraction((k - 2) * (k * ell - k + 1), (k - 1) ** 2))
    if variant == LINEAR:
        c1, c2, c3 = linear_coefficients(ell, k)
        disc = c2 * c2 - 4 * c1 * c3
        return (-c2 - math.sqrt(disc)) / (2 * c1)
    raise ValueError(f"unknown variant {variant!r}")


@dataclass(frozen=True)
class CoalitionBound:
    variant: str
    root: float | None
    closed_form: int
    scan: int

    def to_json(self) -> dict:
        return {"variant": self.variant, "root": self.root, "max_size": self.closed_form, "sign_scan_size": self.scan}


def coalition_scan_size(ell: int, k: int, variant: str = CONSTANT) -> int:
    """Size at which adding one more member first stops paying (exact arithmetic)."""
    s = max(k - 1, 1)
    while s < ell and coalition_marginal_gain(ell, k, s, variant) > 0:
        s += 1
    return s


def coalition_max_size(ell: int, k: int, variant: str = CONSTANT) -> CoalitionBound:
    """Closed-form maximum size plus the sign-scan size; they may differ by one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if variant not in (CONSTANT, LINEAR):
        raise ValueError(f"unknown variant {variant!r}")
    if k == 2:
        return CoalitionBound(variant, None, 2, coalition_scan_size(ell, k, variant))
    if variant == CONSTANT:
        size = (k - 2) * (k * ell - k + 1) // (k - 1) ** 2
    else:
        size = math.floor(coalition_root(ell, k, variant))
    return CoalitionBound(variant, coalition_root(ell, k, variant), size, coalition_scan_size(ell, k, variant))
