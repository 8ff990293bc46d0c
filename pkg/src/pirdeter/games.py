"""Extensive-form collusion game and its subgame-perfect equilibria.

Three simultaneous stages: collude (C) or not, amicable (A) or deceitful (D)
input, then report (R) or stay quiet. Simultaneous stages are solved by
enumerating pure action profiles; an equilibrium at a node keeps only mutual
best responses in which no player uses a weakly dominated action (falling back
to plain Nash profiles if that set is empty). Payoffs are exact rationals.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .incentives import IncentiveParams, compute_q, frac

GOOD = "good"
BAD = "bad"

Payoff = tuple[Fraction, ...]
Bits = tuple[bool, ...]


def _profiles(k: int) -> list[Bits]:
    return [tuple(bool(b) for b in combo) for combo in itertools.product((True, False), repeat=k)]


def _label(bits: Bits, yes: str, no: str) -> str:
    return "".join(yes if b else no for b in bits)


# ---------------------------------------------------------------------------
# Tree


@dataclass(frozen=True)
class GameTree:
    """Collusion game among k queried servers.

    ``case`` decides whether a lone deceiver learns the secret (good) or
    nobody does (bad). ``offset`` and ``scale`` apply an affine map to every
    leaf and exist for invariance checks and for composing repetitions.
    """

    k: int
    params: IncentiveParams
    case: str = GOOD
    offset: Payoff | None = None
    scale: Fraction = Fraction(1)
    _leaf_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.case not in (GOOD, BAD):
            raise ValueError(f"case must be good or bad, got {self.case!r}")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.offset is not None and len(self.offset) != self.k:
            raise ValueError("offset needs one entry per player")

    def shifted(self, offset: Sequence, scale=1) -> GameTree:
        """Tree whose leaves are ``scale * leaf + offset``."""
        scale = frac(scale)
        base = self.offset or (Fraction(0),) * self.k
        off = tuple(scale * b + frac(o) for b, o in zip(base, offset))
        return GameTree(self.k, self.params, self.case, off, self.scale * scale)

    def _finish(self, raw: Sequence[Fraction]) -> Payoff:
        off = self.offset or (Fraction(0),) * self.k
        return tuple(self.scale * x + o for x, o in zip(raw, off))

    # leaves ----------------------------------------------------------------

    def learners(self, amicable: Bits) -> Bits:
        deceivers = [i for i, a in enumerate(amicable) if not a]
        if not deceivers:
            return (True,) * self.k
        if len(deceivers) == 1 and self.case == GOOD:
            return tuple(i == deceivers[0] for i in range(self.k))
        return (False,) * self.k

    def stop_payoff(self) -> Payoff:
        return self._finish([self.params.s] * self.k)

    def leaf(self, amicable: Bits, report: Bits) -> Payoff:
        """Expected payoffs after full collusion, averaging the first-reporter lottery."""
        key = (amicable, report)
        if key not in self._leaf_cache:
            self._leaf_cache[key] = self._leaf(amicable, report)
        return self._leaf_cache[key]

    def _leaf(self, amicable: Bits, report: Bits) -> Payoff:
        pr = self.params
        k = self.k
        learned = self.learners(amicable)
        worth = [pr.V if l else Fraction(0) for l in learned]
        valid = [i for i in range(k) if report[i] and learned[i]]
        fines = [pr.f if report[i] and not learned[i] else Fraction(0) for i in range(k)]
        if not valid:
            return self._finish([worth[i] + pr.s - fines[i] for i in range(k)])
        total = [Fraction(0)] * k
        for w in valid:
            accused_winner = len(valid) > 1
            for i in range(k):
                if i == w:
                    total[i] += worth[i] + pr.r + (0 if accused_winner else pr.s)
                else:
                    total[i] += worth[i] - pr.p
        n = len(valid)
        return self._finish([total[i] / n - fines[i] for i in range(k)])

    def payoff(self, collude: Bits, amicable: Bits, report: Bits) -> Payoff:
        if not all(collude):
            return self.stop_payoff()
        return self.leaf(amicable, report)

    def leaves(self) -> list[dict]:
        out = []
        for c in _profiles(self.k):
            if not all(c):
                out.append({"collude": _label(c, "C", "c"), "payoff": [str(x) for x in self.stop_payoff()]})
                continue
            for a in _profiles(self.k):
                for r in _profiles(self.k):
                    out.append({
                        "collude": _label(c, "C", "c"),
                        "input": _label(a, "A", "D"),
                        "report": _label(r, "R", "r"),
                        "payoff": [str(x) for x in self.leaf(a, r)],
                    })
        return out

    def to_json(self) -> dict:
        return {"k": self.k, "case": self.case, "leaves": self.leaves()}


def build_game(k: int, params: IncentiveParams, case: str = GOOD) -> GameTree:
    return GameTree(k, params, case)


# ---------------------------------------------------------------------------
# Strategies


@dataclass(frozen=True)
class PlayerStrategy:
    """Pure strategy: stage-1 and stage-2 actions plus a report choice per stage-2 outcome."""

    collude: bool
    amicable: bool
    report: tuple[bool, ...]

    def stage12(self) -> str:
        return ("C" if self.collude else "c") + ("A" if self.amicable else "D")

    def to_json(self, k: int) -> dict:
        return {
            "collude": self.collude,
            "amicable": self.amicable,
            "report": {_label(a, "A", "D"): r for a, r in zip(_profiles(k), self.report)},
        }


@dataclass(frozen=True)
class StrategyProfile:
    players: tuple[PlayerStrategy, ...]

    @property
    def k(self) -> int:
        return len(self.players)

    def collude(self) -> Bits:
        return tuple(p.collude for p in self.players)

    def amicable(self) -> Bits:
        return tuple(p.amicable for p in self.players)

    def report_at(self, amicable: Bits) -> Bits:
        idx = _profiles(self.k).index(tuple(amicable))
        return tuple(p.report[idx] for p in self.players)

    def projection(self) -> tuple[str, ...]:
        """Per-player stage-1/stage-2 labels, e.g. ('cD', 'CD')."""
        return tuple(p.stage12() for p in self.players)

    def amicable_on_path(self) -> bool:
        return all(self.collude()) and any(self.amicable())

    def outcome(self, tree: GameTree) -> Payoff:
        return tree.payoff(self.collude(), self.amicable(), self.report_at(self.amicable()))

    def to_json(self) -> dict:
        return {"players": [p.to_json(self.k) for p in self.players], "stages12": list(self.projection())}


def uniform_profile(k: int, collude: bool, amicable: bool, report: bool | Sequence[bool]) -> StrategyProfile:
    """Every player plays the same; ``report`` may be a per-outcome tuple."""
    n = 2**k
    rep = (report,) * n if isinstance(report, bool) else tuple(report)
    return StrategyProfile(tuple(PlayerStrategy(collude, amicable, rep) for _ in range(k)))


def prescribed_profile(tree: GameTree, collude: bool = False) -> StrategyProfile:
    """Deceive, and report exactly when holding evidence (a learner)."""
    k = tree.k
    outcomes = _profiles(k)
    players = []
    for i in range(k):
        rep = tuple(tree.learners(a)[i] for a in outcomes)
        players.append(PlayerStrategy(collude, False, rep))
    return StrategyProfile(tuple(players))


# ---------------------------------------------------------------------------
# Simultaneous-stage solving


def _nash(table: dict[Bits, Payoff], k: int) -> list[Bits]:
    out = []
    for prof, pay in table.items():
        ok = True
        for i in range(k):
            alt = prof[:i] + (not prof[i],) + prof[i + 1:]
            if table[alt][i] > pay[i]:
                ok = False
                break
        if ok:
            out.append(prof)
    return out


def _weakly_dominated(table: dict[Bits, Payoff], k: int, i: int, action: bool) -> tuple[Bits, Fraction] | None:
    """If ``action`` is weakly dominated for player i, return the opponent profile where it loses most."""
    worst, gap = None, Fraction(0)
    for prof, pay in table.items():
        if prof[i] != action:
            continue
        alt = prof[:i] + (not action,) + prof[i + 1:]
        diff = table[alt][i] - pay[i]
        if diff < 0:
            return None
        if diff > gap:
            worst, gap = prof, diff
    if worst is None:
        return None
    return worst, gap


def refined_equilibria(table: dict[Bits, Payoff], k: int) -> list[Bits]:
    ne = _nash(table, k)
    refined = [p for p in ne if all(_weakly_dominated(table, k, i, p[i]) is None for i in range(k))]
    return refined or ne


@dataclass(frozen=True)
class NodeSolution:
    name: str
    equilibria: tuple[Bits, ...]


def _stage3_table(tree: GameTree, amicable: Bits) -> dict[Bits, Payoff]:
    return {r: tree.leaf(amicable, r) for r in _profiles(tree.k)}


def _stage2_table(tree: GameTree, selection: dict[Bits, Bits]) -> dict[Bits, Payoff]:
    return {a: tree.leaf(a, selection[a]) for a in _profiles(tree.k)}


def _stage1_table(tree: GameTree, value: Payoff) -> dict[Bits, Payoff]:
    return {c: (value if all(c) else tree.stop_payoff()) for c in _profiles(tree.k)}


def solve_spe(tree: GameTree) -> set[StrategyProfile]:
    """All pure refined subgame-perfect profiles, by backward induction."""
    k = tree.k
    outcomes = _profiles(k)
    stage3 = [refined_equilibria(_stage3_table(tree, a), k) for a in outcomes]
    result: set[StrategyProfile] = set()
    for choice in itertools.product(*stage3):
        selection = dict(zip(outcomes, choice))
        t2 = _stage2_table(tree, selection)
        for a in refined_equilibria(t2, k):
            t1 = _stage1_table(tree, t2[a])
            for c in refined_equilibria(t1, k):
                players = tuple(
                    PlayerStrategy(c[i], a[i], tuple(choice[j][i] for j in range(len(outcomes))))
                    for i in range(k)
                )
                result.add(StrategyProfile(players))
    return result


def spe_projections(spes: Iterable[StrategyProfile]) -> set[str]:
    """Union over equilibria of each player's stage-1/stage-2 label."""
    return {lab for prof in spes for lab in prof.projection()}


# ---------------------------------------------------------------------------
# Verification


@dataclass(frozen=True)
class Deviation:
    node: str
    player: int
    action: str
    better: str
    gain: Fraction
    against: str
    kind: str  # "profitable" or "weakly_dominated"

    def to_json(self) -> dict:
        return {
            "node": self.node,
            "player": self.player,
            "action": self.action,
            "deviation": self.better,
            "gain": str(self.gain),
            "against": self.against,
            "kind": self.kind,
        }


@dataclass(frozen=True)
class SpeCheck:
    ok: bool
    witness: Deviation | None = None

    def __bool__(self) -> bool:
        return self.ok


def _check_node(name: str, table: dict[Bits, Payoff], k: int, played: Bits, yes: str, no: str) -> Deviation | None:
    pay = table[played]
    for i in range(k):
        alt = played[:i] + (not played[i],) + played[i + 1:]
        gain = table[alt][i] - pay[i]
        if gain > 0:
            return Deviation(name, i, yes if played[i] else no, no if played[i] else yes, gain,
                             _label(played, yes, no), "profitable")
    # refinement only applies when some refined profile exists at this node
    ne = _nash(table, k)
    if not any(all(_weakly_dominated(table, k, j, p[j]) is None for j in range(k)) for p in ne):
        return None
    for i in range(k):
        dom = _weakly_dominated(table, k, i, played[i])
        if dom is not None:
            against, gain = dom
            return Deviation(name, i, yes if played[i] else no, no if played[i] else yes, gain,
                             _label(against, yes, no), "weakly_dominated")
    return None


def verify_spe(tree: GameTree, profile: StrategyProfile) -> SpeCheck:
    """One-shot deviation check at every decision point, innermost first."""
    k = tree.k
    if profile.k != k:
        raise ValueError("profile size does not match the game")
    outcomes = _profiles(k)
    selection = {}
    for a in outcomes:
        r = profile.report_at(a)
        selection[a] = r
        dev = _check_node("report@" + _label(a, "A", "D"), _stage3_table(tree, a), k, r, "R", "r")
        if dev:
            return SpeCheck(False, dev)
    t2 = _stage2_table(tree, selection)
    dev = _check_node("input", t2, k, profile.amicable(), "A", "D")
    if dev:
        return SpeCheck(False, dev)
    t1 = _stage1_table(tree, t2[profile.amicable()])
    dev = _check_node("collude", t1, k, profile.collude(), "C", "c")
    if dev:
        return SpeCheck(False, dev)
    return SpeCheck(True)


# ---------------------------------------------------------------------------
# Repetition


@dataclass(frozen=True)
class DeviationGain:
    partial: Fraction
    infinite: Fraction
    tail: Fraction

    @property
    def certified(self) -> bool:
        """Both the truncated sum and the full series are positive."""
        return self.partial > 0 and self.infinite > 0


def _geom(x: Fraction, terms: int) -> Fraction:
    """x + x^2 + ... + x^terms."""
    if terms <= 0:
        return Fraction(0)
    if x == 1:
        return Fraction(terms)
    return x * (1 - x**terms) / (1 - x)


def deviation_gain_from_q(q, delta, V, r, horizon: int) -> DeviationGain:
    """Reporting minus cooperating when a reported partner is re-met with probability at most 1 - q."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    q, delta, V, r = frac(q), frac(delta), frac(V), frac(r)
    if not 0 <= delta < 1:
        raise ValueError("delta must lie in [0, 1)")
    x = q * delta
    partial = r + (V + r) * _geom(x, horizon) - V * _geom(delta, horizon)
    infinite = r + (V + r) * (x / (1 - x)) - V * delta / (1 - delta)
    return DeviationGain(partial, infinite, infinite - partial)


def repeated_deviation_gain(ell: int, k: int, delta, V, r, horizon: int) -> DeviationGain:
    """Truncated gain from reporting a grim partner, using p_(i+1) >= q^i."""
    return deviation_gain_from_q(compute_q(ell, k), delta, V, r, horizon)


def solve_finite_repetition(tree: GameTree, horizon: int) -> list[set[str]]:
    """Stage-by-stage SPE projections for ``horizon`` repetitions, solved backward.

    Each earlier stage is the stage game with every distinct continuation
    value of the later stages added to its leaves.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    stages: list[set[str]] = []
    continuations: set[Payoff] = {(Fraction(0),) * tree.k}
    for _ in range(horizon):
        labels: set[str] = set()
        nxt: set[Payoff] = set()
        for cont in continuations:
            g = tree.shifted(cont)
            spes = solve_spe(g)
            labels |= spe_projections(spes)
            nxt |= {prof.outcome(g) for prof in spes}
        stages.append(labels)
        continuations = nxt
    return stages[::-1]
