"""Monte-Carlo repeated service driven through the coordinator.

Each run: a user posts a request to k uniformly chosen servers, every queried
server answers, and the queried agents play the collusion game through an
in-process channel (all must choose to collude; inputs decide who learns).
Learners may then file evidence with the coordinator, which executes every
payment on the ledger. Reporters file in a random order, one tick apart, so
each has the same chance of being first.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

from .coordinator import Coordinator, CoordinatorError, Fees, Status, exchange_evidence
from .dpf import PirConfig
from .games import deviation_gain_from_q
from .incentives import (
    IncentiveParams,
    check_feasibility,
    exit_hit_probability,
    frac,
    insurance_multi_exit,
    insurance_sigma_discounted,
    q_binomial,
    statistical_bound,
)
from .ledger import Opener

PRESCRIBED = "prescribed"
GRIM = "grim"
DEVIANT = "deviant"
MALICIOUS = "malicious"
KINDS = (PRESCRIBED, GRIM, DEVIANT, MALICIOUS)


class ConfigError(ValueError):
    pass


def _strict(cls, data: Mapping[str, Any], where: str) -> dict:
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"unknown field(s) in {where}: {sorted(extra)}")
    return dict(data)


@dataclass(frozen=True)
class DeviantScript:
    collude: bool = True
    amicable: bool = True
    report: bool = False


@dataclass(frozen=True)
class SimConfig:
    """Simulation inputs; money is integer cents, rates are decimal strings or numbers."""

    ell: int = 200
    k: int = 2
    N: int = 16
    omega: int = 1
    runs: int = 10_000
    s: int = 4990
    r: int = 4985
    p: int = 20000
    f: int = 15000
    V: int = 10000
    discount: Any = "0.99"
    xi: Any = "0.999"
    theta: Any = "0"
    mix: Mapping[str, float] = field(default_factory=lambda: {PRESCRIBED: 1.0})
    deviant: DeviantScript = field(default_factory=DeviantScript)
    prescribed_collude: float = 0.5
    lone_deceiver_learns: bool = True
    channel_success: float = 1.0
    false_accusation_rate: float = 0.0
    garbage_responses: bool = False
    horizon: int = 64
    delta: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.k <= self.ell:
            raise ConfigError("need 2 <= k <= ell")
        if self.k & (self.k - 1):
            raise ConfigError("k must be a power of two (one DPF key per server)")
        if self.runs < 1 or self.N < 1 or self.omega < 1 or self.horizon < 1 or self.delta < 1:
            raise ConfigError("runs, N, omega, horizon and delta must be positive")
        for name in ("s", "r", "p", "f", "V"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be non-negative integer cents")
        unknown = set(self.mix) - {PRESCRIBED, GRIM, DEVIANT}
        if unknown or not self.mix or any(w < 0 for w in self.mix.values()) or sum(self.mix.values()) <= 0:
            raise ConfigError("mix must weight prescribed/grim/deviant with non-negative weights")
        if not 0 <= frac(self.discount) < 1:
            raise ConfigError("discount must lie in [0, 1)")
        if not 0 <= frac(self.theta) < 1:
            raise ConfigError("theta must lie in [0, 1)")
        for name in ("prescribed_collude", "channel_success", "false_accusation_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> SimConfig:
        d = _strict(cls, data, "sim config")
        if "deviant" in d:
            d["deviant"] = DeviantScript(**_strict(DeviantScript, d["deviant"], "deviant script"))
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_json(self) -> dict:
        d = asdict(self)
        for name in ("discount", "xi", "theta"):
            d[name] = str(getattr(self, name))
        d["mix"] = dict(self.mix)
        return d

    def with_(self, **changes) -> SimConfig:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return SimConfig(**d)

    def incentive_params(self) -> IncentiveParams:
        c = lambda v: Fraction(v, 100)
        return IncentiveParams(s=c(self.s), r=c(self.r), p=c(self.p), f=c(self.f), V=c(self.V),
                               delta=frac(self.discount), xi=frac(self.xi), omega=self.omega,
                               theta=frac(self.theta))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


@dataclass
class AgentPolicy:
    kind: str
    memory: set[str] = field(default_factory=set)
    script: DeviantScript | None = None

    @property
    def rational(self) -> bool:
        return self.kind != MALICIOUS


@dataclass
class SimReport:
    config: dict
    feasibility: dict
    runs: list[dict]
    aggregate: dict
    load: list[int]
    utilities: dict[str, float]

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "feasibility": self.feasibility,
            "aggregate": self.aggregate,
            "load": self.load,
            "utilities": self.utilities,
            "runs": self.runs,
        }


# ---------------------------------------------------------------------------
# Decisions


def best_response_probe(cfg: SimConfig, agent: AgentPolicy, partner_refuses: bool = False) -> bool:
    """Whether a learner reports: truncated discounted gain of R over staying quiet.

    Re-meeting uses the analytic bound q (0 when ell < 2k - 1). A partner that
    already refuses this agent carries no future cooperation, so only the
    reward is at stake. Ties go to staying quiet.
    """
    if not agent.rational:
        return False
    if partner_refuses:
        return cfg.r > 0
    q = q_binomial(cfg.ell, cfg.k)
    gain = deviation_gain_from_q(q, frac(cfg.discount), cfg.V, cfg.r, cfg.horizon)
    return gain.partial > 0


def _learners(amicable: Sequence[bool], good: bool) -> list[bool]:
    deceivers = [i for i, a in enumerate(amicable) if not a]
    if not deceivers:
        return [True] * len(amicable)
    if len(deceivers) == 1 and good:
        return [i == deceivers[0] for i in range(len(amicable))]
    return [False] * len(amicable)


def _assign(cfg: SimConfig, rng: np.random.Generator) -> dict[str, AgentPolicy]:
    names = [f"S{i}" for i in range(cfg.ell)]
    order = [names[i] for i in rng.permutation(cfg.ell)]
    n_mal = math.floor(frac(cfg.theta) * cfg.ell)
    agents = {n: AgentPolicy(MALICIOUS) for n in order[:n_mal]}
    rest = order[n_mal:]
    kinds = [k for k in (PRESCRIBED, GRIM, DEVIANT) if _weight(cfg, k) > 0]
    total = sum(_weight(cfg, k) for k in kinds)
    counts = [math.floor(len(rest) * _weight(cfg, k) / total) for k in kinds]
    counts[0] += len(rest) - sum(counts)
    pos = 0
    for kind, n in zip(kinds, counts):
        for name in rest[pos:pos + n]:
            agents[name] = AgentPolicy(kind, script=cfg.deviant if kind == DEVIANT else None)
        pos += n
    return dict(sorted(agents.items(), key=lambda kv: int(kv[0][1:])))


def _weight(cfg: SimConfig, kind: str) -> float:
    return float(cfg.mix.get(kind, 0.0))


# ---------------------------------------------------------------------------
# Simulation


class _Run:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        pir = PirConfig(ell=cfg.ell, k=cfg.k, N=cfg.N, omega=cfg.omega, delta=cfg.delta,
                        delta_star=cfg.delta, prg="aes")
        fees = Fees(cfg.s, cfg.r, cfg.p, cfg.f)
        self.coord = Coordinator(pir, fees)
        self.agents = _assign(cfg, self.rng)
        per_request = cfg.k * (cfg.omega + 1) * cfg.s
        self.coord.register("user", per_request * cfg.runs)
        deposit = 4 * (cfg.p + (cfg.k - 1) * cfg.f)
        for name in self.agents:
            self.coord.register(name, deposit)
            self.coord.deposit(name, deposit)
        self.disc = float(frac(cfg.discount))
        self.utilities = {name: 0.0 for name in self.agents}
        self.seen_events = len(self.coord.events)
        self.unclaimed: list[tuple[int, int]] = []
        self.load = [0] * cfg.ell

    def _book(self, run: int, learned: Mapping[str, bool]) -> None:
        weight = self.disc**run
        events = self.coord.events
        for e in events[self.seen_events:]:
            if e["event"] != "payment":
                continue
            if e["src"] in self.utilities:
                self.utilities[e["src"]] -= weight * e["amount"]
            if e["dst"] in self.utilities:
                self.utilities[e["dst"]] += weight * e["amount"]
        self.seen_events = len(events)
        for name, l in learned.items():
            if l:
                self.utilities[name] += weight * self.cfg.V

    def _claim_due(self, final: bool = False) -> None:
        coord = self.coord
        keep = []
        for rid, due in self.unclaimed:
            if not final and coord.now < due:
                keep.append((rid, due))
                continue
            rec = coord.record(rid)
            for server in rec.pk_list:
                if server in rec.fees_forfeited or server in rec.fees_paid:
                    continue
                try:
                    coord.claim_service_fee(server, rid)
                except CoordinatorError:
                    pass
        self.unclaimed = keep

    def _respond(self, rid: int, servers: Sequence[str]) -> dict[str, dict[str, Opener]]:
        inboxes = {}
        for server in servers:
            inbox = self.coord.inbox(rid, server)
            inboxes[server] = inbox
            garbage = self.cfg.garbage_responses and self.agents[server].kind == MALICIOUS
            digests = {}
            for tag, op in inbox.items():
                body = self.rng.bytes(32) if garbage else server.encode() + bytes.fromhex(tag) + op.message
                digests[tag] = hashlib.sha256(body).hexdigest()
            self.coord.submit_response(server, rid, digests)
        return inboxes

    def _answer(self, acc_id: int, inboxes) -> None:
        """Accused servers supply their openings (or a proof in zk mode) at once."""
        acc = self.coord.accusations[acc_id]
        if acc.status is not Status.PENDING:
            return
        for pk in acc.evidence.accused:
            if acc.status is Status.PENDING:
                self.coord.provide_aux(pk, acc_id, inboxes[pk], proof=acc.zk)

    def step(self, run: int) -> dict:
        cfg, coord, rng = self.cfg, self.coord, self.rng
        coord.tick()
        a = int(rng.integers(0, cfg.N))
        rid = coord.post_request("user", a, seed=int(rng.integers(0, 2**63)))
        rec = coord.record(rid)
        servers = list(rec.pk_list)
        for s in servers:
            self.load[int(s[1:])] += 1
        self.unclaimed.append((rid, rec.tick + coord.fee_hold))
        inboxes = self._respond(rid, servers)
        policies = [self.agents[s] for s in servers]
        real_tag = coord.sessions[rid].real_tag

        collude = []
        for name, ag in zip(servers, policies):
            partners = [p for p in servers if p != name]
            if ag.kind == PRESCRIBED:
                collude.append(bool(rng.random() < cfg.prescribed_collude))
            elif ag.kind == GRIM:
                collude.append(not any(p in ag.memory for p in partners))
            elif ag.kind == DEVIANT:
                collude.append(ag.script.collude)
            else:
                collude.append(True)
        attempt = all(collude)
        learned = {s: False for s in servers}
        reporters: list[str] = []
        if attempt and rng.random() < cfg.channel_success:
            amicable = []
            for ag in policies:
                if ag.kind == PRESCRIBED:
                    amicable.append(False)
                elif ag.kind == DEVIANT:
                    amicable.append(ag.script.amicable)
                else:
                    amicable.append(True)
            for s, l in zip(servers, _learners(amicable, cfg.lone_deceiver_learns)):
                learned[s] = l
            for name, ag in zip(servers, policies):
                if not learned[name]:
                    continue
                if ag.kind == PRESCRIBED:
                    if best_response_probe(cfg, ag):
                        reporters.append(name)
                elif ag.kind == DEVIANT and ag.script.report:
                    reporters.append(name)
        order = [reporters[i] for i in rng.permutation(len(reporters))] if reporters else []
        confirmed = 0
        for rep in order:
            for target in servers:
                if target == rep:
                    continue
                ev = exchange_evidence(coord, rid, rep, target, real_tag, inboxes[target])
                try:
                    acc_id = coord.accuse(ev)
                except CoordinatorError:
                    continue
                self._answer(acc_id, inboxes)
                if coord.accusations[acc_id].status is Status.CONFIRMED:
                    confirmed += 1
                    self.agents[target].memory.add(rep)
            coord.tick()
        false_acc = 0
        for name, ag in zip(servers, policies):
            if ag.kind != MALICIOUS or rng.random() >= cfg.false_accusation_rate:
                continue
            target = servers[int(rng.integers(0, len(servers)))]
            if target == name:
                continue
            ev = exchange_evidence(coord, rid, name, target, real_tag, {real_tag: Opener(rng.bytes(24), b"")})
            try:
                acc_id = coord.accuse(ev, zk=True)
            except CoordinatorError:
                continue
            self._answer(acc_id, inboxes)
            false_acc += 1
        self._claim_due()
        self._book(run, learned)
        success = any(learned.values())
        rational_queried = sum(1 for ag in policies if ag.rational)
        return {
            "run": run,
            "request": rid,
            "servers": servers,
            "attempt": attempt,
            "learned": sorted(s for s, l in learned.items() if l),
            "reporters": order,
            "confirmed": confirmed,
            "unreported_success": success and confirmed == 0,
            "false_accusations": false_acc,
            "rational_queried": rational_queried,
        }


def run_simulation(cfg: SimConfig) -> SimReport:
    sim = _Run(cfg)
    runs = [sim.step(i) for i in range(cfg.runs)]
    sim.coord.advance_to(sim.coord.now + max(cfg.delta, sim.coord.fee_hold) + 1)
    sim._claim_due(final=True)
    sim._book(cfg.runs, {})
    coord = sim.coord
    rewards: dict[int, int] = {}
    for e in coord.events:
        if e["event"] == "payment" and e["kind"] == "reward":
            rewards[e["request"]] = rewards.get(e["request"], 0) + 1
    confirmed_requests = {a.evidence.request_id for a in coord.accusations.values() if a.status is Status.CONFIRMED}
    statuses = [a.status for a in coord.accusations.values()]
    aggregate = {
        "runs": cfg.runs,
        "collusion_attempts": sum(r["attempt"] for r in runs),
        "successful_collusions": sum(bool(r["learned"]) for r in runs),
        "unreported_successful_collusions": sum(r["unreported_success"] for r in runs),
        "reports": sum(len(r["reporters"]) for r in runs),
        "confirmed_accusations": statuses.count(Status.CONFIRMED),
        "false_accusations": statuses.count(Status.REFUTED) + statuses.count(Status.REJECTED),
        "rewarded_requests": len(rewards),
        "requests_with_multiple_rewards": sum(1 for v in rewards.values() if v > 1),
        "confirmed_requests_without_reward": len(confirmed_requests - set(rewards)) if cfg.r > 0 else 0,
        "runs_with_two_rational": sum(r["rational_queried"] >= 2 for r in runs),
        "inexecutable_fines": sum(x["amount"] for x in coord.inexecutable),
        "money_residual": coord.money_residual(),
    }
    feas = check_feasibility(cfg.incentive_params(), cfg.ell, cfg.k) if cfg.ell >= 2 * cfg.k - 1 else None
    return SimReport(
        config=cfg.to_json(),
        feasibility=feas.to_json() if feas else {"pass": False, "reason": "ell < 2k - 1"},
        runs=runs,
        aggregate=aggregate,
        load=sim.load,
        utilities=sim.utilities,
    )


def load_within(report: SimReport, sigmas: float = 4.0) -> bool:
    """Every server's query count lies within ``sigmas`` of Binomial(runs, k/ell)."""
    cfg = report.config
    n, pr = cfg["runs"], cfg["k"] / cfg["ell"]
    mu, sd = n * pr, math.sqrt(n * pr * (1 - pr))
    return all(abs(c - mu) <= sigmas * sd for c in report.load)


def rational_pair_agreement(report: SimReport) -> tuple[float, float, float]:
    """(empirical rate, predicted rate, z-score) for runs with at least two rational servers."""
    cfg = report.config
    pred = 1 - float(statistical_bound(cfg["ell"], cfg["k"], Fraction(cfg["theta"])))
    n = cfg["runs"]
    emp = report.aggregate["runs_with_two_rational"] / n
    sd = math.sqrt(max(pred * (1 - pred), 1e-300) / n)
    return emp, pred, (emp - pred) / sd


# ---------------------------------------------------------------------------
# Exits


@dataclass(frozen=True)
class ExitModel:
    k: int
    ell: int
    Omega: int
    T: int
    r: Any = "0"
    r2: Any = "0"
    p: int = 100
    s: int = 1

    def __post_init__(self):
        if not 2 <= self.k <= self.ell:
            raise ConfigError("need 2 <= k <= ell")
        if self.Omega < 1 or self.T < 1:
            raise ConfigError("Omega and T must be positive")
        for name in ("r", "r2"):
            if not 0 <= frac(getattr(self, name)) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> ExitModel:
        return cls(**_strict(cls, data, "exit model"))


@dataclass
class ExitReport:
    mode: str
    exiters: list[str]
    realized_ratio: float
    predicted_ratio: float | None
    inexecutable: float
    detained_fees: float
    per_seed: list[float]

    def to_json(self) -> dict:
        return asdict(self)


def _hit_probs(model: ExitModel, m: int) -> np.ndarray:
    b = min(m, model.k)
    return np.array([float(exit_hit_probability(m, model.k, model.ell, i)) for i in range(b + 1)])


def exit_scenario(model: ExitModel, schedule: Sequence[tuple[str, int]], seeds: Sequence[int] = range(32),
                  mode: str = "batch") -> ExitReport:
    """Worst case: every query that reaches an exiter ends in a reported collusion.

    The first reporter is uniform among the k queried servers and exiters never
    report each other, so a query with i exiters fines all i of them when the
    winner is one of the k - i others. Each exiter's deposit covers one
    penalty. ``batch`` puts all Omega queries at the start of the period
    (the undiscounted-arrival model); ``stream`` has Omega arrivals in each
    of the T + 1 time units.
    """
    exiters = [name for name, _ in schedule]
    if len(set(exiters)) != len(exiters):
        raise ConfigError("duplicate exiter in schedule")
    for _, tick in schedule:
        if not 0 <= tick <= model.T:
            raise ConfigError("exit ticks must fall inside the protection period")
    m = len(exiters)
    k, p, s = model.k, model.p, model.s
    grow, decay = 1 + float(frac(model.r)), 1 - float(frac(model.r2))
    if m == 0:
        return ExitReport(mode, [], 0.0, 0.0, 0.0, 0.0, [0.0 for _ in seeds])
    probs = _hit_probs(model, m)
    num_total = den_total = 0.0
    per_seed = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        if mode == "batch":
            counts = rng.multinomial(model.Omega, probs)
            # a fined query hits a uniform i-subset of the exiters
            owed = np.zeros(m)
            for i in range(1, len(probs)):
                for _ in range(rng.binomial(int(counts[i]), (k - i) / k)):
                    owed[rng.choice(m, size=i, replace=False)] += 1
            inexec = float(np.maximum(owed - 1, 0).sum()) * p * decay**model.T
            pool = float(counts[1:].sum()) * k * s * grow**model.T
        elif mode == "stream":
            weights_f = decay ** np.arange(model.T, -1, -1, dtype=float)
            weights_s = grow ** np.arange(model.T, -1, -1, dtype=float)
            counts = rng.multinomial(model.Omega, probs, size=model.T + 1)
            fines = np.zeros(model.T + 1)
            for i in range(1, len(probs)):
                fines += rng.binomial(counts[:, i], (k - i) / k) * i
            inexec = max(float((fines * weights_f).sum()) * p - m * p, 0.0)
            pool = float((counts[:, 1:].sum(axis=1) * weights_s).sum()) * k * s
        else:
            raise ConfigError(f"mode must be batch or stream, got {mode!r}")
        per_seed.append(inexec / pool if pool else 0.0)
        num_total += inexec
        den_total += pool
    if mode == "batch":
        pred = float(insurance_sigma_discounted(k, model.ell, model.Omega, model.T, frac(model.r),
                                                frac(model.r2), p, s)) if m == 1 else None
    else:
        pred = float(insurance_multi_exit(m, k, model.ell, model.Omega, model.T, frac(model.r),
                                          frac(model.r2), p, s))
    n = len(per_seed)
    return ExitReport(mode, exiters, num_total / den_total if den_total else 0.0, pred,
                      num_total / n, den_total / n, per_seed)
