"""The coordinator contract: PIR service lifecycle and collusion resolution.

A request carries (omega + 1) PIR instances: the real one and omega
companions on uniformly random indices. Every instance has a public random
tag, so the board shows which queries belong together but not which instance
is real. Query commitments are posted per server position in a shuffled
order.

Accusations name one instance tag, a circuit whose inputs are bound to the
queries of particular servers in that instance, and up to omega + 1 claimed
outputs. The accused open all of their query commitments within ``delta``
ticks; the accusation is confirmed on timeout, on a bad opening, or when the
circuit applied to the opened queries lands in the claimed set.

Payments for one request execute in filing order (ties at one tick go to
the lower server index). The first confirmed accuser receives the reward;
each other accused server loses the penalty and its fees on that request.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol

import numpy as np

from .circuit import Circuit, CircuitError, check_circuit_trivial, claims_trivial
from .dpf import PirConfig, ReconstructionMap, encode_query, query_gen
from .ledger import Ledger, LedgerEntry, LedgerError, Opener, canonical, commit, verify_opening

POOL = "pool"


class CoordinatorError(ValueError):
    """A rejected call; no state was changed."""


@dataclass(frozen=True)
class Fees:
    """Mechanism amounts in integer cents."""

    s: int
    r: int
    p: int
    f: int

    def __post_init__(self):
        for name in ("s", "r", "p", "f"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise CoordinatorError(f"fee {name} must be non-negative integer cents, got {v!r}")


class Status(enum.Enum):
    PENDING = "pending"
    CONFIRMED = "confirmed"
    REFUTED = "refuted"
    REJECTED = "rejected_trivial"
    IGNORED = "ignored"


@dataclass(frozen=True)
class Evidence:
    """An accusation as filed.

    ``bindings`` maps each circuit input to the server whose query (in the
    named instance) feeds it. ``claims`` holds the candidate outputs; a value
    may be an int or bytes.
    """

    accuser: str
    request_id: int
    accused: tuple[str, ...]
    circuit: Circuit
    bindings: Mapping[str, str]
    instance: str
    claims: tuple[Any, ...]
    accuser_openers: Mapping[str, Opener] = field(default_factory=dict)

    def digest(self) -> str:
        body = {
            "circuit": self.circuit.to_json(),
            "bindings": dict(sorted(self.bindings.items())),
            "instance": self.instance,
            "claims": [_jsonable(c) for c in self.claims],
        }
        return hashlib.sha256(canonical(body)).hexdigest()


def _jsonable(v):
    if isinstance(v, (bytes, bytearray)):
        return {"hex": bytes(v).hex()}
    if isinstance(v, np.generic):
        return v.item()
    return v


@dataclass
class Accusation:
    id: int
    evidence: Evidence
    filed_tick: int
    order: tuple
    deadline: int
    zk: bool
    status: Status = Status.PENDING
    reason: str = ""
    aux: dict[str, Any] = field(default_factory=dict)
    paid: bool = False


@dataclass
class RequestRecord:
    id: int
    user: str
    tick: int
    pk_list: tuple[str, ...]
    commitments: dict[str, list[tuple[str, str]]]
    fee_per_server: int
    response_digests: dict[str, list[str]] = field(default_factory=dict)
    already_fined: set[str] = field(default_factory=set)
    fees_forfeited: set[str] = field(default_factory=set)
    fees_paid: set[str] = field(default_factory=set)
    filed: dict[str, set[str]] = field(default_factory=dict)
    accusations: list[int] = field(default_factory=list)
    winner: str | None = None
    rewarded: bool = False


@dataclass
class ClientSession:
    """What the user keeps private: the real index and every opener."""

    a: int
    real_tag: str
    indices: dict[str, int]
    openers: dict[tuple[str, str], Opener]
    rmaps: dict[str, ReconstructionMap]
    bundles: dict[tuple[str, str], bytes]


class EvidenceVerifier(Protocol):
    def check(self, coord: Coordinator, acc: Accusation) -> bool:
        """True when the evidence holds (the accusation should be confirmed)."""
        ...


def _instance_values(coord: Coordinator, acc: Accusation, source) -> dict[str, Any] | None:
    ev = acc.evidence
    values = {}
    for name in ev.circuit.referenced:
        server = ev.bindings[name]
        opener = source(server)
        if opener is None:
            return None
        values[name] = opener.message
    return values


def _claims_hit(circuit: Circuit, values: Mapping[str, Any], claims) -> bool:
    try:
        out = circuit.evaluate(values)
    except (ArithmeticError, TypeError, ValueError, CircuitError):
        return False
    if isinstance(out, np.generic):
        out = out.item()
    return any(out == c for c in claims)


class PlaintextVerifier:
    """Evaluates the circuit on the openings the accused revealed."""

    def check(self, coord, acc):
        ev = acc.evidence

        def source(server):
            if server == ev.accuser:
                return ev.accuser_openers.get(ev.instance)
            return acc.aux.get(server, {}).get(ev.instance)

        values = _instance_values(coord, acc, source)
        return values is not None and _claims_hit(ev.circuit, values, ev.claims)


class OracleVerifier:
    """Stands in for a sound zero-knowledge verifier.

    It consults the client's private openers held in simulation state, so the
    board never sees the accused inputs.
    """

    def check(self, coord, acc):
        ev = acc.evidence
        session = coord.sessions[ev.request_id]
        positions = coord.positions(ev.request_id)

        def source(server):
            return session.openers.get((positions[server], ev.instance))

        values = _instance_values(coord, acc, source)
        return values is not None and _claims_hit(ev.circuit, values, ev.claims)


def server_index(party: str) -> int:
    """Numeric index of a server id such as ``S17``; others sort last."""
    if party.startswith("S") and party[1:].isdigit():
        return int(party[1:])
    return 1 << 30


class Coordinator:
    def __init__(
        self,
        cfg: PirConfig,
        fees: Fees,
        ledger: Ledger | None = None,
        *,
        fee_hold: int | None = None,
        zk: bool = False,
        verifier: EvidenceVerifier | None = None,
        oracle: EvidenceVerifier | None = None,
        pool_balance: int = 0,
        log: Callable[[dict], None] | None = None,
    ) -> None:
        self.cfg = cfg
        self.fees = fees
        self.ledger = ledger or Ledger()
        self.fee_hold = cfg.delta if fee_hold is None else fee_hold
        self.zk = zk
        self.verifier = verifier or PlaintextVerifier()
        self.oracle = oracle or OracleVerifier()
        self.requests: dict[int, RequestRecord] = {}
        self.sessions: dict[int, ClientSession] = {}
        self.accusations: dict[int, Accusation] = {}
        self.keys: dict[str, bytes] = {}
        self.earmarked: dict[str, int] = {}
        self.inexecutable: list[dict] = []
        self.events: list[dict] = []
        self._log = log
        self._pending: dict[int, Accusation] = {}
        if POOL not in self.ledger.accounts:
            self.ledger.register(POOL, pool_balance)

    # ------------------------------------------------------------------ util

    @property
    def now(self) -> int:
        return self.ledger.tick

    def _emit(self, event: str, **data) -> None:
        rec = {"tick": self.now, "event": event, **{k: _jsonable(v) for k, v in data.items()}}
        self.events.append(rec)
        if self._log:
            self._log(rec)

    def log_event(self, event: str, **data) -> None:
        """Append an outside observation (e.g. a rejected call) to the event log."""
        self._emit(event, **data)

    def _post(self, poster: str, payload: dict) -> int:
        sig = self.ledger.sign(self.keys[poster], poster, payload)
        return self.ledger.post(LedgerEntry(poster, payload, sig))

    def _pay(self, kind: str, rid: int, src: str, dst: str, amount: int, locked: bool = True) -> None:
        if amount == 0:
            return
        if locked:
            self.ledger.slash(src, amount, dst)
        else:
            self.ledger.transfer(src, dst, amount)
        self._emit("payment", kind=kind, request=rid, src=src, dst=dst, amount=amount)

    def _available_deposit(self, party: str) -> int:
        return self.ledger.account(party).locked - self.earmarked.get(party, 0)

    def positions(self, rid: int) -> dict[str, int]:
        return {s: j for j, s in enumerate(self.requests[rid].pk_list)}

    def record(self, rid: int) -> RequestRecord:
        try:
            return self.requests[rid]
        except KeyError:
            raise CoordinatorError(f"unknown request {rid}") from None

    # ------------------------------------------------------------- accounts

    def register(self, party: str, balance: int = 0) -> None:
        self.keys[party] = self.ledger.register(party, balance)
        self._emit("register", party=party, balance=balance)

    def deposit(self, party: str, amount: int) -> None:
        self.ledger.lock(party, amount)
        self._emit("deposit", party=party, amount=amount)

    # ------------------------------------------------------ normal service

    def post_request(self, user: str, a: int, seed=None, servers: list[str] | None = None) -> int:
        """Client steps 1-3: build instances, commit, pick servers, lock fees."""
        cfg, fees = self.cfg, self.fees
        per_server = (cfg.omega + 1) * fees.s
        total = per_server * cfg.k
        if user not in self.keys:
            raise CoordinatorError(f"unknown user {user!r}")
        if self.ledger.account(user).balance < total:
            raise CoordinatorError(f"{user} cannot lock {total} in fees")
        if not 0 <= a < cfg.N:
            raise CoordinatorError(f"index {a} outside database")
        rng = np.random.default_rng(seed)
        indices = [a] + [int(x) for x in rng.integers(0, cfg.N, cfg.omega)]
        tags = [rng.bytes(8).hex() for _ in indices]
        openers, bundles, rmaps, board = {}, {}, {}, {}
        for tag, idx in zip(tags, indices):
            sub = int(rng.integers(0, 2**63))
            bs, rmap = query_gen(idx, cfg, seed=sub)
            rmaps[tag] = rmap
            for b in bs:
                msg = encode_query(b).payload
                c = commit(msg, rng.bytes(16))
                openers[(b.server_index, tag)] = c.opener
                bundles[(b.server_index, tag)] = msg
                board.setdefault(b.server_index, []).append((tag, c.digest.hex()))
        for j in board:
            order = rng.permutation(len(board[j]))
            board[j] = [board[j][i] for i in order]
        if servers is None:
            chosen = rng.choice(cfg.ell, size=cfg.k, replace=False)
            servers = [f"S{int(i)}" for i in chosen]
        if len(servers) != cfg.k or len(set(servers)) != cfg.k:
            raise CoordinatorError("need k distinct servers")
        for s in servers:
            if s not in self.keys:
                raise CoordinatorError(f"unknown server {s!r}")
        rid = len(self.requests)
        commitments = {servers[j]: board[j] for j in range(cfg.k)}
        self._post(user, {"type": "request", "id": rid, "commitments": [[j, board[j]] for j in range(cfg.k)]})
        self._post(user, {"type": "servers", "id": rid, "pk_list": servers})
        self.ledger.lock(user, total)
        self.requests[rid] = RequestRecord(rid, user, self.now, tuple(servers), commitments, per_server)
        self.sessions[rid] = ClientSession(
            a, tags[0], dict(zip(tags, indices)), openers, rmaps, bundles
        )
        self._emit("request", request=rid, user=user, pk_list=list(servers), locked=total,
                   commitments=cfg.k * (cfg.omega + 1))
        return rid

    def inbox(self, rid: int, server: str) -> dict[str, Opener]:
        """Step 4 (off-board): the de-commit info a queried server receives."""
        j = self.positions(rid)[server]
        session = self.sessions[rid]
        return {tag: session.openers[(j, tag)] for tag in session.indices}

    def submit_response(self, server: str, rid: int, digests: Mapping[str, str]) -> None:
        """Step 6: a queried server commits to one response per instance."""
        rec = self.record(rid)
        if server not in rec.pk_list:
            raise CoordinatorError(f"{server} was not queried on request {rid}")
        if server in rec.response_digests:
            raise CoordinatorError(f"{server} already responded to request {rid}")
        if self.now > rec.tick + self.cfg.delta:
            raise CoordinatorError("service window closed")
        tags = {t for t, _ in rec.commitments[server]}
        if set(digests) != tags:
            raise CoordinatorError("one response digest per instance required")
        payload = {"type": "response", "id": rid, "digests": dict(sorted(digests.items()))}
        self._post(server, payload)
        rec.response_digests[server] = [digests[t] for t in sorted(digests)]
        self._emit("response", request=rid, server=server)

    def claim_service_fee(self, server: str, rid: int) -> int:
        rec = self.record(rid)
        if server not in rec.pk_list:
            raise CoordinatorError(f"{server} was not queried on request {rid}")
        if server in rec.fees_paid:
            raise CoordinatorError("fee already claimed")
        if server in rec.fees_forfeited:
            raise CoordinatorError(f"{server} was successfully accused on request {rid}")
        if server not in rec.response_digests:
            raise CoordinatorError(f"{server} never responded")
        if self.now < rec.tick + self.fee_hold:
            raise CoordinatorError("insurance hold has not elapsed")
        if any(not self.accusations[i].paid for i in rec.accusations):
            raise CoordinatorError("accusation pending on this request")
        rec.fees_paid.add(server)
        self._pay("service_fee", rid, rec.user, server, rec.fee_per_server)
        return rec.fee_per_server

    # ------------------------------------------------------- resolution

    def _validate(self, ev: Evidence) -> RequestRecord:
        rec = self.record(ev.request_id)
        if ev.accuser not in self.keys:
            raise CoordinatorError(f"unknown accuser {ev.accuser!r}")
        if not ev.accused:
            raise CoordinatorError("empty accused set")
        if ev.accuser in ev.accused:
            raise CoordinatorError("cannot accuse oneself")
        if not set(ev.accused) <= set(rec.pk_list):
            raise CoordinatorError("accused must be queried servers")
        tags = {t for t, _ in rec.commitments[rec.pk_list[0]]}
        if ev.instance not in tags:
            raise CoordinatorError(f"unknown instance tag {ev.instance!r}")
        if not 1 <= len(ev.claims) <= self.cfg.omega + 1:
            raise CoordinatorError(f"between 1 and {self.cfg.omega + 1} claimed outputs")
        refs = ev.circuit.referenced
        bound = {ev.bindings.get(n) for n in refs}
        if None in bound:
            raise CoordinatorError("every referenced input needs a binding")
        if not bound <= set(ev.accused) | {ev.accuser}:
            raise CoordinatorError("inputs may bind only to the accuser or the accused")
        if not bound & set(ev.accused):
            raise CoordinatorError("evidence must depend on an accused server's input")
        if ev.accuser in bound:
            if ev.accuser not in rec.pk_list:
                raise CoordinatorError("only queried servers hold committed inputs")
            opener = ev.accuser_openers.get(ev.instance)
            digest = dict(rec.commitments[ev.accuser]).get(ev.instance)
            if opener is None or not verify_opening(bytes.fromhex(digest), opener):
                raise CoordinatorError("accuser's own opening does not match the board")
        return rec

    def accuse(self, ev: Evidence, zk: bool | None = None) -> int:
        """Step 8: lock the fine, screen for triviality, start the window.

        ``zk`` overrides the coordinator-wide verification mode for this filing.
        """
        rec = self._validate(ev)
        zk = self.zk if zk is None else zk
        f = self.fees.f
        if self._available_deposit(ev.accuser) < f:
            raise CoordinatorError(f"{ev.accuser} lacks a deposit covering the fine")
        order = (self.now, server_index(ev.accuser), len(self.accusations))
        window = self.cfg.delta_star if zk else self.cfg.delta
        acc = Accusation(len(self.accusations), ev, self.now, order, self.now + window, zk)
        self.accusations[acc.id] = acc
        rec.accusations.append(acc.id)
        self.earmarked[ev.accuser] = self.earmarked.get(ev.accuser, 0) + f
        self._emit("accuse", accusation=acc.id, request=rec.id, accuser=ev.accuser,
                   accused=list(ev.accused), deadline=acc.deadline)
        if check_circuit_trivial(ev.circuit) or claims_trivial(ev.circuit, ev.claims):
            self._finish(acc, Status.REJECTED, "trivial circuit")
            return acc.id
        key = ev.digest()
        fresh = [pk for pk in ev.accused
                 if pk not in rec.already_fined and key not in rec.filed.get(pk, set())]
        if not fresh:
            self._finish(acc, Status.IGNORED, "evidence already recorded or accused already fined")
            return acc.id
        self._pending[acc.id] = acc
        return acc.id

    def provide_aux(self, accused: str, acc_id: int, openers: Mapping[str, Opener] | None = None,
                    proof: bool = False) -> None:
        """Step 9: openings (plaintext path) or a refutation proof (zk path)."""
        acc = self._get(acc_id)
        if acc.status is not Status.PENDING or self.now >= acc.deadline:
            self._emit("aux_late", accusation=acc_id, server=accused)
            return
        if accused not in acc.evidence.accused:
            raise CoordinatorError(f"{accused} is not accused in {acc_id}")
        if accused in acc.aux:
            raise CoordinatorError("auxiliary information already provided")
        acc.aux[accused] = {"proof": True} if acc.zk else dict(openers or {})
        self._emit("aux", accusation=acc_id, server=accused)
        if set(acc.aux) == set(acc.evidence.accused):
            self.accusation_val(acc_id)

    def _get(self, acc_id: int) -> Accusation:
        try:
            return self.accusations[acc_id]
        except KeyError:
            raise CoordinatorError(f"unknown accusation {acc_id}") from None

    def accusation_val(self, acc_id: int) -> Status:
        """Step 10: decide a pending accusation once all aux arrived or time ran out."""
        acc = self._get(acc_id)
        if acc.status is not Status.PENDING:
            return acc.status
        ev = acc.evidence
        rec = self.requests[ev.request_id]
        missing = [pk for pk in ev.accused if pk not in acc.aux]
        if missing and self.now < acc.deadline:
            raise CoordinatorError("window still open and auxiliary information missing")
        if missing:
            return self._finish(acc, Status.CONFIRMED, f"no auxiliary information from {missing}")
        if acc.zk:
            holds = self.oracle.check(self, acc)
            return self._finish(acc, Status.CONFIRMED if holds else Status.REFUTED,
                                "proof rejected" if holds else "proof accepted")
        for pk in ev.accused:
            board = dict(rec.commitments[pk])
            opened = acc.aux[pk]
            if set(opened) != set(board) or not all(
                verify_opening(bytes.fromhex(board[t]), o) for t, o in opened.items()
            ):
                return self._finish(acc, Status.CONFIRMED, f"bad opening from {pk}")
        holds = self.verifier.check(self, acc)
        return self._finish(acc, Status.CONFIRMED if holds else Status.REFUTED,
                            "output matches claim" if holds else "output does not match")

    def _finish(self, acc: Accusation, status: Status, reason: str) -> Status:
        acc.status, acc.reason = status, reason
        self._pending.pop(acc.id, None)
        rid = acc.evidence.request_id
        self._emit("resolved", accusation=acc.id, request=rid, status=status.value, reason=reason)
        self._settle(rid)
        return status

    def _settle(self, rid: int) -> None:
        """Execute payments in filing order, stopping at the first unresolved accusation."""
        rec = self.requests[rid]
        for acc_id in sorted(rec.accusations, key=lambda i: self.accusations[i].order):
            acc = self.accusations[acc_id]
            if acc.paid:
                continue
            if acc.status is Status.PENDING:
                return
            self._execute(rec, acc)

    def _execute(self, rec: RequestRecord, acc: Accusation) -> None:
        ev, fees = acc.evidence, self.fees
        self.earmarked[ev.accuser] -= fees.f
        acc.paid = True
        if acc.status in (Status.REFUTED, Status.REJECTED):
            self._pay("framing_fine", rec.id, ev.accuser, POOL, fees.f)
            return
        if acc.status is Status.IGNORED:
            return
        self.payment_exec(rec, acc)

    def payment_exec(self, rec: RequestRecord, acc: Accusation) -> None:
        ev, fees = acc.evidence, self.fees
        key = ev.digest()
        fresh = [pk for pk in ev.accused
                 if pk not in rec.already_fined and key not in rec.filed.get(pk, set())]
        if not fresh:
            acc.reason += "; nothing left to execute"
            self._emit("no_op", accusation=acc.id, request=rec.id,
                       reason="evidence already executed or accused already fined")
            return
        if rec.winner is None:
            rec.winner = ev.accuser
        for pk in fresh:
            rec.filed.setdefault(pk, set()).add(key)
            if pk not in rec.fees_forfeited and pk not in rec.fees_paid:
                rec.fees_forfeited.add(pk)
                self._pay("forfeit_fee", rec.id, rec.user, POOL, rec.fee_per_server)
            if pk == rec.winner:
                continue
            rec.already_fined.add(pk)
            take = max(0, min(fees.p, self._available_deposit(pk)))
            self._pay("penalty", rec.id, pk, POOL, take)
            if take < fees.p:
                self.inexecutable.append({"request": rec.id, "server": pk, "amount": fees.p - take})
                self._emit("inexecutable", request=rec.id, server=pk, amount=fees.p - take)
        if ev.accuser == rec.winner and not rec.rewarded:
            pool = self.ledger.account(POOL).balance
            amount = min(fees.r, pool)
            self._pay("reward", rec.id, POOL, ev.accuser, amount, locked=False)
            rec.rewarded = True
            if amount < fees.r:
                self._emit("reward_shortfall", request=rec.id, amount=fees.r - amount)

    # ------------------------------------------------------------ time

    def tick(self) -> list[int]:
        """Advance one logical tick and fire windows that end now."""
        self.ledger.tick += 1
        fired = sorted(i for i, a in self._pending.items() if a.deadline <= self.now)
        for i in fired:
            self._emit("timeout", accusation=i)
            self.accusation_val(i)
        return fired

    def advance_to(self, t: int) -> list[int]:
        fired = []
        while self.now < t:
            fired += self.tick()
        return fired

    # ------------------------------------------------------------ reporting

    def write_events(self, path: str | Path) -> None:
        Path(path).write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events))

    def money_residual(self) -> int:
        return self.ledger.conservation_residual()


# ---------------------------------------------------------------------------
# evidence helpers


def exchange_evidence(coord: Coordinator, rid: int, accuser: str, accused: str, tag: str,
                      partner_openers: Mapping[str, Opener]) -> Evidence:
    """Evidence from colluding by exchanging queries: the partner's opened query itself."""
    circuit = Circuit.build("y", y="query")
    return Evidence(accuser, rid, (accused,), circuit, {"y": accused}, tag,
                    (partner_openers[tag].message,))


def index_bit_evidence(coord: Coordinator, rid: int, accuser: str, accused: str, tag: str,
                       bit: int, value: int, own_openers: Mapping[str, Opener]) -> Evidence:
    """Claim that bit ``bit`` of the queried index in instance ``tag`` equals ``value``."""
    circuit = Circuit.build(f"bit(pir_index(x, y), {bit})", x="query", y="query")
    return Evidence(accuser, rid, (accused,), circuit, {"x": accuser, "y": accused}, tag,
                    (value,), {tag: own_openers[tag]})
