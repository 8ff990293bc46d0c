"""Scripted coordinator scenarios.

A scenario is ``{"config": {...}, "actions": [{tick, actor, op, args}, ...]}``.
Actions run in order; the clock is advanced to each action's tick first.
Rejected calls are logged as ``rejected`` events instead of aborting, so a
scenario can exercise the coordinator's guards.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .circuit import Circuit
from .coordinator import Coordinator, CoordinatorError, Evidence, Fees, exchange_evidence, index_bit_evidence
from .dpf import PirConfig
from .ledger import LedgerError, Opener

OPS = ("register", "deposit", "request", "respond", "accuse", "aux", "validate", "claim", "advance")


class ScenarioError(ValueError):
    pass


def _strict(data: Mapping, allowed: set[str], where: str) -> None:
    extra = set(data) - allowed
    if extra:
        raise ScenarioError(f"unknown field(s) in {where}: {sorted(extra)}")


@dataclass(frozen=True)
class ScenarioConfig:
    ell: int
    k: int
    N: int = 16
    omega: int = 1
    delta: int = 5
    delta_star: int = 5
    fees: Mapping[str, int] = field(default_factory=lambda: {"s": 100, "r": 99, "p": 20000, "f": 20000})
    zk: bool = False
    fee_hold: int | None = None
    pool: int = 0
    prg: str = "aes"

    @classmethod
    def from_json(cls, data: Mapping) -> ScenarioConfig:
        _strict(data, {f.name for f in fields(cls)}, "scenario config")
        if "fees" in data:
            _strict(data["fees"], {"s", "r", "p", "f"}, "fees")
        return cls(**data)

    def build(self) -> Coordinator:
        fees = {"s": 100, "r": 99, "p": 20000, "f": 20000, **self.fees}
        cfg = PirConfig(ell=self.ell, k=self.k, N=self.N, omega=self.omega, delta=self.delta,
                        delta_star=self.delta_star, prg=self.prg)
        return Coordinator(cfg, Fees(**fees), fee_hold=self.fee_hold, zk=self.zk, pool_balance=self.pool)


@dataclass
class Replay:
    coord: Coordinator
    requests: list[int] = field(default_factory=list)

    def _tag(self, rid: int, which: Any) -> str:
        session = self.coord.sessions[rid]
        if which in (None, "real"):
            return session.real_tag
        if isinstance(which, int):
            companions = [t for t in session.indices if t != session.real_tag]
            if not 0 <= which < len(companions):
                raise ScenarioError(f"request {rid} has {len(companions)} companion instance(s)")
            return companions[which]
        return str(which)

    def _evidence(self, actor: str, args: Mapping) -> Evidence:
        coord = self.coord
        rid = args["request"]
        accused = args["accused"]
        accused = (accused,) if isinstance(accused, str) else tuple(accused)
        tag = self._tag(rid, args.get("instance"))
        kind = args.get("evidence", "exchange")
        if kind == "exchange":
            return exchange_evidence(coord, rid, actor, accused[0], tag, coord.inbox(rid, accused[0]))
        if kind == "forged":
            circuit = Circuit.build("y", y="query")
            return Evidence(actor, rid, accused, circuit, {"y": accused[0]}, tag,
                            (bytes.fromhex(args.get("claim", "00" * 16)),))
        if kind == "index_bit":
            bit = int(args.get("bit", 0))
            value = args.get("value")
            if value is None:
                value = (coord.sessions[rid].indices[tag] >> bit) & 1
            return index_bit_evidence(coord, rid, actor, accused[0], tag, bit, int(value), coord.inbox(rid, actor))
        if kind == "circuit":
            circuit = Circuit.from_json(args["circuit"])
            openers = {}
            if actor in args["bindings"].values():
                openers = {tag: coord.inbox(rid, actor)[tag]}
            return Evidence(actor, rid, accused, circuit, dict(args["bindings"]), tag,
                            tuple(args["claims"]), openers)
        raise ScenarioError(f"unknown evidence kind {kind!r}")

    def apply(self, action: Mapping) -> None:
        _strict(action, {"tick", "actor", "op", "args"}, "action")
        coord = self.coord
        tick, actor, op = int(action["tick"]), action.get("actor", ""), action["op"]
        args = dict(action.get("args", {}))
        if op not in OPS:
            raise ScenarioError(f"unknown op {op!r}")
        if tick < coord.now:
            raise ScenarioError(f"action at tick {tick} precedes the clock ({coord.now})")
        coord.advance_to(tick)
        try:
            if op == "register":
                coord.register(actor, int(args.get("balance", 0)))
            elif op == "deposit":
                coord.deposit(actor, int(args["amount"]))
            elif op == "request":
                rid = coord.post_request(actor, int(args["a"]), seed=args.get("seed"), servers=args.get("servers"))
                self.requests.append(rid)
            elif op == "respond":
                rid = args["request"]
                digests = {tag: hashlib.sha256(actor.encode() + op_.message).hexdigest()
                           for tag, op_ in coord.inbox(rid, actor).items()}
                coord.submit_response(actor, rid, digests)
            elif op == "accuse":
                coord.accuse(self._evidence(actor, args), zk=args.get("zk"))
            elif op == "aux":
                acc = coord.accusations[int(args["accusation"])]
                inbox = coord.inbox(acc.evidence.request_id, actor)
                if args.get("tamper"):
                    inbox = {t: Opener(o.message, bytes(16)) for t, o in inbox.items()}
                coord.provide_aux(actor, acc.id, inbox, proof=bool(args.get("proof", acc.zk)))
            elif op == "validate":
                coord.accusation_val(int(args["accusation"]))
            elif op == "claim":
                coord.claim_service_fee(actor, int(args["request"]))
        except (CoordinatorError, LedgerError, KeyError) as e:
            reason = f"unknown {e.args[0]!r}" if isinstance(e, KeyError) and e.args else str(e)
            coord.log_event("rejected", op=op, actor=actor, reason=reason)


def load_scenario(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    _strict(data, {"config", "actions"}, "scenario")
    return data


def replay(scenario: Mapping) -> Coordinator:
    _strict(scenario, {"config", "actions"}, "scenario")
    coord = ScenarioConfig.from_json(scenario.get("config", {})).build()
    run = Replay(coord)
    for action in scenario.get("actions", []):
        run.apply(action)
    return coord
