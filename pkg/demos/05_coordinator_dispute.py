"""Replay a scripted dispute through the coordinator and follow the money.

Two servers exchange keys for a request; one of them reports with a circuit
and evidence. The coordinator confirms, pays the reward out of the colluder's
deposit, and keeps every cent accounted for.
"""
from __future__ import annotations

from pathlib import Path

from pirdeter.replay import load_scenario, replay

golden = Path(__file__).resolve().parents[1] / "tests" / "golden"
for name in ("exchange_confirmed", "false_accusation", "trivial_circuit", "timeout_autoconfirm"):
    coord = replay(load_scenario(golden / f"{name}.json"))
    print(f"== {name}")
    for e in coord.events:
        if e["event"] in ("accuse", "resolved", "payment", "reward", "penalty", "framing_fine", "timeout"):
            extra = {k: v for k, v in e.items() if k in ("status", "kind", "amount", "src", "dst", "accuser", "accused")}
            print(f"  t={e.get('tick', '?'):>3} {e['event']:<13} {extra}")
