"""Run many rounds of service with different server populations.

Prescribed servers may attempt collusion but always deceive and report.
Grim-trigger servers collude loyally and shun anyone who reported them.
The simulation drives the real coordinator and tallies what happened.
"""
from __future__ import annotations

from pirdeter.simulator import DEVIANT, GRIM, PRESCRIBED, DeviantScript, SimConfig, run_simulation

loyal = DeviantScript(collude=True, amicable=True, report=False)
populations = {
    "all prescribed": SimConfig(runs=800, seed=1),
    "half loyal deviants": SimConfig(runs=800, seed=2, mix={PRESCRIBED: 0.5, DEVIANT: 0.5}, deviant=loyal),
    "grim, no reward": SimConfig(runs=800, seed=3, r=0, mix={GRIM: 1.0}),
}
keys = ("collusion_attempts", "unreported_successful_collusions", "confirmed_accusations", "money_residual")
for label, cfg in populations.items():
    agg = run_simulation(cfg).aggregate
    print(f"{label:<20} " + "  ".join(f"{k}={agg[k]}" for k in keys))
