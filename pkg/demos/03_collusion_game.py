"""Solve the one-shot collusion game exactly and check candidate profiles.

Each server chooses whether to collude, whether to be amicable or deceitful,
and whether to report. Backward induction over exact fractions shows that
honest reporting is the only outcome once the penalty is positive.
"""
from __future__ import annotations

from pirdeter.games import BAD, GOOD, build_game, solve_spe, spe_projections, uniform_profile, verify_spe
from pirdeter.incentives import IncentiveParams

params = IncentiveParams(s=1, r="0.5", p=200, f=200, V=100)
for k in (2, 3):
    for case in (GOOD, BAD):
        spes = solve_spe(build_game(k, params, case))
        print(f"k={k} {case:<4}: {len(spes):>3} subgame-perfect profiles, stage-1/2 outcomes {sorted(spe_projections(spes))}")

tree = build_game(2, params)
loyal = uniform_profile(2, collude=True, amicable=True, report=False)
check = verify_spe(tree, loyal)
w = check.witness
print(f"\n'collude, stay loyal, never report' is an equilibrium? {bool(check)}")
print(f"  deviation at {w.node}: play {w.better} instead of {w.action}, gain {w.gain} ({w.kind})")

no_penalty = solve_spe(build_game(2, params.with_(p=0, r=0)))
print(f"\nwithout penalty or reward: {len(no_penalty)} equilibria, outcomes {sorted(spe_projections(no_penalty))}")
