"""Pick service fee, reward, penalty and framing fine so honest play is rational.

The five inequalities must hold together. This walks through a failing
assignment, a repaired one, and a constructed witness for a large network.
"""
from __future__ import annotations

from fractions import Fraction as F

from pirdeter.incentives import IncentiveParams, check_feasibility, compute_q, feasible_witness


def show(label, params, ell, k):
    rep = check_feasibility(params, ell, k)
    print(f"{label}: {'feasible' if rep.passed else 'infeasible'} (q = {float(rep.q):.6f})")
    for res in rep.results:
        mark = "ok " if res.passed else "BAD"
        print(f"  [{mark}] ({res.id}) {res.text:<28} margin {res.margin}")


base = IncentiveParams(s=1, r=1, p=4, f="3.1", V=F(21, 10), delta="0.99", xi="0.999")
show("s = r", base, ell=1000, k=2)
show("s nudged above r", base.with_(s="1.01"), ell=1000, k=2)
show("same values, smaller network", base.with_(s="1.01"), ell=200, k=2)

print()
for ell in (10, 1000, 100_000):
    w = feasible_witness(ell, 2, V=100, delta="0.99")
    print(f"ell={ell:>6}: re-meeting q={float(compute_q(ell, 2)):.6f}", end="  ")
    print("witness:", None if w is None else {n: f"{float(getattr(w, n)):.3f}" for n in "srpf"})
