"""Compare the blind-collusion closed forms against exhaustive enumeration.

Cheating servers that cannot verify each other's input guess an index from a
prior and redirect. Enumerating every choice gives exact probabilities that
the user still receives the right row; the printed closed forms are checked
against those, along with the re-derived versions that match exactly.
"""
from __future__ import annotations

from fractions import Fraction as F

from pirdeter.blind import blind_bruteforce, blind_p1, blind_p2, corrected_p1, corrected_p2

priors = {"uniform(2)": [F(1, 2)] * 2, "skewed(4)": [F(1, 2), F(1, 4), F(1, 8), F(1, 8)]}
for name, x in priors.items():
    one = blind_bruteforce(len(x), 1, x, 0)
    two = blind_bruteforce(len(x), 2, x, 0)
    print(f"prior {name}, target index 0")
    print(f"  one cheater : closed form {blind_p1(x, 0)}, re-derived {corrected_p1(x, 0)}, enumeration {one.single}")
    lit, cor = blind_p2(x, 0), corrected_p2(x, 0)
    print(f"  two cheaters: closed form {tuple(map(str, lit))}")
    print(f"                re-derived  {tuple(map(str, cor))}")
    print(f"                enumeration ({two.single}, {two.recovered}, {two.other_single})")

big = blind_bruteforce(4, 4, priors["skewed(4)"], 0, mode="sampled", draws=100_000, seed=3)
print(f"\nfour cheaters, sampled: recovered {big.recovered.value:.4f} in [{big.recovered.low:.4f}, {big.recovered.high:.4f}]")
