"""Retrieve one row from a replicated database without any server learning which.

Each server gets a DPF key that looks random on its own. XOR-ing the server
answers yields the requested row; a pair of colluding servers that pool their
keys recovers the index, which is what the rest of the package deters.
"""
from __future__ import annotations

import numpy as np

from pirdeter.dpf import Database, expand, gen_2party_dpf, pir_roundtrip

rng = np.random.default_rng(7)
db = Database(tuple(int(v) for v in rng.integers(0, 2**32, 64)), entry_width=32)
target = 41

print(f"database: {db.N} rows of {db.entry_width} bits, fetching row {target}")
for servers in (2, 4, 8):
    got = pir_roundtrip(db, target, servers, seed=servers)
    print(f"  {servers} servers -> {got:#010x}  (true {db.rows[target]:#010x})")

pair = gen_2party_dpf(target, 64, seed=1)
left, right = expand(pair.key0), expand(pair.key1)
print(f"one key alone marks {int(left.sum())} of 64 positions: no hint of the index")
print(f"two pooled keys differ only at {np.flatnonzero(left ^ right).tolist()}: collusion reveals it")
