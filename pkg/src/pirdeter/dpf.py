"""Distributed point functions and the multi-server PIR built on them.

Two-party DPF keys follow the tree construction with one seed and one
control bit per level. Full-domain expansion walks the tree level by level
with numpy so that a 1024-entry domain costs ten vectorized PRG calls.

The k-server scheme (k = 2^K) hands every server one key from each of K
independent pairs. A server packs the K expanded bits at index i into a
selector and XORs word ``selector`` of row i into its answer, skipping rows
whose selector is 0. At the target index the selectors of the k servers
are pairwise distinct, everywhere else they agree.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

SEED_BYTES = 16


class DpfError(ValueError):
    """Raised on malformed keys, bad indices or geometry mismatches."""


# ---------------------------------------------------------------------------
# PRGs


class Prg(Protocol):
    name: str

    def expand(self, seeds: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Map (m, 16) seeds to (left seeds, left bits, right seeds, right bits)."""
        ...


def _split_bit(block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bits = block[:, 0] & 1
    block = block.copy()
    block[:, 0] &= 0xFE
    return block, bits


class AesPrg:
    """Fixed-key AES in Matyas-Meyer-Oseas mode, one key per child."""

    name = "aes"

    def __init__(self) -> None:
        keys = [hashlib.sha256(f"dpf-prg-{side}".encode()).digest()[:16] for side in "LR"]
        self._ciphers = [Cipher(algorithms.AES(k), modes.ECB()) for k in keys]

    def _mmo(self, idx: int, seeds: np.ndarray) -> np.ndarray:
        enc = self._ciphers[idx].encryptor()
        out = enc.update(seeds.tobytes()) + enc.finalize()
        return np.frombuffer(out, dtype=np.uint8).reshape(seeds.shape) ^ seeds

    def expand(self, seeds):
        left, tl = _split_bit(self._mmo(0, seeds))
        right, tr = _split_bit(self._mmo(1, seeds))
        return left, tl, right, tr


class HashPrg:
    """SHA-256 based PRG; slower, but independent of the AES backend."""

    name = "sha256"

    def expand(self, seeds):
        out = np.empty((seeds.shape[0], 32), dtype=np.uint8)
        for i, row in enumerate(seeds):
            out[i] = np.frombuffer(hashlib.sha256(b"dpf" + row.tobytes()).digest(), dtype=np.uint8)
        left, tl = _split_bit(out[:, :16])
        right, tr = _split_bit(out[:, 16:])
        return left, tl, right, tr


_PRGS: dict[str, Prg] = {}


def get_prg(name: str) -> Prg:
    if name not in _PRGS:
        if name == "aes":
            _PRGS[name] = AesPrg()
        elif name == "sha256":
            _PRGS[name] = HashPrg()
        else:
            raise DpfError(f"unknown PRG {name!r}")
    return _PRGS[name]


def _rng_bytes(seed) -> callable:
    if seed is None:
        return os.urandom
    rng = np.random.default_rng(seed)
    return rng.bytes


# ---------------------------------------------------------------------------
# Two-party DPF


@dataclass(frozen=True)
class DpfKey:
    party: int
    domain_size: int
    depth: int
    root: bytes
    cw_seeds: tuple[bytes, ...]
    cw_left: tuple[int, ...]
    cw_right: tuple[int, ...]
    cw_out: int
    prg: str = "aes"

    def to_bytes(self) -> bytes:
        head = struct.pack(">BIB B", self.party, self.domain_size, self.depth, self.cw_out)
        prg = self.prg.encode()
        body = bytearray(head + bytes([len(prg)]) + prg + self.root)
        for s, l, r in zip(self.cw_seeds, self.cw_left, self.cw_right):
            body += s + bytes([(l << 1) | r])
        return bytes(body)

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple[DpfKey, int]:
        """Parse one key; returns the key and the number of bytes consumed."""
        try:
            party, n, depth, cw_out = struct.unpack_from(">BIB B", data, 0)
            pos = 7
            plen = data[pos]
            prg = data[pos + 1 : pos + 1 + plen].decode()
            pos += 1 + plen
            root = data[pos : pos + SEED_BYTES]
            pos += SEED_BYTES
            seeds, lefts, rights = [], [], []
            for _ in range(depth):
                seeds.append(data[pos : pos + SEED_BYTES])
                flags = data[pos + SEED_BYTES]
                lefts.append(flags >> 1)
                rights.append(flags & 1)
                pos += SEED_BYTES + 1
        except (IndexError, struct.error, UnicodeDecodeError) as exc:
            raise DpfError("truncated DPF key") from exc
        if len(root) != SEED_BYTES or any(len(s) != SEED_BYTES for s in seeds):
            raise DpfError("truncated DPF key")
        key = cls(party, n, depth, root, tuple(seeds), tuple(lefts), tuple(rights), cw_out, prg)
        return key, pos


@dataclass(frozen=True)
class DpfKeyPair:
    key0: DpfKey
    key1: DpfKey
    domain_size: int
    target_index: int


def _depth(n: int) -> int:
    return max(1, (n - 1).bit_length())


def gen_2party_dpf(a: int, N: int, seed=None, prg: str = "aes") -> DpfKeyPair:
    """Generate keys sharing the point function that is 1 at ``a``."""
    if N < 1:
        raise DpfError("domain size must be positive")
    if not 0 <= a < N:
        raise DpfError(f"index {a} outside [0, {N})")
    g = get_prg(prg)
    rand = _rng_bytes(seed)
    depth = _depth(N)
    seeds = np.frombuffer(rand(2 * SEED_BYTES), dtype=np.uint8).reshape(2, SEED_BYTES).copy()
    roots = (seeds[0].tobytes(), seeds[1].tobytes())
    t = np.array([0, 1], dtype=np.uint8)
    cw_s, cw_l, cw_r = [], [], []
    for level in range(depth):
        bit = (a >> (depth - 1 - level)) & 1
        sl, tl, sr, tr = g.expand(seeds)
        keep_s, lose_s = (sr, sl) if bit else (sl, sr)
        scw = lose_s[0] ^ lose_s[1]
        tlcw = int(tl[0] ^ tl[1] ^ bit ^ 1)
        trcw = int(tr[0] ^ tr[1] ^ bit)
        keep_t = tr if bit else tl
        keep_cw = trcw if bit else tlcw
        seeds = keep_s ^ (t[:, None] * scw[None, :])
        t = keep_t ^ (t & keep_cw)
        cw_s.append(scw.tobytes())
        cw_l.append(tlcw)
        cw_r.append(trcw)
    out = int((seeds[0, 0] & 1) ^ (seeds[1, 0] & 1) ^ 1)
    keys = [
        DpfKey(b, N, depth, roots[b], tuple(cw_s), tuple(cw_l), tuple(cw_r), out, prg)
        for b in (0, 1)
    ]
    return DpfKeyPair(keys[0], keys[1], N, a)


def expand(key: DpfKey) -> np.ndarray:
    """Evaluate ``key`` on every index of its domain; returns N uint8 bits."""
    return _expand_cached(key).copy()


@functools.lru_cache(maxsize=256)
def _expand_cached(key: DpfKey) -> np.ndarray:
    g = get_prg(key.prg)
    seeds = np.frombuffer(key.root, dtype=np.uint8).reshape(1, SEED_BYTES).copy()
    t = np.array([key.party], dtype=np.uint8)
    for level in range(key.depth):
        scw = np.frombuffer(key.cw_seeds[level], dtype=np.uint8)
        sl, tl, sr, tr = g.expand(seeds)
        corr = t[:, None] * scw[None, :]
        sl ^= corr
        sr ^= corr
        tl = tl ^ (t & key.cw_left[level])
        tr = tr ^ (t & key.cw_right[level])
        seeds = np.empty((2 * sl.shape[0], SEED_BYTES), dtype=np.uint8)
        seeds[0::2], seeds[1::2] = sl, sr
        t = np.empty(2 * tl.shape[0], dtype=np.uint8)
        t[0::2], t[1::2] = tl, tr
    bits = (seeds[:, 0] & 1) ^ (t & key.cw_out)
    bits = bits[: key.domain_size]
    bits.setflags(write=False)
    return bits


def eval_point(key: DpfKey, x: int) -> int:
    """Evaluate ``key`` at a single index by walking one root-to-leaf path."""
    if not 0 <= x < key.domain_size:
        raise DpfError(f"index {x} outside domain")
    g = get_prg(key.prg)
    seed = np.frombuffer(key.root, dtype=np.uint8).reshape(1, SEED_BYTES).copy()
    t = key.party
    for level in range(key.depth):
        bit = (x >> (key.depth - 1 - level)) & 1
        sl, tl, sr, tr = g.expand(seed)
        s, tb = (sr, int(tr[0])) if bit else (sl, int(tl[0]))
        if t:
            s = s ^ np.frombuffer(key.cw_seeds[level], dtype=np.uint8)[None, :]
            tb ^= key.cw_right[level] if bit else key.cw_left[level]
        seed, t = s, tb
    return int(seed[0, 0] & 1) ^ (t & key.cw_out)


# ---------------------------------------------------------------------------
# Database


@dataclass(frozen=True)
class Database:
    """N rows of ``entry_width`` bits, split into ``word_count`` equal words.

    Rows are zero-padded on the high side so that the padded width divides
    evenly into words; word m (1-based) holds bits [(m-1)w, m w).
    """

    rows: tuple[int, ...]
    entry_width: int
    word_count: int = 1

    def __post_init__(self):
        if self.N < 1:
            raise DpfError("database needs at least one row")
        if self.entry_width < 1 or self.word_count < 1:
            raise DpfError("entry width and word count must be positive")
        limit = 1 << self.entry_width
        if any(not 0 <= r < limit for r in self.rows):
            raise DpfError("row wider than entry_width")

    @property
    def N(self) -> int:
        return len(self.rows)

    @property
    def word_width(self) -> int:
        return -(-self.entry_width // self.word_count)

    @property
    def padded_width(self) -> int:
        return self.word_width * self.word_count

    def with_word_count(self, word_count: int) -> Database:
        return Database(self.rows, self.entry_width, word_count)

    def word(self, i: int, m: int) -> int:
        if m == 0:
            return 0
        w = self.word_width
        return (self.rows[i] >> ((m - 1) * w)) & ((1 << w) - 1)

    def word_table(self) -> np.ndarray:
        """(N, word_count + 1, nbytes) table; slot 0 is the all-zero word."""
        nbytes = -(-self.word_width // 8)
        cached = self.__dict__.get("_table")
        if cached is not None:
            return cached
        table = np.zeros((self.N, self.word_count + 1, nbytes), dtype=np.uint8)
        for i in range(self.N):
            for m in range(1, self.word_count + 1):
                table[i, m] = np.frombuffer(self.word(i, m).to_bytes(nbytes, "big"), dtype=np.uint8)
        object.__setattr__(self, "_table", table)
        return table

    @classmethod
    def random(cls, N: int, entry_width: int, seed=None, word_count: int = 1) -> Database:
        rng = np.random.default_rng(seed)
        nbytes = -(-entry_width // 8)
        mask = (1 << entry_width) - 1
        rows = tuple(int.from_bytes(rng.bytes(nbytes), "big") & mask for _ in range(N))
        return cls(rows, entry_width, word_count)


def save_database(db: Database, path: str | Path) -> Path:
    """Write raw fixed-width rows plus a ``.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    nbytes = -(-db.entry_width // 8)
    path.write_bytes(b"".join(r.to_bytes(nbytes, "big") for r in db.rows))
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"N": db.N, "entry_width_bits": db.entry_width}))
    return sidecar


def load_database(path: str | Path, sidecar: str | Path | None = None) -> Database:
    path = Path(path)
    sidecar = Path(sidecar) if sidecar else path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text())
    if set(meta) != {"N", "entry_width_bits"}:
        raise DpfError(f"sidecar fields must be N and entry_width_bits, got {sorted(meta)}")
    n, width = int(meta["N"]), int(meta["entry_width_bits"])
    nbytes = -(-width // 8)
    raw = path.read_bytes()
    if len(raw) != n * nbytes:
        raise DpfError(f"expected {n * nbytes} bytes, found {len(raw)}")
    rows = tuple(int.from_bytes(raw[i * nbytes : (i + 1) * nbytes], "big") for i in range(n))
    return Database(rows, width)


# ---------------------------------------------------------------------------
# k-server PIR


@dataclass(frozen=True)
class PirConfig:
    """Protocol scalars. ``delta`` and ``delta_star`` are logical-tick windows."""

    ell: int
    k: int
    N: int
    omega: int = 1
    delta: int = 100
    delta_star: int = 100
    prg: str = "aes"

    def __post_init__(self):
        if not 2 <= self.k <= self.ell:
            raise DpfError(f"need 2 <= k <= ell, got k={self.k}, ell={self.ell}")
        if self.omega < 1:
            raise DpfError("omega must be at least 1")
        if self.delta <= 0 or self.delta_star <= 0:
            raise DpfError("windows must be positive")
        if self.N < 1:
            raise DpfError("N must be positive")


@dataclass(frozen=True)
class DpfKeyBundle:
    server_index: int
    keys: tuple[DpfKey, ...]
    selector_at_a: int = field(default=-1, compare=False)

    def to_bytes(self) -> bytes:
        body = bytearray(struct.pack(">HB", self.server_index, len(self.keys)))
        for key in self.keys:
            body += key.to_bytes()
        return bytes(body)

    @classmethod
    def from_bytes(cls, data: bytes) -> DpfKeyBundle:
        try:
            j, count = struct.unpack_from(">HB", data, 0)
        except struct.error as exc:
            raise DpfError("truncated bundle") from exc
        pos, keys = 3, []
        for _ in range(count):
            key, used = DpfKey.from_bytes(data[pos:])
            keys.append(key)
            pos += used
        if pos != len(data):
            raise DpfError("trailing bytes in bundle")
        return cls(j, tuple(keys))

    def selectors(self) -> np.ndarray:
        """Per-index K-bit selector; key i supplies bit i."""
        sel = np.zeros(self.keys[0].domain_size, dtype=np.int64)
        for i, key in enumerate(self.keys):
            sel |= _expand_cached(key).astype(np.int64) << i
        return sel


@dataclass(frozen=True)
class Query:
    server_index: int
    payload: bytes


@dataclass(frozen=True)
class Response:
    server_index: int
    word: int
    width: int


@dataclass(frozen=True)
class ReconstructionMap:
    """Which server skips row a, and which word every other server adds."""

    zero_server: int
    word_of_server: dict[int, int]
    word_count: int


def _log2_servers(k: int) -> int:
    if k < 2 or k & (k - 1):
        raise DpfError(f"k must be a power of two >= 2, got {k}")
    return k.bit_length() - 1


def query_gen(a: int, cfg: PirConfig, seed=None) -> tuple[list[DpfKeyBundle], ReconstructionMap]:
    """Generate one bundle per server for index ``a``."""
    K = _log2_servers(cfg.k)
    if not 0 <= a < cfg.N:
        raise DpfError(f"index {a} outside [0, {cfg.N})")
    rng = np.random.default_rng(seed) if seed is not None else None
    pairs = []
    for _ in range(K):
        sub = None if rng is None else int(rng.integers(0, 2**63))
        pairs.append(gen_2party_dpf(a, cfg.N, sub, cfg.prg))
    base = sum(eval_point(p.key0, a) << i for i, p in enumerate(pairs))
    bundles = []
    for j in range(cfg.k):
        keys = tuple(p.key1 if (j >> i) & 1 else p.key0 for i, p in enumerate(pairs))
        bundles.append(DpfKeyBundle(j, keys, base ^ j))
    words = {j: base ^ j for j in range(cfg.k) if base ^ j}
    return bundles, ReconstructionMap(zero_server=base, word_of_server=words, word_count=cfg.k - 1)


def server_eval(bundle: DpfKeyBundle, db: Database) -> Response:
    """XOR word ``selector[i]`` of every row i; selector 0 contributes nothing."""
    if bundle.keys[0].domain_size != db.N:
        raise DpfError("bundle domain does not match database size")
    if (1 << len(bundle.keys)) - 1 != db.word_count:
        raise DpfError(f"database split into {db.word_count} words, bundle addresses {(1 << len(bundle.keys)) - 1}")
    table = db.word_table()
    picked = table[np.arange(db.N), bundle.selectors()]
    acc = np.bitwise_xor.reduce(picked, axis=0)
    return Response(bundle.server_index, int.from_bytes(acc.tobytes(), "big"), db.word_width)


def reconstruct(responses: list[Response], rmap: ReconstructionMap, entry_width: int | None = None) -> int:
    """Recover row a from one response per server."""
    by_server = {r.server_index: r for r in responses}
    expected = {rmap.zero_server, *rmap.word_of_server}
    if set(by_server) != expected:
        missing = sorted(expected - set(by_server))
        extra = sorted(set(by_server) - expected)
        raise DpfError(f"response set mismatch: missing {missing}, unexpected {extra}")
    widths = {r.width for r in responses}
    if len(widths) != 1:
        raise DpfError("responses disagree on word width")
    w = widths.pop()
    zero = by_server[rmap.zero_server].word
    entry = 0
    for j, m in rmap.word_of_server.items():
        entry |= (zero ^ by_server[j].word) << ((m - 1) * w)
    if entry_width is not None:
        entry &= (1 << entry_width) - 1
    return entry


def pir_roundtrip(db: Database, a: int, k: int, seed=None, prg: str = "aes") -> int:
    """Convenience: split ``db`` for k servers, query index a, reconstruct."""
    cfg = PirConfig(ell=k, k=k, N=db.N, prg=prg)
    split = db.with_word_count(k - 1)
    bundles, rmap = query_gen(a, cfg, seed)
    return reconstruct([server_eval(b, split) for b in bundles], rmap, db.entry_width)


def encode_query(bundle: DpfKeyBundle) -> Query:
    return Query(bundle.server_index, bundle.to_bytes())


def decode_query(query: Query) -> DpfKeyBundle:
    bundle = DpfKeyBundle.from_bytes(query.payload)
    if bundle.server_index != query.server_index:
        raise DpfError("query addressed to a different server")
    return bundle


# ---------------------------------------------------------------------------
# XOR-PIR baseline


@dataclass(frozen=True)
class XorQuery:
    index_set: frozenset[int]


def xor_query_gen(a: int, N: int, seed=None, parts: int = 2) -> tuple[XorQuery, ...]:
    """Split the singleton {a} into ``parts`` uniformly random XOR shares."""
    if not 0 <= a < N:
        raise DpfError(f"index {a} outside [0, {N})")
    if parts < 2:
        raise DpfError("need at least two shares")
    rng = np.random.default_rng(seed)
    shares = [frozenset(np.flatnonzero(rng.integers(0, 2, N)).tolist()) for _ in range(parts - 1)]
    last = frozenset({a})
    for s in shares:
        last = last ^ s
    return tuple(XorQuery(s) for s in (*shares, last))


def xor_server_eval(query: XorQuery, db: Database) -> int:
    acc = 0
    for i in query.index_set:
        acc ^= db.rows[i]
    return acc


def xor_reconstruct(answers: list[int]) -> int:
    acc = 0
    for ans in answers:
        acc ^= ans
    return acc
