"""Public bulletin board with commitments, signatures and escrowed money.

Money is integer cents. Every mutation moves cents between two places
(an account's free balance, its locked balance, or a sink account), so the
total held equals the total ever minted, exactly.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

MIN_RANDOMNESS = 16


class LedgerError(ValueError):
    """Rejected ledger operation; the ledger state is left unchanged."""


class InsufficientFunds(LedgerError):
    pass


class BadSignature(LedgerError):
    pass


# ---------------------------------------------------------------------------
# Commitments


@dataclass(frozen=True)
class Opener:
    message: bytes
    randomness: bytes


@dataclass(frozen=True)
class Commitment:
    digest: bytes
    opener: Opener = field(repr=False, compare=False)


class CommitmentScheme(Protocol):
    name: str

    def digest(self, message: bytes, randomness: bytes) -> bytes: ...


class HashCommitment:
    """SHA-256 over a length-prefixed message followed by the randomness."""

    name = "sha256"

    def digest(self, message: bytes, randomness: bytes) -> bytes:
        h = hashlib.sha256()
        h.update(len(message).to_bytes(8, "big"))
        h.update(message)
        h.update(randomness)
        return h.digest()


DEFAULT_COMMITMENTS = HashCommitment()


def commit(message: bytes, randomness: bytes, scheme: CommitmentScheme = DEFAULT_COMMITMENTS) -> Commitment:
    if len(randomness) < MIN_RANDOMNESS:
        raise LedgerError(f"commitment randomness must be at least {MIN_RANDOMNESS} bytes")
    return Commitment(scheme.digest(message, randomness), Opener(message, randomness))


def verify_opening(
    digest: bytes, opener: Opener, scheme: CommitmentScheme = DEFAULT_COMMITMENTS
) -> bool:
    if len(opener.randomness) < MIN_RANDOMNESS:
        return False
    return hmac.compare_digest(digest, scheme.digest(opener.message, opener.randomness))


# ---------------------------------------------------------------------------
# Signatures


class SignatureScheme(Protocol):
    def keygen(self, owner: str) -> tuple[bytes, bytes]: ...

    def sign(self, secret: bytes, message: bytes) -> bytes: ...

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool: ...


class MacSignatures:
    """Keyed-MAC stand-in for signatures: deterministic, and the board holds the keys.

    Good enough for an in-process simulation where the board is trusted to
    check but never to forge.
    """

    def __init__(self, master: bytes = b"board-master-key") -> None:
        self._master = master

    def keygen(self, owner: str) -> tuple[bytes, bytes]:
        key = hmac.new(self._master, owner.encode(), hashlib.sha256).digest()
        return key, key

    def sign(self, secret: bytes, message: bytes) -> bytes:
        return hmac.new(secret, message, hashlib.sha256).digest()

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(public, message), signature)


def canonical(payload: Any) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def signed_message(poster: str, payload: Any) -> bytes:
    return poster.encode() + b"\x00" + canonical(payload)


# ---------------------------------------------------------------------------
# Accounts and board


@dataclass
class Account:
    id: str
    balance: int = 0
    locked: int = 0

    @property
    def total(self) -> int:
        return self.balance + self.locked


@dataclass(frozen=True)
class LedgerEntry:
    poster: str
    payload: Any
    signature: bytes
    tick: int = -1
    index: int = -1

    def to_json(self) -> dict:
        return {
            "kind": "entry",
            "index": self.index,
            "tick": self.tick,
            "poster": self.poster,
            "payload": self.payload,
            "signature": self.signature.hex(),
        }


def _check_amount(amount: int) -> None:
    if not isinstance(amount, int) or isinstance(amount, bool) or amount < 0:
        raise LedgerError(f"amounts are non-negative integer cents, got {amount!r}")


class Ledger:
    """Single-writer bulletin board plus escrow accounts."""

    def __init__(self, signatures: SignatureScheme | None = None) -> None:
        self.signatures = signatures or MacSignatures()
        self.accounts: dict[str, Account] = {}
        self.entries: list[LedgerEntry] = []
        self.public_keys: dict[str, bytes] = {}
        self.minted = 0
        self.tick = 0

    # identities -----------------------------------------------------------

    def register(self, owner: str, balance: int = 0) -> bytes:
        """Create an account funded with ``balance`` cents; returns the signing key."""
        _check_amount(balance)
        if owner in self.accounts:
            raise LedgerError(f"account {owner!r} already exists")
        secret, public = self.signatures.keygen(owner)
        self.public_keys[owner] = public
        self.accounts[owner] = Account(owner, balance)
        self.minted += balance
        return secret

    def account(self, owner: str) -> Account:
        try:
            return self.accounts[owner]
        except KeyError:
            raise LedgerError(f"unknown account {owner!r}") from None

    def sign(self, secret: bytes, poster: str, payload: Any) -> bytes:
        return self.signatures.sign(secret, signed_message(poster, payload))

    # board ------------------------------------------------------------------

    def post(self, entry: LedgerEntry) -> int:
        public = self.public_keys.get(entry.poster)
        if public is None or not self.signatures.verify(
            public, signed_message(entry.poster, entry.payload), entry.signature
        ):
            raise BadSignature(f"signature check failed for poster {entry.poster!r}")
        index = len(self.entries)
        self.entries.append(
            LedgerEntry(entry.poster, json.loads(canonical(entry.payload)), entry.signature, self.tick, index)
        )
        return index

    # money ------------------------------------------------------------------

    def transfer(self, src: str, dst: str, amount: int) -> None:
        _check_amount(amount)
        a, b = self.account(src), self.account(dst)
        if a.balance < amount:
            raise InsufficientFunds(f"{src} holds {a.balance}, needs {amount}")
        a.balance -= amount
        b.balance += amount

    def lock(self, owner: str, amount: int) -> None:
        _check_amount(amount)
        a = self.account(owner)
        if a.balance < amount:
            raise InsufficientFunds(f"{owner} holds {a.balance}, cannot lock {amount}")
        a.balance -= amount
        a.locked += amount

    def unlock(self, owner: str, amount: int) -> None:
        _check_amount(amount)
        a = self.account(owner)
        if a.locked < amount:
            raise InsufficientFunds(f"{owner} has {a.locked} locked, cannot release {amount}")
        a.locked -= amount
        a.balance += amount

    def slash(self, owner: str, amount: int, sink: str) -> None:
        """Move locked funds of ``owner`` to the free balance of ``sink``."""
        _check_amount(amount)
        a, s = self.account(owner), self.account(sink)
        if a.locked < amount:
            raise InsufficientFunds(f"{owner} has {a.locked} locked, cannot slash {amount}")
        a.locked -= amount
        s.balance += amount

    def total(self) -> int:
        return sum(a.total for a in self.accounts.values())

    def conservation_residual(self) -> int:
        return self.total() - self.minted

    # persistence --------------------------------------------------------------

    def dump(self, path: str | Path) -> None:
        lines = [json.dumps({"kind": "meta", "minted": self.minted, "tick": self.tick})]
        for a in self.accounts.values():
            lines.append(json.dumps({"kind": "account", "id": a.id, "balance": a.balance, "locked": a.locked}))
        lines += [json.dumps(e.to_json(), sort_keys=True) for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def restore(cls, path: str | Path, signatures: SignatureScheme | None = None) -> Ledger:
        led = cls(signatures)
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "meta":
                led.minted, led.tick = rec["minted"], rec["tick"]
            elif kind == "account":
                _, public = led.signatures.keygen(rec["id"])
                led.public_keys[rec["id"]] = public
                led.accounts[rec["id"]] = Account(rec["id"], rec["balance"], rec["locked"])
            elif kind == "entry":
                entry = LedgerEntry(rec["poster"], rec["payload"], bytes.fromhex(rec["signature"]))
                public = led.public_keys.get(entry.poster)
                if public is None or not led.signatures.verify(
                    public, signed_message(entry.poster, entry.payload), entry.signature
                ):
                    raise BadSignature(f"entry {rec['index']} fails signature check")
                if rec["index"] != len(led.entries):
                    raise LedgerError("entries out of order")
                led.entries.append(LedgerEntry(entry.poster, entry.payload, entry.signature, rec["tick"], rec["index"]))
            else:
                raise LedgerError(f"unknown record kind {kind!r}")
        return led
