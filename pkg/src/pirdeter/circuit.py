"""A small expression language for collusion-evidence circuits.

Expressions are Python syntax restricted to integer arithmetic, bitwise
operators, comparisons and a handful of builtins. Parsing goes through the
standard ``ast`` module and every node type is whitelisted, so nothing is
ever handed to ``eval``.

Triviality (is the output constant?) is decided by exhaustive vectorized
evaluation whenever the referenced inputs span at most 2^20 points, and by
random sampling otherwise. Sampling can only prove non-triviality; when it
cannot, the verdict is UNKNOWN and callers treat it as non-trivial.
"""

from __future__ import annotations

import ast
import enum
import functools
import itertools
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

EXHAUSTIVE_LIMIT = 1 << 20


class CircuitError(ValueError):
    pass


class Verdict(enum.Enum):
    TRIVIAL = "trivial"
    NON_TRIVIAL = "non_trivial"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class Domain:
    """``bits`` (0..2^w-1), ``range`` (0..n-1) or ``query`` (opaque bytes)."""

    kind: str
    param: int = 0

    def __post_init__(self):
        if self.kind not in ("bits", "range", "query"):
            raise CircuitError(f"unknown domain kind {self.kind!r}")
        if self.kind != "query" and self.param < 1:
            raise CircuitError("domain parameter must be positive")

    @property
    def size(self) -> int | None:
        if self.kind == "bits":
            return 1 << self.param
        if self.kind == "range":
            return self.param
        return None

    @classmethod
    def parse(cls, raw: Any) -> Domain:
        if isinstance(raw, Domain):
            return raw
        if raw == "query":
            return cls("query")
        if isinstance(raw, Mapping) and len(raw) == 1:
            (kind, param), = raw.items()
            return cls(kind, int(param))
        raise CircuitError(f"bad domain {raw!r}")

    def to_json(self) -> Any:
        return "query" if self.kind == "query" else {self.kind: self.param}


_BINOPS = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
    ast.Mod: lambda a, b: a % b,
    ast.FloorDiv: lambda a, b: a // b,
    ast.BitXor: lambda a, b: a ^ b,
    ast.BitAnd: lambda a, b: a & b,
    ast.BitOr: lambda a, b: a | b,
    ast.LShift: lambda a, b: a << b,
    ast.RShift: lambda a, b: a >> b,
}

_CMPOPS = {
    ast.Eq: lambda a, b: a == b,
    ast.NotEq: lambda a, b: a != b,
    ast.Lt: lambda a, b: a < b,
    ast.LtE: lambda a, b: a <= b,
    ast.Gt: lambda a, b: a > b,
    ast.GtE: lambda a, b: a >= b,
}


def _as_int(v):
    if isinstance(v, np.ndarray):
        return v.astype(np.int64)
    return int(v)


def _bit(x, i):
    return (x >> i) & 1


def _to_int(x):
    if isinstance(x, (bytes, bytearray)):
        return int.from_bytes(x, "big")
    return x


def _pir_index(q1, q2):
    """Index where two DPF query bundles expand differently, or -1."""
    from .dpf import DpfError, DpfKeyBundle

    try:
        s1 = DpfKeyBundle.from_bytes(bytes(q1)).selectors()
        s2 = DpfKeyBundle.from_bytes(bytes(q2)).selectors()
    except (DpfError, TypeError, ValueError, IndexError):
        return -1
    if s1.shape != s2.shape:
        return -1
    diff = np.flatnonzero(s1 != s2)
    return int(diff[0]) if diff.size == 1 else -1


BUILTINS = {
    "bit": (2, _bit),
    "to_int": (1, _to_int),
    "min": (2, lambda a, b: np.minimum(a, b) if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else min(a, b)),
    "max": (2, lambda a, b: np.maximum(a, b) if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else max(a, b)),
    "pir_index": (2, _pir_index),
}
# builtins that only make sense on opaque query values
_SCALAR_ONLY = {"pir_index", "to_int"}


@dataclass(frozen=True)
class Circuit:
    inputs: tuple[tuple[str, Domain], ...]
    expr: str

    def __post_init__(self):
        names = [n for n, _ in self.inputs]
        if len(set(names)) != len(names):
            raise CircuitError("duplicate input names")
        object.__setattr__(self, "_tree", _parse(self.expr, set(names)))

    @classmethod
    def build(cls, expr: str, **domains: Any) -> Circuit:
        return cls(tuple((n, Domain.parse(d)) for n, d in domains.items()), expr)

    @classmethod
    def from_json(cls, data: Mapping) -> Circuit:
        if set(data) != {"inputs", "expr"}:
            raise CircuitError(f"circuit fields are inputs and expr, got {sorted(data)}")
        return cls(tuple((n, Domain.parse(d)) for n, d in data["inputs"].items()), data["expr"])

    def to_json(self) -> dict:
        return {"inputs": {n: d.to_json() for n, d in self.inputs}, "expr": self.expr}

    @property
    def arity(self) -> int:
        return len(self.inputs)

    @property
    def domains(self) -> dict[str, Domain]:
        return dict(self.inputs)

    @property
    def referenced(self) -> tuple[str, ...]:
        """Declared inputs that appear in the expression, in declaration order."""
        used = {n.id for n in ast.walk(self._tree) if isinstance(n, ast.Name)}
        return tuple(n for n, _ in self.inputs if n in used)

    def evaluate(self, values: Mapping[str, Any]):
        missing = set(self.referenced) - set(values)
        if missing:
            raise CircuitError(f"missing inputs {sorted(missing)}")
        return _eval(self._tree.body, values)

    def output_range(self) -> frozenset[int] | None:
        """A finite superset of possible outputs when one is easy to see."""
        return _range(self._tree.body, self.domains)


def _parse(expr: str, names: set[str]) -> ast.Expression:
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise CircuitError(f"cannot parse {expr!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load)) or type(node) in _BINOPS or type(node) in _CMPOPS:
            continue
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise CircuitError(f"operator {type(node.op).__name__} not allowed")
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.Invert, ast.Not, ast.USub)):
                raise CircuitError(f"operator {type(node.op).__name__} not allowed")
        elif isinstance(node, (ast.Invert, ast.Not, ast.USub)):
            pass
        elif isinstance(node, ast.Compare):
            if len(node.ops) != 1:
                raise CircuitError("chained comparisons not allowed")
        elif isinstance(node, ast.Constant):
            if not isinstance(node.value, int) or isinstance(node.value, bool):
                raise CircuitError("only integer constants allowed")
        elif isinstance(node, ast.Name):
            if node.id not in names and node.id not in BUILTINS:
                raise CircuitError(f"undeclared input {node.id!r}")
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in BUILTINS:
                raise CircuitError("only builtin calls allowed")
            if node.keywords or len(node.args) != BUILTINS[node.func.id][0]:
                raise CircuitError(f"{node.func.id} takes {BUILTINS[node.func.id][0]} arguments")
        else:
            raise CircuitError(f"syntax {type(node).__name__} not allowed")
    for node in ast.walk(tree):
        if isinstance(node, ast.Name) and node.id in BUILTINS and node.id in names:
            raise CircuitError(f"input name {node.id!r} shadows a builtin")
    return tree


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.Name):
        return env[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        if isinstance(node.op, ast.Invert):
            return ~v
        if isinstance(node.op, ast.USub):
            return -v
        return _as_int(v == 0)
    if isinstance(node, ast.Compare):
        out = _CMPOPS[type(node.ops[0])](_eval(node.left, env), _eval(node.comparators[0], env))
        return _as_int(out)
    if isinstance(node, ast.Call):
        fn = BUILTINS[node.func.id][1]
        return fn(*(_eval(a, env) for a in node.args))
    raise CircuitError(f"cannot evaluate {type(node).__name__}")  # unreachable after _parse


def _range(node, domains) -> frozenset[int] | None:
    if isinstance(node, ast.Constant):
        return frozenset({node.value})
    if isinstance(node, (ast.Compare,)) or (isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not)):
        return frozenset({0, 1})
    if isinstance(node, ast.Call) and node.func.id == "bit":
        return frozenset({0, 1})
    if isinstance(node, ast.Name):
        d = domains.get(node.id)
        if d is not None and d.size is not None and d.size <= 64:
            return frozenset(range(d.size))
        return None
    if isinstance(node, ast.BinOp):
        left, right = _range(node.left, domains), _range(node.right, domains)
        if isinstance(node.op, ast.BitAnd):
            for other in (node.right, node.left):
                if isinstance(other, ast.Constant) and 0 <= other.value <= 64:
                    return frozenset(range(other.value + 1))
        if isinstance(node.op, ast.Mod) and isinstance(node.right, ast.Constant) and 0 < node.right.value <= 64:
            return frozenset(range(node.right.value))
        if left is not None and right is not None and len(left) * len(right) <= 4096:
            try:
                return frozenset(_BINOPS[type(node.op)](a, b) for a in left for b in right)
            except (ZeroDivisionError, ValueError):
                return None
    return None


@functools.lru_cache(maxsize=1024)
def triviality(circuit: Circuit, budget: int = 4096, seed: int = 0) -> Verdict:
    """Decide whether the circuit's output is constant over its declared domain.

    Deterministic in its arguments, so verdicts are memoized per circuit.
    """
    refs = circuit.referenced
    doms = circuit.domains
    if not refs:
        return Verdict.TRIVIAL
    sizes = [doms[n].size for n in refs]
    if all(s is not None for s in sizes) and np.prod([float(s) for s in sizes]) <= EXHAUSTIVE_LIMIT:
        if not any(isinstance(n, ast.Call) and n.func.id in _SCALAR_ONLY for n in ast.walk(circuit._tree)):
            grids = np.meshgrid(*[np.arange(s, dtype=np.int64) for s in sizes], indexing="ij")
            env = {n: g.ravel() for n, g in zip(refs, grids)}
            with np.errstate(all="ignore"):
                out = np.asarray(_eval(circuit._tree.body, env))
            if out.ndim == 0:
                return Verdict.TRIVIAL
            return Verdict.TRIVIAL if np.all(out == out.flat[0]) else Verdict.NON_TRIVIAL
        points = itertools.product(*[range(s) for s in sizes])
        return _scan(circuit, refs, (dict(zip(refs, p)) for p in points), exhaustive=True)
    rng = np.random.default_rng(seed)

    def draw():
        for _ in range(budget):
            env = {}
            for n, s in zip(refs, sizes):
                if s is None:
                    env[n] = rng.bytes(32)
                else:
                    env[n] = int.from_bytes(rng.bytes(s.bit_length() // 8 + 8), "big") % s
            yield env

    return _scan(circuit, refs, draw(), exhaustive=False)


def _scan(circuit, refs, envs, exhaustive: bool) -> Verdict:
    first = _MISSING = object()
    for env in envs:
        try:
            v = circuit.evaluate(env)
        except (ArithmeticError, TypeError, ValueError):
            v = None
        if isinstance(v, np.generic):
            v = v.item()
        if first is _MISSING:
            first = v
        elif v != first:
            return Verdict.NON_TRIVIAL
    return Verdict.TRIVIAL if exhaustive else Verdict.UNKNOWN


def check_circuit_trivial(circuit: Circuit, budget: int = 4096, seed: int = 0) -> bool:
    """True iff the output is provably constant; UNKNOWN counts as non-trivial."""
    return triviality(circuit, budget, seed) is Verdict.TRIVIAL


def claims_trivial(circuit: Circuit, claims) -> bool:
    """True when the claimed outputs cover every output the circuit can produce."""
    rng = circuit.output_range()
    if rng is None:
        return False
    return rng <= set(c for c in claims if isinstance(c, int))
