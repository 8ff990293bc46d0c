"""Command-line entry point: ``pirdeter <group> <command> [options]``.

Exit codes: 0 success, 1 validation or usage error, 2 internal error.
Config files are JSON with unknown fields rejected; money is integer cents.
Every file written embeds a run manifest and is replaced atomically.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import __version__
from .blind import (
    blind_bruteforce,
    blind_p1,
    blind_p2,
    blind_pk,
    corrected_p1,
    corrected_p2,
    verify_sequential_eq,
)
from .games import (
    BAD,
    GOOD,
    PlayerStrategy,
    StrategyProfile,
    build_game,
    solve_spe,
    spe_projections,
    verify_spe,
)
from .incentives import (
    IncentiveParams,
    check_feasibility,
    coalition_max_size,
    frac,
    generalized_fine_condition,
    insurance_fee_threshold,
    insurance_multi_exit,
    insurance_sigma,
    insurance_sigma_discounted,
    insurance_stream,
    single_shot_condition,
)
from .replay import load_scenario, replay
from .simulator import SimConfig, run_simulation

SEED_ENV = "PIRDETER_SEED"
MONEY = ("s", "r", "p", "f", "V")


class UsageError(Exception):
    pass


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Manifest and output


@dataclass
class RunManifest:
    subcommand: str
    config_paths: list[str] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    version: str = __version__
    config_hash: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def config_hash(*blobs: Any) -> str:
    h = hashlib.sha256()
    for b in blobs:
        h.update(json.dumps(b, sort_keys=True, default=str).encode())
    return h.hexdigest()


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e})") from None


def _strict(data: Mapping, allowed: Sequence[str], where: str) -> None:
    if not isinstance(data, Mapping):
        raise ValidationError(f"{where} must be a JSON object")
    extra = set(data) - set(allowed)
    if extra:
        raise ValidationError(f"unknown field(s) in {where}: {sorted(extra)}")


def _cents(v: Any, name: str) -> Fraction:
    if not isinstance(v, int) or isinstance(v, bool) or v < 0:
        raise ValidationError(f"{name} must be non-negative integer cents, got {v!r}")
    return Fraction(v, 100)


PARAM_FIELDS = ("ell", "k", "s", "r", "p", "f", "V", "delta", "xi", "omega", "eta", "theta", "p_tilde")


def params_from_json(d: Mapping, where: str = "params") -> tuple[IncentiveParams, dict]:
    """IncentiveParams from a cents-denominated object plus the non-param extras."""
    _strict(d, PARAM_FIELDS, where)
    missing = [m for m in MONEY if m not in d]
    if missing:
        raise ValidationError(f"{where} missing {missing}")
    kw = {m: _cents(d[m], m) for m in MONEY}
    for name in ("delta", "xi", "theta"):
        if name in d:
            kw[name] = frac(d[name])
    for name in ("omega", "eta"):
        if name in d:
            kw[name] = int(d[name])
    extras = {n: d[n] for n in ("ell", "k", "p_tilde") if n in d}
    return IncentiveParams(**kw), extras


def _render(obj: Any, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(obj, Mapping):
        lines = []
        for k, v in obj.items():
            if isinstance(v, (Mapping, list)) and v:
                lines.append(f"{pad}{k}:")
                lines.append(_render(v, indent + 1))
            else:
                lines.append(f"{pad}{k}: {v}")
        return "\n".join(lines)
    if isinstance(obj, list):
        return "\n".join(
            (f"{pad}-\n" + _render(v, indent + 1)) if isinstance(v, (Mapping, list)) else f"{pad}- {v}" for v in obj
        )
    return f"{pad}{obj}"


def _emit(args, result: dict, manifest: RunManifest) -> None:
    out = getattr(args, "out", None)
    if out:
        manifest.outputs = [str(out)]
    doc = {"manifest": manifest.to_json(), **result}
    text = json.dumps(doc, indent=2, default=str) + "\n"
    if out:
        atomic_write(out, text)
    if args.json:
        sys.stdout.write(text)
    else:
        sys.stdout.write(_render(result) + "\n")


# ---------------------------------------------------------------------------
# feasibility


def cmd_feasibility_check(args) -> int:
    data = _read_json(args.params)
    params, extras = params_from_json(data)
    ell = args.ell or extras.get("ell")
    k = args.k or extras.get("k")
    if ell is None or k is None:
        raise ValidationError("ell and k are required (in the params file or as flags)")
    report = check_feasibility(params, int(ell), int(k))
    result = {"feasibility": report.to_json(), "single_shot": single_shot_condition(params, int(k)).to_json()}
    if "p_tilde" in extras:
        result["generalized_fine"] = generalized_fine_condition(params, frac(extras["p_tilde"])).to_json()
    manifest = RunManifest("feasibility check", [args.params], config_hash=config_hash(data, ell, k))
    _emit(args, result, manifest)
    return 0


GRID_FIELDS = ("ell", "V", "delta", "xi", "omega", "k", "s", "p", "r", "f")


def _axis(axis: Any, name: str, money: bool) -> list:
    if isinstance(axis, Mapping):
        _strict(axis, ("min", "max", "step"), f"grid axis {name}")
        lo, hi, step = axis["min"], axis["max"], axis["step"]
        if step <= 0:
            raise ValidationError(f"grid axis {name}: step must be positive")
        vals = list(range(lo, hi + 1, step)) if all(isinstance(v, int) for v in (lo, hi, step)) else None
        if vals is None:
            raise ValidationError(f"grid axis {name}: min/max/step must be integers")
    elif isinstance(axis, list):
        vals = axis
    else:
        vals = [axis]
    if money:
        for v in vals:
            _cents(v, name)
    return vals


def export_region(grid: Mapping) -> tuple[list[dict], int]:
    """Evaluate every grid point; returns (rows, number passing)."""
    _strict(grid, GRID_FIELDS, "grid")
    for req in ("ell", "V", "k", "s", "p", "r", "f"):
        if req not in grid:
            raise ValidationError(f"grid missing {req!r}")
    axes = {name: _axis(grid[name], name, name != "k") for name in ("k", "s", "p", "r", "f")}
    if any(len(v) == 0 for v in axes.values()):
        raise ValidationError("empty grid")
    V = _cents(grid["V"], "V")
    ell = int(grid["ell"])
    rows, passing = [], 0
    for k, s, p, r, f in itertools.product(*(axes[n] for n in ("k", "s", "p", "r", "f"))):
        params = IncentiveParams(
            s=Fraction(s, 100), r=Fraction(r, 100), p=Fraction(p, 100), f=Fraction(f, 100), V=V,
            delta=frac(grid.get("delta", "0.99")), xi=frac(grid.get("xi", "0.99")), omega=int(grid.get("omega", 1)),
        )
        rep = check_feasibility(params, ell, int(k))
        row = {"k": k, "s": s, "p": p, "r": r, "f": f}
        for res in rep.results:
            row[f"margin_{res.id}"] = repr(float(res.margin))
        row["pass"] = int(rep.passed)
        passing += rep.passed
        rows.append(row)
    return rows, passing


def cmd_feasibility_scan(args) -> int:
    grid = _read_json(args.grid)
    rows, passing = export_region(grid)
    manifest = RunManifest("feasibility scan", [args.grid], outputs=[args.out] if args.out else [],
                           config_hash=config_hash(grid))
    buf = io.StringIO()
    buf.write("# " + json.dumps(manifest.to_json(), sort_keys=True) + "\n")
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        atomic_write(args.out, buf.getvalue())
    summary = {"points": len(rows), "feasible": passing, "out": args.out}
    if args.json:
        sys.stdout.write(json.dumps({"manifest": manifest.to_json(), **summary}) + "\n")
    elif args.out:
        sys.stdout.write(_render(summary) + "\n")
    else:
        sys.stdout.write(buf.getvalue())
    return 0


# ---------------------------------------------------------------------------
# game


def _game_params(path: str) -> tuple[IncentiveParams, dict]:
    data = _read_json(path)
    params, _ = params_from_json(data)
    return params, data


def cmd_game_solve(args) -> int:
    params, data = _game_params(args.params)
    tree = build_game(args.k, params, args.case)
    spes = sorted(solve_spe(tree), key=lambda p: json.dumps(p.to_json(), sort_keys=True))
    result = {
        "k": args.k,
        "case": args.case,
        "stages12": sorted(spe_projections(spes)),
        "spe": [p.to_json() for p in spes],
        "tree": tree.to_json(),
    }
    _emit(args, result, RunManifest("game solve", [args.params], config_hash=config_hash(data, args.k, args.case)))
    return 0


def profile_from_json(d: Mapping, k: int) -> StrategyProfile:
    _strict(d, ("players", "stages12"), "profile")
    players = d["players"]
    if len(players) != k:
        raise ValidationError(f"profile needs {k} players")
    from .games import _label, _profiles

    outcomes = [_label(a, "A", "D") for a in _profiles(k)]
    out = []
    for i, pl in enumerate(players):
        _strict(pl, ("collude", "amicable", "report"), f"player {i}")
        rep = pl["report"]
        if isinstance(rep, bool):
            reps = (rep,) * len(outcomes)
        else:
            _strict(rep, outcomes, f"player {i} report")
            if set(rep) != set(outcomes):
                raise ValidationError(f"player {i} report needs every outcome {outcomes}")
            reps = tuple(bool(rep[o]) for o in outcomes)
        out.append(PlayerStrategy(bool(pl["collude"]), bool(pl["amicable"]), reps))
    return StrategyProfile(tuple(out))


def cmd_game_verify(args) -> int:
    params, data = _game_params(args.params)
    tree = build_game(args.k, params, args.case)
    prof_data = _read_json(args.profile)
    profile = profile_from_json(prof_data, args.k)
    check = verify_spe(tree, profile)
    result = {"spe": check.ok, "witness": check.witness.to_json() if check.witness else None}
    _emit(args, result, RunManifest("game verify", [args.params, args.profile],
                                    config_hash=config_hash(data, prof_data, args.k, args.case)))
    return 0


def _prior(text: str) -> list[Fraction]:
    if Path(text).is_file():
        vals = _read_json(text)
    else:
        vals = text.split(",")
    try:
        return [frac(v) for v in vals]
    except (ValueError, ZeroDivisionError):
        raise ValidationError(f"bad prior {text!r}") from None


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer") from None


def cmd_game_blind(args) -> int:
    x = _prior(args.prior)
    N = len(x)
    seed = _seed(args)
    oracle = blind_bruteforce(N, args.kprime, x, args.a, mode=args.mode, draws=args.draws, seed=seed)
    if args.kprime == 1:
        formula = {"p1": str(blind_p1(x, args.a))}
        corrected = {"p1": str(corrected_p1(x, args.a))}
    elif args.kprime == 2:
        p2, p21, p22 = blind_p2(x, args.a)
        c2, c21, c22 = corrected_p2(x, args.a)
        formula = {"p2": str(p2), "p21": str(p21), "p22": str(p22)}
        corrected = {"p2": str(c2), "p21": str(c21), "p22": str(c22)}
    else:
        formula = {"pk": str(blind_pk(x, args.a, args.kprime))}
        corrected = None
    result = {"N": N, "kprime": args.kprime, "a": args.a, "formula": formula, "corrected": corrected,
              "oracle": oracle.to_json()}
    _emit(args, result, RunManifest("game blind", seeds=[seed],
                                    config_hash=config_hash([str(v) for v in x], args.kprime, args.a, args.mode)))
    return 0


def cmd_game_sequential(args) -> int:
    params, data = _game_params(args.params)
    x = _prior(args.prior)
    rep = verify_sequential_eq(params, x, args.a, corrected=args.corrected)
    _emit(args, rep.to_json(), RunManifest("game sequential", [args.params],
                                           config_hash=config_hash(data, [str(v) for v in x], args.a)))
    return 0


# ---------------------------------------------------------------------------
# coalition and insurance


def cmd_coalition_bound(args) -> int:
    bound = coalition_max_size(args.ell, args.k, args.variant)
    _emit(args, bound.to_json(), RunManifest("coalition bound", config_hash=config_hash(args.ell, args.k, args.variant)))
    return 0


def _ins_common(args) -> dict:
    return {"k": args.k, "ell": args.ell, "Omega": args.Omega, "p": _cents(args.p, "p"), "s": _cents(args.s, "s")}


def cmd_insurance_sigma(args) -> int:
    c = _ins_common(args)
    r, r2 = frac(args.r), frac(args.r2)
    sigma = insurance_sigma(c["k"], c["ell"], c["Omega"], c["p"], c["s"])
    sigma_d = insurance_sigma_discounted(c["k"], c["ell"], c["Omega"], args.T, r, r2, c["p"], c["s"])
    thr = insurance_fee_threshold(c["k"], c["ell"], c["Omega"], args.T, r, r2)
    result = {"sigma": float(sigma), "sigma_discounted": float(sigma_d), "covered": sigma_d <= 1,
              "fee_to_penalty_threshold": float(thr)}
    _emit(args, result, RunManifest("insurance sigma", config_hash=config_hash(vars_clean(args))))
    return 0


def cmd_insurance_stream(args) -> int:
    c = _ins_common(args)
    ratio = insurance_stream(c["k"], c["ell"], c["Omega"], args.T, frac(args.r), frac(args.r2), c["p"], c["s"])
    _emit(args, {"ratio": float(ratio), "covered": ratio <= 1},
          RunManifest("insurance stream", config_hash=config_hash(vars_clean(args))))
    return 0


def cmd_insurance_multi(args) -> int:
    c = _ins_common(args)
    ratio = insurance_multi_exit(args.m, c["k"], c["ell"], c["Omega"], args.T, frac(args.r), frac(args.r2),
                                 c["p"], c["s"])
    _emit(args, {"m": args.m, "ratio": float(ratio), "covered": ratio <= 1},
          RunManifest("insurance multi-exit", config_hash=config_hash(vars_clean(args))))
    return 0


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if not callable(v) and k not in ("json", "out")}


# ---------------------------------------------------------------------------
# coordinator and simulation


def cmd_coordinator_replay(args) -> int:
    scenario = load_scenario(args.scenario)
    coord = replay(scenario)
    manifest = RunManifest("coordinator replay", [args.scenario], outputs=[args.out] if args.out else [],
                           config_hash=config_hash(scenario))
    lines = [json.dumps({"manifest": manifest.to_json()}, sort_keys=True)]
    lines += [json.dumps(e, sort_keys=True) for e in coord.events]
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write(args.out, text)
    summary = {"events": len(coord.events), "residual": coord.money_residual(), "out": args.out}
    if args.json:
        sys.stdout.write(json.dumps({"manifest": manifest.to_json(), **summary}) + "\n")
    elif args.out:
        sys.stdout.write(_render(summary) + "\n")
    else:
        sys.stdout.write(text)
    return 0


def parse_seeds(text: str) -> list[int]:
    """``3``, ``0..31`` (inclusive) or ``1,4,9``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise ValidationError(f"bad seed list {text!r}") from None


def _sim_one(payload: tuple[dict, int]) -> dict:
    data, seed = payload
    cfg = SimConfig.from_json({**data, "seed": seed})
    return run_simulation(cfg).to_json()


def cmd_sim_run(args) -> int:
    data = _read_json(args.config)
    SimConfig.from_json(data)  # validate before spawning workers
    if args.seeds is not None:
        seeds = parse_seeds(args.seeds)
    elif "seed" in data:
        seeds = [int(data["seed"])]
    else:
        seeds = [_seed(args)]
    jobs = [(data, s) for s in seeds]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            reports = list(pool.map(_sim_one, jobs))
    else:
        reports = [_sim_one(j) for j in jobs]
    outputs = []
    out = Path(args.out) if args.out else None
    for seed, rep in zip(seeds, reports):
        manifest = RunManifest("sim run", [args.config], [seed], config_hash=config_hash(data, seed))
        if out is not None:
            path = out if (len(seeds) == 1 and out.suffix == ".json") else out / f"report-seed{seed}.json"
            manifest.outputs = [str(path)]
            atomic_write(path, json.dumps({"manifest": manifest.to_json(), **rep}, indent=1) + "\n")
            outputs.append(str(path))
    summary = {
        "seeds": seeds,
        "outputs": outputs,
        "aggregate": {str(s): r["aggregate"] for s, r in zip(seeds, reports)},
    }
    manifest = RunManifest("sim run", [args.config], seeds, outputs, config_hash=config_hash(data, seeds))
    if args.json:
        sys.stdout.write(json.dumps({"manifest": manifest.to_json(), **summary}, indent=1) + "\n")
    else:
        sys.stdout.write(_render(summary) + "\n")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")

    root = _Parser(prog="pirdeter", description="Collusion-deterrence analyses for multi-server PIR.")
    root.add_argument("--version", action="version", version=__version__)
    groups = root.add_subparsers(dest="group", required=True, parser_class=_Parser)

    def sub(group, name, func, help_):
        p = group.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=func)
        return p

    feas = groups.add_parser("feasibility", help="parameter feasibility").add_subparsers(dest="cmd", required=True)
    p = sub(feas, "check", cmd_feasibility_check, "check one parameter assignment")
    p.add_argument("--params", required=True)
    p.add_argument("--ell", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p = sub(feas, "scan", cmd_feasibility_scan, "scan a parameter grid into CSV")
    p.add_argument("--grid", required=True)
    p.add_argument("--out")

    game = groups.add_parser("game", help="collusion game analyses").add_subparsers(dest="cmd", required=True)
    p = sub(game, "solve", cmd_game_solve, "all pure subgame-perfect profiles")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--params", required=True)
    p.add_argument("--case", choices=(GOOD, BAD), default=GOOD)
    p.add_argument("--out")
    p = sub(game, "verify", cmd_game_verify, "one-shot deviation check of a profile")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--params", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--case", choices=(GOOD, BAD), default=GOOD)
    p.add_argument("--out")
    p = sub(game, "blind", cmd_game_blind, "blind-collusion formulas against the oracle")
    p.add_argument("--prior", required=True, help="comma-separated probabilities or a JSON file")
    p.add_argument("--kprime", type=int, default=2)
    p.add_argument("--a", type=int, default=0)
    p.add_argument("--mode", choices=("exhaustive", "sampled"), default="exhaustive")
    p.add_argument("--draws", type=int, default=1_000_000)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p = sub(game, "sequential", cmd_game_sequential, "sequential-equilibrium check without input verification")
    p.add_argument("--params", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--a", type=int, default=0)
    p.add_argument("--corrected", action="store_true", help="use the oracle-matched closed forms")
    p.add_argument("--out")

    coal = groups.add_parser("coalition", help="coalition size bounds").add_subparsers(dest="cmd", required=True)
    p = sub(coal, "bound", cmd_coalition_bound, "maximum profitable coalition size")
    p.add_argument("--ell", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--variant", choices=("constant", "linear"), default="constant")
    p.add_argument("--out")

    ins = groups.add_parser("insurance", help="self-insurance ratios").add_subparsers(dest="cmd", required=True)
    for name, func in (("sigma", cmd_insurance_sigma), ("stream", cmd_insurance_stream),
                       ("multi-exit", cmd_insurance_multi)):
        p = sub(ins, name, func, f"{name} ratio")
        p.add_argument("--k", type=int, required=True)
        p.add_argument("--ell", type=int, required=True)
        p.add_argument("--Omega", type=int, required=True)
        p.add_argument("--T", type=int, required=True)
        p.add_argument("--r", default="0")
        p.add_argument("--r2", default="0")
        p.add_argument("--p", type=int, required=True, help="penalty in cents")
        p.add_argument("--s", type=int, required=True, help="service fee in cents")
        p.add_argument("--out")
        if name == "multi-exit":
            p.add_argument("--m", type=int, required=True)

    coord = groups.add_parser("coordinator", help="coordinator scenarios").add_subparsers(dest="cmd", required=True)
    p = sub(coord, "replay", cmd_coordinator_replay, "replay a scripted scenario to a JSONL event log")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out")

    sim = groups.add_parser("sim", help="repeated-service simulation").add_subparsers(dest="cmd", required=True)
    p = sub(sim, "run", cmd_sim_run, "run seeds of a simulation config")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", help="e.g. 0..31 or 1,2,5")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="directory for per-seed reports (or a .json file for one seed)")
    return root


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except (ValidationError, ValueError, KeyError, TypeError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 1
    except Exception as e:  # noqa: BLE001
        sys.stderr.write(f"internal error: {type(e).__name__}: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
