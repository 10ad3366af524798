"""Command-line entry point: experiment subcommands, config files, sweeps and CSV output.

Every run resolves its parameters (defaults < config file < flags), writes them
as '#' comment lines at the top of the CSV, and can be replayed by passing that
CSV back with ``--config``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Any, Callable

from parpow import __version__
from parpow.analytic import (
    WithholdParams,
    dag_expected_rewards,
    equal_split_r,
    fee_split_alpha_bound,
    fee_split_threshold,
    h_waste_exceeds,
    h_waste_truncated,
    mdp_weighted_mix,
    selfish_upper_bound,
    withhold_limit,
    withhold_recursion,
)
from parpow.attacks import STYLES, AttackConfig, simulate
from parpow.consistency import ConsistencyParams, InsecureRegimeError, consistency_curve
from parpow.mdp import KINDS, ConvergenceError, build_model, reachable_policy, solve, threshold
from parpow.rng import ParameterError, RngStream, RunStamp, canonical_json

EXIT_OK, EXIT_USAGE, EXIT_EXISTS, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("bound", "curve", "attack", "analytic", "mdp", "sweep")


class UsageError(Exception):
    pass


# --- value parsing


def _grid(text: str, cast: Callable) -> list:
    """'a,b,c' or inclusive 'start:stop[:step]' (step defaults to 1)."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            bounds = [float(x) for x in part.split(":")]
            if len(bounds) not in (2, 3):
                raise UsageError(f"bad range {part!r}")
            start, stop, step = (*bounds, 1.0) if len(bounds) == 2 else bounds
            if step <= 0:
                raise UsageError(f"range step must be positive in {part!r}")
            n = int(math.floor((stop - start) / step + 1e-9)) + 1
            out.extend(cast(round(start + k * step, 10)) for k in range(n))
        else:
            out.append(cast(float(part)) if cast is int else cast(part))
    if not out:
        raise UsageError(f"empty list {text!r}")
    return out


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _fraction(text) -> float:
    """Accepts decimals and simple ratios such as 1/600."""
    s = str(text)
    if "/" in s:
        num, den = s.split("/")
        return float(num) / float(den)
    return float(s)


PARSERS: dict[str, Callable[[Any], Any]] = {
    "float": _fraction,
    "int": lambda v: int(float(v)) if not isinstance(v, int) else v,
    "str": str,
    "flag": _flag,
    "floats": lambda v: v if isinstance(v, list) else _grid(v, float),
    "ints": lambda v: v if isinstance(v, list) else _grid(v, int),
    "strs": lambda v: v if isinstance(v, list) else _grid(v, str),
    "overrides": lambda v: [x.strip() for item in (v if isinstance(v, list) else [v]) for x in str(item).split(";") if x.strip()],
}


@dataclass(frozen=True)
class Param:
    kind: str
    default: Any = None
    help: str = ""
    required: bool = False
    choices: tuple | None = None


_CONSISTENCY = {
    "lambda_B": Param("float", 1 / 600, "block rate per second"),
    "alpha": Param("float", 0.25, "adversarial fraction"),
    "delta": Param("float", 1.0, "proof propagation delay (s)"),
    "Delta": Param("float", 10.0, "ledger propagation delay (s)"),
    "eps": Param("float", 1e-12, "pmf truncation tail"),
}

SCHEMAS: dict[str, dict[str, Param]] = {
    "bound": {**_CONSISTENCY, "L": Param("ints", None, "proofs per block, list or range", required=True)},
    "curve": {**_CONSISTENCY, "L": Param("ints", [*range(1, 101)], "proofs per block, list or range")},
    "attack": {
        "style": Param("str", None, "attack model", required=True, choices=STYLES),
        "alpha": Param("floats", _grid("0.05:0.45:0.05", float), "adversarial fractions"),
        "L": Param("ints", [50], "proofs per block"),
        "blocks": Param("int", 100_000, "blocks per run"),
        "repetitions": Param("int", 1, "independent runs per point"),
        "bonus": Param("flag", False, "Bobtail bonus rewards"),
        "bonus_value": Param("float", 1.0, "bonus per supporting proof"),
    },
    "analytic": {
        "function": Param("str", None, "closed form to evaluate", required=True, choices=(
            "withhold-limit", "withhold-recursion", "dag-rewards", "selfish-bound",
            "h-waste", "fee-threshold", "fee-alpha-bound", "weighted-mix")),
        "alpha": Param("floats", _grid("0.05:0.45:0.05", float), "adversarial fractions"),
        "L": Param("ints", [50], "proofs per block"),
        "N": Param("ints", [0], "Bobtail restart slack"),
        "blocks": Param("int", 50, "recursion length"),
        "r": Param("strs", ["equal"], "leader fee share: number, 'equal' = 1/(L+1), 'inv2L' = 1/(2L)"),
        "fee_ratio": Param("floats", [0.85], "own-ledger fee ratio"),
        "rho_nakamoto": Param("floats", [0.0], "Nakamoto ratio"),
        "rho_split": Param("floats", [0.0], "reward-split ratio"),
    },
    "mdp": {
        "model": Param("strs", list(KINDS), "model kinds"),
        "alpha": Param("floats", _grid("0.02:0.48:0.02", float), "adversarial fractions"),
        "gamma": Param("floats", [0.5], "tie-breaking fractions"),
        "max_fork": Param("int", 80, "truncation length"),
        "precision": Param("float", 1e-5, "bisection precision on rho"),
        "threshold": Param("flag", False, "report profitability thresholds instead of a sweep"),
        "alpha_tol": Param("float", 1e-3, "threshold bisection tolerance on alpha"),
        "policy_out": Param("str", "", "optional CSV path for the reachable optimal policies"),
    },
    "sweep": {
        "recipe": Param("str", None, "named experiment", required=True),
        "set": Param("overrides", [], "recipe override KEY=VALUE (repeatable; ';'-separated in files)"),
    },
}

# settings that do not change the output and stay out of the resolved config
EXECUTION_KEYS = ("policy_out",)

RECIPES: dict[str, tuple[str, dict[str, Any]]] = {
    "consistency-curve": ("curve", {"L": "1:100"}),
    "withholding-tree": ("attack", {"style": "tree", "alpha": "0.05:0.45:0.05", "L": "10,25,50", "blocks": 100_000}),
    "withholding-dag": ("attack", {"style": "dag", "alpha": "0.05:0.45:0.05", "L": "10,25,50", "blocks": 100_000}),
    "bobtail": ("attack", {"style": "bobtail", "alpha": "0.05:0.45:0.05", "L": "50", "blocks": 1_000_000}),
    "withholding-theory": ("analytic", {"function": "withhold-limit", "alpha": "0.05:0.45:0.05", "L": "10,25,50"}),
    "mdp-compare": ("mdp", {"gamma": "0.5"}),
    "mdp-gamma": ("mdp", {"gamma": "0,0.2,0.4,0.5,0.6,0.8"}),
}


def _parse_value(name: str, spec: Param, raw: Any) -> Any:
    try:
        value = PARSERS[spec.kind](raw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad value for {name}: {raw!r}") from exc
    if spec.choices is not None:
        vals = value if isinstance(value, list) else [value]
        bad = [v for v in vals if v not in spec.choices]
        if bad:
            raise UsageError(f"{name} must be one of {spec.choices}, got {bad[0]!r}")
    return value


def _key(name: str) -> str:
    return name.replace("-", "_")


def _read_config(path: str, command: str) -> tuple[dict[str, Any], int | None]:
    """Values for ``command`` from an INI file or from a previous run's CSV header."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if text.startswith("#"):
        for line in text.splitlines():
            if line.startswith("# config: "):
                cfg = json.loads(line[len("# config: "):])
                if cfg.get("command") != command:
                    raise UsageError(f"config is for {cfg.get('command')!r}, not {command!r}")
                return dict(cfg["params"]), cfg.get("seed")
        raise UsageError(f"{path} has no '# config:' header line")
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise UsageError(str(exc)) from exc
    if not parser.has_section(command):
        return {}, None
    values = {_key(k): v for k, v in parser.items(command)}
    seed = values.pop("seed", None)
    return values, int(seed) if seed is not None else None


def resolve(command: str, file_values: dict[str, Any], flag_values: dict[str, Any]) -> dict[str, Any]:
    schema = SCHEMAS[command]
    unknown = sorted(set(file_values) - set(schema))
    if unknown:
        raise UsageError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    out = {}
    for name, spec in schema.items():
        raw = flag_values.get(name)
        if raw is None:
            raw = file_values.get(name)
        if raw is None:
            if spec.required:
                raise UsageError(f"missing required parameter --{name.replace('_', '-')}")
            out[name] = spec.default
        else:
            out[name] = _parse_value(name, spec, raw)
    return out


# --- runners: each returns (columns, rows, exit code)

Table = tuple[list[str], list[list[Any]], int]


def _pool_map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


BOUND_COLUMNS = ["L", "bound", "truncation_error", "p", "regime_ok"]


def run_bound(params: dict[str, Any], seed: int, workers: int = 1) -> Table:
    base = ConsistencyParams.from_alpha(params["lambda_B"], params["L"][0], params["alpha"],
                                        params["delta"], params["Delta"])
    res = consistency_curve(base, params["L"], params["eps"])
    rows = [[r.L, r.bound, r.truncation_error, r.p, r.regime_ok] for r in res]
    code = EXIT_NUMERIC if not any(r.regime_ok for r in res) else EXIT_OK
    return BOUND_COLUMNS, rows, code


run_curve = run_bound

ATTACK_COLUMNS = ["alpha", "L", "blocks", "style", "repetition", "seed", "stream", "relative_reward",
                  "stderr_estimate", "adversarial_reward", "honest_reward", "orphaned_honest_proofs"]


def _attack_point(point: tuple, blocks: int, style: str, bonus: bool, bonus_value: float, seed: int) -> list:
    stream, alpha, L, rep = point
    cfg = AttackConfig(alpha, L, blocks, style, seed, bonus, bonus_value)
    r = simulate(cfg, RngStream(seed, stream))
    return [alpha, L, blocks, style, rep, seed, stream, r.relative_reward, r.stderr_estimate,
            r.adversarial_reward, r.honest_reward, r.orphaned_honest_proofs]


def run_attack(params: dict[str, Any], seed: int, workers: int = 1) -> Table:
    if params["repetitions"] < 1:
        raise UsageError("repetitions must be positive")
    grid = [(a, L, rep) for L in params["L"] for a in params["alpha"] for rep in range(params["repetitions"])]
    points = [(i, *g) for i, g in enumerate(grid)]
    for _, a, L, _ in points:  # validate before dispatch
        AttackConfig(a, L, params["blocks"], params["style"])
    fn = partial(_attack_point, blocks=params["blocks"], style=params["style"], bonus=params["bonus"],
                 bonus_value=params["bonus_value"], seed=seed)
    return ATTACK_COLUMNS, _pool_map(fn, points, workers), EXIT_OK


def _r_value(token: str, L: int) -> float:
    if token == "equal":
        return equal_split_r(L)
    if token == "inv2L":
        return 1.0 / (2 * L)
    try:
        return _fraction(token)
    except ValueError as exc:
        raise UsageError(f"bad r value {token!r}") from exc


def run_analytic(params: dict[str, Any], seed: int, workers: int = 1) -> Table:
    fn = params["function"]
    A, Ls = params["alpha"], params["L"]
    if fn == "withhold-limit":
        return ["alpha", "L", "rho_tree", "valid"], [
            [a, L, withhold_limit(WithholdParams(a, L)), WithholdParams(a, L).valid] for L in Ls for a in A], EXIT_OK
    if fn == "withhold-recursion":
        rows = []
        for L in Ls:
            for a in A:
                for n, (ea, eb) in enumerate(withhold_recursion(WithholdParams(a, L), params["blocks"]), 1):
                    rows.append([a, L, n, float(ea), float(eb)])
        return ["alpha", "L", "n", "a_n", "b_n"], rows, EXIT_OK
    if fn == "dag-rewards":
        rows = []
        for L in Ls:
            for a in A:
                p = WithholdParams(a, L)
                rows.append([a, L, *dag_expected_rewards(p), withhold_limit(p)])
        return ["alpha", "L", "adversarial", "honest", "rho_dag", "rho_tree"], rows, EXIT_OK
    if fn == "selfish-bound":
        return ["alpha", "upper_bound"], [[a, selfish_upper_bound(a)] for a in A], EXIT_OK
    if fn == "h-waste":
        return ["L", "N", "h_waste", "exceeds_two_thirds_L"], [
            [L, N, h_waste_truncated(L, N), h_waste_exceeds(L, N)] for L in Ls for N in params["N"]], EXIT_OK
    if fn == "fee-threshold":
        rows = [[a, L, t, _r_value(t, L), fee_split_threshold(a, L, _r_value(t, L))]
                for L in Ls for t in params["r"] for a in A]
        return ["alpha", "L", "r_rule", "r", "threshold"], rows, EXIT_OK
    if fn == "fee-alpha-bound":
        rows = [[f, L, t, _r_value(t, L), fee_split_alpha_bound(f, L, _r_value(t, L))]
                for L in Ls for t in params["r"] for f in params["fee_ratio"]]
        return ["fee_ratio", "L", "r_rule", "r", "alpha_bound"], rows, EXIT_OK
    rows = [[n, s, L, mdp_weighted_mix(n, s, L)] for L in Ls for n in params["rho_nakamoto"] for s in params["rho_split"]]
    return ["rho_nakamoto", "rho_split", "L", "rho_mix"], rows, EXIT_OK


MDP_COLUMNS = ["alpha", "gamma", "model", "rho", "threshold_flag", "iterations", "residual", "status"]
THRESHOLD_COLUMNS = ["gamma", "model", "threshold", "precision", "alpha_tol"]
POLICY_COLUMNS = ["alpha", "gamma", "model", "a", "h", "fork", "p", "action"]


def _mdp_point(point: tuple, max_fork: int, precision: float, want_policy: bool) -> tuple[list, list]:
    kind, gamma, alpha = point
    model = build_model(kind, alpha, gamma, max_fork)
    try:
        r = solve(model, precision)
    except ConvergenceError as exc:
        return [alpha, gamma, kind, math.nan, False, 0, exc.residual, "nonconverged"], []
    policy = []
    if want_policy:
        policy = [[alpha, gamma, kind, s.a, s.h, s.fork.name.lower(), s.p, act.name.lower()]
                  for s, act in reachable_policy(model, r.policy)]
    row = [alpha, gamma, kind, r.rho, r.rho > alpha + precision, r.iterations, r.residual, "ok"]
    return row, policy


def _threshold_point(point: tuple, max_fork: int, precision: float, alpha_tol: float) -> list:
    kind, gamma = point
    return [gamma, kind, threshold(kind, gamma, precision, max_fork, alpha_tol), precision, alpha_tol]


def run_mdp(params: dict[str, Any], seed: int, workers: int = 1) -> Table:
    bad = [k for k in params["model"] if k not in KINDS]
    if bad:
        raise UsageError(f"unknown model {bad[0]!r}; expected one of {KINDS}")
    for g in params["gamma"]:
        if not 0 <= g <= 1:
            raise UsageError(f"gamma={g} outside [0, 1]")
    if params["threshold"]:
        points = [(k, g) for k in params["model"] for g in params["gamma"]]
        fn = partial(_threshold_point, max_fork=params["max_fork"], precision=params["precision"],
                     alpha_tol=params["alpha_tol"])
        return THRESHOLD_COLUMNS, _pool_map(fn, points, workers), EXIT_OK
    for a in params["alpha"]:
        if not 0 <= a <= 0.5:
            raise UsageError(f"alpha={a} outside [0, 0.5]")
    points = [(k, g, a) for k in params["model"] for g in params["gamma"] for a in params["alpha"]]
    fn = partial(_mdp_point, max_fork=params["max_fork"], precision=params["precision"],
                 want_policy=bool(params.get("policy_out")))
    results = _pool_map(fn, points, workers)
    rows = [r for r, _ in results]
    code = EXIT_NUMERIC if all(r[-1] != "ok" for r in rows) else EXIT_OK
    if params.get("policy_out"):
        _write_table(params["policy_out"], POLICY_COLUMNS, [p for _, pol in results for p in pol], [], True)
    return MDP_COLUMNS, rows, code


RUNNERS: dict[str, Callable[..., Table]] = {
    "bound": run_bound,
    "curve": run_curve,
    "attack": run_attack,
    "analytic": run_analytic,
    "mdp": run_mdp,
}


def sweep_target(recipe: str, overrides: list[str]) -> tuple[str, dict[str, Any]]:
    if recipe not in RECIPES:
        raise UsageError(f"unknown recipe {recipe!r}; expected one of {sorted(RECIPES)}")
    command, base = RECIPES[recipe]
    values = dict(base)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        values[_key(k.strip())] = v.strip()
    return command, values


# --- output


def _cell(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_csv(header: list[str], columns: list[str], rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _check_target(path: str, overwrite: bool) -> None:
    if path and path != "-" and os.path.exists(path) and not overwrite:
        raise FileExistsError(path)


def _write_table(path: str, columns: list[str], rows: list[list[Any]], header: list[str], overwrite: bool) -> None:
    text = render_csv(header, columns, rows)
    if not path or path == "-":
        sys.stdout.write(text)
        return
    _check_target(path, overwrite)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def header_lines(command: str, params: dict[str, Any], seed: int, recipe: str | None = None) -> list[str]:
    cfg = {"command": command, "params": {k: v for k, v in params.items() if k not in EXECUTION_KEYS},
           "seed": seed}
    stamp = RunStamp.for_config(seed, cfg)
    lines = [stamp.header_lines()[0], f"command: {command}"]
    if recipe:
        lines.append(f"recipe: {recipe}")
    lines += [f"config: {canonical_json(cfg)}", *stamp.header_lines()[1:]]
    return lines


# --- argparse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parpow", description="Parallel proof-of-work experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        sp = sub.add_parser(command, help=f"{command} experiment")
        sp.add_argument("--config", help="INI file with a [%s] section, or a CSV from an earlier run" % command)
        sp.add_argument("--out", default="-", help="output CSV path ('-' for stdout)")
        sp.add_argument("--seed", type=int, default=None, help="64-bit master seed (default 0)")
        sp.add_argument("--overwrite", action="store_true", help="replace an existing output file")
        sp.add_argument("--workers", type=int, default=None, help="worker processes (default: CPU count)")
        for name, spec in SCHEMAS[command].items():
            flag = "--" + name.replace("_", "-")
            if spec.kind == "flag":
                sp.add_argument(flag, dest=name, action="store_const", const=True, default=None, help=spec.help)
            elif name == "set":
                sp.add_argument(flag, dest=name, action="append", default=None, metavar="KEY=VALUE", help=spec.help)
            else:
                sp.add_argument(flag, dest=name, default=None, help=spec.help)
    return parser


def _run(ns: argparse.Namespace) -> int:
    command = ns.command
    file_values, file_seed = _read_config(ns.config, command) if ns.config else ({}, None)
    seed = ns.seed if ns.seed is not None else (file_seed if file_seed is not None else 0)
    if not 0 <= seed < 2**64:
        raise UsageError("seed must be a 64-bit unsigned integer")
    workers = ns.workers if ns.workers is not None else (os.cpu_count() or 1)
    if workers < 1:
        raise UsageError("workers must be positive")
    flags = {name: getattr(ns, name) for name in SCHEMAS[command]}
    recipe = None
    if command == "sweep":
        params = resolve("sweep", file_values, flags)
        recipe = params["recipe"]
        command, file_values = sweep_target(recipe, params["set"])
        flags = {}
    params = resolve(command, file_values, flags)
    _check_target(ns.out, ns.overwrite)
    if params.get("policy_out"):
        _check_target(params["policy_out"], ns.overwrite)
    columns, rows, code = RUNNERS[command](params, seed, workers)
    _write_table(ns.out, columns, rows, header_lines(command, params, seed, recipe), True)
    if code == EXIT_NUMERIC:
        print(f"parpow {command}: no point in a usable numeric regime", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _run(ns)
    except FileExistsError as exc:
        print(f"parpow: refusing to overwrite {exc.args[0]} (use --overwrite)", file=sys.stderr)
        return EXIT_EXISTS
    except (UsageError, ParameterError) as exc:
        print(f"parpow: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InsecureRegimeError as exc:
        print(f"parpow: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
