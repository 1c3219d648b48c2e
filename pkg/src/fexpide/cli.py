"""Command line: ``fexpide solve | validate | bench``.

Settings come from an INI file (``--config`` or $FEX_DEFAULT_CONFIG) with
[problem], [search], [optimizer] and [run] sections.  Every key can be
overridden by the flag of the same name, e.g. ``search_iters`` by
``--search-iters``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fexpide.integral import IntegralConfigError
from fexpide.optim import OptimizerConfig
from fexpide.problems import BUILTINS, ProblemError, ProblemSpec, builtin_problem, make_problem
from fexpide.search import SearchConfig, SolveReport, solve

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_bool(text):
    return None if str(text).strip().lower() in ("", "auto", "none") else _bool(text)


def _opt_float(text):
    return None if str(text).strip().lower() in ("", "auto", "none") else float(text)


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    kind: object
    default: object
    help: str


KEYS = (
    Key("problem", "problem", str, None, f"builtin name ({', '.join(BUILTINS)}) or 'custom'"),
    Key("problem", "dim", int, 1, "space dimension d"),
    Key("problem", "integral", str, "", "taylor | trapezoid (default: the problem's own)"),
    Key("problem", "grid_points", int, 50, "trapezoid nodes on the jump grid"),
    Key("problem", "lam", _opt_float, None, "jump intensity override"),
    Key("problem", "mu", _opt_float, None, "mean jump size override"),
    Key("problem", "sigma2", _opt_float, None, "jump variance override"),
    Key("problem", "eps", _opt_float, None, "drift constant override"),
    Key("problem", "theta", _opt_float, None, "diffusion constant override"),
    Key("search", "search_iters", int, 50, "search iterations T"),
    Key("search", "sequences", int, 10, "sequences sampled per iteration N"),
    Key("search", "pool_size", int, 10, "candidate pool capacity K"),
    Key("search", "epsilon", float, 0.1, "exploration probability"),
    Key("search", "nu", float, 0.5, "kept fraction for the policy gradient"),
    Key("search", "controller_lr", float, 0.01, "controller learning rate"),
    Key("search", "eta_cluster", _opt_float, None, "grouping threshold (default 1/d)"),
    Key("search", "grouping", _opt_bool, None, "parameter grouping on/off (default: d > 1)"),
    Key("search", "warm_start", _bool, False, "start regrouped weights from group means"),
    Key("search", "tree_depth", int, 2, "expression tree template (2 or 3)"),
    Key("search", "workers", int, 1, "threads for candidate scoring"),
    Key("search", "finetune_all", _bool, False, "fine-tune every pooled candidate, even after one converges"),
    Key("optimizer", "batch_n", int, 2000, "interior points per loss evaluation"),
    Key("optimizer", "batch_m", int, 500, "terminal points per loss evaluation"),
    Key("optimizer", "coarse_adam_iters", int, 20, "T1"),
    Key("optimizer", "coarse_bfgs_iters", int, 20, "T2"),
    Key("optimizer", "regroup_iters", int, 100, "T3"),
    Key("optimizer", "finetune_iters", int, 20000, "T4"),
    Key("optimizer", "adam_lr_coarse", float, 1e-2, "Adam step size while scoring"),
    Key("optimizer", "adam_lr_medium", float, 1e-1, "Adam step size after regrouping"),
    Key("optimizer", "adam_lr_fine", float, 1e-3, "Adam step size while fine-tuning"),
    Key("optimizer", "early_stop_threshold", float, 1.5e-14, "fine-tune stop level"),
    Key("optimizer", "early_stop_window", int, 5, "losses that must all be below the stop level"),
    Key("optimizer", "trace_every", int, 100, "steps between relative-error samples"),
    Key("run", "seed", int, 0, "random seed"),
    Key("run", "out_dir", str, "runs", "parent directory for run folders"),
    Key("run", "plots", _bool, True, "write PNG figures next to the CSV files"),
)
KEY_BY_NAME = {k.name: k for k in KEYS}

# extra keys accepted in [problem] when problem = custom
CUSTOM_KEYS = {
    "jump_form": str, "grid_lo": float, "grid_hi": float, "T": float, "x_lo": float, "x_hi": float,
    "drift": str, "drift_coef": float, "diffusion": str, "diffusion_coef": float,
    "rhs_const": float, "rhs_lin": float, "rhs_sq": float, "rhs_cube": float,
    "terminal": str, "true_solution": str,
}


def read_config(path: str | None) -> dict:
    """Raw string values keyed by name; unknown keys are rejected."""
    values: dict = {}
    if not path:
        return values
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    for section in parser.sections():
        for name, raw in parser.items(section):
            if name in KEY_BY_NAME:
                if KEY_BY_NAME[name].section != section:
                    raise ConfigError(f"key {name!r} belongs in [{KEY_BY_NAME[name].section}]")
            elif not (section == "problem" and name in CUSTOM_KEYS):
                raise ConfigError(f"unknown key {name!r} in [{section}]")
            values[name] = raw
    return values


def resolve(file_values: dict, overrides: dict) -> dict:
    """Defaults, then file values, then command-line overrides, all parsed."""
    out = {}
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    for key in KEYS:
        raw = merged.get(key.name, key.default)
        try:
            out[key.name] = key.kind(raw) if raw is not None and isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key.name}: {raw!r} ({exc})") from exc
    for name, kind in CUSTOM_KEYS.items():
        if name in merged:
            try:
                out[name] = kind(merged[name])
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}: {merged[name]!r}") from exc
    if not out["problem"]:
        raise ConfigError("no problem given (use --problem or a config file)")
    return out


def build_problem(conf: dict) -> ProblemSpec:
    name, d = conf["problem"], conf["dim"]
    try:
        if name == "custom":
            kw = {k: conf[k] for k in CUSTOM_KEYS if k in conf}
            jump = {k: conf[k] for k in ("lam", "mu", "sigma2") if conf[k] is not None}
            return make_problem(
                "custom", d, integral=conf["integral"] or "taylor", grid_points=conf["grid_points"], **jump, **kw
            )
        extra = [k for k in CUSTOM_KEYS if k in conf]
        if extra:
            raise ConfigError(f"keys {extra} only apply to problem = custom")
        return builtin_problem(
            name, d, lam=conf["lam"], mu=conf["mu"], sigma2=conf["sigma2"], eps=conf["eps"], theta=conf["theta"],
            integral=conf["integral"] or None, grid_points=conf["grid_points"],
        )
    except (ProblemError, IntegralConfigError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def build_search_config(conf: dict) -> SearchConfig:
    try:
        opt = OptimizerConfig(
            T1=conf["coarse_adam_iters"], T2=conf["coarse_bfgs_iters"], T3=conf["regroup_iters"],
            T4=conf["finetune_iters"], adam_lr_coarse=conf["adam_lr_coarse"],
            adam_lr_medium=conf["adam_lr_medium"], adam_lr_fine=conf["adam_lr_fine"],
            early_stop_threshold=conf["early_stop_threshold"], early_stop_window=conf["early_stop_window"],
            batch_n=conf["batch_n"], batch_m=conf["batch_m"], trace_every=conf["trace_every"],
        )
        return SearchConfig(
            T=conf["search_iters"], N=conf["sequences"], K=conf["pool_size"], epsilon=conf["epsilon"],
            nu=conf["nu"], learning_rate=conf["controller_lr"], eta_cluster=conf["eta_cluster"],
            use_grouping=conf["grouping"], warm_start=conf["warm_start"], tree_depth=conf["tree_depth"],
            workers=conf["workers"], finetune_all=conf["finetune_all"], optimizer=opt,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def write_config(conf: dict, path: Path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for key in KEYS:
        if not parser.has_section(key.section):
            parser.add_section(key.section)
        value = conf[key.name]
        parser.set(key.section, key.name, "" if value is None else str(value))
    for name in CUSTOM_KEYS:
        if name in conf:
            parser.set("problem", name, str(conf[name]))
    with open(path, "w") as fh:
        parser.write(fh)


# -- outputs ----------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_json(report: SolveReport) -> str:
    # Python's float repr is the shortest string that round-trips exactly
    return json.dumps(_clean(report.to_dict()), indent=2, sort_keys=True) + "\n"


def write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_dir(out_dir: str, seed: int) -> Path:
    base = Path(out_dir)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = base / f"{stamp}_seed{seed}"
    k = 1
    while path.exists():
        path = base / f"{stamp}_seed{seed}_{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def write_outputs(report: SolveReport, conf: dict, path: Path, plots: bool) -> None:
    (path / "report.json").write_text(report_json(report))
    report.finetune_trace.write_csv(path / "finetune_trace.csv")
    write_rows(path / "search_trace.csv", report.search.trace)
    write_rows(path / "candidate_scores.csv", report.search.scores)
    write_config(conf, path / "config.ini")
    if plots:
        from fexpide import plots as fig

        fig.finetune_figure(report, path / "finetune_trace.png")
        fig.search_figure(report.search.trace, path / "search_trace.png")


# -- commands ---------------------------------------------------------------


def _overrides(args) -> dict:
    return {k.name: getattr(args, k.name, None) for k in KEYS}


def _load(args) -> dict:
    path = args.config or os.environ.get("FEX_DEFAULT_CONFIG")
    conf = resolve(read_config(path), _overrides(args))
    if args.no_plots:
        conf["plots"] = False
    return conf


def cmd_solve(args) -> int:
    try:
        conf = _load(args)
        problem = build_problem(conf)
        cfg = build_search_config(conf)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    def progress(row):
        if args.verbose:
            print(json.dumps(_clean(row)), file=sys.stderr, flush=True)

    report = solve(problem, cfg, conf["seed"], progress)
    path = run_dir(conf["out_dir"], conf["seed"])
    write_outputs(report, conf, path, conf["plots"])
    if not report.ok:
        print(f"all candidates failed; see {path}", file=sys.stderr)
        return EXIT_NUMERIC
    print(report.expression)
    if report.relative_error is not None:
        print(f"relative_error {report.relative_error:.6e}")
    print(f"run_dir {path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from fexpide.validation import run_all

    results = run_all(seed=args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_bench(args) -> int:
    try:
        base = _load(args)
        cfgs = []
        for d in args.dims:
            conf = dict(base, dim=d)
            cfgs.append((d, build_problem(conf), build_search_config(conf)))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seeds = args.seeds if args.seeds else [base["seed"]]
    path = run_dir(base["out_dir"], seeds[0])
    rows = []
    for d, problem, cfg in cfgs:
        for seed in seeds:
            rep = solve(problem, cfg, seed)
            rows.append({
                "problem": problem.name,
                "dim": d,
                "seed": seed,
                "status": rep.status,
                "relative_error": rep.relative_error,
                "loss": rep.loss,
                "finetune_steps": rep.finetune_trace.steps,
                "grouped": bool(rep.best and rep.best.expr.grouped),
                "search_s": rep.wall_time["search_s"],
                "finetune_s": rep.wall_time["finetune_s"],
                "total_s": rep.wall_time["total_s"],
                "expression": rep.expression,
            })
            print(f"{problem.name} d={d} seed={seed} rel_err={rep.relative_error} total_s={rep.wall_time['total_s']:.1f}",
                  flush=True)
    write_rows(path / "bench.csv", rows)
    write_config(base, path / "config.ini")
    if base["plots"]:
        from fexpide import plots as fig

        fig.bench_figure(rows, path / "bench.png")
    print(f"run_dir {path}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERIC


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (default: $FEX_DEFAULT_CONFIG)")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    p.add_argument("-v", "--verbose", action="store_true", help="progress lines on stderr")
    for key in KEYS:
        # values stay strings here so file and flag go through one parser
        p.add_argument("--" + key.name.replace("_", "-"), dest=key.name, default=None, help=key.help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fexpide", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    solve_p = sub.add_parser("solve", help="search for a closed-form solution")
    _add_config_flags(solve_p)
    solve_p.set_defaults(func=cmd_solve)
    val_p = sub.add_parser("validate", help="run the built-in oracle checks")
    val_p.add_argument("--seed", type=int, default=0)
    val_p.set_defaults(func=cmd_validate)
    bench_p = sub.add_parser("bench", help="sweep dimensions and seeds, write bench.csv")
    _add_config_flags(bench_p)
    bench_p.add_argument("--dims", type=int, nargs="+", required=True)
    bench_p.add_argument("--seeds", type=int, nargs="+")
    bench_p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
