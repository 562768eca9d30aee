"""Command-line entry point: simulate, recover, benchmark, cost-scan.

Exit codes are stable: 0 success, 1 quality-gate failure, 2 usage or
configuration error. Option values resolve as CLI flag, then config file,
then built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import resource
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import cost
from .dynamics import SYSTEM_NAMES, catalog_system
from .errors import MerindaError, UnknownSystem
from .library import build_library
from .sindy import StlsqConfig, coefficient_mse, reconstruction_error, stlsq_recover, support_scores
from .train import DESK_PRESET, TrainConfig, load_data, train

logger = logging.getLogger("merinda")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
SUITES = {"table3": ("lotka", "lorenz", "f8", "pathogenic")}
METHODS = ("sindy", "merinda")

# option name -> (type, group); group says where the value ends up
OPTIONS = {
    "steps": (int, "data"),
    "dt": (float, "data"),
    "noise": (float, "data"),
    "noise_seed": (int, "data"),
    "library_order": (int, "data"),
    "epsilon": (float, "gate"),
    "ridge_lambda": (float, "sindy"),
    "threshold": (float, "sindy"),
    "max_sweeps": (int, "sindy"),
    "batch_size": (int, "merinda"),
    "window_length": (int, "merinda"),
    "epochs": (int, "merinda"),
    "learning_rate": (float, "merinda"),
    "prune_epoch": (int, "merinda"),
    "target_sparsity": (int, "merinda"),
    "solver_step": (float, "merinda"),
    "hidden_size": (int, "merinda"),
    "consistency": (float, "merinda"),
    "whitening_jitter": (float, "merinda"),
    "aggregate": (str, "merinda"),
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# reports

def load_schema() -> dict:
    return json.loads(resources.files("merinda").joinpath("schema/report.json").read_text())


def validate_report(report) -> None:
    import jsonschema

    jsonschema.validate(report, load_schema())


def _peak_memory_bytes() -> int:
    # ru_maxrss is KiB on Linux
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def _finite_or_none(value):
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def run_experiment(system: str | None, method: str, seed: int, settings: dict, data_path: str | None = None) -> dict:
    """Run one recovery and return its report dict (schema-valid)."""
    settings = dict(settings)
    data_opts = {k: settings.pop(k) for k in ("steps", "dt", "noise", "noise_seed", "library_order") if k in settings}
    epsilon = settings.pop("epsilon", None)
    if data_opts.get("noise") and "noise_seed" not in data_opts:
        data_opts["noise_seed"] = seed
    order = data_opts.pop("library_order", None)

    start = time.perf_counter()
    data, spec = load_data(system, data_path, **data_opts)
    if spec is not None and order in (None, spec.library_order):
        library, truth = spec.library, spec.true_coefficients
    else:
        n_vars = spec.library.n_vars if spec else data.n_states + data.n_inputs
        library, truth = build_library(n_vars, order or 2), None

    if method == "sindy":
        config = StlsqConfig(**settings)
        fit = stlsq_recover(data, library, config)
        coefficients, shifts = fit.coefficients, np.zeros(0)
        recon = reconstruction_error(coefficients, data)
        recon_mse, diverged = recon.mse, recon.diverged
        method_config = asdict(config)
    else:
        merged = dict(DESK_PRESET)
        merged.update(settings)
        merged["seed"] = seed
        if truth is not None and "target_sparsity" not in merged:
            merged["target_sparsity"] = len(truth.support)
        config = TrainConfig(**merged)
        result = train(data, library, config, truth)
        coefficients, shifts = result.coefficients, np.asarray(result.input_shifts)
        recon_mse, diverged = result.reconstruction_mse, result.diverged
        method_config = config.to_dict()
    wall = time.perf_counter() - start

    precision = recall = cmse = None
    if truth is not None:
        cmse = coefficient_mse(coefficients, truth)
        precision, recall = support_scores(coefficients, truth)
    passed = not diverged and (epsilon is None or recon_mse <= epsilon)
    data_config = {"system": system, "path": data_path}
    data_config.update(data_opts)
    if order is not None:
        data_config["library_order"] = order
    report = {
        "system": system or Path(data_path).stem,
        "method": method,
        "seed": int(seed),
        "config": {"data": data_config, "method": method_config, "epsilon": epsilon},
        "reconstruction_mse": float(recon_mse),
        "coefficient_mse": _finite_or_none(cmse),
        "support_precision": precision,
        "support_recall": recall,
        "wall_time": wall,
        "peak_memory_estimate": _peak_memory_bytes(),
        "diverged": bool(diverged),
        "passed": bool(passed),
        "coefficients": {
            "states": list(coefficients.state_names),
            "terms": library.term_names(),
            "values": coefficients.values.tolist(),
        },
        "input_shifts": shifts.tolist(),
    }
    return report


def _run_cell(args):
    return run_experiment(*args)


def _worker_count() -> int:
    raw = os.environ.get("MERINDA_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise UsageError(f"MERINDA_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def run_cells(cells: list) -> list:
    """Run (system, method, seed, settings, path) cells, results in input order."""
    workers = min(_worker_count(), len(cells))
    if workers <= 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_run_cell, cells))


# ---------------------------------------------------------------------------
# option resolution

def _read_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    try:
        return cost.parse_config(text)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def resolve_settings(args, method: str) -> dict:
    """Merge config-file values under CLI flags, keeping options for ``method``."""
    raw = _read_config_file(getattr(args, "config", None))
    unknown = set(raw) - set(OPTIONS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    settings = {}
    for key, value in raw.items():
        kind, _ = OPTIONS[key]
        try:
            settings[key] = kind(value)
        except ValueError:
            raise UsageError(f"config key {key}: cannot parse {value!r}") from None
    for key in OPTIONS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    keep = {"data", "gate", method}
    return {k: v for k, v in settings.items() if OPTIONS[k][1] in keep}


def _add_option_flags(parser, groups):
    for key, (kind, group) in OPTIONS.items():
        if group in groups:
            parser.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    data, _ = load_data(args.system, None, args.steps, args.dt, args.noise, args.seed)
    text = data.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_recover(args) -> int:
    if not args.system and not args.data:
        raise UsageError("one of --system or --data is required")
    if args.system and args.data:
        raise UsageError("--system and --data are mutually exclusive")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    if args.system:
        catalog_system(args.system)
    settings = resolve_settings(args, args.method)
    seeds = range(args.seed, args.seed + args.seeds)
    cells = [(args.system, args.method, s, settings, args.data) for s in seeds]
    reports = run_cells(cells)
    payload = reports[0] if len(reports) == 1 else reports
    validate_report(payload)
    if args.report:
        Path(args.report).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    for r in reports:
        print(f"{r['system']} {r['method']} seed={r['seed']} reconstruction_mse={r['reconstruction_mse']:.6g} "
              f"passed={r['passed']}")
    mean_mse = float(np.mean([r["reconstruction_mse"] for r in reports]))
    if len(reports) > 1:
        print(f"mean reconstruction_mse={mean_mse:.6g} over {len(reports)} seeds")
    epsilon = settings.get("epsilon")
    if any(r["diverged"] for r in reports):
        return EXIT_FAILED
    if epsilon is not None and mean_mse > epsilon:
        return EXIT_FAILED
    return EXIT_OK


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return "", ""
    arr = np.asarray(values, dtype=float)
    return repr(float(arr.mean())), repr(float(arr.std()))


def summary_csv(reports: list) -> str:
    """Per (system, method) mean and std; wall_time and memory are left out."""
    groups = {}
    for r in reports:
        groups.setdefault((r["system"], r["method"]), []).append(r)
    lines = ["system,method,n_seeds,mean_reconstruction_mse,std_reconstruction_mse,"
             "mean_coefficient_mse,std_coefficient_mse,mean_support_recall,n_passed"]
    for (system, method) in sorted(groups):
        rows = sorted(groups[(system, method)], key=lambda r: r["seed"])
        rm, rs = _mean_std([r["reconstruction_mse"] for r in rows])
        cm, cs = _mean_std([r["coefficient_mse"] for r in rows])
        recm, _ = _mean_std([r["support_recall"] for r in rows])
        passed = sum(r["passed"] for r in rows)
        lines.append(f"{system},{method},{len(rows)},{rm},{rs},{cm},{cs},{recm},{passed}")
    return "\n".join(lines) + "\n"


def cmd_benchmark(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    out = Path(args.out)
    cells = []
    for system in SUITES[args.suite]:
        for method in METHODS:
            settings = resolve_settings(args, method)
            for seed in range(args.seeds):
                cells.append((system, method, seed, settings, None))
    reports = run_cells(cells)
    runs = out / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    for r in reports:
        validate_report(r)
        name = f"{r['system']}_{r['method']}_seed{r['seed']}.json"
        (runs / name).write_text(json.dumps(r, indent=2, sort_keys=True) + "\n")
    text = summary_csv(reports)
    (out / "summary.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_cost_scan(args) -> int:
    values = _read_config_file(args.config)
    try:
        mem_params, energy_params = cost.params_from_config(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    if args.catalog:
        labels, schedule = cost.catalog_schedule()
    else:
        try:
            schedule = cost.parse_schedule(Path(args.schedule).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"bad schedule: {exc}") from None
        labels = [f"N{n}_M{m}" for n, m in schedule]
    try:
        points = cost.koopman_sweep(schedule, mem_params, energy_params, labels)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = cost.sweep_csv(points)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="merinda",
        description="Sparse model recovery with SINDy and a GRU neural-flow model.",
        epilog="Option precedence: command-line flag > --config file > built-in default. "
               "Exit codes: 0 success, 1 quality-gate failure, 2 usage error.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated trajectory as CSV")
    p.add_argument("system", choices=SYSTEM_NAMES)
    p.add_argument("--steps", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std on the states")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recover", help="recover a model from data")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--system", choices=SYSTEM_NAMES)
    p.add_argument("--data", help="trajectory CSV as written by simulate")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--config", help="key = value file with method and data options")
    p.add_argument("--report", help="write the JSON report here")
    _add_option_flags(p, {"data", "gate", "sindy", "merinda"})
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("benchmark", help="run a benchmark suite")
    p.add_argument("--suite", choices=sorted(SUITES), default="table3")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value file with method and data options")
    _add_option_flags(p, {"sindy", "merinda"})
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("cost-scan", help="evaluate the memory and energy models")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--schedule", help="CSV of N,M pairs")
    src.add_argument("--catalog", action="store_true", help="use the five benchmark systems")
    p.add_argument("--config", help="key = value file of cost parameters")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_cost_scan)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"merinda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnknownSystem as exc:
        print(f"merinda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError) as exc:
        print(f"merinda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MerindaError as exc:
        print(f"merinda: recovery failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
