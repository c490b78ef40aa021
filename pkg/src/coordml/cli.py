"""Command-line driver.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import datagen, experiments
from .experiments import ConfigError, ExperimentConfig

OUTPUT_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="base seed (overrides config)")
    common.add_argument("--workers", type=int, default=1, help="replication-level worker processes")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--method", choices=experiments.METHODS, action="append",
                        help="estimation method; repeat for several")
    common.add_argument("--gamma-grid", type=_float_list, help="raw gamma grid, e.g. 0,0.1,1")
    common.add_argument("--rho", type=float, help="AR(1) covariate correlation")
    common.add_argument("--sigma-u", type=float, help="outcome noise scale")
    common.add_argument("--reps", type=int, help="number of replications")

    p = _Parser(prog="coordml", description="Double machine learning with coordinated nuisance training.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic dataset (CSV + truth sidecar)")
    s.add_argument("--n", type=int, help="number of rows")

    e = sub.add_parser("estimate", parents=[common], help="estimate the treatment effect on one dataset")
    e.add_argument("--data", help="dataset CSV written by 'simulate' (sidecar read if present)")
    e.add_argument("--oracle", action="store_true", help="use the true nuisances (synthetic data only)")
    e.add_argument("--shared-stopping", action="store_true",
                   help="train the DML pair on one step schedule and stopping rule")
    e.add_argument("--table", help="write the C-DML gamma table as CSV here")

    sub.add_parser("experiment", parents=[common], help="multi-replication study")

    b = sub.add_parser("bias-verify", parents=[common], help="empirical versus theoretical DML bias")
    b.add_argument("--sigma-l", type=_float_list, help="l_hat perturbation scales, e.g. 0,1,10")

    bs = sub.add_parser("bootstrap", parents=[common], help="percentile bootstrap CI on nested subsets")
    bs.add_argument("--data", help="dataset CSV")
    bs.add_argument("--subset-sizes", type=_float_list, help="e.g. 1000,2000")
    bs.add_argument("--n-resamples", type=int)
    bs.add_argument("--level", type=float)
    bs.add_argument("--full-pipeline", action="store_true", help="retrain the nuisances on every resample")
    bs.add_argument("--oracle", action="store_true")
    return p


# -- config resolution --------------------------------------------------------------


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        obj = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML: {exc}") from None
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return obj


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    raw = _read_config(args.config)
    cfg = ExperimentConfig.from_mapping(raw)
    o: dict[str, Any] = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.method:
        o["methods"] = tuple(args.method)
    if args.gamma_grid is not None:
        o["gamma_grid"] = tuple(args.gamma_grid)
    if args.reps is not None:
        o["n_replications"] = args.reps
    if args.out is not None:
        o["out"] = args.out
    dgp = dict(cfg.dgp)
    for flag, key in (("rho", "rho"), ("sigma_u", "sigma_u"), ("n", "n")):
        val = getattr(args, flag, None)
        if val is not None:
            dgp[key] = val
    if dgp != cfg.dgp:
        o["dgp"] = dgp
    if getattr(args, "data", None):
        o["csv"] = args.data
        side = Path(args.data).with_suffix(".truth.json")
        o["sidecar"] = str(side)
        o["dgp"] = {}
    if getattr(args, "oracle", False):
        o["oracle"] = True
    if getattr(args, "shared_stopping", False):
        o["shared_stopping"] = True
    if getattr(args, "sigma_l", None) is not None:
        o["sigma_l"] = tuple(args.sigma_l)
    boot = dict(cfg.bootstrap)
    if getattr(args, "subset_sizes", None) is not None:
        boot["subset_sizes"] = [int(s) for s in args.subset_sizes]
    if getattr(args, "n_resamples", None) is not None:
        boot["n_resamples"] = args.n_resamples
    if getattr(args, "level", None) is not None:
        boot["level"] = args.level
    if getattr(args, "full_pipeline", False):
        boot["mode"] = "full"
    if boot != cfg.bootstrap:
        o["bootstrap"] = boot
    if not o:
        return cfg
    merged = {k: v for k, v in vars(cfg).items()}
    merged.update(o)
    try:
        return ExperimentConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# -- output helpers -----------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return _jsonable(obj.item())
    return obj


def _envelope(command: str, cfg: ExperimentConfig, **payload) -> dict:
    return _jsonable(
        {"schema_version": OUTPUT_SCHEMA_VERSION, "command": command, "seed": cfg.seed, "config": cfg.to_dict(),
         **payload}
    )


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], columns: Sequence[str] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns and k != "traceback")
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r.get(k), float) else r[k]))
                        for k in columns})


# -- commands ------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    data = datagen.sample_plr(cfg.dgp_config(seed=cfg.seed))
    if out.suffix != ".csv":
        out = out / "data.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    sidecar = out.with_suffix(".truth.json")
    datagen.write_dataset(data, out, sidecar)
    return _envelope("simulate", cfg, rows=data.n, csv=str(out), sidecar=str(sidecar))


def cmd_estimate(cfg: ExperimentConfig, out: Path, table: str | None = None) -> dict:
    data = experiments.load_source(cfg, cfg.seed)
    est = experiments.estimate(data, cfg, cfg.methods[0], cfg.seed)
    result = _envelope("estimate", cfg, method=est["method"], theta_hat=est["theta_hat"], report=est["report"],
                       n=data.n)
    _write_json(out if out.suffix == ".json" else out / "estimate.json", result)
    if table is not None and "cdml" in est:
        theta = data.truth.get("theta") if data.truth else None
        Path(table).write_text(est["cdml"].table_csv(theta))
    return result


def cmd_experiment(cfg: ExperimentConfig, out: Path, workers: int) -> dict:
    rows, summary = experiments.run_experiment(cfg, workers)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["sweep_param", "sweep_value", "replication", "seed", "method", "dgp", "ok", "theta", "theta_hat",
            "cov_dm_dl", "mse_m", "mse_l", "gamma_hat", "raw_gamma_hat", "error"]
    _write_csv(out / "metrics.csv", rows, cols)
    result = _envelope("experiment", cfg, summary=summary)
    _write_json(out / "summary.json", result)
    return result


def cmd_bias_verify(cfg: ExperimentConfig, out: Path, workers: int) -> dict:
    rows, summary = experiments.bias_verify(cfg, workers)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "bias_scatter.csv", rows)
    result = _envelope("bias-verify", cfg, summary=summary)
    _write_json(out / "bias_summary.json", result)
    return result


def cmd_bootstrap(cfg: ExperimentConfig, out: Path) -> dict:
    rows = experiments.bootstrap_study(cfg)
    result = _envelope("bootstrap", cfg, intervals=rows)
    _write_json(out if out.suffix == ".json" else out / "bootstrap.json", result)
    return result


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"coordml: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"coordml: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(cfg.out)
    try:
        if args.command == "simulate":
            result = cmd_simulate(cfg, out)
        elif args.command == "estimate":
            result = cmd_estimate(cfg, out, args.table)
        elif args.command == "experiment":
            result = cmd_experiment(cfg, out, args.workers)
        elif args.command == "bias-verify":
            result = cmd_bias_verify(cfg, out, args.workers)
        else:
            result = cmd_bootstrap(cfg, out)
    except ConfigError as exc:
        print(f"coordml: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - structured error, nonzero exit
        err = {"schema_version": OUTPUT_SCHEMA_VERSION, "command": args.command, "ok": False,
               "error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(err), file=sys.stderr)
        return EXIT_RUNTIME

    if args.command == "estimate":
        print(json.dumps({k: result[k] for k in ("method", "theta_hat")}, sort_keys=True))
    elif args.command in ("experiment",):
        print(json.dumps(result["summary"], sort_keys=True))
        if result["summary"]["n_failed"]:
            return EXIT_RUNTIME
    elif args.command == "bias-verify":
        print(json.dumps(result["summary"], sort_keys=True))
    elif args.command == "bootstrap":
        print(json.dumps(result["intervals"], sort_keys=True))
    else:
        print(json.dumps({"rows": result["rows"], "csv": result["csv"]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
