"""Replication harness: config resolution, per-replication runs and sweeps.

Replication ``r`` under base seed ``s`` draws its dataset, split and learner
seeds from ``derive_seed(s, r)`` (plus the sweep point index when sweeping),
so every row can be regenerated on its own and rows are identical whether the
run uses one worker or many.
"""

from __future__ import annotations

import copy
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import analysis, cdml, dml, nets
from .datagen import (
    DgpConfig,
    SemiSynthConfig,
    build_semisynthetic,
    dgp_from_truth,
    load_csv,
    read_dataset,
    sample_plr,
)
from .forest import ForestConfig
from .seeding import derive_seed
from .types import Dataset

CONFIG_SCHEMA_VERSION = 1

DML_NN = "dml_nn"
DML_RF = "dml_rf"
CDML = "cdml"
METHODS = (DML_NN, DML_RF, CDML)

SWEEP_PARAMS = ("rho", "sigma_u", "theta", "n")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (a usage error)."""


def _dataclass_from(cls, obj: Mapping | None, what: str):
    obj = dict(obj or {})
    try:
        return cls(**obj)
    except TypeError as exc:
        raise ConfigError(f"{what}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{what}: {exc}") from None


@dataclass
class ExperimentConfig:
    seed: int = 0
    dgp: dict = field(default_factory=dict)
    csv: str | None = None
    sidecar: str | None = None
    semisynthetic: dict | None = None
    methods: tuple[str, ...] = (DML_NN,)
    fractions: tuple[float, float, float] = dml.DEFAULT_FRACTIONS
    net: dict = field(default_factory=dict)
    forest: dict = field(default_factory=dict)
    gamma_grid: tuple[float, ...] | None = None  # default grid when tuning, (0,) otherwise
    cdml_tune: bool = True
    cdml_weights: dict = field(default_factory=lambda: {"alpha": 1.0, "beta": 1.0})
    shared_stopping: bool = False
    oracle: bool = False
    n_replications: int = 1
    sweep: dict | None = None
    sigma_l: tuple[float, ...] = (0.0,)
    mc_n: int = analysis.DEFAULT_MC_N
    bootstrap: dict = field(default_factory=dict)
    out: str = "results"

    def __post_init__(self):
        if isinstance(self.methods, str):
            self.methods = (self.methods,)
        self.methods = tuple(self.methods)
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(METHODS)}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        if self.n_replications < 1:
            raise ConfigError("n_replications must be >= 1")
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.gamma_grid is None:
            self.gamma_grid = cdml.DEFAULT_RAW_GRID if self.cdml_tune else (0.0,)
        self.gamma_grid = tuple(float(g) for g in self.gamma_grid)
        self.sigma_l = tuple(float(s) for s in self.sigma_l)
        if self.csv is not None and self.dgp:
            raise ConfigError("give either a dgp block or a csv source, not both")
        if self.sweep is not None:
            if self.sweep.get("param") not in SWEEP_PARAMS:
                raise ConfigError(f"sweep.param must be one of {SWEEP_PARAMS}")
            if not self.sweep.get("values"):
                raise ConfigError("sweep.values must be a non-empty list")
        # fail early on bad sub-configs
        self.dgp_config()
        self.learner()
        if self.cdml_tune:
            try:
                cdml.GammaGrid(self.gamma_grid)
            except ValueError as exc:
                raise ConfigError(f"gamma_grid: {exc}") from None
        if not self.cdml_tune and len(self.gamma_grid) != 1:
            raise ConfigError("fixed-weight C-DML takes exactly one gamma value")
        if any(s < 0 for s in self.sigma_l):
            raise ConfigError("sigma_l values must be nonnegative")

    # -- resolution -----------------------------------------------------------

    def dgp_config(self, **overrides) -> DgpConfig:
        return _dataclass_from(DgpConfig, {**self.dgp, **overrides}, "dgp")

    def learner(self, kind: str = dml.MLP, seed: int | None = None) -> dml.LearnerConfig:
        net = dict(self.net)
        variant = net.pop("variant", nets.THREE_LAYER)
        keep = net.pop("keep_prob", nets.DEFAULT_KEEP_PROB)
        is_drop = net.pop("keep_prob_is_drop_rate", False)
        train = _dataclass_from(nets.TrainConfig, net, "net")
        forest = _dataclass_from(ForestConfig, self.forest, "forest")
        if seed is not None:
            train = replace(train, seed=seed)
            forest = replace(forest, seed=seed)
        if kind == dml.MLP and variant not in nets.VARIANTS:
            raise ConfigError(f"net.variant must be one of {nets.VARIANTS}")
        return dml.LearnerConfig(kind, variant, train, forest, keep, is_drop)

    def to_dict(self) -> dict:
        out = {k: copy.deepcopy(v) for k, v in vars(self).items()}
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        out["schema_version"] = CONFIG_SCHEMA_VERSION
        return out

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any]) -> "ExperimentConfig":
        obj = dict(obj or {})
        obj.pop("schema_version", None)
        if "method" in obj:
            if "methods" in obj:
                raise ConfigError("give either 'method' or 'methods'")
            obj["methods"] = obj.pop("method")
        data = obj.pop("data", None)
        if data is not None:
            data = dict(data)
            for key in ("dgp", "csv", "sidecar", "semisynthetic"):
                if key in data:
                    obj[key] = data.pop(key)
            if data:
                raise ConfigError(f"unknown data keys: {sorted(data)}")
        if "cdml" in obj:
            block = dict(obj.pop("cdml"))
            if "tune" in block:
                obj["cdml_tune"] = bool(block.pop("tune"))
            if "gamma_grid" in block:
                obj["gamma_grid"] = block.pop("gamma_grid")
            if block:
                obj["cdml_weights"] = block
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


# -- data --------------------------------------------------------------------------


def load_source(cfg: ExperimentConfig, seed: int, **dgp_overrides) -> Dataset:
    """Dataset for one replication: a fresh synthetic draw or the configured file."""
    if cfg.csv is None:
        return sample_plr(cfg.dgp_config(seed=seed, **dgp_overrides))
    if cfg.semisynthetic is not None:
        ss = dict(cfg.semisynthetic)
        if "forest" in ss:
            ss["forest"] = _dataclass_from(ForestConfig, ss["forest"], "semisynthetic.forest")
        ss_cfg = _dataclass_from(SemiSynthConfig, {**ss, "seed": seed}, "semisynthetic")
        return build_semisynthetic(load_csv(cfg.csv), ss_cfg)
    return read_dataset(cfg.csv, cfg.sidecar)


def _synthetic_dgp(data: Dataset) -> DgpConfig | None:
    try:
        return dgp_from_truth(data.truth)
    except ValueError:
        return None


# -- single estimates ----------------------------------------------------------------


def estimate(data: Dataset, cfg: ExperimentConfig, method: str, seed: int) -> dict:
    """One estimate with ``method``; returns a JSON-ready report plus the fitted pair."""
    splits = dml.split_indices(data.n, cfg.fractions, seed)
    if cfg.oracle:
        if _synthetic_dgp(data) is None:
            raise ConfigError("oracle nuisances need synthetic ground truth")
        rep = dml.run_dml(data, splits, cfg.learner(dml.ORACLE, seed))
        return {"method": "dml_oracle", "theta_hat": rep.theta_hat, "report": rep.to_dict(), "pair": rep.pair,
                "splits": splits}
    if method == DML_NN:
        rep = dml.run_dml(data, splits, cfg.learner(dml.MLP, seed), shared_stopping=cfg.shared_stopping)
        return {"method": method, "theta_hat": rep.theta_hat, "report": rep.to_dict(), "pair": rep.pair,
                "splits": splits}
    if method == DML_RF:
        rep = dml.run_dml(data, splits, cfg.learner(dml.FOREST, seed))
        return {"method": method, "theta_hat": rep.theta_hat, "report": rep.to_dict(), "pair": rep.pair,
                "splits": splits}
    learner = cfg.learner(dml.MLP, seed)
    if cfg.cdml_tune:
        rep = cdml.tune_and_run(data, splits, cfg.gamma_grid, learner, seed)
        return {"method": method, "theta_hat": rep.theta_hat_final, "report": rep.to_dict(), "pair": rep.pair,
                "splits": splits, "cdml": rep}
    w = cdml.LossWeights(
        float(cfg.cdml_weights.get("alpha", 1.0)),
        float(cfg.cdml_weights.get("beta", 1.0)),
        cfg.gamma_grid[0] * float(cfg.cdml_weights.get("gamma_scale", 1.0)),
        float(cfg.cdml_weights.get("gamma_scale", 1.0)),
    )
    run = cdml.run_cdml_fixed(data, splits.I1, splits.I2, w, learner, holdout=splits.I21, seed=seed)
    report = {
        "schema_version": cdml.REPORT_SCHEMA_VERSION,
        "method": "cdml_fixed",
        "theta_hat": run.theta_hat,
        "weights": vars(w).copy(),
        "learner": learner.describe(),
    }
    return {"method": method, "theta_hat": run.theta_hat, "report": report, "pair": run.pair, "splits": splits}


# -- replications --------------------------------------------------------------------


def _sweep_points(cfg: ExperimentConfig) -> list[tuple[int, str | None, Any]]:
    if cfg.sweep is None:
        return [(0, None, None)]
    p = cfg.sweep["param"]
    return [(k, p, v) for k, v in enumerate(cfg.sweep["values"])]


def replication_seed(base: int, rep: int, point: int = 0) -> int:
    return derive_seed(base, rep, point)


def run_replication(cfg: ExperimentConfig, rep: int, point: int = 0, param=None, value=None) -> list[dict]:
    """All methods on one dataset; one row per method, failures recorded in the row."""
    seed = replication_seed(cfg.seed, rep, point)
    overrides = {} if param is None else {param: value}
    base = {"replication": rep, "seed": seed, "sweep_param": param, "sweep_value": value}
    try:
        data = load_source(cfg, seed, **overrides)
    except Exception as exc:  # noqa: BLE001 - recorded, run continues
        return [dict(base, method=m, ok=False, error=f"{type(exc).__name__}: {exc}") for m in cfg.methods]
    dgp = _synthetic_dgp(data)
    theta = _true_theta(data)
    rows = []
    for method in cfg.methods:
        row = dict(base, method=method, dgp=None if dgp is None else dgp.nuisance, theta=theta)
        try:
            est = estimate(data, cfg, method, seed)
            row["theta_hat"] = est["theta_hat"]
            if "cdml" in est:
                row["gamma_hat"] = est["cdml"].gamma_hat
                row["raw_gamma_hat"] = est["cdml"].raw_gamma_hat
            if dgp is not None:
                X2 = data.X[est["splits"].I2]
                rec = analysis.record_from_pair(est["theta_hat"], theta, est["pair"], X2, dgp)
                row.update(cov_dm_dl=rec.cov_dm_dl, mse_m=rec.mse_m, mse_l=rec.mse_l)
            row["ok"] = True
        except Exception as exc:  # noqa: BLE001
            row.update(ok=False, error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc(limit=3))
        rows.append(row)
    return rows


def _true_theta(data: Dataset) -> float | None:
    if not data.truth or "theta" not in data.truth:
        return None
    return float(data.truth["theta"])


def _map(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *j) for j in jobs]
        return [f.result() for f in futures]


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> tuple[list[dict], dict]:
    """Rows for every (sweep point, replication, method) and per-group summaries."""
    jobs = [(cfg, r, k, p, v) for k, p, v in _sweep_points(cfg) for r in range(cfg.n_replications)]
    rows = [row for rows in _map(run_replication, jobs, workers) for row in rows]
    return rows, summarize(rows)


def summarize(rows: list[dict]) -> dict:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["sweep_value"], row["method"]), []).append(row)
    out = []
    for (value, method), grp in groups.items():
        ok = [r for r in grp if r.get("ok")]
        entry = {"sweep_value": value, "method": method, "n_ok": len(ok), "n_failed": len(grp) - len(ok)}
        if ok and all(r.get("theta") is not None for r in ok):
            if all("cov_dm_dl" in r for r in ok):
                entry.update(analysis.replication_metrics(ok).to_dict())
            else:
                err = np.array([r["theta_hat"] - r["theta"] for r in ok])
                entry.update(bias=float(err.mean()), mse=float(np.mean(err**2)))
        elif ok:
            th = np.array([r["theta_hat"] for r in ok])
            entry.update(mean_theta_hat=float(th.mean()))
        out.append(entry)
    return {"groups": out, "n_failed": sum(g["n_failed"] for g in out)}


# -- bias verification ----------------------------------------------------------------


def bias_verify_replication(cfg: ExperimentConfig, rep: int) -> list[dict]:
    """Empirical error and theoretical bias of plain DML, one row per sigma_l."""
    seed = replication_seed(cfg.seed, rep)
    dgp = cfg.dgp_config(seed=seed)
    data = sample_plr(dgp)
    splits = dml.split_indices(data.n, cfg.fractions, seed)
    learner = cfg.learner(dml.FOREST if cfg.methods == (DML_RF,) else dml.MLP, seed)
    pair = dml.fit_nuisances(data, splits.I1, splits.I21, learner)
    rows = []
    for k, sigma_l in enumerate(cfg.sigma_l):
        p = analysis.perturb_lhat(pair, sigma_l, seed=derive_seed(seed, 7, k))
        theta_hat = dml.estimate_theta(dml.residuals(data, splits.I2, p))
        b = analysis.theoretical_bias(p, dgp, mc_n=cfg.mc_n, seed=derive_seed(seed, 8))
        rows.append(
            {
                "replication": rep,
                "seed": seed,
                "sigma_l": sigma_l,
                "theta": dgp.theta,
                "theta_hat": theta_hat,
                "error": theta_hat - dgp.theta,
                "B_dml": b.B_dml,
                "E_dm_dl": b.E_dm_dl,
                "E_dm_sq": b.E_dm_sq,
            }
        )
    return rows


def bias_verify(cfg: ExperimentConfig, workers: int = 1) -> tuple[list[dict], dict]:
    if cfg.csv is not None:
        raise ConfigError("bias verification needs a synthetic dgp")
    jobs = [(cfg, r) for r in range(cfg.n_replications)]
    rows = [row for rows in _map(bias_verify_replication, jobs, workers) for row in rows]
    summary = {}
    for s in cfg.sigma_l:
        sel = [r for r in rows if r["sigma_l"] == s]
        key = repr(s)
        if len(sel) >= 2 and np.ptp([r["B_dml"] for r in sel]) > 0:
            summary[key] = analysis.regression_summary([r["B_dml"] for r in sel], [r["error"] for r in sel])
        else:
            summary[key] = {"slope": math.nan, "intercept": math.nan, "r2": math.nan, "n": len(sel)}
    return rows, summary


# -- bootstrap study --------------------------------------------------------------------


def bootstrap_study(cfg: ExperimentConfig) -> list[dict]:
    """DML estimate and percentile CI on nested subsets of one dataset."""
    opts = dict(cfg.bootstrap)
    n_resamples = int(opts.get("n_resamples", 200))
    level = float(opts.get("level", 0.95))
    mode = opts.get("mode", "frozen")
    if mode not in ("frozen", "full"):
        raise ConfigError("bootstrap.mode must be 'frozen' or 'full'")
    data = load_source(cfg, cfg.seed)
    sizes = [int(s) for s in opts.get("subset_sizes", [data.n])]
    if any(s < 10 or s > data.n for s in sizes):
        raise ConfigError(f"subset sizes must lie in [10, {data.n}]")
    order = np.random.default_rng(derive_seed(cfg.seed, 11)).permutation(data.n)
    method = cfg.methods[0]
    kind = {DML_RF: dml.FOREST}.get(method, dml.MLP)
    if cfg.oracle:
        kind = dml.ORACLE
    out = []
    for size in sizes:
        sub = data.subset(np.sort(order[:size]))
        splits = dml.split_indices(sub.n, cfg.fractions, cfg.seed)
        learner = cfg.learner(kind, cfg.seed)
        if mode == "frozen":
            pair = dml.fit_nuisances(sub, splits.I1, splits.I21, learner)
            ci = analysis.bootstrap_ci(sub, splits.I2, pair, n_resamples, level, seed=derive_seed(cfg.seed, size))
        else:

            def estimator(d: Dataset, s: int) -> float:
                sp = dml.split_indices(d.n, cfg.fractions, derive_seed(cfg.seed, size, s))
                return dml.run_dml(d, sp, cfg.learner(kind, derive_seed(cfg.seed, size, s))).theta_hat

            ci = analysis.bootstrap_ci_full(sub, estimator, n_resamples, level, seed=derive_seed(cfg.seed, size))
        out.append({"subset_size": size, "method": "dml_oracle" if cfg.oracle else method, **ci.to_dict()})
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
