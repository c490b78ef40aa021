"""Data-generating processes for partially linear models.

Covariates come from a standard Gaussian AR(1) process across the feature
index. Every row is assigned to a majority or minority group by thresholding
its first feature, and the built-in nuisance pairs switch formula by group.
Semi-synthetic data keep real covariates and treatment but replace the outcome
with a random-forest surrogate plus a known treatment effect.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .forest import ForestConfig, fit_forest
from .types import Dataset, NuisancePair

LINEAR_GROUPS = "linear_groups"
RELU_EXP = "relu_exp"
NUISANCE_IDS = (LINEAR_GROUPS, RELU_EXP)

HOMOGENEOUS = "homogeneous"
HETEROGENEOUS = "heterogeneous"

# standard-normal 80th percentile: ~20% of rows end up in the minority group
DEFAULT_THRESHOLD = 0.8416


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class DgpConfig:
    n: int = 2000
    d: int = 10
    rho: float = 0.8
    nuisance: str = LINEAR_GROUPS
    theta: float = 1.0
    effect_mode: str = HOMOGENEOUS
    sigma_u: float = 1.0
    sigma_v: float = 1.0
    majority_threshold: float = DEFAULT_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must satisfy |rho| < 1")
        if self.sigma_u < 0 or self.sigma_v < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.nuisance not in NUISANCE_IDS:
            raise ValueError(f"unknown nuisance pair {self.nuisance!r}")
        if self.effect_mode not in (HOMOGENEOUS, HETEROGENEOUS):
            raise ValueError(f"unknown effect_mode {self.effect_mode!r}")
        if self.d < 10:
            raise ValueError("built-in nuisance pairs use features up to x9, need d >= 10")


def sample_ar1(n: int, d: int, rho: float, seed=0) -> np.ndarray:
    """Rows of a stationary AR(1) chain with unit marginal variance."""
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must satisfy |rho| < 1")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, d))
    X = np.empty((n, d))
    X[:, 0] = eps[:, 0]
    innov = math.sqrt(1.0 - rho * rho)
    for j in range(1, d):
        X[:, j] = rho * X[:, j - 1] + innov * eps[:, j]
    return X


def assign_groups(X, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """True marks the minority group: first feature strictly above ``threshold``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("X must be a 2-d array with at least one column")
    return X[:, 0] > threshold


def _relu(z):
    return np.maximum(z, 0.0)


def nuisance_eval(nuisance: str, which: str, X, groups) -> np.ndarray:
    """Evaluate the true ``m`` or ``g`` of a built-in nuisance pair."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 10:
        raise ValueError(f"built-in nuisance pairs need d >= 10, got shape {X.shape}")
    minority = np.asarray(groups, dtype=bool)
    x = X.T
    if nuisance == LINEAR_GROUPS:
        if which == "m":
            major = x[1] + 10 * x[3] + 5 * x[6]
            minor = 10 * x[1] + x[3] + 5 * x[6]
        elif which == "g":
            major = x[0] + 10 * x[2] + 5 * x[5]
            minor = 10 * x[0] + x[2] + 5 * x[5]
        else:
            raise ValueError(f"which must be 'm' or 'g', got {which!r}")
        return np.where(minority, minor, major)
    if nuisance == RELU_EXP:
        if which == "m":
            major = _relu(0.5 * x[1] ** 2 + x[3] ** 3 + x[5])
            minor = _relu(-2.5 * x[1] ** 2 + x[4] + x[9])
            return np.where(minority, minor, major)
        if which == "g":
            return x[9] + np.abs(x[2]) + 0.5 * np.exp(x[4] + x[5])
        raise ValueError(f"which must be 'm' or 'g', got {which!r}")
    raise ValueError(f"unknown nuisance pair {nuisance!r}")


def sample_plr(cfg: DgpConfig) -> Dataset:
    """Draw ``(X, D, Y)`` from the partially linear model of ``cfg``."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    X = sample_ar1(cfg.n, cfg.d, cfg.rho, seeds[0])
    groups = assign_groups(X, cfg.majority_threshold)
    m = nuisance_eval(cfg.nuisance, "m", X, groups)
    g = nuisance_eval(cfg.nuisance, "g", X, groups)
    rng = np.random.default_rng(seeds[1])
    V = cfg.sigma_v * rng.standard_normal(cfg.n)
    U = cfg.sigma_u * rng.standard_normal(cfg.n)
    if cfg.effect_mode == HETEROGENEOUS:
        theta_i = cfg.theta + rng.standard_normal(cfg.n)
    else:
        theta_i = np.full(cfg.n, float(cfg.theta))
    D = m + V
    Y = g + D * theta_i + U
    truth = {
        "source": "synthetic",
        "theta": float(cfg.theta),
        "effect_mode": cfg.effect_mode,
        "nuisance": cfg.nuisance,
        "var_v": float(cfg.sigma_v) ** 2,
        "sigma_u": float(cfg.sigma_u),
        "dgp": asdict(cfg),
    }
    if cfg.effect_mode == HETEROGENEOUS:
        truth["theta_i"] = theta_i
    return Dataset(X, D, Y, truth)


def sample_covariates(cfg: DgpConfig, n: int, seed) -> np.ndarray:
    """Fresh covariate rows from the distribution used by ``cfg``."""
    return sample_ar1(n, cfg.d, cfg.rho, seed)


def oracle_functions(cfg: DgpConfig):
    """The true ``m``, ``g`` and ``l = g + theta * m`` as functions of X."""

    def m(X):
        return nuisance_eval(cfg.nuisance, "m", X, assign_groups(X, cfg.majority_threshold))

    def g(X):
        return nuisance_eval(cfg.nuisance, "g", X, assign_groups(X, cfg.majority_threshold))

    def l(X):
        return g(X) + cfg.theta * m(X)

    return m, g, l


def oracle_pair(cfg: DgpConfig) -> NuisancePair:
    m, _, l = oracle_functions(cfg)
    return NuisancePair(m=m, l=l, meta={"learner": "oracle", "nuisance": cfg.nuisance})


def dgp_from_truth(truth: Mapping[str, Any]) -> DgpConfig:
    if not truth or truth.get("source") != "synthetic" or "dgp" not in truth:
        raise ValueError("dataset carries no synthetic ground truth")
    return DgpConfig(**truth["dgp"])


# -- semi-synthetic construction ---------------------------------------------


@dataclass(frozen=True)
class SemiSynthConfig:
    treatment: str | int
    outcome: str | int
    forest: ForestConfig = field(default_factory=ForestConfig)
    fractions: tuple[float, float] = (0.5, 0.5)
    theta: float = 0.0
    effect_mode: str = HOMOGENEOUS
    sigma_u: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 2 or min(self.fractions) <= 0 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValueError("fractions must be two positive numbers summing to 1")
        if self.effect_mode not in (HOMOGENEOUS, HETEROGENEOUS):
            raise ValueError(f"unknown effect_mode {self.effect_mode!r}")
        if self.sigma_u < 0:
            raise ValueError("sigma_u must be nonnegative")


@dataclass
class Table:
    """Numeric columns loaded from a CSV file."""

    columns: list[str]
    data: np.ndarray  # (n_rows, n_columns)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    def index(self, col: str | int) -> int:
        if isinstance(col, (int, np.integer)):
            if not 0 <= col < len(self.columns):
                raise IngestionError(f"column index {col} out of range")
            return int(col)
        try:
            return self.columns.index(col)
        except ValueError:
            raise IngestionError(f"missing column {col!r}") from None

    def column(self, col: str | int) -> np.ndarray:
        return self.data[:, self.index(col)]


def build_semisynthetic(raw: Table, cfg: SemiSynthConfig) -> Dataset:
    t = raw.index(cfg.treatment)
    y = raw.index(cfg.outcome)
    if t == y:
        raise IngestionError("treatment and outcome must be different columns")
    covs = [j for j in range(len(raw.columns)) if j not in (t, y)]
    if not covs:
        raise IngestionError("need at least one covariate besides treatment and outcome")
    X_all = raw.data[:, covs]
    D_all = raw.data[:, t]
    Y_all = raw.data[:, y]

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    n = raw.n_rows
    n_fit = int(round(cfg.fractions[0] * n))
    if n_fit < 2 or n - n_fit < 1:
        raise ValueError(f"{n} rows are too few for the requested split")
    perm = np.random.default_rng(seeds[0]).permutation(n)
    fit_idx, emit_idx = np.sort(perm[:n_fit]), np.sort(perm[n_fit:])

    # the surrogate's seed is drawn from the builder's stream
    forest_cfg = replace(cfg.forest, seed=int(seeds[1].generate_state(1)[0]))
    forest = fit_forest(X_all[fit_idx], Y_all[fit_idx], forest_cfg)
    X = X_all[emit_idx]
    D = D_all[emit_idx]
    g_rf = forest.predict(X)

    rng = np.random.default_rng(seeds[2])
    n_emit = len(emit_idx)
    if cfg.effect_mode == HETEROGENEOUS:
        theta_i = cfg.theta + rng.standard_normal(n_emit)
    else:
        theta_i = np.full(n_emit, float(cfg.theta))
    U = cfg.sigma_u * rng.standard_normal(n_emit)
    Y = g_rf + D * theta_i + U
    truth = {
        "source": "semisynthetic",
        "theta": float(cfg.theta),
        "effect_mode": cfg.effect_mode,
        "sigma_u": float(cfg.sigma_u),
        "covariates": [raw.columns[j] for j in covs],
        "treatment": raw.columns[t],
        "outcome": raw.columns[y],
        "g_rf": forest,
        "g_values": g_rf,
        "rows": emit_idx,
    }
    if cfg.effect_mode == HETEROGENEOUS:
        truth["theta_i"] = theta_i
    return Dataset(X, D, Y, truth)


# -- CSV input / output ----------------------------------------------------------


def load_csv(path, columns: Sequence[str] | None = None) -> Table:
    """Read a numeric CSV with a header row.

    ``columns`` restricts (and orders) the columns that are kept; every name in
    it must be present. Blank or non-numeric cells and non-finite values are
    rejected with the offending line number.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file, expected a header row") from None
        if columns is None:
            keep = list(range(len(header)))
        else:
            keep = []
            for c in columns:
                if c not in header:
                    raise IngestionError(f"{path}: missing column {c!r}")
                keep.append(header.index(c))
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
            vals = []
            for j in keep:
                cell = row[j].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise IngestionError(
                        f"{path}:{line}: column {header[j]!r} is not numeric: {cell!r}"
                    ) from None
                if not math.isfinite(v):
                    raise IngestionError(f"{path}:{line}: column {header[j]!r} is not finite: {cell!r}")
                vals.append(v)
            rows.append(vals)
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(keep))
    return Table([header[j] for j in keep], data)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(data: Dataset, csv_path, sidecar_path=None) -> None:
    """CSV with columns ``x0..x{d-1}, D, Y`` plus a JSON sidecar for the truth."""
    csv_path = Path(csv_path)
    d = data.X.shape[1]
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(d)] + ["D", "Y"])
        for i in range(data.n):
            w.writerow([_fmt(v) for v in data.X[i]] + [_fmt(data.D[i]), _fmt(data.Y[i])])
    if sidecar_path is not None:
        Path(sidecar_path).write_text(json.dumps(truth_to_json(data.truth), indent=2, sort_keys=True) + "\n")


def truth_to_json(truth: Mapping[str, Any] | None) -> dict:
    out = {}
    for k, v in (truth or {}).items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif hasattr(v, "to_dict"):
            continue
        else:
            out[k] = v
    return out


def read_dataset(csv_path, sidecar_path=None) -> Dataset:
    """Inverse of :func:`write_dataset`."""
    table = load_csv(csv_path)
    xcols = [c for c in table.columns if c.startswith("x") and c[1:].isdigit()]
    xcols.sort(key=lambda c: int(c[1:]))
    X = np.column_stack([table.column(c) for c in xcols]) if xcols else np.empty((table.n_rows, 0))
    truth = None
    if sidecar_path is not None and Path(sidecar_path).exists():
        truth = json.loads(Path(sidecar_path).read_text())
        if "theta_i" in truth:
            truth["theta_i"] = np.asarray(truth["theta_i"])
    return Dataset(X, table.column("D"), table.column("Y"), truth)
