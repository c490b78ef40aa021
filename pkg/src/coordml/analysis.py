"""Bias oracle, replication metrics and bootstrap intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtri

from .datagen import DgpConfig, oracle_functions, sample_covariates
from .dml import DegenerateTreatmentError, orthogonal_slope, residuals
from .types import Dataset, NuisancePair

DEFAULT_MC_N = 100_000
MIN_MC_N = 10_000


@dataclass
class BiasReport:
    B_dml: float
    E_dm_dl: float
    E_dm_sq: float
    var_V: float
    theta_used: float
    mc_n: int
    mc_standard_errors: dict[str, float] = field(default_factory=dict)
    var_V_estimated: bool = False

    def to_dict(self) -> dict:
        return dict(vars(self))


def bias_formula(E_dm_dl: float, E_dm_sq: float, var_v: float, theta: float) -> float:
    denom = var_v + E_dm_sq
    if not denom > 0:
        raise ZeroDivisionError("Var(V) + E[dm^2] must be positive")
    return (E_dm_dl - theta * E_dm_sq) / denom


def theoretical_bias(
    pair: NuisancePair,
    dgp: DgpConfig,
    theta: float | None = None,
    mc_n: int = DEFAULT_MC_N,
    seed=0,
) -> BiasReport:
    """Leading bias of the split-sample estimator for a fixed fitted pair.

    The conditional expectations of ``dm * dl`` and ``dm ** 2`` given the
    training split are integrals over the covariate law, estimated from
    ``mc_n`` fresh draws. ``dm = m - m_hat`` and ``dl = l - l_hat`` with
    ``l = g + theta * m``.
    """
    if dgp is None:
        raise ValueError("theoretical bias needs a synthetic DGP with known nuisances")
    if mc_n < MIN_MC_N:
        raise ValueError(f"mc_n must be at least {MIN_MC_N}")
    theta = dgp.theta if theta is None else float(theta)
    m, g, _ = oracle_functions(dgp)
    X = sample_covariates(dgp, mc_n, seed)
    m_true = m(X)
    dm = m_true - pair.m(X)
    dl = g(X) + theta * m_true - pair.l(X)
    prod = dm * dl
    sq = dm * dm
    E_dm_dl = float(prod.mean())
    E_dm_sq = float(sq.mean())
    var_v = dgp.sigma_v**2
    return BiasReport(
        B_dml=bias_formula(E_dm_dl, E_dm_sq, var_v, theta),
        E_dm_dl=E_dm_dl,
        E_dm_sq=E_dm_sq,
        var_V=var_v,
        theta_used=theta,
        mc_n=mc_n,
        mc_standard_errors={
            "E_dm_dl": float(prod.std(ddof=1) / math.sqrt(mc_n)),
            "E_dm_sq": float(sq.std(ddof=1) / math.sqrt(mc_n)),
        },
    )


def theoretical_bias_from_truth(pair: NuisancePair, truth: Mapping, **kw) -> BiasReport:
    from .datagen import dgp_from_truth

    if not truth or truth.get("source") != "synthetic":
        raise ValueError("theoretical bias needs synthetic ground truth (no oracle nuisances available)")
    return theoretical_bias(pair, dgp_from_truth(truth), **kw)


# -- perturbation of l_hat --------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def row_hash(X: np.ndarray, seed: int) -> np.ndarray:
    """64-bit hash of every row's float64 bit pattern, keyed by ``seed``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    bits = X.view(np.uint64).reshape(X.shape)
    with np.errstate(over="ignore"):
        h = np.full(X.shape[0], _mix64(np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF)]))[0], dtype=np.uint64)
        for j in range(X.shape[1]):
            h = _mix64(h ^ (bits[:, j] + _GOLDEN + (h << np.uint64(6))))
    return h


def hashed_normal(X: np.ndarray, seed: int) -> np.ndarray:
    """Standard-normal value that is a fixed function of each row of X."""
    h = row_hash(X, seed)
    u = ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def perturb_lhat(pair: NuisancePair, sigma_l: float, seed: int = 0) -> NuisancePair:
    """Add N(0, sigma_l^2) noise to ``l_hat`` as a deterministic function of X."""
    if sigma_l < 0:
        raise ValueError("sigma_l must be nonnegative")
    if sigma_l == 0:
        return pair
    base = pair.l

    def l_noisy(X):
        X = np.asarray(X, dtype=np.float64)
        return base(X) + sigma_l * hashed_normal(X, seed)

    meta = dict(pair.meta, sigma_l=sigma_l)
    return NuisancePair(pair.m, l_noisy, meta, pair.fit_indices)


# -- replication metrics ------------------------------------------------------------


@dataclass
class ReplicationRecord:
    theta_hat: float
    theta: float
    cov_dm_dl: float  # mean of dm * dl over the hold-out rows
    mse_m: float
    mse_l: float


def record_from_pair(theta_hat: float, theta: float, pair: NuisancePair, X: np.ndarray, dgp: DgpConfig):
    """Replication record with nuisance errors evaluated on hold-out rows ``X``."""
    m, g, _ = oracle_functions(dgp)
    m_true = m(X)
    dm = m_true - pair.m(X)
    dl = g(X) + dgp.theta * m_true - pair.l(X)
    return ReplicationRecord(
        float(theta_hat), float(theta), float(np.mean(dm * dl)), float(np.mean(dm * dm)), float(np.mean(dl * dl))
    )


@dataclass
class MetricsReport:
    n_replications: int
    bias: float
    mse: float
    abs_cov_dm_dl: float
    mse_m: float
    mse_l: float
    standard_errors: dict[str, float]
    errors: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        out = dict(vars(self))
        out.pop("errors")
        return out


def replication_metrics(records: Sequence) -> MetricsReport:
    """Bias, MSE, mean absolute error covariance and nuisance MSEs across replications."""
    if not records:
        raise ValueError("no replication records")

    def col(name):
        return np.array([r[name] if isinstance(r, Mapping) else getattr(r, name) for r in records], dtype=float)

    err = col("theta_hat") - col("theta")
    cols = {
        "bias": err,
        "mse": err**2,
        "abs_cov_dm_dl": np.abs(col("cov_dm_dl")),
        "mse_m": col("mse_m"),
        "mse_l": col("mse_l"),
    }
    R = len(records)
    means = {k: float(v.mean()) for k, v in cols.items()}
    ses = {k: (float(v.std(ddof=1) / math.sqrt(R)) if R > 1 else float("nan")) for k, v in cols.items()}
    return MetricsReport(n_replications=R, standard_errors=ses, errors=err.tolist(), **means)


# -- bootstrap ---------------------------------------------------------------------


@dataclass
class BootstrapCI:
    point: float
    lower: float
    upper: float
    level: float = 0.95
    n_resamples: int = 200
    mode: str = "estimation-stage"
    redraws: int = 0

    def to_dict(self) -> dict:
        return dict(vars(self))


def percentile_ranks(n_resamples: int, level: float) -> tuple[int, int]:
    """1-based order statistics bounding the central ``level`` mass.

    With 200 resamples at level 0.95 this gives the 5th and 195th values.
    """
    tail = (1.0 - level) / 2.0
    lo = max(1, math.ceil(round(n_resamples * tail, 9)))
    hi = min(n_resamples, math.ceil(round(n_resamples * (1.0 - tail), 9)))
    return lo, hi


def percentile_interval(samples, level: float = 0.95) -> tuple[float, float]:
    s = np.sort(np.asarray(samples, dtype=np.float64))
    lo, hi = percentile_ranks(len(s), level)
    return float(s[lo - 1]), float(s[hi - 1])


def bootstrap_ci(
    data: Dataset,
    I2,
    pair: NuisancePair,
    n_resamples: int = 200,
    level: float = 0.95,
    seed=0,
    max_redraws: int = 1000,
) -> BootstrapCI:
    """Percentile interval from resampling the estimation rows with the nuisances frozen."""
    I2 = np.asarray(I2, dtype=np.intp)
    if len(I2) < 10:
        raise ValueError("need at least 10 estimation rows")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    res = residuals(data, I2, pair)
    point = orthogonal_slope(res.V_hat, res.U_hat)
    V, U = res.V_hat, res.U_hat
    rng = np.random.default_rng(seed)
    n = len(I2)
    stats = np.empty(n_resamples)
    redraws = 0
    for b in range(n_resamples):
        while True:
            idx = rng.integers(0, n, n)
            v = V[idx]
            denom = float(np.dot(v, v))
            if denom > 0:
                break
            redraws += 1
            if redraws > max_redraws:
                raise DegenerateTreatmentError("too many bootstrap resamples with zero treatment variation")
        stats[b] = float(np.dot(v, U[idx])) / denom
    lower, upper = percentile_interval(stats, level)
    return BootstrapCI(point, lower, upper, level, n_resamples, "estimation-stage", redraws)


def bootstrap_ci_full(
    data: Dataset,
    estimator: Callable[[Dataset, int], float],
    n_resamples: int = 200,
    level: float = 0.95,
    seed=0,
) -> BootstrapCI:
    """Full-pipeline bootstrap: ``estimator(resampled_data, seed)`` reruns everything."""
    rng = np.random.default_rng(seed)
    point = float(estimator(data, 0))
    stats = np.empty(n_resamples)
    for b in range(n_resamples):
        idx = rng.integers(0, data.n, data.n)
        stats[b] = float(estimator(data.subset(idx), b + 1))
    lower, upper = percentile_interval(stats, level)
    return BootstrapCI(point, lower, upper, level, n_resamples, "full-pipeline")


# -- agreement summaries -------------------------------------------------------------


def regression_summary(x, y) -> dict:
    """Least-squares fit ``y ~ a + b x``: slope, intercept and R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    sxx = float(xc @ xc)
    if sxx <= 0:
        raise ValueError("x has no variation")
    slope = float(xc @ yc) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = yc - slope * xc
    syy = float(yc @ yc)
    r2 = 1.0 - float(resid @ resid) / syy if syy > 0 else float("nan")
    return {"slope": slope, "intercept": intercept, "r2": r2, "n": int(len(x))}
