"""Split-sample double machine learning without cross-fitting.

The nuisance regressors ``m`` (treatment) and ``l`` (outcome) are fitted on
one part of the data, residuals are formed on a disjoint part, and the effect
is the no-intercept least-squares slope of outcome residuals on treatment
residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import nets
from .forest import ForestConfig, fit_forest
from .grad_engine import Tape
from .seeding import derive_seed
from .types import Dataset, NuisancePair

DEFAULT_FRACTIONS = (0.5, 0.25, 0.25)

MLP = "mlp"
FOREST = "forest"
ORACLE = "oracle"

# seed stream labels
STAGE_M = 1
STAGE_L = 2


class SplitError(ValueError):
    pass


class DegenerateTreatmentError(ArithmeticError):
    """Treatment residuals are identically zero, so the slope is undefined."""


@dataclass(frozen=True)
class SplitIndices:
    I1: np.ndarray
    I21: np.ndarray
    I22: np.ndarray

    @property
    def I2(self) -> np.ndarray:
        return np.sort(np.concatenate([self.I21, self.I22]))

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.I1), len(self.I21), len(self.I22)

    def to_dict(self) -> dict:
        return {"I1": self.I1.tolist(), "I21": self.I21.tolist(), "I22": self.I22.tolist()}


def _part_sizes(n: int, fractions) -> list[int]:
    # largest-remainder rounding so that the sizes always add up to n
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    rem = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rem]:
        sizes[i] += 1
    return sizes


def split_indices(n: int, fractions=DEFAULT_FRACTIONS, seed=0) -> SplitIndices:
    """Seeded random partition of ``range(n)`` into ``I1, I21, I22``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise SplitError("expected three fractions (I1, I21, I22)")
    if min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be positive and sum to 1, got {fractions}")
    sizes = _part_sizes(n, fractions)
    if min(sizes) < 1:
        raise SplitError(f"n={n} leaves an empty part with fractions {fractions}")
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return SplitIndices(np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:]))


@dataclass
class ResidualSet:
    U_hat: np.ndarray
    V_hat: np.ndarray
    idx: np.ndarray


def residuals(data: Dataset, idx, pair: NuisancePair) -> ResidualSet:
    """Outcome and treatment residuals on rows ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= data.n):
        raise IndexError(f"indices out of range for n={data.n}")
    if pair.fit_indices is not None:
        overlap = np.intersect1d(idx, pair.fit_indices)
        if overlap.size:
            raise SplitError(
                f"{overlap.size} evaluation rows were used to fit the nuisances (first: {overlap[:5].tolist()})"
            )
    X = data.X[idx]
    U = data.Y[idx] - np.asarray(pair.l(X), dtype=np.float64)
    V = data.D[idx] - np.asarray(pair.m(X), dtype=np.float64)
    return ResidualSet(U, V, idx)


def orthogonal_slope(V: np.ndarray, U: np.ndarray) -> float:
    denom = float(np.dot(V, V))
    if denom <= 0.0:
        raise DegenerateTreatmentError("sum of squared treatment residuals is zero")
    return float(np.dot(V, U)) / denom


def estimate_theta(res: ResidualSet) -> float:
    """``sum(V * U) / sum(V ** 2)`` over the residual set."""
    return orthogonal_slope(res.V_hat, res.U_hat)


@dataclass(frozen=True)
class LearnerConfig:
    """How to fit the nuisance pair.

    ``kind`` is ``"mlp"``, ``"forest"`` or ``"oracle"`` (true functions taken
    from the synthetic ground truth).
    """

    kind: str = MLP
    variant: str = nets.THREE_LAYER
    train: nets.TrainConfig = field(default_factory=nets.TrainConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    keep_prob: float = nets.DEFAULT_KEEP_PROB
    keep_prob_is_drop_rate: bool = False

    def __post_init__(self):
        if self.kind not in (MLP, FOREST, ORACLE):
            raise ValueError(f"unknown learner kind {self.kind!r}")

    @property
    def seed(self) -> int:
        return self.train.seed

    def describe(self) -> dict:
        if self.kind == MLP:
            t = self.train
            return {
                "kind": MLP,
                "variant": self.variant,
                "learning_rate": t.learning_rate,
                "max_epochs": t.max_epochs,
                "clip_norm": t.clip_norm,
                "early_stop_patience": t.early_stop_patience,
                "keep_prob": self.keep_prob,
                "keep_prob_is_drop_rate": self.keep_prob_is_drop_rate,
                "seed": t.seed,
            }
        if self.kind == FOREST:
            f = self.forest
            return {"kind": FOREST, "n_trees": f.n_trees, "max_depth": f.max_depth, "seed": f.seed}
        return {"kind": ORACLE}


def new_network(d: int, learner: LearnerConfig, seed: int) -> nets.FittedRegressor:
    return nets.build_mlp(d, learner.variant, seed, learner.keep_prob, learner.keep_prob_is_drop_rate)


def fit_nuisances(
    data: Dataset, fit_idx, holdout_idx, learner: LearnerConfig, seed: int | None = None
) -> NuisancePair:
    """Fit ``m`` and ``l`` independently, each on its own MSE objective."""
    fit_idx = np.asarray(fit_idx, dtype=np.intp)
    holdout_idx = np.asarray(holdout_idx, dtype=np.intp)
    base = learner.seed if seed is None else seed
    if learner.kind == ORACLE:
        from .datagen import dgp_from_truth, oracle_pair

        pair = oracle_pair(dgp_from_truth(data.truth))
        pair.fit_indices = fit_idx
        return pair
    Xf = data.X[fit_idx]
    if learner.kind == FOREST:
        fm = fit_forest(Xf, data.D[fit_idx], replace(learner.forest, seed=derive_seed(base, STAGE_M)))
        fl = fit_forest(Xf, data.Y[fit_idx], replace(learner.forest, seed=derive_seed(base, STAGE_L)))
        return NuisancePair(fm, fl, {"learner": FOREST, "m": fm, "l": fl}, fit_idx)
    Xh = data.X[holdout_idx]
    fitted = {}
    for stage, name, target in ((STAGE_M, "m", data.D), (STAGE_L, "l", data.Y)):
        s = derive_seed(base, stage)
        net = new_network(data.d, learner, s)
        cfg = replace(learner.train, seed=s)
        fitted[name] = nets.train(
            net,
            nets.mse_loss("T"),
            {"X": Xf, "T": target[fit_idx]},
            {"X": Xh, "T": target[holdout_idx]},
            cfg,
        )
    return NuisancePair(
        fitted["m"], fitted["l"], {"learner": MLP, "m": fitted["m"], "l": fitted["l"]}, fit_idx
    )


def _weighted_mse_pair(alpha: float, beta: float) -> nets.LossBuilder:
    def build(tape: Tape, preds: list, batch: dict) -> int:
        mse_m = tape.mean(tape.square(tape.sub(batch["D"], preds[0])))
        mse_l = tape.mean(tape.square(tape.sub(batch["Y"], preds[1])))
        return tape.combine([(alpha, mse_m), (beta, mse_l)])

    return build


def fit_nuisances_shared(
    data: Dataset,
    fit_idx,
    holdout_idx,
    learner: LearnerConfig,
    seed: int | None = None,
    alpha: float = 1.0,
    beta: float = 1.0,
) -> NuisancePair:
    """Fit ``m`` and ``l`` on the weighted MSE sum with one shared stopping rule.

    The two networks still have separate parameters, but they take their
    gradient steps together (clipping acts on the joint gradient) and stop at
    the epoch minimising the weighted hold-out MSE sum.
    """
    if learner.kind != MLP:
        raise ValueError("shared training needs neural-network learners")
    fit_idx = np.asarray(fit_idx, dtype=np.intp)
    holdout_idx = np.asarray(holdout_idx, dtype=np.intp)
    base = learner.seed if seed is None else seed
    m0 = new_network(data.d, learner, derive_seed(base, STAGE_M))
    l0 = new_network(data.d, learner, derive_seed(base, STAGE_L))
    cfg = replace(learner.train, seed=derive_seed(base, 0))
    m_hat, l_hat = nets.train(
        [m0, l0],
        _weighted_mse_pair(alpha, beta),
        {"X": data.X[fit_idx], "D": data.D[fit_idx], "Y": data.Y[fit_idx]},
        {"X": data.X[holdout_idx], "D": data.D[holdout_idx], "Y": data.Y[holdout_idx]},
        cfg,
    )
    return NuisancePair(m_hat, l_hat, {"learner": MLP, "m": m_hat, "l": l_hat, "shared": True}, fit_idx)


@dataclass
class EstimateReport:
    theta_hat: float
    n_estimation: int
    sum_Vhat_sq: float
    mean_U: float
    var_U: float
    mean_V: float
    var_V: float
    learner: dict[str, Any] = field(default_factory=dict)
    pair: NuisancePair | None = field(default=None, repr=False)
    residuals: ResidualSet | None = field(default=None, repr=False)

    @classmethod
    def from_residuals(cls, res: ResidualSet, pair=None, learner=None) -> "EstimateReport":
        return cls(
            theta_hat=estimate_theta(res),
            n_estimation=len(res.idx),
            sum_Vhat_sq=float(np.dot(res.V_hat, res.V_hat)),
            mean_U=float(res.U_hat.mean()),
            var_U=float(res.U_hat.var()),
            mean_V=float(res.V_hat.mean()),
            var_V=float(res.V_hat.var()),
            learner=dict(learner or {}),
            pair=pair,
            residuals=res,
        )

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat,
            "n_estimation": self.n_estimation,
            "sum_Vhat_sq": self.sum_Vhat_sq,
            "mean_U": self.mean_U,
            "var_U": self.var_U,
            "mean_V": self.mean_V,
            "var_V": self.var_V,
            "learner": self.learner,
        }


def run_dml(
    data: Dataset,
    splits: SplitIndices,
    learner: LearnerConfig = LearnerConfig(),
    shared_stopping: bool = False,
) -> EstimateReport:
    """Fit the nuisances on ``I1``, early-stop on ``I21``, estimate on ``I2``."""
    if shared_stopping:
        pair = fit_nuisances_shared(data, splits.I1, splits.I21, learner)
    else:
        pair = fit_nuisances(data, splits.I1, splits.I21, learner)
    res = residuals(data, splits.I2, pair)
    meta = learner.describe()
    meta["shared_stopping"] = shared_stopping
    return EstimateReport.from_residuals(res, pair, meta)
