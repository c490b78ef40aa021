"""Coordinated training of the nuisance pair and its tuning pipeline.

The two networks are trained together on

    alpha * mean(V**2) + beta * mean(U**2) + gamma * |mean(V * U)|

where ``V = D - m(X)`` and ``U = Y - l(X)`` on the training batch. The
covariance penalty pushes the two estimation errors towards being
uncorrelated. ``tune_and_run`` picks ``gamma`` from a grid by hold-out
prediction error and reports the final effect estimate.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nets
from .dml import (
    MLP,
    STAGE_L,
    STAGE_M,
    EstimateReport,
    LearnerConfig,
    ResidualSet,
    SplitError,
    SplitIndices,
    estimate_theta,
    fit_nuisances,
    new_network,
    residuals,
)
from .grad_engine import Tape
from .seeding import derive_seed
from .types import Dataset, NuisancePair

DEFAULT_RAW_GRID = (0.0, 0.01, 0.1, 0.5, 1.0, 5.0, 10.0)

REPORT_SCHEMA_VERSION = 1

# seed stream labels under the run seed
STAGE_PILOT = 0
STAGE_GAMMA = 1


class ScaleError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    gamma_scale: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.gamma_scale > 0):
            raise ValueError("alpha, beta and gamma_scale must be positive")
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")


@dataclass(frozen=True)
class GammaGrid:
    raw: tuple[float, ...]
    gamma_scale: float = 1.0

    def __post_init__(self):
        if not self.raw:
            raise ValueError("gamma grid must not be empty")
        if min(self.raw) < 0:
            raise ValueError("gamma grid values must be nonnegative")
        if 0.0 not in self.raw:
            raise ValueError("gamma grid must contain 0")
        if not self.gamma_scale > 0:
            raise ValueError("gamma_scale must be positive")

    @property
    def scaled(self) -> tuple[float, ...]:
        return tuple(g * self.gamma_scale for g in self.raw)


def _weights(w) -> tuple[float, float, float]:
    if isinstance(w, LossWeights):
        return w.alpha, w.beta, w.gamma
    alpha, beta, gamma = (float(v) for v in w)
    if min(alpha, beta, gamma) < 0:
        raise ValueError("loss weights must be nonnegative")
    return alpha, beta, gamma


def joint_loss(V_res, U_res, w) -> float:
    """Joint objective for residual vectors.

    ``w`` is a :class:`LossWeights` or a plain ``(alpha, beta, gamma)`` triple;
    the triple may carry zero weights, which ``LossWeights`` rejects.
    """
    alpha, beta, gamma = _weights(w)
    V = np.asarray(V_res, dtype=np.float64)
    U = np.asarray(U_res, dtype=np.float64)
    if V.shape != U.shape or V.size == 0:
        raise ValueError(f"residual vectors must be non-empty and equally long, got {V.shape} and {U.shape}")
    return float(alpha * np.mean(V * V) + beta * np.mean(U * U) + gamma * abs(np.mean(V * U)))


def joint_loss_graph(w: LossWeights) -> nets.LossBuilder:
    """Loss builder for ``nets.train`` with networks ``[m, l]`` and targets D, Y."""

    def build(tape: Tape, preds: list, batch: dict) -> int:
        V = tape.sub(batch["D"], preds[0])
        U = tape.sub(batch["Y"], preds[1])
        terms = [
            (w.alpha, tape.mean(tape.square(V))),
            (w.beta, tape.mean(tape.square(U))),
            (w.gamma, tape.abs(tape.mean(tape.mul(V, U)))),
        ]
        return tape.combine(terms)

    return build


def compute_scales(res0: ResidualSet) -> tuple[float, float, float]:
    """Inverse pilot MSEs and inverse absolute residual covariance."""
    V, U = res0.V_hat, res0.U_hat
    msv = float(np.mean(V * V))
    msu = float(np.mean(U * U))
    cov = abs(float(np.mean(V * U)))
    if msv <= 0 or msu <= 0:
        raise ScaleError(
            "pilot residuals have zero mean square; the pilot models interpolate the tuning split, "
            "use more data in I21 or less flexible learners"
        )
    if cov <= 0:
        raise ScaleError(
            "pilot residuals have zero empirical covariance, so the gamma grid cannot be scaled; "
            "pass gamma_scale explicitly or change the split seed"
        )
    return 1.0 / msv, 1.0 / msu, 1.0 / cov


@dataclass
class FixedRun:
    theta_hat: float
    pair: NuisancePair = field(repr=False)
    residuals: ResidualSet = field(repr=False)
    weights: LossWeights


def fit_coordinated(
    data: Dataset, I1, holdout, w: LossWeights, learner: LearnerConfig, seed: int
) -> NuisancePair:
    """Train ``m`` and ``l`` jointly on rows ``I1``, stopping on ``holdout``."""
    if learner.kind != MLP:
        raise ValueError("coordinated training needs neural-network learners")
    I1 = np.asarray(I1, dtype=np.intp)
    holdout = np.asarray(holdout, dtype=np.intp)
    m0 = new_network(data.d, learner, derive_seed(seed, STAGE_M))
    l0 = new_network(data.d, learner, derive_seed(seed, STAGE_L))
    cfg = replace(learner.train, seed=derive_seed(seed, 0))
    m_hat, l_hat = nets.train(
        [m0, l0],
        joint_loss_graph(w),
        {"X": data.X[I1], "D": data.D[I1], "Y": data.Y[I1]},
        {"X": data.X[holdout], "D": data.D[holdout], "Y": data.Y[holdout]},
        cfg,
    )
    meta = {"learner": MLP, "m": m_hat, "l": l_hat, "coordinated": True, "gamma": w.gamma}
    return NuisancePair(m_hat, l_hat, meta, I1)


def run_cdml_fixed(
    data: Dataset,
    I1,
    I2_eval,
    w: LossWeights,
    learner: LearnerConfig = LearnerConfig(),
    holdout=None,
    seed: int | None = None,
) -> FixedRun:
    """Joint training at fixed weights, then the orthogonal estimate on ``I2_eval``.

    ``holdout`` are the early-stopping rows (defaults to ``I2_eval``).
    """
    I1 = np.asarray(I1, dtype=np.intp)
    I2_eval = np.asarray(I2_eval, dtype=np.intp)
    if np.intersect1d(I1, I2_eval).size:
        raise SplitError("training and estimation rows overlap")
    holdout = I2_eval if holdout is None else holdout
    seed = learner.seed if seed is None else seed
    pair = fit_coordinated(data, I1, holdout, w, learner, seed)
    res = residuals(data, I2_eval, pair)
    return FixedRun(estimate_theta(res), pair, res, w)


@dataclass
class GammaRow:
    raw_gamma: float
    gamma: float
    theta_hat_1: float
    phi: float
    theta_hat_I2: float  # diagnostic only, never used for selection
    stopped_epoch: int


@dataclass
class CdmlReport:
    theta_hat_final: float
    gamma_hat: float
    raw_gamma_hat: float
    table: list[GammaRow]
    theta_hat_0: float
    alpha: float
    beta: float
    gamma_scale: float
    seed: int
    learner: dict = field(default_factory=dict)
    final: FixedRun | None = field(default=None, repr=False)
    pilot: NuisancePair | None = field(default=None, repr=False)

    @property
    def pair(self) -> NuisancePair | None:
        return None if self.final is None else self.final.pair

    @property
    def theta_hat(self) -> float:
        return self.theta_hat_final

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "method": "cdml",
            "theta_hat_final": self.theta_hat_final,
            "gamma_hat": self.gamma_hat,
            "raw_gamma_hat": self.raw_gamma_hat,
            "theta_hat_0": self.theta_hat_0,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma_scale": self.gamma_scale,
            "seed": self.seed,
            "learner": self.learner,
            "table": [vars(r).copy() for r in self.table],
        }

    def table_csv(self, theta_true: float | None = None) -> str:
        """phi and bias per gamma, one row per grid point."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["raw_gamma", "gamma", "phi", "log_phi", "theta_hat_1", "theta_hat_I2", "bias_I2", "selected"]
        )
        for r in self.table:
            bias = "" if theta_true is None else repr(r.theta_hat_I2 - theta_true)
            w.writerow(
                [
                    repr(r.raw_gamma),
                    repr(r.gamma),
                    repr(r.phi),
                    repr(math.log(r.phi)) if r.phi > 0 else "-inf",
                    repr(r.theta_hat_1),
                    repr(r.theta_hat_I2),
                    bias,
                    int(r.gamma == self.gamma_hat),
                ]
            )
        return buf.getvalue()


def holdout_phi(Y, D, g0, theta_1: float) -> float:
    """Mean of ``(Y - g0 - D * theta_1) ** 2``: prediction error of a candidate effect."""
    Y, D, g0 = (np.asarray(a, dtype=np.float64) for a in (Y, D, g0))
    return float(np.mean((Y - g0 - D * theta_1) ** 2))


def select_gamma(table: Sequence[GammaRow]) -> GammaRow:
    """Row with the smallest phi; ties go to the smallest gamma."""
    return min(table, key=lambda r: (r.phi, r.gamma))


def tune_and_run(
    data: Dataset,
    splits: SplitIndices,
    raw_grid: Sequence[float] = DEFAULT_RAW_GRID,
    learner: LearnerConfig = LearnerConfig(),
    seed: int | None = None,
) -> CdmlReport:
    """Pilot DML, weight scaling, gamma selection on I22, final estimate on I2.

    Every grid point trains from its own seed ``(seed, gamma index)``. The
    final fit retrains from scratch with the selected gamma and the same seed;
    early stopping always monitors the joint loss on ``I21``.
    """
    seed = learner.seed if seed is None else seed
    grid = GammaGrid(tuple(float(g) for g in raw_grid))
    I1, I21, I22, I2 = splits.I1, splits.I21, splits.I22, splits.I2

    pilot = fit_nuisances(data, I1, I21, learner, seed=derive_seed(seed, STAGE_PILOT))
    res0 = residuals(data, I21, pilot)
    theta0 = estimate_theta(res0)
    alpha, beta, gamma_scale = compute_scales(res0)
    grid = replace(grid, gamma_scale=gamma_scale)

    X22 = data.X[I22]
    g0 = pilot.l(X22) - theta0 * pilot.m(X22)

    rows = []
    for k, (raw, gamma) in enumerate(zip(grid.raw, grid.scaled)):
        w = LossWeights(alpha, beta, gamma, gamma_scale)
        run = run_cdml_fixed(data, I1, I21, w, learner, holdout=I21, seed=derive_seed(seed, STAGE_GAMMA, k))
        phi = holdout_phi(data.Y[I22], data.D[I22], g0, run.theta_hat)
        theta_I2 = estimate_theta(residuals(data, I2, run.pair))
        rows.append(GammaRow(raw, gamma, run.theta_hat, phi, theta_I2, run.pair.m.stopped_epoch))

    best = select_gamma(rows)
    k_best = rows.index(best)
    w = LossWeights(alpha, beta, best.gamma, gamma_scale)
    final = run_cdml_fixed(data, I1, I2, w, learner, holdout=I21, seed=derive_seed(seed, STAGE_GAMMA, k_best))
    return CdmlReport(
        theta_hat_final=final.theta_hat,
        gamma_hat=best.gamma,
        raw_gamma_hat=best.raw_gamma,
        table=rows,
        theta_hat_0=theta0,
        alpha=alpha,
        beta=beta,
        gamma_scale=gamma_scale,
        seed=seed,
        learner=learner.describe(),
        final=final,
        pilot=pilot,
    )


def pilot_report(data: Dataset, splits: SplitIndices, learner: LearnerConfig, seed: int) -> EstimateReport:
    """The standard DML stage that ``tune_and_run`` uses for scaling."""
    pilot = fit_nuisances(data, splits.I1, splits.I21, learner, seed=derive_seed(seed, STAGE_PILOT))
    return EstimateReport.from_residuals(residuals(data, splits.I21, pilot), pilot, learner.describe())
