import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coordml import cdml, dml, nets
from coordml.cdml import GammaGrid, GammaRow, LossWeights, ScaleError, joint_loss
from coordml.datagen import DgpConfig, sample_plr
from coordml.seeding import derive_seed
from coordml.types import Dataset

FAST = dml.LearnerConfig(train=nets.TrainConfig(max_epochs=40))


def test_joint_loss_examples():
    assert joint_loss([1, 1], [2, 2], LossWeights(1, 1, 0)) == 5.0
    assert joint_loss([1, -1], [1, 1], (0, 0, 1)) == 0.0
    assert joint_loss([1, 2], [0, 1], LossWeights(2, 3, 4)) == 10.5


def test_joint_loss_errors():
    with pytest.raises(ValueError):
        joint_loss([1, 2], [1], LossWeights())
    with pytest.raises(ValueError):
        joint_loss([], [], LossWeights())
    with pytest.raises(ValueError):
        joint_loss([1], [1], (1, -1, 0))


def test_weights_and_grid_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=0)
    with pytest.raises(ValueError):
        LossWeights(gamma=-1)
    with pytest.raises(ValueError):
        GammaGrid((0.1, 1.0))
    with pytest.raises(ValueError):
        GammaGrid(())
    g = GammaGrid(cdml.DEFAULT_RAW_GRID, gamma_scale=2.0)
    assert g.scaled == tuple(2 * v for v in cdml.DEFAULT_RAW_GRID)
    assert list(g.scaled) == sorted(g.scaled)


vecs = arrays(np.float64, st.integers(1, 30), elements=st.floats(-100, 100))


@settings(max_examples=200, deadline=None)
@given(vecs, st.data(), st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0, 10), st.floats(0, 10),
       st.floats(-5, 5))
def test_joint_loss_properties(V, data, a, b, g1, g2, c):
    U = data.draw(arrays(np.float64, V.shape, elements=st.floats(-100, 100)))
    lo, hi = sorted((g1, g2))
    w_lo, w_hi = LossWeights(a, b, lo), LossWeights(a, b, hi)
    L = joint_loss(V, U, w_lo)
    assert L >= 0
    assert joint_loss(V, U, w_hi) >= L
    assert joint_loss(c * V, c * U, w_lo) == pytest.approx(c * c * L, rel=1e-9, abs=1e-9)
    if not V.any() and not U.any():
        assert L == 0


def test_compute_scales_examples():
    res = dml.ResidualSet(np.array([2.0, 2.0]), np.array([1.0, 1.0]), np.arange(2))
    assert cdml.compute_scales(res) == (1.0, 0.25, 0.5)
    with pytest.raises(ScaleError):
        cdml.compute_scales(dml.ResidualSet(np.array([1.0, 1.0]), np.array([1.0, -1.0]), np.arange(2)))
    with pytest.raises(ScaleError):
        cdml.compute_scales(dml.ResidualSet(np.array([1.0, 1.0]), np.zeros(2), np.arange(2)))


def test_compute_scales_unit_variance():
    rng = np.random.default_rng(0)
    n = 200_000
    res = dml.ResidualSet(rng.standard_normal(n), rng.standard_normal(n), np.arange(n))
    a, b, _ = cdml.compute_scales(res)
    assert a == pytest.approx(1, abs=0.02) and b == pytest.approx(1, abs=0.02)


def test_holdout_phi_hand_fixture():
    Y = np.array([3.0, 1.0, 4.0, 2.0])
    D = np.array([1.0, 0.0, 2.0, -1.0])
    g0 = np.array([1.0, 1.0, 0.0, 3.0])
    # residuals Y - g0 - 2D = [0, 0, 0, 1]
    assert cdml.holdout_phi(Y, D, g0, 2.0) == 0.25


def test_select_gamma_ties_to_smallest():
    rows = [GammaRow(r, r, 0.0, phi, 0.0, 1) for r, phi in [(0.0, 2.0), (1.0, 1.0), (0.5, 1.0), (5.0, 3.0)]]
    assert cdml.select_gamma(rows).gamma == 0.5


def test_run_cdml_fixed_rejects_overlap():
    data = sample_plr(DgpConfig(n=100, seed=0))
    with pytest.raises(dml.SplitError):
        cdml.run_cdml_fixed(data, np.arange(60), np.arange(50, 100), LossWeights(), FAST)
    with pytest.raises(ValueError):
        cdml.fit_coordinated(data, np.arange(50), np.arange(50, 100), LossWeights(),
                             dml.LearnerConfig(kind=dml.FOREST), seed=0)


def test_gamma_zero_equals_shared_dml():
    data = sample_plr(DgpConfig(n=300, seed=1))
    sp = dml.split_indices(300, seed=1)
    run = cdml.run_cdml_fixed(data, sp.I1, sp.I2, LossWeights(1, 1, 0), FAST, holdout=sp.I21, seed=9)
    pair = dml.fit_nuisances_shared(data, sp.I1, sp.I21, FAST, seed=9)
    theta = dml.estimate_theta(dml.residuals(data, sp.I2, pair))
    assert abs(run.theta_hat - theta) <= 1e-6


def test_linear_capacity_nets_recover_theta():
    rng = np.random.default_rng(2)
    n, d, theta = 1000, 3, 1.5
    X = rng.standard_normal((n, d))
    V = rng.standard_normal(n)
    D = X @ np.array([1.0, -0.5, 0.25]) + V
    Y = X @ np.array([0.5, 1.0, -1.0]) + theta * D  # no outcome noise
    data = Dataset(X, D, Y)
    I1, I2 = np.arange(500), np.arange(500, 1000)

    def linear_net(seed):
        r = np.random.default_rng(seed)
        params = {"W0": r.uniform(-1, 1, (d, 1)), "b0": np.zeros(1)}
        return nets.FittedRegressor(nets.MlpSpec(d, (1,)), params, np.zeros(d), np.ones(d))

    for gamma in (0.0, 1.0):
        m_hat, l_hat = nets.train(
            [linear_net(0), linear_net(1)],
            cdml.joint_loss_graph(LossWeights(1, 1, gamma)),
            {"X": X[I1], "D": D[I1], "Y": Y[I1]},
            {"X": X[I2], "D": D[I2], "Y": Y[I2]},
            nets.TrainConfig(max_epochs=2000),
        )
        pair = dml.NuisancePair(m_hat, l_hat, fit_indices=I1)
        assert abs(dml.estimate_theta(dml.residuals(data, I2, pair)) - theta) <= 0.05


def test_gamma_weakly_decreases_training_covariance():
    grid = cdml.DEFAULT_RAW_GRID
    learner = dml.LearnerConfig(train=nets.TrainConfig(max_epochs=300))
    cov = np.zeros((20, len(grid)))
    for s in range(20):
        data = sample_plr(DgpConfig(n=400, rho=0.8, theta=0.0, seed=s))
        sp = dml.split_indices(400, seed=s)
        X = data.X[sp.I1]
        for k, g in enumerate(grid):
            pair = cdml.fit_coordinated(data, sp.I1, sp.I21, LossWeights(1, 1, g), learner, seed=s)
            cov[s, k] = abs(np.mean((data.D[sp.I1] - pair.m(X)) * (data.Y[sp.I1] - pair.l(X))))
    means = cov.mean(axis=0)
    for k in range(len(grid) - 1):
        diff = cov[:, k + 1] - cov[:, k]
        se = diff.std(ddof=1) / math.sqrt(len(diff))
        assert diff.mean() <= 2 * se, (k, means)
    assert means[-1] < means[0]


@pytest.fixture(scope="module")
def small_report():
    data = sample_plr(DgpConfig(n=400, seed=3))
    sp = dml.split_indices(400, seed=3)
    return data, sp, cdml.tune_and_run(data, sp, (0.0, 0.1, 1.0, 10.0), FAST, seed=5)


def test_tune_and_run_report(small_report):
    data, sp, rep = small_report
    phis = [r.phi for r in rep.table]
    assert all(math.isfinite(p) for p in phis)
    assert rep.gamma_hat in [r.gamma for r in rep.table]
    assert rep.gamma_hat == rep.table[int(np.argmin(phis))].gamma
    assert [r.raw_gamma for r in rep.table] == [0.0, 0.1, 1.0, 10.0]
    assert all(r.gamma == pytest.approx(r.raw_gamma * rep.gamma_scale) for r in rep.table)
    assert rep.theta_hat == rep.theta_hat_final
    pilot = cdml.pilot_report(data, sp, FAST, seed=5)
    assert pilot.theta_hat == rep.theta_hat_0
    d = json.loads(json.dumps(rep.to_dict()))
    assert d["schema_version"] == cdml.REPORT_SCHEMA_VERSION and len(d["table"]) == 4
    lines = rep.table_csv(theta_true=1.0).strip().split("\n")
    assert len(lines) == 5 and lines[0].startswith("raw_gamma,gamma,phi")
    assert sum(int(line.rsplit(",", 1)[1]) for line in lines[1:]) >= 1


def test_phi_uses_pilot_g0(small_report):
    data, sp, rep = small_report
    g0 = rep.pilot.l(data.X[sp.I22]) - rep.theta_hat_0 * rep.pilot.m(data.X[sp.I22])
    for row in rep.table:
        assert row.phi == cdml.holdout_phi(data.Y[sp.I22], data.D[sp.I22], g0, row.theta_hat_1)


def test_singleton_grid_equals_fixed_run(small_report):
    data, sp, _ = small_report
    rep = cdml.tune_and_run(data, sp, (0.0,), FAST, seed=5)
    w = LossWeights(rep.alpha, rep.beta, 0.0, rep.gamma_scale)
    fixed = cdml.run_cdml_fixed(data, sp.I1, sp.I2, w, FAST, holdout=sp.I21,
                                seed=derive_seed(5, cdml.STAGE_GAMMA, 0))
    assert rep.theta_hat_final == fixed.theta_hat
