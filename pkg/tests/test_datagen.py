import math

import numpy as np
import pytest

from coordml import datagen
from coordml.datagen import (
    DgpConfig,
    IngestionError,
    SemiSynthConfig,
    Table,
    assign_groups,
    build_semisynthetic,
    load_csv,
    nuisance_eval,
    oracle_functions,
    read_dataset,
    sample_ar1,
    sample_plr,
    write_dataset,
)
from coordml.forest import ForestConfig


@pytest.mark.parametrize("rho", [0.0, 0.5, 0.9])
def test_ar1_moments(rho):
    n = 100_000
    X = sample_ar1(n, 10, rho, seed=1)
    assert np.all(np.abs(X.var(axis=0) - 1) <= 0.02)
    c = np.corrcoef(X.T)
    assert abs(c[0, 2] - rho**2) <= 0.02
    assert abs(c[3, 4] - rho) <= 0.02
    if rho == 0:
        off = c[~np.eye(10, dtype=bool)]
        assert np.all(np.abs(off) <= 4 / math.sqrt(n))


def test_group_threshold():
    X = np.zeros((3, 10))
    X[:, 0] = [-5.0, datagen.DEFAULT_THRESHOLD, 2.0]
    np.testing.assert_array_equal(assign_groups(X), [False, False, True])
    assert assign_groups(X, -np.inf).all()


def test_linear_groups_hand_rows():
    x = np.zeros((2, 10))
    x[:, [1, 3, 6]] = 1.0
    np.testing.assert_array_equal(nuisance_eval("linear_groups", "m", x, [False, True]), [16.0, 16.0])
    x1 = np.zeros((2, 10))
    x1[:, 1] = 1.0
    np.testing.assert_array_equal(nuisance_eval("linear_groups", "m", x1, [False, True]), [1.0, 10.0])


def test_relu_exp_zero_row():
    z = np.zeros((1, 10))
    assert nuisance_eval("relu_exp", "g", z, [False])[0] == 0.5
    assert nuisance_eval("relu_exp", "m", z, [True])[0] == 0.0


def test_nuisance_errors():
    with pytest.raises(ValueError):
        nuisance_eval("linear_groups", "k", np.zeros((1, 10)), [False])
    with pytest.raises(ValueError):
        nuisance_eval("cubic", "m", np.zeros((1, 10)), [False])
    with pytest.raises(ValueError):
        nuisance_eval("linear_groups", "m", np.zeros((1, 5)), [False])


def test_config_validation():
    assert (DgpConfig().sigma_u, DgpConfig().sigma_v, DgpConfig().theta) == (1.0, 1.0, 1.0)
    for bad in ({"rho": 1.0}, {"n": 0}, {"sigma_u": -1}, {"d": 5}, {"nuisance": "x"}, {"effect_mode": "x"}):
        with pytest.raises(ValueError):
            DgpConfig(**bad)


@pytest.mark.parametrize("nuisance", ["linear_groups", "relu_exp"])
def test_noiseless_identity(nuisance):
    cfg = DgpConfig(n=500, nuisance=nuisance, sigma_u=0, sigma_v=0, theta=2.0, seed=3)
    data = sample_plr(cfg)
    m, g, _ = oracle_functions(cfg)
    np.testing.assert_allclose(data.D, m(data.X))
    np.testing.assert_allclose(data.Y, g(data.X) + 2.0 * m(data.X))


def test_heterogeneous_effects():
    data = sample_plr(DgpConfig(n=100_000, theta=10.0, effect_mode="heterogeneous", seed=4))
    ti = data.truth["theta_i"]
    assert abs(ti.mean() - 10) <= 0.02 and abs(ti.var() - 1) <= 0.02


def test_oracle_outcome_residual_mean():
    n = 20_000
    cfg = DgpConfig(n=n, seed=5)
    data = sample_plr(cfg)
    _, _, l = oracle_functions(cfg)
    resid = data.Y - l(data.X) - cfg.theta * (data.D - oracle_functions(cfg)[0](data.X))
    assert abs(resid.mean()) <= 4 / math.sqrt(n)


def test_sampling_is_seeded():
    a, b = sample_plr(DgpConfig(n=50, seed=7)), sample_plr(DgpConfig(n=50, seed=7))
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.Y, b.Y)
    assert not np.array_equal(a.Y, sample_plr(DgpConfig(n=50, seed=8)).Y)


def test_truth_from_dataset():
    cfg = DgpConfig(n=10, rho=0.3, seed=2)
    assert datagen.dgp_from_truth(sample_plr(cfg).truth) == cfg
    with pytest.raises(ValueError):
        datagen.dgp_from_truth({"source": "semisynthetic"})


def _raw_table(n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3))
    D = X[:, 0] + rng.standard_normal(n)
    Y = X[:, 1] ** 2 + rng.standard_normal(n)
    return Table(["a", "b", "c", "treat", "out"], np.column_stack([X, D, Y]))


def test_semisynthetic_mean_effect():
    raw = _raw_table(n=2000)
    cfg = SemiSynthConfig("treat", "out", forest=ForestConfig(n_trees=3, max_depth=6), theta=10.0, seed=1)
    data = build_semisynthetic(raw, cfg)
    g = data.truth["g_values"]
    resid = data.Y - g - 10.0 * data.D
    assert abs(resid.mean()) <= 4 / math.sqrt(data.n)
    assert data.truth["covariates"] == ["a", "b", "c"]
    np.testing.assert_array_equal(data.D, raw.column("treat")[data.truth["rows"]])


def test_semisynthetic_errors_name_column():
    raw = _raw_table(n=20)
    with pytest.raises(IngestionError, match="'dose'"):
        build_semisynthetic(raw, SemiSynthConfig("dose", "out"))
    with pytest.raises(IngestionError):
        build_semisynthetic(raw, SemiSynthConfig("out", "out"))


def test_load_csv_roundtrip_and_selection(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b,c\n1,2,3\n4,5,6\n7,8,9.5\n")
    t = load_csv(p)
    assert t.columns == ["a", "b", "c"] and t.n_rows == 3
    np.testing.assert_array_equal(t.data[2], [7, 8, 9.5])
    sub = load_csv(p, ["c", "a"])
    np.testing.assert_array_equal(sub.data[0], [3, 1])
    with pytest.raises(IngestionError, match="'z'"):
        load_csv(p, ["z"])


@pytest.mark.parametrize("body,where", [
    ("a,b\n1,2\n3,x\n", ":3:"),
    ("a,b\n1,2\n3\n", ":3:"),
    ("a,b\n1,nan\n", ":2:"),
    ("a,b\ninf,1\n", ":2:"),
])
def test_load_csv_errors_carry_line(tmp_path, body, where):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(IngestionError, match=where):
        load_csv(p)


def test_load_csv_empty(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(IngestionError):
        load_csv(p)


def test_large_csv(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((100_000, 3))
    p = tmp_path / "big.csv"
    np.savetxt(p, arr, delimiter=",", header="a,b,c", comments="", fmt="%.17g")
    t = load_csv(p)
    np.testing.assert_array_equal(t.data, arr)


def test_write_read_roundtrip(tmp_path):
    data = sample_plr(DgpConfig(n=30, effect_mode="heterogeneous", seed=9))
    write_dataset(data, tmp_path / "d.csv", tmp_path / "d.truth.json")
    back = read_dataset(tmp_path / "d.csv", tmp_path / "d.truth.json")
    np.testing.assert_array_equal(back.X, data.X)
    np.testing.assert_array_equal(back.Y, data.Y)
    np.testing.assert_array_equal(back.truth["theta_i"], data.truth["theta_i"])
    assert datagen.dgp_from_truth(back.truth) == DgpConfig(n=30, effect_mode="heterogeneous", seed=9)
