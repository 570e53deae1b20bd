from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from fmscan import glm, sim
from fmscan.errors import ConfigError
from fmscan.sim import (
    SimulationConfig,
    calibrate_theta_scale,
    cluster_members,
    generate_dataset,
    load_geometry,
    run_study,
    tent,
    theta_true,
)


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_sim_tent():
    assert (tent(11), tent(8), tent(4), tent(18)) == (6.0, 3.0, 0.0, 0.0)
    np.testing.assert_allclose(tent(np.array([5.0, 14.0, 17.0])), [0.0, 3.0, 0.0])


def test_sim_theta_true():
    assert theta_true(9) == pytest.approx(0.0, abs=1e-12)
    assert theta_true(0) == 0.0
    assert theta_true(4.5) == pytest.approx(-0.5)
    assert theta_true(13.5) == pytest.approx(1.5)


def test_sim_tent_integrals():
    domain = (0.0, 21.0)
    assert sim._tent_integral(0.0, domain) == pytest.approx(24.0907, abs=1e-3)
    assert sim._tent_integral(4.0, domain) == pytest.approx(-7.5616, abs=1e-3)
    assert sim._tent_integral(-4.0, domain) == pytest.approx(32.4386, abs=1e-3)


@pytest.mark.parametrize("ratio", [0.5, 1.5, 2.0, 3.0])
def test_sim_calibrate_theta_scale(ratio):
    kappa = calibrate_theta_scale(ratio)
    domain = (0.0, 21.0)
    a0, a_out, a_in = (sim._tent_integral(s, domain) for s in (0.0, 4.0, -4.0))
    u = _rng().uniform(size=400_000)
    inside = np.exp(kappa * (u * a0 + (1 - u) * a_in)).mean()
    outside = np.exp(kappa * (u * a0 + (1 - u) * a_out)).mean()
    assert inside / outside == pytest.approx(ratio, rel=0.01)
    assert calibrate_theta_scale(1.0) == 0.0
    with pytest.raises(ConfigError):
        calibrate_theta_scale(0)


def test_sim_geometry():
    geo = load_geometry()
    assert len(geo) == 94
    assert geo.id.is_unique
    assert (geo.population > 0).all()
    true, fake = cluster_members(SimulationConfig(), geo)
    assert len(true) == len(fake) == 8
    assert not set(true) & set(fake)
    assert geo.id.tolist().index("D21") in true
    assert geo.id.tolist().index("D75") in fake
    # baseline expected cases inside each cluster
    expected = np.exp(-11.51) * geo.population.to_numpy(float)
    assert expected[list(true)].sum() > 75
    assert expected[list(fake)].sum() > 45


def test_sim_config_invalid():
    with pytest.raises(ConfigError):
        SimulationConfig(level=0)
    with pytest.raises(ConfigError):
        SimulationConfig(modes=("spatial",))
    with pytest.raises(ConfigError):
        SimulationConfig(relative_risks=())
    with pytest.raises(ConfigError):
        cluster_members(SimulationConfig(true_center="D75"))
    act = SimulationConfig.full_scale(seed=3)
    assert (act.n_replicates, act.M, act.seed) == (1000, 999, 3)


def test_sim_generate_dataset():
    config = SimulationConfig()
    data = generate_dataset(config, 2.0, _rng(1))
    region = data.region
    assert region.n == 94
    assert region.m.unique().tolist() == [70]
    np.testing.assert_allclose(region.series[0].t[[0, -1]], [0, 21])
    assert np.all(region.cases == np.round(region.cases))
    assert region.covariates is None
    assert data.u.shape == (94,)


def test_sim_generate_dataset_baseline():
    config = SimulationConfig(theta_scale=0.0, noise=0.0)
    data = generate_dataset(config, 1.0, _rng(2))
    pop = data.region.populations
    np.testing.assert_allclose(data.mu / pop, np.exp(-11.51))
    assert np.mean(data.mu / pop) == pytest.approx(1.0e-5, rel=0.01)

    data = generate_dataset(config, 1.5, _rng(2))
    rate = data.mu / pop
    true = list(data.true_members)
    np.testing.assert_allclose(rate[true], 1.5 * np.exp(-11.51))
    out = np.setdiff1d(np.arange(94), true)
    np.testing.assert_allclose(rate[out], np.exp(-11.51))

    # noise free curves follow the tent shapes
    s = data.region.series[data.fake_members[0]]
    u = data.u[data.fake_members[0]]
    np.testing.assert_allclose(s.value, u * tent(s.t) + (1 - u) * tent(s.t - 4))


def test_sim_generate_dataset_reproducible():
    config = SimulationConfig()
    a = generate_dataset(config, 1.4, _rng(5))
    b = generate_dataset(config, 1.4, _rng(5))
    np.testing.assert_array_equal(a.region.cases, b.region.cases)
    np.testing.assert_array_equal(a.region.series[3].value, b.region.series[3].value)


@pytest.fixture(scope="module")
def small_study():
    config = SimulationConfig(
        relative_risks=(1.0, 3.0),
        n_replicates=2,
        M=9,
        modes=("univariate", "functional"),
        seed=11,
    )
    return config, run_study(config)


def test_sim_run_study(small_study):
    _, act = small_study
    assert act.n_failed == 0
    curves = act.power_curves
    assert len(curves) == 8
    assert curves.columns.tolist()[:3] == ["mode", "exp_delta", "target"]
    for col in ("power", "tp", "fp", "tp_zero", "fp_zero"):
        assert curves[col].between(0, 1).all()
    assert (curves.tp_zero <= curves.tp + 1e-12).all()
    assert (curves.n == 2).all()
    assert len(act.detail) == 16
    assert set(act.detail.mode) == {"univariate", "functional"}
    assert act.theta_scale > 0
    assert 0 <= act.power("functional", 3.0, "true") <= 1
    with pytest.raises(KeyError):
        act.power("none", 3.0)


def test_sim_run_study_write(tmp_path, small_study):
    _, act = small_study
    paths = act.write(tmp_path)
    assert [p.name for p in paths] == ["power_curves.csv", "replicates.csv"]
    back = pd.read_csv(tmp_path / "power_curves.csv")
    assert len(back) == 8


def test_sim_run_study_n_jobs():
    config = SimulationConfig(
        relative_risks=(2.0,), n_replicates=2, M=5, modes=("univariate",), seed=4
    )
    serial = run_study(config)
    parallel = run_study(replace(config, n_jobs=2))
    pd.testing.assert_frame_equal(serial.detail, parallel.detail)


def test_sim_write_fixture(tmp_path):
    paths = sim.write_fixture(SimulationConfig(), tmp_path, exp_delta=2.0)
    assert sorted(paths) == ["counts", "locations", "series"]
    assert len(pd.read_csv(paths["series"])) == 94 * 70


@pytest.fixture(scope="module")
def desk_study():
    config = SimulationConfig(
        relative_risks=(1.0, 2.0),
        n_replicates=200,
        M=99,
        modes=("univariate", "functional"),
        n_jobs=4,
    )
    return run_study(config)


@pytest.mark.study
def test_sim_power_study_functional(desk_study):
    assert 0.90 <= desk_study.power("functional", 2.0, "true") <= 1.0
    assert desk_study.power("functional", 2.0, "fake") <= 0.05
    assert desk_study.power("functional", 1.0, "true") <= 0.15


@pytest.mark.study
def test_sim_power_study_univariate(desk_study):
    assert desk_study.power("univariate", 1.0, "fake") >= 0.80


@pytest.mark.study
def test_sim_power_study_size():
    config = SimulationConfig(
        relative_risks=(1.0,),
        n_replicates=400,
        M=99,
        theta_scale=0.0,
        modes=("functional",),
        n_jobs=4,
    )
    detail = run_study(config).detail
    sig = detail.loc[(detail.target == "true") & detail.error.isna(), "significant"]
    assert len(sig) >= 390
    assert 0.02 <= sig.astype(float).mean() <= 0.09


def test_sim_parameter_function_recovery():
    data = generate_dataset(SimulationConfig(), 1.0, _rng(7))
    pipe = data.region.pipe().adjust("functional")
    adj = pipe.adjustment()
    _, fit = pipe.null(adj)
    assert fit.J >= 1
    grid = np.linspace(0, 21, 211)
    est = glm.parameter_function(fit, adj.design, adj.bss, grid).theta.to_numpy()
    # centred curves only vary along differences of the three tent shapes
    span = np.column_stack(
        [tent(grid) - tent(grid - 4), tent(grid + 4) - tent(grid - 4)]
    )
    coef, *_ = np.linalg.lstsq(span, theta_true(grid), rcond=None)
    assert np.corrcoef(est, span @ coef)[0, 1] > 0.8
    assert np.corrcoef(est, theta_true(grid))[0, 1] > 0.5
