import numpy as np
import pytest

from fmscan._pipe import Analysis, _Pipe
from fmscan.errors import InputError
from fmscan.region import StudyRegion


def test_pipe_clause_copy(region):
    base = region.pipe()
    act = base.adjust("univariate", "median").monte_carlo(M=9, seed=4)
    assert base.opts["mode"] == "functional"
    assert base.opts["M"] == 999
    assert act.opts["mode"] == "univariate"
    assert act.opts["summary"] == "median"
    assert (act.opts["M"], act.opts["seed"]) == (9, 4)
    assert isinstance(act, _Pipe)


def test_pipe_clause_methods(region):
    act = (
        region.pipe()
        .family("gaussian")
        .basis("fourier", (0, 21), n_basis=7)
        .windows(0.25, "population")
        .sides("high")
        .inertia(0.9)
        .level(0.1, 0.2)
        .opts
    )
    assert act["family"] == "gaussian"
    assert (act["basis"], act["domain"], act["n_basis"]) == ("fourier", (0, 21), 7)
    assert (act["max_fraction"], act["max_fraction_by"]) == (0.25, "population")
    assert act["sides"] == "high"
    assert act["inertia_cap"] == 0.9
    assert (act["level"], act["secondary_level"]) == (0.1, 0.2)


def test_pipe_invalid(region):
    with pytest.raises(TypeError):
        region.pipe(colour="red")
    with pytest.raises(ValueError):
        region.pipe().adjust("spatial")
    with pytest.raises(ValueError):
        region.pipe().family("gamma")
    with pytest.raises(ValueError):
        region.pipe().sides("up")
    with pytest.raises(TypeError):
        region.pipe().basis("bspline", order=4)


def test_pipe_adjustment(region):
    pipe = region.pipe(n_knots=8)
    adj = pipe.adjust("none").adjustment()
    assert adj.Z.shape == (20, 1)
    assert adj.design is None and adj.C is None

    adj = pipe.adjust("univariate").adjustment()
    assert adj.Z.shape == (20, 2)
    means = np.array([s.value.mean() for s in region.series])
    np.testing.assert_allclose(adj.Z[:, 1], means)

    adj = pipe.adjust("multivariate").adjustment()
    assert adj.design.K == 25
    assert adj.grid.shape == (25,)

    adj = pipe.adjust("functional").adjustment()
    assert adj.design.K == 10
    assert adj.bss.dim == 10
    assert adj.eigenvalues.shape == (10,)


def test_pipe_adjustment_needs_series(region):
    bare = StudyRegion(
        region.ids, region.coords, region.cases, region.populations, region.covariates
    )
    assert bare.pipe().adjust("none").adjustment().Z.shape == (20, 1)
    with pytest.raises(InputError):
        bare.pipe().adjust("functional").adjustment()


def test_pipe_null(region):
    tbl, null_fit = region.pipe(n_knots=8).null()
    assert null_fit.J == int(tbl.loc[tbl.aic.idxmin(), "J"])
    tbl, null_fit = region.pipe().adjust("none").null()
    assert tbl is None
    assert null_fit.J == 0


def test_pipe_run_functional(region):
    act = region.pipe(n_knots=8).monte_carlo(M=9, seed=1).run()
    assert isinstance(act, Analysis)
    assert act.mode == "functional"
    assert act.result.replicates.shape == (9,)
    assert act.result.p_value == pytest.approx(0.1)
    assert act.significant is False
    assert act.theta.shape == (201, 2)
    assert act.theta.t.iloc[0] == 0 and act.theta.t.iloc[-1] == 21
    assert act.result.clusters[0].rank == 1


def test_pipe_run_multivariate(region):
    act = region.pipe().adjust("multivariate").monte_carlo(M=9, seed=1).run()
    assert act.theta.shape == (25, 2)
    assert act.truncation is not None


def test_pipe_run_family(test_region):
    fam, region = test_region
    act = region.pipe(family=fam).adjust("univariate").monte_carlo(M=9).run()
    assert act.null_fit.family == fam
    assert 0.1 <= act.result.p_value <= 1
    assert act.theta is None
    assert act.truncation is None


def test_pipe_run_reproducible(region):
    pipe = region.pipe().adjust("none").monte_carlo(M=9, seed=7)
    a, b = pipe.run(), pipe.run()
    np.testing.assert_array_equal(a.result.replicates, b.result.replicates)
    assert a.result.mlc == b.result.mlc
