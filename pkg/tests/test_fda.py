import numpy as np
import pandas as pd
import pytest
from scipy import integrate, interpolate

from fmscan.errors import DecompositionError, DomainError, InputError, SmoothingError
from fmscan.fda import (
    LongitudinalSeries,
    basis,
    common_grid,
    eigenfunction_eval,
    eval_basis,
    functional_pca,
    gram_matrix,
    read_series,
    smooth_series,
    summarise_series,
)


@pytest.fixture(scope="module")
def bss():
    return basis("bspline", (0, 21), degree=3, n_knots=13)


def test_fda_basis_factory():
    assert basis("bspline", (0, 21)).dim == 15
    assert basis("bspline", (0, 1), degree=2, n_knots=5).dim == 6
    assert basis("fourier", (0, 1), n_basis=7).dim == 7
    with pytest.raises(ValueError):
        basis("wavelet", (0, 1))
    with pytest.raises(DomainError):
        basis("bspline", (1, 1))


def test_fda_bspline_partition_of_unity(bss):
    vals = bss.eval(np.linspace(0, 21, 211))
    assert vals.shape == (211, 15)
    assert np.all(vals >= -1e-14)
    np.testing.assert_allclose(vals.sum(axis=1), 1.0, atol=1e-12)


def test_fda_bspline_against_scipy(bss):
    x = np.linspace(0.01, 20.99, 97)
    exp = interpolate.BSpline(bss.knots, np.eye(bss.dim), bss.degree)(x)
    np.testing.assert_allclose(bss.eval(x), exp, atol=1e-12)


def test_fda_bspline_right_end(bss):
    act = eval_basis(bss, 21.0)
    assert act.shape == (15,)
    assert act[-1] == pytest.approx(1.0)
    assert act[:-1].sum() == pytest.approx(0.0)


def test_fda_eval_outside_domain(bss):
    with pytest.raises(DomainError):
        bss.eval([-0.5, 3.0])
    with pytest.raises(DomainError):
        bss.eval([21.5])


def test_fda_gram_matrix_against_quad(bss):
    gram = gram_matrix(bss)
    np.testing.assert_allclose(gram, gram.T)
    for i, j in [(0, 0), (3, 4), (7, 7), (14, 13), (2, 9)]:
        exp, _ = integrate.quad(
            lambda t: bss.eval(t)[0, i] * bss.eval(t)[0, j],
            0,
            21,
            points=bss.interior,
            limit=200,
        )
        assert gram[i, j] == pytest.approx(exp, abs=1e-9)


def test_fda_fourier_orthonormal():
    f = basis("fourier", (2, 5), n_basis=5)
    np.testing.assert_allclose(gram_matrix(f), np.eye(5), atol=1e-10)


def test_fda_smooth_series_exact(bss):
    rng = np.random.default_rng(0)
    t = np.linspace(0, 21, 40)
    coef = rng.normal(size=(3, bss.dim))
    series = [
        LongitudinalSeries(str(i), t, bss.eval(t) @ c) for i, c in enumerate(coef)
    ]
    np.testing.assert_allclose(smooth_series(series, bss), coef, atol=1e-8)


def test_fda_smooth_series_mixed_grids(bss):
    rng = np.random.default_rng(1)
    a = np.linspace(0, 21, 30)
    b = np.linspace(0.3, 20.7, 25)
    coef = rng.normal(size=(2, bss.dim))
    series = [
        LongitudinalSeries("a", a, bss.eval(a) @ coef[0]),
        LongitudinalSeries("b", b, bss.eval(b) @ coef[1]),
    ]
    np.testing.assert_allclose(smooth_series(series, bss), coef, atol=1e-7)


def test_fda_smooth_series_too_short(bss):
    t = np.linspace(0, 21, 10)
    with pytest.raises(SmoothingError) as ex:
        smooth_series([LongitudinalSeries("x", t, np.sin(t))], bss)
    assert ex.value.detail["ids"] == ["x"]


def test_fda_series_invalid():
    with pytest.raises(InputError):
        LongitudinalSeries("x", [0, 2, 1], [1, 2, 3])
    with pytest.raises(InputError):
        LongitudinalSeries("x", [0, 1, 2], [1, np.nan, 3])
    with pytest.raises(InputError):
        LongitudinalSeries("x", [0, 1], [1, 2, 3])


def test_fda_functional_pca(bss):
    rng = np.random.default_rng(2)
    A = rng.normal(size=(40, bss.dim)) @ rng.normal(size=(bss.dim, bss.dim))
    gram = gram_matrix(bss)
    design = functional_pca(A, gram)
    np.testing.assert_allclose(design.V.T @ gram @ design.V, np.eye(bss.dim), atol=1e-8)
    ev = design.eigenvalues
    assert np.all(ev >= 0)
    assert np.all(np.diff(ev) <= 1e-12 * ev[0])
    np.testing.assert_allclose(design.C.mean(axis=0), 0, atol=1e-8)
    np.testing.assert_allclose(design.C.var(axis=0), ev, rtol=1e-6, atol=1e-10)
    assert design.inertia[-1] == pytest.approx(1.0)
    np.testing.assert_allclose(design.mean_coeffs, A.mean(axis=0))


def test_fda_functional_pca_reconstruction(bss):
    rng = np.random.default_rng(6)
    A = rng.normal(size=(30, bss.dim))
    design = functional_pca(A, gram_matrix(bss))
    nodes, _ = bss.quad_rule()
    phi = bss.eval(nodes)
    act = phi @ (design.mean_coeffs[:, None] + design.V @ design.C.T)
    np.testing.assert_allclose(act, phi @ A.T, atol=1e-6)


def test_fda_functional_pca_identity_is_pca():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(30, 5)) * [3, 2, 1, 0.5, 0.1]
    design = functional_pca(A, np.eye(5))
    exp = np.sort(np.linalg.eigvalsh(np.cov(A, rowvar=False, ddof=0)))[::-1]
    np.testing.assert_allclose(design.eigenvalues, exp, rtol=1e-8)


def test_fda_functional_pca_singular_gram():
    A = np.random.default_rng(4).normal(size=(10, 3))
    with pytest.raises(DecompositionError):
        functional_pca(A, np.diag([1.0, 1.0, 0.0]))


def test_fda_eigenfunction_eval(bss):
    rng = np.random.default_rng(5)
    design = functional_pca(rng.normal(size=(25, bss.dim)), gram_matrix(bss))
    t = np.linspace(0, 21, 11)
    np.testing.assert_allclose(
        eigenfunction_eval(design, bss, 1, t), bss.eval(t) @ design.V[:, 0]
    )
    assert isinstance(eigenfunction_eval(design, bss, 2, 3.0), float)
    with pytest.raises(IndexError):
        eigenfunction_eval(design, bss, 0, t)


def test_fda_common_grid():
    t = np.arange(4.0)
    series = [LongitudinalSeries(str(i), t, t * i) for i in range(3)]
    grid, vals = common_grid(series)
    np.testing.assert_array_equal(grid, t)
    assert vals.shape == (3, 4)

    series.append(LongitudinalSeries("odd", t[:3], t[:3]))
    with pytest.raises(InputError):
        common_grid(series)


def test_fda_summarise_series():
    series = [
        LongitudinalSeries("a", [0, 1, 2], [1, 2, 9]),
        LongitudinalSeries("b", [0, 1, 2], [0, 0, 3]),
    ]
    np.testing.assert_allclose(summarise_series(series), [4, 1])
    np.testing.assert_allclose(summarise_series(series, "median"), [2, 0])
    with pytest.raises(ValueError):
        summarise_series(series, "max")


def test_fda_read_series(tmp_path):
    pth = tmp_path / "series.csv"
    pd.DataFrame(
        {"id": ["b", "a", "b", "a"], "t": [1, 1, 0, 0], "value": [4, 2, 3, 1]}
    ).to_csv(pth, index=False)
    act = read_series(pth)
    assert sorted(act) == ["a", "b"]
    np.testing.assert_array_equal(act["b"].t, [0, 1])
    np.testing.assert_array_equal(act["b"].value, [3, 4])

    pd.DataFrame({"id": ["a"], "t": [0]}).to_csv(pth, index=False)
    with pytest.raises(InputError):
        read_series(pth)
