"""Functional data: basis systems, least-squares smoothing, Gram matrices and
functional principal component analysis.

A longitudinal series observed at ``m_i`` time points is turned into a
function ``X_i(t) = sum_j a_ij phi_j(t)`` over a basis of dimension ``K``.
Functional PCA of the coefficient matrix ``A`` under the Gram metric ``Psi``
is an ordinary PCA of ``(A - mean) Psi^(1/2)``; the eigenfunction coefficients
are ``V = Psi^(-1/2) G`` and the scores are ``C = (A - mean) Psi V``.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg

from fmscan.errors import DecompositionError, DomainError, InputError, SmoothingError

_logger = logging.getLogger(__name__)

_SINGULAR_RTOL = 1e-14
_SQRT_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class LongitudinalSeries:
    """Observations ``value`` at strictly increasing times ``t`` for one location."""

    id: str
    t: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.value, dtype=float)
        if t.shape != v.shape or t.ndim != 1:
            raise InputError(f"series {self.id}: t and value must be 1d, same length")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise InputError(
                f"series {self.id}: times must be strictly increasing", {"id": self.id}
            )
        if not (np.isfinite(t).all() and np.isfinite(v).all()):
            raise InputError(
                f"series {self.id}: non-finite observation", {"id": self.id}
            )
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "value", v)

    @property
    def m(self):
        return self.t.size


class _Basis:
    """Base basis system over the interval ``domain``.

    Instantiate via :func:`basis`.
    """

    kind = None

    def __init__(self, domain):
        a, b = (float(_) for _ in domain)
        if not b > a:
            raise DomainError(f"Invalid domain ({a}, {b}), need a < b")
        self.domain = (a, b)

    def __repr__(self):
        return f"{type(self).__name__}(domain={self.domain}, K={self.dim})"

    @property
    def dim(self):
        raise NotImplementedError

    def _check(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        a, b = self.domain
        eps = 1e-12 * (b - a)
        out = (t < a - eps) | (t > b + eps) | ~np.isfinite(t)
        if out.any():
            raise DomainError(
                f"time points {t[out][:5].tolist()} outside domain {self.domain}",
                {"domain": list(self.domain)},
            )
        return np.clip(t, a, b)

    def eval(self, t):
        """Basis values, shape ``(len(t), K)``."""
        raise NotImplementedError

    def quad_rule(self):
        """Gauss-Legendre nodes and weights covering the domain."""
        raise NotImplementedError


def _gauss_legendre(breaks, n):
    x, w = np.polynomial.legendre.leggauss(n)
    lo, hi = np.asarray(breaks[:-1]), np.asarray(breaks[1:])
    half = (hi - lo)[:, None] / 2
    nodes = (half * x + ((hi + lo)[:, None] / 2)).ravel()
    weights = (half * w).ravel()
    return nodes, weights


class BSpline(_Basis):
    """B-spline basis of given degree.

    Args
    ----
    domain: (float, float)
        Interval ``T``.
    degree: int
        Polynomial degree, 3 for cubic.
    n_knots: int
        Number of equally spaced knots including both boundaries.
        Ignored when ``knots`` is given.
    knots: array_like, optional
        Interior knots, strictly increasing, strictly inside ``domain``.

    The dimension is ``len(interior knots) + degree + 1``; with equally spaced
    knots that is ``n_knots + degree - 1``.
    """

    kind = "bspline"

    def __init__(self, domain, degree=3, n_knots=13, knots=None):
        super().__init__(domain)
        a, b = self.domain
        if degree < 0:
            raise DomainError(f"Invalid degree {degree}")
        if knots is None:
            if n_knots < 2:
                raise DomainError(f"Invalid n_knots {n_knots}, need at least 2")
            interior = np.linspace(a, b, int(n_knots))[1:-1]
        else:
            interior = np.asarray(knots, dtype=float)
            if interior.size and (
                np.any(np.diff(interior) <= 0) or interior[0] <= a or interior[-1] >= b
            ):
                raise DomainError(
                    f"knots must be increasing and inside {self.domain}: {interior}"
                )
        self.degree = int(degree)
        self.interior = interior
        self.breaks = np.concatenate([[a], interior, [b]])
        self.knots = np.concatenate(
            [np.repeat(a, degree + 1), interior, np.repeat(b, degree + 1)]
        )

    @property
    def dim(self):
        return self.interior.size + self.degree + 1

    def eval(self, t):
        """Cox-de Boor recurrence, vectorised over ``t``."""
        x = self._check(t)
        tk = self.knots
        b = ((tk[:-1] <= x[:, None]) & (x[:, None] < tk[1:])).astype(float)
        # right end belongs to the last non-empty span
        at_end = x >= tk[-1]
        if at_end.any():
            last = np.flatnonzero(tk[:-1] < tk[1:])[-1]
            b[at_end] = 0.0
            b[at_end, last] = 1.0
        m = tk.size - 1
        for k in range(1, self.degree + 1):
            nk = m - k
            lo, hi = tk[:nk], tk[k + 1 : k + 1 + nk]
            den_l = tk[k : k + nk] - lo
            den_r = hi - tk[1 : 1 + nk]
            with np.errstate(divide="ignore", invalid="ignore"):
                left = np.where(den_l > 0, (x[:, None] - lo) / den_l, 0.0)
                right = np.where(den_r > 0, (hi - x[:, None]) / den_r, 0.0)
            b = left * b[:, :nk] + right * b[:, 1 : nk + 1]
        return b

    def quad_rule(self):
        return _gauss_legendre(self.breaks, self.degree + 1)


class Fourier(_Basis):
    """Orthonormal Fourier basis ``1, sin, cos, sin, cos, ...``.

    Args
    ----
    domain: (float, float)
        Interval ``T``.
    n_basis: int
        Dimension ``K``.
    period: float, optional
        Defaults to the domain length, which makes the basis orthonormal.
    """

    kind = "fourier"

    def __init__(self, domain, n_basis=5, period=None):
        super().__init__(domain)
        if n_basis < 1:
            raise DomainError(f"Invalid n_basis {n_basis}")
        a, b = self.domain
        self.n_basis = int(n_basis)
        self.period = float(period) if period else b - a

    @property
    def dim(self):
        return self.n_basis

    def eval(self, t):
        x = self._check(t) - self.domain[0]
        p = self.period
        res = np.empty((x.size, self.n_basis))
        res[:, 0] = 1 / np.sqrt(p)
        for j in range(1, self.n_basis):
            k = (j + 1) // 2
            f = np.sin if j % 2 else np.cos
            res[:, j] = np.sqrt(2 / p) * f(2 * np.pi * k * x / p)
        return res

    def quad_rule(self):
        a, b = self.domain
        return _gauss_legendre(np.linspace(a, b, self.n_basis + 1), 20)


def basis(kind, domain, **kwargs):
    """The :class:`basis system <fmscan.fda._Basis>` factory.

    Args
    ----
    kind: str
        ``bspline`` or ``fourier``.
    domain: (float, float)
        Interval ``T``.
    kwargs:
        Passed to :class:`BSpline` or :class:`Fourier`.

    Examples
    --------
    >>> from fmscan.fda import basis
    >>> basis("bspline", (0, 21), degree=3, n_knots=13).dim
    15
    >>> basis("fourier", (0, 1), n_basis=5).dim
    5
    """
    if kind == "bspline":
        return BSpline(domain, **kwargs)
    elif kind == "fourier":
        return Fourier(domain, **kwargs)
    else:
        raise ValueError(f"Invalid basis kind '{kind}', either 'bspline' or 'fourier'")


def eval_basis(bss, t):
    """Basis values at ``t``: a length-K vector for a scalar, else ``(len(t), K)``."""
    res = bss.eval(t)
    return res[0] if np.ndim(t) == 0 else res


def gram_matrix(bss):
    """Gram matrix ``Psi_jr = int phi_j phi_r`` by Gauss-Legendre quadrature.

    For B-splines ``degree + 1`` nodes per knot span integrate the products
    exactly.
    """
    nodes, weights = bss.quad_rule()
    b = bss.eval(nodes)
    psi = b.T @ (weights[:, None] * b)
    return (psi + psi.T) / 2


def smooth_series(series, bss):
    """Least-squares basis coefficients, one row per series.

    Series sharing a time grid share one design matrix.

    Returns
    -------
    numpy.ndarray
        ``n x K`` coefficient matrix ``A`` in the order of ``series``.
    """
    k = bss.dim
    res = np.empty((len(series), k))
    groups = {}
    for i, s in enumerate(series):
        groups.setdefault(s.t.tobytes(), []).append(i)
    _logger.info(f"smoothing {len(series)} series on {len(groups)} time grids, K={k}")
    for idx in groups.values():
        t = series[idx[0]].t
        ids = [series[i].id for i in idx]
        if t.size < k:
            raise SmoothingError(
                f"series {ids} have {t.size} observations, fewer than K={k}",
                {"ids": ids},
            )
        design = bss.eval(t)
        rank = np.linalg.matrix_rank(design)
        if rank < k:
            raise SmoothingError(
                f"singular smoothing design (rank {rank} < K={k}) for series {ids}",
                {"ids": ids, "rank": int(rank)},
            )
        y = np.column_stack([series[i].value for i in idx])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        res[idx] = coef.T
    return res


@dataclass(frozen=True, eq=False)
class FunctionalDesign:
    """Result of :func:`functional_pca`.

    Attributes
    ----------
    A : numpy.ndarray
        ``n x K`` basis coefficients.
    gram : numpy.ndarray
        ``K x K`` Gram matrix ``Psi``.
    eigenvalues : numpy.ndarray
        Non-increasing, non-negative.
    V : numpy.ndarray
        Eigenfunction coefficients, ``V' Psi V = I``.
    C : numpy.ndarray
        ``n x K`` scores in the eigenbasis.
    mean_coeffs : numpy.ndarray
        Coefficients of the mean function.
    """

    A: np.ndarray
    gram: np.ndarray
    eigenvalues: np.ndarray
    V: np.ndarray
    C: np.ndarray
    mean_coeffs: np.ndarray

    @property
    def K(self):
        return self.V.shape[1]

    @property
    def inertia(self):
        """Cumulative share of total variance of the first ``J`` components."""
        total = self.eigenvalues.sum()
        if total <= 0:
            return np.ones_like(self.eigenvalues)
        return np.cumsum(self.eigenvalues) / total


def _sym_sqrt(gram):
    w, u = linalg.eigh(gram)
    top = w.max()
    if w.min() <= _SINGULAR_RTOL * top:
        raise DecompositionError(
            f"Gram matrix numerically singular, smallest eigenvalue {w.min():.3e}",
            {"smallest_eigenvalue": float(w.min())},
        )
    w = np.maximum(w, _SQRT_FLOOR * top)
    return (u * np.sqrt(w)) @ u.T, (u / np.sqrt(w)) @ u.T


def functional_pca(A, gram):
    """Functional PCA of basis coefficients under the Gram metric.

    Rows of ``A`` are centred; the covariance ``W'W / n`` of
    ``W = (A - mean) Psi^(1/2)`` is eigendecomposed, so column variances of
    the scores (``ddof=0``) equal the eigenvalues.

    Parameters
    ----------
    A : numpy.ndarray
        ``n x K`` coefficients from :func:`smooth_series`.
    gram : numpy.ndarray
        Gram matrix; the identity gives an ordinary multivariate PCA.

    Returns
    -------
    FunctionalDesign
    """
    A = np.asarray(A, dtype=float)
    gram = np.asarray(gram, dtype=float)
    n = A.shape[0]
    sqrt, inv_sqrt = _sym_sqrt(gram)
    mean = A.mean(axis=0)
    w = (A - mean) @ sqrt
    lam, g = linalg.eigh(w.T @ w / n)
    order = np.argsort(lam, kind="stable")[::-1]
    lam, g = np.clip(lam[order], 0, None), g[:, order]
    # deterministic sign: largest absolute loading positive
    flip = np.sign(g[np.abs(g).argmax(axis=0), np.arange(g.shape[1])])
    g = g * np.where(flip == 0, 1, flip)
    v = inv_sqrt @ g
    c = (A - mean) @ gram @ v
    _logger.info(
        f"functional PCA: K={A.shape[1]}, leading eigenvalues {np.round(lam[:3], 6)}"
    )
    return FunctionalDesign(A, gram, lam, v, c, mean)


def eigenfunction_eval(design, bss, j, t):
    """Value of the ``j``-th eigenfunction (1-based) at ``t``."""
    if not 1 <= j <= design.K:
        raise IndexError(f"eigenfunction index {j} outside 1..{design.K}")
    res = bss.eval(t) @ design.V[:, j - 1]
    return float(res[0]) if np.ndim(t) == 0 else res


def common_grid(series):
    """Stack series observed on one common time grid into an ``n x m`` matrix."""
    t0 = series[0].t
    bad = [s.id for s in series if s.t.shape != t0.shape or not np.array_equal(s.t, t0)]
    if bad:
        raise InputError(
            f"multivariate adjustment needs a common time grid; ids {bad[:10]} differ",
            {"ids": bad},
        )
    return t0, np.vstack([s.value for s in series])


def summarise_series(series, stat="mean"):
    """One scalar per series: the ``mean`` or ``median`` of its observations."""
    if stat == "mean":
        return np.array([s.value.mean() for s in series])
    elif stat == "median":
        return np.array([np.median(s.value) for s in series])
    else:
        raise ValueError(f"Invalid stat '{stat}', either 'mean' or 'median'")


def read_series(pth):
    """Read long-format series from a CSV with header ``id,t,value``.

    Rows may come in any order; times are sorted per id.

    Returns
    -------
    dict of str to LongitudinalSeries
    """
    df = pd.read_csv(pth, dtype={"id": str}, encoding="utf-8")
    missing = [c for c in ("id", "t", "value") if c not in df.columns]
    if missing:
        raise InputError(f"{pth}: missing columns {missing}", {"columns": missing})
    res = {}
    df = df.sort_values(["id", "t"], kind="stable")
    for nme, grp in df.groupby("id", sort=False):
        res[nme] = LongitudinalSeries(
            nme, grp["t"].to_numpy(), grp["value"].to_numpy()
        )
    _logger.debug(f"read {len(res)} series from {pth}")
    return res
