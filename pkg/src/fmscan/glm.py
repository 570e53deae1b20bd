"""Exponential-family likelihoods, IRLS fitting and the truncated null model.

Under the null hypothesis the linear predictor is
``alpha + Z'beta + C_(1..J)'theta`` with the first ``J`` functional PCA scores
``C`` standing in for ``int X(t) theta(t) dt``. ``J`` is chosen by AIC among
candidates whose cumulative inertia stays below a cap.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy import linalg, special

from fmscan.errors import FitError, SelectionError

_logger = logging.getLogger(__name__)

_CORR_MAX = 0.9999
_MU_EPS = 1e-10
_SCALE_EPS = 1e-12


class _Family:
    """Base exponential family: link, variance function and log-likelihood.

    Instantiate via :func:`family`.
    """

    nme = None
    link_nme = None
    has_scale = False

    def __repr__(self):
        return f"{type(self).__name__}(link={self.link_nme})"

    def link(self, mu):
        raise NotImplementedError

    def inverse(self, eta):
        raise NotImplementedError

    def deriv(self, mu):
        """Derivative of the link, ``d eta / d mu``."""
        raise NotImplementedError

    def variance(self, mu):
        raise NotImplementedError

    def loglik(self, y, mu, scale=None):
        raise NotImplementedError

    def start_mu(self, y):
        raise NotImplementedError

    def validate(self, y):
        return np.asarray(y, dtype=float)

    def scale(self, y, mu):
        return None

    def sample(self, rng, mu, scale=None):
        raise NotImplementedError


class Poisson(_Family):
    """Log link, ``sigma(mu) = mu``, ``F = y log mu - mu - log y!``."""

    nme = "poisson"
    link_nme = "log"

    def link(self, mu):
        return np.log(mu)

    def inverse(self, eta):
        return np.exp(eta)

    def deriv(self, mu):
        return 1 / mu

    def variance(self, mu):
        return mu

    def loglik(self, y, mu, scale=None):
        return float(np.sum(special.xlogy(y, mu) - mu - special.gammaln(y + 1)))

    def start_mu(self, y):
        return y + 0.5

    def validate(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise FitError("poisson outcomes must be non-negative integers")
        return y

    def sample(self, rng, mu, scale=None):
        return rng.poisson(mu).astype(float)


class Bernoulli(_Family):
    """Logit link, ``sigma(mu) = mu (1 - mu)``."""

    nme = "bernoulli"
    link_nme = "logit"

    def link(self, mu):
        return special.logit(mu)

    def inverse(self, eta):
        return np.clip(special.expit(eta), _MU_EPS, 1 - _MU_EPS)

    def deriv(self, mu):
        return 1 / (mu * (1 - mu))

    def variance(self, mu):
        return mu * (1 - mu)

    def loglik(self, y, mu, scale=None):
        return float(np.sum(special.xlogy(y, mu) + special.xlog1py(1 - y, -mu)))

    def start_mu(self, y):
        return (y + 0.5) / 2

    def validate(self, y):
        y = np.asarray(y, dtype=float)
        if not np.all((y == 0) | (y == 1)):
            raise FitError("bernoulli outcomes must be 0 or 1")
        return y

    def sample(self, rng, mu, scale=None):
        return rng.binomial(1, mu).astype(float)


class Gaussian(_Family):
    """Identity link; the variance is profiled out (MLE ``RSS / n``)."""

    nme = "gaussian"
    link_nme = "identity"
    has_scale = True

    def link(self, mu):
        return np.asarray(mu, dtype=float)

    def inverse(self, eta):
        return np.asarray(eta, dtype=float)

    def deriv(self, mu):
        return np.ones_like(mu)

    def variance(self, mu):
        return np.ones_like(mu)

    def scale(self, y, mu):
        # floored so an exact fit keeps a finite log-likelihood
        y = np.asarray(y, dtype=float)
        mse = float(np.mean((y - mu) ** 2))
        return max(mse, _SCALE_EPS * max(float(np.var(y)), 1.0))

    def loglik(self, y, mu, scale=None):
        scale = self.scale(y, mu) if scale is None else max(scale, _SCALE_EPS)
        r = y - mu
        return float(-0.5 * np.sum(np.log(2 * np.pi * scale) + r**2 / scale))

    def start_mu(self, y):
        return np.asarray(y, dtype=float)

    def sample(self, rng, mu, scale=None):
        return rng.normal(mu, np.sqrt(scale))


def family(nme):
    """The :class:`family <fmscan.glm._Family>` factory.

    Args
    ----
    nme: str, or fmscan.glm._Family
        ``poisson``, ``bernoulli`` or ``gaussian``. A family object is
        returned unchanged.

    Examples
    --------
    >>> from fmscan.glm import family
    >>> family("poisson")
    Poisson(link=log)
    >>> family("gaussian").link_nme
    'identity'
    """
    if isinstance(nme, _Family):
        return nme
    if nme == "poisson":
        return Poisson()
    elif nme == "bernoulli":
        return Bernoulli()
    elif nme == "gaussian":
        return Gaussian()
    else:
        raise ValueError(
            f"Invalid family '{nme}', either 'poisson', 'bernoulli' or 'gaussian'"
        )


@dataclass(frozen=True, eq=False)
class GlmFit:
    coef: np.ndarray
    loglik: float
    mu: np.ndarray
    scale: Optional[float]
    n_iter: int
    converged: bool
    names: tuple


def _names(X, names):
    if names is None:
        return tuple(f"x{j}" for j in range(X.shape[1]))
    return tuple(names)


def _check_design(X, names):
    """Reject near-duplicate columns and rank deficient designs."""
    sd = X.std(axis=0)
    var = np.flatnonzero(sd > 0)
    if var.size > 1:
        corr = np.corrcoef(X[:, var], rowvar=False)
        i, j = np.nonzero(np.triu(np.abs(corr) > _CORR_MAX, k=1))
        if i.size:
            pairs = [(names[var[a]], names[var[b]]) for a, b in zip(i, j)]
            raise FitError(
                f"collinear columns (|corr| > {_CORR_MAX}): {pairs}",
                {"columns": [list(p) for p in pairs]},
            )
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > diag.max() * max(X.shape) * np.finfo(float).eps))
    if rank < X.shape[1]:
        bad = [names[k] for k in piv[rank:]]
        raise FitError(
            f"design rank {rank} < {X.shape[1]} columns, collinear columns {bad}",
            {"columns": bad},
        )


def fit_glm(y, X, fam, offset=None, names=None, tol=1e-10, max_iter=100):
    """Maximise a GLM log-likelihood by iteratively reweighted least squares.

    Steps that lower the log-likelihood are halved.

    Parameters
    ----------
    y : array_like
        Outcomes.
    X : numpy.ndarray
        Full column rank design, intercept included.
    fam : str or fmscan.glm._Family
    offset : array_like, optional
        Known additive term of the linear predictor, ``log N`` for Poisson.
    names : sequence of str, optional
        Column names used in error messages.
    tol : float
        Convergence when the relative log-likelihood change is below ``tol``.
    max_iter : int

    Returns
    -------
    GlmFit

    Examples
    --------
    Gaussian with no offset reduces to ordinary least squares:

    >>> import numpy as np
    >>> from fmscan.glm import fit_glm
    >>> X = np.column_stack([np.ones(4), [0.0, 1.0, 2.0, 3.0]])
    >>> fit = fit_glm(np.array([1.0, 3.0, 5.0, 7.0]), X, "gaussian")
    >>> np.round(fit.coef, 6)
    array([1., 2.])
    """
    fam = family(fam)
    y = fam.validate(y)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise FitError(f"design shape {X.shape} does not match {y.size} outcomes")
    off = np.zeros(y.size) if offset is None else np.asarray(offset, dtype=float)
    names = _names(X, names)
    _check_design(X, names)

    mu = fam.start_mu(y)
    eta = fam.link(mu)
    coef = None
    ll_old = -np.inf
    converged = False
    for it in range(1, max_iter + 1):
        d = fam.deriv(mu)
        w = 1 / (d**2 * fam.variance(mu))
        z = eta - off + (y - mu) * d
        sw = np.sqrt(w)
        new, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        eta_new = X @ new + off
        mu_new = fam.inverse(eta_new)
        ll = fam.loglik(y, mu_new, fam.scale(y, mu_new))
        halvings = 0
        while (
            coef is not None
            and not (np.isfinite(ll) and ll >= ll_old)
            and halvings < 30
        ):
            new = (coef + new) / 2
            eta_new = X @ new + off
            mu_new = fam.inverse(eta_new)
            ll = fam.loglik(y, mu_new, fam.scale(y, mu_new))
            halvings += 1
        if not np.isfinite(ll):
            raise FitError(
                f"IRLS diverged at iteration {it}, log-likelihood {ll}",
                {"iteration": it},
            )
        _logger.debug(f"IRLS iteration {it}: loglik={ll:.10g}, halvings={halvings}")
        coef, eta, mu = new, eta_new, mu_new
        if abs(ll - ll_old) <= tol * max(abs(ll), 1.0):
            converged = True
            break
        ll_old = ll
    if not converged:
        _logger.debug(f"IRLS did not converge in {max_iter} iterations")
    return GlmFit(coef, ll, mu, fam.scale(y, mu), it, converged, names)


def loglik_at(coef, y, X, fam, offset=None):
    """Log-likelihood at arbitrary coefficients, dispersion profiled out."""
    fam = family(fam)
    y = np.asarray(y, dtype=float)
    off = 0.0 if offset is None else np.asarray(offset, dtype=float)
    mu = fam.inverse(np.asarray(X, dtype=float) @ np.asarray(coef, dtype=float) + off)
    return fam.loglik(y, mu, fam.scale(y, mu))


def aic(loglik, n_params, fam):
    """``-2 loglik + 2 k``; Gaussian adds one for the variance."""
    k = n_params + (1 if family(fam).has_scale else 0)
    return -2 * loglik + 2 * k


def _null_design(n, Z, C, J):
    cols = [np.ones((n, 1))]
    names = ["intercept"]
    if Z is not None and Z.shape[1]:
        cols.append(Z)
        names += [f"z{j + 1}" for j in range(Z.shape[1])]
    if C is not None and J:
        cols.append(C[:, :J])
        names += [f"c{j + 1}" for j in range(J)]
    return np.hstack(cols), names


def _as_matrix(Z, n):
    if Z is None:
        return None
    Z = np.asarray(Z, dtype=float)
    return Z.reshape(n, -1)


def truncation_candidates(eigenvalues, inertia_cap):
    """Truncations ``J`` within the inertia cap, plus the first one beyond it."""
    if not 0 < inertia_cap <= 1:
        raise SelectionError(f"Invalid inertia_cap {inertia_cap}, must be in (0, 1]")
    ev = np.asarray(eigenvalues, dtype=float)
    total = ev.sum()
    cum = np.cumsum(ev) / total if total > 0 else np.ones_like(ev)
    res = [j + 1 for j in range(ev.size) if cum[j] <= inertia_cap]
    beyond = [j + 1 for j in range(ev.size) if cum[j] > inertia_cap]
    if beyond:
        res.append(beyond[0])
    return res, cum


def truncation_table(y, Z, C, eigenvalues, fam, offset=None, inertia_cap=0.95):
    """AIC of every candidate truncation.

    Returns
    -------
    pandas.DataFrame
        Columns ``J, inertia, loglik, aic, converged, error``, one row per
        candidate, ascending ``J``.
    """
    fam = family(fam)
    n = np.asarray(y).size
    Z = _as_matrix(Z, n)
    p = 0 if Z is None else Z.shape[1]
    cand, cum = truncation_candidates(eigenvalues, inertia_cap)
    rows = []
    for J in cand:
        X, names = _null_design(n, Z, C, J)
        try:
            fit = fit_glm(y, X, fam, offset, names)
        except FitError as ex:
            _logger.debug(f"J={J} failed: {ex}")
            rows.append(
                dict(
                    J=J,
                    inertia=cum[J - 1],
                    loglik=np.nan,
                    aic=np.nan,
                    converged=False,
                    error=str(ex),
                )
            )
            continue
        crit = aic(fit.loglik, 1 + p + J, fam)
        _logger.debug(f"J={J}: loglik={fit.loglik:.6f}, aic={crit:.6f}")
        rows.append(
            dict(
                J=J,
                inertia=cum[J - 1],
                loglik=fit.loglik,
                aic=crit,
                converged=fit.converged,
                error=None,
            )
        )
    cols = ["J", "inertia", "loglik", "aic", "converged", "error"]
    return pd.DataFrame(rows, columns=cols)


def select_truncation(
    y, Z, C, eigenvalues, fam, offset=None, inertia_cap=0.95, return_table=False
):
    """Truncation minimising AIC among the inertia-capped candidates.

    Ties go to the smaller ``J``. With ``return_table`` the
    :func:`truncation_table` is returned alongside.
    """
    tbl = truncation_table(y, Z, C, eigenvalues, fam, offset, inertia_cap)
    ok = tbl.loc[tbl.error.isna()]
    if ok.empty:
        raise SelectionError(
            f"all {len(tbl)} truncation candidates failed: {tbl.error.tolist()}",
            {"errors": tbl.error.tolist()},
        )
    J = int(ok.loc[ok.aic.idxmin(), "J"])
    _logger.info(f"selected truncation J={J} among candidates {tbl.J.tolist()}")
    return (J, tbl) if return_table else J


@dataclass(frozen=True, eq=False)
class NullFit:
    """Estimates under the null hypothesis.

    Attributes
    ----------
    alpha : float
        Intercept.
    beta : numpy.ndarray
        Scalar covariate coefficients.
    theta : numpy.ndarray
        Eigenbasis coefficients of the parameter function, length ``J``.
    J : int
        Truncation.
    loglik : float
    offsets : numpy.ndarray
        Covariate effects ``Z'beta + C'theta`` per location.
    adjusted_populations : numpy.ndarray or None
        Poisson only: ``N exp(Z'beta + C'theta)``.
    mu : numpy.ndarray
        Fitted means.
    scale : float or None
        Gaussian variance.
    """

    alpha: float
    beta: np.ndarray
    theta: np.ndarray
    J: int
    loglik: float
    offsets: np.ndarray
    adjusted_populations: Optional[np.ndarray]
    mu: np.ndarray
    scale: Optional[float]
    family: str
    converged: bool
    aic: float

    @property
    def base_offset(self):
        """Offset of the alternative fits: covariate effects, plus ``log N``."""
        if self.adjusted_populations is not None:
            return np.log(self.adjusted_populations)
        return self.offsets


def fit_null(y, fam, populations=None, Z=None, C=None, J=0, tol=1e-10):
    """Fit the truncated null model ``alpha + Z'beta + C_(1..J)'theta``.

    For Poisson the intercept is the explicit estimator
    ``log(sum Y / sum N~)`` with ``N~ = N exp(Z'beta + C'theta)``, checked to
    satisfy ``exp(alpha) sum N~ = sum Y`` to ``1e-8``.

    Parameters
    ----------
    y : array_like
        Outcomes.
    fam : str or fmscan.glm._Family
    populations : array_like, optional
        At-risk populations ``N``, required for Poisson.
    Z : array_like, optional
        ``n x p`` scalar covariates.
    C : numpy.ndarray, optional
        Scores from :func:`fmscan.fda.functional_pca`.
    J : int
        Number of score columns kept.

    Returns
    -------
    NullFit
    """
    fam = family(fam)
    y = fam.validate(y)
    n = y.size
    Z = _as_matrix(Z, n)
    p = 0 if Z is None else Z.shape[1]
    offset = None
    if fam.nme == "poisson":
        if populations is None:
            raise FitError("poisson null model needs populations")
        pop = np.asarray(populations, dtype=float)
        if np.any(pop <= 0):
            raise FitError("populations must be positive")
        offset = np.log(pop)
    X, names = _null_design(n, Z, C, J)
    fit = fit_glm(y, X, fam, offset, names, tol=tol)
    if not fit.converged:
        raise FitError("null model did not converge", {"iterations": fit.n_iter})
    coef = fit.coef
    effects = X[:, 1:] @ coef[1:]
    adjusted = None
    alpha, mu, ll = float(coef[0]), fit.mu, fit.loglik
    if fam.nme == "poisson":
        adjusted = pop * np.exp(effects)
        total = y.sum()
        if total <= 0:
            raise FitError("no cases observed, intercept undefined")
        alpha = float(np.log(total / adjusted.sum()))
        resid = abs(np.exp(alpha) * adjusted.sum() - total) / total
        if resid > 1e-8:
            raise FitError(f"intercept identity violated, relative error {resid:.3e}")
        mu = adjusted * np.exp(alpha)
        ll = fam.loglik(y, mu)
    _logger.info(f"null fit: alpha={alpha:.6f}, p={p}, J={J}, loglik={ll:.6f}")
    return NullFit(
        alpha=alpha,
        beta=coef[1 : 1 + p].copy(),
        theta=coef[1 + p :].copy(),
        J=J,
        loglik=ll,
        offsets=effects,
        adjusted_populations=adjusted,
        mu=mu,
        scale=fam.scale(y, mu),
        family=fam.nme,
        converged=fit.converged,
        aic=aic(ll, 1 + p + J, fam),
    )


def parameter_function(null_fit, design, bss, grid):
    """The estimated parameter function ``theta(t) = sum_j theta_j phi_j(t)``.

    Returns
    -------
    pandas.DataFrame
        Columns ``t`` and ``theta``.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    J = null_fit.J
    phi = bss.eval(grid)
    vals = phi @ (design.V[:, :J] @ null_fit.theta) if J else np.zeros(grid.size)
    return pd.DataFrame({"t": grid, "theta": vals})
