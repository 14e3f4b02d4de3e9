"""REML estimation, GLS fixed effects, BLUPs and Wald inference.

Estimation profiles out both the fixed effects and the residual variance,
leaving an optimization over the relative random-effect covariance
Gamma = G / sigma_eps^2.  Writing Sigma = sigma^2 V(Gamma) with
V = I + Z Gamma Z^T, the restricted deviance as a function of Gamma is

    d(Gamma) = log|V| + log|X^T V^{-1} X| + (n - p) log r^2(Gamma),

with r^2 the V^{-1}-weighted residual sum of squares at the GLS solution.
For a single random effect per cluster (q = 1) the profile is a scalar
function of gamma = sigma_b^2 / sigma_eps^2 and is minimized by a bounded
scalar search seeded from a log-spaced grid, which can land exactly on the
gamma = 0 boundary.  For q > 1 the relative covariance is parameterized by
its Cholesky factor with log diagonal and minimized with Nelder-Mead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import minimize, minimize_scalar
from scipy.stats import norm

from .data import ClusteredDataset, MarginalCovariance, VarianceParams, assemble_sigma
from .errors import (
    ConvergenceError,
    DegenerateVarianceError,
    SingularDesignError,
    ValidationError,
)
from .report import PROJECTION, CoefficientResult, InferenceReport

__all__ = [
    "LmmFit",
    "reml_fit",
    "gls_beta",
    "wald_inference",
    "conditional_loglik",
    "hat_trace",
    "restricted_loglik",
    "marginal_loglik",
]

# Boundary snap threshold for the variance ratio gamma = sigma_b^2 / sigma_eps^2.
_GAMMA_FLOOR = 1e-10
_GAMMA_MAX = 1e8


@dataclass
class LmmFit:
    """Fitted model: GLS coefficients, variance estimates, BLUPs."""

    beta_hat: np.ndarray
    theta_hat: VarianceParams
    blups: tuple[np.ndarray, ...]
    reml_loglik: float
    conditional_loglik: float
    fitted_columns: tuple[int, ...]
    covariance_of_beta: np.ndarray
    n_obs: int
    boundary: bool = False
    converged: bool = True

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.covariance_of_beta), 0.0))


# ---------------------------------------------------------------------------
# Sufficient statistics for the q = 1 profile
# ---------------------------------------------------------------------------


@dataclass
class Q1Stats:
    """Per-cluster cross products reused across many submodel fits.

    For q = 1 with cluster random-effect vectors z_i, the profiled deviance
    needs only these aggregates; submodels subset the column dimension.
    """

    n: int
    zz: np.ndarray  # (N,) squared norms |z_i|^2
    XtX: np.ndarray  # (p, p)
    Xty: np.ndarray  # (p,)
    yty: float
    S: np.ndarray  # (N, p) rows z_i^T X_i
    t: np.ndarray  # (N,) z_i^T y_i

    def subset(self, columns) -> "Q1Stats":
        idx = np.asarray(columns, dtype=int)
        return Q1Stats(
            n=self.n,
            zz=self.zz,
            XtX=self.XtX[np.ix_(idx, idx)],
            Xty=self.Xty[idx],
            yty=self.yty,
            S=self.S[:, idx],
            t=self.t,
        )


def q1_suff_stats(dataset: ClusteredDataset, y: np.ndarray | None = None) -> Q1Stats:
    """Aggregate the q = 1 sufficient statistics for a dataset."""
    if dataset.q != 1:
        raise ValidationError("q1_suff_stats requires q = 1")
    X = dataset.X
    yv = dataset.y if y is None else np.asarray(y, dtype=float)
    N = dataset.n_clusters
    p = X.shape[1]
    S = np.empty((N, p))
    t = np.empty(N)
    zz = np.empty(N)
    for i, sl in enumerate(dataset.cluster_slices()):
        z = dataset.Z_blocks[i][:, 0]
        S[i] = z @ X[sl]
        t[i] = z @ yv[sl]
        zz[i] = z @ z
    return Q1Stats(
        n=dataset.n_obs,
        zz=zz,
        XtX=X.T @ X,
        Xty=X.T @ yv,
        yty=float(yv @ yv),
        S=S,
        t=t,
    )


def _q1_components(stats: Q1Stats, gamma: float):
    """A = X^T V^{-1} X, b = X^T V^{-1} y, c = y^T V^{-1} y, log|V| at gamma."""
    w = gamma / (1.0 + gamma * stats.zz)
    A = stats.XtX - (stats.S * w[:, None]).T @ stats.S
    b = stats.Xty - stats.S.T @ (w * stats.t)
    c = stats.yty - float(w @ (stats.t**2))
    logdet_v = float(np.sum(np.log1p(gamma * stats.zz)))
    return A, b, c, logdet_v


def _q1_deviance(stats: Q1Stats, gamma: float) -> float:
    A, b, c, logdet_v = _q1_components(stats, gamma)
    p = A.shape[0]
    if p == 0:
        r2 = c
        logdet_a = 0.0
    else:
        try:
            cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError:
            return np.inf
        beta = scipy.linalg.cho_solve(cf, b, check_finite=False)
        r2 = c - float(beta @ b)
        logdet_a = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    if r2 <= 0:
        return np.inf
    return logdet_v + logdet_a + (stats.n - p) * np.log(r2)


def _q1_optimize(stats: Q1Stats, warm: float | None = None) -> tuple[float, bool]:
    """Minimize the scalar profiled deviance; returns (gamma_hat, boundary)."""
    dev = lambda g: _q1_deviance(stats, g)
    if warm is not None and warm > 0:
        grid = np.concatenate([[0.0], np.geomspace(warm / 64.0, warm * 64.0, 25)])
    else:
        grid = np.concatenate([[0.0], np.geomspace(1e-6, 1e6, 49)])
    vals = np.array([dev(g) for g in grid])
    k = int(np.argmin(vals))
    if k == 0:
        # Deviance increasing away from zero: boundary estimate.
        lo, hi = 0.0, grid[1]
    else:
        lo = grid[k - 1]
        hi = grid[k + 1] if k + 1 < len(grid) else grid[k] * 100.0
    res = minimize_scalar(
        dev,
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": 1e-12 * max(1.0, grid[k]), "maxiter": 500},
    )
    gamma = float(res.x)
    if not np.isfinite(res.fun):
        raise ConvergenceError("restricted likelihood is degenerate", best=gamma)
    if gamma < _GAMMA_FLOOR or dev(0.0) <= res.fun + 1e-12:
        if dev(0.0) <= res.fun + 1e-10:
            return 0.0, True
    return gamma, gamma < _GAMMA_FLOOR


def _q1_extract(stats: Q1Stats, gamma: float):
    """GLS solution and profiled variance estimates at a fixed gamma."""
    A, b, c, logdet_v = _q1_components(stats, gamma)
    p = A.shape[0]
    if p == 0:
        beta = np.zeros(0)
        A_inv = np.zeros((0, 0))
        r2 = c
        logdet_a = 0.0
    else:
        try:
            cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise SingularDesignError("X^T V^{-1} X is singular") from exc
        beta = scipy.linalg.cho_solve(cf, b, check_finite=False)
        A_inv = scipy.linalg.cho_solve(cf, np.eye(p), check_finite=False)
        r2 = c - float(beta @ b)
        logdet_a = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    df = stats.n - p
    sigma2 = r2 / df
    loglik = -0.5 * (df * np.log(2.0 * np.pi) + df * np.log(sigma2) + logdet_v + logdet_a + df)
    return beta, sigma2 * A_inv, sigma2, loglik


# ---------------------------------------------------------------------------
# General-q profile (dense per-cluster blocks)
# ---------------------------------------------------------------------------


def _chol_from_param(vec: np.ndarray, q: int) -> np.ndarray:
    """Lower-triangular factor with exp() applied to the stored diagonal."""
    T = np.zeros((q, q))
    idx = 0
    for j in range(q):
        for i in range(j, q):
            T[i, j] = np.exp(vec[idx]) if i == j else vec[idx]
            idx += 1
    return T


def _general_deviance(vec, dataset, X, y, q):
    T = _chol_from_param(np.asarray(vec), q)
    Gamma = T @ T.T
    n, p = X.shape
    A = np.zeros((p, p))
    b = np.zeros(p)
    c = 0.0
    logdet_v = 0.0
    for i, sl in enumerate(dataset.cluster_slices()):
        Z = dataset.Z_blocks[i]
        V = np.eye(Z.shape[0]) + Z @ Gamma @ Z.T
        try:
            L = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            return np.inf
        Wx = scipy.linalg.solve_triangular(L, X[sl], lower=True, check_finite=False)
        wy = scipy.linalg.solve_triangular(L, y[sl], lower=True, check_finite=False)
        A += Wx.T @ Wx
        b += Wx.T @ wy
        c += float(wy @ wy)
        logdet_v += 2.0 * float(np.sum(np.log(np.diag(L))))
    if p:
        try:
            cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError:
            return np.inf
        beta = scipy.linalg.cho_solve(cf, b, check_finite=False)
        r2 = c - float(beta @ b)
        logdet_a = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    else:
        r2, logdet_a = c, 0.0
    if r2 <= 0:
        return np.inf
    return logdet_v + logdet_a + (n - p) * np.log(r2)


def _general_optimize(dataset, X, y, q, rng_seed=0):
    npar = q * (q + 1) // 2
    x0 = np.zeros(npar)
    best = None
    rng = np.random.default_rng(rng_seed)
    for attempt in range(4):
        start = x0 if attempt == 0 else x0 + rng.normal(scale=0.5, size=npar)
        res = minimize(
            _general_deviance,
            start,
            args=(dataset, X, y, q),
            method="Nelder-Mead",
            options={"fatol": 1e-8, "xatol": 1e-8, "maxiter": 500 * npar},
        )
        if best is None or res.fun < best.fun:
            best = res
        if res.success and np.isfinite(res.fun):
            break
    if best is None or not np.isfinite(best.fun):
        raise ConvergenceError("general REML optimization failed", best=best)
    return _chol_from_param(best.x, q)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def reml_fit(
    dataset: ClusteredDataset,
    columns=None,
    warm_gamma: float | None = None,
    stats: Q1Stats | None = None,
) -> LmmFit:
    """Fit the mixed model on a column subset by REML.

    Args:
        dataset: clustered data; the full design is subset by `columns`.
        columns: iterable of 0-based column indices (default: all).
        warm_gamma: optional previous variance-ratio estimate used to
            narrow the scalar search (submodel sweeps).
        stats: precomputed full-design sufficient statistics (q = 1 only);
            lets callers amortize cross products over many submodel fits.

    Returns:
        LmmFit with GLS coefficients over `columns`, variance estimates,
        per-cluster BLUPs and the restricted log-likelihood.  A boundary
        estimate sigma_b^2 = 0 is valid output and sets `fit.boundary`.
    """
    p_all = dataset.n_columns
    if columns is None:
        columns = tuple(range(p_all))
    columns = tuple(int(c) for c in columns)
    if any(c < 0 or c >= p_all for c in columns):
        raise ValidationError("column index out of range")
    if len(set(columns)) != len(columns):
        raise ValidationError("duplicate columns")
    q = dataset.q
    h = q * (q + 1) // 2 + 1
    if dataset.n_obs - len(columns) <= h:
        raise ValidationError(
            f"need n - |columns| > {h} observations to estimate {h} variance parameters"
        )

    if q == 1:
        full_stats = stats if stats is not None else q1_suff_stats(dataset)
        sub = full_stats.subset(columns)
        gamma, boundary = _q1_optimize(sub, warm=warm_gamma)
        beta, cov_beta, sigma2, loglik = _q1_extract(sub, gamma)
        params = VarianceParams.random_intercept(gamma * sigma2, sigma2)
    else:
        X = dataset.X[:, columns] if columns else np.zeros((dataset.n_obs, 0))
        T = _general_optimize(dataset, X, dataset.y, q)
        Gamma = T @ T.T
        boundary = bool(np.min(np.diag(Gamma)) < 1e-8)
        sigma_blocks = []
        # Recover the profiled quantities at the optimum via a direct pass.
        A = np.zeros((len(columns), len(columns)))
        b = np.zeros(len(columns))
        c = 0.0
        logdet_v = 0.0
        for i, sl in enumerate(dataset.cluster_slices()):
            Z = dataset.Z_blocks[i]
            V = np.eye(Z.shape[0]) + Z @ Gamma @ Z.T
            L = np.linalg.cholesky(V)
            Wx = scipy.linalg.solve_triangular(L, X[sl], lower=True, check_finite=False)
            wy = scipy.linalg.solve_triangular(L, dataset.y[sl], lower=True, check_finite=False)
            A += Wx.T @ Wx
            b += Wx.T @ wy
            c += float(wy @ wy)
            logdet_v += 2.0 * float(np.sum(np.log(np.diag(L))))
            sigma_blocks.append(V)
        if len(columns):
            cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
            beta = scipy.linalg.cho_solve(cf, b, check_finite=False)
            A_inv = scipy.linalg.cho_solve(cf, np.eye(len(columns)), check_finite=False)
            r2 = c - float(beta @ b)
            logdet_a = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        else:
            beta, A_inv, r2, logdet_a = np.zeros(0), np.zeros((0, 0)), c, 0.0
        df = dataset.n_obs - len(columns)
        sigma2 = r2 / df
        loglik = -0.5 * (
            df * np.log(2.0 * np.pi) + df * np.log(sigma2) + logdet_v + logdet_a + df
        )
        cov_beta = sigma2 * A_inv
        G = sigma2 * Gamma
        theta = []
        for j in range(q):
            for i in range(j, q):
                theta.append(G[i, j])
        theta.append(sigma2)
        params = VarianceParams(theta=np.array(theta), q=q)

    blups = _compute_blups(dataset, columns, beta, params)
    cond_ll = _conditional_loglik(dataset, columns, beta, blups, params.residual_variance)
    return LmmFit(
        beta_hat=np.asarray(beta, dtype=float),
        theta_hat=params,
        blups=blups,
        reml_loglik=float(loglik),
        conditional_loglik=float(cond_ll),
        fitted_columns=columns,
        covariance_of_beta=np.asarray(cov_beta, dtype=float),
        n_obs=dataset.n_obs,
        boundary=boundary,
    )


def _compute_blups(dataset, columns, beta, params: VarianceParams):
    """b_i = G Z_i^T Sigma_i^{-1} (y_i - X_i beta)."""
    G = params.G
    s2 = params.residual_variance
    resid = dataset.y - (dataset.X[:, columns] @ beta if len(columns) else 0.0)
    blups = []
    for i, sl in enumerate(dataset.cluster_slices()):
        Z = dataset.Z_blocks[i]
        V = Z @ G @ Z.T
        V[np.diag_indices(V.shape[0])] += s2
        sol = np.linalg.solve(V, resid[sl])
        blups.append(G @ (Z.T @ sol))
    return tuple(blups)


def _conditional_loglik(dataset, columns, beta, blups, sigma_eps2):
    resid = dataset.y - (dataset.X[:, columns] @ beta if len(columns) else 0.0)
    off = 0
    rss = 0.0
    for i, size in enumerate(dataset.cluster_sizes):
        e = resid[off : off + size] - dataset.Z_blocks[i] @ blups[i]
        rss += float(e @ e)
        off += size
    n = dataset.n_obs
    return -0.5 * n * np.log(2.0 * np.pi * sigma_eps2) - rss / (2.0 * sigma_eps2)


def conditional_loglik(fit: LmmFit, dataset: ClusteredDataset) -> float:
    """Gaussian log-density of y - X beta - Z b under sigma_eps^2 I."""
    return _conditional_loglik(
        dataset,
        fit.fitted_columns,
        fit.beta_hat,
        fit.blups,
        fit.theta_hat.residual_variance,
    )


def gls_beta(
    dataset: ClusteredDataset,
    sigma: MarginalCovariance,
    columns=None,
) -> tuple[np.ndarray, np.ndarray]:
    """GLS estimate over a column subset at a fixed marginal covariance.

    Solves via the block Cholesky of Sigma (whitening); Sigma itself is
    never inverted explicitly.

    Returns:
        (beta_hat, cov) with cov = (X_M^T Sigma^{-1} X_M)^{-1}.
    """
    if columns is None:
        columns = tuple(range(dataset.n_columns))
    columns = tuple(int(c) for c in columns)
    X = dataset.X[:, columns]
    W = sigma.whiten(X)
    w = sigma.whiten(dataset.y)
    A = W.T @ W
    try:
        cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularDesignError(
            f"rank-deficient design over columns {columns}", columns=columns
        ) from exc
    beta = scipy.linalg.cho_solve(cf, W.T @ w, check_finite=False)
    cov = scipy.linalg.cho_solve(cf, np.eye(len(columns)), check_finite=False)
    return beta, cov


def wald_inference(fit: LmmFit, alpha: float, column_names=None) -> InferenceReport:
    """Wald z-tests and CIs for every fitted coefficient.

    Two-sided p-values from the standard normal; the target is the
    projection coefficient vector of the fitted columns.
    """
    if not fit.converged:
        raise ConvergenceError("cannot run Wald inference on a non-converged fit")
    ses = fit.standard_errors
    if np.any(ses <= 0):
        bad = [fit.fitted_columns[j] for j in np.where(ses <= 0)[0]]
        raise DegenerateVarianceError(f"zero variance for columns {bad}")
    z = norm.ppf(1.0 - alpha / 2.0)
    records = []
    for j, col in enumerate(fit.fitted_columns):
        est = float(fit.beta_hat[j])
        se = float(ses[j])
        pval = 2.0 * float(norm.sf(abs(est) / se))
        name = column_names[col] if column_names is not None else f"x{col + 1}"
        records.append(
            CoefficientResult(
                column=col,
                name=name,
                estimate=est,
                p_value=pval,
                ci_lower=est - z * se,
                ci_upper=est + z * se,
            )
        )
    return InferenceReport(method="wald", target=PROJECTION, alpha=alpha, records=records)


def hat_trace(fit: LmmFit, dataset: ClusteredDataset) -> float:
    """Effective degrees of freedom: trace of the map y -> X beta + Z b.

    At fixed theta the fitted values are H y with
    H = P_X + (I - sigma_eps^2 Sigma^{-1})(I - P_X), P_X the GLS projection,
    so trace(H) = n - sigma_eps^2 tr(Sigma^{-1})
                + sigma_eps^2 tr((X^T Sigma^{-1} X)^{-1} X^T Sigma^{-2} X).
    """
    cols = fit.fitted_columns
    sigma = assemble_sigma(dataset, fit.theta_hat)
    s2 = fit.theta_hat.residual_variance
    rho = dataset.n_obs - s2 * sigma.trace_inverse()
    if cols:
        X = dataset.X[:, cols]
        U = sigma.solve(X)
        A = X.T @ U
        B = U.T @ U
        rho += s2 * float(np.trace(np.linalg.solve(A, B)))
    return float(rho)


def restricted_loglik(dataset: ClusteredDataset, columns, params: VarianceParams) -> float:
    """Restricted log-likelihood at arbitrary variance parameters."""
    columns = tuple(int(c) for c in columns)
    sigma = assemble_sigma(dataset, params)
    w = sigma.whiten(dataset.y)
    n = dataset.n_obs
    p = len(columns)
    if p:
        W = sigma.whiten(dataset.X[:, columns])
        A = W.T @ W
        cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        beta = scipy.linalg.cho_solve(cf, W.T @ w, check_finite=False)
        quad = float(w @ w) - float(beta @ (W.T @ w))
        logdet_a = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    else:
        quad = float(w @ w)
        logdet_a = 0.0
    return -0.5 * ((n - p) * np.log(2.0 * np.pi) + sigma.logdet() + logdet_a + quad)


def marginal_loglik(
    dataset: ClusteredDataset,
    params: VarianceParams,
    beta: np.ndarray,
    columns=None,
) -> float:
    """Marginal Gaussian log-density of y at mean X_M beta, covariance Sigma."""
    if columns is None:
        columns = tuple(range(dataset.n_columns))
    columns = tuple(int(c) for c in columns)
    sigma = assemble_sigma(dataset, params)
    mean = dataset.X[:, columns] @ np.asarray(beta, dtype=float) if columns else 0.0
    w = sigma.whiten(dataset.y - mean)
    n = dataset.n_obs
    return -0.5 * (n * np.log(2.0 * np.pi) + sigma.logdet() + float(w @ w))
