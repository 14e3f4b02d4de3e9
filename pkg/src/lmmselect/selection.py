"""Fixed-effect selection rules: penalized, stepwise and criterion-based.

Every rule is a deterministic function of the response vector, which makes
the selection event well defined for conditional inference.  Rules come in
two flavours:

* data-driven evaluation (`apply_rule` with no frozen parameters):
  variance parameters are re-estimated by REML wherever a fit is needed;
* frozen evaluation (`RuleEvaluator`): the variance parameters are pinned,
  the whitened design is precomputed once, and re-applying the rule to a
  new response works entirely through p-dimensional Gram algebra.  This is
  the path the Monte Carlo samplers hammer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .data import ClusteredDataset, VarianceParams, assemble_sigma
from .errors import (
    ConvergenceError,
    FeasibilityError,
    NumericalError,
    ValidationError,
)
from .lmm import (
    LmmFit,
    conditional_loglik,
    hat_trace,
    marginal_loglik,
    q1_suff_stats,
    reml_fit,
)

__all__ = [
    "LassoSolution",
    "CandidateSet",
    "SelectionRule",
    "RuleEvaluator",
    "lasso_lmm",
    "default_lambda_grid",
    "bic_tune",
    "backward_stepwise",
    "caic",
    "caic_select",
    "apply_rule",
]

STEPWISE_MAX_P = 60
ALL_SUBSETS_MAX_P = 15
CD_TOL = 1e-8
CD_MAX_SWEEPS = 10_000
KKT_TOL = 1e-6


# ---------------------------------------------------------------------------
# Coordinate descent on the whitened Gram system
# ---------------------------------------------------------------------------
#
# The penalized objective |w - W beta|^2 + 2 lam |beta|_1 depends on the
# data only through G = W^T W and cvec = W^T w, so the kernels work in
# p-dimensional space.  JIT-compiled via numba when available.


def _cd_core(G, cvec, lam, beta, max_sweeps, tol):
    p = cvec.shape[0]
    Gb = G @ beta
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            r = cvec[j] - Gb[j] + gjj * beta[j]
            if r > lam:
                new = (r - lam) / gjj
            elif r < -lam:
                new = (r + lam) / gjj
            else:
                new = 0.0
            d = new - beta[j]
            if d != 0.0:
                for k in range(p):
                    Gb[k] += G[k, j] * d
                beta[j] = new
                if abs(d) > max_delta:
                    max_delta = abs(d)
        if max_delta < tol:
            return sweep + 1
    return -1


def _cd_path_core(G, cvec, lams, out, max_sweeps, tol):
    beta = np.zeros(cvec.shape[0])
    for li in range(lams.shape[0]):
        status = _cd_core(G, cvec, lams[li], beta, max_sweeps, tol)
        if status < 0:
            return li
        out[li] = beta
    return -1


try:  # pragma: no cover - exercised implicitly when numba is installed
    from numba import njit

    _cd_core = njit(cache=True)(_cd_core)
    _cd_path_core = njit(cache=True)(_cd_path_core)
except ImportError:  # pragma: no cover
    pass


@dataclass
class LassoSolution:
    """Solution of the whitened L1 problem at one penalty value."""

    lam: float
    beta: np.ndarray
    active_set: tuple[int, ...]
    objective: float
    n_sweeps: int = 0


def _solve_gram_lasso(G, cvec, lam, beta0=None) -> tuple[np.ndarray, int]:
    beta = np.zeros(len(cvec)) if beta0 is None else np.array(beta0, dtype=float)
    sweeps = _cd_core(G, cvec, float(lam), beta, CD_MAX_SWEEPS, CD_TOL)
    if sweeps < 0:
        raise ConvergenceError(
            f"coordinate descent did not converge in {CD_MAX_SWEEPS} sweeps", best=beta
        )
    return beta, int(sweeps)


def _check_kkt(G, cvec, beta, lam):
    """Subgradient stationarity of the whitened objective at beta."""
    grad = cvec - G @ beta
    tol = KKT_TOL * max(1.0, float(np.max(np.abs(cvec))) if len(cvec) else 1.0)
    for j in range(len(beta)):
        if beta[j] == 0.0:
            if abs(grad[j]) > lam + tol:
                raise NumericalError(
                    f"KKT violation at zero coordinate {j}: |{grad[j]:.3e}| > {lam:.3e}"
                )
        else:
            if abs(grad[j] - lam * np.sign(beta[j])) > tol:
                raise NumericalError(f"KKT violation at active coordinate {j}")


def _gram_objective(G, cvec, wtw, beta, lam) -> float:
    return float(wtw - 2.0 * beta @ cvec + beta @ G @ beta + 2.0 * lam * np.sum(np.abs(beta)))


def lasso_lmm(dataset: ClusteredDataset, params: VarianceParams, lam: float) -> LassoSolution:
    """Whitened-lasso estimate at a fixed penalty.

    Minimizes |Sigma^{-1/2}(y - X beta)|^2 + 2 lam sum_j |beta_j| by cyclic
    coordinate descent on the whitened design; the KKT certificate is
    checked on every returned solution.
    """
    if lam < 0:
        raise ValidationError("lambda must be nonnegative")
    sigma = assemble_sigma(dataset, params)
    W = sigma.whiten(dataset.X)
    w = sigma.whiten(dataset.y)
    G = W.T @ W
    cvec = W.T @ w
    beta, sweeps = _solve_gram_lasso(G, cvec, lam)
    _check_kkt(G, cvec, beta, lam)
    return LassoSolution(
        lam=float(lam),
        beta=beta,
        active_set=tuple(int(j) for j in np.flatnonzero(beta)),
        objective=_gram_objective(G, cvec, float(w @ w), beta, lam),
        n_sweeps=sweeps,
    )


def default_lambda_grid(lam_max: float, num: int = 50, span: float = 1000.0) -> np.ndarray:
    """50 log-spaced penalties from lam_max down to lam_max / 1000."""
    if lam_max <= 0:
        return np.array([0.0])
    return np.geomspace(lam_max, lam_max / span, num)


def bic_tune(
    dataset: ClusteredDataset,
    params: VarianceParams,
    grid=None,
) -> tuple[float, LassoSolution]:
    """Pick the penalty minimizing BIC along a descending grid.

    BIC(lam) = -2 marginal loglik(beta_lam, theta) + |active| log n; the
    marginal term reduces to the whitened residual sum of squares plus a
    grid-constant.  Ties break toward the larger penalty (sparser model).
    """
    sigma = assemble_sigma(dataset, params)
    W = sigma.whiten(dataset.X)
    w = sigma.whiten(dataset.y)
    G = W.T @ W
    cvec = W.T @ w
    wtw = float(w @ w)
    if grid is None:
        grid = default_lambda_grid(float(np.max(np.abs(cvec))))
    grid = np.sort(np.asarray(grid, dtype=float))[::-1]
    if grid.size == 0:
        raise ValidationError("empty lambda grid")
    betas = np.zeros((grid.size, len(cvec)))
    bad = _cd_path_core(G, cvec, grid, betas, CD_MAX_SWEEPS, CD_TOL)
    if bad >= 0:
        raise ConvergenceError(f"coordinate descent stalled at grid index {bad}")
    n = dataset.n_obs
    rss = wtw - 2.0 * betas @ cvec + np.einsum("ij,jk,ik->i", betas, G, betas)
    active = (betas != 0.0).sum(axis=1)
    logdet_const = sigma.logdet() + n * np.log(2.0 * np.pi)
    bics = rss + active * np.log(n) + logdet_const
    best = int(np.argmin(bics))  # first minimum = largest lambda among ties
    beta = betas[best]
    _check_kkt(G, cvec, beta, grid[best])
    sol = LassoSolution(
        lam=float(grid[best]),
        beta=beta.copy(),
        active_set=tuple(int(j) for j in np.flatnonzero(beta)),
        objective=_gram_objective(G, cvec, wtw, beta, grid[best]),
    )
    return float(grid[best]), sol


# ---------------------------------------------------------------------------
# Candidate sets and cAIC selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateSet:
    """Model space for criterion-based selection.

    kind "nested" holds the p+1 prefixes of `ordering` (including the
    empty model); "all_subsets" enumerates 2^p subsets and is guarded at
    p <= 15; "explicit" carries an arbitrary fixed list.
    """

    kind: str
    ordering: tuple[int, ...] | None = None
    models: tuple[tuple[int, ...], ...] | None = None
    max_p: int = ALL_SUBSETS_MAX_P

    @classmethod
    def nested(cls, ordering) -> "CandidateSet":
        return cls(kind="nested", ordering=tuple(int(c) for c in ordering))

    @classmethod
    def all_subsets(cls) -> "CandidateSet":
        return cls(kind="all_subsets")

    @classmethod
    def explicit(cls, models) -> "CandidateSet":
        return cls(kind="explicit", models=tuple(tuple(sorted(m)) for m in models))

    def enumerate(self, p: int) -> list[tuple[int, ...]]:
        if self.kind == "nested":
            order = self.ordering if self.ordering is not None else tuple(range(p))
            return [tuple(sorted(order[:k])) for k in range(len(order) + 1)]
        if self.kind == "all_subsets":
            if p > self.max_p:
                raise FeasibilityError(
                    f"all-subsets enumeration needs p <= {self.max_p}, got {p}",
                    guard="all_subsets_max_p",
                )
            out = []
            for k in range(p + 1):
                out.extend(itertools.combinations(range(p), k))
            return out
        if self.kind == "explicit":
            return list(self.models or ())
        raise ValidationError(f"unknown candidate set kind {self.kind!r}")


def caic(fit: LmmFit, dataset: ClusteredDataset) -> float:
    """Conditional information criterion with plug-in variance estimates."""
    return -2.0 * conditional_loglik(fit, dataset) + 2.0 * hat_trace(fit, dataset)


def caic_select(dataset: ClusteredDataset, candidates: CandidateSet) -> tuple[int, ...]:
    """REML-fit every candidate and return the criterion minimizer.

    Failed candidate fits are skipped (counted); ties break toward the
    smaller model, then lexicographically.
    """
    models = candidates.enumerate(dataset.n_columns)
    if not models:
        raise ValidationError("candidate set is empty")
    stats = q1_suff_stats(dataset) if dataset.q == 1 else None
    best = None
    failures = 0
    for m in models:
        try:
            fit = reml_fit(dataset, m, stats=stats)
            value = caic(fit, dataset)
        except (ValidationError, NumericalError):
            failures += 1
            continue
        key = (value, len(m), m)
        if best is None or key < best[0]:
            best = (key, m)
    if best is None:
        raise NumericalError(f"all {failures} candidate fits failed")
    return tuple(sorted(best[1]))


# ---------------------------------------------------------------------------
# Backward stepwise with REML refits
# ---------------------------------------------------------------------------


def _reml_criterion(dataset, columns, criterion, stats, warm):
    fit = reml_fit(dataset, columns, stats=stats, warm_gamma=warm)
    if criterion == "bic":
        mll = marginal_loglik(dataset, fit.theta_hat, fit.beta_hat, columns)
        value = -2.0 * mll + len(columns) * np.log(dataset.n_obs)
    elif criterion == "caic":
        value = caic(fit, dataset)
    else:
        raise ValidationError(f"unknown stepwise criterion {criterion!r}")
    return value, fit


def backward_stepwise(dataset: ClusteredDataset, criterion: str = "bic") -> tuple[int, ...]:
    """Greedy single-column deletion from the full model.

    Each round refits REML for every deletion and removes the one with the
    best criterion improvement; stops when no deletion improves.  Ties
    break toward the lowest column index.
    """
    p = dataset.n_columns
    if p > STEPWISE_MAX_P:
        raise FeasibilityError(
            f"backward stepwise is guarded at p <= {STEPWISE_MAX_P}, got {p}",
            guard="stepwise_max_p",
        )
    stats = q1_suff_stats(dataset) if dataset.q == 1 else None
    current = list(range(p))
    current_value, fit = _reml_criterion(dataset, tuple(current), criterion, stats, None)
    warm = _fit_gamma(fit)
    while current:
        best_value = None
        best_j = None
        for j in current:  # ascending index order makes the tie-break explicit
            cand = tuple(c for c in current if c != j)
            try:
                value, _ = _reml_criterion(dataset, cand, criterion, stats, warm)
            except (ValidationError, NumericalError):
                continue
            if best_value is None or value < best_value - 1e-12:
                best_value = value
                best_j = j
        if best_value is None or best_value >= current_value:
            break
        current.remove(best_j)
        current_value = best_value
    return tuple(current)


def _fit_gamma(fit: LmmFit) -> float | None:
    s2 = fit.theta_hat.residual_variance
    if fit.theta_hat.q != 1 or s2 <= 0:
        return None
    g = fit.theta_hat.theta[0] / s2
    return float(g) if g > 0 else None


# ---------------------------------------------------------------------------
# Rules and frozen evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionRule:
    """A deterministic map from a response vector to a column subset.

    kinds: "lasso" (fixed `lam`, or BIC-tuned over `lam_grid` / the default
    grid when `lam` is None), "stepwise" (backward deletion under
    `criterion`), "caic" (minimizer over `candidates`), "fixed" (constant
    `subset`).  When `frozen_theta` is set, evaluation pins the variance
    parameters; `refit_theta` asks for full re-estimation even inside
    Monte Carlo loops.
    """

    kind: str
    lam: float | None = None
    lam_grid: tuple[float, ...] | None = None
    criterion: str = "bic"
    candidates: CandidateSet | None = None
    subset: tuple[int, ...] | None = None
    frozen_theta: VarianceParams | None = None
    refit_theta: bool = False

    def __post_init__(self):
        if self.kind not in ("lasso", "stepwise", "caic", "fixed"):
            raise ValidationError(f"unknown rule kind {self.kind!r}")
        if self.kind == "fixed" and self.subset is None:
            raise ValidationError("fixed rule needs a subset")
        if self.kind == "caic" and self.candidates is None:
            raise ValidationError("caic rule needs a candidate set")

    def with_frozen(self, theta: VarianceParams) -> "SelectionRule":
        return SelectionRule(
            kind=self.kind,
            lam=self.lam,
            lam_grid=self.lam_grid,
            criterion=self.criterion,
            candidates=self.candidates,
            subset=self.subset,
            frozen_theta=theta,
            refit_theta=self.refit_theta,
        )


def _whitening_params(dataset: ClusteredDataset) -> VarianceParams:
    """Variance estimate used to whiten the lasso design.

    Full-model REML when the dimensions allow it, otherwise the
    variance-components fit with no fixed effects.
    """
    h = dataset.q * (dataset.q + 1) // 2 + 1
    if dataset.n_obs - dataset.n_columns > h:
        return reml_fit(dataset).theta_hat
    return reml_fit(dataset, columns=()).theta_hat


class RuleEvaluator:
    """Re-applies one rule to many responses at frozen variance parameters.

    Precomputes the block Cholesky of Sigma(theta), the whitened design and
    its Gram matrix, so each `select(y)` call costs one batched whitening
    plus small-matrix algebra.
    """

    def __init__(self, rule: SelectionRule, dataset: ClusteredDataset, theta: VarianceParams | None = None):
        self.rule = rule
        self.dataset = dataset
        if theta is None:
            theta = rule.frozen_theta
        if theta is None and rule.kind != "fixed" and not rule.refit_theta:
            raise ValidationError("frozen evaluation needs variance parameters")
        self.theta = theta
        if rule.kind == "fixed" or rule.refit_theta:
            return
        self.sigma = assemble_sigma(dataset, theta)
        self._whiten = self.sigma.whitener()
        self.W = np.column_stack(
            [self._whiten.apply(dataset.X[:, j]) for j in range(dataset.n_columns)]
        )
        self.G = self.W.T @ self.W
        self._logdet = self.sigma.logdet()
        self._hat_trace_cache: dict[tuple[int, ...], float] = {}
        if rule.kind == "caic" or (rule.kind == "stepwise" and rule.criterion == "caic"):
            self._prepare_conditional()

    # -- conditional-criterion machinery (cAIC at frozen theta) ------------

    def _prepare_conditional(self):
        ds = self.dataset
        G_re = self.theta.G
        self._ri_shrink = None
        if ds.is_random_intercept():
            # b_i = sigma_b^2 sum(resid_i) / (sigma_eps^2 + n_i sigma_b^2)
            sizes = np.asarray(ds.cluster_sizes, dtype=float)
            sb2 = float(G_re[0, 0])
            self._ri_shrink = sb2 / (self.theta.residual_variance + sizes * sb2)
            self._ri_sizes = sizes
            self._ri_starts = ds.offsets[:-1]
            return
        self._sigma_solve_Z = []  # per cluster: Sigma_i^{-1} Z_i G
        for i, sl in enumerate(ds.cluster_slices()):
            Z = ds.Z_blocks[i]
            sol = scipy.linalg.cho_solve(
                (self.sigma.cholesky_blocks[i], True), Z, check_finite=False
            )
            self._sigma_solve_Z.append(sol @ G_re.T)

    def _frozen_caic(self, columns: tuple[int, ...], y: np.ndarray, cvec: np.ndarray) -> float:
        ds = self.dataset
        idx = np.asarray(columns, dtype=int)
        if idx.size:
            A = self.G[np.ix_(idx, idx)]
            beta = scipy.linalg.solve(A, cvec[idx], assume_a="pos")
            resid = y - ds.X[:, idx] @ beta
        else:
            resid = y
        s2 = self.theta.residual_variance
        if self._ri_shrink is not None:
            sums = np.add.reduceat(resid, self._ri_starts)
            b = self._ri_shrink * sums
            rss = float(resid @ resid) - 2.0 * float(b @ sums) + float(self._ri_sizes @ b**2)
        else:
            rss = 0.0
            for i, sl in enumerate(ds.cluster_slices()):
                b_i = self._sigma_solve_Z[i].T @ resid[sl]
                e = resid[sl] - ds.Z_blocks[i] @ b_i
                rss += float(e @ e)
        n = ds.n_obs
        cond_ll = -0.5 * n * np.log(2.0 * np.pi * s2) - rss / (2.0 * s2)
        rho = self._hat_trace_frozen(tuple(columns))
        return -2.0 * cond_ll + 2.0 * rho

    def _hat_trace_frozen(self, columns: tuple[int, ...]) -> float:
        if columns in self._hat_trace_cache:
            return self._hat_trace_cache[columns]
        ds = self.dataset
        s2 = self.theta.residual_variance
        rho = ds.n_obs - s2 * self.sigma.trace_inverse()
        if columns:
            X = ds.X[:, list(columns)]
            U = self.sigma.solve(X)
            A = X.T @ U
            B = U.T @ U
            rho += s2 * float(np.trace(np.linalg.solve(A, B)))
        rho = float(rho)
        self._hat_trace_cache[columns] = rho
        return rho

    # -- per-kind selection -------------------------------------------------

    def select(self, y: np.ndarray) -> tuple[int, ...]:
        rule = self.rule
        if rule.kind == "fixed":
            return tuple(sorted(rule.subset))
        if rule.refit_theta:
            return apply_rule(rule, self.dataset.with_response(y))
        w = self._whiten.apply(y)
        cvec = self.W.T @ w
        if rule.kind == "lasso":
            return self._select_lasso(w, cvec)
        if rule.kind == "stepwise":
            if rule.criterion == "bic":
                return self._select_stepwise_bic(cvec, float(w @ w))
            return self._select_generic_stepwise(y, cvec)
        if rule.kind == "caic":
            return self._select_caic(y, cvec)
        raise ValidationError(f"unknown rule kind {rule.kind!r}")

    def _select_lasso(self, w, cvec) -> tuple[int, ...]:
        if self.rule.lam is not None:
            beta, _ = _solve_gram_lasso(self.G, cvec, self.rule.lam)
            return tuple(int(j) for j in np.flatnonzero(beta))
        grid = self.rule.lam_grid
        if grid is None:
            grid = default_lambda_grid(float(np.max(np.abs(cvec))))
        grid = np.sort(np.asarray(grid, dtype=float))[::-1]
        betas = np.zeros((grid.size, len(cvec)))
        bad = _cd_path_core(self.G, cvec, grid, betas, CD_MAX_SWEEPS, CD_TOL)
        if bad >= 0:
            raise ConvergenceError(f"coordinate descent stalled at grid index {bad}")
        wtw = float(w @ w)
        rss = wtw - 2.0 * betas @ cvec + np.einsum("ij,jk,ik->i", betas, self.G, betas)
        bics = rss + (betas != 0.0).sum(axis=1) * np.log(self.dataset.n_obs)
        best = int(np.argmin(bics))
        return tuple(int(j) for j in np.flatnonzero(betas[best]))

    def _select_stepwise_bic(self, cvec, wtw) -> tuple[int, ...]:
        # Deletion identity: removing column j from M raises the whitened
        # RSS by beta_j^2 / (A^{-1})_jj, so a round needs one factorization.
        log_n = np.log(self.dataset.n_obs)
        current = list(range(self.dataset.n_columns))
        while current:
            idx = np.asarray(current, dtype=int)
            A = self.G[np.ix_(idx, idx)]
            try:
                cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
            except scipy.linalg.LinAlgError:
                break
            beta = scipy.linalg.cho_solve(cf, cvec[idx], check_finite=False)
            A_inv = scipy.linalg.cho_solve(cf, np.eye(len(idx)), check_finite=False)
            increases = beta**2 / np.diag(A_inv)
            k = int(np.argmin(increases))  # first minimum = lowest column index
            if increases[k] >= log_n:
                break
            current.pop(k)
        return tuple(current)

    def _select_generic_stepwise(self, y, cvec) -> tuple[int, ...]:
        current = list(range(self.dataset.n_columns))
        current_value = self._frozen_caic(tuple(current), y, cvec)
        while current:
            best_value, best_j = None, None
            for j in current:
                cand = tuple(c for c in current if c != j)
                value = self._frozen_caic(cand, y, cvec)
                if best_value is None or value < best_value - 1e-12:
                    best_value, best_j = value, j
            if best_value is None or best_value >= current_value:
                break
            current.remove(best_j)
            current_value = best_value
        return tuple(current)

    def _select_caic(self, y, cvec) -> tuple[int, ...]:
        best = None
        for m in self.rule.candidates.enumerate(self.dataset.n_columns):
            m = tuple(sorted(m))
            try:
                value = self._frozen_caic(m, y, cvec)
            except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
                continue
            key = (value, len(m), m)
            if best is None or key < best[0]:
                best = (key, m)
        if best is None:
            raise NumericalError("all frozen candidate evaluations failed")
        return best[1]


def apply_rule(rule: SelectionRule, dataset: ClusteredDataset, y: np.ndarray | None = None) -> tuple[int, ...]:
    """Evaluate a selection rule on a dataset (optionally swapping the response).

    With `frozen_theta` unset this is the data-driven path: REML is run
    wherever the rule needs variance parameters.  The returned subset is
    sorted; evaluating twice on the same inputs returns the same subset.
    """
    if y is not None:
        dataset = dataset.with_response(y)
    if rule.kind == "fixed":
        return tuple(sorted(rule.subset))
    if rule.frozen_theta is not None and not rule.refit_theta:
        return RuleEvaluator(rule, dataset).select(dataset.y)
    if rule.kind == "lasso":
        params = _whitening_params(dataset)
        if rule.lam is not None:
            return tuple(lasso_lmm(dataset, params, rule.lam).active_set)
        _, sol = bic_tune(dataset, params, rule.lam_grid)
        return tuple(sol.active_set)
    if rule.kind == "stepwise":
        return backward_stepwise(dataset, rule.criterion)
    if rule.kind == "caic":
        return caic_select(dataset, rule.candidates)
    raise ValidationError(f"unknown rule kind {rule.kind!r}")
