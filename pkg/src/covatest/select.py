"""Adaptive covariate selection: greedy forward search under information
criteria, an adaptive-LASSO/OLS hybrid fit by cyclic coordinate descent with
cross-validated tuning, and precision whitening for clustered data.

All selection methods return a working model that is refit by plain OLS on
the chosen support. When ``include_treatment`` is set the treatment indicator
is forced into (and never dropped from) the model; randomization-test
adjustment must run with ``include_treatment=False`` so the returned model
never contains the treatment column.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .data import TrialDataset
from .gee import WorkingCovariance, moment_correlation
from .regression import FittedMeanModel, fit_mean_model, ols_fit, residuals

FORWARD_AIC = "forward-aic"
FORWARD_BICN = "forward-bicn"
FORWARD_BICM = "forward-bicm"
ADAPTIVE_LASSO = "adaptive-lasso"
FIXED = "fixed"
NONE = "none"

_FORWARD_METHODS = (FORWARD_AIC, FORWARD_BICN, FORWARD_BICM)
# initial coefficients this small exclude the covariate (infinite weight)
_WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class SelectionSpec:
    """Configuration of one covariate-selection run.

    ``lambda_grid`` of None builds the default grid: ``lambda_grid_size``
    log-spaced values from the smallest penalty that zeroes every penalized
    coefficient down to 1e-4 times that value.
    """

    method: str = FORWARD_AIC
    include_treatment: bool = False
    candidate_indices: tuple[int, ...] | None = None
    fixed_indices: tuple[int, ...] = ()
    cv_folds: int = 5
    gamma: float = 1.0
    lambda_grid: tuple[float, ...] | None = None
    lambda_grid_size: int = 100
    max_terms: int | None = None
    whiten: bool = False
    seed: int = 0

    def __post_init__(self):
        known = (*_FORWARD_METHODS, ADAPTIVE_LASSO, FIXED, NONE)
        if self.method not in known:
            raise ValueError(f"unknown selection method {self.method!r}")
        if self.method == ADAPTIVE_LASSO and self.cv_folds < 2:
            raise ValueError("adaptive lasso needs at least 2 cross-validation folds")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.lambda_grid is not None:
            grid = tuple(float(v) for v in self.lambda_grid)
            if any(v < 0 for v in grid):
                raise ValueError("lambda grid values must be non-negative")
            if any(nxt >= prev for prev, nxt in zip(grid, grid[1:])):
                raise ValueError("lambda grid must be strictly descending")
            object.__setattr__(self, "lambda_grid", grid)


# ---------------------------------------------------------------------------
# information criteria and forward selection
# ---------------------------------------------------------------------------

def information_criterion(rss: float, n_rows: int, n_params: int, method: str,
                          n_groups: int | None = None) -> float:
    """Gaussian-likelihood criterion up to an additive constant.

    AIC penalizes 2 per parameter; the BIC variants penalize log of the
    number of randomized groups (bicn) or of the total row count (bicm).
    """
    if rss <= 0:
        return -math.inf
    ll_term = n_rows * math.log(rss / n_rows)
    if method == FORWARD_AIC:
        return ll_term + 2.0 * n_params
    if method == FORWARD_BICN:
        if n_groups is None:
            raise ValueError("bicn needs the group count")
        return ll_term + math.log(n_groups) * n_params
    if method == FORWARD_BICM:
        return ll_term + math.log(n_rows) * n_params
    raise ValueError(f"unknown criterion {method!r}")


def _orthonormalize(base: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(base)
    keep = np.abs(np.diag(r)) > 1e-12 * max(1.0, np.abs(r).max())
    return q[:, keep]


def forward_select_design(candidates: np.ndarray, y: np.ndarray,
                          base: np.ndarray, method: str,
                          n_groups: int | None = None,
                          max_terms: int | None = None) -> list[int]:
    """Greedy forward search over candidate columns given always-in base
    columns; returns the chosen candidate column indices in ascending order.

    Each step adds the single candidate that most decreases the criterion
    and stops when no addition strictly decreases it. Candidates that are
    numerically collinear with the current design are skipped with a warning.
    """
    candidates = np.asarray(candidates, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.size
    q = _orthonormalize(base)
    n_params = base.shape[1]
    if max_terms is None:
        max_terms = max(n - 1 - n_params, 0)

    # residualize everything against the running orthonormal basis
    r = y - q @ (q.T @ y)
    rss = float(r @ r)
    cand = candidates - q @ (q.T @ candidates)
    col_scale = (candidates ** 2).sum(axis=0)
    available = np.ones(candidates.shape[1], dtype=bool)
    tss = float(((y - y.mean()) ** 2).sum())
    crit = information_criterion(rss, n, n_params, method, n_groups)
    chosen: list[int] = []

    while available.any() and len(chosen) < max_terms:
        norms2 = (cand ** 2).sum(axis=0)
        valid = available & (norms2 > 1e-20 * np.maximum(col_scale, 1.0))
        if available.sum() > valid[available].sum():
            warnings.warn("forward step skipped rank-deficient candidate(s)")
        if not valid.any():
            break
        gains = np.zeros_like(norms2)
        proj = cand.T @ r
        gains[valid] = proj[valid] ** 2 / norms2[valid]
        rss_new = np.maximum(rss - gains, 0.0)
        best = -1
        best_crit = crit
        for j in np.nonzero(valid)[0]:
            c = information_criterion(rss_new[j], n, n_params + 1, method, n_groups)
            if c < best_crit:
                best_crit = c
                best = int(j)
        if best < 0:
            break
        # absorb the winning column into the basis
        qn = cand[:, best] / math.sqrt(norms2[best])
        r = r - qn * float(qn @ r)
        rss = float(r @ r)
        cand = cand - np.outer(qn, qn @ cand)
        available[best] = False
        cand[:, best] = 0.0
        chosen.append(best)
        n_params += 1
        crit = best_crit
        if tss > 0 and rss < 1e-12 * tss:
            break
    return sorted(chosen)


def forward_select(data: TrialDataset, spec: SelectionSpec) -> FittedMeanModel:
    """Forward selection on a dataset; returns the OLS refit of the chosen
    model (treatment forced in when ``include_treatment``)."""
    if spec.method not in _FORWARD_METHODS:
        raise ValueError(f"spec.method {spec.method!r} is not a forward criterion")
    cand_idx = list(spec.candidate_indices
                    if spec.candidate_indices is not None
                    else range(data.n_covariates))
    base_cols = [np.ones(data.n_units)]
    if spec.include_treatment:
        base_cols.append(data.unit_treatments)
    base = np.column_stack(base_cols)
    max_terms = spec.max_terms
    cap = data.n_units - base.shape[1] - 1
    max_terms = cap if max_terms is None else min(max_terms, cap)
    picked = forward_select_design(data.covariates[:, cand_idx], data.outcomes,
                                   base, spec.method, data.n_clusters, max_terms)
    selected = tuple(sorted(cand_idx[j] for j in picked))
    return fit_mean_model(data, selected, spec.include_treatment)


# ---------------------------------------------------------------------------
# adaptive LASSO by cyclic coordinate descent
# ---------------------------------------------------------------------------

def soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


@njit(cache=True)
def _cd_kernel(gram, xty, lam, weights, beta, tol, max_iter):  # pragma: no cover
    p = xty.size
    s = gram @ beta
    active = np.empty(p, dtype=np.int64)
    for _ in range(max_iter):
        # full sweep over every coordinate
        delta = 0.0
        for j in range(p):
            gjj = gram[j, j]
            if gjj <= 0.0:
                continue
            rho = xty[j] - s[j] + gjj * beta[j]
            thr = lam * weights[j]
            if rho > thr:
                new = (rho - thr) / gjj
            elif rho < -thr:
                new = (rho + thr) / gjj
            else:
                new = 0.0
            d = new - beta[j]
            if d != 0.0:
                for i in range(p):
                    s[i] += gram[i, j] * d
                beta[j] = new
                if abs(d) > delta:
                    delta = abs(d)
        if delta < tol:
            return beta
        # iterate on the active set until it stabilizes, then recheck all
        n_active = 0
        for j in range(p):
            if beta[j] != 0.0 or weights[j] == 0.0:
                active[n_active] = j
                n_active += 1
        for _ in range(max_iter):
            delta = 0.0
            for a in range(n_active):
                j = active[a]
                gjj = gram[j, j]
                if gjj <= 0.0:
                    continue
                rho = xty[j] - s[j] + gjj * beta[j]
                thr = lam * weights[j]
                if rho > thr:
                    new = (rho - thr) / gjj
                elif rho < -thr:
                    new = (rho + thr) / gjj
                else:
                    new = 0.0
                d = new - beta[j]
                if d != 0.0:
                    for i in range(p):
                        s[i] += gram[i, j] * d
                    beta[j] = new
                    if abs(d) > delta:
                        delta = abs(d)
            if delta < tol:
                break
    return beta


def _cd_solve(gram: np.ndarray, xty: np.ndarray, lam: float,
              weights: np.ndarray, beta: np.ndarray,
              tol: float = 1e-8, max_iter: int = 20000) -> np.ndarray:
    """Cyclic coordinate descent for (1/2)||y - X b||^2 + lam * sum w|b|,
    working on precomputed Gram quantities; weight 0 marks an unpenalized
    coordinate. Convergence is max absolute coefficient change < tol.

    Between full sweeps the iteration restricts itself to the current active
    set (nonzero or unpenalized coordinates), which is where nearly all the
    work happens on sparse solutions; a full sweep then certifies that no
    inactive coordinate wants to move.
    """
    return _cd_kernel(np.ascontiguousarray(gram), np.ascontiguousarray(xty),
                      float(lam), np.ascontiguousarray(weights), beta,
                      float(tol), int(max_iter))


def adaptive_weights(X: np.ndarray, y: np.ndarray, gamma: float,
                     unpenalized=()) -> np.ndarray:
    """Penalty weights 1/|initial coefficient|^gamma from an initial fit.

    The initial fit is OLS (with intercept) when the design has enough rows;
    otherwise per-column simple-regression slopes are used, which keeps the
    weights defined when candidates outnumber observations. Coefficients
    indistinguishable from zero give infinite weight, excluding the column.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    design = np.column_stack([np.ones(n), X])
    init = None
    if n > p + 1:
        u, s, vt = np.linalg.svd(design, full_matrices=False)
        if s[-1] > 1e-10 * s[0]:
            init = (vt.T @ ((u.T @ y) / s))[1:]
    if init is None:
        xc = X - X.mean(axis=0)
        yc = y - y.mean()
        norms = (xc ** 2).sum(axis=0)
        init = np.where(norms > 0, xc.T @ yc / np.where(norms > 0, norms, 1.0), 0.0)
    with np.errstate(divide="ignore"):
        w = 1.0 / np.abs(init) ** gamma
    w[np.abs(init) < _WEIGHT_FLOOR] = np.inf
    w = np.asarray(w, dtype=float)
    for j in unpenalized:
        w[int(j)] = 0.0
    return w


def penalized_lasso(X: np.ndarray, y: np.ndarray, lam: float,
                    weights: np.ndarray, tol: float = 1e-8) -> tuple[float, np.ndarray]:
    """Solve the weighted L1 problem with an unpenalized intercept.

    Returns (intercept, coefficients). Columns with infinite weight are held
    at zero. On a design whose columns are orthonormal and orthogonal to the
    constant, each coefficient is exactly the soft-thresholded inner product
    with the response.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    weights = np.asarray(weights, dtype=float)
    finite = np.isfinite(weights)
    Xf = X[:, finite]
    wf = np.concatenate([[0.0], weights[finite]])
    design = np.column_stack([np.ones(n), Xf])
    gram = design.T @ design
    xty = design.T @ y
    beta = _cd_solve(gram, xty, float(lam), wf, np.zeros(wf.size), tol=tol)
    full = np.zeros(p)
    full[finite] = beta[1:]
    return float(beta[0]), full


def lambda_grid_for(X: np.ndarray, y: np.ndarray, weights: np.ndarray,
                    size: int = 100) -> tuple[float, ...]:
    """Default descending grid from lambda_max (all penalized coefficients
    zero) down to 1e-4 * lambda_max, log-spaced."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    r0 = y - y.mean()
    unpen = np.isfinite(weights) & (weights == 0.0)
    if unpen.any():
        base = np.column_stack([np.ones(y.size), X[:, unpen]])
        coef, *_ = np.linalg.lstsq(base, y, rcond=None)
        r0 = y - base @ coef
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.abs(X.T @ r0) / weights
    scores[~np.isfinite(scores)] = 0.0
    lam_max = float(scores.max(initial=0.0))
    if lam_max <= 0:
        lam_max = 1e-12
    return tuple(np.geomspace(lam_max, 1e-4 * lam_max, size))


def cross_validate_lambda(X: np.ndarray, y: np.ndarray, spec: SelectionSpec,
                          groups=None, weights: np.ndarray | None = None) -> float:
    """Pick the grid penalty minimizing mean held-out squared error.

    Folds partition rows by group (clusters are never split); ties are broken
    toward the larger penalty, i.e. the sparser model. Penalty weights are
    recomputed on each training fold.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.size
    groups = np.arange(n) if groups is None else np.asarray(groups)
    ids = np.unique(groups)
    if spec.cv_folds > ids.size:
        raise ValueError(f"{spec.cv_folds} folds but only {ids.size} groups")
    if weights is None:
        weights = adaptive_weights(X, y, spec.gamma)
    grid = spec.lambda_grid or lambda_grid_for(X, y, weights, spec.lambda_grid_size)
    if len(grid) == 1:
        return float(grid[0])

    rng = np.random.default_rng(spec.seed)
    shuffled = ids[rng.permutation(ids.size)]
    folds = np.array_split(shuffled, spec.cv_folds)
    sse = np.zeros(len(grid))
    for held in folds:
        test = np.isin(groups, held)
        train = ~test
        if test.sum() == 0 or train.sum() == 0:
            raise ValueError("cross-validation fold with no rows")
        Xtr, ytr = X[train], y[train]
        w = adaptive_weights(Xtr, ytr, spec.gamma)
        w[weights == 0.0] = 0.0  # keep forced-in columns unpenalized
        finite = np.isfinite(w)
        design = np.column_stack([np.ones(Xtr.shape[0]), Xtr[:, finite]])
        gram = design.T @ design
        xty = design.T @ ytr
        wf = np.concatenate([[0.0], w[finite]])
        beta = np.zeros(wf.size)
        Xte = np.column_stack([np.ones(int(test.sum())), X[test][:, finite]])
        yte = y[test]
        for gi, lam in enumerate(grid):  # descending: warm starts
            beta = _cd_solve(gram, xty, float(lam), wf, beta)
            err = yte - Xte @ beta
            sse[gi] += float(err @ err)
    # argmin on the descending grid returns the largest lambda among ties
    return float(grid[int(np.argmin(sse))])


def adaptive_lasso_fit(X: np.ndarray, y: np.ndarray, spec: SelectionSpec,
                       groups=None, unpenalized=()) -> FittedMeanModel:
    """Adaptive-LASSO/OLS hybrid on a design matrix (no intercept column;
    columns are expected standardized, apart from forced-in indicator
    columns listed in ``unpenalized``).

    The L1 stage determines the support at the cross-validated penalty (or
    the single grid value when the grid has length one) and the selected
    columns are then refit by OLS with an intercept. If the chosen penalty
    leaves more nonzero coefficients than the OLS refit can support, the
    penalty is walked up the grid until the refit is feasible.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    weights = adaptive_weights(X, y, spec.gamma, unpenalized)
    grid = tuple(spec.lambda_grid
                 or lambda_grid_for(X, y, weights, spec.lambda_grid_size))
    if len(grid) == 1:
        idx = 0
    else:
        lam = cross_validate_lambda(X, y, replace(spec, lambda_grid=grid),
                                    groups, weights)
        idx = int(np.argmin(np.abs(np.asarray(grid) - lam)))

    cap = y.size - 2 - len(tuple(unpenalized))
    if spec.max_terms is not None:
        cap = min(cap, spec.max_terms)
    support: list[int] = []
    for i in range(idx, -1, -1):
        _, coef = penalized_lasso(X, y, grid[i], weights)
        nonzero = [int(j) for j in np.nonzero(coef)[0] if j not in set(unpenalized)]
        if len(nonzero) <= cap:
            support = nonzero
            break
        if i == 0:
            support = []
            break
        warnings.warn("penalty increased to keep the OLS refit full rank")
    support = sorted(set(support) | {int(j) for j in unpenalized})
    design = np.column_stack([np.ones(y.size), X[:, support]])
    return ols_fit(design, y, selected=tuple(support))


# ---------------------------------------------------------------------------
# whitening for clustered selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WhitenedData:
    """Per-cluster outcomes and covariates scaled by the symmetric square
    root of the working precision, plus the transformed constant column."""

    outcomes: tuple[np.ndarray, ...]
    covariates: tuple[np.ndarray, ...]
    constants: tuple[np.ndarray, ...]
    lambda_matrix_provenance: str


def precision_sqrt(working: WorkingCovariance, m: int) -> np.ndarray:
    """Symmetric positive definite square root of V^{-1} for size m."""
    vinv = working.inverse(m)
    vals, vecs = np.linalg.eigh(vinv)
    if vals.min() <= 0:
        raise ValueError("working covariance is not positive definite")
    return (vecs * np.sqrt(vals)) @ vecs.T


def whiten_clusters(data: TrialDataset, working: WorkingCovariance,
                    provenance: str = "") -> WhitenedData:
    """Scale each cluster's outcomes and covariates by the square root of
    the working precision so correlated fitting reduces to independent-style
    fitting on the transformed data."""
    roots = {m: precision_sqrt(working, m) for m in set(int(v) for v in data.cluster_sizes)}
    outs, covs, ones = [], [], []
    for c in data.clusters:
        lam_half = roots[c.size]
        outs.append(lam_half @ c.outcomes)
        covs.append(lam_half @ c.covariates)
        ones.append(lam_half @ np.ones(c.size))
    return WhitenedData(tuple(outs), tuple(covs), tuple(ones),
                        provenance or f"{working.structure} working precision")


# ---------------------------------------------------------------------------
# dataset-level selection dispatch
# ---------------------------------------------------------------------------

def _standardize_columns(X: np.ndarray):
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    ok = sd > 0
    Z = np.zeros_like(X)
    Z[:, ok] = (X[:, ok] - mean[ok]) / sd[ok]
    return Z, ok


def select_covariates(data: TrialDataset, spec: SelectionSpec) -> FittedMeanModel:
    """Run the configured selection method on a dataset and return the OLS
    refit of the selected model (on the original covariate scale)."""
    if spec.method == NONE:
        return fit_mean_model(data, (), spec.include_treatment)
    if spec.method == FIXED:
        return fit_mean_model(data, tuple(sorted(spec.fixed_indices)),
                              spec.include_treatment)
    if spec.method in _FORWARD_METHODS:
        return forward_select(data, spec)
    if spec.method != ADAPTIVE_LASSO:
        raise ValueError(f"unknown selection method {spec.method!r}")

    cand_idx = list(spec.candidate_indices
                    if spec.candidate_indices is not None
                    else range(data.n_covariates))
    raw = data.covariates[:, cand_idx]
    y = data.outcomes
    groups = data.unit_cluster_index

    if spec.whiten:
        init = _independence_initial_model(data, spec)
        resid_clusters = data.split_by_cluster(residuals(init, data))
        phi, alpha = moment_correlation(resid_clusters, init.eta.size)
        working = WorkingCovariance("exchangeable", phi, alpha)
        white = whiten_clusters(data, working,
                                provenance=f"independence {spec.method} initial fit")
        y = np.concatenate(white.outcomes)
        raw = np.vstack(white.covariates)[:, cand_idx]

    Z, ok = _standardize_columns(raw)
    if not ok.all():
        warnings.warn("dropping constant candidate column(s) from penalization")
    keep = [j for j, good in enumerate(ok) if good]
    cols = [Z[:, j] for j in keep]
    unpenalized: tuple[int, ...] = ()
    if spec.include_treatment:
        cols = [np.asarray(data.unit_treatments)] + cols
        unpenalized = (0,)
    mat = np.column_stack(cols) if cols else np.empty((y.size, 0))
    fit = adaptive_lasso_fit(mat, y, spec, groups, unpenalized)

    offset = 1 if spec.include_treatment else 0
    chosen = tuple(sorted(cand_idx[keep[j - offset]]
                          for j in fit.selected if j >= offset))
    return fit_mean_model(data, chosen, spec.include_treatment)


def _independence_initial_model(data: TrialDataset, spec: SelectionSpec) -> FittedMeanModel:
    base = replace(spec, whiten=False)
    if spec.method == ADAPTIVE_LASSO:
        return select_covariates(data, base)
    return select_covariates(data, replace(base, method=FORWARD_BICM))
