"""Conditional mean model tests via generalized estimating equations.

Identity-link GEE with independence or exchangeable working covariance,
method-of-moments estimation of the dispersion and exchangeable correlation,
and the robust (sandwich) covariance of the coefficient estimates. With
singleton clusters and working independence this collapses to OLS with the
HC0 heteroskedasticity-robust covariance, which is the scalar-outcome
conditional-mean-model test.

No small-sample sandwich correction is applied; the small-sample behavior of
the uncorrected robust variance is part of what the Monte Carlo harness is
meant to exhibit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import TrialDataset
from .regression import METHOD_CMM, TestResult, design_matrix, wald_test

INDEPENDENCE = "independence"
EXCHANGEABLE = "exchangeable"

# exchangeable correlation is clamped inside the open positive-definite range
_ALPHA_MARGIN = 1e-6


class ConvergenceError(RuntimeError):
    """GEE iteration failed to converge."""


@dataclass(frozen=True)
class WorkingCovariance:
    """Working within-cluster covariance V = phi^(1/2) R phi^(1/2).

    ``exch_alpha`` is the off-diagonal of the exchangeable correlation R and
    is ignored under independence. Positive definiteness for a cluster of
    size m requires -1/(m-1) < alpha < 1.
    """

    structure: str = INDEPENDENCE
    dispersion: float = 1.0
    exch_alpha: float = 0.0

    def __post_init__(self):
        if self.structure not in (INDEPENDENCE, EXCHANGEABLE):
            raise ValueError(f"unknown working structure {self.structure!r}")
        if not self.dispersion > 0:
            raise ValueError("dispersion must be positive")

    def matrix(self, m: int) -> np.ndarray:
        """V_i for a cluster of size m."""
        alpha = self.exch_alpha if self.structure == EXCHANGEABLE else 0.0
        self._check_pd(alpha, m)
        r = np.full((m, m), alpha)
        np.fill_diagonal(r, 1.0)
        return self.dispersion * r

    def inverse(self, m: int) -> np.ndarray:
        """Closed-form V_i^{-1} for a cluster of size m."""
        alpha = self.exch_alpha if self.structure == EXCHANGEABLE else 0.0
        self._check_pd(alpha, m)
        if alpha == 0.0:
            return np.eye(m) / self.dispersion
        # (1-a)I + aJ inverts to ((I - a/(1+(m-1)a) J) / (1-a))
        c = alpha / (1.0 + (m - 1) * alpha)
        inv = -c / (1.0 - alpha) * np.ones((m, m))
        np.fill_diagonal(inv, (1.0 - c) / (1.0 - alpha))
        return inv / self.dispersion

    def _check_pd(self, alpha: float, m: int) -> None:
        if m > 1 and not (-1.0 / (m - 1) < alpha < 1.0):
            raise ValueError(
                f"exchangeable alpha={alpha} is not positive definite for cluster size {m}")


def alpha_bounds(max_cluster_size: int) -> tuple[float, float]:
    """Open interval of exchangeable correlations valid for all clusters."""
    if max_cluster_size < 2:
        return (-1.0 + _ALPHA_MARGIN, 1.0 - _ALPHA_MARGIN)
    return (-1.0 / (max_cluster_size - 1) + _ALPHA_MARGIN, 1.0 - _ALPHA_MARGIN)


@dataclass(frozen=True)
class GeeFit:
    """Coefficients and covariance estimates from a GEE fit."""

    beta: np.ndarray
    robust_cov: np.ndarray
    naive_cov: np.ndarray
    iterations: int
    converged: bool
    working: WorkingCovariance
    selected: tuple[int, ...]
    include_treatment: bool

    @property
    def treatment_index(self) -> int | None:
        return 1 if self.include_treatment else None


def moment_correlation(residual_clusters, n_params: int) -> tuple[float, float]:
    """Method-of-moments dispersion and exchangeable correlation.

    phi is the residual mean square with ``n_params`` fitted parameters
    subtracted from the total unit count; the exchangeable correlation is the
    mean within-cluster cross product (pair count minus ``n_params`` in the
    denominator) scaled by phi and clamped into the positive-definite range.
    """
    residual_clusters = [np.asarray(e, dtype=float) for e in residual_clusters]
    sizes = np.array([e.size for e in residual_clusters])
    total = int(sizes.sum())
    df = total - n_params
    if df <= 0:
        raise ValueError("not enough observations to estimate dispersion")
    phi = float(sum(float(e @ e) for e in residual_clusters)) / df

    n_pairs = int((sizes * (sizes - 1) // 2).sum())
    if n_pairs == 0:
        raise ValueError("exchangeable correlation needs a cluster of size >= 2")
    cross = 0.0
    for e in residual_clusters:
        s = e.sum()
        cross += 0.5 * (s * s - float(e @ e))
    pair_df = n_pairs - n_params
    if pair_df <= 0:
        warnings.warn("fewer residual pairs than parameters; using raw pair count")
        pair_df = n_pairs
    alpha = (cross / pair_df) / phi if phi > 0 else 0.0

    lo, hi = alpha_bounds(int(sizes.max()))
    if not lo < alpha < hi:
        warnings.warn(f"moment correlation {alpha:.4f} clamped to ({lo:.4f}, {hi:.4f})")
        alpha = min(max(alpha, lo), hi)
    return phi, float(alpha)


def _cluster_design(data: TrialDataset, selected, include_treatment):
    X = design_matrix(data, selected, include_treatment)
    return [X[s] for s in data.cluster_slices], [data.outcomes[s] for s in data.cluster_slices]


def _gls_solve(Xc, yc, working: WorkingCovariance):
    k = Xc[0].shape[1]
    bread = np.zeros((k, k))
    rhs = np.zeros(k)
    for X_i, y_i in zip(Xc, yc):
        vinv = working.inverse(len(y_i))
        xt_v = X_i.T @ vinv
        bread += xt_v @ X_i
        rhs += xt_v @ y_i
    beta = np.linalg.solve(bread, rhs)
    return beta, bread


def gee_fit(data: TrialDataset, selected=(), include_treatment: bool = True,
            working=INDEPENDENCE, max_iter: int = 50,
            tol: float = 1e-10) -> GeeFit:
    """Solve the identity-link generalized estimating equations.

    ``working`` is either a structure name (correlation parameters are then
    estimated by the method of moments, iterating with the coefficient
    updates until joint convergence) or a ``WorkingCovariance`` instance with
    fixed parameters (a single generalized least squares solve).
    """
    fixed = isinstance(working, WorkingCovariance)
    structure = working.structure if fixed else working
    if structure not in (INDEPENDENCE, EXCHANGEABLE):
        raise ValueError(f"unknown working structure {structure!r}")
    Xc, yc = _cluster_design(data, selected, include_treatment)
    k = Xc[0].shape[1]

    wc = working if fixed else WorkingCovariance(INDEPENDENCE)
    beta, _ = _gls_solve(Xc, yc, wc)
    iterations = 1
    converged = True
    if not fixed:
        # estimate (phi, alpha) from current residuals, refit, repeat
        converged = structure == INDEPENDENCE
        for _ in range(max_iter):
            resid = [y_i - X_i @ beta for X_i, y_i in zip(Xc, yc)]
            if structure == INDEPENDENCE:
                phi, alpha = _dispersion_only(resid, k), 0.0
            else:
                phi, alpha = moment_correlation(resid, k)
            wc = WorkingCovariance(structure, phi, alpha)
            if structure == INDEPENDENCE:
                break
            new_beta, _ = _gls_solve(Xc, yc, wc)
            iterations += 1
            step = float(np.max(np.abs(new_beta - beta)))
            beta = new_beta
            if step < tol:
                converged = True
                break
        if not converged:
            raise ConvergenceError(f"GEE did not converge in {max_iter} iterations")

    # bread and meat must share the final working covariance
    robust, bread = _sandwich_with_bread(Xc, yc, beta, wc)
    naive = np.linalg.inv(bread)
    return GeeFit(beta, robust, naive, iterations, converged, wc,
                  tuple(int(i) for i in selected), include_treatment)


def _dispersion_only(residual_clusters, n_params: int) -> float:
    total = sum(e.size for e in residual_clusters)
    df = total - n_params
    if df <= 0:
        raise ValueError("not enough observations to estimate dispersion")
    return float(sum(float(e @ e) for e in residual_clusters)) / df


def _sandwich_with_bread(Xc, yc, beta, working: WorkingCovariance):
    k = Xc[0].shape[1]
    bread = np.zeros((k, k))
    meat = np.zeros((k, k))
    for X_i, y_i in zip(Xc, yc):
        vinv = working.inverse(len(y_i))
        xt_v = X_i.T @ vinv
        bread += xt_v @ X_i
        g_i = xt_v @ (y_i - X_i @ beta)
        meat += np.outer(g_i, g_i)
    bread_inv = np.linalg.inv(bread)
    cov = bread_inv @ meat @ bread_inv
    return 0.5 * (cov + cov.T), bread


def _sandwich(Xc, yc, beta, working: WorkingCovariance) -> np.ndarray:
    return _sandwich_with_bread(Xc, yc, beta, working)[0]


def sandwich_variance(data: TrialDataset, fit: GeeFit,
                      working: WorkingCovariance | None = None) -> np.ndarray:
    """Robust covariance (bread^-1 meat bread^-1) of a converged fit."""
    if not fit.converged:
        raise ValueError("fit did not converge")
    Xc, yc = _cluster_design(data, fit.selected, fit.include_treatment)
    return _sandwich(Xc, yc, fit.beta, working or fit.working)


def cmm_test(data: TrialDataset, selected=(), working=INDEPENDENCE,
             adjustment: str = "") -> TestResult:
    """Wald test of the treatment coefficient in the conditional mean model.

    The mean model is intercept + treatment + selected covariates; the
    standard error is the robust sandwich estimate and the reference
    distribution is standard normal.
    """
    fit = gee_fit(data, selected, include_treatment=True, working=working)
    idx = fit.treatment_index
    se = float(np.sqrt(fit.robust_cov[idx, idx]))
    return wald_test(float(fit.beta[idx]), se, METHOD_CMM, adjustment)
