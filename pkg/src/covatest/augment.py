"""Marginal treatment model with augmented estimating equations.

The marginal model is g(A; beta) = beta0 + beta1 A. Covariate information
enters through working mean models fit separately within each treatment arm
(treatment excluded from the regressors), subtracted as an augmentation term
weighted by I(A_i = a) - pi_a. With known allocation probabilities the
estimator stays consistent under arbitrary misspecification of the arm
models. For scalar data the solution has the familiar inverse-probability
weighted plus augmentation closed form; for clustered data the estimating
equation stays linear in beta and is solved as a 2x2 linear system.

The variance is the sandwich with the augmented estimating function in the
middle term, multiplied by the finite-sample correction
C = [(n0-p0-1)^-1 + (n1-p1-1)^-1] / [(n0-1)^-1 + (n1-1)^-1]
that accounts for the arm-model degrees of freedom spent by augmenting. The
per-arm sample sizes n_a are the row counts the arm models were fit on
(units, which equals clusters for scalar data).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import TrialDataset
from .gee import INDEPENDENCE, WorkingCovariance, gee_fit
from .regression import (METHOD_AUGMENTED, FittedMeanModel, TestResult,
                         wald_test)
from .select import SelectionSpec, select_covariates


@dataclass(frozen=True)
class AugmentedFit:
    """Marginal coefficients, per-arm working models, and corrected variance."""

    beta: np.ndarray                     # (beta0, beta1)
    arm_models: tuple[FittedMeanModel, FittedMeanModel]   # (control, treated)
    variance: np.ndarray                 # 2x2, correction applied
    correction_c: float

    @property
    def treatment_effect(self) -> float:
        return float(self.beta[1])


def correction_factor(n0: int, n1: int, p0: int, p1: int) -> float:
    """Finite-sample variance correction for arm-model augmentation."""
    if n0 - p0 - 1 <= 0 or n1 - p1 - 1 <= 0:
        raise ValueError("arm model too rich for correction factor")
    num = 1.0 / (n0 - p0 - 1) + 1.0 / (n1 - p1 - 1)
    den = 1.0 / (n0 - 1) + 1.0 / (n1 - 1)
    return num / den


def fit_arm_models(data: TrialDataset, selector) -> tuple[FittedMeanModel, FittedMeanModel]:
    """Fit one working mean model per treatment arm, treatment excluded.

    ``selector`` is either a ``SelectionSpec`` (selection runs independently
    within each arm) or an explicit tuple of covariate indices. Selection is
    capped so each arm retains at least one residual degree of freedom beyond
    the correction factor's requirement.
    """
    models = []
    for arm in (0, 1):
        sub = data.arm(arm)
        if isinstance(selector, SelectionSpec):
            if selector.include_treatment:
                raise ValueError("arm models must exclude treatment")
            cap = sub.n_units - 2
            if cap < 0:
                raise ValueError(f"arm {arm} too small for a working model")
            spec = replace(selector,
                           max_terms=cap if selector.max_terms is None
                           else min(selector.max_terms, cap),
                           cv_folds=min(selector.cv_folds, max(sub.n_clusters, 2)))
            models.append(select_covariates(sub, spec))
        else:
            idx = tuple(sorted(int(j) for j in selector))
            from .regression import fit_mean_model
            models.append(fit_mean_model(sub, idx, include_treatment=False))
    return models[0], models[1]


def _cluster_terms(data: TrialDataset, arm_models, working: WorkingCovariance):
    """Per-cluster scalars used by the estimating equation and sandwich:
    tau_i = 1'V^-1 1, s_i = 1'V^-1 y_i, q_i[a] = 1'V^-1 d_a(X_i)."""
    m0, m1 = arm_models
    d0 = m0.predict(data.covariates)
    d1 = m1.predict(data.covariates)
    n = data.n_clusters
    tau = np.empty(n)
    s = np.empty(n)
    q = np.empty((n, 2))
    for i, sl in enumerate(data.cluster_slices):
        row = working.inverse(sl.stop - sl.start).sum(axis=0)
        tau[i] = float(row.sum())
        s[i] = float(row @ data.outcomes[sl])
        q[i, 0] = float(row @ d0[sl])
        q[i, 1] = float(row @ d1[sl])
    return tau, s, q


def augmented_solve(data: TrialDataset, arm_models,
                    working: WorkingCovariance | None = None,
                    apply_correction: bool = True) -> AugmentedFit:
    """Solve the augmented estimating equations for (beta0, beta1).

    The equation is linear in beta under the identity link, so the solution
    is a direct 2x2 solve; for scalar data it reduces to the closed form
    beta0 + beta1*a = mean_i [ I(A_i=a)(Y_i - d_a(X_i))/pi_a + d_a(X_i) ].
    """
    working = working or WorkingCovariance()
    a = data.cluster_treatments
    pi1 = data.treatment_probability
    pi = np.array([1.0 - pi1, pi1])
    if pi.min() <= 0:
        raise ValueError("both treatment arms must be non-empty")
    tau, s, q = _cluster_terms(data, arm_models, working)

    # M beta = b with M from the standard term minus the augmentation term
    h = np.column_stack([np.ones(data.n_clusters), a])      # rows (1, A_i)
    m_mat = (h * tau[:, None]).T @ h
    b = h.T @ s
    for arm in (0, 1):
        wgt = (a == arm).astype(float) - pi[arm]
        h_a = np.array([1.0, float(arm)])
        m_mat -= np.outer(h_a, h_a) * float(wgt @ tau)
        b -= h_a * float(wgt @ q[:, arm])
    beta = np.linalg.solve(m_mat, b)

    variance, c = _variance_and_correction(data, arm_models, beta, tau, s, q,
                                           apply_correction)
    return AugmentedFit(beta, tuple(arm_models), variance, c)


def psi_contributions(data: TrialDataset, arm_models, beta,
                      working: WorkingCovariance | None = None) -> np.ndarray:
    """Per-cluster values of the augmented estimating function at beta."""
    working = working or WorkingCovariance()
    tau, s, q = _cluster_terms(data, arm_models, working)
    return _psi(data, beta, tau, s, q)


def _psi(data: TrialDataset, beta, tau, s, q) -> np.ndarray:
    a = data.cluster_treatments
    pi1 = data.treatment_probability
    pi = np.array([1.0 - pi1, pi1])
    mu = beta[0] + beta[1] * a
    psi = np.column_stack([s - tau * mu, a * (s - tau * mu)])
    for arm in (0, 1):
        wgt = (a == arm).astype(float) - pi[arm]
        term = wgt * (q[:, arm] - tau * (beta[0] + beta[1] * arm))
        psi[:, 0] -= term
        psi[:, 1] -= term * arm
    return psi


def _variance_and_correction(data, arm_models, beta, tau, s, q, apply_correction):
    a = data.cluster_treatments
    h = np.column_stack([np.ones(data.n_clusters), a])
    bread = (h * tau[:, None]).T @ h
    psi = _psi(data, beta, tau, s, q)
    meat = psi.T @ psi
    bread_inv = np.linalg.inv(bread)
    cov = bread_inv.T @ meat @ bread_inv
    cov = 0.5 * (cov + cov.T)
    c = 1.0
    if apply_correction:
        sizes = data.cluster_sizes
        n0 = int(sizes[a == 0].sum())
        n1 = int(sizes[a == 1].sum())
        m0, m1 = arm_models
        c = correction_factor(n0, n1, m0.n_covariates, m1.n_covariates)
    return c * cov, c


def augmented_variance(data: TrialDataset, fit: AugmentedFit,
                       working: WorkingCovariance | None = None,
                       apply_correction: bool = True) -> np.ndarray:
    """Corrected sandwich covariance of the marginal coefficients."""
    working = working or WorkingCovariance()
    tau, s, q = _cluster_terms(data, fit.arm_models, working)
    cov, _ = _variance_and_correction(data, fit.arm_models, fit.beta, tau, s, q,
                                      apply_correction)
    return cov


def augmented_test(data: TrialDataset, selector, working=INDEPENDENCE,
                   apply_correction: bool = True,
                   adjustment: str = "") -> TestResult:
    """Wald test of the marginal treatment effect using augmented estimating
    equations with arm-specific working models.

    For clustered data the working covariance parameters come from a
    marginal (treatment-only) GEE fit with the requested structure; the same
    covariance is used in the augmentation terms.
    """
    if isinstance(working, WorkingCovariance):
        wc = working
    else:
        marginal = gee_fit(data, (), include_treatment=True, working=working)
        wc = marginal.working
    arm_models = fit_arm_models(data, selector)
    fit = augmented_solve(data, arm_models, wc, apply_correction)
    se = float(np.sqrt(fit.variance[1, 1]))
    return wald_test(fit.treatment_effect, se, METHOD_AUGMENTED, adjustment)
