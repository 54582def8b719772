"""Ordinary least squares working models, residuals, and the Wald test.

Working mean models are linear in the covariates with an intercept, and may
optionally carry the treatment indicator (used when selection is run with
treatment forced into the model). Models that exclude treatment are the ones
eligible for randomization-test adjustment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import TrialDataset

# singular values below RANK_TOL * largest indicate a rank-deficient design
RANK_TOL = 1e-10

METHOD_CMM = "cmm"
METHOD_AUGMENTED = "augmented"
METHOD_APPROX_EXACT = "approx-exact"
METHOD_APPROX_EXACT_BZ = "approx-exact-bz"
METHOD_EXACT = "exact"


class RankDeficientError(ValueError):
    """Design matrix is numerically rank deficient."""


@dataclass(frozen=True)
class FittedMeanModel:
    """A fitted linear working model.

    ``eta`` is laid out as (intercept, [treatment], covariates...) where the
    treatment slot is present only when ``includes_treatment`` is set; the
    covariate coefficients follow the order of ``selected``.
    """

    selected: tuple[int, ...]
    eta: np.ndarray
    rss: float
    n_obs: int
    r2: float
    includes_treatment: bool = False

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "selected", tuple(int(i) for i in self.selected))
        expected = 1 + int(self.includes_treatment) + len(self.selected)
        if eta.size != expected:
            raise ValueError("eta length inconsistent with selected covariates")

    @property
    def n_covariates(self) -> int:
        return len(self.selected)

    def predict(self, covariates: np.ndarray, treatment=None) -> np.ndarray:
        """Evaluate the working mean at the given covariate rows."""
        covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
        pred = np.full(covariates.shape[0], self.eta[0])
        k = 1
        if self.includes_treatment:
            if treatment is None:
                raise ValueError("model includes treatment; pass treatment values")
            pred = pred + self.eta[1] * np.asarray(treatment, dtype=float)
            k = 2
        if self.selected:
            pred = pred + covariates[:, list(self.selected)] @ self.eta[k:]
        return pred


@dataclass(frozen=True)
class TestResult:
    """Outcome of one treatment-effect test.

    ``std_error`` and ``z_value`` are None for the exact permutation test,
    whose p-value comes from the permutation distribution directly.
    """

    method: str
    statistic: float
    std_error: float | None
    z_value: float | None
    p_value: float
    adjustment: str = ""


def _offending_columns(vt_null: np.ndarray) -> list[int]:
    # columns loading heavily on the numerical null space
    weight = np.sqrt((vt_null ** 2).sum(axis=0))
    return [int(j) for j in np.nonzero(weight > 0.3 * weight.max())[0]]


def ols_fit(X: np.ndarray, y: np.ndarray, selected=None,
            includes_treatment: bool = False) -> FittedMeanModel:
    """Least squares fit of ``y`` on a design matrix whose first column is
    the intercept (followed by the treatment column when present).

    Solved through the singular value decomposition; a smallest singular
    value below ``RANK_TOL`` times the largest raises ``RankDeficientError``
    naming the offending columns.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n <= k:
        raise RankDeficientError(f"need more rows ({n}) than columns ({k})")
    u, s, vt = np.linalg.svd(X, full_matrices=False)
    if s[-1] < RANK_TOL * s[0]:
        bad = _offending_columns(vt[s < RANK_TOL * s[0]])
        raise RankDeficientError(f"rank-deficient design; offending columns {bad}")
    eta = vt.T @ ((u.T @ y) / s)
    resid = y - X @ eta
    rss = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 0.0 if tss <= 0.0 else min(max(1.0 - rss / tss, 0.0), 1.0)

    n_base = 2 if includes_treatment else 1
    if selected is None:
        selected = tuple(range(k - n_base))
    return FittedMeanModel(tuple(selected), eta, rss, n, r2, includes_treatment)


def design_matrix(data: TrialDataset, selected=(),
                  include_treatment: bool = False) -> np.ndarray:
    """Stacked unit-level design [1, (A), X_selected] for a dataset."""
    cols = [np.ones(data.n_units)]
    if include_treatment:
        cols.append(data.unit_treatments)
    for j in selected:
        j = int(j)
        if not 0 <= j < data.n_covariates:
            raise IndexError(f"covariate index {j} out of range")
        cols.append(data.covariates[:, j])
    return np.column_stack(cols)


def fit_mean_model(data: TrialDataset, selected=(),
                   include_treatment: bool = False) -> FittedMeanModel:
    """OLS fit of the working mean model on a dataset's stacked units."""
    X = design_matrix(data, selected, include_treatment)
    return ols_fit(X, data.outcomes, selected=tuple(selected),
                   includes_treatment=include_treatment)


def residuals(model: FittedMeanModel, data: TrialDataset) -> np.ndarray:
    """Per-unit residuals w = y - d(x; eta) in stacked unit order."""
    for j in model.selected:
        if not 0 <= int(j) < data.n_covariates:
            raise IndexError(f"covariate index {j} out of range")
    treat = data.unit_treatments if model.includes_treatment else None
    return data.outcomes - model.predict(data.covariates, treat)


def wald_test(estimate: float, std_error: float, method: str,
              adjustment: str = "") -> TestResult:
    """Two-sided Wald test against the standard normal reference."""
    if not std_error > 0:
        raise ValueError(f"standard error must be positive, got {std_error}")
    z = float(estimate) / float(std_error)
    p = float(2.0 * norm.sf(abs(z)))
    return TestResult(method, float(estimate), float(std_error), z, p, adjustment)
