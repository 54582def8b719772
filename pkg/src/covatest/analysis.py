"""Shared per-dataset analysis dispatch used by the CLI and the Monte Carlo
harness: one (method, adjustment, working covariance) cell in, one test
result out.

Randomization methods run covariate selection once on the observed data with
treatment excluded; conditional-mean-model and augmented methods run their
own selection with treatment forced in or per arm, respectively. All
randomness (cross-validation folds, sampled permutations) derives from the
cell seed, so a cell is reproducible independent of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import select as sel
from .data import TrialDataset, center_outcomes, cluster_average
from .gee import EXCHANGEABLE, INDEPENDENCE, WorkingCovariance, cmm_test, moment_correlation
from .randomize import (PermutationPlan, approx_exact_test, build_scores,
                        exact_permutation_test)
from .regression import (METHOD_APPROX_EXACT, METHOD_APPROX_EXACT_BZ,
                         METHOD_AUGMENTED, METHOD_CMM, METHOD_EXACT,
                         TestResult, residuals)

METHODS = (METHOD_CMM, METHOD_AUGMENTED, METHOD_APPROX_EXACT,
           METHOD_APPROX_EXACT_BZ, METHOD_EXACT)
ADJUSTMENTS = ("none", "aic", "bicn", "bicm", "alasso", "fixed")
WORKINGS = ("indep", "exch")

_RANDOMIZATION = (METHOD_APPROX_EXACT, METHOD_APPROX_EXACT_BZ, METHOD_EXACT)

_SELECTION_METHOD = {
    "aic": sel.FORWARD_AIC,
    "bicn": sel.FORWARD_BICN,
    "bicm": sel.FORWARD_BICM,
    "alasso": sel.ADAPTIVE_LASSO,
    "fixed": sel.FIXED,
    "none": sel.NONE,
}


@dataclass(frozen=True)
class AnalysisSpec:
    """One analysis cell: a test method plus its adjustment configuration."""

    method: str
    adjustment: str = "none"
    working: str = "indep"
    fixed_indices: tuple[int, ...] = ()
    center: bool = False
    permutations: int = 1000
    exhaustive: bool = False
    cv_folds: int = 5
    gamma: float = 1.0
    lambda_grid_size: int = 100
    apply_correction: bool = True
    whiten: bool = False
    label: str = ""

    def __post_init__(self):
        if self.method not in METHODS and self.method != "stub":
            raise ValueError(f"unknown method {self.method!r}")
        if self.adjustment not in ADJUSTMENTS:
            raise ValueError(f"unknown adjustment {self.adjustment!r}")
        if self.working not in WORKINGS:
            raise ValueError(f"unknown working covariance {self.working!r}")
        if not self.label:
            object.__setattr__(self, "label", self.default_label())

    def default_label(self) -> str:
        adj = self.adjustment
        if adj == "fixed":
            adj = "fixed:" + ",".join(str(i) for i in self.fixed_indices)
        return f"{self.method}/{adj}/{self.working}"

    @property
    def adjustment_text(self) -> str:
        if self.adjustment == "fixed":
            return "fixed:" + ",".join(str(i) for i in self.fixed_indices)
        return self.adjustment


@dataclass(frozen=True)
class CellResult:
    """A test result plus selection bookkeeping for one analysis cell."""

    spec: AnalysisSpec
    test: TestResult
    model_size: float   # covariates in the adjustment model (mean over arms)


def _selection_spec(spec: AnalysisSpec, include_treatment: bool,
                    seed: int) -> sel.SelectionSpec:
    return sel.SelectionSpec(
        method=_SELECTION_METHOD[spec.adjustment],
        include_treatment=include_treatment,
        fixed_indices=tuple(spec.fixed_indices),
        cv_folds=spec.cv_folds,
        gamma=spec.gamma,
        lambda_grid_size=spec.lambda_grid_size,
        whiten=spec.whiten,
        seed=seed,
    )


def _structure(working: str) -> str:
    return EXCHANGEABLE if working == "exch" else INDEPENDENCE


def _cell_seed(seed: int, *extra: int) -> int:
    return int(np.random.SeedSequence((int(seed),) + tuple(int(v) for v in extra))
               .generate_state(1)[0])


def run_cell(data: TrialDataset, spec: AnalysisSpec, seed: int = 0) -> CellResult:
    """Run one analysis cell on a dataset."""
    if spec.method == "stub":
        # harness calibration: the p-value is an injected uniform draw
        p = float(np.random.default_rng(_cell_seed(seed, 99)).uniform())
        return CellResult(spec, TestResult("stub", 0.0, None, None, p, "none"), 0.0)

    if spec.center:
        data = center_outcomes(data)

    if spec.method == METHOD_CMM:
        model = sel.select_covariates(
            data, _selection_spec(spec, include_treatment=True, seed=_cell_seed(seed, 0)))
        test = cmm_test(data, model.selected, _structure(spec.working),
                        adjustment=spec.adjustment_text)
        return CellResult(spec, test, float(len(model.selected)))

    if spec.method == METHOD_AUGMENTED:
        return _run_augmented(data, spec, seed)

    if spec.method in _RANDOMIZATION:
        return _run_randomization(data, spec, seed)
    raise ValueError(f"unknown method {spec.method!r}")


def _run_augmented(data: TrialDataset, spec: AnalysisSpec, seed: int) -> CellResult:
    from .augment import augmented_solve, fit_arm_models
    from .gee import gee_fit
    from .regression import wald_test

    if spec.adjustment == "none":
        selector: object = ()
    elif spec.adjustment == "fixed":
        selector = tuple(spec.fixed_indices)
    else:
        selector = _selection_spec(spec, include_treatment=False,
                                   seed=_cell_seed(seed, 0))
    if data.cluster_sizes.max() > 1:
        marginal = gee_fit(data, (), include_treatment=True,
                           working=_structure(spec.working))
        working = marginal.working
    else:
        working = WorkingCovariance()
    m0, m1 = fit_arm_models(data, selector)
    fit = augmented_solve(data, (m0, m1), working, spec.apply_correction)
    se = float(np.sqrt(fit.variance[1, 1]))
    test = wald_test(fit.treatment_effect, se, METHOD_AUGMENTED,
                     spec.adjustment_text)
    return CellResult(spec, test, 0.5 * (m0.n_covariates + m1.n_covariates))


def _run_randomization(data: TrialDataset, spec: AnalysisSpec, seed: int) -> CellResult:
    adjustment = None
    n_params = 1 if spec.center else 0
    if spec.adjustment != "none":
        adjustment = sel.select_covariates(
            data, _selection_spec(spec, include_treatment=False,
                                  seed=_cell_seed(seed, 0)))
        n_params = adjustment.eta.size

    working = None
    if data.cluster_sizes.max() > 1:
        resid = residuals(adjustment, data) if adjustment is not None else data.outcomes
        working = _estimate_working(data, resid, spec.working, n_params)

    scores = build_scores(data, adjustment, working)
    assignment = data.cluster_treatments
    adj_text = spec.adjustment_text
    if spec.method == METHOD_APPROX_EXACT:
        test = approx_exact_test(scores, assignment, "normal", adj_text)
    elif spec.method == METHOD_APPROX_EXACT_BZ:
        test = approx_exact_test(scores, assignment, "bz", adj_text)
    else:
        if spec.exhaustive:
            plan = PermutationPlan.exhaustive()
        else:
            plan = PermutationPlan.monte_carlo(spec.permutations, _cell_seed(seed, 1))
        test = exact_permutation_test(scores, assignment, plan, adj_text)
    size = 0.0 if adjustment is None else float(len(adjustment.selected))
    return CellResult(spec, test, size)


def _estimate_working(data: TrialDataset, resid: np.ndarray, working: str,
                      n_params: int) -> WorkingCovariance:
    """Working covariance for score building, estimated once from the null
    working model's residuals (it is held fixed over all permutations)."""
    clusters = data.split_by_cluster(resid)
    if working == "exch" and data.cluster_sizes.max() > 1:
        phi, alpha = moment_correlation(clusters, n_params)
        return WorkingCovariance(EXCHANGEABLE, phi, alpha)
    df = max(data.n_units - n_params, 1)
    phi = float(sum(float(e @ e) for e in clusters)) / df
    return WorkingCovariance(INDEPENDENCE, max(phi, 1e-300))


def run_analysis(data: TrialDataset, specs, seed: int = 0,
                 average_clusters: bool = False) -> list[CellResult]:
    """Run a batch of analysis cells on one dataset.

    Each cell gets a seed derived from its position, so adding or removing
    cells does not perturb the others.
    """
    if average_clusters:
        data = cluster_average(data)
    return [run_cell(data, spec, _cell_seed(seed, 1000 + i))
            for i, spec in enumerate(specs)]
