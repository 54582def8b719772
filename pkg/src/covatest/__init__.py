"""Covariate-adjusted treatment-effect tests for randomized trials.

Four families of tests of a binary, cluster-level treatment: the conditional
mean model (Wald test of the adjusted treatment coefficient with a robust
sandwich standard error), the marginal model with augmented estimating
equations, the approximate exact test (the randomization score statistic
standardized by its fixed-allocation variance, referred to a normal or
higher-order corrected distribution), and the exact permutation test.
Covariates may be chosen adaptively by forward selection under information
criteria or by an adaptive-LASSO/OLS hybrid, and a seeded Monte Carlo
harness measures type I error and power of every method under skewed
generative designs.
"""

__version__ = "0.1.0"

from .analysis import AnalysisSpec, CellResult, run_analysis, run_cell
from .augment import (AugmentedFit, augmented_solve, augmented_test,
                      augmented_variance, correction_factor, fit_arm_models)
from .data import (ClusterRecord, ColumnSchema, DataError, TrialDataset,
                   center_outcomes, cluster_average, from_arrays,
                   load_trial_csv, write_trial_csv)
from .gee import (EXCHANGEABLE, INDEPENDENCE, GeeFit, WorkingCovariance,
                  cmm_test, gee_fit, moment_correlation, sandwich_variance)
from .randomize import (PermutationPlan, ScoreSet, approx_exact_test,
                        bz_distribution, bz_quantile, build_scores,
                        enumerate_assignments, exact_permutation_test,
                        exhaustive_score_values, permutation_moments,
                        randomization_variance, score_statistic)
from .regression import (FittedMeanModel, RankDeficientError, TestResult,
                         fit_mean_model, ols_fit, residuals, wald_test)
from .select import (SelectionSpec, WhitenedData, adaptive_lasso_fit,
                     cross_validate_lambda, forward_select, select_covariates,
                     whiten_clusters)
from .simulate import (MonteCarloReport, SimulationDesign, default_cells,
                       fixed_adjustment_indices, gen_clustered,
                       gen_independent, monte_carlo_study, named_design)

__all__ = [name for name in dir() if not name.startswith("_")]
