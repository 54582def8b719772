"""Generative designs and the Monte Carlo driver for type-I-error and power
studies of the covariate-adjusted tests.

Two families of designs are provided. The independent-scalar design draws 25
multivariate-lognormal baseline covariates per unit (equicorrelation 0.5 on
the log scale within the first ten, 0.2 between the first ten and the next
ten, independent elsewhere, unit log-variance) and an additive lognormal
error with log-variance 1.1; the outcome is linear in the treatment and in
covariates 1, 2, 10, 11, 12. The clustered design draws ten cluster-shared
covariates (two equicorrelated blocks of five at 0.5, 0.2 across), ten
unit-level covariates with within-cluster log-correlation 0.2, five noise
covariates with log-variance 25, a lognormal additive cluster effect with
log-variance rho * sigma^2, and a lognormal error with log-variance sigma^2.

Both error terms and the cluster effect are exponentials of normals, so they
are strictly positive and skewed; none of the validity findings rely on
symmetric errors.

Replicates derive their seeds from (master seed, replicate index), and every
analysis cell inside a replicate sees the identical dataset, so reports are
byte-identical for a given seed regardless of worker count, and power
contrasts between methods are paired.
"""

from __future__ import annotations

import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .analysis import AnalysisSpec, CellResult, run_cell
from .data import ClusterRecord, TrialDataset

INDEPENDENT = "independent"
CLUSTERED = "clustered"

# prespecified adjustment sets (0-based column indices)
CORRECT_INDEPENDENT = (0, 1, 9, 10, 11)
INCORRECT_INDEPENDENT = (0, 2, 9, 12, 20)
CORRECT_CLUSTERED = (0, 2, 10, 11, 14)
INCORRECT_CLUSTERED = (0, 1, 9, 12, 20)

_P_COVARIATES = 25


@dataclass(frozen=True)
class SimulationDesign:
    """Full parameterization of one generative model.

    ``treatment_effect`` is the coefficient on the treatment indicator (0
    under the null). For the clustered design, ``rho`` scales the
    log-variance of the cluster effect and ``error_log_var`` is sigma^2; the
    high-correlation variant uses rho=1, sigma^2=1.9.
    """

    kind: str = INDEPENDENT
    n_per_arm: int = 10
    cluster_size: int = 1
    treatment_effect: float = 0.0
    misspecified: bool = False
    error_log_var: float | None = None
    rho: float = 10.0 / 19.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (INDEPENDENT, CLUSTERED):
            raise ValueError(f"unknown design kind {self.kind!r}")
        if self.kind == CLUSTERED and self.misspecified:
            raise ValueError("the quadratic-terms variant is scalar-only")
        if self.error_log_var is None:
            default = 1.1 if self.kind == INDEPENDENT else 2.8
            object.__setattr__(self, "error_log_var", default)

    @property
    def eta(self) -> tuple[float, ...]:
        if self.kind == INDEPENDENT:
            return (1.0, self.treatment_effect, 1.0, 1.0, 0.2, 0.2, 0.2)
        return (1.0, self.treatment_effect, 1.25, 1.25, 0.2, 0.2, 0.2)

    @property
    def n_clusters(self) -> int:
        return 2 * self.n_per_arm


@lru_cache(maxsize=None)
def _chol_independent() -> np.ndarray:
    """Cholesky factor of the 25x25 log-scale covariance."""
    sigma = np.eye(_P_COVARIATES)
    sigma[:10, :10] = 0.5
    sigma[:10, 10:20] = 0.2
    sigma[10:20, :10] = 0.2
    np.fill_diagonal(sigma, 1.0)
    return np.linalg.cholesky(sigma)


@lru_cache(maxsize=None)
def _chol_cluster_shared() -> np.ndarray:
    """Cholesky factor of the 10x10 cluster-level log-scale covariance."""
    sigma = np.full((10, 10), 0.2)
    sigma[:5, :5] = 0.5
    sigma[5:, 5:] = 0.5
    np.fill_diagonal(sigma, 1.0)
    return np.linalg.cholesky(sigma)


def _fixed_allocation(n_per_arm: int, rng: np.random.Generator) -> np.ndarray:
    a = np.array([1] * n_per_arm + [0] * n_per_arm, dtype=float)
    return a[rng.permutation(a.size)]


def gen_independent(design: SimulationDesign,
                    rng: np.random.Generator | None = None) -> TrialDataset:
    """One scalar-outcome dataset: singleton clusters, fixed equal allocation."""
    if design.kind != INDEPENDENT:
        raise ValueError("design kind must be independent")
    rng = rng if rng is not None else np.random.default_rng(design.seed)
    n = design.n_clusters
    z = rng.standard_normal((n, _P_COVARIATES)) @ _chol_independent().T
    x = np.exp(z)
    a = _fixed_allocation(design.n_per_arm, rng)
    eps = np.exp(rng.normal(0.0, np.sqrt(design.error_log_var), n))
    eta = design.eta
    if design.misspecified:
        # squared terms enter the truth; linear fitting cannot capture them
        y = (eta[0] + eta[1] * a + 0.50 * x[:, 0] + eta[3] * x[:, 1]
             + eta[4] * x[:, 9] + eta[5] * x[:, 10] + eta[6] * x[:, 11]
             + x[:, 0] ** 2 + x[:, 9] ** 2 + eps)
    else:
        y = (eta[0] + eta[1] * a + eta[2] * x[:, 0] + eta[3] * x[:, 1]
             + eta[4] * x[:, 9] + eta[5] * x[:, 10] + eta[6] * x[:, 11] + eps)
    clusters = tuple(
        ClusterRecord(i, int(a[i]), y[i:i + 1], x[i:i + 1])
        for i in range(n)
    )
    return TrialDataset(clusters, tuple(f"x{j + 1}" for j in range(_P_COVARIATES)))


def gen_clustered(design: SimulationDesign,
                  rng: np.random.Generator | None = None) -> TrialDataset:
    """One clustered dataset with shared, unit-level, and noise covariates."""
    if design.kind != CLUSTERED:
        raise ValueError("design kind must be clustered")
    rng = rng if rng is not None else np.random.default_rng(design.seed)
    n = design.n_clusters
    m = design.cluster_size
    sigma2 = design.error_log_var

    shared = np.exp(rng.standard_normal((n, 10)) @ _chol_cluster_shared().T)
    # unit-level covariates: exchangeable 0.2 within cluster, independent across k
    rho_w = 0.2
    common = rng.standard_normal((n, 1, 10))
    unit = rng.standard_normal((n, m, 10))
    x_unit = np.exp(np.sqrt(rho_w) * common + np.sqrt(1.0 - rho_w) * unit)
    x_noise = np.exp(rng.normal(0.0, 5.0, (n, m, 5)))

    a = _fixed_allocation(design.n_per_arm, rng)
    b = np.exp(rng.normal(0.0, np.sqrt(design.rho * sigma2), n))
    eps = np.exp(rng.normal(0.0, np.sqrt(sigma2), (n, m)))
    eta = design.eta

    clusters = []
    names = tuple(f"x{j + 1}" for j in range(_P_COVARIATES))
    for i in range(n):
        cov = np.column_stack([np.tile(shared[i], (m, 1)), x_unit[i], x_noise[i]])
        y = (eta[0] + eta[1] * a[i] + eta[2] * cov[:, 0] + eta[3] * cov[:, 10]
             + eta[4] * cov[:, 2] + eta[5] * cov[:, 11] + eta[6] * cov[:, 14]
             + b[i] + eps[i])
        clusters.append(ClusterRecord(i, int(a[i]), y, cov))
    return TrialDataset(tuple(clusters), names)


def generate(design: SimulationDesign,
             rng: np.random.Generator | None = None) -> TrialDataset:
    if design.kind == INDEPENDENT:
        return gen_independent(design, rng)
    return gen_clustered(design, rng)


# ---------------------------------------------------------------------------
# named designs
# ---------------------------------------------------------------------------

NAMED_DESIGNS = {
    "indep-null": SimulationDesign(INDEPENDENT, treatment_effect=0.0),
    "indep-alt": SimulationDesign(INDEPENDENT, treatment_effect=4.0),
    "indep-alt-quad": SimulationDesign(INDEPENDENT, treatment_effect=4.0,
                                       misspecified=True),
    "clustered-null": SimulationDesign(CLUSTERED, cluster_size=20,
                                       treatment_effect=0.0),
    "clustered-alt": SimulationDesign(CLUSTERED, cluster_size=20,
                                      treatment_effect=2.2),
    "clustered-null-high": SimulationDesign(CLUSTERED, cluster_size=20,
                                            treatment_effect=0.0,
                                            error_log_var=1.9, rho=1.0),
    "clustered-alt-high": SimulationDesign(CLUSTERED, cluster_size=20,
                                           treatment_effect=2.2,
                                           error_log_var=1.9, rho=1.0),
}


def named_design(name: str, n_per_arm: int | None = None,
                 cluster_size: int | None = None) -> SimulationDesign:
    if name not in NAMED_DESIGNS:
        known = ", ".join(sorted(NAMED_DESIGNS))
        raise KeyError(f"unknown design {name!r}; available: {known}")
    d = NAMED_DESIGNS[name]
    if n_per_arm is not None:
        d = replace(d, n_per_arm=int(n_per_arm))
    if cluster_size is not None and d.kind == CLUSTERED:
        d = replace(d, cluster_size=int(cluster_size))
    return d


def fixed_adjustment_indices(kind: str, correct: bool) -> tuple[int, ...]:
    if kind == INDEPENDENT:
        return CORRECT_INDEPENDENT if correct else INCORRECT_INDEPENDENT
    return CORRECT_CLUSTERED if correct else INCORRECT_CLUSTERED


# ---------------------------------------------------------------------------
# Monte Carlo driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellSummary:
    label: str
    method: str
    adjustment: str
    working: str
    reps: int
    errors: int
    rejection_rate: float
    mc_se: float
    mean_model_size: float


@dataclass(frozen=True)
class MonteCarloReport:
    design: SimulationDesign
    alpha: float
    reps: int
    seed: int
    cells: tuple[CellSummary, ...]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("label,method,adjustment,working,reps,errors,"
                  "rejection_rate,mc_se,mean_model_size\n")
        for c in self.cells:
            buf.write(f"{c.label},{c.method},{c.adjustment},{c.working},"
                      f"{c.reps},{c.errors},{c.rejection_rate!r},"
                      f"{c.mc_se!r},{c.mean_model_size!r}\n")
        return buf.getvalue()

    def to_text_table(self) -> str:
        head = f"{'cell':<36} {'rate':>8} {'mc_se':>8} {'size':>6} {'errors':>6}"
        lines = [head, "-" * len(head)]
        for c in self.cells:
            lines.append(f"{c.label:<36} {c.rejection_rate:>8.4f} "
                         f"{c.mc_se:>8.4f} {c.mean_model_size:>6.2f} {c.errors:>6d}")
        return "\n".join(lines) + "\n"

    def rate(self, label: str) -> float:
        for c in self.cells:
            if c.label == label:
                return c.rejection_rate
        raise KeyError(label)


def _replicate_batch(args):
    design, cells, alpha, seed, indices = args
    out = []
    for r in indices:
        rng = np.random.default_rng(np.random.SeedSequence((seed, int(r))))
        data = generate(design, rng)
        row = []
        for ci, cell in enumerate(cells):
            cell_seed = int(np.random.SeedSequence((seed, int(r), ci))
                            .generate_state(1)[0])
            try:
                res: CellResult = run_cell(data, cell, cell_seed)
                row.append((res.test.p_value <= alpha, res.test.p_value,
                            res.model_size, None))
            except Exception as exc:  # cell failures are tallied, not fatal
                row.append((False, float("nan"), float("nan"),
                            f"{type(exc).__name__}: {exc}"))
        out.append((int(r), row))
    return out


def monte_carlo_study(design: SimulationDesign, cells, reps: int,
                      alpha: float = 0.05, seed: int = 0,
                      workers: int = 1) -> MonteCarloReport:
    """Rejection rates of the configured analysis cells over ``reps``
    simulated datasets.

    Every cell sees the same dataset within a replicate; per-replicate and
    per-cell seeds derive from the master seed and replicate index, so the
    report is identical for any worker count. A cell erroring on more than
    1% of replicates aborts the study with diagnostics.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    cells = tuple(cells)
    indices = np.arange(reps)
    if workers <= 1 or reps < 4:
        batches = [_replicate_batch((design, cells, alpha, seed, indices))]
    else:
        chunks = np.array_split(indices, min(workers * 4, reps))
        args = [(design, cells, alpha, seed, chunk) for chunk in chunks if len(chunk)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_replicate_batch, args))

    rows: dict[int, list] = {}
    for batch in batches:
        for r, row in batch:
            rows[r] = row

    summaries = []
    for ci, cell in enumerate(cells):
        rejects, sizes, errors, messages = [], [], 0, []
        for r in range(reps):
            rej, _, size, err = rows[r][ci]
            if err is None:
                rejects.append(rej)
                sizes.append(size)
            else:
                errors += 1
                if len(messages) < 3:
                    messages.append(f"rep {r}: {err}")
        if errors > max(0.01 * reps, 0):
            detail = "; ".join(messages)
            raise RuntimeError(
                f"cell {cell.label} failed on {errors}/{reps} replicates: {detail}")
        ok = len(rejects)
        rate = float(np.mean(rejects)) if ok else float("nan")
        se = float(np.sqrt(rate * (1.0 - rate) / ok)) if ok else float("nan")
        summaries.append(CellSummary(cell.label, cell.method,
                                     cell.adjustment_text, cell.working,
                                     ok, errors, rate, se,
                                     float(np.mean(sizes)) if sizes else float("nan")))
    return MonteCarloReport(design, alpha, reps, seed, tuple(summaries))


def default_cells(design: SimulationDesign, methods=None, adjustments=None,
                  working=("indep",), permutations: int = 1000,
                  cv_folds: int | None = None) -> tuple[AnalysisSpec, ...]:
    """Standard grid of analysis cells for a design.

    Cross-validation folds default to total-sample-count / 10 (at least 2)
    for the scalar design and 5 for the clustered design. Unadjusted
    randomization cells center outcomes first.
    """
    from .regression import (METHOD_APPROX_EXACT, METHOD_APPROX_EXACT_BZ,
                             METHOD_AUGMENTED, METHOD_CMM, METHOD_EXACT)
    methods = tuple(methods or (METHOD_CMM, METHOD_AUGMENTED,
                                METHOD_APPROX_EXACT, METHOD_APPROX_EXACT_BZ,
                                METHOD_EXACT))
    adjustments = tuple(adjustments or ("none", "aic", "bicm", "alasso"))
    if cv_folds is None:
        cv_folds = (max(2, design.n_clusters // 10)
                    if design.kind == INDEPENDENT else 5)
    specs = []
    randomization = (METHOD_APPROX_EXACT, METHOD_APPROX_EXACT_BZ, METHOD_EXACT)
    for w in working:
        for method in methods:
            for adj in adjustments:
                if method == METHOD_AUGMENTED and adj == "none":
                    continue  # collapses to the unadjusted marginal test
                fixed = ()
                if adj in ("fixed-correct", "fixed-incorrect"):
                    fixed = fixed_adjustment_indices(design.kind,
                                                     adj == "fixed-correct")
                specs.append(AnalysisSpec(
                    method=method,
                    adjustment="fixed" if fixed else adj,
                    working=w,
                    fixed_indices=fixed,
                    center=(adj == "none" and method in randomization),
                    permutations=permutations,
                    cv_folds=cv_folds,
                    label=f"{method}/{adj}/{w}",
                ))
    return tuple(specs)
