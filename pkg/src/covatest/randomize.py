"""Randomization inference: approximate exact and exact permutation tests.

The score statistic is S = sum_i (A_i - pi) u_i over cluster-level scores
u_i, where u_i is the residual (or raw/centered outcome) for scalar data and
u_i = 1' V_i^{-1} w_i for clustered data with residual vector w_i and a
working covariance V_i estimated once from the null working model. Under
fixed allocation the assignment vector is a simple random sample of n1
treated positions out of n, so the null distribution of S, its variance, and
its higher moments are all available in closed form from power sums of the
scores.

The approximate exact test refers S, standardized by its fixed-allocation
variance, to the standard normal distribution or to a higher-order corrected
reference distribution; the exact test permutes the assignment itself.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import TrialDataset
from .gee import WorkingCovariance
from .regression import (METHOD_APPROX_EXACT, METHOD_APPROX_EXACT_BZ,
                         METHOD_EXACT, FittedMeanModel, TestResult, residuals)

EXHAUSTIVE_CAP = 2_000_000
_ENUM_CHUNK = 65536

# corrections larger than this fraction of the normal density are scaled
# down to keep the corrected distribution function monotone
_BZ_CLAMP = 0.5


class DegenerateScoresError(ValueError):
    """All scores equal; the randomization variance is zero."""


@dataclass(frozen=True)
class ScoreSet:
    """Per-cluster scalar scores under a fixed (n0, n1) allocation."""

    u: np.ndarray
    pi: float
    allocation: tuple[int, int]

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        u.setflags(write=False)
        object.__setattr__(self, "u", u)
        n0, n1 = (int(v) for v in self.allocation)
        object.__setattr__(self, "allocation", (n0, n1))
        if n0 + n1 != u.size:
            raise ValueError("allocation counts do not sum to the score count")
        if not 0.0 < self.pi < 1.0:
            raise ValueError("treatment probability must lie in (0, 1)")

    @property
    def n(self) -> int:
        return self.u.size


@dataclass(frozen=True)
class PermutationPlan:
    """How to realize the permutation null distribution.

    ``exhaustive`` enumerates every fixed-allocation assignment (allowed only
    when the count is at most ``cap``); otherwise ``draws`` assignments are
    sampled with a seeded generator, so a given seed reproduces the same
    p-value regardless of worker count.
    """

    mode: str = "monte-carlo"
    draws: int = 1000
    seed: int = 0
    cap: int = EXHAUSTIVE_CAP

    def __post_init__(self):
        if self.mode not in ("monte-carlo", "exhaustive"):
            raise ValueError(f"unknown permutation mode {self.mode!r}")
        if self.mode == "monte-carlo" and self.draws < 1:
            raise ValueError("number of sampled assignments must be >= 1")

    @classmethod
    def monte_carlo(cls, draws: int = 1000, seed: int = 0) -> "PermutationPlan":
        return cls("monte-carlo", draws, seed)

    @classmethod
    def exhaustive(cls, cap: int = EXHAUSTIVE_CAP) -> "PermutationPlan":
        return cls("exhaustive", cap=cap)


def build_scores(data: TrialDataset, adjustment: FittedMeanModel | None = None,
                 working: WorkingCovariance | None = None) -> ScoreSet:
    """Collapse a dataset to per-cluster scores for randomization testing.

    Without adjustment the unit scores are the outcomes as stored (center
    them first if cluster sizes vary with assignment); with adjustment they
    are residuals from a working model that must exclude treatment. Cluster
    scores are 1' V^{-1} w with V from ``working`` (independence with unit
    dispersion when omitted), which reduces to the within-cluster residual
    sum under working independence.
    """
    if adjustment is not None and adjustment.includes_treatment:
        raise ValueError("adjustment model must exclude the treatment column")
    w = residuals(adjustment, data) if adjustment is not None else data.outcomes
    wc = working or WorkingCovariance()
    u = np.empty(data.n_clusters)
    for i, s in enumerate(data.cluster_slices):
        w_i = w[s]
        u[i] = float(wc.inverse(w_i.size).sum(axis=0) @ w_i)
    n0, n1 = data.allocation
    return ScoreSet(u, data.treatment_probability, (n0, n1))


def _check_assignment(scores: ScoreSet, assignment) -> np.ndarray:
    a = np.asarray(assignment, dtype=float)
    if a.shape != (scores.n,):
        raise ValueError("assignment length does not match score count")
    if not set(np.unique(a)) <= {0.0, 1.0}:
        raise ValueError("assignment must be binary")
    if int(a.sum()) != scores.allocation[1]:
        raise ValueError(
            f"assignment has {int(a.sum())} treated, expected {scores.allocation[1]}")
    return a


def score_statistic(scores: ScoreSet, assignment) -> float:
    """S = sum_i (a_i - pi) u_i for a fixed-allocation assignment."""
    a = _check_assignment(scores, assignment)
    return float((a - scores.pi) @ scores.u)


def randomization_variance(scores: ScoreSet) -> float:
    """Variance of S over the fixed-allocation randomization distribution.

    Var(S) = pi (1 - pi) sum u_i^2 + q * sum_{i != i'} u_i u_{i'}, with the
    cross-product coefficient q = -pi (1 - pi) / (n - 1), the exact
    without-replacement covariance of the assignment indicators. At equal
    allocation (pi = 1/2) this coincides with the small-sample coefficient
    pi (n/2 - 1)/(n - 1) - pi^2 and reproduces the exhaustively enumerated
    variance exactly; for unequal allocation the exact coefficient is the
    one validated by enumeration.
    """
    u = scores.u
    n = scores.n
    if n < 2:
        raise ValueError("need at least two clusters")
    pi = scores.pi
    sum_sq = float(u @ u)
    cross = float(u.sum()) ** 2 - sum_sq
    q = -pi * (1.0 - pi) / (n - 1)
    return pi * (1.0 - pi) * sum_sq + q * cross


def permutation_moments(scores: ScoreSet) -> tuple[float, float, float]:
    """Exact central moments (mu2, mu3, mu4) of S under fixed allocation.

    S - E[S] equals the sum of a simple random sample of n1 values drawn
    without replacement from the mean-centered scores, so its moments follow
    from power sums of the centered scores and falling-factorial sampling
    probabilities.
    """
    u = scores.u
    n = scores.n
    k = scores.allocation[1]
    d = u - u.mean()
    s2 = float(d @ d)
    s3 = float((d ** 3).sum())
    s4 = float((d ** 4).sum())

    p1 = k / n
    p2 = p1 * (k - 1) / (n - 1) if n > 1 else 0.0
    p3 = p2 * (k - 2) / (n - 2) if n > 2 else 0.0
    p4 = p3 * (k - 3) / (n - 3) if n > 3 else 0.0

    mu2 = (p1 - p2) * s2
    mu3 = (p1 - 3 * p2 + 2 * p3) * s3
    mu4 = (p1 - 7 * p2 + 12 * p3 - 6 * p4) * s4 + 3 * (p2 - 2 * p3 + p4) * s2 * s2
    return mu2, mu3, mu4


def _standardized_cumulants(scores: ScoreSet) -> tuple[float, float]:
    mu2, mu3, mu4 = permutation_moments(scores)
    if mu2 <= 0:
        raise DegenerateScoresError("degenerate score set: zero randomization variance")
    if scores.n < 4:
        return 0.0, 0.0
    gamma1 = mu3 / mu2 ** 1.5
    gamma2 = mu4 / mu2 ** 2 - 3.0
    return gamma1, gamma2


def bz_distribution(scores: ScoreSet, t) -> float | np.ndarray:
    """Higher-order corrected distribution function of the standardized score
    statistic.

    Evaluates the Edgeworth-type expansion Phi(t) - phi(t) [g1/6 H2(t) +
    g2/24 H3(t) + g1^2/72 H5(t)] with Hermite polynomials H_k and the exact
    permutation skewness g1 and excess kurtosis g2 of S under fixed
    allocation. The bracketed correction is clamped to half the normal
    density to preserve monotonicity, and the result is clamped to [0, 1].
    """
    gamma1, gamma2 = _standardized_cumulants(scores)
    t = np.asarray(t, dtype=float)
    h2 = t * t - 1.0
    h3 = t * (t * t - 3.0)
    h5 = t * (t ** 4 - 10.0 * t * t + 15.0)
    bracket = gamma1 / 6.0 * h2 + gamma2 / 24.0 * h3 + gamma1 ** 2 / 72.0 * h5
    bracket = np.clip(bracket, -_BZ_CLAMP, _BZ_CLAMP)
    cdf = norm.cdf(t) - norm.pdf(t) * bracket
    out = np.clip(cdf, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def bz_quantile(scores: ScoreSet, prob: float) -> float:
    """Quantile of the corrected reference distribution.

    Inverts the monotone envelope of the corrected distribution function on
    a fine grid, which is robust to residual non-monotonicity of the raw
    expansion deep in the tails.
    """
    if not 0.0 < prob < 1.0:
        raise ValueError("prob must be in (0, 1)")
    grid = np.linspace(-10.0, 10.0, 4001)
    cdf = np.maximum.accumulate(np.asarray(bz_distribution(scores, grid)))
    return float(np.interp(prob, cdf, grid))


def approx_exact_test(scores: ScoreSet, assignment, reference: str = "normal",
                      adjustment: str = "") -> TestResult:
    """Standardize S by its randomization variance and compute a two-sided
    p-value from the chosen reference distribution ("normal" or "bz")."""
    s = score_statistic(scores, assignment)
    var = randomization_variance(scores)
    if var <= 0:
        raise DegenerateScoresError("degenerate score set: zero randomization variance")
    se = math.sqrt(var)
    t = s / se
    if reference == "normal":
        p = float(2.0 * norm.sf(abs(t)))
        method = METHOD_APPROX_EXACT
    elif reference == "bz":
        p = float(bz_distribution(scores, -abs(t)) + 1.0 - bz_distribution(scores, abs(t)))
        p = min(max(p, 0.0), 1.0)
        method = METHOD_APPROX_EXACT_BZ
    else:
        raise ValueError(f"unknown reference {reference!r}")
    return TestResult(method, s, se, t, p, adjustment)


def enumerate_assignments(n: int, n1: int, cap: int = EXHAUSTIVE_CAP):
    """Yield every fixed-allocation assignment vector exactly once.

    Deterministic lexicographic order over the treated index sets; errors
    out when the count C(n, n1) exceeds ``cap``.
    """
    total = math.comb(n, n1)
    if total > cap:
        raise ValueError(f"C({n},{n1}) = {total} exceeds the enumeration cap {cap}")
    for combo in itertools.combinations(range(n), n1):
        a = np.zeros(n, dtype=np.int8)
        a[list(combo)] = 1
        yield a


def exhaustive_score_values(scores: ScoreSet, cap: int = EXHAUSTIVE_CAP) -> np.ndarray:
    """All values of S over the full assignment set (chunked enumeration)."""
    n, n1 = scores.n, scores.allocation[1]
    total = math.comb(n, n1)
    if total > cap:
        raise ValueError(f"C({n},{n1}) = {total} exceeds the enumeration cap {cap}")
    u = scores.u
    offset = scores.pi * float(u.sum())
    values = np.empty(total)
    combos = itertools.combinations(range(n), n1)
    pos = 0
    while True:
        block = list(itertools.islice(combos, _ENUM_CHUNK))
        if not block:
            break
        idx = np.array(block, dtype=np.intp)
        if idx.size == 0:  # n1 == 0: single empty combination
            values[pos:pos + len(block)] = -offset
        else:
            values[pos:pos + len(block)] = u[idx].sum(axis=1) - offset
        pos += len(block)
    return values


def sample_score_values(scores: ScoreSet, draws: int, seed: int) -> np.ndarray:
    """S over ``draws`` seeded random fixed-allocation assignments."""
    n, n1 = scores.n, scores.allocation[1]
    rng = np.random.default_rng(seed)
    # row-wise partial shuffles; the first n1 entries are the treated indices
    perm = rng.permuted(np.tile(np.arange(n), (draws, 1)), axis=1)[:, :n1]
    u = scores.u
    offset = scores.pi * float(u.sum())
    if n1 == 0:
        return np.full(draws, -offset)
    return u[perm].sum(axis=1) - offset


def exact_permutation_test(scores: ScoreSet, assignment,
                           plan: PermutationPlan | None = None,
                           adjustment: str = "") -> TestResult:
    """Exact (permutation) test of the observed score statistic.

    Two-sided via |S|. Exhaustive mode reports the exact proportion of
    assignments with |S| at least the observed value; Monte Carlo mode uses
    the add-one estimator (1 + #{|S_b| >= |S_obs|}) / (B + 1), which cannot
    return zero and stays valid under ties.
    """
    plan = plan or PermutationPlan()
    s_obs = score_statistic(scores, assignment)
    if plan.mode == "exhaustive":
        values = exhaustive_score_values(scores, plan.cap)
        count = int((np.abs(values) >= abs(s_obs) - _tie_tol(s_obs)).sum())
        p = count / values.size
    else:
        values = sample_score_values(scores, plan.draws, plan.seed)
        count = int((np.abs(values) >= abs(s_obs) - _tie_tol(s_obs)).sum())
        p = (1 + count) / (plan.draws + 1)
    return TestResult(METHOD_EXACT, s_obs, None, None, float(p), adjustment)


def _tie_tol(s_obs: float) -> float:
    # guards exceedance counting against floating-point jitter in permuted sums
    return 1e-12 * max(1.0, abs(s_obs))
