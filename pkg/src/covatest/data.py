"""Trial data containers, CSV ingestion, cluster averaging, and centering.

A trial dataset is a collection of clusters (the randomized units), each
carrying one binary treatment assignment shared by its member units, per-unit
outcomes, and per-unit covariate vectors. Independent scalar designs are
represented as singleton clusters so that every downstream routine can treat
both cases uniformly.

Datasets are immutable after construction (arrays are marked read-only) and
can be shared freely across parallel workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Malformed or inconsistent trial data."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ClusterRecord:
    """One randomized unit: id, binary treatment, and its member units."""

    id: object
    treatment: int
    outcomes: np.ndarray      # shape (m,)
    covariates: np.ndarray    # shape (m, p)

    def __post_init__(self):
        out = _readonly(np.atleast_1d(self.outcomes))
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(len(out), -1)
        cov = _readonly(cov)
        if out.ndim != 1 or out.size == 0:
            raise DataError(f"cluster {self.id!r}: outcomes must be a non-empty vector")
        if cov.shape[0] != out.size:
            raise DataError(f"cluster {self.id!r}: covariate rows do not match outcomes")
        if int(self.treatment) not in (0, 1):
            raise DataError(f"cluster {self.id!r}: treatment must be 0 or 1")
        if not (np.all(np.isfinite(out)) and np.all(np.isfinite(cov))):
            raise DataError(f"cluster {self.id!r}: non-finite outcome or covariate")
        object.__setattr__(self, "outcomes", out)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "treatment", int(self.treatment))

    @property
    def size(self) -> int:
        return self.outcomes.size


@dataclass(frozen=True)
class TrialDataset:
    """Clusters plus the fixed-allocation design they were randomized under.

    The treatment probability is the design allocation fraction n1/n, taken
    as known and fixed; it is never re-estimated from the data.
    """

    clusters: tuple[ClusterRecord, ...]
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        clusters = tuple(self.clusters)
        if not clusters:
            raise DataError("dataset must contain at least one cluster")
        p = clusters[0].covariates.shape[1]
        for c in clusters:
            if c.covariates.shape[1] != p:
                raise DataError("all covariate vectors must have equal length")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(p))
        if len(names) != p:
            raise DataError("covariate_names length does not match covariate count")
        object.__setattr__(self, "clusters", clusters)
        object.__setattr__(self, "covariate_names", names)

    # -- design quantities -------------------------------------------------

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @cached_property
    def cluster_treatments(self) -> np.ndarray:
        return _readonly(np.array([c.treatment for c in self.clusters], dtype=float))

    @property
    def n_treated(self) -> int:
        return int(self.cluster_treatments.sum())

    @property
    def n_control(self) -> int:
        return self.n_clusters - self.n_treated

    @property
    def allocation(self) -> tuple[int, int]:
        """(n0, n1) fixed allocation counts."""
        return (self.n_control, self.n_treated)

    @property
    def treatment_probability(self) -> float:
        return self.n_treated / self.n_clusters

    @property
    def n_covariates(self) -> int:
        return self.clusters[0].covariates.shape[1]

    @cached_property
    def cluster_sizes(self) -> np.ndarray:
        return np.array([c.size for c in self.clusters], dtype=int)

    @property
    def n_units(self) -> int:
        return int(self.cluster_sizes.sum())

    @cached_property
    def cluster_slices(self) -> tuple[slice, ...]:
        """Row slice of each cluster within the stacked unit arrays."""
        ends = np.cumsum(self.cluster_sizes)
        starts = ends - self.cluster_sizes
        return tuple(slice(int(a), int(b)) for a, b in zip(starts, ends))

    # -- stacked unit-level views ------------------------------------------

    @cached_property
    def outcomes(self) -> np.ndarray:
        return _readonly(np.concatenate([c.outcomes for c in self.clusters]))

    @cached_property
    def covariates(self) -> np.ndarray:
        return _readonly(np.vstack([c.covariates for c in self.clusters]))

    @cached_property
    def unit_treatments(self) -> np.ndarray:
        return _readonly(np.repeat(self.cluster_treatments, self.cluster_sizes))

    @cached_property
    def unit_cluster_index(self) -> np.ndarray:
        idx = np.repeat(np.arange(self.n_clusters), self.cluster_sizes)
        idx.setflags(write=False)
        return idx

    def split_by_cluster(self, values: np.ndarray) -> list[np.ndarray]:
        """Split a stacked unit-level vector back into per-cluster pieces."""
        values = np.asarray(values)
        return [values[s] for s in self.cluster_slices]

    # -- derived datasets ---------------------------------------------------

    def subset(self, cluster_indices) -> "TrialDataset":
        """Dataset restricted to the given clusters (e.g. one treatment arm)."""
        picked = tuple(self.clusters[int(i)] for i in cluster_indices)
        return TrialDataset(picked, self.covariate_names)

    def arm(self, treatment: int) -> "TrialDataset":
        idx = [i for i, c in enumerate(self.clusters) if c.treatment == int(treatment)]
        if not idx:
            raise DataError(f"treatment arm {treatment} is empty")
        return self.subset(idx)

    def with_outcomes(self, stacked: np.ndarray) -> "TrialDataset":
        """Copy of the dataset with outcomes replaced (stacked unit order)."""
        stacked = np.asarray(stacked, dtype=float)
        if stacked.shape != (self.n_units,):
            raise DataError("replacement outcomes have wrong length")
        new = tuple(
            ClusterRecord(c.id, c.treatment, stacked[s], c.covariates)
            for c, s in zip(self.clusters, self.cluster_slices)
        )
        return TrialDataset(new, self.covariate_names)


def from_arrays(cluster_ids, treatments, outcomes, covariates,
                covariate_names=()) -> TrialDataset:
    """Build a dataset from flat per-unit arrays.

    Rows are grouped by ``cluster_ids`` in order of first appearance. All
    rows of a cluster must share one treatment value.
    """
    cluster_ids = list(cluster_ids)
    treatments = np.asarray(treatments)
    outcomes = np.asarray(outcomes, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim == 1:
        covariates = covariates.reshape(len(outcomes), -1)
    if not (len(cluster_ids) == len(treatments) == len(outcomes) == covariates.shape[0]):
        raise DataError("per-unit arrays have inconsistent lengths")

    order: dict[object, list[int]] = {}
    for row, cid in enumerate(cluster_ids):
        order.setdefault(cid, []).append(row)

    clusters = []
    for cid, rows in order.items():
        a = np.unique(treatments[rows])
        if a.size != 1:
            raise DataError(f"mixed treatment within cluster {cid!r}")
        val = float(a[0])
        if val not in (0.0, 1.0):
            raise DataError(f"non-binary treatment value {a[0]!r} in cluster {cid!r}")
        clusters.append(ClusterRecord(cid, int(val), outcomes[rows], covariates[rows]))
    return TrialDataset(tuple(clusters), tuple(covariate_names))


@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from CSV columns to the dataset's logical fields.

    When ``covariates`` is None, every column other than the cluster,
    treatment, outcome, and excluded columns is used as a covariate.
    """

    cluster: str = "cluster"
    treatment: str = "treatment"
    outcome: str = "outcome"
    covariates: tuple[str, ...] | None = None
    exclude: tuple[str, ...] = ()


def load_trial_csv(path, schema: ColumnSchema | None = None) -> TrialDataset:
    """Load a trial dataset from a headered CSV file.

    Nominal (non-numeric) covariate columns are expanded into indicator
    columns, dropping the first (sorted) level as the reference to avoid
    collinearity with the intercept. Missing values are rejected.
    """
    schema = schema or ColumnSchema()
    frame = pd.read_csv(path)
    for col in (schema.cluster, schema.treatment, schema.outcome):
        if col not in frame.columns:
            raise DataError(f"missing required column {col!r}")

    if schema.covariates is not None:
        missing = [c for c in schema.covariates if c not in frame.columns]
        if missing:
            raise DataError(f"missing covariate columns {missing}")
        cov_cols = list(schema.covariates)
    else:
        reserved = {schema.cluster, schema.treatment, schema.outcome, *schema.exclude}
        cov_cols = [c for c in frame.columns if c not in reserved]

    if frame[[schema.cluster, schema.treatment, schema.outcome, *cov_cols]].isna().any().any():
        raise DataError("missing values are not supported")

    outcome = pd.to_numeric(frame[schema.outcome], errors="coerce")
    if outcome.isna().any():
        raise DataError(f"non-numeric outcome in column {schema.outcome!r}")
    treatment = pd.to_numeric(frame[schema.treatment], errors="coerce")
    if treatment.isna().any() or not set(treatment.unique()) <= {0, 1}:
        raise DataError("treatment column must be binary 0/1")

    cov_parts: list[np.ndarray] = []
    names: list[str] = []
    for col in cov_cols:
        numeric = pd.to_numeric(frame[col], errors="coerce")
        if not numeric.isna().any():
            cov_parts.append(numeric.to_numpy(dtype=float))
            names.append(col)
            continue
        # nominal column: expand to indicators, dropping the reference level
        levels = sorted(frame[col].astype(str).unique())
        for level in levels[1:]:
            cov_parts.append((frame[col].astype(str) == level).to_numpy(dtype=float))
            names.append(f"{col}={level}")

    covariates = (np.column_stack(cov_parts) if cov_parts
                  else np.empty((len(frame), 0)))
    return from_arrays(frame[schema.cluster].tolist(), treatment.to_numpy(),
                       outcome.to_numpy(), covariates, tuple(names))


def write_trial_csv(data: TrialDataset, path,
                    schema: ColumnSchema | None = None) -> None:
    """Serialize a dataset to CSV with full float precision (round-trip safe)."""
    schema = schema or ColumnSchema()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.cluster, schema.treatment, schema.outcome,
                         *data.covariate_names])
        for c in data.clusters:
            for j in range(c.size):
                writer.writerow([c.id, c.treatment, repr(float(c.outcomes[j])),
                                 *(repr(float(v)) for v in c.covariates[j])])


def cluster_average(data: TrialDataset) -> TrialDataset:
    """Collapse each cluster to a single unit of within-cluster means.

    Outcomes and covariates are replaced by their arithmetic means; the
    cluster's treatment is preserved. Binary indicator covariates become
    within-cluster proportions.
    """
    clusters = tuple(
        ClusterRecord(c.id, c.treatment, np.array([c.outcomes.mean()]),
                      c.covariates.mean(axis=0).reshape(1, -1))
        for c in data.clusters
    )
    return TrialDataset(clusters, data.covariate_names)


def center_outcomes(data: TrialDataset) -> TrialDataset:
    """Subtract the grand mean of all unit-level outcomes from every outcome.

    With variable cluster sizes, centering makes the unadjusted cluster score
    totals sum to zero, which keeps the randomization score statistic
    mean-zero even when cluster size is associated with assignment.
    """
    grand = data.outcomes.mean()
    return data.with_outcomes(data.outcomes - grand)
