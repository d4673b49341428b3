"""Accumulated local effects of covariates on covariance-scale outputs.

The estimator averages, within quantile bins of the target covariate, the
change in the model output when the covariate moves from the lower to the
upper bin edge, then accumulates the per-bin averages.  Pointwise
posterior variances come from the delta method, chaining the output's
eta-Jacobian through each predictor's design rows at the bin-shifted
covariate values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import mcd
from .basis import Assembly
from .data import Dataset


class AleError(ValueError):
    pass


@dataclass(frozen=True)
class OutputSpec:
    """Scalar output of the covariance parametrisation (0-based indices)."""

    kind: str                 # "sigma" | "corr" | "D2" | "T"
    l: int
    m: int = 0

    def __post_init__(self):
        if self.kind not in ("sigma", "corr", "D2", "T"):
            raise AleError(f"unknown output kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "D2":
            return f"D2[{self.l + 1}]"
        return f"{self.kind}[{self.l + 1},{self.m + 1}]"

    def values(self, eta: np.ndarray, tables: mcd.McdTables) -> np.ndarray:
        if self.kind == "D2":
            return np.exp(eta[:, tables.d + self.l])
        if self.kind == "T":
            t = self._tril_index(tables)
            return eta[:, 2 * tables.d + t]
        Sigma = mcd.eta_to_covariance(eta, tables).Sigma
        if self.kind == "sigma":
            return Sigma[:, self.l, self.m]
        return Sigma[:, self.l, self.m] / np.sqrt(
            Sigma[:, self.l, self.l] * Sigma[:, self.m, self.m])

    def eta_jacobian(self, eta: np.ndarray, tables: mcd.McdTables) -> np.ndarray:
        n, q = eta.shape
        if self.kind == "sigma":
            return mcd.sigma_jacobian(eta, tables, self.l, self.m)
        if self.kind == "corr":
            return mcd.corr_jacobian(eta, tables, self.l, self.m)
        J = np.zeros((n, q))
        if self.kind == "D2":
            J[:, tables.d + self.l] = np.exp(eta[:, tables.d + self.l])
        else:
            J[:, 2 * tables.d + self._tril_index(tables)] = 1.0
        return J

    def _tril_index(self, tables: mcd.McdTables) -> int:
        hits = np.where((tables.rows == self.l) & (tables.cols == self.m))[0]
        if hits.size != 1:
            raise AleError(f"({self.l + 1}, {self.m + 1}) is not a strict "
                           "lower-triangle position of T")
        return int(hits[0])


class AleModel:
    """Standard prediction handle over a fitted assembly."""

    def __init__(self, assembly: Assembly, beta: np.ndarray,
                 offsets: np.ndarray | None = None,
                 v_beta: np.ndarray | None = None):
        self.assembly = assembly
        self.beta = np.asarray(beta, dtype=float)
        self.offsets = offsets
        self.v_beta = v_beta
        self.tables = assembly.tables
        self.beta_slices = assembly.beta_slices
        self.p = assembly.p

    def eta(self, dataset: Dataset) -> np.ndarray:
        return self.assembly.predict_eta(self.beta, dataset, offsets=self.offsets)

    def design(self, dataset: Dataset, predictor: int) -> np.ndarray:
        return self.assembly.design_for(predictor, dataset)


@dataclass
class AleCurve:
    covariate: str
    output: OutputSpec
    edges: np.ndarray            # (B + 1,)
    counts: np.ndarray           # (B,)
    uncentred: np.ndarray        # (B + 1,), first entry exactly 0
    centred: np.ndarray          # (B + 1,)
    variances: np.ndarray | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["edge", "uncentred", "centred", "variance"])
            var = self.variances if self.variances is not None \
                else np.full(self.edges.shape[0], np.nan)
            for e, u, c, v in zip(self.edges, self.uncentred, self.centred, var):
                writer.writerow([f"{e:.17g}", f"{u:.17g}", f"{c:.17g}", f"{v:.17g}"])


def _bin_setup(dataset: Dataset, covariate: str, n_bins: int):
    if n_bins < 2:
        raise AleError(f"need at least 2 bins, got {n_bins}")
    col = dataset.column(covariate)
    if col.role != "continuous":
        raise AleError(f"ALEs of categorical covariate {covariate!r} are unsupported")
    x = col.values
    edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1)))
    if edges.shape[0] < 2:
        raise AleError(f"covariate {covariate!r} is constant")
    # assign rows to bins [e_0, e_1), ..., [e_{B-1}, e_B]
    bins = np.clip(np.searchsorted(edges, x, side="right") - 1,
                   0, edges.shape[0] - 2)
    counts = np.bincount(bins, minlength=edges.shape[0] - 1)
    # merge empty bins leftward by dropping their upper edge
    while np.any(counts == 0):
        v = int(np.argmax(counts == 0))
        edges = np.delete(edges, v + 1 if v + 1 < edges.shape[0] - 1 else v)
        bins = np.clip(np.searchsorted(edges, x, side="right") - 1,
                       0, edges.shape[0] - 2)
        counts = np.bincount(bins, minlength=edges.shape[0] - 1)
    return x, edges, bins, counts


def ale_estimate(model, dataset: Dataset, covariate: str, output: OutputSpec,
                 n_bins: int = 40) -> AleCurve:
    """First-order accumulated local effect of a covariate on one output."""
    x, edges, bins, counts = _bin_setup(dataset, covariate, n_bins)
    n_edges = edges.shape[0]
    omega = np.empty((n_edges, dataset.n))
    for v, z in enumerate(edges):
        shifted = dataset.with_column(covariate, np.full(dataset.n, z))
        omega[v] = output.values(model.eta(shifted), model.tables)
    increments = np.zeros(n_edges - 1)
    for v in range(n_edges - 1):
        sel = bins == v
        increments[v] = np.mean(omega[v + 1, sel] - omega[v, sel])
    uncentred = np.concatenate([[0.0], np.cumsum(increments)])
    weighted_mean = float(np.sum(counts * uncentred[1:]) / dataset.n)
    return AleCurve(covariate, output, edges, counts, uncentred,
                    uncentred - weighted_mean)


def ale_variance(model, curve: AleCurve, dataset: Dataset) -> np.ndarray:
    """Delta-method pointwise variances of the uncentred curve."""
    if getattr(model, "v_beta", None) is None:
        raise AleError("model carries no posterior covariance")
    x = dataset.column(curve.covariate).values
    edges = curve.edges
    bins = np.clip(np.searchsorted(edges, x, side="right") - 1,
                   0, edges.shape[0] - 2)
    active = [j for j, sl in enumerate(model.beta_slices) if sl.stop > sl.start]

    def full_jacobian(z):
        shifted = dataset.with_column(curve.covariate, np.full(dataset.n, z))
        eta = model.eta(shifted)
        d_eta = curve.output.eta_jacobian(eta, model.tables)
        J = np.zeros((dataset.n, model.p))
        for a in active:
            X = model.design(shifted, a)
            J[:, model.beta_slices[a]] = d_eta[:, a][:, None] * X
        return J

    grad = np.zeros(model.p)
    variances = np.zeros(edges.shape[0])
    J_prev = full_jacobian(edges[0])
    for v in range(edges.shape[0] - 1):
        J_next = full_jacobian(edges[v + 1])
        sel = bins == v
        grad = grad + np.mean(J_next[sel] - J_prev[sel], axis=0)
        variances[v + 1] = float(grad @ model.v_beta @ grad)
        J_prev = J_next
    curve.variances = variances
    return variances
