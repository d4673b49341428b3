"""Comparison model: independent Gaussian location-scale margins plus a
static Gaussian copula estimated from probability-integral-transformed
residuals.

Margins are d=1 models of the general machinery with the mean frozen at
the first-stage fit and an additive log-variance.  Because the margins
are Gaussian, composing them with the Gaussian copula collapses to an
explicit multivariate normal with covariance S rho S, S the diagonal of
marginal standard deviations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import fit, mcd
from .basis import EffectSpec, ModelSpec, assemble_design
from .data import Dataset
from .pipeline import MeanStage
from .score import ForecastDistribution
from .select import RankedEffects

log = logging.getLogger(__name__)

PIT_CLAMP = 1e-12
RHO_EIGEN_FLOOR = 1e-8


@dataclass
class MarginModel:
    state: fit.FitState
    offsets: np.ndarray

    def sigma(self, dataset: Dataset) -> np.ndarray:
        eta = self.state.assembly.predict_eta(self.state.beta, dataset,
                                              offsets=self.offsets)
        return np.exp(0.5 * eta[:, 1])


@dataclass
class CopulaModel:
    margins: list[MarginModel]
    rho: np.ndarray
    clamp_count: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return len(self.margins)


def marginal_offsets(residuals: np.ndarray, tables: mcd.McdTables) -> np.ndarray:
    """T-equals-zero offsets: D entries carry marginal log-variances."""
    residuals = np.asarray(residuals, dtype=float)
    off = np.zeros(tables.q)
    off[tables.d:2 * tables.d] = np.log(np.var(residuals, axis=0))
    return off


def scale_effects_from_ranking(ranked: RankedEffects, d: int,
                               n_effects: int) -> list[list[EffectSpec]]:
    """Per-region scale effects: the top diagonal pairs of a T=0 ranking."""
    out: list[list[EffectSpec]] = [[EffectSpec("intercept")] for _ in range(d)]
    kept = 0
    for j, spec, _gain in ranked.ranking(upto=ranked.m_star):
        if kept >= n_effects:
            break
        if not d < j <= 2 * d:
            raise ValueError(f"ranking contains non-diagonal predictor {j}")
        out[j - d - 1].append(spec)
        kept += 1
    return out


def fit_copula_baseline(dataset: Dataset, mean_stage: MeanStage,
                        scale_effects: list[list[EffectSpec]],
                        opts: fit.FitOptions | None = None) -> CopulaModel:
    """Fit the margins, transform residuals, estimate the copula correlation."""
    d = dataset.d
    if len(scale_effects) != d:
        raise ValueError(f"need scale effects for all {d} regions")
    residuals = mean_stage.residuals(dataset)
    margins: list[MarginModel] = []
    z = np.empty_like(residuals)
    clamp_count = 0
    tables1 = mcd.build_index_tables(1)
    for g in range(1, d + 1):
        view = dataset.region_view(g)
        r = residuals[:, g - 1:g]
        offsets = marginal_offsets(r, tables1)
        spec = ModelSpec(1, {2: list(scale_effects[g - 1])})
        asm = assemble_design(spec, view, offsets=offsets)
        state = fit.fit_model(asm, r, opts)
        margin = MarginModel(state, offsets)
        margins.append(margin)
        u = norm.cdf(residuals[:, g - 1] / margin.sigma(dataset))
        clipped = np.clip(u, PIT_CLAMP, 1.0 - PIT_CLAMP)
        clamp_count += int(np.sum(clipped != u))
        z[:, g - 1] = norm.ppf(clipped)
    if clamp_count:
        log.warning("clamped %d PIT values to (%g, 1-%g)",
                    clamp_count, PIT_CLAMP, PIT_CLAMP)

    rho = np.corrcoef(z.T).reshape(d, d)
    eigval, eigvec = np.linalg.eigh(rho)
    if eigval.min() < RHO_EIGEN_FLOOR:
        eigval = np.clip(eigval, RHO_EIGEN_FLOOR, None)
        rho = eigvec @ np.diag(eigval) @ eigvec.T
        scale = np.sqrt(np.diag(rho))
        rho = rho / np.outer(scale, scale)
    rho = 0.5 * (rho + rho.T)
    np.fill_diagonal(rho, 1.0)
    return CopulaModel(margins, rho, clamp_count,
                       meta={"pit_clamp": PIT_CLAMP, "eigen_floor": RHO_EIGEN_FLOOR})


def copula_forecast(model: CopulaModel, mean_stage: MeanStage,
                    dataset: Dataset, model_id: str = "gaulss+cop",
                    train_end: str = "") -> ForecastDistribution:
    """Exact Gaussian forecast: mean from the frozen margins, Sigma = S rho S."""
    mu = mean_stage.predict_means(dataset)
    sd = np.column_stack([m.sigma(dataset) for m in model.margins])
    Sigma = sd[:, :, None] * model.rho[None] * sd[:, None, :]
    return ForecastDistribution(mu, Sigma, model_id, train_end, dataset.timestamps)
