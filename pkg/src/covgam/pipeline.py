"""Two-stage estimation pipeline and rolling-origin forecasting.

Stage one fits each region's mean as an independent univariate Gaussian
model (the d=1 case of the general machinery, with an intercept-only
log-variance).  Stage two fits the covariance predictors to the stage-one
residuals, with means frozen at zero and the MCD of the empirical
residual covariance as fixed offsets.  A joint mode fitting all
predictors at once is available for small models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fit, formulas, mcd
from .basis import Assembly, EffectSpec, ModelSpec, assemble_design
from .data import Dataset, RollingWindows
from .score import ForecastDistribution
from .select import residual_offsets


def mean_spec(dataset: Dataset, region: int,
              effects: list[EffectSpec] | None = None) -> ModelSpec:
    """d=1 spec: additive mean, intercept-only log-variance."""
    if effects is None:
        effects = formulas.mean_effects(dataset, region)
    return ModelSpec(1, {1: list(effects), 2: [EffectSpec("intercept")]})


@dataclass
class MeanStage:
    states: list[fit.FitState]            # one d=1 state per region

    def predict_means(self, dataset: Dataset) -> np.ndarray:
        cols = []
        for g, state in enumerate(self.states, start=1):
            eta = state.assembly.predict_eta(state.beta, dataset.region_view(g))
            cols.append(eta[:, 0])
        return np.column_stack(cols)

    def residuals(self, dataset: Dataset) -> np.ndarray:
        return dataset.responses - self.predict_means(dataset)


def fit_mean_models(dataset: Dataset, opts: fit.FitOptions | None = None,
                    effects: list[list[EffectSpec]] | None = None) -> MeanStage:
    """Fit one univariate Gaussian additive model per region."""
    states = []
    for g in range(1, dataset.d + 1):
        view = dataset.region_view(g)
        spec = mean_spec(dataset, g, effects[g - 1] if effects else None)
        asm = assemble_design(spec, view)
        states.append(fit.fit_model(asm, view.responses, opts))
    return MeanStage(states)


@dataclass
class CovarianceStage:
    state: fit.FitState
    offsets: np.ndarray                   # length-q fixed offsets

    def predict_eta(self, dataset: Dataset) -> np.ndarray:
        return self.state.assembly.predict_eta(self.state.beta, dataset,
                                               offsets=self.offsets)


def fit_covariance_model(spec: ModelSpec, dataset: Dataset, residuals: np.ndarray,
                         opts: fit.FitOptions | None = None,
                         offsets: np.ndarray | None = None) -> CovarianceStage:
    """Fit the MCD predictors to residual vectors, means frozen at zero."""
    residuals = np.asarray(residuals, dtype=float)
    tables = mcd.build_index_tables(dataset.d)
    if offsets is None:
        offsets = residual_offsets(residuals, tables)
    if any(j <= spec.d for j in spec.effects):
        raise fit.FitError("covariance stage must not model mean predictors")
    asm = assemble_design(spec, dataset, offsets=offsets)
    state = fit.fit_model(asm, residuals, opts)
    return CovarianceStage(state, offsets)


def joint_spec(dataset: Dataset, cov_spec: ModelSpec,
               mean_effects: list[list[EffectSpec]] | None = None) -> ModelSpec:
    """All-predictors-at-once spec for small d: means plus covariance effects."""
    d = dataset.d
    effects = {}
    for g in range(1, d + 1):
        effects[g] = list(mean_effects[g - 1]) if mean_effects else \
            formulas.mean_effects(dataset, g)
    for j in range(d + 1, cov_spec.q + 1):
        effects[j] = list(cov_spec.effects.get(j, [EffectSpec("intercept")]))
    return ModelSpec(d, effects)


def fit_joint_model(spec: ModelSpec, dataset: Dataset,
                    opts: fit.FitOptions | None = None) -> fit.FitState:
    asm = assemble_design(spec, dataset)
    return fit.fit_model(asm, dataset.responses, opts)


def gaussian_forecast(mean_stage: MeanStage, cov_stage: CovarianceStage,
                      dataset: Dataset, model_id: str = "",
                      train_end: str = "") -> ForecastDistribution:
    mu = mean_stage.predict_means(dataset)
    eta = cov_stage.predict_eta(dataset)
    tables = cov_stage.state.assembly.tables
    Sigma = mcd.eta_to_covariance(eta, tables).Sigma
    return ForecastDistribution(mu, Sigma, model_id, train_end, dataset.timestamps)


def rolling_forecast(dataset: Dataset, windows: RollingWindows, cov_spec: ModelSpec,
                     opts: fit.FitOptions | None = None,
                     mean_effects: list[list[EffectSpec]] | None = None,
                     model_id: str = "") -> list[ForecastDistribution]:
    """Refit both stages on each expanding window and forecast its test month."""
    out = []
    for w in windows.windows:
        train = dataset.subset(w.train_mask(dataset.timestamps))
        test = dataset.subset(w.test_mask(dataset.timestamps))
        if test.n == 0:
            continue
        mean_stage = fit_mean_models(train, opts, mean_effects)
        resid = mean_stage.residuals(train)
        cov_stage = fit_covariance_model(cov_spec, train, resid, opts)
        out.append(gaussian_forecast(mean_stage, cov_stage, test, model_id,
                                     train_end=str(w.train_end)))
    return out
