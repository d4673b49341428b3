"""Effect ranking by component-wise gradient boosting.

Each iteration regresses the likelihood gradient of every open covariance
predictor on every candidate design block (penalised least squares with
ridge scales pre-calibrated to a common effective-degrees-of-freedom
target), commits the single effect-predictor pair with the largest
log-likelihood gain, and accumulates per-pair cumulative gains.  The
stopping iteration and the number of effects to keep are chosen on
validation data.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import fit, formulas, mcd
from .basis import EffectSpec, ModelSpec, build_effect, calibrate_edf, effective_dof, assemble_design
from .data import Dataset

log = logging.getLogger(__name__)


class SelectError(RuntimeError):
    pass


@dataclass
class BoostConfig:
    max_iter: int = 3000                 # M
    learning_rate: float = 0.1          # nu
    target_edf: float = 4.0
    mode: str = "full"
    candidates: dict[int, list[EffectSpec]] | None = None   # 1-based predictor map

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise SelectError(f"learning rate {self.learning_rate} outside (0, 1]")
        if self.mode not in formulas.RESTRICTION_MODES:
            raise SelectError(f"unknown restriction mode {self.mode!r}")


@dataclass
class Candidate:
    predictor: int                       # 1-based
    spec: EffectSpec
    block: object                        # EffectBlock
    zeta: float
    edf: float
    factor: object = field(repr=False, default=None)   # cho_factor of X'X + zeta S

    @property
    def label(self) -> str:
        return self.spec.label()


@dataclass
class BoostRecord:
    iteration: int
    predictor: int                       # 1-based
    effect: str                          # candidate label
    delta: float
    coef: np.ndarray                     # fitted projection coefficients, nu included


@dataclass
class RankedEffects:
    trace: list[BoostRecord]
    candidates: dict[int, list[Candidate]]
    config: BoostConfig
    early_stop: int | None = None        # iteration at which no gain was available
    m_star: int | None = None

    def ranking(self, upto: int | None = None) -> list[tuple[int, EffectSpec, float]]:
        """(predictor, effect, cumulative gain), sorted by gain descending."""
        upto = len(self.trace) if upto is None else upto
        gains: dict[tuple[int, str], float] = {}
        for rec in self.trace[:upto]:
            gains[(rec.predictor, rec.effect)] = \
                gains.get((rec.predictor, rec.effect), 0.0) + rec.delta
        by_label = {(j, c.label): c.spec for j, cs in self.candidates.items() for c in cs}
        items = sorted(gains.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
        return [(j, by_label[(j, lab)], gain) for (j, lab), gain in items]

    def metadata(self) -> dict:
        return {
            "learning_rate": self.config.learning_rate,
            "target_edf": self.config.target_edf,
            "mode": self.config.mode,
            "m": self.config.max_iter,
            "m_star": self.m_star,
            "early_stop": self.early_stop,
            "candidates": {
                str(j): [{"effect": c.label, "zeta": c.zeta, "edf": c.edf}
                         for c in cands]
                for j, cands in self.candidates.items()},
        }

    def write_trace_csv(self, path) -> None:
        cumulative: dict[tuple[int, str], float] = {}
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "predictor", "effect", "delta", "cumulative"])
            for rec in self.trace:
                key = (rec.predictor, rec.effect)
                cumulative[key] = cumulative.get(key, 0.0) + rec.delta
                writer.writerow([rec.iteration, rec.predictor, rec.effect,
                                 f"{rec.delta:.17g}", f"{cumulative[key]:.17g}"])


def residual_offsets(residuals: np.ndarray, tables: mcd.McdTables) -> np.ndarray:
    """Fixed offsets: zero means plus the MCD of the residual covariance."""
    cov = np.cov(np.asarray(residuals, dtype=float).T).reshape(tables.d, tables.d)
    return np.concatenate([np.zeros(tables.d), mcd.covariance_to_eta(cov, tables)])


def prepare_candidates(dataset: Dataset, tables: mcd.McdTables,
                       config: BoostConfig) -> dict[int, list[Candidate]]:
    """Build, edf-calibrate and factorise every candidate design block."""
    predictors = formulas.candidate_predictors(tables, config.mode)
    out: dict[int, list[Candidate]] = {}
    cache: dict[str, Candidate] = {}
    for j in predictors:
        specs = (config.candidates or {}).get(j) if config.candidates else None
        if specs is None:
            specs = formulas.mcd_candidates(dataset, tables, j, config.mode)
        cands = []
        for spec in specs:
            key = spec.label()
            proto = cache.get(key)
            if proto is None:
                block = build_effect(spec, dataset)
                if block.penalties and block.p > config.target_edf:
                    zeta = calibrate_edf(block, config.target_edf)
                    edf = effective_dof(block.design, block.penalties[0], zeta)
                    mat = block.design.T @ block.design + zeta * block.penalties[0]
                else:
                    zeta, edf = 0.0, float(block.p)
                    mat = block.design.T @ block.design
                try:
                    factor = cho_factor(mat)
                except np.linalg.LinAlgError as exc:
                    raise SelectError(
                        f"candidate {key} has a singular projection matrix") from exc
                proto = Candidate(j, spec, block, zeta, edf, factor)
                cache[key] = proto
            cands.append(Candidate(j, proto.spec, proto.block, proto.zeta,
                                   proto.edf, proto.factor))
        out[j] = cands
    return out


class _DensityTracker:
    """Per-row density pieces allowing O(n) single-column update deltas."""

    def __init__(self, residuals: np.ndarray, eta: np.ndarray, tables: mcd.McdTables):
        self.tables = tables
        self.r = residuals
        self.eta = eta
        d = tables.d
        self.etaD = eta[:, d:2 * d].copy()
        self.e = np.exp(-self.etaD)
        T = mcd.t_matrices(eta, tables)
        self.v = np.einsum("nij,nj->ni", T, residuals)
        self.terms = self.etaD + self.e * self.v ** 2

    def loglik(self) -> float:
        d = self.tables.d
        n = self.r.shape[0]
        return float(-0.5 * self.terms.sum() - 0.5 * n * d * np.log(2 * np.pi))

    def delta(self, j: int, shift: np.ndarray) -> float:
        """Log-likelihood change from adding ``shift`` to 1-based predictor j."""
        d = self.tables.d
        if j <= d:
            raise SelectError("mean predictors are frozen during boosting")
        if j <= 2 * d:
            i = j - d - 1
            new = (self.etaD[:, i] + shift) + np.exp(-(self.etaD[:, i] + shift)) \
                * self.v[:, i] ** 2
            return float(-0.5 * np.sum(new - self.terms[:, i]))
        t = j - 2 * d - 1
        a, b = self.tables.rows[t], self.tables.cols[t]
        v_new = self.v[:, a] + shift * self.r[:, b]
        new = self.etaD[:, a] + self.e[:, a] * v_new ** 2
        return float(-0.5 * np.sum(new - self.terms[:, a]))

    def commit(self, j: int, shift: np.ndarray) -> None:
        d = self.tables.d
        self.eta[:, j - 1] += shift
        if j <= 2 * d:
            i = j - d - 1
            self.etaD[:, i] += shift
            self.e[:, i] = np.exp(-self.etaD[:, i])
        else:
            t = j - 2 * d - 1
            a, b = self.tables.rows[t], self.tables.cols[t]
            self.v[:, a] += shift * self.r[:, b]
        i = j - d - 1 if j <= 2 * d else self.tables.rows[j - 2 * d - 1]
        self.terms[:, i] = self.etaD[:, i] + self.e[:, i] * self.v[:, i] ** 2


def boost_rank(dataset: Dataset, residuals: np.ndarray, offsets: np.ndarray,
               config: BoostConfig) -> RankedEffects:
    """Run the gradient-boosting ranking on training residuals."""
    residuals = np.asarray(residuals, dtype=float)
    tables = mcd.build_index_tables(dataset.d)
    candidates = prepare_candidates(dataset, tables, config)
    eta = np.broadcast_to(np.asarray(offsets, dtype=float), (dataset.n, tables.q)).copy()
    tracker = _DensityTracker(residuals, eta, tables)
    nu = config.learning_rate
    trace: list[BoostRecord] = []
    early_stop = None

    for it in range(config.max_iter):
        grad = mcd.grad_eta(residuals, tracker.eta, tables)
        best = None
        for j, cands in candidates.items():
            u = grad[:, j - 1]
            for cand in cands:
                coef = cho_solve(cand.factor, cand.block.design.T @ u)
                shift = nu * (cand.block.design @ coef)
                delta = tracker.delta(j, shift)
                if best is None or delta > best[0]:
                    best = (delta, j, cand, nu * coef, shift)
        delta, j, cand, coef, shift = best
        if delta <= 0:
            early_stop = it
            break
        tracker.commit(j, shift)
        trace.append(BoostRecord(it, j, cand.label, delta, coef))
    return RankedEffects(trace, candidates, config, early_stop=early_stop)


def replay_validation(ranked: RankedEffects, dataset_valid: Dataset,
                      residuals_valid: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Validation log-likelihood after 0, 1, ..., len(trace) commits."""
    residuals_valid = np.asarray(residuals_valid, dtype=float)
    tables = mcd.build_index_tables(dataset_valid.d)
    eta = np.broadcast_to(np.asarray(offsets, dtype=float),
                          (dataset_valid.n, tables.q)).copy()
    designs = {}
    for j, cands in ranked.candidates.items():
        for cand in cands:
            designs.setdefault(cand.label, cand.block.predict_design(dataset_valid))
    lls = [float(np.sum(mcd.log_density(residuals_valid, eta, tables)))]
    for rec in ranked.trace:
        eta[:, rec.predictor - 1] += designs[rec.effect] @ rec.coef
        lls.append(float(np.sum(mcd.log_density(residuals_valid, eta, tables))))
    return np.asarray(lls)


def choose_m_star(ranked: RankedEffects, dataset_valid: Dataset,
                  residuals_valid: np.ndarray, offsets: np.ndarray) -> int:
    """Stopping iteration maximising validation log-likelihood (first argmax)."""
    lls = replay_validation(ranked, dataset_valid, residuals_valid, offsets)
    m_star = int(np.argmax(lls))
    ranked.m_star = m_star
    return m_star


def spec_for_top_pairs(ranked: RankedEffects, d: int, n_effects: int) -> ModelSpec:
    """Covariance-model spec with intercepts everywhere plus the top pairs."""
    q = d + d * (d + 1) // 2
    spec = ModelSpec(d, {j: [EffectSpec("intercept")] for j in range(d + 1, q + 1)})
    for j, eff, _gain in ranked.ranking(upto=ranked.m_star)[:n_effects]:
        spec = spec.with_effect(j, eff)
    return spec


def choose_l(ranked: RankedEffects, dataset_train: Dataset, residuals_train,
             dataset_valid: Dataset, residuals_valid, grid,
             opts: fit.FitOptions | None = None) -> tuple[int, ModelSpec]:
    """Pick the effect count maximising validation log-likelihood over a grid."""
    residuals_train = np.asarray(residuals_train, dtype=float)
    residuals_valid = np.asarray(residuals_valid, dtype=float)
    d = dataset_train.d
    tables = mcd.build_index_tables(d)
    offsets = residual_offsets(residuals_train, tables)
    available = len(ranked.ranking(upto=ranked.m_star))
    best = None
    for n_effects in grid:
        if n_effects > available:
            break
        spec = spec_for_top_pairs(ranked, d, n_effects)
        try:
            asm = assemble_design(spec, dataset_train, offsets=offsets)
            state = fit.fit_model(asm, residuals_train, opts)
            eta_valid = asm.predict_eta(state.beta, dataset_valid, offsets=offsets)
            ll = float(np.sum(mcd.log_density(residuals_valid, eta_valid, tables)))
        except (fit.FitError, np.linalg.LinAlgError) as exc:
            log.warning("grid point L=%d skipped: %s", n_effects, exc)
            continue
        if best is None or ll > best[0]:
            best = (ll, n_effects, spec)
    if best is None:
        raise SelectError("every grid point failed to fit")
    return best[1], best[2]


def save_ranking(ranked: RankedEffects, path) -> None:
    payload = {
        "metadata": ranked.metadata(),
        "ranking": [{"predictor": j, "effect": spec.to_dict(), "gain": gain}
                    for j, spec, gain in ranked.ranking(upto=ranked.m_star)],
        "trace": [{"iteration": r.iteration, "predictor": r.predictor,
                   "effect": r.effect, "delta": r.delta,
                   "coef": [float(c) for c in r.coef]} for r in ranked.trace],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
