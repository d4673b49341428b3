"""Probabilistic forecast verification for Gaussian joint forecasts.

Scores follow the evaluation-table conventions of the net-demand study:
negative joint and independent log scores, marginal CRPS in Gaussian
closed form, pinball losses at extreme quantiles, and the p-variogram
score with unit weights and Monte-Carlo pair expectations.  Joint
forecasts can be pushed through linear maps (macro-region aggregation,
boundary differences) exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm


class ScoreError(ValueError):
    pass


SCORE_COLUMNS = ("Log", "Log Ind", "CRPS", "Pin 001", "Pin 999", "Var 0.5", "Var 1.0")


@dataclass
class ForecastDistribution:
    """Per-observation Gaussian forecasts; covariances symmetrised on load."""

    mu: np.ndarray                        # (n, d)
    Sigma: np.ndarray                     # (n, d, d)
    model_id: str = ""
    train_end: str = ""
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        Sigma = np.asarray(self.Sigma, dtype=float)
        if Sigma.ndim == 2:
            Sigma = Sigma[None]
        asym = np.max(np.abs(Sigma - Sigma.transpose(0, 2, 1)))
        scale = max(np.max(np.abs(Sigma)), 1e-300)
        if asym > 1e-8 * scale:
            raise ScoreError(f"covariances are asymmetric beyond tolerance ({asym:g})")
        self.Sigma = 0.5 * (Sigma + Sigma.transpose(0, 2, 1))
        eig_min = float(np.min(np.linalg.eigvalsh(self.Sigma)))
        if eig_min < -1e-10 * scale:
            raise ScoreError(f"covariance has eigenvalue {eig_min:g} below tolerance")

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    def marginal_sd(self) -> np.ndarray:
        return np.sqrt(np.einsum("nii->ni", self.Sigma))


def _check_obs(forecast: ForecastDistribution, y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape != forecast.mu.shape:
        raise ScoreError(f"observations {y.shape} do not match forecast "
                         f"{forecast.mu.shape}")
    return y


def gaussian_log_score(forecast: ForecastDistribution, y) -> tuple[float, float]:
    """(total, independent) negative log-likelihood sums over observations."""
    y = _check_obs(forecast, y)
    r = y - forecast.mu
    try:
        C = np.linalg.cholesky(forecast.Sigma)
    except np.linalg.LinAlgError:
        raise ScoreError("forecast covariance is not positive definite "
                         "(rank-deficient transform?)") from None
    # an exactly singular matrix factorises with a pivot of order
    # sqrt(eps)*scale, so the cutoff sits well above that
    pivots = np.einsum("nii->ni", C)
    scale = np.sqrt(np.max(np.einsum("nii->ni", forecast.Sigma), initial=1e-300))
    if np.any(pivots <= 1e-7 * scale):
        raise ScoreError("forecast covariance is not positive definite "
                         "(rank-deficient transform?)")
    z = np.linalg.solve(C, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.einsum("nii->ni", C)), axis=1)
    d = forecast.d
    per_obs = 0.5 * (d * np.log(2 * np.pi) + logdet + np.sum(z * z, axis=1))
    sd = forecast.marginal_sd()
    per_marg = 0.5 * (np.log(2 * np.pi) + 2 * np.log(sd) + (r / sd) ** 2)
    return float(np.sum(per_obs)), float(np.sum(per_marg))


def crps_gaussian(y, mu, sigma) -> np.ndarray:
    """Closed-form CRPS of a Gaussian forecast, elementwise."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ScoreError("non-positive forecast standard deviation")
    z = (np.asarray(y) - np.asarray(mu)) / sigma
    return sigma * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z)
                    - 1.0 / np.sqrt(np.pi))


def pinball_gaussian(y, mu, sigma, tau) -> np.ndarray:
    """Pinball loss of the Gaussian tau-quantile, elementwise."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ScoreError("non-positive forecast standard deviation")
    q = np.asarray(mu) + sigma * norm.ppf(tau)
    diff = np.asarray(y) - q
    return np.where(diff >= 0, tau * diff, (tau - 1.0) * diff)


@dataclass
class MarginalScores:
    crps: np.ndarray                      # (n, d)
    pinball: dict[float, np.ndarray]      # tau -> (n, d)

    def region_sum_of_means(self, which: str, tau: float | None = None) -> float:
        """Sum over regions of per-period means, the table convention."""
        arr = self.crps if which == "crps" else self.pinball[tau]
        return float(np.sum(np.mean(arr, axis=0)))

    def total(self, which: str, tau: float | None = None) -> float:
        arr = self.crps if which == "crps" else self.pinball[tau]
        return float(np.sum(arr))


def marginal_scores(forecast: ForecastDistribution, y,
                    quantile_levels=(0.001, 0.999)) -> MarginalScores:
    y = _check_obs(forecast, y)
    sd = forecast.marginal_sd()
    crps = crps_gaussian(y, forecast.mu, sd)
    pin = {tau: pinball_gaussian(y, forecast.mu, sd, tau) for tau in quantile_levels}
    return MarginalScores(crps, pin)


def _psd_factor(Sigma: np.ndarray) -> np.ndarray:
    """Factor F with F F' = Sigma, valid for singular matrices too."""
    w, V = np.linalg.eigh(Sigma)
    return V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def variogram_score(forecast: ForecastDistribution, y, p: float,
                    n_samples: int = 500, seed: int = 0) -> float:
    """p-variogram score, unit weights, unordered pairs counted once."""
    if p <= 0:
        raise ScoreError("variogram order p must be positive")
    if n_samples < 1:
        raise ScoreError("variogram needs at least one sample")
    y = _check_obs(forecast, y)
    n, d = y.shape
    if d < 2:
        return 0.0
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    F = _psd_factor(forecast.Sigma)
    eps = rng.standard_normal((n_samples, n, d))
    draws = forecast.mu[None] + np.einsum("nij,snj->sni", F, eps)
    ju, ku = np.triu_indices(d, k=1)
    obs_diff = np.abs(y[:, ju] - y[:, ku]) ** p
    exp_diff = np.mean(np.abs(draws[:, :, ju] - draws[:, :, ku]) ** p, axis=0)
    return float(np.sum((obs_diff - exp_diff) ** 2))


def transform_forecast(forecast: ForecastDistribution, A,
                       require_full_rank: bool = False) -> ForecastDistribution:
    """Linear map of a Gaussian forecast: (A mu, A Sigma A')."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[1] != forecast.d:
        raise ScoreError(f"transform has {A.shape[1]} columns, forecast d={forecast.d}")
    if require_full_rank and np.linalg.matrix_rank(A) < A.shape[0]:
        raise ScoreError("transform matrix is not of full row rank, joint log "
                         "scores of the transformed forecast are undefined")
    mu = forecast.mu @ A.T
    Sigma = np.einsum("ij,njk,lk->nil", A, forecast.Sigma, A)
    return ForecastDistribution(mu, Sigma, forecast.model_id, forecast.train_end,
                                forecast.timestamps)


def block_bootstrap_diff(loss_a, loss_b, block_len: int = 336,
                         n_boot: int = 2000, seed: int = 0) -> dict:
    """Bootstrap the mean difference of two aligned loss series by blocks."""
    a = np.asarray(loss_a, dtype=float)
    b = np.asarray(loss_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ScoreError("loss series must be equal-length 1-d arrays")
    n = a.shape[0]
    if block_len > n:
        raise ScoreError(f"block length {block_len} exceeds series length {n}")
    diff = a - b
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    n_blocks = int(np.ceil(n / block_len))
    starts = rng.integers(0, n - block_len + 1, size=(n_boot, n_blocks))
    idx = (starts[..., None] + np.arange(block_len)).reshape(n_boot, -1)[:, :n]
    means = diff[idx].mean(axis=1)
    qs = np.quantile(means, [0.025, 0.25, 0.5, 0.75, 0.975])
    return {
        "mean": float(means.mean()),
        "quantiles": {"2.5%": float(qs[0]), "25%": float(qs[1]), "50%": float(qs[2]),
                      "75%": float(qs[3]), "97.5%": float(qs[4])},
        "samples": means,
        "block_len": block_len,
        "seed": seed,
    }


@dataclass
class ScoreTable:
    """Per-model score rows in the seven-column evaluation layout."""

    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    totals: dict[str, dict[str, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, model: str, forecast: ForecastDistribution, y,
            n_samples: int = 500, seed: int = 0) -> dict[str, float]:
        y = _check_obs(forecast, y)
        n = forecast.n
        log_total, log_ind = gaussian_log_score(forecast, y)
        marg = marginal_scores(forecast, y)
        var5 = variogram_score(forecast, y, 0.5, n_samples, seed)
        var1 = variogram_score(forecast, y, 1.0, n_samples, seed + 1)
        row = {
            "Log": log_total / n,
            "Log Ind": log_ind / n,
            "CRPS": marg.region_sum_of_means("crps"),
            "Pin 001": marg.region_sum_of_means("pin", 0.001),
            "Pin 999": marg.region_sum_of_means("pin", 0.999),
            "Var 0.5": var5 / n,
            "Var 1.0": var1 / n,
        }
        self.rows[model] = row
        self.totals[model] = {
            "Log": log_total, "Log Ind": log_ind,
            "CRPS": marg.total("crps"),
            "Pin 001": marg.total("pin", 0.001), "Pin 999": marg.total("pin", 0.999),
            "Var 0.5": var5, "Var 1.0": var1,
        }
        self.meta.setdefault("variogram", {"weights": "unit", "pairs": "unordered",
                                           "n_samples": n_samples, "seed": seed})
        self.meta["convention"] = {
            "Log": "per-period mean", "CRPS/Pin": "sum over regions of per-period means",
            "Var": "per-period mean", "totals": "sums over periods"}
        return row

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("Model," + ",".join(SCORE_COLUMNS) + "\n")
            for model, row in self.rows.items():
                fh.write(model + "," + ",".join(f"{row[c]:.17g}" for c in SCORE_COLUMNS) + "\n")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"rows": self.rows, "totals": self.totals, "meta": self.meta},
                      fh, indent=1, sort_keys=True)
