"""Penalised maximum a posteriori fitting with Laplace-approximate
marginal-likelihood smoothing-parameter selection.

Two nested iterations: an inner Newton ascent on the penalised
log-posterior at fixed smoothing parameters, and an outer multiplicative
fixed-point update of each smoothing parameter that avoids third-order
likelihood derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mcd
from .basis import Assembly


class FitError(RuntimeError):
    pass


@dataclass
class FitOptions:
    tol_g_scale: float = 1e-7         # gradient tolerance = tol_g_scale * n
    max_newton: int = 200
    max_halvings: int = 30
    ridge_eps0: float = 1e-7          # escalated x10 on factorisation failure
    fs_max_iter: int = 50
    fs_rel_tol: float = 1e-3
    lambda_min: float = 1e-7
    lambda_max: float = 1e7

    def tol_g(self, n: int) -> float:
        return self.tol_g_scale * n


@dataclass
class FitState:
    assembly: Assembly
    beta: np.ndarray
    lambdas: np.ndarray
    neg_hessian: np.ndarray
    laml: float
    grad_max: float
    converged: bool
    log: list = field(default_factory=list)
    _v_beta: np.ndarray | None = field(default=None, repr=False)

    @property
    def v_beta(self) -> np.ndarray:
        if self._v_beta is None:
            self._v_beta = posterior_covariance(self)
        return self._v_beta


def sum_penalty(assembly: Assembly, lambdas: np.ndarray) -> np.ndarray:
    """S-tilde-lambda: the zero-padded weighted sum of penalty blocks."""
    S = np.zeros((assembly.p, assembly.p))
    for lam, pen in zip(lambdas, assembly.penalties):
        S[pen.rows, pen.rows] += lam * pen.S
    return S


def penalty_groups(assembly: Assembly) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for u, pen in enumerate(assembly.penalties):
        groups.setdefault(pen.group, []).append(u)
    return [groups[g] for g in sorted(groups)]


def log_det_penalty_plus(assembly: Assembly, lambdas: np.ndarray) -> tuple[float, int]:
    """log of the product of positive eigenvalues of S-tilde-lambda, and its rank."""
    logdet, rank = 0.0, 0
    for members in penalty_groups(assembly):
        rows = assembly.penalties[members[0]].rows
        Sg = np.zeros((rows.stop - rows.start,) * 2)
        for u in members:
            Sg += lambdas[u] * assembly.penalties[u].S
        eig = np.linalg.eigvalsh(Sg)
        positive = eig[eig > 1e-12 * max(eig.max(), 1e-300)]
        logdet += float(np.sum(np.log(positive)))
        rank += positive.shape[0]
    return logdet, rank


def log_posterior_grad_hess(beta, lambdas, assembly: Assembly, y):
    """Penalised log-posterior value, gradient and negative Hessian."""
    eta = assembly.eta(beta)
    tables = assembly.tables
    ll = mcd.log_density(y, eta, tables)
    if not np.all(np.isfinite(ll)):
        i = int(np.argmax(~np.isfinite(np.atleast_1d(ll))))
        raise FitError(f"non-finite likelihood contribution at observation {i}")
    Slam = sum_penalty(assembly, lambdas)
    value = float(np.sum(ll)) - 0.5 * float(beta @ Slam @ beta)

    g_eta = mcd.grad_eta(y, eta, tables)
    grad = -Slam @ beta
    active = [blk for blk in assembly.predictors if blk.p]
    for blk in active:
        sl = assembly.beta_slices[blk.index]
        grad[sl] += blk.X.T @ g_eta[:, blk.index]

    H_eta = mcd.hess_eta(y, eta, tables)
    negH = Slam.copy()
    for bj in active:
        sj = assembly.beta_slices[bj.index]
        for bk in active:
            if bk.index < bj.index:
                continue
            sk = assembly.beta_slices[bk.index]
            w = H_eta[:, bj.index, bk.index]
            blockjk = (bj.X * w[:, None]).T @ bk.X
            negH[sj, sk] -= blockjk
            if bk.index != bj.index:
                negH[sk, sj] -= blockjk.T
    return value, grad, negH


def _solve_with_ridge(negH, grad, opts: FitOptions):
    """Newton direction from a (possibly ridged) Cholesky of the negative Hessian."""
    eps = 0.0
    attempt = negH
    for trial in range(30):
        try:
            C = np.linalg.cholesky(attempt)
            step = np.linalg.solve(C.T, np.linalg.solve(C, grad))
            return step, eps
        except np.linalg.LinAlgError:
            eps = opts.ridge_eps0 * 10.0 ** trial
            attempt = negH + eps * np.eye(negH.shape[0])
    raise FitError("negative Hessian could not be made positive definite")


def newton_map(beta0, lambdas, assembly: Assembly, y, opts: FitOptions):
    """Monotone step-halved Newton ascent of the penalised log-posterior."""
    beta = np.asarray(beta0, dtype=float).copy()
    n = np.asarray(y).shape[0]
    tol = opts.tol_g(n)
    log: list[dict] = []
    value, grad, negH = log_posterior_grad_hess(beta, lambdas, assembly, y)
    for it in range(opts.max_newton):
        gmax = float(np.max(np.abs(grad))) if grad.size else 0.0
        if gmax < tol or not assembly.p:
            return beta, value, grad, negH, log, True
        step, eps = _solve_with_ridge(negH, grad, opts)
        t = 1.0
        improved = False
        for _ in range(opts.max_halvings + 1):
            cand = beta + t * step
            try:
                v_new, g_new, H_new = log_posterior_grad_hess(cand, lambdas, assembly, y)
            except FitError:
                v_new = -np.inf
            if np.isfinite(v_new) and v_new >= value:
                improved = True
                break
            t *= 0.5
        log.append({"iter": it, "value": value, "grad_max": gmax,
                    "step": t, "ridge": eps})
        if not improved:
            # no ascent direction left at floating-point resolution
            return beta, value, grad, negH, log, gmax < 10 * tol
        beta, value, grad, negH = cand, v_new, g_new, H_new
    gmax = float(np.max(np.abs(grad)))
    if gmax >= tol:
        raise FitError(
            f"Newton did not converge in {opts.max_newton} iterations "
            f"(final max|grad| = {gmax:.3e}, tolerance {tol:.3e})")
    return beta, value, grad, negH, log, True


def laml_value(value, lambdas, assembly: Assembly, negH) -> float:
    """LAML: penalised log-posterior at the mode plus the Laplace correction."""
    logdet_s, rank_s = log_det_penalty_plus(assembly, lambdas)
    m_p = assembly.p - rank_s
    try:
        C = np.linalg.cholesky(negH)
    except np.linalg.LinAlgError:
        raise FitError("negative Hessian at the mode is not positive definite") from None
    logdet_h = 2.0 * float(np.sum(np.log(np.diag(C))))
    return value + 0.5 * logdet_s - 0.5 * logdet_h + 0.5 * m_p * np.log(2.0 * np.pi)


def laml_at(lambdas, assembly: Assembly, y, opts: FitOptions | None = None,
            beta0=None) -> float:
    """Fit at fixed smoothing parameters and return the LAML criterion."""
    opts = opts or FitOptions()
    if beta0 is None:
        beta0 = default_start(assembly, y)
    beta, value, _, negH, _, _ = newton_map(beta0, lambdas, assembly, y, opts)
    negH = _ensure_pd(negH, opts)
    return laml_value(value, np.asarray(lambdas, dtype=float), assembly, negH)


def _ensure_pd(negH, opts: FitOptions):
    eps = 0.0
    for trial in range(30):
        try:
            np.linalg.cholesky(negH + eps * np.eye(negH.shape[0]))
            return negH + eps * np.eye(negH.shape[0]) if eps else negH
        except np.linalg.LinAlgError:
            eps = opts.ridge_eps0 * 10.0 ** trial
    raise FitError("Hessian correction failed")


def fs_update(lambdas, beta, negH, assembly: Assembly, opts: FitOptions) -> np.ndarray:
    """One generalized Fellner-Schall update of every smoothing parameter."""
    lambdas = np.asarray(lambdas, dtype=float)
    new = lambdas.copy()
    Hinv = np.linalg.inv(_ensure_pd(negH, opts))
    for members in penalty_groups(assembly):
        rows = assembly.penalties[members[0]].rows
        Sg = np.zeros((rows.stop - rows.start,) * 2)
        for u in members:
            Sg += lambdas[u] * assembly.penalties[u].S
        eigval, eigvec = np.linalg.eigh(Sg)
        keep = eigval > 1e-12 * max(eigval.max(), 1e-300)
        pinv = (eigvec[:, keep] / eigval[keep]) @ eigvec[:, keep].T
        Hinv_block = Hinv[rows, rows]
        b = beta[rows]
        for u in members:
            Su = assembly.penalties[u].S
            num = float(np.trace(pinv @ Su)) - float(np.trace(Hinv_block @ Su))
            den = float(b @ Su @ b)
            if den < 1e-30:
                new[u] = opts.lambda_max          # effect sits in the penalty null space
                continue
            if num <= 0:
                new[u] = max(lambdas[u] * 1e-2, opts.lambda_min)
                continue
            new[u] = float(np.clip(lambdas[u] * num / den,
                                   opts.lambda_min, opts.lambda_max))
    return new


def default_start(assembly: Assembly, y) -> np.ndarray:
    """Zeros, except D-predictor intercepts taken from the sample covariance."""
    beta = np.zeros(assembly.p)
    d = assembly.tables.d
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] > d + 1:
        cov = np.cov(y.T).reshape(d, d)
        try:
            tail = mcd.covariance_to_eta(cov, assembly.tables)
        except mcd.McdError:
            return beta
        for j in range(d, 2 * d):
            blk = assembly.predictors[j]
            for eff in blk.effects:
                if eff.spec.kind == "intercept":
                    sl = assembly.beta_slices[j]
                    beta[sl.start + eff.cols.start] = tail[j - d] - blk.offset.mean()
    return beta


def fit_model(assembly: Assembly, y, opts: FitOptions | None = None,
              beta0=None, lambdas0=None) -> FitState:
    """Alternate Newton ascent and Fellner-Schall updates to convergence."""
    opts = opts or FitOptions()
    y = np.asarray(y, dtype=float)
    if beta0 is None:
        beta0 = default_start(assembly, y)
    n_pen = len(assembly.penalties)
    lambdas = np.full(n_pen, 1.0) if lambdas0 is None else \
        np.asarray(lambdas0, dtype=float).copy()
    outer_log: list[dict] = []

    beta = np.asarray(beta0, dtype=float)
    fs_settled = n_pen == 0
    for outer in range(opts.fs_max_iter if n_pen else 1):
        beta, value, grad, negH, inner_log, ok = newton_map(
            beta, lambdas, assembly, y, opts)
        if not n_pen:
            outer_log.append({"outer": outer, "inner": len(inner_log)})
            break
        negH_pd = _ensure_pd(negH, opts)
        laml_now = laml_value(value, lambdas, assembly, negH_pd)
        new_lambdas = fs_update(lambdas, beta, negH_pd, assembly, opts)
        rel = float(np.max(np.abs(new_lambdas - lambdas) / lambdas))
        outer_log.append({"outer": outer, "inner": len(inner_log),
                          "laml": laml_now, "rel_lambda": rel,
                          "lambdas": new_lambdas.tolist()})
        lambdas = new_lambdas
        if rel < opts.fs_rel_tol:
            fs_settled = True
            break

    beta, value, grad, negH, inner_log, ok = newton_map(beta, lambdas, assembly, y, opts)
    negH = _ensure_pd(negH, opts)
    laml_final = laml_value(value, lambdas, assembly, negH)
    grad_max = float(np.max(np.abs(grad))) if grad.size else 0.0
    if outer_log:
        outer_log[-1]["fs_settled"] = fs_settled
    return FitState(assembly=assembly, beta=beta, lambdas=lambdas,
                    neg_hessian=negH, laml=laml_final, grad_max=grad_max,
                    converged=ok, log=outer_log)


def posterior_covariance(state: FitState) -> np.ndarray:
    """V_beta: inverse of the corrected negative Hessian at the mode."""
    negH = state.neg_hessian
    try:
        C = np.linalg.cholesky(negH)
    except np.linalg.LinAlgError:
        eigval, eigvec = np.linalg.eigh(negH)
        bad = eigval <= 1e-12 * max(abs(eigval).max(), 1e-300)
        culprits = sorted({int(np.argmax(np.abs(eigvec[:, i]))) for i in np.where(bad)[0]})
        raise FitError(
            f"posterior covariance is singular; unidentifiable coefficients {culprits}")
    Cinv = np.linalg.inv(C)
    V = Cinv.T @ Cinv
    return 0.5 * (V + V.T)
