"""Modified-Cholesky parametrisation of a multivariate Gaussian.

The precision matrix is factorised as Sigma^{-1} = T' D^{-2} T with T unit
lower triangular and D^2 positive diagonal, so that any finite parameter
vector maps to a positive-definite covariance.  For dimension d the model
uses q = d + d(d+1)/2 unconstrained parameters per observation, laid out as

    eta[:d]     mean vector mu
    eta[d:2d]   log of the diagonal of D^2
    eta[2d:]    strict lower triangle of T, row-wise

All derivative formulas below are exact and are cross-checked against
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class McdError(ValueError):
    pass


@dataclass(frozen=True)
class McdTables:
    """Index bookkeeping for dimension d.

    ``G`` maps (row-1, col-1) of T's strict lower triangle to the 1-based
    position of that entry in eta; ``z``/``w`` give, for the l-th tail
    entry, the (column, row) of T it occupies, again 1-based.  ``rows`` and
    ``cols`` are the 0-based equivalents used for numpy indexing.
    """

    d: int
    q: int
    G: np.ndarray
    z: np.ndarray
    w: np.ndarray
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)

    @property
    def n_tril(self) -> int:
        return self.rows.shape[0]


def build_index_tables(d: int) -> McdTables:
    """Build the G matrix and z/w lists for dimension ``d``."""
    if d < 1:
        raise McdError(f"dimension must be >= 1, got {d}")
    q = d + d * (d + 1) // 2
    k = d - 1
    C = np.zeros((k, k), dtype=np.int64)
    for j in range(1, k + 1):
        C[j - 1, j - 1] = j * (j + 1) // 2
        for c in range(j - 1, 0, -1):
            C[j - 1, c - 1] = C[j - 1, c] - 1
    G = np.where(np.tril(np.ones((k, k), dtype=bool)), C + 2 * d, 0)
    Z = np.zeros((k, k), dtype=np.int64)
    W = np.zeros((k, k), dtype=np.int64)
    for j in range(1, k + 1):
        for c in range(1, j + 1):
            Z[j - 1, c - 1] = c
            W[j - 1, c - 1] = j + 1
    mask = np.tril(np.ones((k, k), dtype=bool))
    z = Z[mask]
    w = W[mask]
    return McdTables(d=d, q=q, G=G, z=z, w=w, rows=w - 1, cols=z - 1)


def _as_eta_matrix(eta: np.ndarray, tables: McdTables) -> tuple[np.ndarray, bool]:
    eta = np.asarray(eta, dtype=float)
    single = eta.ndim == 1
    if single:
        eta = eta[None, :]
    if eta.shape[1] != tables.q:
        raise McdError(f"eta has {eta.shape[1]} columns, expected q={tables.q}")
    return eta, single


def _as_y_matrix(y: np.ndarray, tables: McdTables) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[1] != tables.d:
        raise McdError(f"y has {y.shape[1]} columns, expected d={tables.d}")
    return y


def t_matrices(eta: np.ndarray, tables: McdTables) -> np.ndarray:
    """Stack of unit-lower-triangular T matrices, one per observation."""
    eta, _ = _as_eta_matrix(eta, tables)
    n, d = eta.shape[0], tables.d
    T = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    if tables.n_tril:
        T[:, tables.rows, tables.cols] = eta[:, 2 * d:]
    return T


def _unit_lower_inverse(T: np.ndarray) -> np.ndarray:
    """Invert a stack of unit lower triangular matrices by forward substitution."""
    n, d, _ = T.shape
    L = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    for j in range(1, d):
        for k in range(j):
            # L[j, k] = -sum_{i=k..j-1} T[j, i] L[i, k]
            L[:, j, k] = -np.einsum("ni,ni->n", T[:, j, k:j], L[:, k:j, k])
    return L


@dataclass
class CovarianceFactors:
    """MCD factors for a batch of observations, derived matrices on demand."""

    T: np.ndarray          # (n, d, d) unit lower triangular
    D2: np.ndarray         # (n, d) diagonal of D^2
    _L: np.ndarray | None = None
    _Sigma: np.ndarray | None = None

    @property
    def L(self) -> np.ndarray:
        if self._L is None:
            self._L = _unit_lower_inverse(self.T)
        return self._L

    @property
    def Sigma(self) -> np.ndarray:
        if self._Sigma is None:
            L = self.L
            self._Sigma = np.einsum("nik,nk,njk->nij", L, self.D2, L)
        return self._Sigma

    @property
    def Sigma_inv(self) -> np.ndarray:
        return np.einsum("nki,nk,nkj->nij", self.T, 1.0 / self.D2, self.T)


def eta_to_covariance(eta: np.ndarray, tables: McdTables) -> CovarianceFactors:
    """Map linear-predictor values to MCD covariance factors."""
    eta, _ = _as_eta_matrix(eta, tables)
    if not np.all(np.isfinite(eta)):
        raise McdError("eta contains non-finite entries")
    d = tables.d
    return CovarianceFactors(T=t_matrices(eta, tables), D2=np.exp(eta[:, d:2 * d]))


def covariance_to_eta(Sigma: np.ndarray, tables: McdTables) -> np.ndarray:
    """Return the eta tail (log D^2 and T entries) whose MCD reproduces Sigma."""
    Sigma = np.asarray(Sigma, dtype=float)
    d = tables.d
    if Sigma.shape != (d, d):
        raise McdError(f"Sigma has shape {Sigma.shape}, expected ({d}, {d})")
    try:
        C = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise McdError("Sigma is not positive definite") from exc
    diag = np.diag(C)
    L = C / diag[None, :]
    T = _unit_lower_inverse(L[None])[0]
    tail = np.empty(d + tables.n_tril)
    tail[:d] = 2.0 * np.log(diag)
    tail[d:] = T[tables.rows, tables.cols]
    return tail


def _residual_parts(y, eta, tables):
    eta, single = _as_eta_matrix(eta, tables)
    y = _as_y_matrix(y, tables)
    if y.shape[0] != eta.shape[0]:
        raise McdError("y and eta row counts differ")
    d = tables.d
    r = y - eta[:, :d]
    T = t_matrices(eta, tables)
    e = np.exp(-eta[:, d:2 * d])        # D^{-2} diagonal
    v = np.einsum("nij,nj->ni", T, r)   # T r
    return eta, single, r, T, e, v


_LOG_2PI = float(np.log(2.0 * np.pi))


def log_density(y: np.ndarray, eta: np.ndarray, tables: McdTables) -> np.ndarray | float:
    """Gaussian log-density written directly in eta, 2*pi constant included."""
    eta, single, r, T, e, v = _residual_parts(y, eta, tables)
    d = tables.d
    ll = -0.5 * d * _LOG_2PI - 0.5 * np.sum(eta[:, d:2 * d] + e * v * v, axis=1)
    return float(ll[0]) if single else ll


def grad_eta(y: np.ndarray, eta: np.ndarray, tables: McdTables) -> np.ndarray:
    """Per-observation gradient of the log-density w.r.t. eta."""
    eta, single, r, T, e, v = _residual_parts(y, eta, tables)
    n, d, q = eta.shape[0], tables.d, tables.q
    u = e * v
    g = np.empty((n, q))
    g[:, :d] = np.einsum("nkl,nk->nl", T, u)
    g[:, d:2 * d] = 0.5 * u * v - 0.5
    if tables.n_tril:
        g[:, 2 * d:] = -u[:, tables.rows] * r[:, tables.cols]
    return g[0] if single else g


def hess_eta(y: np.ndarray, eta: np.ndarray, tables: McdTables) -> np.ndarray:
    """Per-observation Hessian of the log-density w.r.t. eta (symmetric)."""
    eta, single, r, T, e, v = _residual_parts(y, eta, tables)
    n, d, q = eta.shape[0], tables.d, tables.q
    a, b = tables.rows, tables.cols
    u = e * v
    H = np.zeros((n, q, q))

    # mu-mu block: -(T' D^{-2} T)
    H[:, :d, :d] = -np.einsum("nka,nk,nkb->nab", T, e, T)
    # mu-logD2 block: -T[j, l] e_j v_j at (l, d+j)
    H[:, :d, d:2 * d] = -T.transpose(0, 2, 1) * u[:, None, :]
    didx = np.arange(d)
    # logD2-logD2 block: diagonal -e_j v_j^2 / 2
    H[:, d + didx, d + didx] = -0.5 * u * v
    if tables.n_tril:
        onehot_b = np.eye(d)[b]                       # (m, d)
        Ta = T[:, a, :]                               # (n, m, d)
        ea, va, rb = e[:, a], v[:, a], r[:, b]
        # mu-T block: e_a (r_b T[a, l] + v_a 1{b = l}) at (l, 2d+t)
        mu_t = ea[:, :, None] * (rb[:, :, None] * Ta + va[:, :, None] * onehot_b[None])
        H[:, :d, 2 * d:] = mu_t.transpose(0, 2, 1)
        # logD2-T block: 1{a = j} e_a v_a r_b at (d+j, 2d+t)
        row_mask = (a[None, :] == didx[:, None]).astype(float)    # (d, m)
        H[:, d:2 * d, 2 * d:] = (u[:, a] * rb)[:, None, :] * row_mask[None]
        # T-T block: -1{a_s = a_t} e_a r_{b_s} r_{b_t}
        same_row = (a[:, None] == a[None, :]).astype(float)       # (m, m)
        H[:, 2 * d:, 2 * d:] = -same_row[None] * ea[:, :, None] * rb[:, :, None] * rb[:, None, :]

    idx_l, idx_m = np.triu_indices(q, k=1)
    H[:, idx_m, idx_l] = H[:, idx_l, idx_m]
    return H[0] if single else H


def sigma_jacobian(eta: np.ndarray, tables: McdTables, l: int, m: int) -> np.ndarray:
    """d Sigma[l, m] / d eta, one length-q row per observation (l, m 0-based)."""
    eta, single = _as_eta_matrix(eta, tables)
    d, q = tables.d, tables.q
    if not (0 <= l < d and 0 <= m < d):
        raise McdError(f"indices ({l}, {m}) out of range for d={d}")
    fac = eta_to_covariance(eta, tables)
    L, D2, Sigma = fac.L, fac.D2, fac.Sigma
    n = eta.shape[0]
    J = np.zeros((n, q))
    J[:, d:2 * d] = L[:, l, :] * L[:, m, :] * D2
    if tables.n_tril:
        a, b = tables.rows, tables.cols
        # dL = -L (dT) L with dT a single unit entry at (a, b)
        J[:, 2 * d:] = -L[:, l, a] * Sigma[:, b, m] - L[:, m, a] * Sigma[:, l, b]
    return J[0] if single else J


def corr_jacobian(eta: np.ndarray, tables: McdTables, l: int, m: int) -> np.ndarray:
    """d Gamma[l, m] / d eta via the quotient rule (l, m 0-based)."""
    eta, single = _as_eta_matrix(eta, tables)
    d, q = tables.d, tables.q
    if not (0 <= l < d and 0 <= m < d):
        raise McdError(f"indices ({l}, {m}) out of range for d={d}")
    if l == m:
        J = np.zeros((eta.shape[0], q))
        return J[0] if single else J
    Sigma = eta_to_covariance(eta, tables).Sigma
    s_ll, s_mm, s_lm = Sigma[:, l, l], Sigma[:, m, m], Sigma[:, l, m]
    d_lm = sigma_jacobian(eta, tables, l, m)
    d_ll = sigma_jacobian(eta, tables, l, l)
    d_mm = sigma_jacobian(eta, tables, m, m)
    root = 1.0 / np.sqrt(s_ll * s_mm)
    J = d_lm * root[:, None] - 0.5 * s_lm[:, None] * (
        d_ll / s_ll[:, None] + d_mm / s_mm[:, None]
    ) * root[:, None]
    return J[0] if single else J


def sample_responses(eta: np.ndarray, tables: McdTables, rng: np.random.Generator) -> np.ndarray:
    """Draw y_i ~ N(mu_i, Sigma_i) using the factor form y = mu + L D eps."""
    eta, _ = _as_eta_matrix(eta, tables)
    fac = eta_to_covariance(eta, tables)
    eps = rng.standard_normal((eta.shape[0], tables.d))
    scale = np.sqrt(fac.D2)
    return eta[:, :tables.d] + np.einsum("nij,nj->ni", fac.L, scale * eps)
