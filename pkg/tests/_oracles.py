"""Independent reference implementations used to pin expected test values.

Everything here is deliberately naive (dense linear algebra, central finite
differences, Monte Carlo) and never shares code with the package paths it
checks.
"""

import numpy as np


def dense_mvn_logpdf(y, mu, Sigma):
    """Log N(y; mu, Sigma) via dense Cholesky, no shortcuts."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    d = y.shape[-1]
    C = np.linalg.cholesky(Sigma)
    z = np.linalg.solve(C, (y - mu).T).T
    quad = np.sum(z * z, axis=-1)
    logdet = 2.0 * np.sum(np.log(np.diag(C)))
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + quad)


def fd_gradient(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_jacobian(f, x, h=1e-5):
    """Central finite-difference Jacobian of vector-valued f at x."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def max_rel_err(approx, exact, floor=1e-8):
    """Worst-case elementwise relative error with an absolute floor."""
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = np.maximum(np.abs(exact), floor)
    return float(np.max(np.abs(approx - exact) / scale))


def random_spd(d, rng, jitter=0.5):
    A = rng.standard_normal((d, d))
    return A @ A.T + jitter * d * np.eye(d)
