"""Numerically stable count-distribution primitives.

All densities are computed and returned as log values; callers exponentiate
only at API boundaries. Products over thousands of observations underflow
otherwise.
"""

import numpy as np
from scipy.special import gammaln

# Below this dispersion the NB kernel is evaluated as its Poisson limit:
# 1/phi would otherwise push log-gamma out of its accurate range.
POISSON_LIMIT_PHI = 1e-8

# Dispersion box used by the optimizers downstream.
PHI_MIN = 1e-8
PHI_MAX = 1e3


def _check_y(y):
    if np.any(y < 0):
        raise ValueError("count y must be non-negative")


def _check_mu(mu):
    if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
        raise ValueError("mean mu must be positive and finite")


def poisson_log_pmf(y, mu):
    """Log pmf of a Poisson variable with mean ``mu``, via log-gamma.

    ``y`` and ``mu`` broadcast; scalars in, scalar out.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    _check_y(y)
    _check_mu(mu)
    out = y * np.log(mu) - mu - gammaln(y + 1.0)
    return out if out.ndim else float(out)


def nb_log_pmf(y, mu, phi):
    """Log pmf of a negative binomial with mean ``mu`` and dispersion ``phi``.

    The parameterization has variance ``mu * (1 + mu * phi)``.  For
    ``phi < POISSON_LIMIT_PHI`` the Poisson log pmf with the same mean is
    returned.

    Parameters
    ----------
    y : int or array of int, >= 0
    mu : float or array, > 0
    phi : float, >= 0 (scalar dispersion shared across observations)
    """
    phi = float(phi)
    if phi < 0:
        raise ValueError("dispersion phi must be non-negative")
    if phi < POISSON_LIMIT_PHI:
        return poisson_log_pmf(y, mu)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    _check_y(y)
    _check_mu(mu)
    r = 1.0 / phi
    # log1p keeps r * log(1 + mu*phi) accurate when mu*phi is tiny.
    log1p_muphi = np.log1p(mu * phi)
    out = (
        gammaln(y + r)
        - gammaln(r)
        - gammaln(y + 1.0)
        + y * (np.log(mu) + np.log(phi) - log1p_muphi)
        - r * log1p_muphi
    )
    return out if out.ndim else float(out)


def log_sum_exp(terms, axis=-1):
    """Overflow-safe log(sum(exp(terms))) along ``axis`` (max-subtraction)."""
    a = np.asarray(terms, dtype=float)
    if a.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    m = np.max(a, axis=axis, keepdims=True)
    # Rows that are all -inf would otherwise produce nan from -inf + inf.
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.squeeze(shift, axis=axis) + np.log(
            np.sum(np.exp(a - shift), axis=axis)
        )
    return out if np.ndim(out) else float(out)
