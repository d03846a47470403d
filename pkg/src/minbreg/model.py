"""Data model for the multiple-inflated negative binomial regression.

Holds observations, candidate inflated values, the full parameter vector,
and penalty settings, and evaluates the mixture likelihood and the
penalized objective.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .countdist import log_sum_exp, nb_log_pmf

# Floor applied to adaptive-weight denominators so an exactly-zero initial
# estimate cannot produce an infinite weight.
WEIGHT_FLOOR = 1e-6

# Floor used when projecting mixing proportions strictly inside the simplex.
OMEGA_FLOOR = 1e-4

SIMPLEX_TOL = 1e-10


class CsvFormatError(ValueError):
    """Raised when an input CSV does not match the expected layout."""


def _readonly(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Response counts ``y`` (n,) and covariate matrix ``X`` (n, p)."""

    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 1 or y.size < 1:
            raise ValueError("y must be a non-empty 1-d array")
        if np.any(y < 0) or np.any(y != np.floor(y)):
            raise ValueError("y must contain non-negative integers")
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValueError("X must be an (n, p) matrix matching y")
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite entries")
        object.__setattr__(self, "y", _readonly(y.astype(np.int64)))
        object.__setattr__(self, "X", _readonly(X))

    @property
    def n(self):
        return self.y.size

    @property
    def p(self):
        return self.X.shape[1]

    @classmethod
    def from_csv(cls, path):
        """Load a dataset from a CSV with header ``y,x1,...,xp``.

        The first column must be named ``y`` and hold integer counts;
        remaining columns are numeric covariates.  Parse errors report the
        offending row and column.
        """
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise CsvFormatError(f"{path}: empty file") from None
            if not header or header[0] != "y":
                raise CsvFormatError(
                    f"{path}: first column must be named 'y', got {header[:1]}"
                )
            ncol = len(header)
            ys, rows = [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != ncol:
                    raise CsvFormatError(
                        f"{path}: row {lineno} has {len(row)} fields, expected {ncol}"
                    )
                try:
                    ys.append(int(row[0]))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: row {lineno}, column 'y': not an integer: {row[0]!r}"
                    ) from None
                vals = []
                for j, cell in enumerate(row[1:], start=1):
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise CsvFormatError(
                            f"{path}: row {lineno}, column {header[j]!r}: "
                            f"not a number: {cell!r}"
                        ) from None
                rows.append(vals)
            if not ys:
                raise CsvFormatError(f"{path}: no data rows")
        return cls(y=np.array(ys), X=np.array(rows, dtype=float).reshape(len(ys), ncol - 1))


@dataclass(frozen=True)
class CandidateSet:
    """Strictly ascending distinct non-negative integers eligible for inflation."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1:
            raise ValueError("candidate values must be 1-d")
        if v.size and (np.any(v < 0) or np.any(v != np.floor(v))):
            raise ValueError("candidate values must be non-negative integers")
        if v.size > 1 and np.any(np.diff(v) <= 0):
            raise ValueError("candidate values must be strictly increasing")
        object.__setattr__(self, "values", _readonly(v.astype(np.int64)))

    @property
    def size(self):
        return self.values.size

    @classmethod
    def from_data(cls, y, min_count=1):
        """Distinct observed count values, optionally capped to those seen
        at least ``min_count`` times."""
        y = np.asarray(y)
        values, counts = np.unique(y, return_counts=True)
        return cls(values=values[counts >= int(min_count)])

    def match(self, y):
        """Index of each ``y`` in the candidate list, -1 where absent."""
        y = np.asarray(y)
        if self.size == 0:
            return np.full(y.shape, -1, dtype=np.int64)
        idx = np.searchsorted(self.values, y)
        idx = np.minimum(idx, self.size - 1)
        return np.where(self.values[idx] == y, idx, -1).astype(np.int64)


@dataclass(frozen=True)
class ModelParams:
    """Full parameter vector: dispersion, intercept, coefficients, and the
    mixing proportions (last entry is the NB component weight)."""

    phi: float
    alpha: float
    beta: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.phi) or self.phi < 0:
            raise ValueError("phi must be finite and non-negative")
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        beta = np.asarray(self.beta, dtype=float)
        if beta.ndim != 1 or not np.all(np.isfinite(beta)):
            raise ValueError("beta must be a finite 1-d vector")
        omega = np.asarray(self.omega, dtype=float)
        if omega.ndim != 1 or omega.size < 1:
            raise ValueError("omega must be a 1-d vector of length J+1")
        if np.any(omega < 0) or np.any(omega > 1):
            raise ValueError("every mixing proportion must lie in [0, 1]")
        if abs(omega.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError("mixing proportions must sum to 1")
        if omega[-1] <= 0:
            raise ValueError("the NB component weight must stay positive")
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", _readonly(beta))
        object.__setattr__(self, "omega", _readonly(omega))

    @property
    def n_candidates(self):
        return self.omega.size - 1

    @property
    def omega_nb(self):
        return float(self.omega[-1])


@dataclass(frozen=True)
class PenaltyConfig:
    """Tuning parameters and adaptive weights for the two penalties."""

    lambda1: float
    lambda2: float
    rho1: np.ndarray
    rho2: np.ndarray

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("tuning parameters must be non-negative")
        rho1 = np.asarray(self.rho1, dtype=float)
        rho2 = np.asarray(self.rho2, dtype=float)
        for name, rho in (("rho1", rho1), ("rho2", rho2)):
            if rho.ndim != 1 or not np.all(np.isfinite(rho)) or np.any(rho <= 0):
                raise ValueError(f"{name} must be finite and positive")
        object.__setattr__(self, "lambda1", float(self.lambda1))
        object.__setattr__(self, "lambda2", float(self.lambda2))
        object.__setattr__(self, "rho1", _readonly(rho1))
        object.__setattr__(self, "rho2", _readonly(rho2))


def adaptive_weights(estimates, floor=WEIGHT_FLOOR):
    """1 / |estimate| with the magnitude floored away from zero."""
    est = np.abs(np.asarray(estimates, dtype=float))
    return 1.0 / np.maximum(est, floor)


def linear_predictor(X, alpha, beta):
    return alpha + X @ beta


def pointwise_log_pmf(data: Dataset, params: ModelParams, candidates: CandidateSet):
    """Mixture log pmf of every observation, as a length-n vector."""
    if params.beta.size != data.p:
        raise ValueError("beta length does not match the number of covariates")
    if params.n_candidates != candidates.size:
        raise ValueError("omega length does not match the candidate set")
    mu = np.exp(linear_predictor(data.X, params.alpha, params.beta))
    log_nb = nb_log_pmf(data.y, mu, params.phi) + np.log(params.omega_nb)
    log_nb = np.atleast_1d(log_nb)
    idx = candidates.match(data.y)
    matched = idx >= 0
    out = log_nb.copy()
    if np.any(matched):
        w = params.omega[idx[matched]]
        with np.errstate(divide="ignore"):
            stacked = np.stack([np.log(w), log_nb[matched]], axis=-1)
        out[matched] = log_sum_exp(stacked, axis=-1)
    return out


def mixture_log_pmf(y, x, params: ModelParams, candidates: CandidateSet):
    """Mixture log pmf of a single observation."""
    data = Dataset(y=np.array([y]), X=np.asarray(x, dtype=float).reshape(1, -1))
    return float(pointwise_log_pmf(data, params, candidates)[0])


def log_likelihood(data: Dataset, params: ModelParams, candidates: CandidateSet):
    """Sum of the mixture log pmf over the dataset."""
    return float(np.sum(pointwise_log_pmf(data, params, candidates)))


def penalty_value(n, params: ModelParams, pen: PenaltyConfig):
    """Total penalty: n*lambda1*sum(rho1*|beta|) + n*lambda2*sum(rho2*omega)."""
    if pen.rho1.size != params.beta.size:
        raise ValueError("rho1 length does not match beta")
    if pen.rho2.size != params.n_candidates:
        raise ValueError("rho2 length does not match the candidate set")
    p1 = n * pen.lambda1 * float(pen.rho1 @ np.abs(params.beta))
    p2 = n * pen.lambda2 * float(pen.rho2 @ params.omega[:-1])
    return p1 + p2


def penalized_objective(
    data: Dataset, params: ModelParams, candidates: CandidateSet, pen: PenaltyConfig
):
    """Log-likelihood minus the adaptive-LASSO penalties (to be maximized)."""
    return log_likelihood(data, params, candidates) - penalty_value(
        data.n, params, pen
    )
