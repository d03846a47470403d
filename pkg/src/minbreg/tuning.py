"""Grid search over the two tuning parameters with BIC model selection.

The lambda1 axis is traversed from the largest value down, warm-starting
each cell's (alpha, beta, phi) from its left neighbour; mixing proportions
restart from the initializer so inflated-value selection is not biased by
the path (zeroed proportions cannot revive within a single fit).
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .em import (
    EmOptions,
    FitResult,
    InitialState,
    NumericalError,
    _clamped_mu,
    _penalized_irls,
    e_step,
    eta_curvature,
    eta_score,
    fit,
    initialize,
)
from .model import CandidateSet, Dataset, ModelParams, PenaltyConfig


@dataclass(frozen=True)
class TuningGrid:
    """Descending positive values for each penalty axis."""

    lambda1_values: np.ndarray
    lambda2_values: np.ndarray

    def __post_init__(self):
        for name in ("lambda1_values", "lambda2_values"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.size == 0 or np.any(v <= 0) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be non-empty, finite and positive")
            if v.size > 1 and np.any(np.diff(v) >= 0):
                raise ValueError(f"{name} must be strictly descending")
            object.__setattr__(self, name, v)


@dataclass
class TunedFit:
    """Winning fit plus the full BIC surface and any failed cells."""

    best: FitResult
    bic_surface: np.ndarray  # shape (len(lambda2), len(lambda1))
    chosen: tuple
    grid: TuningGrid
    init: InitialState
    failures: list


def bic(fit_result: FitResult, n: int):
    """-2 loglik + df log(n); df counts the intercept, the dispersion, and
    the nonzero penalized parameters."""
    return -2.0 * fit_result.loglik + fit_result.df * np.log(n)


def default_grid(
    data: Dataset,
    candidates: CandidateSet,
    init: InitialState,
    n_lambda1=20,
    n_lambda2=20,
    min_ratio=1e-3,
    opts: EmOptions | None = None,
):
    """Log-spaced grids anchored at the smallest values annihilating every
    penalized parameter at initialization.

    lambda1_max comes from the soft-threshold kill conditions (both from
    the initial coefficients and from the score at beta = 0); lambda2_max
    from the closed-form omega update, capped so its Lagrange multiplier
    keeps a safe sign on the first iteration.
    """
    opts = opts or EmOptions()
    n = data.n
    resp = e_step(data, init.params, candidates)
    g = resp.nb_gamma
    phi = init.params.phi
    y, X = data.y, data.X

    # Kill condition at the initial coefficients.
    mu0 = _clamped_mu(init.params.alpha + X @ init.params.beta)
    s0 = eta_score(y, mu0, phi)
    c0 = eta_curvature(y, mu0, phi)
    kill_init = np.abs(
        (g * c0) @ (X * X * init.params.beta) + (g * s0) @ X
    ) / (n * init.rho1)

    # Kill condition at beta = 0 with a refitted weighted intercept.
    alpha0, _ = _penalized_irls(
        y,
        X,
        g,
        phi,
        init.params.alpha,
        np.zeros(data.p),
        np.full(data.p, np.inf),
        1e-8,
        opts.inner_irls_max_iters,
    )
    s_at0 = eta_score(y, _clamped_mu(alpha0 + np.zeros(n)), phi)
    kill_zero = np.abs((g * s_at0) @ X) / (n * init.rho1)

    lam1_max = 1.05 * max(float(np.max(kill_init, initial=0.0)),
                          float(np.max(kill_zero, initial=0.0)), 1e-8)

    if candidates.size:
        c_sums = resp.candidate_sums()
        rho_om = init.rho2 * init.params.omega[:-1]
        kill_omega = float(np.max(c_sums / (n * rho_om)))
        # Keep lambda2 * sum(rho2 * omega) safely below the NB responsibility
        # share so the closed-form update cannot leave the simplex.
        cap = 0.9 * float(resp.nb_gamma.sum()) / (n * float(rho_om.sum()))
        lam2_max = max(min(kill_omega, cap), 1e-8)
    else:
        lam2_max = 1e-8

    def _logspace(top, count):
        return np.geomspace(top, top * min_ratio, int(count))

    return TuningGrid(
        lambda1_values=_logspace(lam1_max, n_lambda1),
        lambda2_values=_logspace(lam2_max, n_lambda2),
    )


def _revived(omega):
    """Warm-start mixing proportions: zeroed candidates come back at the
    floor so each cell selects from the full candidate set (zeros are
    absorbing within a single fit)."""
    from .model import OMEGA_FLOOR

    om = np.maximum(omega[:-1], OMEGA_FLOOR)
    total = om.sum()
    if total > 0.95:
        om *= 0.95 / total
    return np.append(om, 1.0 - om.sum())


def _run_path_row(data, candidates, lam2, lambda1_values, init, opts):
    """Fit one warm-started lambda1 path at fixed lambda2."""
    results = []
    start = init.params
    for lam1 in lambda1_values:
        pen = PenaltyConfig(
            lambda1=float(lam1), lambda2=float(lam2), rho1=init.rho1, rho2=init.rho2
        )
        try:
            res = fit(
                data,
                candidates,
                pen,
                opts,
                start=start,
                init_fallback=init.poisson_fallback,
            )
            results.append(res)
            start = ModelParams(
                phi=res.params.phi,
                alpha=res.params.alpha,
                beta=res.params.beta,
                omega=_revived(res.params.omega),
            )
        except (NumericalError, FloatingPointError, ValueError) as exc:
            results.append(str(exc))
            start = init.params
    return results


def tune(
    data: Dataset,
    candidates: CandidateSet,
    grid: TuningGrid,
    opts: EmOptions | None = None,
    init: InitialState | None = None,
    n_jobs: int = 1,
):
    """Fit every grid cell and return the BIC minimizer.

    Ties break toward larger penalties (the sparser model); cells that fail
    are scored +inf and recorded.  Rows (fixed lambda2) are independent and
    may run in parallel; results are assembled in grid order so the output
    is identical for any worker count.
    """
    opts = opts or EmOptions()
    if init is None:
        init = initialize(data, candidates, opts)
    l1 = grid.lambda1_values
    l2 = grid.lambda2_values
    rows = []
    if n_jobs and n_jobs > 1 and l2.size > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, l2.size)) as pool:
            futures = [
                pool.submit(_run_path_row, data, candidates, lam2, l1, init, opts)
                for lam2 in l2
            ]
            rows = [f.result() for f in futures]
    else:
        rows = [_run_path_row(data, candidates, lam2, l1, init, opts) for lam2 in l2]

    surface = np.full((l2.size, l1.size), np.inf)
    failures = []
    best = None
    chosen = (0, 0)
    for i2, row in enumerate(rows):
        for i1, res in enumerate(row):
            if isinstance(res, str):
                failures.append((float(l1[i1]), float(l2[i2]), res))
                continue
            surface[i2, i1] = res.bic
            if best is None or res.bic < best.bic:
                best = res
                chosen = (float(l1[i1]), float(l2[i2]))
    if best is None:
        raise NumericalError("every grid cell failed to fit")
    return TunedFit(
        best=best,
        bic_surface=surface,
        chosen=chosen,
        grid=grid,
        init=init,
        failures=failures,
    )


def default_n_jobs():
    """Worker count from the MINB_THREADS environment variable (default 1)."""
    raw = os.environ.get("MINB_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
