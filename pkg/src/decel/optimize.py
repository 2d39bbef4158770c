"""Maximum likelihood and MAP fitting of the gamma-Gompertz model.

Both estimators run a differential-evolution pre-step over the search box
followed by a bounded Nelder-Mead refinement.  Optimization happens in the
internal coordinates ``(log a, b, sigma2)``; everything returned is on the
natural scale.

The penalized objective grows without bound as sigma2 approaches 0, so
MAP fits keep sigma2 above ``PenaltyConfig.sigma2_floor``, compare the best
interior solution against the best solution pinned to the floor, and
report sigma2 = 0 exactly whenever the winner sits below
``PenaltyConfig.snap_threshold``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from .model import (
    LifeTable,
    ModelParams,
    PenaltyConfig,
    gradient,
    loglik_batch,
    log_likelihood,
    mse,
    penalty_batch,
)

logger = logging.getLogger(__name__)

Z_95 = 1.959963984540054


class FitError(RuntimeError):
    """The optimizer could not produce an estimate."""


class SEUnavailable(FitError):
    """Standard errors cannot be formed (boundary estimate or flat likelihood)."""


# --------------------------------------------------------------------------
# search box


@dataclass(frozen=True)
class SearchBox:
    """Box constraints on the natural scale, ``(lower, upper)`` per parameter."""

    a: tuple = (1e-8, 1.0)
    b: tuple = (1e-4, 1.0)
    sigma2: tuple = (1e-8, 5.0)

    def __post_init__(self):
        for name in ("a", "b", "sigma2"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"empty search interval for {name}: {lo} >= {hi}")
        if self.a[0] <= 0:
            raise ValueError("lower bound for a must be positive")
        if self.b[0] <= 0:
            raise ValueError("lower bound for b must be positive")
        if self.sigma2[0] < 0:
            raise ValueError("lower bound for sigma2 must be non-negative")

    @classmethod
    def for_penalty(cls, cfg: PenaltyConfig, base: "SearchBox | None" = None) -> "SearchBox":
        base = base or cls()
        return replace(base, sigma2=(cfg.sigma2_floor, base.sigma2[1]))

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.a[0], self.b[0], self.sigma2[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.a[1], self.b[1], self.sigma2[1]])

    def internal_bounds(self):
        lo, hi = self.lower, self.upper
        lo[0], hi[0] = np.log(lo[0]), np.log(hi[0])
        return lo, hi

    @staticmethod
    def to_internal(theta) -> np.ndarray:
        z = np.array(theta, dtype=float)
        z[..., 0] = np.log(z[..., 0])
        return z

    @staticmethod
    def from_internal(z) -> np.ndarray:
        theta = np.array(z, dtype=float)
        theta[..., 0] = np.exp(theta[..., 0])
        return theta

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))


# --------------------------------------------------------------------------
# differential evolution


@dataclass(frozen=True)
class DEConfig:
    population: int = 50
    weight: float = 0.8
    crossover: float = 0.9
    generations: int = 200

    def __post_init__(self):
        if self.population < 4:
            raise ValueError("differential evolution needs a population of at least 4")
        if not 0 < self.weight <= 2:
            raise ValueError("differential weight must lie in (0, 2]")
        if not 0 <= self.crossover <= 1:
            raise ValueError("crossover probability must lie in [0, 1]")
        if self.generations < 0:
            raise ValueError("generations must be non-negative")


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    nfev: int
    converged: bool = True


def _as_batch(objective, vectorized):
    if vectorized:
        return lambda theta: np.asarray(objective(theta), dtype=float)
    return lambda theta: np.array([objective(row) for row in theta], dtype=float)


def differential_evolution(
    objective: Callable,
    box: SearchBox,
    config: DEConfig = DEConfig(),
    seed=None,
    vectorized: bool = False,
) -> OptimizeResult:
    """Maximize ``objective`` over ``box`` with DE/rand/1/bin.

    ``objective`` takes a natural-scale vector ``(a, b, sigma2)``, or a
    ``(k, 3)`` stack of them when ``vectorized`` is true.  Trial vectors
    leaving the box are clipped onto it.  Selection is synchronous, so the
    result depends only on ``seed``.
    """
    score = _as_batch(objective, vectorized)
    rng = np.random.default_rng(seed)
    lo, hi = box.internal_bounds()
    n, dim = config.population, lo.size

    pop = lo + rng.random((n, dim)) * (hi - lo)
    fit = score(box.from_internal(pop))
    nfev = n
    bad = ~np.isfinite(fit)
    if bad.mean() > 0.5:
        raise FitError(
            f"objective is non-finite on {bad.sum()} of {n} initial points; check the search box"
        )
    fit[bad] = -np.inf

    rows = np.arange(n)
    for _ in range(config.generations):
        # three distinct partners per member, none equal to the member itself
        picks = np.argsort(rng.random((n, n - 1)), axis=1)[:, :3]
        picks += picks >= rows[:, None]
        r1, r2, r3 = picks.T
        mutant = pop[r1] + config.weight * (pop[r2] - pop[r3])
        cross = rng.random((n, dim)) < config.crossover
        cross[rows, rng.integers(dim, size=n)] = True
        trial = np.clip(np.where(cross, mutant, pop), lo, hi)

        trial_fit = score(box.from_internal(trial))
        nfev += n
        trial_fit[~np.isfinite(trial_fit)] = -np.inf
        better = trial_fit >= fit
        pop[better] = trial[better]
        fit[better] = trial_fit[better]

    best = int(np.argmax(fit))
    return OptimizeResult(box.from_internal(pop[best]), float(fit[best]), nfev)


# --------------------------------------------------------------------------
# Nelder-Mead refinement


def nelder_mead(
    objective: Callable,
    start,
    box: SearchBox,
    free=(True, True, True),
    max_iter: int = 4000,
    xatol: float = 1e-8,
    fatol: float = 1e-9,
    restarts: int = 2,
) -> OptimizeResult:
    """Bounded simplex refinement of ``objective`` (maximized) from ``start``.

    Only coordinates flagged in ``free`` move.  The simplex is restarted at
    its best vertex up to ``restarts`` times, which guards against the
    premature collapse plain Nelder-Mead is known for.  The returned point
    never scores below ``start``.
    """
    if isinstance(start, ModelParams):
        start = start.as_array()
    start = np.asarray(start, dtype=float)
    if not box.contains(start):
        raise ValueError(f"start {start} lies outside the search box")
    free = np.asarray(free, dtype=bool)
    lo, hi = box.internal_bounds()
    z0 = box.to_internal(start)
    nfev = 0

    def neg(zf):
        nonlocal nfev
        nfev += 1
        z = z0.copy()
        z[free] = zf
        val = objective(box.from_internal(z))
        return -val if np.isfinite(val) else np.inf

    f_start = neg(z0[free])
    best_z, best_f = z0[free].copy(), f_start
    converged = False
    bounds = list(zip(lo[free], hi[free]))
    for attempt in range(restarts + 1):
        simplex = _initial_simplex(best_z, lo[free], hi[free])
        res = minimize(
            neg,
            best_z,
            method="Nelder-Mead",
            bounds=bounds,
            options=dict(
                initial_simplex=simplex,
                maxiter=max_iter,
                maxfev=2 * max_iter,
                xatol=xatol,
                fatol=fatol,
            ),
        )
        converged = bool(res.success)
        gain = best_f - res.fun
        if res.fun <= best_f:
            best_z, best_f = np.asarray(res.x, dtype=float), float(res.fun)
        if converged and gain <= fatol:
            break

    z = z0.copy()
    z[free] = best_z
    if best_f > f_start:  # pragma: no cover - minimize returns its best vertex
        z, best_f = z0, f_start
    return OptimizeResult(box.from_internal(z), -best_f, nfev, converged)


def _initial_simplex(z, lo, hi):
    step = np.maximum(0.05 * np.abs(z), 1e-3)
    simplex = np.tile(z, (z.size + 1, 1))
    for i in range(z.size):
        v = z[i] + step[i]
        simplex[i + 1, i] = v if v <= hi[i] else z[i] - step[i]
    return np.clip(simplex, lo, hi)


# --------------------------------------------------------------------------
# standard errors


def numerical_hessian(grad: Callable, x, rel_step: float = 1e-5, abs_step: float = 1e-9,
                      max_step=None) -> np.ndarray:
    """Symmetrized central-difference Hessian from an analytic gradient."""
    x = np.asarray(x, dtype=float)
    h = np.maximum(rel_step * np.abs(x), abs_step)
    if max_step is not None:
        h = np.minimum(h, max_step)
    hess = np.empty((x.size, x.size))
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += h[i]
        down[i] -= h[i]
        hess[:, i] = (np.asarray(grad(up)) - np.asarray(grad(down))) / (2 * h[i])
    return 0.5 * (hess + hess.T)


def wald_standard_errors(hess) -> np.ndarray:
    """Square roots of the diagonal of the inverse observed information."""
    info = -np.asarray(hess, dtype=float)
    if not np.all(np.isfinite(info)):
        raise SEUnavailable("Hessian has non-finite entries")
    if np.linalg.eigvalsh(info).min() <= 0:
        raise SEUnavailable("Hessian is not negative definite")
    return np.sqrt(np.diag(np.linalg.inv(info)))


def hessian_se(params: ModelParams, table: LifeTable):
    """Wald standard errors of ``(a, b, sigma2)`` and a 95% interval for sigma2.

    Returns ``(se, (lower, upper))``.  Raises :class:`SEUnavailable` at the
    sigma2 = 0 boundary or when the likelihood is not locally concave.
    """
    if params.sigma2 <= 0:
        raise SEUnavailable("sigma2 = 0 lies on the boundary; Wald errors do not apply")
    theta = params.as_array()

    def grad(t):
        return gradient(ModelParams.from_array(t), table)

    # keep sigma2 - h positive
    cap = np.array([np.inf, np.inf, 0.5 * params.sigma2])
    se = wald_standard_errors(numerical_hessian(grad, theta, max_step=cap))
    half = Z_95 * se[2]
    return se, (params.sigma2 - half, params.sigma2 + half)


# --------------------------------------------------------------------------
# fits


@dataclass
class FitResult:
    params: ModelParams
    method: str
    loglik: float
    mse: float
    objective: float
    de_objective: float
    penalized_loglik: Optional[float] = None
    se: Optional[np.ndarray] = None
    ci_sigma2: Optional[tuple] = None
    converged: bool = True
    evaluations: int = 0
    notes: list = field(default_factory=list)

    @property
    def deceleration_detected(self) -> bool:
        return self.params.sigma2 > 0

    def as_dict(self) -> dict:
        se = self.se if self.se is not None else [None] * 3
        ci = self.ci_sigma2 if self.ci_sigma2 is not None else (None, None)
        return {
            "method": self.method,
            "a": self.params.a,
            "b": self.params.b,
            "sigma2": self.params.sigma2,
            "loglik": self.loglik,
            "penalized_loglik": self.penalized_loglik,
            "mse": self.mse,
            "se_a": se[0],
            "se_b": se[1],
            "se_sigma2": se[2],
            "ci_sigma2_lower": ci[0],
            "ci_sigma2_upper": ci[1],
            "deceleration": self.deceleration_detected,
            "converged": self.converged,
            "evaluations": self.evaluations,
        }


def _batch_objective(table: LifeTable, lam: Optional[float] = None):
    x, d, e = table._active()

    def batch(theta):
        theta = np.atleast_2d(theta)
        ll = loglik_batch(theta, x, d, e)
        if lam is not None:
            ll = ll - penalty_batch(theta[:, 2], lam)
        return ll

    def single(theta):
        return float(batch(theta)[0])

    return batch, single


def _check_table(table: LifeTable):
    if table.total_deaths <= 0:
        raise FitError("life table has no deaths; the likelihood carries no information")


def _attach_se(result: FitResult, table: LifeTable):
    try:
        result.se, result.ci_sigma2 = hessian_se(result.params, table)
    except SEUnavailable as exc:
        result.notes.append(f"standard errors unavailable: {exc}")


def fit_ml(
    table: LifeTable,
    box: SearchBox | None = None,
    seed=None,
    de_config: DEConfig = DEConfig(),
    with_se: bool = True,
) -> FitResult:
    """Maximum likelihood fit: DE pre-step then Nelder-Mead."""
    _check_table(table)
    box = box or SearchBox()
    batch, single = _batch_objective(table)
    de = differential_evolution(batch, box, de_config, seed=seed, vectorized=True)
    nm = nelder_mead(single, de.x, box)
    params = ModelParams.from_array(nm.x)
    result = FitResult(
        params=params,
        method="ML",
        loglik=log_likelihood(params, table),
        mse=mse(params, table),
        objective=nm.fun,
        de_objective=de.fun,
        converged=nm.converged,
        evaluations=de.nfev + nm.nfev,
    )
    if with_se:
        _attach_se(result, table)
    return result


def fit_map(
    table: LifeTable,
    cfg: PenaltyConfig = PenaltyConfig(),
    box: SearchBox | None = None,
    seed=None,
    de_config: DEConfig = DEConfig(),
    with_se: bool = True,
) -> FitResult:
    """Penalized (MAP) fit with the sigma2 floor / snap rule.

    The global search result is refined twice: freely, and with sigma2
    pinned to the floor.  The better of the two under the penalized
    objective wins.  A winner below ``cfg.snap_threshold`` is reported as
    sigma2 = 0 with ``(a, b)`` re-fitted under the Gompertz likelihood.
    """
    _check_table(table)
    box = SearchBox.for_penalty(cfg, box)
    batch, single = _batch_objective(table, cfg.lam)
    de = differential_evolution(batch, box, de_config, seed=seed, vectorized=True)
    interior = nelder_mead(single, de.x, box)
    pinned_start = np.array([interior.x[0], interior.x[1], cfg.sigma2_floor])
    pinned = nelder_mead(single, pinned_start, box, free=(True, True, False))
    best = interior if interior.fun >= pinned.fun else pinned
    nfev = de.nfev + interior.nfev + pinned.nfev
    converged = best.converged
    objective = best.fun

    theta = best.x
    if cfg.snap_threshold > 0 and theta[2] < cfg.snap_threshold:
        gompertz_box = replace(box, sigma2=(0.0, box.sigma2[1]))
        _, plain = _batch_objective(table)
        start = np.array([theta[0], theta[1], 0.0])
        refit = nelder_mead(plain, start, gompertz_box, free=(True, True, False))
        nfev += refit.nfev
        converged = converged and refit.converged
        theta = refit.x
        theta[2] = 0.0

    params = ModelParams.from_array(theta)
    pen_at = params if params.sigma2 > 0 else replace(params, sigma2=cfg.sigma2_floor)
    result = FitResult(
        params=params,
        method="MAP",
        loglik=log_likelihood(params, table),
        penalized_loglik=single(pen_at.as_array()),
        mse=mse(params, table),
        objective=objective,
        de_objective=de.fun,
        converged=converged,
        evaluations=nfev,
    )
    if with_se:
        _attach_se(result, table)
    return result


# --------------------------------------------------------------------------
# profile curves

PARAM_INDEX = {"a": 0, "b": 1, "sigma2": 2}


def profile_curve(table: LifeTable, theta_hat: ModelParams, param: str, grid,
                  lam: float = 0.5, profile: bool = True, box: SearchBox | None = None):
    """Log-likelihood and penalized log-likelihood along ``grid`` values of ``param``.

    With ``profile`` the other two parameters are re-maximized at every grid
    value (separately for each objective); otherwise they stay at
    ``theta_hat``.  Returns an array of rows ``(value, loglik, penalized)``.
    The penalized column is nan where sigma2 is 0.
    """
    if param not in PARAM_INDEX:
        raise ValueError(f"unknown parameter {param!r}")
    j = PARAM_INDEX[param]
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a non-empty 1-D sequence")
    box = box or SearchBox()
    if np.any(grid < box.lower[j]) or np.any(grid > box.upper[j]):
        raise ValueError(f"grid for {param} leaves the search box "
                         f"[{box.lower[j]}, {box.upper[j]}]")
    batch, plain = _batch_objective(table)

    def penalized(theta):
        if theta[2] <= 0:
            return np.nan
        return plain(theta) - float(penalty_batch(theta[2], lam))

    free = np.ones(3, dtype=bool)
    free[j] = False
    rows = []
    theta = theta_hat.as_array()
    starts = {"plain": theta.copy(), "pen": theta.copy()}
    for v in grid:
        row = [v]
        for key, fn in (("plain", plain), ("pen", penalized)):
            start = np.clip(starts[key], box.lower, box.upper)
            start[j] = v
            if profile and not (key == "pen" and v <= 0 and j == 2):
                res = nelder_mead(fn, start, box, free=free, restarts=1)
                starts[key] = res.x
                row.append(fn(res.x))
            else:
                row.append(fn(start))
        rows.append(row)
    return np.array(rows)
