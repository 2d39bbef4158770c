"""Gompertz and gamma-Gompertz hazards, Poisson life-table likelihoods.

Ages passed to the hazard functions are model ages: ``x = 0`` is the first
cell of a :class:`LifeTable`, whatever its ``start_age``.  Hazards are
evaluated at the left endpoint of each single-year interval.

The ``_batch`` helpers broadcast over a stack of parameter vectors
(shape ``(k, 3)``) so that population-based optimizers can score a whole
generation in one call.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DomainError",
    "ModelParams",
    "LifeTable",
    "PenaltyConfig",
    "gompertz_hazard",
    "gg_hazard",
    "gg_survival",
    "log_likelihood",
    "penalty",
    "penalized_log_likelihood",
    "gradient",
    "mse",
]


class DomainError(ValueError):
    """Raised when parameters or inputs fall outside the model domain."""


@dataclass(frozen=True)
class ModelParams:
    """Gamma-Gompertz parameters.

    a : hazard level at model age 0 (per person-year)
    b : rate of aging (per year)
    sigma2 : frailty variance; 0 gives the Gompertz submodel
    """

    a: float
    b: float
    sigma2: float = 0.0

    def __post_init__(self):
        _check_params(self.a, self.b, self.sigma2)

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.sigma2], dtype=float)

    @classmethod
    def from_array(cls, theta) -> "ModelParams":
        a, b, s = (float(v) for v in theta)
        return cls(a, b, s)

    @property
    def is_gompertz(self) -> bool:
        return self.sigma2 == 0.0

    @property
    def plateau(self) -> float:
        """Limiting hazard b / sigma2 (infinite for the Gompertz submodel)."""
        return np.inf if self.sigma2 == 0.0 else self.b / self.sigma2


def _check_params(a, b, sigma2):
    if not (np.isfinite(a) and a > 0):
        raise DomainError(f"a must be positive and finite, got {a!r}")
    if not (np.isfinite(b) and b > 0):
        raise DomainError(f"b must be positive and finite, got {b!r}")
    if not (np.isfinite(sigma2) and sigma2 >= 0):
        raise DomainError(f"sigma2 must be non-negative and finite, got {sigma2!r}")


@dataclass(frozen=True)
class LifeTable:
    """Deaths and exposures by single year of age.

    Cell ``i`` covers ages ``[start_age + i, start_age + i + 1)`` and is
    evaluated at model age ``i``.  Deaths may be fractional (HMD splits
    deaths across Lexis triangles).  ``censored`` counts lifetimes that ran
    past the last cell when the table was built from individual data.
    """

    start_age: int
    deaths: np.ndarray
    exposures: np.ndarray
    censored: int = field(default=0, compare=False)

    def __post_init__(self):
        d = np.array(self.deaths, dtype=float)
        e = np.array(self.exposures, dtype=float)
        if d.ndim != 1 or d.shape != e.shape:
            raise ValueError("deaths and exposures must be 1-D arrays of equal length")
        if d.size == 0:
            raise ValueError("life table has no cells")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(e))):
            raise ValueError("deaths and exposures must be finite")
        if np.any(d < 0) or np.any(e < 0):
            raise ValueError("deaths and exposures must be non-negative")
        bad = np.flatnonzero((e == 0) & (d > 0))
        if bad.size:
            raise ValueError(
                f"deaths recorded with zero exposure at age {self.start_age + int(bad[0])}"
            )
        d.flags.writeable = False
        e.flags.writeable = False
        object.__setattr__(self, "deaths", d)
        object.__setattr__(self, "exposures", e)
        object.__setattr__(self, "start_age", int(self.start_age))

    def __len__(self):
        return self.deaths.size

    @property
    def ages(self) -> np.ndarray:
        return self.start_age + np.arange(self.deaths.size)

    @property
    def model_ages(self) -> np.ndarray:
        return np.arange(self.deaths.size, dtype=float)

    @property
    def rates(self) -> np.ndarray:
        """Observed death rates D/E (nan where exposure is zero)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.exposures > 0, self.deaths / self.exposures, np.nan)

    @property
    def total_deaths(self) -> float:
        return float(self.deaths.sum())

    def scaled(self, k: float) -> "LifeTable":
        return LifeTable(self.start_age, self.deaths * k, self.exposures * k, self.censored)

    def _active(self):
        """(x, D, E) restricted to cells with positive exposure."""
        keep = self.exposures > 0
        return self.model_ages[keep], self.deaths[keep], self.exposures[keep]


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty weight and the sigma2 boundary handling used by MAP fits.

    ``snap_threshold = 0`` disables snapping altogether.
    """

    lam: float = 0.5
    sigma2_floor: float = 1e-8
    snap_threshold: float = 1e-6

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError(f"lambda must be non-negative, got {self.lam!r}")
        if not (0 < self.sigma2_floor < 1):
            raise ValueError("sigma2_floor must lie in (0, 1)")
        if self.snap_threshold != 0 and not (self.sigma2_floor < self.snap_threshold < 1):
            raise ValueError("snap_threshold must be 0 or lie in (sigma2_floor, 1)")


# --------------------------------------------------------------------------
# hazards and survival


def gompertz_hazard(x, a, b):
    """Gompertz force of mortality ``a * exp(b * x)``."""
    if not (a > 0):
        raise DomainError(f"a must be positive, got {a!r}")
    if not (b > 0):
        raise DomainError(f"b must be positive, got {b!r}")
    with np.errstate(over="ignore"):
        return a * np.exp(b * np.asarray(x, dtype=float))


def _log1p_frailty(x, a, b, s):
    """log(1 + s (a/b) (exp(b x) - 1)) without overflow; broadcasts."""
    bx = b * x
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        # log of s (a/b) expm1(bx); -inf when s == 0 or x == 0
        t = np.log(s) + np.log(a) - np.log(b) + bx + np.log(-np.expm1(-bx))
        return np.logaddexp(0.0, t)


def gg_hazard(x, params: ModelParams):
    """Marginal gamma-Gompertz hazard.

    Decelerates toward ``b / sigma2`` at high ages; with ``sigma2 = 0``
    the Gompertz branch is taken and the result equals
    :func:`gompertz_hazard` exactly.
    """
    a, b, s = params.a, params.b, params.sigma2
    if s == 0.0:
        return gompertz_hazard(x, a, b)
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        return np.exp(np.log(a) + b * x - _log1p_frailty(x, a, b, s))


def gg_survival(x, params: ModelParams):
    """Survival function S(x) of the gamma-Gompertz lifetime."""
    a, b, s = params.a, params.b, params.sigma2
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        if s == 0.0:
            return np.exp(-(a / b) * np.expm1(b * x))
        return np.exp(-_log1p_frailty(x, a, b, s) / s)


# --------------------------------------------------------------------------
# likelihoods


def _log_hazard_batch(x, theta):
    """Log hazards for each row of ``theta``; returns shape (k, n)."""
    theta = np.atleast_2d(theta)
    a = theta[:, 0:1]
    b = theta[:, 1:2]
    s = theta[:, 2:3]
    with np.errstate(divide="ignore", invalid="ignore"):
        logmu = np.log(a) + b * x
    return logmu - np.where(s > 0, _log1p_frailty(x, a, b, s), 0.0)


def loglik_batch(theta, x, deaths, exposures):
    """Poisson log-likelihood for a stack of parameter rows.

    ``x``, ``deaths`` and ``exposures`` must already be restricted to cells
    with positive exposure.  Rows with invalid parameters score ``-inf``.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    logmu = _log_hazard_batch(x, theta)
    with np.errstate(over="ignore", invalid="ignore"):
        ll = (deaths * logmu - exposures * np.exp(logmu)).sum(axis=1)
    valid = (theta[:, 0] > 0) & (theta[:, 1] > 0) & (theta[:, 2] >= 0)
    ll = np.where(valid & ~np.isnan(ll), ll, -np.inf)
    return ll


def penalty(sigma2, lam):
    """Gamma log-kernel penalty ``lam * (sigma2 + log(sigma2))``."""
    if not (sigma2 > 0):
        raise DomainError(f"penalty is undefined for sigma2 <= 0 (got {sigma2!r})")
    if lam < 0:
        raise DomainError(f"lambda must be non-negative, got {lam!r}")
    return lam * (sigma2 + np.log(sigma2))


def penalty_batch(sigma2, lam):
    with np.errstate(divide="ignore", invalid="ignore"):
        return lam * (sigma2 + np.log(sigma2))


def log_likelihood(params: ModelParams, table: LifeTable) -> float:
    """Poisson life-table log-likelihood sum(D log mu - E mu), in nats."""
    x, d, e = table._active()
    if params.is_gompertz:
        mu = gompertz_hazard(x, params.a, params.b)
        logmu = np.log(params.a) + params.b * x
    else:
        logmu = np.log(params.a) + params.b * x - _log1p_frailty(
            x, params.a, params.b, params.sigma2
        )
        mu = np.exp(logmu)
    return float(np.sum(d * logmu - e * mu))


def penalized_log_likelihood(params: ModelParams, table: LifeTable, cfg: PenaltyConfig) -> float:
    if params.sigma2 < cfg.sigma2_floor:
        raise DomainError(
            f"sigma2={params.sigma2!r} is below the floor {cfg.sigma2_floor!r}"
        )
    return log_likelihood(params, table) - float(penalty(params.sigma2, cfg.lam))


def gradient(
    params: ModelParams,
    table: LifeTable,
    cfg: PenaltyConfig | None = None,
    penalized: bool = False,
) -> np.ndarray:
    """Analytic gradient of the (penalized) log-likelihood.

    Returns partial derivatives with respect to ``(a, b, sigma2)`` on the
    natural scale.  At ``sigma2 = 0`` the sigma2 component is the one-sided
    derivative of the plain log-likelihood.
    """
    a, b, s = params.a, params.b, params.sigma2
    x, d, e = table._active()
    bx = b * x
    logden = _log1p_frailty(x, a, b, s) if s > 0 else np.zeros_like(x)
    inv_den = np.exp(-logden)
    with np.errstate(over="ignore"):
        ebx = np.exp(bx)
        q = (a / b) * np.expm1(bx)
        dq_db = (a / b) * (x * ebx - np.expm1(bx) / b)
        mu = np.exp(np.log(a) + bx - logden)
    w = d - e * mu
    g = np.array(
        [
            np.sum(w * inv_den / a),
            np.sum(w * (x - s * dq_db * inv_den)),
            np.sum(w * (-q * inv_den)),
        ]
    )
    if penalized:
        if cfg is None:
            raise ValueError("penalized gradient needs a PenaltyConfig")
        if not (s > 0):
            raise DomainError("penalized gradient is undefined at sigma2 = 0")
        g[2] -= cfg.lam * (1.0 + 1.0 / s)
    return g


def mse(params: ModelParams, table: LifeTable) -> float:
    """Mean squared error between log observed rates and log fitted hazard.

    Only cells with positive deaths and exposure enter the sum and the count.
    """
    keep = (table.deaths > 0) & (table.exposures > 0)
    if not keep.any():
        raise ValueError("no cell has both positive deaths and exposure")
    x = table.model_ages[keep]
    log_m = np.log(table.deaths[keep]) - np.log(table.exposures[keep])
    log_mu = np.log(gg_hazard(x, params))
    return float(np.mean((log_m - log_mu) ** 2))
