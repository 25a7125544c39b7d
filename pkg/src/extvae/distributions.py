"""Distributions used by the extremes model.

Closed-form CDFs, log-densities, and samplers for the log-Laplace multiplicative
noise, the Frechet noise it replaces, positive-stable and exponentially-tilted
positive-stable latent factors (stability index fixed at 1/2), log-normal
variational posteriors, and the GEV marginal model.

All samplers are deterministic given a seed; see :mod:`extvae.seeds`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .seeds import as_generator, substream

_HALF_LOG_PI = 0.5 * math.log(math.pi)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# |xi| below this is rejected: the Pareto-scale transform divides by xi,
# so the Gumbel boundary is excluded from fitting.
XI_MIN = 1e-3


class GevFitError(RuntimeError):
    """GEV maximum-likelihood search failed; carries the best point found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


def _validate_positive(name: str, value: float) -> None:
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class LogLaplaceParams:
    """Multiplicative noise with tail index alpha0 (log-Laplace(0, 1/alpha0))."""

    alpha0: float

    def __post_init__(self):
        _validate_positive("alpha0", self.alpha0)


@dataclass(frozen=True)
class ExpPSParams:
    """Exponentially-tilted positive-stable parameters.

    Density and sampling are implemented for ``alpha == 0.5`` only, where the
    closed form exists; the tilting parameter ``theta >= 0`` controls how light
    the right tail is.
    """

    alpha: float
    theta: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if not np.isfinite(self.theta) or self.theta < 0:
            raise ValueError(f"theta must be >= 0 and finite, got {self.theta!r}")


@dataclass(frozen=True)
class FrechetParams:
    tau: float
    alpha0: float

    def __post_init__(self):
        _validate_positive("tau", self.tau)
        _validate_positive("alpha0", self.alpha0)


@dataclass(frozen=True)
class GevParams:
    """GEV location/scale/shape with the Gumbel (xi = 0) branch excluded."""

    mu: float
    sigma: float
    xi: float

    def __post_init__(self):
        _validate_positive("sigma", self.sigma)
        if not np.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu!r}")
        if not np.isfinite(self.xi) or self.xi == 0.0:
            raise ValueError(f"xi must be nonzero and finite, got {self.xi!r}")


# ---------------------------------------------------------------------------
# log-Laplace noise
# ---------------------------------------------------------------------------

def _check_positive_arg(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("argument must be strictly positive and finite")
    return x


def loglaplace_cdf(x, p: LogLaplaceParams) -> np.ndarray:
    """P(eps <= x) = x^a0/2 below 1 and 1 - x^(-a0)/2 above; continuous at 1."""
    x = _check_positive_arg(x)
    a0 = p.alpha0
    # clamp each branch's argument so the unused side cannot overflow
    return np.where(x <= 1.0, 0.5 * np.minimum(x, 1.0) ** a0,
                    1.0 - 0.5 * np.maximum(x, 1.0) ** (-a0))


def loglaplace_logpdf(x, p: LogLaplaceParams) -> np.ndarray:
    x = _check_positive_arg(x)
    a0 = p.alpha0
    # log(a0/2) - log x - a0*|log x|, the two power branches written at once
    return math.log(a0 / 2.0) - np.log(x) - a0 * np.abs(np.log(x))


def loglaplace_sample(p: LogLaplaceParams, n: int, seed) -> np.ndarray:
    """exp(U) with U ~ Laplace(0, 1/alpha0)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = as_generator(seed)
    u = rng.laplace(loc=0.0, scale=1.0 / p.alpha0, size=n)
    return np.exp(u)


def loglaplace_quantile(q, p: LogLaplaceParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0) or np.any(q >= 1):
        raise ValueError("quantile level must lie in (0, 1)")
    return np.where(q <= 0.5, (2.0 * q) ** (1.0 / p.alpha0),
                    (2.0 * (1.0 - q)) ** (-1.0 / p.alpha0))


# ---------------------------------------------------------------------------
# positive-stable(1/2) and its exponentially tilted version
# ---------------------------------------------------------------------------

def positive_stable_half_sample(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws with Laplace transform exp(-sqrt(s)).

    0.5 / Z^2 for standard normal Z; equivalently the one-sided stable law
    whose density is z^(-3/2) exp(-1/(4z)) / (2 sqrt(pi)).
    """
    z = rng.standard_normal(n)
    while np.any(z == 0.0):  # measure-zero guard; keeps 1/z^2 finite
        z[z == 0.0] = rng.standard_normal(int(np.sum(z == 0.0)))
    return 0.5 / z**2


def expps_logdensity_half(z, theta) -> np.ndarray:
    """Log-density of expPS(1/2, theta); theta = 0 is the untilted stable law."""
    z = _check_positive_arg(z)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or not np.all(np.isfinite(theta)):
        raise ValueError("theta must be >= 0 and finite")
    return (
        -math.log(2.0)
        - _HALF_LOG_PI
        + np.sqrt(theta)
        - 1.5 * np.log(z)
        - theta * z
        - 0.25 / z
    )


def expps_sample(
    p: ExpPSParams,
    n: int,
    seed,
    max_rounds: int = 10**6,
    return_stats: bool = False,
):
    """Rejection sampler: stable(1/2) proposals accepted with prob exp(-theta*x).

    The acceptance rate is exp(-sqrt(theta)), so the expected number of rounds
    is modest for the tilting range the model uses; ``max_rounds`` only guards
    pathological theta.
    """
    if p.alpha != 0.5:
        raise ValueError("sampler implemented for alpha = 1/2 only")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = as_generator(seed)
    out = np.empty(n, dtype=np.float64)
    filled = 0
    proposals = 0
    accepted = 0
    for _ in range(max_rounds):
        need = n - filled
        x = positive_stable_half_sample(need, rng)
        if p.theta == 0.0:
            keep = np.ones(need, dtype=bool)
        else:
            keep = rng.random(need) < np.exp(-p.theta * x)
        proposals += need
        k = int(np.sum(keep))
        accepted += k
        out[filled : filled + k] = x[keep]
        filled += k
        if filled == n:
            if return_stats:
                return out, {"proposals": proposals, "accepted": accepted}
            return out
    raise RuntimeError(
        f"rejection sampler exceeded {max_rounds} rounds (theta={p.theta})"
    )


def expps_sample_field(theta: np.ndarray, seed, max_rounds: int = 10**6) -> np.ndarray:
    """One expPS(1/2, theta[i]) draw per entry of an arbitrary-shape theta array."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or not np.all(np.isfinite(theta)):
        raise ValueError("theta must be >= 0 and finite")
    rng = as_generator(seed)
    flat = theta.ravel()
    out = np.empty(flat.shape, dtype=np.float64)
    todo = np.arange(flat.size)
    for _ in range(max_rounds):
        x = positive_stable_half_sample(todo.size, rng)
        keep = rng.random(todo.size) < np.exp(-flat[todo] * x)
        out[todo[keep]] = x[keep]
        todo = todo[~keep]
        if todo.size == 0:
            return out.reshape(theta.shape)
    raise RuntimeError(f"rejection sampler exceeded {max_rounds} rounds")


# ---------------------------------------------------------------------------
# Frechet noise (kept for the tail-equivalence check)
# ---------------------------------------------------------------------------

def frechet_cdf(x, p: FrechetParams) -> np.ndarray:
    x = _check_positive_arg(x)
    return np.exp(-((x / p.tau) ** (-p.alpha0)))


def frechet_quantile(q, p: FrechetParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0) or np.any(q >= 1):
        raise ValueError("quantile level must lie in (0, 1)")
    return p.tau * (-np.log(q)) ** (-1.0 / p.alpha0)


def frechet_sample(p: FrechetParams, n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = as_generator(seed)
    return frechet_quantile(rng.random(n), p)


# ---------------------------------------------------------------------------
# log-normal (variational posterior of the latent factors)
# ---------------------------------------------------------------------------

def lognormal_logpdf(z, m, sigma) -> np.ndarray:
    """Exact log-density of exp(N(m, sigma^2)); no dropped constants."""
    z = _check_positive_arg(z)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be > 0")
    lz = np.log(z)
    return -(lz + np.log(sigma) + _HALF_LOG_2PI + (lz - m) ** 2 / (2.0 * sigma**2))


# ---------------------------------------------------------------------------
# GEV marginal model
# ---------------------------------------------------------------------------

def gev_cdf(x, p: GevParams, warn_on_clamp: bool = True) -> np.ndarray:
    """GEV CDF; arguments outside the fitted support clamp to 0 or 1."""
    x = np.asarray(x, dtype=np.float64)
    t = 1.0 + p.xi * (x - p.mu) / p.sigma
    inside = t > 0
    out = np.empty_like(t)
    with np.errstate(over="ignore"):
        out[inside] = np.exp(-(t[inside] ** (-1.0 / p.xi)))
    # outside the support: below the lower endpoint for xi>0, above the upper
    # endpoint for xi<0
    out[~inside] = 0.0 if p.xi > 0 else 1.0
    if warn_on_clamp and np.any(~inside):
        warnings.warn("gev_cdf evaluated outside the fitted support; clamped",
                      RuntimeWarning, stacklevel=2)
    return out


def gev_quantile(q, p: GevParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0) or np.any(q >= 1):
        raise ValueError("quantile level must lie in (0, 1)")
    return p.mu + p.sigma * ((-np.log(q)) ** (-p.xi) - 1.0) / p.xi


def gev_sample(p: GevParams, n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = as_generator(seed)
    return gev_quantile(rng.random(n), p)


def _gev_negloglik(params: np.ndarray, x: np.ndarray) -> float:
    mu, log_sigma, xi = params
    sigma = math.exp(log_sigma)
    t = 1.0 + xi * (x - mu) / sigma
    if np.any(t <= 0):
        return 1e10
    log_t = np.log(t)
    return float(
        x.size * log_sigma
        + (1.0 + 1.0 / xi) * np.sum(log_t)
        + np.sum(np.exp(-log_t / xi))
    )


def gev_fit(data, min_obs: int = 30) -> GevParams:
    """Maximum-likelihood GEV fit by quasi-Newton search.

    Started from Gumbel moment estimates, run once on each side of the excluded
    band |xi| < XI_MIN, keeping the better optimum.  Raises GevFitError (with
    the best point found) when no converged solution satisfies the support
    constraint on every observation.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 1 or x.size < min_obs:
        raise ValueError(f"gev_fit needs a 1-D sample of at least {min_obs} points")
    if not np.all(np.isfinite(x)):
        raise ValueError("gev_fit requires finite data")

    sigma0 = math.sqrt(6.0) * float(np.std(x)) / math.pi
    sigma0 = max(sigma0, 1e-8)
    mu0 = float(np.mean(x)) - 0.5772156649015329 * sigma0

    best = None
    best_val = np.inf
    for xi0, lo, hi in ((0.1, XI_MIN, 5.0), (-0.1, -5.0, -XI_MIN)):
        res = minimize(
            _gev_negloglik,
            x0=np.array([mu0, math.log(sigma0), xi0]),
            args=(x,),
            method="L-BFGS-B",
            bounds=[(None, None), (None, None), (lo, hi)],
        )
        if res.fun < best_val:
            best_val = res.fun
            best = res
    fitted = GevParams(mu=float(best.x[0]), sigma=float(math.exp(best.x[1])),
                       xi=float(best.x[2]))
    support = 1.0 + fitted.xi * (x - fitted.mu) / fitted.sigma
    if not best.success or best_val >= 1e10 or np.any(support <= 0):
        raise GevFitError(
            f"GEV fit did not converge to an admissible optimum: {best.message}",
            best=fitted,
        )
    return fitted


# ---------------------------------------------------------------------------
# Monte-Carlo tail-equivalence check (Frechet noise vs log-Laplace noise)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TailCheckResult:
    marginal_ratio: float
    joint_ratio: float
    expected_marginal: float
    expected_joint: float
    x_level: float
    n_marginal_hits: tuple[int, int]
    n_joint_hits: tuple[int, int]


def tail_equivalence_check(
    y: np.ndarray,
    tau: float,
    alpha0: float,
    seed,
    level: float = 0.999,
    pair: tuple[int, int] | str = "all",
) -> TailCheckResult:
    """Ratio of marginal and joint survival between the two noise models.

    Multiplies a shared de-noised field ``y`` (replicates x sites) once by
    Frechet(tau, alpha0) noise and once by log-Laplace(1/alpha0) noise, i.i.d.
    across entries, and compares exceedances of the pooled ``level`` quantile.
    The limiting ratios are 2*tau^alpha0 marginally and its square jointly.

    Both noise samples are driven by common uniforms (comonotone coupling),
    which leaves each exceedance probability estimate unbiased while shrinking
    the variance of their ratio.  ``pair="all"`` pools the joint exceedance
    counts over every site pair; joint events are rare at high levels, and
    every pair's ratio has the same limit.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("y must be (replicates, sites)")
    n, n_sites = y.shape
    u = substream(seed, "noise-u").random((n, n_sites))
    u = np.clip(u, 1e-15, 1.0 - 1e-15)
    x_f = frechet_quantile(u, FrechetParams(tau, alpha0)) * y
    x_l = loglaplace_quantile(u, LogLaplaceParams(alpha0)) * y

    x_level = float(np.quantile(np.concatenate([x_f.ravel(), x_l.ravel()]), level))
    ex_f = x_f > x_level
    ex_l = x_l > x_level
    hits_f = int(np.sum(ex_f))
    hits_l = int(np.sum(ex_l))
    if hits_l == 0:
        raise ValueError("no log-Laplace exceedances at the requested level")
    marginal_ratio = hits_f / hits_l

    if pair == "all":
        pairs = [(i, j) for i in range(n_sites) for j in range(i + 1, n_sites)]
    else:
        pairs = [tuple(pair)]
    joint_f = sum(int(np.sum(ex_f[:, i] & ex_f[:, j])) for i, j in pairs)
    joint_l = sum(int(np.sum(ex_l[:, i] & ex_l[:, j])) for i, j in pairs)
    if joint_l == 0:
        raise ValueError("no joint log-Laplace exceedances at the requested level")
    expected = 2.0 * tau**alpha0
    return TailCheckResult(
        marginal_ratio=float(marginal_ratio),
        joint_ratio=float(joint_f / joint_l),
        expected_marginal=expected,
        expected_joint=expected**2,
        x_level=x_level,
        n_marginal_hits=(hits_f, hits_l),
        n_joint_hits=(joint_f, joint_l),
    )
