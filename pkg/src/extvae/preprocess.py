"""Daily-series preprocessing to the Pareto-type scale the model consumes.

Neighborhood-pooled seasonal regression (periodic cubic splines plus a linear
trend), a log-linear variance model fit by exact Gaussian likelihood,
standardization, monthly-maxima extraction, a multinomial likelihood-ratio
goodness-of-fit test against a fitted marginal, and the GEV-based monotone
transformation.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import chi2 as chi2_dist

from .distributions import GevParams, gev_cdf, gev_fit

EARTH_RADIUS_KM = 6371.0
N_SPLINES = 12
SPLINE_PERIOD = 365.0
DEFAULT_NEIGHBOR_KM = 60.0


# ---------------------------------------------------------------------------
# periodic spline design
# ---------------------------------------------------------------------------

def _cardinal_cubic(u: np.ndarray) -> np.ndarray:
    """The C2 cardinal cubic B-spline supported on [0, 4]."""
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros_like(u)
    m = (u >= 0) & (u < 1)
    out[m] = u[m] ** 3 / 6.0
    m = (u >= 1) & (u < 2)
    out[m] = (-3.0 * u[m] ** 3 + 12.0 * u[m] ** 2 - 12.0 * u[m] + 4.0) / 6.0
    m = (u >= 2) & (u < 3)
    out[m] = (3.0 * u[m] ** 3 - 24.0 * u[m] ** 2 + 60.0 * u[m] - 44.0) / 6.0
    m = (u >= 3) & (u < 4)
    out[m] = (4.0 - u[m]) ** 3 / 6.0
    return out


def cyclic_spline_basis(day: np.ndarray, n_basis: int = N_SPLINES,
                        period: float = SPLINE_PERIOD) -> np.ndarray:
    """Periodic cubic B-spline columns over the day of year.

    Evenly spaced knots; each column is a wrapped cardinal B-spline, so the
    value and the first two derivatives match across the year boundary and the
    columns sum to one (partition of unity).
    """
    day = np.asarray(day, dtype=np.float64)
    h = period / n_basis
    pos = np.mod(day - 1.0, period)
    cols = []
    for k in range(n_basis):
        v = np.mod(pos - k * h, period) / h
        cols.append(_cardinal_cubic(v))
    return np.column_stack(cols)


def day_of_year(dates) -> np.ndarray:
    """Day of year in 1..365; leap days fold onto day 59 so the cycle length
    is constant."""
    out = np.empty(len(dates), dtype=np.float64)
    for i, d in enumerate(dates):
        doy = d.timetuple().tm_yday
        if d.year % 4 == 0 and (d.year % 100 != 0 or d.year % 400 == 0) and doy > 59:
            doy -= 1
        out[i] = doy
    return out


def daterange(start: dt.date, n_days: int) -> list[dt.date]:
    return [start + dt.timedelta(days=i) for i in range(n_days)]


@dataclass
class SeasonalDesign:
    """Intercept, linear time, and periodic spline columns.

    The spline columns sum to one, which is collinear with the intercept; one
    spline column is dropped for regression (recorded in ``dropped_column``)
    leaving a full-rank matrix.
    """

    matrix: np.ndarray              # (N, 2 + n_splines), all columns
    day: np.ndarray
    time_index: np.ndarray
    dropped_column: int | None
    n_splines: int = N_SPLINES

    @property
    def regression_matrix(self) -> np.ndarray:
        if self.dropped_column is None:
            return self.matrix
        keep = [j for j in range(self.matrix.shape[1]) if j != self.dropped_column]
        return self.matrix[:, keep]

    @property
    def variance_columns(self) -> np.ndarray:
        """Intercept and linear-time columns, used by the variance model."""
        return self.matrix[:, :2]


def build_design(n_days: int, start: dt.date) -> SeasonalDesign:
    """Design matrix for the seasonal regression over a daily calendar."""
    if n_days < 366:
        raise ValueError("need at least a full year of days")
    dates = daterange(start, n_days)
    day = day_of_year(dates)
    t = np.arange(1, n_days + 1, dtype=np.float64)
    b = cyclic_spline_basis(day)
    matrix = np.column_stack([np.ones(n_days), t, b])
    dropped = None
    if np.linalg.matrix_rank(matrix) < matrix.shape[1]:
        dropped = matrix.shape[1] - 1    # partition of unity: drop one spline
    return SeasonalDesign(matrix=matrix, day=day, time_index=t,
                          dropped_column=dropped)


# ---------------------------------------------------------------------------
# neighborhoods and the per-site regressions
# ---------------------------------------------------------------------------

def haversine_km(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Great-circle distances between (lon, lat) arrays, in km."""
    a = np.radians(np.atleast_2d(np.asarray(a, dtype=np.float64)))
    b = np.radians(np.atleast_2d(np.asarray(b, dtype=np.float64)))
    dlon = a[:, None, 0] - b[None, :, 0]
    dlat = a[:, None, 1] - b[None, :, 1]
    h = (np.sin(dlat / 2.0) ** 2
         + np.cos(a[:, None, 1]) * np.cos(b[None, :, 1]) * np.sin(dlon / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def neighborhoods(coords_lonlat: np.ndarray,
                  radius_km: float = DEFAULT_NEIGHBOR_KM) -> list[np.ndarray]:
    """Per-site index sets {i : dist(s_i, s_j) < r}; always contain the site."""
    d = haversine_km(coords_lonlat, coords_lonlat)
    np.fill_diagonal(d, 0.0)
    return [np.where(row < radius_km)[0] for row in d]


def fit_seasonal(responses: np.ndarray, design: SeasonalDesign):
    """OLS of the stacked neighborhood series on the (stacked) design.

    ``responses`` is (n_neighbors, N); the design is vertically replicated.
    Returns (beta, fitted values over one calendar, per-series residuals).
    """
    responses = np.atleast_2d(np.asarray(responses, dtype=np.float64))
    n_nb, n_days = responses.shape
    m = design.regression_matrix
    if m.shape[0] != n_days:
        raise ValueError("design length does not match the series")
    stacked = np.tile(m, (n_nb, 1))
    beta, _, rank, _ = np.linalg.lstsq(stacked, responses.ravel(), rcond=None)
    if rank < m.shape[1]:
        raise ValueError("design matrix is rank deficient after the drop rule")
    fitted = m @ beta
    residuals = responses - fitted
    return beta, fitted, residuals


@dataclass
class VarianceModel:
    """log eps = beta1 + beta2 * t, fitted standard deviations always > 0."""

    beta1: float
    beta2: float
    eps_hat: np.ndarray


def fit_variance(residuals: np.ndarray, time_index: np.ndarray) -> VarianceModel:
    """Exact independent-Gaussian MLE of the log-linear variance model,
    quasi-Newton from (log sd(residuals), 0)."""
    r = np.asarray(residuals, dtype=np.float64).ravel()
    t = np.asarray(time_index, dtype=np.float64).ravel()
    if r.shape != t.shape:
        raise ValueError("residuals and time index must align")
    if not np.all(np.isfinite(r)):
        raise ValueError("residuals must be finite")
    scale = max(1.0, float(np.max(np.abs(t))))
    ts = t / scale

    def nll_and_grad(b):
        log_eps = b[0] + b[1] * ts
        w = r**2 * np.exp(-2.0 * log_eps)
        nll = float(np.sum(log_eps + 0.5 * w))
        d = 1.0 - w
        return nll, np.array([np.sum(d), np.sum(d * ts)])

    sd0 = float(np.std(r))
    x0 = np.array([math.log(max(sd0, 1e-12)), 0.0])
    res = minimize(nll_and_grad, x0=x0, jac=True, method="L-BFGS-B")
    if not res.success:
        raise RuntimeError(f"variance model did not converge: {res.message}")
    beta1 = float(res.x[0])
    beta2 = float(res.x[1] / scale)
    eps_hat = np.exp(beta1 + beta2 * t)
    return VarianceModel(beta1=beta1, beta2=beta2, eps_hat=eps_hat)


def detrend(x: np.ndarray, fitted: np.ndarray, eps_hat: np.ndarray) -> np.ndarray:
    """(x - fitted) / eps_hat, elementwise."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if np.any(eps_hat <= 0):
        raise ValueError("fitted standard deviations must be positive")
    return (np.asarray(x, dtype=np.float64) - np.asarray(fitted, dtype=np.float64)) / eps_hat


def monthly_maxima(values: np.ndarray, dates) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Maximum within each calendar month; months with no data are omitted."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(dates):
        raise ValueError("values and dates must align")
    keys: list[tuple[int, int]] = []
    maxima: list[float] = []
    current: tuple[int, int] | None = None
    for v, d in zip(values, dates):
        key = (d.year, d.month)
        if key != current:
            keys.append(key)
            maxima.append(v)
            current = key
        elif v > maxima[-1]:
            maxima[-1] = v
    return keys, np.asarray(maxima)


# ---------------------------------------------------------------------------
# goodness of fit and the marginal transform
# ---------------------------------------------------------------------------

@dataclass
class GofResult:
    statistic: float
    df: int
    p_value: float
    observed: np.ndarray
    expected: np.ndarray
    edges: np.ndarray
    merged: bool
    doubled: bool


def chi2_gof(maxima: np.ndarray, cdf, n_bins: int = 10, n_params: int = 3,
             doubled: bool = False, min_expected: float = 1.0) -> GofResult:
    """Multinomial likelihood-ratio statistic sum O_i log(O_i / E_i).

    Bins are equal-width over the sample range; adjacent bins are merged until
    every expected count reaches ``min_expected``.  Degrees of freedom are
    (bins - 1 - n_params); the p-value comes from the chi-square survival
    function.  ``doubled`` applies the classical factor 2.
    """
    m = np.asarray(maxima, dtype=np.float64)
    if n_bins <= n_params + 1:
        raise ValueError("need more bins than fitted parameters plus one")
    edges = np.linspace(m.min(), m.max(), n_bins + 1)
    observed, _ = np.histogram(m, bins=edges)
    probs = np.diff(np.asarray(cdf(edges), dtype=np.float64))
    expected = m.size * probs

    merged = False
    edges = list(edges)
    observed = list(observed.astype(float))
    expected = list(expected)
    while len(expected) > n_params + 2 and min(expected) < min_expected:
        i = int(np.argmin(expected))
        j = i - 1 if i > 0 else i + 1
        lo, hi = min(i, j), max(i, j)
        observed[lo] += observed[hi]
        expected[lo] += expected[hi]
        del observed[hi], expected[hi], edges[hi]
        merged = True
    observed = np.asarray(observed)
    expected = np.asarray(expected)
    if np.any(expected <= 0):
        raise ValueError("expected count of zero; use fewer bins")

    nonzero = observed > 0
    statistic = float(np.sum(observed[nonzero] * np.log(observed[nonzero] / expected[nonzero])))
    if doubled:
        statistic *= 2.0
    df = len(expected) - 1 - n_params
    if df < 1:
        raise ValueError("not enough bins left for the test; use fewer parameters")
    return GofResult(statistic=statistic, df=df,
                     p_value=float(chi2_dist.sf(statistic, df)),
                     observed=observed, expected=expected,
                     edges=np.asarray(edges), merged=merged, doubled=doubled)


def gev_bound(g: GevParams) -> float:
    """The finite endpoint mu - sigma/xi (lower for xi>0, upper for xi<0)."""
    return g.mu - g.sigma / g.xi


def marginal_transform(m: np.ndarray, g: GevParams) -> np.ndarray:
    """Monotone map of GEV monthly maxima to the Pareto-type scale.

    For xi > 0: x = ((m - bound) * xi / sigma)^(1/xi); for xi < 0:
    x = (sigma / ((bound - m) * |xi|))^(1/|xi|).  Composing with the GEV CDF
    of the same parameters gives exp(-1/x), so ranks are preserved exactly.
    """
    m = np.asarray(m, dtype=np.float64)
    bound = gev_bound(g)
    if g.xi > 0:
        bad = m <= bound
        if np.any(bad):
            raise ValueError(
                f"value(s) at positions {np.where(bad)[0].tolist()} lie at or "
                f"below the GEV bound {bound:.6g}")
        return ((m - bound) * g.xi / g.sigma) ** (1.0 / g.xi)
    bad = m >= bound
    if np.any(bad):
        raise ValueError(
            f"value(s) at positions {np.where(bad)[0].tolist()} lie at or "
            f"above the GEV bound {bound:.6g}")
    return (g.sigma / ((bound - m) * abs(g.xi))) ** (1.0 / abs(g.xi))


# ---------------------------------------------------------------------------
# whole pipeline (one call per dataset)
# ---------------------------------------------------------------------------

@dataclass
class SitePreprocessResult:
    detrended: np.ndarray
    months: list[tuple[int, int]]
    maxima: np.ndarray
    gev: GevParams
    gof: GofResult
    transformed: np.ndarray


def preprocess_site(
    site_index: int,
    daily: np.ndarray,
    dates,
    design: SeasonalDesign,
    neighbor_sets: list[np.ndarray],
    n_bins: int = 10,
    doubled: bool = False,
) -> SitePreprocessResult:
    """Full pipeline for one site: pooled seasonal fit, variance model,
    standardization, monthly maxima, GEV fit + GOF, Pareto transform."""
    nb = neighbor_sets[site_index]
    _, fitted, residuals = fit_seasonal(daily[:, nb].T, design)
    # the variance model depends on (intercept, t) only, so the fitted
    # standard deviations are shared across the pooled neighbors
    var_model = fit_variance(residuals.ravel(),
                             np.tile(design.time_index, len(nb)))
    eps_site = np.exp(var_model.beta1 + var_model.beta2 * design.time_index)
    detrended = detrend(daily[:, site_index], fitted, eps_site)
    months, maxima = monthly_maxima(detrended, dates)
    gev = gev_fit(maxima)
    gof = chi2_gof(maxima, lambda e: gev_cdf(e, gev, warn_on_clamp=False),
                   n_bins=n_bins, n_params=3, doubled=doubled)
    transformed = marginal_transform(maxima, gev)
    return SitePreprocessResult(detrended=detrended, months=months,
                                maxima=maxima, gev=gev, gof=gof,
                                transformed=transformed)


def run_pipeline(daily: np.ndarray, dates, coords_lonlat: np.ndarray,
                 radius_km: float = DEFAULT_NEIGHBOR_KM, n_bins: int = 10,
                 doubled: bool = False) -> list[SitePreprocessResult]:
    """Per-site pipelines over a (days, sites) matrix; sites are independent."""
    daily = np.asarray(daily, dtype=np.float64)
    design = build_design(daily.shape[0], dates[0])
    nbs = neighborhoods(coords_lonlat, radius_km)
    return [preprocess_site(j, daily, dates, design, nbs, n_bins, doubled)
            for j in range(daily.shape[1])]
