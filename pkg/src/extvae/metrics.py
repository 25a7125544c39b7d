"""Extremal-dependence and forecast-quality diagnostics.

Threshold-indexed co-exceedance curves (chi) with bootstrap bands, averaged
radius of exceedances (ARE) on regular grids, tail-weighted CRPS with exact
piecewise integration, and Q-Q data.  Chi and ARE are rank-based, hence
invariant under strictly increasing marginal transformations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .fieldsim import pairwise_distances
from .seeds import substream

N_BOOT_DEFAULT = 200
MAX_PAIRS_PER_BIN = 200


def _uniform_scores(fields: np.ndarray) -> np.ndarray:
    """Right-continuous empirical CDF values, ranks/n per column (ties share
    the max rank, so U can equal 1); exceedance always uses strict >."""
    return rankdata(fields, axis=0, method="max") / fields.shape[0]


@dataclass
class ChiCurve:
    u: np.ndarray
    estimate: np.ndarray          # NaN where undefined
    lo95: np.ndarray
    hi95: np.ndarray
    defined: np.ndarray
    distance: float
    tol: float
    n_pairs: int
    seed: int | None = None
    n_boot: int = 0


@dataclass
class AreCurve:
    u: np.ndarray
    estimate: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    defined: np.ndarray
    psi: float
    ref_index: int
    seed: int | None = None
    n_boot: int = 0


@dataclass
class TwcrpsField:
    scores: np.ndarray            # (n_t, n_sites)
    thresholds: np.ndarray        # the per-cell u90 actually used


def select_pairs(coords: np.ndarray, distance: float, tol: float,
                 max_pairs: int = MAX_PAIRS_PER_BIN, seed=0) -> np.ndarray:
    """Ordered site pairs whose separation is within tol of the target,
    subsampled to at most ``max_pairs`` (seeded) for cost.

    A target distance of exactly zero selects the self-pairs (i, i), for
    which the co-exceedance probability is identically one.
    """
    n = len(coords)
    if distance == 0.0:
        pairs = np.column_stack([np.arange(n), np.arange(n)])
    else:
        d = pairwise_distances(coords, coords)
        upper = np.arange(n)[:, None] < np.arange(n)[None, :]
        ii, jj = np.where((np.abs(d - distance) <= tol) & upper)
        pairs = np.column_stack([ii, jj])
    if pairs.shape[0] == 0:
        raise ValueError(f"no site pairs at distance {distance} +/- {tol}")
    if pairs.shape[0] > max_pairs:
        keep = substream(seed, "pairs").choice(pairs.shape[0], size=max_pairs,
                                               replace=False)
        pairs = pairs[np.sort(keep)]
    return pairs


def _chi_estimate(u_scores: np.ndarray, pairs_local: np.ndarray,
                  u_grid: np.ndarray) -> np.ndarray:
    """Mean over pairs of #(both exceed)/#(conditioning exceeds)."""
    out = np.full(u_grid.size, np.nan)
    exceed = u_scores[:, :, None] > u_grid[None, None, :]     # (n_r, n_sel, n_u)
    for k in range(u_grid.size):
        ex = exceed[:, :, k]
        den = ex[:, pairs_local[:, 0]].sum(axis=0).astype(float)
        num = (ex[:, pairs_local[:, 0]] & ex[:, pairs_local[:, 1]]).sum(axis=0)
        ok = den > 0
        if np.any(ok):
            out[k] = float(np.mean(num[ok] / den[ok]))
    return out


def chi_curve(
    fields: np.ndarray,
    coords: np.ndarray,
    distance: float,
    u: np.ndarray,
    tol: float | None = None,
    n_boot: int = N_BOOT_DEFAULT,
    seed: int = 0,
    max_pairs: int = MAX_PAIRS_PER_BIN,
) -> ChiCurve:
    """Empirical co-exceedance probability at a spatial lag.

    ``fields`` is (replicates, sites); time plays the replicate role.  Each
    margin is rank-transformed, and for every pair in the distance bin the
    conditional exceedance ratio is averaged.  Bootstrap resamples replicates
    (200 by default) and re-ranks within each resample; the percentile band is
    widened, if needed, to contain the point estimate.
    """
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 2 or fields.shape[0] < 2:
        raise ValueError("fields must be (replicates >= 2, sites)")
    u = np.asarray(u, dtype=np.float64)
    if tol is None:
        tol = distance / 2.0
    pairs = select_pairs(coords, distance, tol, max_pairs, seed)
    sel = np.unique(pairs)
    remap = {int(s): i for i, s in enumerate(sel)}
    pairs_local = np.array([[remap[int(i)], remap[int(j)]] for i, j in pairs])
    sub = fields[:, sel]

    point = _chi_estimate(_uniform_scores(sub), pairs_local, u)
    boots = np.full((n_boot, u.size), np.nan)
    n_r = sub.shape[0]
    for b in range(n_boot):
        idx = substream(seed, "boot", b).integers(0, n_r, size=n_r)
        boots[b] = _chi_estimate(_uniform_scores(sub[idx]), pairs_local, u)
    lo, hi = _percentile_band(boots, point)
    return ChiCurve(u=u, estimate=point, lo95=lo, hi95=hi,
                    defined=~np.isnan(point), distance=float(distance),
                    tol=float(tol), n_pairs=pairs.shape[0], seed=seed,
                    n_boot=n_boot)


def _are_estimate(u_scores: np.ndarray, ref: int, psi: float,
                  u_grid: np.ndarray) -> np.ndarray:
    out = np.full(u_grid.size, np.nan)
    for k, u in enumerate(u_grid):
        ref_ex = u_scores[:, ref] > u                          # (n_r,)
        den = float(np.sum(ref_ex))
        if den == 0:
            continue
        num = float(np.sum((u_scores > u) & ref_ex[:, None]))
        out[k] = math.sqrt(psi**2 * num / (math.pi * den))
    return out


def are_curve(
    fields: np.ndarray,
    psi: float,
    ref_index: int,
    u: np.ndarray,
    n_boot: int = N_BOOT_DEFAULT,
    seed: int = 0,
) -> AreCurve:
    """Averaged radius of exceedances around a reference cell.

    ARE(u) = sqrt(psi^2 * sum_r sum_i 1{U_ir > u, U_0r > u}
                  / (pi * sum_r 1{U_0r > u})), with U the per-cell empirical
    CDF values.  Points where the reference never exceeds are omitted and
    flagged.
    """
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 2:
        raise ValueError("fields must be (replicates, cells)")
    u = np.asarray(u, dtype=np.float64)
    point = _are_estimate(_uniform_scores(fields), ref_index, psi, u)
    boots = np.full((n_boot, u.size), np.nan)
    n_r = fields.shape[0]
    for b in range(n_boot):
        idx = substream(seed, "boot", b).integers(0, n_r, size=n_r)
        boots[b] = _are_estimate(_uniform_scores(fields[idx]), ref_index, psi, u)
    lo, hi = _percentile_band(boots, point)
    return AreCurve(u=u, estimate=point, lo95=lo, hi95=hi,
                    defined=~np.isnan(point), psi=float(psi),
                    ref_index=int(ref_index), seed=seed, n_boot=n_boot)


def _percentile_band(boots: np.ndarray, point: np.ndarray):
    """95% percentile interval, widened to contain the point estimate."""
    with np.errstate(all="ignore"):
        valid = np.any(~np.isnan(boots), axis=0)
        lo = np.full(point.shape, np.nan)
        hi = np.full(point.shape, np.nan)
        lo[valid] = np.nanpercentile(boots[:, valid], 2.5, axis=0)
        hi[valid] = np.nanpercentile(boots[:, valid], 97.5, axis=0)
    lo = np.fmin(lo, point)
    hi = np.fmax(hi, point)
    return lo, hi


# ---------------------------------------------------------------------------
# tail-weighted CRPS
# ---------------------------------------------------------------------------

def nearest_rank_quantile(values: np.ndarray, q: float) -> float:
    """Nearest-rank empirical quantile: the ceil(q*n)-th order statistic."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(1, math.ceil(q * v.size))
    return float(v[k - 1])


def twcrps(ensemble: np.ndarray, obs: float, threshold: float | None = None) -> float:
    """Integral of (F_hat(z) - 1{z >= obs})^2 above the threshold.

    F_hat is the right-continuous empirical CDF of the ensemble; the integral
    is computed exactly by piecewise-constant integration over the sorted
    breakpoints.  ``threshold=None`` uses the ensemble's nearest-rank 90th
    percentile; ``-inf`` gives the unweighted score.
    """
    ens = np.sort(np.asarray(ensemble, dtype=np.float64).ravel())
    if ens.size < 1:
        raise ValueError("ensemble must be nonempty")
    obs = float(obs)
    if threshold is None:
        threshold = nearest_rank_quantile(ens, 0.9)
    pts = np.unique(np.concatenate([ens, [obs]]))
    lo = max(threshold, pts[0])
    pts = np.concatenate([[lo], pts[pts > lo]])
    if pts.size < 2:
        return 0.0
    # F and the indicator are constant on [pts[i], pts[i+1])
    f_vals = np.searchsorted(ens, pts[:-1], side="right") / ens.size
    ind = (pts[:-1] >= obs).astype(np.float64)
    widths = np.diff(pts)
    return float(np.sum((f_vals - ind) ** 2 * widths))


def twcrps_field(samples: np.ndarray, obs: np.ndarray,
                 threshold: float | None = None) -> TwcrpsField:
    """Scores per (time, site) for an ensemble (time, site, sample)."""
    samples = np.asarray(samples, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    n_t, n_s, _ = samples.shape
    if obs.shape != (n_t, n_s):
        raise ValueError("observation matrix must match the ensemble layout")
    scores = np.empty((n_t, n_s))
    thresholds = np.empty((n_t, n_s))
    for t in range(n_t):
        for j in range(n_s):
            ens = samples[t, j]
            thr = nearest_rank_quantile(ens, 0.9) if threshold is None else threshold
            thresholds[t, j] = thr
            scores[t, j] = twcrps(ens, obs[t, j], thr)
    return TwcrpsField(scores=scores, thresholds=thresholds)


def qq_data(obs: np.ndarray, ensemble: np.ndarray,
            q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Paired empirical quantiles of observations and emulations."""
    obs = np.asarray(obs, dtype=np.float64).ravel()
    ens = np.asarray(ensemble, dtype=np.float64).ravel()
    if obs.size == 0 or ens.size == 0:
        raise ValueError("both samples must be nonempty")
    q = np.asarray(q, dtype=np.float64)
    return np.quantile(obs, q), np.quantile(ens, q)
