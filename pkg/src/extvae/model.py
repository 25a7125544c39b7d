"""The conditional extremes autoencoder.

Encoder MLP (softplus heads), linear condition map into the latent space,
log-scale reparameterization, latent/condition interleaving, a 1-D CNN that
decodes three consecutive fused time steps into nonnegative coefficients of a
fixed latent-space RBF expansion of the tilting field, a strictly positive
learnable site-by-knot weight matrix, and the penalized Monte-Carlo objective
built from the exact log-Laplace likelihood, tilted-stable prior, and
log-normal posterior terms.

All forward math is written against :mod:`extvae.autodiff` ops, so it runs
identically under the gradient tape and in plain numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .seeds import substream

_HALF_LOG_PI = 0.5 * math.log(math.pi)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# floor applied to Wendland weights before inverse-softplus initialization;
# exact zeros have no finite preimage
_W_INIT_FLOOR = 1e-3

# smallest magnitude the penalty denominator is allowed to take
PENALTY_DENOM_FLOOR = 1e-3


@dataclass(frozen=True)
class HyperParams:
    """Model and training hyperparameters.

    ``alpha`` is fixed at 1/2 (the only stability index with a closed-form
    latent density); ``alpha0`` is a tuning constant selected by grid search,
    not a gradient-trained parameter.
    """

    latent_dim: int = 16              # K
    n_theta_basis: int = 9            # M
    alpha0: float = 30.0
    alpha: float = 0.5
    rho0: float = 0.1
    mc_draws: int = 1                 # L
    enc_widths: tuple = (64,)
    conv_channels: int = 40
    kernel_len: int = 3
    pool_len: int = 2
    learning_rate: float = 1e-3
    epochs: int = 1000
    seed: int = 0
    penalty_abs: bool = False
    fix_w: bool = False

    def __post_init__(self):
        if self.latent_dim < 1 or self.n_theta_basis < 1:
            raise ValueError("latent_dim and n_theta_basis must be >= 1")
        if self.n_theta_basis > self.latent_dim:
            raise ValueError("n_theta_basis must not exceed latent_dim")
        if self.alpha != 0.5:
            raise ValueError("only alpha = 1/2 is supported")
        if self.alpha0 <= 0 or not np.isfinite(self.alpha0):
            raise ValueError("alpha0 must be positive and finite")
        if self.rho0 < 0:
            raise ValueError("rho0 must be >= 0")
        if self.mc_draws < 1:
            raise ValueError("mc_draws must be >= 1")
        if (2 * self.latent_dim) % self.pool_len != 0:
            raise ValueError("pool_len must divide 2*latent_dim")
        if self.conv_channels < 1 or self.kernel_len < 1:
            raise ValueError("conv geometry must be positive")


def build_phi(knots: np.ndarray | None, latent_dim: int, n_basis: int) -> np.ndarray:
    """Fixed nonnegative RBF matrix mapping basis coefficients to knot space.

    Gaussian bumps centered on an evenly spaced subset of the knots, bandwidth
    equal to the knot spacing.  When no knot layout is supplied the knots are
    placed on a virtual unit lattice (square if latent_dim is a perfect square,
    a line otherwise).
    """
    k = latent_dim
    if knots is None:
        side = int(round(math.sqrt(k)))
        if side * side == k:
            xs = np.arange(side, dtype=np.float64)
            gx, gy = np.meshgrid(xs, xs)
            knots = np.column_stack([gx.ravel(), gy.ravel()])
        else:
            knots = np.column_stack([np.arange(k, dtype=np.float64), np.zeros(k)])
    knots = np.asarray(knots, dtype=np.float64)
    if knots.shape[0] != k:
        raise ValueError("knot count must equal latent_dim")

    d = np.sqrt(np.sum((knots[:, None, :] - knots[None, :, :]) ** 2, axis=2))
    if k > 1:
        np.fill_diagonal(d, np.inf)
        bandwidth = float(np.median(np.min(d, axis=1)))
    else:
        bandwidth = 1.0

    side_m = int(round(math.sqrt(n_basis)))
    if side_m * side_m == n_basis and knots.shape[1] == 2:
        lo = knots.min(axis=0)
        hi = knots.max(axis=0)
        xs = np.linspace(lo[0], hi[0], side_m) if side_m > 1 else [(lo[0] + hi[0]) / 2]
        ys = np.linspace(lo[1], hi[1], side_m) if side_m > 1 else [(lo[1] + hi[1]) / 2]
        gx, gy = np.meshgrid(xs, ys)
        centers = np.column_stack([gx.ravel(), gy.ravel()])
    else:
        idx = np.unique(np.round(np.linspace(0, k - 1, n_basis)).astype(int))
        while idx.size < n_basis:  # top up if rounding collided
            missing = np.setdiff1d(np.arange(k), idx)
            idx = np.sort(np.append(idx, missing[: n_basis - idx.size]))
        centers = knots[idx]

    dd = np.sum((knots[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return np.exp(-dd / (2.0 * bandwidth**2))


@dataclass
class ModelConfig:
    """Immutable structure: sizes, fixed RBF matrix, optional fixed weights."""

    n_sites: int
    hyper: HyperParams
    knots: np.ndarray | None = None
    sites: np.ndarray | None = None
    wendland_radius: float | None = None
    fixed_w: np.ndarray | None = None
    sever_condition: bool = False
    phi: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.phi is None:
            self.phi = build_phi(self.knots, self.hyper.latent_dim,
                                 self.hyper.n_theta_basis)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if np.any(self.phi < 0):
            raise ValueError("phi must be nonnegative")
        if self.hyper.fix_w:
            if self.fixed_w is None:
                raise ValueError("fix_w requires an explicit fixed weight matrix")
            self.fixed_w = np.asarray(self.fixed_w, dtype=np.float64)
            if self.fixed_w.shape != (self.n_sites, self.hyper.latent_dim):
                raise ValueError("fixed weight matrix has the wrong shape")
            if np.any(self.fixed_w < 0) or np.any(~np.any(self.fixed_w > 0, axis=1)):
                raise ValueError("fixed weights must be nonnegative with positive rows")

    @property
    def pooled_len(self) -> int:
        return (2 * self.hyper.latent_dim) // self.hyper.pool_len


@dataclass
class ModelParameters:
    """A trained (or initialized) model: structure plus learnable values."""

    config: ModelConfig
    params: ParamVector


@dataclass
class LatentSample:
    """One reparameterized latent draw and everything that generated it."""

    z: np.ndarray
    eps: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    g_c: np.ndarray

    @property
    def log_z(self) -> np.ndarray:
        return np.log(self.mu) + self.g_c + self.sigma * self.eps

    @property
    def mean_log(self) -> np.ndarray:
        return np.log(self.mu) + self.g_c


# ---------------------------------------------------------------------------
# parameter layout and initialization
# ---------------------------------------------------------------------------

def _encoder_dims(cfg: ModelConfig) -> list[int]:
    return [cfg.n_sites, *cfg.hyper.enc_widths, 2 * cfg.hyper.latent_dim]


def param_template(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable component."""
    h = cfg.hyper
    dims = _encoder_dims(cfg)
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(len(dims) - 1):
        shapes[f"enc_w{i}"] = (dims[i], dims[i + 1])
        shapes[f"enc_b{i}"] = (dims[i + 1],)
    shapes["cond_map"] = (h.latent_dim,)
    shapes["conv_k"] = (h.conv_channels, 3, h.kernel_len)
    shapes["conv_b"] = (h.conv_channels,)
    shapes["xi_w"] = (h.conv_channels * cfg.pooled_len, h.n_theta_basis)
    shapes["xi_b"] = (h.n_theta_basis,)
    if not h.fix_w:
        shapes["w_raw"] = (cfg.n_sites, h.latent_dim)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Depends only on sizes and geometry, never on the number of time steps."""
    return sum(int(np.prod(s)) for s in param_template(cfg).values())


def default_wendland_w(cfg: ModelConfig) -> np.ndarray | None:
    from .fieldsim import wendland_basis  # local import to avoid a cycle

    if cfg.sites is None or cfg.knots is None or cfg.wendland_radius is None:
        return None
    return wendland_basis(cfg.sites, cfg.knots, cfg.wendland_radius)


def init_params(cfg: ModelConfig, seed: int) -> ParamVector:
    """Symmetric uniform fan-in init; condition map starts at zero so the
    condition's influence grows from neutral; weights start at the Wendland
    layout when the geometry is known."""
    parts: dict[str, np.ndarray] = {}
    dims = _encoder_dims(cfg)
    for i in range(len(dims) - 1):
        rng = substream(seed, "init-enc", i)
        bound = 1.0 / math.sqrt(dims[i])
        parts[f"enc_w{i}"] = rng.uniform(-bound, bound, size=(dims[i], dims[i + 1]))
        parts[f"enc_b{i}"] = rng.uniform(-bound, bound, size=dims[i + 1])
    h = cfg.hyper
    parts["cond_map"] = np.zeros(h.latent_dim)
    rng = substream(seed, "init-conv")
    bound = 1.0 / math.sqrt(3 * h.kernel_len)
    parts["conv_k"] = rng.uniform(-bound, bound, size=(h.conv_channels, 3, h.kernel_len))
    parts["conv_b"] = rng.uniform(-bound, bound, size=h.conv_channels)
    rng = substream(seed, "init-dense")
    fan_in = h.conv_channels * cfg.pooled_len
    bound = 1.0 / math.sqrt(fan_in)
    parts["xi_w"] = rng.uniform(-bound, bound, size=(fan_in, h.n_theta_basis))
    parts["xi_b"] = rng.uniform(-bound, bound, size=h.n_theta_basis)
    if not h.fix_w:
        w0 = default_wendland_w(cfg)
        if w0 is None:
            w0 = np.full((cfg.n_sites, h.latent_dim), 0.1)
        parts["w_raw"] = ad.softplus_inverse(np.maximum(w0, _W_INIT_FLOOR))
    return ParamVector.build(parts)


def weight_matrix(cfg: ModelConfig, p):
    """Strictly positive site-by-knot weights (softplus of the raw matrix),
    or the fixed matrix when weights are not learned."""
    if cfg.hyper.fix_w:
        return cfg.fixed_w
    return ad.softplus(p["w_raw"])


# ---------------------------------------------------------------------------
# forward components
# ---------------------------------------------------------------------------

def encode(cfg: ModelConfig, p, x):
    """Field -> (mu, sigma), both strictly positive, shape (..., K)."""
    single = np.ndim(ad.value_of(x)) == 1
    h = x[None, :] if single else x
    n_layers = len(_encoder_dims(cfg)) - 1
    for i in range(n_layers):
        h = ad.softplus(ad.add(ad.matmul(h, p[f"enc_w{i}"]), p[f"enc_b{i}"]))
    k = cfg.hyper.latent_dim
    mu = h[:, :k]
    sigma = h[:, k:]
    if single:
        return mu[0], sigma[0]
    return mu, sigma


def condition_shift(p, c):
    """g(c) = c * a for a scalar condition: shape (T, K) for a (T,) series."""
    c = np.asarray(c, dtype=np.float64)
    return ad.mul(c.reshape(-1, 1), p["cond_map"])


def reparam_sample(mu, sigma, g_c, eps) -> LatentSample:
    """z = exp(log mu + g_c + sigma*eps); raises naming the first coordinate
    that overflows."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(mu <= 0) or np.any(sigma < 0):
        raise ValueError("mu must be > 0 and sigma >= 0")
    log_z = np.log(mu) + g_c + sigma * np.asarray(eps, dtype=np.float64)
    with np.errstate(over="ignore"):
        z = np.exp(log_z)
    if not np.all(np.isfinite(z)):
        bad = np.argwhere(~np.isfinite(z))[0]
        raise OverflowError(f"latent sample overflowed at coordinate {tuple(bad)}")
    return LatentSample(z=z, eps=np.asarray(eps, dtype=np.float64),
                        mu=mu, sigma=sigma, g_c=np.asarray(g_c, dtype=np.float64))


def fuse(z, c):
    """Interleave latent coordinates with the condition:
    (z_1, c, z_2, c, ..., z_K, c)."""
    zv = ad.value_of(z)
    if zv.ndim == 1:
        k = zv.shape[0]
        c_col = np.full((1, k), float(np.asarray(c)))
        out = ad.reshape(ad.stack([ad.reshape(z, (1, k)), c_col], axis=2), (2 * k,))
        return out
    t, k = zv.shape
    c_arr = np.broadcast_to(np.asarray(c, dtype=np.float64).reshape(t, 1), (t, k))
    return ad.reshape(ad.stack([z, c_arr], axis=2), (t, 2 * k))


def unfuse(fused):
    """Extract the latent slots (odd positions hold the condition)."""
    fv = ad.value_of(fused)
    return fused[..., 0::2] if isinstance(fused, np.ndarray) else ad.getitem(
        fused, (Ellipsis, slice(0, fv.shape[-1], 2)))


def _xi_from_stacked(cfg: ModelConfig, p, stacked):
    """(T, 3, 2K) windows -> (T, M) nonnegative coefficients."""
    h = cfg.hyper
    conv = ad.conv1d_same(stacked, p["conv_k"], p["conv_b"])
    pooled = ad.maxpool1d(conv, h.pool_len)
    t = ad.value_of(pooled).shape[0]
    flat = ad.reshape(pooled, (t, h.conv_channels * cfg.pooled_len))
    return ad.softplus(ad.add(ad.matmul(flat, p["xi_w"]), p["xi_b"]))


def decode_xi(cfg: ModelConfig, p, fused_prev, fused_curr, fused_next):
    """Three consecutive fused vectors -> M nonnegative coefficients."""
    shapes = {ad.value_of(v).shape for v in (fused_prev, fused_curr, fused_next)}
    if len(shapes) != 1:
        raise ValueError("the three fused vectors must have equal length")
    single = ad.value_of(fused_curr).ndim == 1
    if single:
        two_k = ad.value_of(fused_curr).shape[0]
        parts = [ad.reshape(v, (1, two_k)) for v in (fused_prev, fused_curr, fused_next)]
        stacked = ad.stack(parts, axis=1)
        out = _xi_from_stacked(cfg, p, stacked)
        return out[0]
    stacked = ad.stack([fused_prev, fused_curr, fused_next], axis=1)
    return _xi_from_stacked(cfg, p, stacked)


def theta_from_xi(xi, phi):
    """theta = phi @ xi, nonnegative whenever both factors are."""
    phi = np.asarray(phi, dtype=np.float64)
    single = ad.value_of(xi).ndim == 1
    if single:
        out = ad.matmul(ad.reshape(xi, (1, -1)), phi.T)
        return out[0]
    return ad.matmul(xi, phi.T)


def decode_y(z, w):
    """Linear reconstruction y = W z (> 0 for positive z and admissible W)."""
    single = ad.value_of(z).ndim == 1
    if single:
        out = ad.matmul(ad.reshape(z, (1, -1)), _transpose(w))
        return out[0]
    return ad.matmul(z, _transpose(w))


def _transpose(w):
    if isinstance(w, ad.Var):
        return ad.Var(w.value.T, ((w, lambda g: g.T),), "transpose")
    return np.asarray(w).T


# ---------------------------------------------------------------------------
# objective terms
# ---------------------------------------------------------------------------

def loglik(x, y, alpha0: float):
    """Log-Laplace reconstruction log-likelihood.

    sum_j [ log(alpha0) - log 2 - log x_j - alpha0 * |log(x_j / y_j)| ],
    summed over the last axis (sites); scalar for 1-D input, (T,) otherwise.
    """
    xv = np.asarray(ad.value_of(x), dtype=np.float64)
    if np.any(xv <= 0):
        raise ValueError("observations must be strictly positive")
    const = (math.log(alpha0) - math.log(2.0))
    log_x = np.log(xv)
    log_y = ad.log(y)
    dev = ad.absolute(ad.sub(log_x, log_y))
    axis = -1
    n_sites = xv.shape[-1]
    return ad.sub(
        const * n_sites - np.sum(log_x, axis=axis),
        ad.mul(alpha0, ad.vsum(dev, axis=axis)),
    )


def log_prior(z, theta, log_z=None):
    """Tilted-stable prior log-density summed over knots (alpha = 1/2)."""
    lz = ad.log(z) if log_z is None else log_z
    term = (
        -math.log(2.0)
        - _HALF_LOG_PI
        + ad.sqrt(theta)
        - 1.5 * lz
        - ad.mul(theta, z)
        - 0.25 / z
    )
    return ad.vsum(term, axis=-1)


def log_q(z, m=None, sigma=None, log_z=None):
    """Exact log-normal posterior log-density summed over knots.

    Accepts a LatentSample or explicit (z, m, sigma); no '+ const' shortcuts,
    so the value (not just the gradient) is well defined.
    """
    if isinstance(z, LatentSample):
        sample = z
        return log_q(sample.z, sample.mean_log, sample.sigma)
    if np.any(ad.value_of(sigma) <= 0):
        raise ValueError("sigma must be > 0")
    lz = ad.log(z) if log_z is None else log_z
    dev = ad.sub(lz, m)
    term = (
        -lz
        - ad.log(sigma)
        - _HALF_LOG_2PI
        - ad.div(ad.mul(dev, dev), ad.mul(2.0, ad.mul(sigma, sigma)))
    )
    return ad.vsum(term, axis=-1)


def _guarded_denominator(dc: np.ndarray) -> np.ndarray:
    mag = np.maximum(np.abs(dc), PENALTY_DENOM_FLOOR)
    return np.where(dc < 0, -mag, mag)


def penalty(xi_t, xi_prev, c_t: float, c_prev: float, rho0: float,
            absolute: bool = False):
    """Temporal continuity penalty between consecutive coefficient vectors.

    As printed the signed differences are divided by the (guarded) condition
    increment; the absolute-value variant penalizes |change| instead.
    """
    dc = float(np.asarray(c_t)) - float(np.asarray(c_prev))
    denom = float(_guarded_denominator(np.asarray(dc)))
    diff = ad.sub(xi_t, xi_prev)
    if absolute:
        return ad.mul(rho0 / abs(denom), ad.vsum(ad.absolute(diff), axis=-1))
    return ad.mul(rho0 / denom, ad.vsum(diff, axis=-1))


# ---------------------------------------------------------------------------
# the penalized objective
# ---------------------------------------------------------------------------

def _window_indices(times: np.ndarray, n_t: int) -> tuple[np.ndarray, np.ndarray]:
    prev = np.clip(times - 1, 0, n_t - 1)
    nxt = np.clip(times + 1, 0, n_t - 1)
    return prev, nxt


def penalized_elbo(cfg: ModelConfig, p, x: np.ndarray, c: np.ndarray,
                   eps: np.ndarray, batch: np.ndarray | None = None):
    """Monte-Carlo penalized objective summed over the batch time steps.

    For each draw l: z is sampled on the log scale, the three-step fused
    windows (boundary steps replicated) feed the CNN coefficients, and the
    per-time term is loglik + log_prior - log_q minus the temporal penalty
    against the preceding time step (skipped at t = 0).  Minibatches pull in
    the neighboring time steps they need, so the value matches the full-batch
    computation restricted to those rows.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n_t = x.shape[0]
    if batch is None:
        batch = np.arange(n_t)
    batch = np.sort(np.asarray(batch, dtype=np.intp))
    l_draws = eps.shape[0]

    needed = np.unique(np.clip(
        np.concatenate([batch - 2, batch - 1, batch, batch + 1]), 0, n_t - 1))
    pos = np.full(n_t, -1, dtype=np.intp)
    pos[needed] = np.arange(needed.size)

    xs = x[needed]
    cs = c[needed]
    cond = np.zeros_like(cs) if cfg.sever_condition else cs

    mu, sigma = encode(cfg, p, xs)
    m = ad.add(ad.log(mu), condition_shift(p, cond))
    w = weight_matrix(cfg, p)

    # xi is needed at the batch times and at each predecessor for the penalty
    xi_times = np.unique(np.concatenate([batch, np.clip(batch - 1, 0, n_t - 1)]))
    prev_t, next_t = _window_indices(xi_times, n_t)
    xi_pos = np.full(n_t, -1, dtype=np.intp)
    xi_pos[xi_times] = np.arange(xi_times.size)

    has_prev = batch >= 1
    pen_t = batch[has_prev]
    dc = c[pen_t] - c[pen_t - 1]
    pen_scale = cfg.hyper.rho0 / _guarded_denominator(dc)   # (n_pen,)

    alpha0 = cfg.hyper.alpha0
    phi = cfg.phi
    total = None
    for l in range(l_draws):
        es = eps[l][needed]
        lz = ad.add(m, ad.mul(sigma, es))
        z = ad.exp(lz)
        fused = fuse(z, cond)

        stacked = ad.stack(
            [ad.take_rows(fused, pos[prev_t]),
             ad.take_rows(fused, pos[xi_times]),
             ad.take_rows(fused, pos[next_t])],
            axis=1,
        )
        xi = _xi_from_stacked(cfg, p, stacked)               # (n_xi, M)
        theta = ad.matmul(xi, phi.T)                         # (n_xi, K)

        bpos = pos[batch]
        z_b = ad.take_rows(z, bpos)
        lz_b = ad.take_rows(lz, bpos)
        y_b = ad.matmul(z_b, _transpose(w))
        ll = loglik(x[batch], y_b, alpha0)
        lp = log_prior(z_b, ad.take_rows(theta, xi_pos[batch]), log_z=lz_b)
        lq = log_q(z_b, ad.take_rows(m, bpos), ad.take_rows(sigma, bpos), log_z=lz_b)
        term = ad.vsum(ad.sub(ad.add(ll, lp), lq))

        if pen_t.size and cfg.hyper.rho0 > 0:
            dxi = ad.sub(ad.take_rows(xi, xi_pos[pen_t]),
                         ad.take_rows(xi, xi_pos[pen_t - 1]))
            if cfg.hyper.penalty_abs:
                rho = ad.vsum(ad.mul(np.abs(pen_scale).reshape(-1, 1),
                                     ad.absolute(dxi)))
            else:
                rho = ad.vsum(ad.mul(pen_scale.reshape(-1, 1), dxi))
            term = ad.sub(term, rho)
        total = term if total is None else ad.add(total, term)
    return ad.div(total, float(l_draws))


def elbo_kink_values(cfg: ModelConfig, pv: ParamVector, x, c, eps,
                     batch=None) -> np.ndarray:
    """Arguments of the objective's absolute values (the reconstruction
    log-ratios), used to pre-filter finite-difference comparisons."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n_t = x.shape[0]
    if batch is None:
        batch = np.arange(n_t)
    batch = np.sort(np.asarray(batch, dtype=np.intp))
    p = ad.ArrayView(pv)
    cond = np.zeros_like(c) if cfg.sever_condition else c
    mu, sigma = encode(cfg, p, x)
    m = np.log(mu) + cond.reshape(-1, 1) * p["cond_map"]
    w = weight_matrix(cfg, p)
    out = []
    for l in range(eps.shape[0]):
        z = np.exp(m + sigma * eps[l])
        y = z[batch] @ np.asarray(w).T
        out.append(np.log(x[batch]) - np.log(y))
    return np.concatenate([o.ravel() for o in out])


def draw_eps(cfg: ModelConfig, n_t: int, seed, label="elbo-eps") -> np.ndarray:
    """(L, n_t, K) standard-normal draws from a derived substream."""
    rng = substream(seed, label)
    return rng.standard_normal((cfg.hyper.mc_draws, n_t, cfg.hyper.latent_dim))


def make_objective(cfg: ModelConfig, x, c, eps, batch=None):
    """Closure suitable for the gradient drivers: view -> scalar."""
    def objective(p):
        return penalized_elbo(cfg, p, x, c, eps, batch=batch)
    return objective


def severed_copy(cfg: ModelConfig) -> ModelConfig:
    return replace(cfg, sever_condition=True, phi=cfg.phi)
