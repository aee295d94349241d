"""Simulation data-generating process and its closed-form population oracles.

The process is

    C ~ categorical on ``c_support`` with ``c_probs``
    A | C ~ Bernoulli(expit(propensity_coef * C))
    M | A, C ~ N(b0 + bc C + ba A + bac A C, mediator_sd^2)
    Y | M, A, C ~ N(mu(M, A, C), outcome_sd^2)

with ``mu`` a cubic polynomial in ``M`` whose coefficients depend on ``(A, C)``.
Because ``mu`` is polynomial and ``M | A, C`` is Gaussian, every within-bin
quantity reduces to truncated-normal moments of order at most three.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import bisect
from scipy.special import expit, log_ndtr

from .core import BinningScheme, Dataset, NuisanceSet
from .errors import ConfigError, NumericalError

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

_MEDIATOR_KEYS = ("intercept", "c", "a", "ac")
_OUTCOME_KEYS = ("intercept", "c", "a", "ac", "m", "am", "mc2", "m2", "m3")


def _default_mediator_coefs():
    return {"intercept": 0.0, "c": -0.6, "a": 2.0, "ac": 0.5}


def _default_outcome_coefs():
    return {"intercept": 0.0, "c": 0.8, "a": 1.5, "ac": 0.55, "m": 0.0, "am": 0.75, "mc2": 0.20, "m2": 0.0, "m3": 0.1}


@dataclass(frozen=True)
class DgpSpec:
    c_support: tuple = (-2.0, -1.0, 0.0, 1.0, 2.0)
    c_probs: tuple = (0.15, 0.20, 0.18, 0.30, 0.17)
    propensity_coef: float = 0.5
    mediator_mean_coefs: dict = field(default_factory=_default_mediator_coefs)
    mediator_sd: float = 1.0
    outcome_coefs: dict = field(default_factory=_default_outcome_coefs)
    outcome_sd: float = 1.0
    a1: int = 1
    a0: int = 0

    def __post_init__(self):
        object.__setattr__(self, "c_support", tuple(float(v) for v in self.c_support))
        object.__setattr__(self, "c_probs", tuple(float(v) for v in self.c_probs))
        if len(self.c_support) != len(self.c_probs) or not self.c_support:
            raise ConfigError("c_support and c_probs must be non-empty and of equal length")
        if abs(sum(self.c_probs) - 1.0) > 1e-12 or min(self.c_probs) < 0:
            raise ConfigError("c_probs must be a probability vector")
        if not (self.mediator_sd > 0 and self.outcome_sd > 0):
            raise ConfigError("mediator_sd and outcome_sd must be positive")
        med = dict(self.mediator_mean_coefs)
        out = {k: 0.0 for k in _OUTCOME_KEYS}
        unknown = (set(med) - set(_MEDIATOR_KEYS)) | (set(self.outcome_coefs) - set(_OUTCOME_KEYS))
        if unknown:
            raise ConfigError(f"unknown coefficient names: {sorted(unknown)}")
        out.update(self.outcome_coefs)
        object.__setattr__(self, "mediator_mean_coefs", {k: float(med.get(k, 0.0)) for k in _MEDIATOR_KEYS})
        object.__setattr__(self, "outcome_coefs", {k: float(v) for k, v in out.items()})
        if {self.a0, self.a1} != {0, 1}:
            raise ConfigError("a0 and a1 must be 0 and 1 in some order")

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        d = asdict(self)
        d["c_support"] = list(self.c_support)
        d["c_probs"] = list(self.c_probs)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DgpSpec":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed DGP JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError("DGP JSON must be an object")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    # -- model pieces -------------------------------------------------------

    @property
    def c_levels(self) -> np.ndarray:
        return np.array(self.c_support)

    @property
    def c_weights(self) -> np.ndarray:
        return np.array(self.c_probs)

    def propensity(self, a, c):
        p1 = expit(self.propensity_coef * np.asarray(c, dtype=float))
        return np.where(np.asarray(a) == 1, p1, 1.0 - p1)

    def mediator_mean(self, a, c):
        b = self.mediator_mean_coefs
        a = np.asarray(a, dtype=float)
        c = np.asarray(c, dtype=float)
        return b["intercept"] + b["c"] * c + b["a"] * a + b["ac"] * a * c

    def outcome_poly(self, a, c):
        """Coefficients ``(p0, p1, p2, p3)`` of ``mu(m, a, c) = sum_j p_j m**j``."""
        o = self.outcome_coefs
        a = np.asarray(a, dtype=float)
        c = np.asarray(c, dtype=float)
        p0 = o["intercept"] + o["c"] * c + o["a"] * a + o["ac"] * a * c
        p1 = o["m"] + o["am"] * a + o["mc2"] * c * c
        p2 = o["m2"] + 0.0 * (a + c)
        p3 = o["m3"] + 0.0 * (a + c)
        return p0, p1, p2, p3

    def mu(self, m, a, c):
        p0, p1, p2, p3 = self.outcome_poly(a, c)
        m = np.asarray(m, dtype=float)
        return p0 + m * (p1 + m * (p2 + m * p3))

    def mu_dm2(self, m, a, c):
        """Second derivative of ``mu`` in ``m``."""
        _, _, p2, p3 = self.outcome_poly(a, c)
        return 2.0 * p2 + 6.0 * p3 * np.asarray(m, dtype=float)

    def mediator_density(self, m, a, c):
        z = (np.asarray(m, dtype=float) - self.mediator_mean(a, c)) / self.mediator_sd
        return np.exp(-0.5 * z * z - _LOG_SQRT_2PI) / self.mediator_sd

    # -- marginal law of M --------------------------------------------------

    def _mixture_components(self):
        c = self.c_levels
        w1 = self.c_weights * self.propensity(1, c)
        w0 = self.c_weights * self.propensity(0, c)
        means = np.concatenate([self.mediator_mean(0, c), self.mediator_mean(1, c)])
        return np.concatenate([w0, w1]), means

    def mixture_mean_sd(self) -> tuple[float, float]:
        w, means = self._mixture_components()
        mean = float(w @ means)
        second = float(w @ (means**2 + self.mediator_sd**2))
        return mean, math.sqrt(second - mean**2)

    def mixture_cdf(self, x):
        w, means = self._mixture_components()
        z = (np.asarray(x, dtype=float)[..., None] - means) / self.mediator_sd
        return np.exp(log_ndtr(z)) @ w

    def default_support(self) -> tuple[float, float]:
        mean, sd = self.mixture_mean_sd()
        return mean - 8.0 * sd, mean + 8.0 * sd


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------


def sample_dataset(spec: DgpSpec, n: int, seed) -> Dataset:
    """Draw ``n`` i.i.d. observations; identical ``(spec, n, seed)`` give identical data.

    ``seed`` may be an integer or a ``numpy.random.SeedSequence``.
    """
    if n < 1:
        raise ConfigError(f"n must be at least 1, got {n}")
    rng = np.random.default_rng(seed)
    c = rng.choice(spec.c_levels, size=n, p=spec.c_weights)
    a = (rng.random(n) < spec.propensity(1, c)).astype(np.int64)
    m = spec.mediator_mean(a, c) + spec.mediator_sd * rng.standard_normal(n)
    y = spec.mu(m, a, c) + spec.outcome_sd * rng.standard_normal(n)
    return Dataset(c, a, m, y)


# --------------------------------------------------------------------------
# Truncated-normal moments
# --------------------------------------------------------------------------


def _log_mass(alpha, beta):
    """``log(Phi(beta) - Phi(alpha))`` without cancellation in either tail."""
    upper = alpha > 0
    # reflect upper-tail intervals so both cases use the lower-tail formula
    lo = np.where(upper, -beta, alpha)
    hi = np.where(upper, -alpha, beta)
    la, lb = log_ndtr(lo), log_ndtr(hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        return lb + np.log1p(-np.exp(la - lb))


def _phi_term(x, j, log_z):
    """``x**j * phi(x) / Z`` with the convention that it vanishes at +-inf."""
    finite = np.isfinite(x)
    xs = np.where(finite, x, 0.0)
    val = xs**j * np.exp(-0.5 * xs * xs - _LOG_SQRT_2PI - log_z)
    return np.where(finite, val, 0.0)


def standardized_truncated_moments(alpha, beta):
    """Moments ``E[Z**j | alpha < Z < beta]`` for ``j = 0..3`` of a standard normal.

    Returns ``(moments, mass)`` where ``moments`` has a trailing axis of
    length 4 and ``mass = Phi(beta) - Phi(alpha)``. Uses the recursion
    ``M_j = (j-1) M_{j-2} + (alpha^{j-1} phi(alpha) - beta^{j-1} phi(beta)) / Z``.
    """
    alpha, beta = np.broadcast_arrays(np.asarray(alpha, dtype=float), np.asarray(beta, dtype=float))
    if np.any(alpha >= beta):
        raise NumericalError("truncation interval must satisfy lo < hi")
    log_z = _log_mass(alpha, beta)
    if np.any(~np.isfinite(log_z)):
        bad = np.argwhere(~np.isfinite(log_z).reshape(-1))[0, 0]
        raise NumericalError(
            f"zero-mass truncation interval (standardized [{alpha.reshape(-1)[bad]:.4g}, {beta.reshape(-1)[bad]:.4g}])"
        )
    m0 = np.ones_like(alpha)
    m1 = _phi_term(alpha, 0, log_z) - _phi_term(beta, 0, log_z)
    m2 = m0 + _phi_term(alpha, 1, log_z) - _phi_term(beta, 1, log_z)
    m3 = 2.0 * m1 + _phi_term(alpha, 2, log_z) - _phi_term(beta, 2, log_z)
    return np.stack([m0, m1, m2, m3], axis=-1), np.exp(log_z)


def truncnorm_moments(mu: float, sigma: float, lo: float, hi: float, order: int) -> float:
    """``E[M**order | lo < M < hi]`` for ``M ~ N(mu, sigma**2)``, ``order`` in 1..3."""
    if order not in (1, 2, 3):
        raise ConfigError("order must be 1, 2 or 3")
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    alpha, beta = (lo - mu) / sigma, (hi - mu) / sigma
    std, mass = standardized_truncated_moments(alpha, beta)
    if not mass > 1e-300:
        raise NumericalError(f"interval ({lo}, {hi}) has negligible mass {mass:.3g} under N({mu}, {sigma}^2)")
    # raw moments of mu + sigma Z by binomial expansion
    raw = sum(math.comb(order, i) * mu ** (order - i) * sigma**i * std[i] for i in range(order + 1))
    return float(raw)


def _shifted_poly(p, center, scale):
    """Coefficients ``q_j`` with ``sum_j p_j (center + scale z)**j = sum_j q_j z**j``."""
    p0, p1, p2, p3 = p
    q0 = p0 + center * (p1 + center * (p2 + center * p3))
    q1 = scale * (p1 + center * (2.0 * p2 + 3.0 * center * p3))
    q2 = scale**2 * (p2 + 3.0 * center * p3)
    q3 = scale**3 * p3
    return q0, q1, q2, q3


def _expect_poly(p, center, scale, std_moments):
    q = _shifted_poly(p, center, scale)
    return sum(q[j] * std_moments[..., j] for j in range(4))


# --------------------------------------------------------------------------
# Within-bin oracles
# --------------------------------------------------------------------------


def _bin_moments(spec: DgpSpec, scheme: BinningScheme, k, a, c):
    center = spec.mediator_mean(a, c)
    sd = spec.mediator_sd
    alpha = (scheme.lower(k) - center) / sd
    beta = (scheme.upper(k) - center) / sd
    std, mass = standardized_truncated_moments(alpha, beta)
    return center, std, mass


def true_g_k(spec: DgpSpec, scheme: BinningScheme, k, a, c):
    """``P(M in bin k | A=a, C=c)``."""
    center = spec.mediator_mean(a, c)
    alpha = (scheme.lower(k) - center) / spec.mediator_sd
    beta = (scheme.upper(k) - center) / spec.mediator_sd
    alpha, beta = np.broadcast_arrays(alpha, beta)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.exp(_log_mass(alpha, beta))


def true_m_k(spec: DgpSpec, scheme: BinningScheme, k, a, c):
    """Within-bin conditional mean ``E[M | bin k, A=a, C=c]``."""
    center, std, _ = _bin_moments(spec, scheme, k, a, c)
    return center + spec.mediator_sd * std[..., 1]


def true_m_k_var(spec: DgpSpec, scheme: BinningScheme, k, a, c):
    """Within-bin conditional variance of ``M``."""
    _, std, _ = _bin_moments(spec, scheme, k, a, c)
    return spec.mediator_sd**2 * (std[..., 2] - std[..., 1] ** 2)


def true_mu_k(spec: DgpSpec, scheme: BinningScheme, k, a_cond, a_eval, c):
    """``E[mu(M, a_eval, c) | bin k, A=a_cond, C=c]``.

    ``a_cond == a_eval`` gives the binned regression ``mu_k(a, c)``; the mixed
    case gives ``mu_{k,a_eval}(a_cond, c)``.
    """
    center, std, _ = _bin_moments(spec, scheme, k, a_cond, c)
    return _expect_poly(spec.outcome_poly(a_eval, c), center, spec.mediator_sd, std)


def _gaussian_moments():
    return np.array([1.0, 0.0, 1.0, 0.0])


def true_theta(spec: DgpSpec, c):
    """``theta(c) = E[mu(M, a1, c) | A=a0, C=c]`` from untruncated Gaussian moments."""
    center = spec.mediator_mean(spec.a0, c)
    return _expect_poly(spec.outcome_poly(spec.a1, c), center, spec.mediator_sd, _gaussian_moments())


def true_psi(spec: DgpSpec) -> float:
    return float(spec.c_weights @ true_theta(spec, spec.c_levels))


def true_gamma(spec: DgpSpec) -> float:
    """``p(a0) E(Y | a0) + sum_c theta(c) pi(a1 | c) p(c)``."""
    c = spec.c_levels
    p = spec.c_weights
    ey_a0 = _expect_poly(spec.outcome_poly(spec.a0, c), spec.mediator_mean(spec.a0, c), spec.mediator_sd, _gaussian_moments())
    first = float(p @ (spec.propensity(spec.a0, c) * ey_a0))
    second = float(p @ (true_theta(spec, c) * spec.propensity(spec.a1, c)))
    return first + second


def _bin_grid(scheme: BinningScheme, c):
    c = np.asarray(c, dtype=float)
    k = np.arange(1, scheme.K + 1)
    return k.reshape((-1,) + (1,) * c.ndim), c


def true_delta_h(spec: DgpSpec, scheme: BinningScheme, c):
    """Coarsening error ``theta_h(c) - theta(c)`` assembled bin by bin."""
    k, c = _bin_grid(scheme, c)
    a0, a1 = spec.a0, spec.a1
    g0 = true_g_k(spec, scheme, k, a0, c)
    live = g0 > 0
    kk, cc = np.broadcast_arrays(k, c)
    terms = np.zeros(g0.shape)
    mu_own = true_mu_k(spec, scheme, kk[live], a1, a1, cc[live])
    mu_cross = true_mu_k(spec, scheme, kk[live], a0, a1, cc[live])
    terms[live] = (mu_own - mu_cross) * g0[live]
    return terms.sum(axis=0)


def true_delta_tilde_h(spec: DgpSpec, scheme: BinningScheme, c):
    """Debiased coarsening error ``theta_tilde_h(c) - theta(c)``."""
    k, c = _bin_grid(scheme, c)
    a0, a1 = spec.a0, spec.a1
    g0 = true_g_k(spec, scheme, k, a0, c)
    live = g0 > 0
    kk, cc = np.broadcast_arrays(k, c)
    terms = np.zeros(g0.shape)
    mk = true_m_k(spec, scheme, kk[live], a0, cc[live])
    mu_cross = true_mu_k(spec, scheme, kk[live], a0, a1, cc[live])
    terms[live] = (spec.mu(mk, a1, cc[live]) - mu_cross) * g0[live]
    return terms.sum(axis=0)


# --------------------------------------------------------------------------
# Oracle binning and nuisance bundle
# --------------------------------------------------------------------------


def population_quantile_binning(spec: DgpSpec, K: int, support=None) -> BinningScheme:
    """Equal-frequency cuts of the marginal law of ``M``, found by bisection on its CDF."""
    if K < 2:
        raise ConfigError(f"K must be at least 2, got {K}")
    support = spec.default_support() if support is None else support
    lo, hi = support
    cuts = [
        bisect(lambda x, q=j / K: float(spec.mixture_cdf(x)) - q, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=500)
        for j in range(1, K)
    ]
    return BinningScheme(np.array(cuts), support)


def oracle_nuisances(spec: DgpSpec, scheme: BinningScheme | None = None) -> NuisanceSet:
    """The true nuisance functions of ``spec`` (binned pieces require ``scheme``)."""
    sd = spec.mediator_sd

    def g_amc(a, m, c):
        m = np.asarray(m, dtype=float)
        z1 = (m - spec.mediator_mean(1, c)) / sd
        z0 = (m - spec.mediator_mean(0, c)) / sd
        logit = spec.propensity_coef * np.asarray(c, dtype=float) - 0.5 * (z1 * z1 - z0 * z0)
        p1 = expit(logit)
        return np.where(np.asarray(a) == 1, p1, 1.0 - p1)

    binned = {}
    if scheme is not None:
        binned = dict(
            mu_k=lambda k, a, c: true_mu_k(spec, scheme, k, a, a, c),
            g_k=lambda k, a, c: true_g_k(spec, scheme, k, a, c),
            m_k=lambda k, a, c: true_m_k(spec, scheme, k, a, c),
        )
    return NuisanceSet(
        mu=spec.mu,
        mu_k=binned.get("mu_k"),
        g_k=binned.get("g_k"),
        m_k=binned.get("m_k"),
        pi=spec.propensity,
        g_amc=g_amc,
        f_mac=spec.mediator_density,
        support=scheme.support if scheme is not None else spec.default_support(),
        scheme=scheme,
        a0=spec.a0,
        a1=spec.a1,
        c_levels=spec.c_levels,
        c_probs=spec.c_weights,
        metadata={"oracle": True, "spec": spec},
    )
