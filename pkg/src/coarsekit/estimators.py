"""Sample-level estimators of the mediation and front-door functionals.

Each estimator is computed from per-row pieces: the plug-in value
``theta(C_i)`` and, for one-step estimators, the uncentered summand whose
sample mean is the estimate. Influence values are ``summand - plugin``, so
``point == plugin + mean(influence)`` holds by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import functionals as fn
from .core import (
    BinningScheme,
    Dataset,
    EstimateResult,
    KernelSpec,
    NuisanceSet,
    default_support,
    make_equal_width_binning,
    make_quantile_binning,
)
from .errors import CoarsekitError, ConfigError, FitError
from .nuisance import MisspecConfig, fit_nuisances

logger = logging.getLogger(__name__)

CLIP = 1e-6
Z95 = 1.96


class EstimatorId(str, Enum):
    PSI_PLUGIN_EXACT = "psi_plugin_exact"
    PSI_H_PLUGIN = "psi_h_plugin"
    PSI_TILDE_H_PLUGIN = "psi_tilde_h_plugin"
    PSI_TILDE_HB_PLUGIN = "psi_tilde_hb_plugin"
    PSI_ONESTEP = "psi_onestep"
    PSI_H_ONESTEP = "psi_h_onestep"
    PSI_TILDE_H1_ONESTEP = "psi_tilde_h1_onestep"
    PSI_TILDE_H2_ONESTEP = "psi_tilde_h2_onestep"
    PSI_TILDE_HB_ONESTEP_FIXED = "psi_tilde_hb_onestep_fixed"
    PSI_TILDE_HB_ONESTEP = "psi_tilde_hb_onestep"
    GAMMA_H_PLUGIN = "gamma_h_plugin"
    GAMMA_TILDE_H_PLUGIN = "gamma_tilde_h_plugin"
    GAMMA_SEQ_PLUGIN = "gamma_seq_plugin"

    @classmethod
    def parse(cls, text: str) -> "EstimatorId":
        try:
            return cls(text.strip())
        except ValueError:
            raise ConfigError(f"unknown estimator {text!r}; valid ids: {', '.join(e.value for e in cls)}") from None


E = EstimatorId

# nuisance components each estimator reads
NEEDS = {
    E.PSI_PLUGIN_EXACT: {"mu", "f_mac"},
    E.PSI_H_PLUGIN: {"mu_k", "g_k"},
    E.PSI_TILDE_H_PLUGIN: {"mu", "m_k", "g_k"},
    E.PSI_TILDE_HB_PLUGIN: {"mu", "m_k", "g_k", "f_mac"},
    E.PSI_ONESTEP: {"mu", "f_mac", "pi", "g_amc"},
    E.PSI_H_ONESTEP: {"mu_k", "g_k", "pi"},
    E.PSI_TILDE_H1_ONESTEP: {"mu", "m_k", "g_k", "pi"},
    E.PSI_TILDE_H2_ONESTEP: {"mu", "m_k", "g_k", "g_amc", "pi"},
    E.PSI_TILDE_HB_ONESTEP_FIXED: {"mu", "m_k", "g_k", "pi", "f_mac"},
    E.PSI_TILDE_HB_ONESTEP: {"mu", "m_k", "g_k", "pi", "f_mac"},
    E.GAMMA_H_PLUGIN: {"mu_k", "g_k", "pi"},
    E.GAMMA_TILDE_H_PLUGIN: {"mu", "m_k", "g_k", "pi"},
    E.GAMMA_SEQ_PLUGIN: {"mu", "pi"},
}

# plug-ins whose optional Wald interval borrows the matching one-step summands
PLUGIN_PARTNER = {
    E.PSI_PLUGIN_EXACT: E.PSI_ONESTEP,
    E.PSI_H_PLUGIN: E.PSI_H_ONESTEP,
    E.PSI_TILDE_H_PLUGIN: E.PSI_TILDE_H2_ONESTEP,
    E.PSI_TILDE_HB_PLUGIN: E.PSI_TILDE_HB_ONESTEP_FIXED,
}

NEEDS_KERNEL = {E.PSI_TILDE_HB_PLUGIN, E.PSI_TILDE_HB_ONESTEP_FIXED, E.PSI_TILDE_HB_ONESTEP}


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


class _Clipper:
    """Clips probabilities into ``[CLIP, 1 - CLIP]`` and counts events on used entries."""

    def __init__(self):
        self.count = 0

    def __call__(self, p, used=None):
        p = np.asarray(p, dtype=float)
        out = np.clip(p, CLIP, 1.0 - CLIP)
        hit = out != p
        if used is not None:
            hit = hit & used
        self.count += int(np.count_nonzero(hit))
        return out


def _per_level(fun, c, chunk: int = 512):
    """Evaluate ``fun`` on the distinct values of ``c`` and scatter back."""
    uniq, inv = np.unique(np.asarray(c, dtype=float), return_inverse=True)
    vals = np.concatenate([np.asarray(fun(uniq[i : i + chunk]), dtype=float) for i in range(0, len(uniq), chunk)])
    return vals[inv]


def _theta_rows(variant: str, data: Dataset, Q: NuisanceSet, scheme, kernel):
    if variant == "exact":
        return _per_level(lambda c: fn.theta(Q, c), data.c)
    if variant == "coarsened":
        return _per_level(lambda c: fn.theta_h(Q, scheme, c), data.c)
    if variant == "debiased":
        return _per_level(lambda c: fn.theta_tilde_h(Q, scheme, c), data.c)
    if variant == "smoothed":
        if kernel is None:
            raise ConfigError("smoothed variant needs a kernel")
        return _per_level(lambda c: fn.theta_tilde_hb(Q, kernel, scheme, c), data.c)
    raise ConfigError(f"unknown plug-in variant {variant!r}")


@dataclass
class _Rows:
    """Per-row pieces of an estimator."""

    plugin: np.ndarray
    summand: np.ndarray | None = None
    clip_count: int = 0
    extras: dict = field(default_factory=dict)


def _finish(eid: str, rows: _Rows, ci: str) -> EstimateResult:
    plugin = float(np.mean(rows.plugin))
    if rows.summand is None:
        return EstimateResult(eid, plugin, clip_count=rows.clip_count, extras=rows.extras)
    point = float(np.mean(rows.summand))
    influence = rows.summand - plugin
    se = ci_lo = ci_hi = None
    method = "none"
    n = len(rows.summand)
    if ci == "influence_function" and n >= 2:
        se = float(np.std(rows.summand, ddof=1) / np.sqrt(n))
        ci_lo, ci_hi, method = point - Z95 * se, point + Z95 * se, "influence_function"
    return EstimateResult(eid, point, se, ci_lo, ci_hi, method, rows.clip_count, plugin, influence, rows.extras)


def _bins_of(data: Dataset, scheme: BinningScheme):
    if scheme is None:
        raise ConfigError("a binning scheme is required")
    return scheme.assign(data.m)


# --------------------------------------------------------------------------
# Row-level estimator cores
# --------------------------------------------------------------------------


def _plugin_rows(variant, data, Q, scheme=None, kernel=None) -> _Rows:
    return _Rows(_theta_rows(variant, data, Q, scheme, kernel))


def _eq15_rows(data: Dataset, Q: NuisanceSet, theta_rows) -> _Rows:
    a1, a0 = Q.a1, Q.a0
    clip = _Clipper()
    treated, control = data.a == a1, data.a == a0
    pi0 = clip(Q.pi(a0, data.c))
    g1 = clip(Q.g_amc(a1, data.m, data.c), used=treated)
    g0 = np.asarray(Q.g_amc(a0, data.m, data.c), dtype=float)
    mu1 = Q.mu(data.m, a1, data.c)
    summand = (
        treated / pi0 * (g0 / g1) * (data.y - mu1)
        + control / pi0 * (mu1 - theta_rows)
        + theta_rows
    )
    return _Rows(theta_rows, summand, clip.count)


def _eq16_rows(data: Dataset, Q: NuisanceSet, scheme, theta_rows, mu_at_bin) -> _Rows:
    """Coarsened one-step summand; ``mu_at_bin(k, c)`` stands in for ``mu_k(a1, c)``."""
    a1, a0 = Q.a1, Q.a0
    clip = _Clipper()
    k = _bins_of(data, scheme)
    treated, control = data.a == a1, data.a == a0
    pi1 = clip(Q.pi(a1, data.c), used=treated)
    pi0 = clip(Q.pi(a0, data.c), used=control)
    gk1 = clip(Q.g_k(k, a1, data.c), used=treated)
    gk0 = np.asarray(Q.g_k(k, a0, data.c), dtype=float)
    muk = mu_at_bin(k, data.c)
    summand = (
        np.where(treated, gk0 / gk1 * (data.y - muk) / pi1, 0.0)
        + np.where(control, (muk - theta_rows) / pi0, 0.0)
        + theta_rows
    )
    return _Rows(theta_rows, summand, clip.count)


def _smoothed_rows(data: Dataset, Q: NuisanceSet, scheme, kernel: KernelSpec, fixed_centers: bool, psi=None) -> _Rows:
    """Smoothed one-step summand.

    ``psi`` only matters for :func:`eif_smoothed`; the summand itself is
    uncentered.
    """
    a1, a0 = Q.a1, Q.a0
    K = scheme.K
    levels, inv = np.unique(data.c, return_inverse=True)
    kk = np.arange(1, K + 1)[:, None]
    kb, cb = np.broadcast_arrays(kk, levels[None, :])
    g0 = np.asarray(Q.g_k(kb, a0, cb), dtype=float)
    live = g0 > 0
    center = np.zeros(g0.shape)
    denom = np.ones(g0.shape)
    mubk = np.zeros(g0.shape)
    alpha = np.zeros(g0.shape)
    if live.any():
        sm = fn.smoothing_moments(Q, kernel, scheme, kb[live], cb[live])
        center[live], denom[live], mubk[live], alpha[live] = sm.center, sm.denom, sm.mu_bk, sm.alpha
    theta_lvl = (g0 * mubk).sum(axis=0)

    clip = _Clipper()
    treated, control = data.a == a1, data.a == a0
    pi1 = clip(Q.pi(a1, data.c), used=treated)
    pi0 = clip(Q.pi(a0, data.c), used=control)
    k = _bins_of(data, scheme)
    # (n, K) matrices of per-bin quantities at each row's covariate level
    g0_r, c_r, d_r, mu_r = (x[:, inv].T for x in (g0, center, denom, mubk))
    omega = kernel(data.m[:, None] - c_r) / d_r
    fit_term = (g0_r * (data.y[:, None] * omega - mu_r)).sum(axis=1)
    own = k - 1, inv
    theta_r = theta_lvl[inv]
    summand = (
        np.where(treated, fit_term / pi1, 0.0)
        + np.where(control, (mubk[own] - theta_r) / pi0, 0.0)
        + theta_r
    )
    rows = _Rows(theta_r, summand, clip.count)
    phi_omega = np.where(control, alpha[own] * (data.m - center[own]) / pi0, 0.0)
    rows.extras["phi_omega"] = phi_omega
    if not fixed_centers:
        rows.summand = summand + phi_omega
    return rows


def _gamma_rows(variant: str, data: Dataset, Q: NuisanceSet, scheme) -> _Rows:
    a1, a0 = Q.a1, Q.a0
    control = data.a == a0
    if not control.any():
        raise FitError(f"no rows with A={a0}; the front-door functional cannot be estimated")
    if variant == "sequential":
        th = _sequential_stage(data, Q)
    else:
        th = _theta_rows({"coarsened": "coarsened", "debiased": "debiased"}[variant], data, Q, scheme, None)
    return _Rows(np.where(control, data.y, 0.0) + th * Q.pi(a1, data.c))


def _sequential_stage(data: Dataset, Q: NuisanceSet):
    """Second-stage regression of ``mu(M, a1, C)`` on ``C`` among ``A = a0`` rows."""
    control = data.a == Q.a0
    if not control.any():
        raise FitError(f"no rows with A={Q.a0}; the sequential regression has no data")
    pseudo = Q.mu(data.m[control], Q.a1, data.c[control])
    levels = np.unique(data.c)
    if len(levels) <= 10:
        idx_all = np.searchsorted(levels, data.c)
        idx = idx_all[control]
        sums = np.bincount(idx, weights=pseudo, minlength=len(levels))
        counts = np.bincount(idx, minlength=len(levels))
        if np.any(counts == 0):
            raise FitError(f"sequential regression: no A={Q.a0} rows at c={levels[counts == 0][0]:g}")
        return (sums / counts)[idx_all]
    from .nuisance import fit_linear

    design = lambda c: np.stack([np.ones_like(c), c, c**2, c**3], axis=-1)  # noqa: E731
    beta = fit_linear(design(data.c[control]), pseudo)
    return design(data.c) @ beta


# --------------------------------------------------------------------------
# Public estimator functions
# --------------------------------------------------------------------------

_PLUGIN_IDS = {
    "exact": E.PSI_PLUGIN_EXACT,
    "coarsened": E.PSI_H_PLUGIN,
    "debiased": E.PSI_TILDE_H_PLUGIN,
    "smoothed": E.PSI_TILDE_HB_PLUGIN,
}


def plugin_psi(data: Dataset, Q: NuisanceSet, variant: str = "exact", scheme=None, kernel=None) -> EstimateResult:
    """Average of ``theta``, ``theta_h``, ``theta_tilde_h`` or ``theta_tilde_hb`` over ``C_i``."""
    if variant not in _PLUGIN_IDS:
        raise ConfigError(f"unknown plug-in variant {variant!r}")
    scheme = scheme or Q.scheme
    return _finish(_PLUGIN_IDS[variant].value, _plugin_rows(variant, data, Q, scheme, kernel), "none")


_GAMMA_IDS = {"coarsened": E.GAMMA_H_PLUGIN, "debiased": E.GAMMA_TILDE_H_PLUGIN, "sequential": E.GAMMA_SEQ_PLUGIN}


def plugin_gamma(data: Dataset, Q: NuisanceSet, variant: str = "debiased", scheme=None) -> EstimateResult:
    """Front-door plug-in ``mean{ I(A=a0) Y + theta(C) pi(a1 | C) }``."""
    if variant not in _GAMMA_IDS:
        raise ConfigError(f"unknown front-door variant {variant!r}")
    return _finish(_GAMMA_IDS[variant].value, _gamma_rows(variant, data, Q, scheme or Q.scheme), "none")


def onestep_psi(data: Dataset, Q: NuisanceSet, ci: str = "influence_function") -> EstimateResult:
    """One-step estimator built on the exact functional."""
    rows = _eq15_rows(data, Q, _theta_rows("exact", data, Q, None, None))
    return _finish(E.PSI_ONESTEP.value, rows, ci)


def onestep_psi_h(data: Dataset, Q: NuisanceSet, scheme=None, ci: str = "influence_function") -> EstimateResult:
    """One-step estimator of the coarsened functional; ``k`` is the realized bin of ``M_i``."""
    scheme = scheme or Q.scheme
    th = _theta_rows("coarsened", data, Q, scheme, None)
    rows = _eq16_rows(data, Q, scheme, th, lambda k, c: Q.mu_k(k, Q.a1, c))
    return _finish(E.PSI_H_ONESTEP.value, rows, ci)


def onestep_psi_tilde_h1(data: Dataset, Q: NuisanceSet, scheme=None, ci: str = "influence_function") -> EstimateResult:
    """Coarsened one-step with ``mu_k`` replaced by ``mu`` at the within-bin mean."""
    scheme = scheme or Q.scheme
    th = _theta_rows("debiased", data, Q, scheme, None)
    rows = _eq16_rows(data, Q, scheme, th, lambda k, c: Q.mu(Q.m_k(k, Q.a0, c), Q.a1, c))
    return _finish(E.PSI_TILDE_H1_ONESTEP.value, rows, ci)


def onestep_psi_tilde_h2(data: Dataset, Q: NuisanceSet, scheme=None, ci: str = "influence_function") -> EstimateResult:
    """Exact-functional one-step with ``theta`` replaced by the debiased ``theta_tilde_h``."""
    scheme = scheme or Q.scheme
    rows = _eq15_rows(data, Q, _theta_rows("debiased", data, Q, scheme, None))
    return _finish(E.PSI_TILDE_H2_ONESTEP.value, rows, ci)


def onestep_psi_tilde_hb(
    data: Dataset,
    Q: NuisanceSet,
    kernel: KernelSpec,
    scheme=None,
    fixed_centers: bool = True,
    ci: str = "influence_function",
) -> EstimateResult:
    """One-step estimator of the smoothed functional.

    With ``fixed_centers`` the bin centers are treated as known; otherwise the
    correction for estimating them is added to every summand.
    """
    scheme = scheme or Q.scheme
    rows = _smoothed_rows(data, Q, scheme, kernel, fixed_centers)
    eid = E.PSI_TILDE_HB_ONESTEP_FIXED if fixed_centers else E.PSI_TILDE_HB_ONESTEP
    return _finish(eid.value, rows, ci)


def psi_tilde_hb_population(Q: NuisanceSet, kernel: KernelSpec, scheme=None) -> float:
    """``sum_c p(c) theta_tilde_hb(c)`` for a bundle with a discrete covariate law."""
    if Q.c_levels is None or Q.c_probs is None:
        raise ConfigError("population value needs the covariate law on the nuisance set")
    return float(Q.c_probs @ fn.theta_tilde_hb(Q, kernel, scheme or Q.scheme, Q.c_levels))


def eif_smoothed(Q: NuisanceSet, kernel: KernelSpec, scheme, obs, fixed_centers: bool = True, psi: float | None = None):
    """Efficient influence function of the smoothed functional at observations ``obs``.

    ``obs`` is an :class:`~coarsekit.core.Observation` (scalar result) or a
    :class:`~coarsekit.core.Dataset` (vector result). ``psi`` defaults to the
    population value under ``Q``'s covariate law.
    """
    scalar = not isinstance(obs, Dataset)
    data = Dataset.from_rows([obs]) if scalar else obs
    scheme = scheme or Q.scheme
    if psi is None:
        psi = psi_tilde_hb_population(Q, kernel, scheme)
    rows = _smoothed_rows(data, Q, scheme, kernel, fixed_centers)
    val = rows.summand - psi
    return float(val[0]) if scalar else val


# --------------------------------------------------------------------------
# Pipeline: binning, fitting and dispatch
# --------------------------------------------------------------------------

BINNING_METHODS = ("equal_frequency", "equal_width")


def build_scheme(m, K: int, method: str = "equal_frequency") -> BinningScheme:
    """Data-driven binning of the mediator sample ``m``."""
    if method == "equal_frequency":
        return make_quantile_binning(m, K)
    if method == "equal_width":
        m = np.asarray(m, dtype=float)
        inner = make_equal_width_binning(K, (float(m.min()), float(m.max())))
        lo, hi = default_support(m)
        return BinningScheme(inner.cuts, (min(lo, inner.support[0] - 1.0), max(hi, inner.support[1] + 1.0)))
    raise ConfigError(f"unknown binning method {method!r}; choose from {BINNING_METHODS}")


@dataclass(frozen=True)
class EstimationPlan:
    """Everything besides the data that determines an estimate."""

    K: int = 6
    binning: str = "equal_frequency"
    config: MisspecConfig = field(default_factory=MisspecConfig)
    bandwidth: float | None = None
    m_k_method: str = "model"
    plugin_ci: str = "none"
    crossfit: bool = False
    crossfit_seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError(f"K must be at least 2, got {self.K}")
        if self.binning not in BINNING_METHODS:
            raise ConfigError(f"unknown binning method {self.binning!r}")
        if self.plugin_ci not in ("none", "influence_function"):
            raise ConfigError("plugin_ci must be 'none' or 'influence_function'")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")

    @property
    def kernel(self) -> KernelSpec | None:
        return None if self.bandwidth is None else KernelSpec(self.bandwidth)


def _components_for(ids, plan: EstimationPlan) -> set[str]:
    needed = set()
    for eid in ids:
        needed |= NEEDS[eid]
        if plan.plugin_ci == "influence_function" and eid in PLUGIN_PARTNER:
            needed |= NEEDS[PLUGIN_PARTNER[eid]]
    return needed


def _fit_each(data, scheme, plan, names):
    """Fit components one at a time so that one failure spares the rest."""
    parts, failures, base = {}, {}, None
    for name in sorted(names):
        try:
            Q = fit_nuisances(data, scheme, plan.config, components={name}, m_k_method=plan.m_k_method)
        except CoarsekitError as exc:
            failures[name] = exc
            continue
        parts[name] = getattr(Q, name)
        base = base or Q
    return base, parts, failures


def _rows_for(eid: EstimatorId, data, Q, scheme, kernel) -> _Rows:
    if eid in _PLUGIN_IDS.values():
        variant = {v: k for k, v in _PLUGIN_IDS.items()}[eid]
        return _plugin_rows(variant, data, Q, scheme, kernel)
    if eid in _GAMMA_IDS.values():
        variant = {v: k for k, v in _GAMMA_IDS.items()}[eid]
        return _gamma_rows(variant, data, Q, scheme)
    if eid is E.PSI_ONESTEP:
        return _eq15_rows(data, Q, _theta_rows("exact", data, Q, None, None))
    if eid is E.PSI_H_ONESTEP:
        th = _theta_rows("coarsened", data, Q, scheme, None)
        return _eq16_rows(data, Q, scheme, th, lambda k, c: Q.mu_k(k, Q.a1, c))
    if eid is E.PSI_TILDE_H1_ONESTEP:
        th = _theta_rows("debiased", data, Q, scheme, None)
        return _eq16_rows(data, Q, scheme, th, lambda k, c: Q.mu(Q.m_k(k, Q.a0, c), Q.a1, c))
    if eid is E.PSI_TILDE_H2_ONESTEP:
        return _eq15_rows(data, Q, _theta_rows("debiased", data, Q, scheme, None))
    if eid in (E.PSI_TILDE_HB_ONESTEP_FIXED, E.PSI_TILDE_HB_ONESTEP):
        return _smoothed_rows(data, Q, scheme, kernel, eid is E.PSI_TILDE_HB_ONESTEP_FIXED)
    raise ConfigError(f"no estimating operation for {eid}")  # pragma: no cover


def _result(eid, data, Q, scheme, plan) -> EstimateResult:
    kernel = plan.kernel
    rows = _rows_for(eid, data, Q, scheme, kernel)
    if plan.plugin_ci == "influence_function" and eid in PLUGIN_PARTNER:
        partner = _rows_for(PLUGIN_PARTNER[eid], data, Q, scheme, kernel)
        res = _finish(eid.value, _Rows(rows.plugin, partner.summand, partner.clip_count), "influence_function")
        # plug-in point with the partner's spread
        return replace(
            res,
            point=res.plugin,
            ci_lo=res.plugin - Z95 * res.se,
            ci_hi=res.plugin + Z95 * res.se,
            influence=None,
        )
    return _finish(eid.value, rows, "influence_function")


def _merge_rows(parts: list[_Rows]) -> _Rows:
    plugin = np.concatenate([p.plugin for p in parts])
    summand = None if parts[0].summand is None else np.concatenate([p.summand for p in parts])
    return _Rows(plugin, summand, sum(p.clip_count for p in parts))


def estimate(data: Dataset, ids, plan: EstimationPlan | None = None, scheme: BinningScheme | None = None, errors: str = "raise"):
    """Run the estimators ``ids`` on ``data``.

    The binning scheme is built from ``data`` unless given. Nuisances are fitted
    once and shared. With ``errors="record"`` a failing estimator maps to the
    exception instead of raising.

    Returns
    -------
    dict
        ``{EstimatorId: EstimateResult or Exception}`` in the order of ``ids``.
    """
    plan = plan or EstimationPlan()
    ids = [EstimatorId.parse(i) if isinstance(i, str) and not isinstance(i, EstimatorId) else EstimatorId(i) for i in ids]
    if errors not in ("raise", "record"):
        raise ConfigError("errors must be 'raise' or 'record'")
    if any(eid in NEEDS_KERNEL for eid in ids) and plan.bandwidth is None:
        raise ConfigError("smoothed estimators need a kernel bandwidth")
    scheme = scheme or build_scheme(data.m, plan.K, plan.binning)

    if plan.crossfit:
        return _estimate_crossfit(data, ids, plan, scheme, errors)

    base, parts, failures = _fit_each(data, scheme, plan, _components_for(ids, plan))
    out = {}
    for eid in ids:
        try:
            missing = [name for name in _components_for([eid], plan) if name in failures]
            if missing:
                raise failures[missing[0]]
            Q = replace(base, **{name: parts.get(name) for name in NEEDS_ALL})
            out[eid] = _result(eid, data, Q, scheme, plan)
        except CoarsekitError as exc:
            if errors == "raise":
                raise
            logger.debug("estimator %s failed: %s", eid.value, exc)
            out[eid] = exc
    return out


NEEDS_ALL = ("mu", "mu_k", "g_k", "m_k", "pi", "g_amc", "f_mac")


def _estimate_crossfit(data, ids, plan, scheme, errors):
    """Two-fold cross-fitting: nuisances from one fold evaluated on the other."""
    rng = np.random.default_rng(plan.crossfit_seed)
    perm = rng.permutation(data.n)
    folds = [np.sort(perm[: data.n // 2]), np.sort(perm[data.n // 2 :])]
    out = {}
    for eid in ids:
        try:
            pieces = []
            for j in (0, 1):
                train, test = data.take(folds[1 - j]), data.take(folds[j])
                Q = fit_nuisances(train, scheme, plan.config, components=_components_for([eid], plan), m_k_method=plan.m_k_method)
                pieces.append(_rows_for(eid, test, Q, scheme, plan.kernel))
            out[eid] = _finish(eid.value, _merge_rows(pieces), "influence_function")
        except CoarsekitError as exc:
            if errors == "raise":
                raise
            out[eid] = exc
    return out


# --------------------------------------------------------------------------
# Bootstrap
# --------------------------------------------------------------------------

MAX_BOOT_FAILURE = 0.10


def bootstrap_ci(eid, data: Dataset, plan: EstimationPlan | None = None, B: int = 500, seed: int = 0) -> EstimateResult:
    """Percentile bootstrap interval, refitting binning and nuisances per resample."""
    eid = EstimatorId.parse(eid) if not isinstance(eid, EstimatorId) else eid
    plan = plan or EstimationPlan()
    if B < 2:
        raise ConfigError("bootstrap needs B >= 2")
    base_plan = replace(plan, plugin_ci="none")
    point = estimate(data, [eid], base_plan)[eid]
    rng = np.random.default_rng(seed)
    draws, failures = [], 0
    for _ in range(B):
        idx = rng.integers(0, data.n, size=data.n)
        try:
            draws.append(estimate(data.take(idx), [eid], base_plan)[eid].point)
        except (CoarsekitError, ValueError) as exc:
            failures += 1
            logger.debug("bootstrap resample failed: %s", exc)
    if failures > MAX_BOOT_FAILURE * B:
        raise FitError(f"bootstrap: {failures} of {B} resamples failed")
    draws = np.asarray(draws)
    lo, hi = np.percentile(draws, [2.5, 97.5])
    lo, hi = min(lo, hi), max(lo, hi)
    return replace(
        point,
        se=float(np.std(draws, ddof=1)),
        ci_lo=float(lo),
        ci_hi=float(hi),
        ci_method="bootstrap_percentile",
        extras={**point.extras, "bootstrap_failures": failures, "B": B},
    )
