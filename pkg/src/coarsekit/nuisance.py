"""Nuisance fitting: least squares, IRLS logistic regression, and the full
nuisance bundle under correct or deliberately misspecified feature maps."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit

from .core import BinningScheme, Dataset, NuisanceSet, default_support
from .dgp import standardized_truncated_moments
from .errors import ConfigError, DomainError, FitError

logger = logging.getLogger(__name__)

RIDGE = 1e-10
MAX_DISCRETE_LEVELS = 10


# --------------------------------------------------------------------------
# Feature maps
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureMap:
    """Named design map. ``arity`` is one of ``"mac"``, ``"ac"``, ``"mc"``, ``"c"``;
    ``features`` takes arguments in that order and returns an ``(n, p)`` array
    whose first column is the constant 1."""

    id: str
    arity: str
    features: Callable = field(repr=False, compare=False)
    correct: bool

    def __call__(self, *args) -> np.ndarray:
        args = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in args))
        cols = self.features(*args)
        return np.stack([np.broadcast_to(col, args[0].shape) for col in cols], axis=-1)


def _one(x):
    return np.ones_like(x)


FEATURE_MAPS = {
    fm.id: fm
    for fm in (
        FeatureMap("outcome", "mac", lambda m, a, c: (_one(m), c, a, a * m, m * c**2, m**3, a * c), True),
        FeatureMap("outcome_bad", "mac", lambda m, a, c: (_one(m), np.cos(c), np.exp(-np.abs(m)), 1.0 / (1.0 + m**2)), False),
        FeatureMap("mediator", "ac", lambda a, c: (_one(c), c, a, a * c), True),
        FeatureMap("mediator_bad", "ac", lambda a, c: (_one(c), np.cos(c), c**4), False),
        FeatureMap("propensity", "c", lambda c: (_one(c), c), True),
        FeatureMap("propensity_bad", "c", lambda c: (_one(c), np.exp(-np.abs(c))), False),
        FeatureMap("gps", "mc", lambda m, c: (_one(m), m, c, m * c, c**2), True),
        FeatureMap("gps_bad", "mc", lambda m, c: (_one(m), np.exp(-np.abs(c)), np.exp(-np.abs(m))), False),
    )
}


def apply_misspecification(map_id: str) -> FeatureMap:
    """Look up a feature map by id (``outcome_bad``, ``mediator_bad``, ...)."""
    try:
        return FEATURE_MAPS[map_id]
    except KeyError:
        raise ConfigError(f"unknown feature map {map_id!r}; known: {', '.join(FEATURE_MAPS)}") from None


# --------------------------------------------------------------------------
# Misspecification configuration
# --------------------------------------------------------------------------

_FLAG_ALIASES = {
    "m_k": "m_k", "mk": "m_k",
    "mu": "mu",
    "mu_k": "mu_k", "muk": "mu_k",
    "g": "g",
    "g_k": "g_k", "gk": "g_k",
    "pi": "pi",
}


@dataclass(frozen=True)
class MisspecConfig:
    """Which nuisances are correctly specified (``True``) or not (``False``)."""

    m_k: bool = True
    mu: bool = True
    mu_k: bool = True
    g: bool = True
    g_k: bool = True
    pi: bool = True

    @classmethod
    def named(cls, name: str) -> "MisspecConfig":
        try:
            return NAMED_CONFIGS[name]
        except KeyError:
            raise ConfigError(f"unknown scenario {name!r}; known: {', '.join(NAMED_CONFIGS)}") from None

    @classmethod
    def from_flags(cls, text: str) -> "MisspecConfig":
        """Parse a comma list of misspecified nuisances, e.g. ``"mu,gk"``."""
        bad = {}
        for token in filter(None, (t.strip().lower() for t in text.split(","))):
            if token not in _FLAG_ALIASES:
                raise ConfigError(f"unknown nuisance {token!r} in misspecification flags")
            bad[_FLAG_ALIASES[token]] = False
        return cls(**bad)

    @classmethod
    def from_dict(cls, d: dict) -> "MisspecConfig":
        kwargs = {}
        for key, value in d.items():
            name = _FLAG_ALIASES.get(key.lower())
            if name is None:
                raise ConfigError(f"unknown nuisance {key!r}")
            if isinstance(value, str):
                if value not in ("correct", "false"):
                    raise ConfigError(f"{key}: expected 'correct' or 'false'")
                value = value == "correct"
            kwargs[name] = bool(value)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {f.name: "correct" if getattr(self, f.name) else "false" for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @property
    def name(self) -> str:
        for key, cfg in NAMED_CONFIGS.items():
            if cfg == self:
                return key
        bad = [f.name for f in fields(self) if not getattr(self, f.name)]
        return "misspec:" + "+".join(bad)


NAMED_CONFIGS = {
    "correct": MisspecConfig(),
    "condition1": MisspecConfig(mu=False, mu_k=False),
    "condition2": MisspecConfig(g=False, g_k=False),
    "condition3": MisspecConfig(pi=False),
    "false": MisspecConfig(False, False, False, False, False, False),
}


# --------------------------------------------------------------------------
# Regression primitives
# --------------------------------------------------------------------------


def fit_linear(X, y) -> np.ndarray:
    """Least squares via the ridge-stabilized normal equations."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < p:
        raise FitError(f"design has fewer rows ({n}) than columns ({p})")
    gram = X.T @ X
    eig = np.linalg.eigvalsh(gram)
    if eig[0] < 1e-12 * max(eig[-1], 1e-300):
        raise FitError("design matrix is rank deficient")
    return np.linalg.solve(gram + RIDGE * np.eye(p), X.T @ y)


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    n_iter: int
    deviance: float
    separated: bool = False

    def predict(self, X) -> np.ndarray:
        return expit(np.asarray(X) @ self.coef)


def _deviance(eta, y):
    return -2.0 * float(np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))


def fit_logistic(X, y, max_iter: int = 100, tol: float = 1e-8) -> LogisticFit:
    """Logistic regression by iteratively reweighted least squares.

    Stops when the deviance changes by less than ``tol``. A coefficient norm
    above 1e3 is reported as quasi-separation on the result.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.any(y == 1) and np.any(y == 0)):
        raise FitError("logistic regression needs both classes present")
    p = X.shape[1]
    beta = np.zeros(p)
    eta = X @ beta
    dev = _deviance(eta, y)
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        w = np.maximum(mu * (1.0 - mu), 1e-12)
        z = eta + (y - mu) / w
        XtW = X.T * w
        beta = np.linalg.solve(XtW @ X + RIDGE * np.eye(p), XtW @ z)
        eta = X @ beta
        new_dev = _deviance(eta, y)
        if np.linalg.norm(beta) > 1e3:
            logger.warning("logistic fit: coefficient norm exceeds 1e3 (separation)")
            return LogisticFit(beta, it, new_dev, separated=True)
        if abs(dev - new_dev) < tol:
            return LogisticFit(beta, it, new_dev)
        dev = new_dev
    raise FitError(f"logistic IRLS did not converge in {max_iter} iterations")


# --------------------------------------------------------------------------
# Nuisance bundle
# --------------------------------------------------------------------------

COMPONENTS = ("mu", "mu_k", "g_k", "m_k", "pi", "g_amc", "f_mac")


class _Levels:
    """Lookup of a discrete covariate's levels."""

    def __init__(self, c):
        self.values, counts = np.unique(c, return_counts=True)
        self.probs = counts / counts.sum()

    def index(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        idx = np.clip(np.searchsorted(self.values, c), 0, len(self.values) - 1)
        if not np.all(self.values[idx] == c):
            raise DomainError("covariate value outside the levels seen during fitting")
        return idx


def _cell_table(values, keys, shape):
    """Group means of ``values`` over integer cell ``keys``; NaN for empty cells."""
    size = int(np.prod(shape))
    sums = np.bincount(keys, weights=values, minlength=size)
    counts = np.bincount(keys, minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (sums / counts).reshape(shape), counts.reshape(shape)


@dataclass(frozen=True)
class _MediatorModel:
    coef: np.ndarray
    sd: float
    fmap: FeatureMap

    def mean(self, a, c):
        return self.fmap(a, c) @ self.coef


def _fit_mediator(data: Dataset, fmap: FeatureMap) -> _MediatorModel:
    X = fmap(data.a, data.c)
    coef = fit_linear(X, data.m)
    resid = data.m - X @ coef
    dof = max(data.n - X.shape[1], 1)
    sd = float(np.sqrt(resid @ resid / dof))
    if not sd > 0:
        raise FitError("mediator model has zero residual variance")
    return _MediatorModel(coef, sd, fmap)


def _logistic_prob(fit: LogisticFit, fmap: FeatureMap):
    def prob(a, *args):
        p1 = fit.predict(fmap(*args))
        return np.where(np.asarray(a) == 1, p1, 1.0 - p1)

    return prob


def fit_nuisances(
    data: Dataset,
    scheme: BinningScheme | None,
    config: MisspecConfig | None = None,
    components=None,
    m_k_method: str = "model",
) -> NuisanceSet:
    """Fit the nuisance bundle from ``data``.

    Parameters
    ----------
    data : Dataset
    scheme : BinningScheme or None
        Needed for the binned components ``mu_k``, ``g_k`` and ``m_k``.
    config : MisspecConfig, optional
        Correct/false flag per nuisance; all correct by default.
    components : iterable of str, optional
        Subset of ``COMPONENTS`` to fit; the rest are left as ``None``.
    m_k_method : {"model", "empirical"}
        ``"model"`` takes truncated-normal means under a fitted linear-Gaussian
        mediator model; ``"empirical"`` uses within-cell sample means of ``M``.

    Notes
    -----
    With a discrete covariate (at most 10 levels) the binned outcome
    regression and the bin probabilities are saturated over
    ``(bin, a, c-level)`` and ``(a, c-level)`` cells; otherwise bin-wise linear
    and one-vs-rest logistic models are used.
    """
    config = config or MisspecConfig()
    wanted = set(COMPONENTS if components is None else components)
    unknown = wanted - set(COMPONENTS)
    if unknown:
        raise ConfigError(f"unknown nuisance components: {sorted(unknown)}")
    if data.n < 2:
        raise FitError("need at least two observations to fit nuisances")
    if m_k_method not in ("model", "empirical"):
        raise ConfigError(f"unknown m_k_method {m_k_method!r}")
    if wanted & {"mu_k", "g_k", "m_k"} and scheme is None:
        raise ConfigError("binned nuisances need a binning scheme")

    discrete = len(np.unique(data.c)) <= MAX_DISCRETE_LEVELS
    levels = _Levels(data.c) if discrete else None
    bins = scheme.assign(data.m) if scheme is not None else None
    out: dict = {name: None for name in COMPONENTS}
    coefs: dict = {}
    warnings: list[str] = []

    if "mu" in wanted:
        fmap = FEATURE_MAPS["outcome" if config.mu else "outcome_bad"]
        beta = fit_linear(fmap(data.m, data.a, data.c), data.y)
        coefs["mu"] = beta.tolist()
        out["mu"] = lambda m, a, c, _f=fmap, _b=beta: _f(m, a, c) @ _b

    if "pi" in wanted:
        fmap = FEATURE_MAPS["propensity" if config.pi else "propensity_bad"]
        fit = fit_logistic(fmap(data.c), data.a)
        if fit.separated:
            warnings.append("pi: separation")
        coefs["pi"] = fit.coef.tolist()
        out["pi"] = _logistic_prob(fit, fmap)

    if "g_amc" in wanted:
        fmap = FEATURE_MAPS["gps" if config.g else "gps_bad"]
        fit = fit_logistic(fmap(data.m, data.c), data.a)
        if fit.separated:
            warnings.append("g_amc: separation")
        coefs["g_amc"] = fit.coef.tolist()
        out["g_amc"] = _logistic_prob(fit, fmap)

    if wanted & {"m_k", "f_mac"}:
        med = _fit_mediator(data, FEATURE_MAPS["mediator" if config.m_k else "mediator_bad"])
        coefs["mediator"] = med.coef.tolist() + [med.sd]
        if "f_mac" in wanted:
            def f_mac(m, a, c, _med=med):
                z = (np.asarray(m, dtype=float) - _med.mean(a, c)) / _med.sd
                return np.exp(-0.5 * z * z) / (np.sqrt(2.0 * np.pi) * _med.sd)

            out["f_mac"] = f_mac
        if "m_k" in wanted:
            if m_k_method == "model":
                out["m_k"] = _model_m_k(med, scheme)
            else:
                if not discrete:
                    raise ConfigError("empirical m_k requires a discrete covariate")
                out["m_k"] = _empirical_m_k(data, scheme, bins, levels)

    if "g_k" in wanted:
        out["g_k"] = _fit_g_k(data, scheme, bins, levels, config.g_k, coefs)

    if "mu_k" in wanted:
        out["mu_k"] = _fit_mu_k(data, scheme, bins, levels, config.mu_k, coefs)

    return NuisanceSet(
        support=scheme.support if scheme is not None else default_support(data.m),
        scheme=scheme,
        c_levels=levels.values if discrete else None,
        c_probs=levels.probs if discrete else None,
        metadata={
            "oracle": False,
            "config": config.to_dict(),
            "coefficients": coefs,
            "warnings": warnings,
            "m_k_method": m_k_method,
        },
        **out,
    )


def _model_m_k(med: _MediatorModel, scheme: BinningScheme):
    def m_k(k, a, c):
        center = med.mean(a, c)
        alpha = (scheme.lower(k) - center) / med.sd
        beta = (scheme.upper(k) - center) / med.sd
        std, _ = standardized_truncated_moments(alpha, beta)
        return center + med.sd * std[..., 1]

    return m_k


def _empirical_m_k(data, scheme, bins, levels):
    shape = (scheme.K, 2, len(levels.values))
    keys = np.ravel_multi_index((bins - 1, data.a, levels.index(data.c)), shape)
    table, _ = _cell_table(data.m, keys, shape)

    def m_k(k, a, c):
        val = table[np.asarray(k) - 1, np.asarray(a), levels.index(c)]
        if np.any(np.isnan(val)):
            raise FitError("empirical m_k requested for an empty (bin, a, c) cell")
        return val

    return m_k


def _fit_g_k(data, scheme, bins, levels, correct, coefs):
    K = scheme.K
    if correct and levels is not None:
        shape = (2, len(levels.values), K)
        keys = np.ravel_multi_index((data.a, levels.index(data.c), bins - 1), shape)
        counts = np.bincount(keys, minlength=int(np.prod(shape))).reshape(shape)
        totals = counts.sum(axis=-1, keepdims=True)
        empty = np.argwhere(totals[..., 0] == 0)
        if len(empty):
            a, ci = empty[0]
            raise FitError(f"g_k: empty cell a={a}, c={levels.values[ci]:g}")
        table = counts / totals
        coefs["g_k"] = table.tolist()

        def g_k(k, a, c):
            return table[np.asarray(a), levels.index(c), np.asarray(k) - 1]

        return g_k

    # one-vs-rest logistic per bin, renormalized
    fmap = FEATURE_MAPS["mediator" if correct else "mediator_bad"]
    X = fmap(data.a, data.c)
    fits = []
    for k in range(1, K + 1):
        yk = (bins == k).astype(float)
        if not (yk.any() and (1 - yk).any()):
            raise FitError(f"g_k: bin {k} is empty or contains every observation")
        fits.append(fit_logistic(X, yk))
    coefs["g_k"] = [f.coef.tolist() for f in fits]

    def g_k(k, a, c):
        k, a, c = np.broadcast_arrays(np.asarray(k), np.asarray(a, dtype=float), np.asarray(c, dtype=float))
        Xe = fmap(a, c)
        probs = np.stack([f.predict(Xe) for f in fits], axis=-1)
        probs = probs / probs.sum(axis=-1, keepdims=True)
        return np.take_along_axis(probs, (k - 1)[..., None], axis=-1)[..., 0]

    return g_k


def _fit_mu_k(data, scheme, bins, levels, correct, coefs):
    K = scheme.K
    if correct and levels is not None:
        shape = (K, 2, len(levels.values))
        cidx = levels.index(data.c)
        keys = np.ravel_multi_index((bins - 1, data.a, cidx), shape)
        table, counts = _cell_table(data.y, keys, shape)
        # cells used downstream: (k, a, c) for either arm wherever the other arm has mass
        for a in (0, 1):
            need = (counts[:, 1 - a, :] > 0) & (counts[:, a, :] == 0)
            if a == 1 and need.any():
                k, ci = np.argwhere(need)[0]
                raise FitError(f"mu_k: empty cell bin k={k + 1}, a={a}, c={levels.values[ci]:g}")
        coefs["mu_k"] = np.where(np.isnan(table), None, table).tolist()

        def mu_k(k, a, c):
            val = table[np.asarray(k) - 1, np.asarray(a), levels.index(c)]
            if np.any(np.isnan(val)):
                k_, a_, c_ = (np.broadcast_to(v, val.shape)[np.isnan(val)][0] for v in (np.asarray(k), np.asarray(a), np.asarray(c)))
                raise FitError(f"mu_k: empty cell bin k={k_}, a={a_}, c={c_:g}")
            return val

        return mu_k

    # bin-wise linear regression on the (a, c) map
    fmap = FEATURE_MAPS["mediator" if correct else "mediator_bad"]
    X = fmap(data.a, data.c)
    betas = np.zeros((K, X.shape[1]))
    for k in range(1, K + 1):
        sel = bins == k
        if sel.sum() < X.shape[1]:
            raise FitError(f"mu_k: bin {k} has too few observations ({sel.sum()})")
        betas[k - 1] = fit_linear(X[sel], data.y[sel])
    coefs["mu_k"] = betas.tolist()

    def mu_k(k, a, c):
        k, a, c = np.broadcast_arrays(np.asarray(k), np.asarray(a, dtype=float), np.asarray(c, dtype=float))
        return np.einsum("...p,...p->...", fmap(a, c), betas[k - 1])

    return mu_k
