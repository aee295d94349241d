"""Population functionals of a nuisance bundle: the exact, coarsened,
debiased and kernel-smoothed conditional mediation functionals, the
within-bin covariance representation of the coarsening error, and a
two-mediator extension.

Every function accepts array-valued ``c`` and broadcasts over it.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import BinningScheme, KernelSpec, NuisanceSet
from .dgp import standardized_truncated_moments
from .errors import IntegrationError, NumericalError, SmoothingError
from .quadrature import integrate

MASS_TOL = 1e-3
DENOM_FLOOR = 1e-12


def _bins(scheme: BinningScheme, c):
    """Bin index grid of shape ``(K,) + c.shape`` and ``c`` as an array."""
    c = np.asarray(c, dtype=float)
    k = np.arange(1, scheme.K + 1).reshape((-1,) + (1,) * c.ndim)
    return np.broadcast_arrays(k, c)


def _scheme(Q: NuisanceSet, scheme):
    scheme = Q.scheme if scheme is None else scheme
    if scheme is None:
        raise NumericalError("a binning scheme is required")
    return scheme


def _masked_sum(weights, fun, k, c):
    """``sum_k weights * fun(k, c)`` evaluating ``fun`` only where the weight is nonzero."""
    live = weights != 0
    terms = np.zeros(weights.shape)
    if live.any():
        terms[live] = weights[live] * fun(k[live], c[live])
    return terms.sum(axis=0)


# --------------------------------------------------------------------------
# Exact, coarsened and debiased functionals
# --------------------------------------------------------------------------


def theta(Q: NuisanceSet, c):
    """``theta(c)``: integral of ``mu(m, a1, c) f(m | a0, c)`` over the support."""
    Q.require("mu", "f_mac")
    c = np.asarray(c, dtype=float)
    lo, hi = Q.support

    def fun(x):
        cc = c[..., None]
        dens = Q.f_mac(x, Q.a0, cc)
        return np.stack([Q.mu(x, Q.a1, cc) * dens, dens])

    value, mass = integrate(fun, np.full(c.shape, lo), np.full(c.shape, hi))
    if np.any(np.abs(mass - 1.0) > MASS_TOL):
        raise IntegrationError(f"mediator density integrates to {np.min(mass):.6g}..{np.max(mass):.6g}, not 1")
    return value


def theta_h(Q: NuisanceSet, scheme: BinningScheme | None, c):
    """Coarsened functional ``sum_k mu_k(a1, c) g_k(a0, c)``."""
    Q.require("mu_k", "g_k")
    k, c = _bins(_scheme(Q, scheme), c)
    g0 = Q.g_k(k, Q.a0, c)
    return _masked_sum(g0, lambda kk, cc: Q.mu_k(kk, Q.a1, cc), k, c)


def theta_tilde_h(Q: NuisanceSet, scheme: BinningScheme | None, c):
    """Debiased functional ``sum_k mu(m_k(a0, c), a1, c) g_k(a0, c)``."""
    Q.require("mu", "m_k", "g_k")
    k, c = _bins(_scheme(Q, scheme), c)
    g0 = Q.g_k(k, Q.a0, c)
    return _masked_sum(g0, lambda kk, cc: Q.mu(Q.m_k(kk, Q.a0, cc), Q.a1, cc), k, c)


# --------------------------------------------------------------------------
# Kernel-smoothed functional
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothingMoments:
    """Kernel integrals against ``f(m | a1, c)`` around a bin center.

    ``denom`` is ``E[K_b(M - center) | a1, c]``; ``mu_bk`` the smoothed bin
    regression; ``alpha`` its derivative with respect to the center.
    """

    center: np.ndarray
    denom: np.ndarray
    mu_bk: np.ndarray
    alpha: np.ndarray


def smoothing_moments(Q: NuisanceSet, kernel: KernelSpec, scheme, k, c, center=None) -> SmoothingMoments:
    """Evaluate the kernel integrals for bins ``k`` at covariates ``c``.

    ``center`` defaults to ``m_k(a0, c)``; passing it explicitly is useful for
    finite-difference checks of the derivative.
    """
    Q.require("mu", "f_mac")
    k, c = np.broadcast_arrays(np.asarray(k), np.asarray(c, dtype=float))
    if center is None:
        Q.require("m_k")
        center = Q.m_k(k, Q.a0, c)
    center = np.broadcast_to(np.asarray(center, dtype=float), c.shape)
    b = kernel.bandwidth
    lo = np.maximum(center - kernel.reach * b, Q.support[0])
    hi = np.minimum(center + kernel.reach * b, Q.support[1])
    empty = lo >= hi
    if empty.any():
        idx = np.argwhere(empty)[0]
        raise SmoothingError(f"kernel window misses the support for bin k={k[tuple(idx)]}, c={c[tuple(idx)]:g}")

    def fun(x):
        cc, u = c[..., None], x - center[..., None]
        dens = Q.f_mac(x, Q.a1, cc)
        mu = Q.mu(x, Q.a1, cc)
        kb, dkb = kernel(u) * dens, kernel.derivative(u) * dens
        return np.stack([kb, mu * kb, dkb, mu * dkb])

    d, n, dd, nd = integrate(fun, lo, hi, tol=1e-10)
    small = d <= DENOM_FLOOR
    if small.any():
        idx = np.argwhere(small)[0]
        raise SmoothingError(
            f"vanishing kernel denominator {d[tuple(idx)]:.3g} for bin k={k[tuple(idx)]}, c={c[tuple(idx)]:g}"
        )
    mu_bk = n / d
    alpha = -(nd - mu_bk * dd) / d
    return SmoothingMoments(center, d, mu_bk, alpha)


def omega_weight(Q: NuisanceSet, kernel: KernelSpec, scheme, k, m, c):
    """Normalized kernel weight ``K_b(m - m_k(a0, c)) / E[K_b(M - m_k(a0, c)) | a1, c]``."""
    sm = smoothing_moments(Q, kernel, scheme, k, c)
    return kernel(np.asarray(m, dtype=float) - sm.center) / sm.denom


def mu_bk(Q: NuisanceSet, kernel: KernelSpec, scheme, k, c):
    return smoothing_moments(Q, kernel, scheme, k, c).mu_bk


def alpha_k(Q: NuisanceSet, kernel: KernelSpec, scheme, k, c):
    """Derivative of ``mu_bk`` with respect to the bin center."""
    return smoothing_moments(Q, kernel, scheme, k, c).alpha


def theta_tilde_hb(Q: NuisanceSet, kernel: KernelSpec, scheme: BinningScheme | None, c):
    """Smoothed functional ``sum_k mu_bk(a1, c) g_k(a0, c)``."""
    Q.require("g_k")
    k, c = _bins(_scheme(Q, scheme), c)
    g0 = Q.g_k(k, Q.a0, c)
    return _masked_sum(g0, lambda kk, cc: smoothing_moments(Q, kernel, scheme, kk, cc).mu_bk, k, c)


# --------------------------------------------------------------------------
# Covariance representation
# --------------------------------------------------------------------------


def _bin_integrals(Q: NuisanceSet, scheme: BinningScheme, k, c):
    """Quadrature over bin ``k`` of f0, f1, mu f0, mu f1 (``mu`` at arm a1)."""
    edges = scheme.bounded_edges
    k, c = np.broadcast_arrays(np.asarray(k), np.asarray(c, dtype=float))
    lo, hi = edges[k - 1], edges[k]

    def fun(x):
        cc = c[..., None]
        f0, f1 = Q.f_mac(x, Q.a0, cc), Q.f_mac(x, Q.a1, cc)
        mu = Q.mu(x, Q.a1, cc)
        return np.stack([f0, f1, mu * f0, mu * f1])

    return integrate(fun, lo, hi, tol=1e-10)


def covariance_representation(Q: NuisanceSet, scheme: BinningScheme | None, k, c):
    """Within-bin covariance of ``mu(M, a1, c)`` and the density ratio ``r_k``.

    The covariance is taken under ``p(m | bin k, a1, c)`` with
    ``r_k = p(m | bin k, a0, c) / p(m | bin k, a1, c)``. It equals
    ``mu_{k,a1}(a0, c) - mu_k(a1, c)``.
    """
    Q.require("mu", "f_mac")
    scheme = _scheme(Q, scheme)
    g0, g1, n0, n1 = _bin_integrals(Q, scheme, k, c)
    if np.any(g0 <= 1e-300) or np.any(g1 <= 1e-300):
        raise NumericalError("covariance representation needs positive bin mass in both arms")
    # E1[mu r] - E1[mu] E1[r] with E1[r] = 1
    return n0 / g0 - n1 / g1


def covariance_sum(Q: NuisanceSet, scheme: BinningScheme | None, c):
    """``sum_k cov_k(c) g_k(a0, c)``, which equals ``theta(c) - theta_h(c)``."""
    scheme = _scheme(Q, scheme)
    k, c = _bins(scheme, c)
    g0, g1, n0, n1 = _bin_integrals(Q, scheme, k, c)
    live = (g0 > 1e-300) & (g1 > 1e-300)
    terms = np.zeros(g0.shape)
    terms[live] = n0[live] - g0[live] * n1[live] / g1[live]
    return terms.sum(axis=0)


# --------------------------------------------------------------------------
# Diagnostics
# --------------------------------------------------------------------------

DIAGNOSTIC_FIELDS = ("c", "k", "m_k_a0", "m_k_a1", "shift", "g_k_a0", "g_k_a1", "cov_k")


def coarsening_diagnostics(Q: NuisanceSet, scheme: BinningScheme | None, c_values) -> list[dict]:
    """Per-(c, k) rows of within-bin mean shifts, bin probabilities and covariances."""
    Q.require("m_k", "g_k", "mu", "f_mac")
    scheme = _scheme(Q, scheme)
    rows = []
    for c in np.asarray(c_values, dtype=float).reshape(-1):
        for k in range(1, scheme.K + 1):
            g0, g1 = float(Q.g_k(k, Q.a0, c)), float(Q.g_k(k, Q.a1, c))
            try:
                m0, m1 = float(Q.m_k(k, Q.a0, c)), float(Q.m_k(k, Q.a1, c))
                cov = float(covariance_representation(Q, scheme, k, c))
            except NumericalError:
                m0 = m1 = cov = float("nan")
            rows.append(dict(c=float(c), k=k, m_k_a0=m0, m_k_a1=m1, shift=m1 - m0, g_k_a0=g0, g_k_a1=g1, cov_k=cov))
    return rows


def diagnostics_csv(rows: list[dict], path=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=DIAGNOSTIC_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: repr(v) if isinstance(v, float) else v for key, v in row.items()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# --------------------------------------------------------------------------
# Two ordered mediators
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TwoMediatorBundle:
    """Nuisances for two ordered mediators ``M1 -> M2``.

    ``mu(m1, m2, a, c)`` is the outcome regression; ``m1_k``/``g1_k`` take
    ``(k1, a, c)`` and ``m2_k``/``g2_k`` take ``(k2, m1, a, c)``. The densities
    ``f1(m1, a, c)`` and ``f2(m2, m1, a, c)`` are optional and only used by
    :func:`theta_two_mediators`.
    """

    mu: Callable
    m1_k: Callable
    g1_k: Callable
    m2_k: Callable
    g2_k: Callable
    K1: int
    K2: int
    f1: Callable | None = None
    f2: Callable | None = None
    support1: tuple[float, float] | None = None
    support2: tuple[float, float] | None = None


def theta_tilde_h_two_mediators(Q2: TwoMediatorBundle, c, a_y: int = 1, a1: int = 0, a2: int = 0):
    """Debiased coarsened functional with nested within-bin means."""
    c = np.asarray(c, dtype=float)
    total = np.zeros(c.shape)
    for k1 in range(1, Q2.K1 + 1):
        w1 = Q2.g1_k(k1, a1, c)
        if not np.any(w1):
            continue
        m1 = Q2.m1_k(k1, a1, c)
        for k2 in range(1, Q2.K2 + 1):
            w2 = Q2.g2_k(k2, m1, a2, c)
            if not np.any(w2):
                continue
            total = total + Q2.mu(m1, Q2.m2_k(k2, m1, a2, c), a_y, c) * w2 * w1
    return total


def theta_two_mediators(Q2: TwoMediatorBundle, c: float, a_y: int = 1, a1: int = 0, a2: int = 0, panels: int = 256):
    """Exact two-mediator functional by nested quadrature (scalar ``c``)."""
    if Q2.f1 is None or Q2.f2 is None or Q2.support1 is None or Q2.support2 is None:
        raise NumericalError("two-mediator quadrature needs both densities and supports")
    lo2, hi2 = Q2.support2

    def outer(x1):
        def inner(x2):
            m1 = x1[..., None]
            return Q2.mu(m1, x2, a_y, c) * Q2.f2(x2, m1, a2, c)

        return integrate(inner, np.full(x1.shape, lo2), np.full(x1.shape, hi2), panels=panels) * Q2.f1(x1, a1, c)

    return float(integrate(outer, *Q2.support1, panels=panels))


def gaussian_two_mediator_bundle(
    mu: Callable,
    m1_coef: tuple[float, float, float],
    m2_coef: tuple[float, float, float, float],
    sd1: float,
    sd2: float,
    scheme1: BinningScheme,
    scheme2: BinningScheme,
) -> TwoMediatorBundle:
    """Closed-form bundle for linear-Gaussian mediators.

    ``M1 | a, c ~ N(m1_coef . (1, a, c), sd1^2)`` and
    ``M2 | m1, a, c ~ N(m2_coef . (1, m1, a, c), sd2^2)``.
    """

    def mean1(a, c):
        return m1_coef[0] + m1_coef[1] * np.asarray(a, dtype=float) + m1_coef[2] * np.asarray(c, dtype=float)

    def mean2(m1, a, c):
        return (
            m2_coef[0]
            + m2_coef[1] * np.asarray(m1, dtype=float)
            + m2_coef[2] * np.asarray(a, dtype=float)
            + m2_coef[3] * np.asarray(c, dtype=float)
        )

    def truncated(scheme, k, center, sd):
        alpha = (scheme.lower(k) - center) / sd
        beta = (scheme.upper(k) - center) / sd
        std, mass = standardized_truncated_moments(alpha, beta)
        return center + sd * std[..., 1], mass

    def normal(x, center, sd):
        z = (x - center) / sd
        return np.exp(-0.5 * z * z) / (np.sqrt(2.0 * np.pi) * sd)

    return TwoMediatorBundle(
        mu=mu,
        m1_k=lambda k, a, c: truncated(scheme1, k, mean1(a, c), sd1)[0],
        g1_k=lambda k, a, c: truncated(scheme1, k, mean1(a, c), sd1)[1],
        m2_k=lambda k, m1, a, c: truncated(scheme2, k, mean2(m1, a, c), sd2)[0],
        g2_k=lambda k, m1, a, c: truncated(scheme2, k, mean2(m1, a, c), sd2)[1],
        K1=scheme1.K,
        K2=scheme2.K,
        f1=lambda x, a, c: normal(x, mean1(a, c), sd1),
        f2=lambda x, m1, a, c: normal(x, mean2(m1, a, c), sd2),
        support1=scheme1.support,
        support2=scheme2.support,
    )
