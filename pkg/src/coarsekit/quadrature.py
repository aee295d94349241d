"""Composite Simpson quadrature with panel doubling, batched over intervals."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.integrate import simpson

from .errors import IntegrationError

DEFAULT_PANELS = 2048
DEFAULT_TOL = 1e-6
MAX_PANELS = 2**16


def _grid(lo: np.ndarray, hi: np.ndarray, panels: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, panels + 1)
    return lo[..., None] + (hi - lo)[..., None] * t


def _simpson(fun, x):
    y = np.asarray(fun(x), dtype=float)
    return simpson(y, x=np.broadcast_to(x, y.shape), axis=-1)


def integrate(
    fun: Callable[[np.ndarray], np.ndarray],
    lo,
    hi,
    panels: int = DEFAULT_PANELS,
    tol: float = DEFAULT_TOL,
    max_panels: int = MAX_PANELS,
) -> np.ndarray:
    """Integrate ``fun`` over ``[lo, hi]`` for a batch of intervals.

    ``lo`` and ``hi`` broadcast to a common batch shape ``B``. ``fun`` receives
    abscissae of shape ``B + (G,)`` and must return values of the same shape
    (or of shape ``(..., ) + B + (G,)`` for several integrands at once).

    The panel count is doubled until two successive estimates agree to ``tol``
    in absolute value; the finer estimate is returned.
    """
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise IntegrationError("integration bounds must be finite")
    x = _grid(lo, hi, panels)
    prev = _simpson(fun, x)
    while True:
        panels *= 2
        x = _grid(lo, hi, panels)
        cur = _simpson(fun, x)
        err = np.max(np.abs(cur - prev), initial=0.0)
        if not np.isfinite(err):
            raise IntegrationError("integrand produced non-finite values")
        if err < tol:
            return cur
        if panels >= max_panels:
            raise IntegrationError(
                f"quadrature did not reach tolerance {tol:g} with {panels} panels (last change {err:.3g})"
            )
        prev = cur
