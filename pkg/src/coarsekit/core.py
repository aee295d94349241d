"""Shared data model: observations, datasets, binning schemes, kernels,
nuisance bundles and estimate results."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

CSV_HEADER = ("c", "a", "m", "y")


# --------------------------------------------------------------------------
# Observations and datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Observation:
    """One sampled unit ``(c, a, m, y)``."""

    c: float
    a: int
    m: float
    y: float

    def __post_init__(self):
        if self.a not in (0, 1):
            raise DomainError(f"treatment must be 0 or 1, got {self.a!r}")
        for name in ("c", "m", "y"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Columnar collection of observations.

    Columns are read-only numpy arrays; ``a`` is integer valued in {0, 1}.
    """

    c: np.ndarray
    a: np.ndarray
    m: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        cols = {}
        for name in CSV_HEADER:
            arr = np.array(getattr(self, name), dtype=np.int64 if name == "a" else float)
            if arr.ndim != 1:
                raise DomainError(f"column {name} must be one-dimensional")
            arr.setflags(write=False)
            cols[name] = arr
        lengths = {len(v) for v in cols.values()}
        if len(lengths) != 1:
            raise DomainError("all columns must have the same length")
        if not np.all(np.isin(cols["a"], (0, 1))):
            raise DomainError("treatment column must contain only 0/1")
        for name in ("c", "m", "y"):
            if not np.all(np.isfinite(cols[name])):
                raise DomainError(f"column {name} contains non-finite values")
        for name, arr in cols.items():
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return len(self.a)

    def __len__(self) -> int:
        return self.n

    @property
    def rows(self) -> Iterator[Observation]:
        for c, a, m, y in zip(self.c, self.a, self.m, self.y):
            yield Observation(float(c), int(a), float(m), float(y))

    @classmethod
    def from_rows(cls, rows: Sequence[Observation]) -> "Dataset":
        return cls(
            c=[r.c for r in rows], a=[r.a for r in rows], m=[r.m for r in rows], y=[r.y for r in rows]
        )

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.c[index], self.a[index], self.m[index], self.y[index])

    def replace(self, **columns) -> "Dataset":
        cols = {k: getattr(self, k) for k in CSV_HEADER}
        cols.update(columns)
        return Dataset(**cols)

    # -- serialization ----------------------------------------------------

    def to_csv(self, path=None) -> str:
        """Serialize as ``c,a,m,y`` text; write to ``path`` if given.

        Floats use ``repr`` so that a round trip is exact.
        """
        buf = io.StringIO()
        buf.write(",".join(CSV_HEADER) + "\n")
        for c, a, m, y in zip(self.c.tolist(), self.a.tolist(), self.m.tolist(), self.y.tolist()):
            buf.write(f"{c!r},{a},{m!r},{y!r}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def read_csv(cls, path) -> "Dataset":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
                raise ConfigError(f"{path}: expected header {','.join(CSV_HEADER)}")
            cols: dict[str, list] = {k: [] for k in CSV_HEADER}
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise ConfigError(f"{path}:{lineno}: expected 4 fields")
                try:
                    cols["c"].append(float(row[0]))
                    cols["a"].append(int(float(row[1])))
                    cols["m"].append(float(row[2]))
                    cols["y"].append(float(row[3]))
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from None
        return cls(**cols)


# --------------------------------------------------------------------------
# Binning
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BinningScheme:
    """Partition of the real line into ``K`` half-open bins.

    Bin ``k`` (1-based) is ``[cuts[k-2], cuts[k-1])``; the first bin is
    ``(-inf, cuts[0])`` and the last ``[cuts[-1], inf)``. ``support`` gives the
    truncation bounds used for edge-bin widths and for quadrature.
    """

    cuts: np.ndarray
    support: tuple[float, float]

    def __post_init__(self):
        cuts = np.array(self.cuts, dtype=float).reshape(-1)
        if not np.all(np.isfinite(cuts)):
            raise ConfigError("cut points must be finite")
        if np.any(np.diff(cuts) <= 0):
            raise ConfigError("cut points must be strictly increasing")
        lo, hi = (float(v) for v in self.support)
        if not (lo < hi):
            raise ConfigError("support bounds must satisfy lo < hi")
        if len(cuts) and not (lo < cuts[0] and cuts[-1] < hi):
            raise ConfigError("support bounds must enclose every cut point")
        cuts.setflags(write=False)
        object.__setattr__(self, "cuts", cuts)
        object.__setattr__(self, "support", (lo, hi))

    @property
    def K(self) -> int:
        return len(self.cuts) + 1

    @property
    def edges(self) -> np.ndarray:
        """Bin edges of length ``K + 1`` including the infinite ends."""
        return np.concatenate(([-np.inf], self.cuts, [np.inf]))

    @property
    def bounded_edges(self) -> np.ndarray:
        """Bin edges with the infinite ends replaced by the support bounds."""
        return np.concatenate(([self.support[0]], self.cuts, [self.support[1]]))

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.bounded_edges)

    @property
    def w_max(self) -> float:
        return float(self.widths.max())

    def lower(self, k) -> np.ndarray:
        return self.edges[np.asarray(k) - 1]

    def upper(self, k) -> np.ndarray:
        return self.edges[np.asarray(k)]

    def assign(self, m) -> np.ndarray:
        """Vectorized bin lookup, returning 1-based indices."""
        m = np.asarray(m, dtype=float)
        if not np.all(np.isfinite(m)):
            raise DomainError("mediator values must be finite")
        return np.searchsorted(self.cuts, m, side="right") + 1

    def to_dict(self) -> dict:
        return {"cuts": self.cuts.tolist(), "support": list(self.support)}


def assign_bin(scheme: BinningScheme, m: float) -> int:
    """Return the bin index ``k`` in ``1..K`` containing ``m``."""
    return int(scheme.assign(m))


def default_support(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    mean, sd = float(values.mean()), float(values.std())
    sd = sd if sd > 0 else 1.0
    return mean - 8.0 * sd, mean + 8.0 * sd


def make_quantile_binning(values, K: int, support: tuple[float, float] | None = None) -> BinningScheme:
    """Equal-frequency binning: cuts at the ``j/K`` empirical quantiles.

    Quantiles interpolate linearly between order statistics. Duplicate cut
    values are merged, which lowers ``K``; this is logged.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    if K < 2:
        raise ConfigError(f"K must be at least 2, got {K}")
    if len(values) < K:
        raise ConfigError(f"need at least K={K} values, got {len(values)}")
    if len(np.unique(values)) < K:
        raise ConfigError(f"fewer than K={K} distinct values; no equal-frequency binning exists")
    cuts = np.quantile(values, np.arange(1, K) / K)
    unique = np.unique(cuts)
    if len(unique) < len(cuts):
        logger.warning("duplicate quantile cuts collapsed: K reduced from %d to %d", K, len(unique) + 1)
    if support is None:
        support = default_support(values)
    lo, hi = support
    lo = min(lo, float(unique[0]) - 1.0)
    hi = max(hi, float(unique[-1]) + 1.0)
    return BinningScheme(unique, (lo, hi))


def make_equal_width_binning(K: int, support: tuple[float, float]) -> BinningScheme:
    """``K`` bins of equal width over ``support``; the edge bins extend to infinity."""
    if K < 2:
        raise ConfigError(f"K must be at least 2, got {K}")
    lo, hi = support
    cuts = lo + (hi - lo) * np.arange(1, K) / K
    return BinningScheme(cuts, (lo, hi))


# --------------------------------------------------------------------------
# Kernel
# --------------------------------------------------------------------------

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class KernelSpec:
    """Scaled smoothing kernel ``K_b(u) = K(u / b) / b``."""

    bandwidth: float
    family: str = "gaussian"

    def __post_init__(self):
        if self.family != "gaussian":
            raise ConfigError(f"unsupported kernel family {self.family!r}")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ConfigError("bandwidth must be a positive finite number")

    # half-width beyond which the kernel is treated as zero, in bandwidth units
    reach: float = field(default=10.0, init=False, repr=False)

    def __call__(self, u):
        z = np.asarray(u, dtype=float) / self.bandwidth
        return np.exp(-0.5 * z * z) / (_SQRT_2PI * self.bandwidth)

    def derivative(self, u):
        """``d/du K_b(u)``."""
        z = np.asarray(u, dtype=float) / self.bandwidth
        return -z * np.exp(-0.5 * z * z) / (_SQRT_2PI * self.bandwidth**2)


# --------------------------------------------------------------------------
# Nuisance bundle
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    """Bundle of (true or fitted) nuisance functions.

    All callables are vectorized and broadcast over their arguments. Bin
    indices ``k`` are 1-based. Probabilities are returned unclipped; the
    estimators clip where they divide and count the clip events.

    ``c_levels``/``c_probs`` hold the marginal law of ``C`` (population law for
    oracle bundles, empirical law for fitted ones) when it is discrete.
    """

    mu: Callable
    mu_k: Callable | None
    g_k: Callable | None
    m_k: Callable | None
    pi: Callable | None
    g_amc: Callable | None
    f_mac: Callable | None
    support: tuple[float, float]
    scheme: BinningScheme | None = None
    a0: int = 0
    a1: int = 1
    c_levels: np.ndarray | None = None
    c_probs: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise ConfigError(f"nuisance set lacks required components: {', '.join(missing)}")


# --------------------------------------------------------------------------
# Results
# --------------------------------------------------------------------------

CI_METHODS = ("influence_function", "bootstrap_percentile", "none")


@dataclass(frozen=True, eq=False)
class EstimateResult:
    """Point estimate with optional uncertainty.

    ``plugin`` and ``influence`` are kept for one-step estimators so that the
    identity ``point == plugin + mean(influence)`` can be checked; neither is
    serialized.
    """

    estimator_id: str
    point: float
    se: float | None = None
    ci_lo: float | None = None
    ci_hi: float | None = None
    ci_method: str = "none"
    clip_count: int = 0
    plugin: float | None = None
    influence: np.ndarray | None = field(default=None, repr=False)
    extras: dict[str, Any] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.ci_method not in CI_METHODS:
            raise ConfigError(f"unknown ci_method {self.ci_method!r}")
        if self.se is not None and self.se < 0:
            raise ConfigError("se must be nonnegative")
        if self.ci_lo is not None and self.ci_hi is not None and self.ci_lo > self.ci_hi:
            raise ConfigError("ci_lo must not exceed ci_hi")

    def to_dict(self) -> dict:
        return {
            "id": self.estimator_id,
            "point": self.point,
            "se": self.se,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "ci_method": self.ci_method,
            "clip_count": self.clip_count,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())
