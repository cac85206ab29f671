"""Confidence distributions, curves, and densities for a scalar parameter.

A confidence distribution (CD) is a data-dependent distribution function
``C(psi)`` on the parameter axis whose alpha-quantile is a one-sided
confidence bound at every level.  Three representations are supported:

* ``closed_form``  a callable CDF (optionally with a callable quantile),
* ``empirical``    a sample of draws whose ECDF estimates ``C``,
* ``grid``         tabulated ``(psi, C)`` pairs, linearly interpolated.

All objects are immutable after construction and safe to share across
workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from scipy import stats
from scipy.optimize import brentq

__all__ = [
    "CDError",
    "order_statistic",
    "ConfidenceDistribution",
    "ConfidenceCurve",
    "ConfidenceDensity",
    "pava_increasing",
    "monotonize",
    "normal_cd",
    "t_cd",
    "save",
    "load",
]


class CDError(ValueError):
    """Invalid confidence-distribution construction or query."""


Representation = Literal["closed_form", "empirical", "grid"]

# Quantile rank convention for empirical CDs: order statistic at
# ceil(alpha * R), i.e. the inverse of the ECDF with no interpolation.
# The tiny guard keeps ranks stable when alpha * R sits within float fuzz
# of an integer, so that complementary levels reflect exactly.
def order_statistic(sorted_values: np.ndarray, q):
    q = np.atleast_1d(np.asarray(q, dtype=float))
    n = sorted_values.size
    ranks = np.clip(np.ceil(q * n - 1e-9).astype(int), 1, n)
    return sorted_values[ranks - 1]


def pava_increasing(values, weights=None) -> np.ndarray:
    """Project a sequence onto non-decreasing sequences.

    Pool-adjacent-violators with weighted-mean pooling; the result is the
    isotonic least-squares fit.
    """
    y = np.asarray(values, dtype=float)
    if y.ndim != 1:
        raise ValueError("pava_increasing expects a 1-d sequence")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != y.shape:
        raise ValueError("weights must match values")
    means: list[float] = []
    wsum: list[float] = []
    counts: list[int] = []
    for yi, wi in zip(y, w):
        means.append(float(yi))
        wsum.append(float(wi))
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, c2 = means.pop(), wsum.pop(), counts.pop()
            m1, w1, c1 = means.pop(), wsum.pop(), counts.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt if wt > 0 else 0.5 * (m1 + m2))
            wsum.append(wt)
            counts.append(c1 + c2)
    out = np.empty_like(y)
    pos = 0
    for m, c in zip(means, counts):
        out[pos : pos + c] = m
        pos += c
    return out


def _readonly(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float).copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ConfidenceDistribution:
    """Monotone map psi -> C(psi) in [0, 1] over a finite support interval."""

    kind: Representation
    support: tuple[float, float]
    cdf: Callable | None = None
    quantile_fn: Callable | None = None
    sample: np.ndarray | None = None
    grid_psi: np.ndarray | None = None
    grid_c: np.ndarray | None = None
    interpolate_quantiles: bool = False
    max_adjustment: float = 0.0
    diagnostics: dict = field(default_factory=dict, compare=False)

    # -- constructors -------------------------------------------------

    @classmethod
    def from_sample(cls, draws, interpolate_quantiles: bool = False,
                    diagnostics: dict | None = None) -> "ConfidenceDistribution":
        s = np.sort(np.asarray(draws, dtype=float).ravel())
        if s.size == 0:
            raise CDError("no accepted draws")
        if not np.all(np.isfinite(s)):
            raise CDError("empirical CD sample contains non-finite values")
        return cls(
            kind="empirical",
            support=(float(s[0]), float(s[-1])),
            sample=_readonly(s),
            interpolate_quantiles=interpolate_quantiles,
            diagnostics=diagnostics or {},
        )

    @classmethod
    def from_grid(cls, psi, c, monotonize: bool = True, pava_weights=None,
                  diagnostics: dict | None = None) -> "ConfidenceDistribution":
        psi = np.asarray(psi, dtype=float)
        c = np.asarray(c, dtype=float)
        if psi.ndim != 1 or psi.shape != c.shape or psi.size < 2:
            raise CDError("grid CD needs matching 1-d psi and C arrays, length >= 2")
        if np.any(np.diff(psi) <= 0):
            raise CDError("grid psi values must be strictly increasing")
        diag = dict(diagnostics or {})
        adjustment = 0.0
        cc = c
        if monotonize:
            cc = np.clip(pava_increasing(c, pava_weights), 0.0, 1.0)
            adjustment = float(np.max(np.abs(cc - c))) if c.size else 0.0
        else:
            diag.setdefault("monotone", bool(np.all(np.diff(c) >= 0)))
        return cls(
            kind="grid",
            support=(float(psi[0]), float(psi[-1])),
            grid_psi=_readonly(psi),
            grid_c=_readonly(cc),
            max_adjustment=adjustment,
            diagnostics=diag,
        )

    @classmethod
    def from_cdf(cls, cdf, support, quantile_fn=None,
                 diagnostics: dict | None = None) -> "ConfidenceDistribution":
        lo, hi = float(support[0]), float(support[1])
        if not lo < hi:
            raise CDError("support must be a non-degenerate interval")
        return cls(
            kind="closed_form",
            support=(lo, hi),
            cdf=cdf,
            quantile_fn=quantile_fn,
            diagnostics=diagnostics or {},
        )

    # -- evaluation ----------------------------------------------------

    def evaluate(self, psi):
        """C(psi); clamped at the support endpoints, exact 0/1 at -inf/+inf.

        For the empirical representation, the fraction of draws <= psi.
        """
        arr = np.asarray(psi, dtype=float)
        scalar = arr.ndim == 0
        x = np.atleast_1d(arr)
        out = np.empty_like(x)
        neg = np.isneginf(x)
        pos = np.isposinf(x)
        fin = ~(neg | pos)
        out[neg] = 0.0
        out[pos] = 1.0
        if np.any(fin):
            xf = x[fin]
            if self.kind == "empirical":
                out[fin] = np.searchsorted(self.sample, xf, side="right") / self.sample.size
            elif self.kind == "grid":
                out[fin] = np.interp(xf, self.grid_psi, self.grid_c)
            else:
                lo, hi = self.support
                out[fin] = np.clip(self.cdf(np.clip(xf, lo, hi)), 0.0, 1.0)
        return float(out[0]) if scalar else out

    def _quantile_inclusive(self, alpha):
        """Quantile for alpha in (0, 1]; alpha = 1 maps to the upper endpoint."""
        a = np.atleast_1d(np.asarray(alpha, dtype=float))
        if self.kind == "empirical":
            if self.interpolate_quantiles:
                return np.quantile(self.sample, a, method="linear")
            return order_statistic(self.sample, a)
        if self.kind == "grid":
            psi, c = self.grid_psi, self.grid_c
            idx = np.searchsorted(c, a, side="left")
            idx = np.clip(idx, 0, c.size - 1)
            res = np.empty_like(a)
            for k, (ak, i) in enumerate(zip(a, idx)):
                if i == 0 or c[i] <= c[i - 1] or ak <= c[0]:
                    res[k] = psi[i] if c[i] >= ak else psi[-1]
                else:
                    frac = (ak - c[i - 1]) / (c[i] - c[i - 1])
                    res[k] = psi[i - 1] + frac * (psi[i] - psi[i - 1])
            return res
        lo, hi = self.support
        if self.quantile_fn is not None:
            return np.clip(self.quantile_fn(a), lo, hi)
        res = np.empty_like(a)
        clo, chi = float(self.cdf(lo)), float(self.cdf(hi))
        for k, ak in enumerate(a):
            if ak <= clo:
                res[k] = lo
            elif ak >= chi:
                res[k] = hi
            else:
                res[k] = brentq(lambda t: float(self.cdf(t)) - ak, lo, hi, xtol=1e-12)
        return res

    def quantile(self, alpha):
        """Smallest psi with C(psi) >= alpha, for alpha in (0, 1)."""
        a = np.asarray(alpha, dtype=float)
        if np.any(a <= 0.0) or np.any(a >= 1.0):
            raise CDError("alpha must lie strictly inside (0, 1)")
        res = self._quantile_inclusive(a)
        return float(res[0]) if a.ndim == 0 else res

    def interval(self, level: float) -> tuple[float, float]:
        """Equi-tailed confidence interval at the given level."""
        if not 0.0 < level < 1.0:
            raise CDError("level must lie strictly inside (0, 1)")
        half = (1.0 - level) / 2.0
        return (self.quantile(half), self.quantile(1.0 - half))

    def evidence(self, psi1: float, psi2: float) -> float:
        """Confidence mass assigned to the statement psi1 < psi < psi2.

        Either endpoint may be infinite; evidence for "psi > d" is
        ``evidence(d, inf)`` which equals 1 - C(d).
        """
        if psi1 > psi2:
            raise CDError("evidence requires psi1 <= psi2")
        return float(self.evaluate(psi2) - self.evaluate(psi1))

    def p_value(self, psi0: float, alternative: str = "two_sided") -> float:
        c0 = float(self.evaluate(psi0))
        if alternative == "less":
            return c0
        if alternative == "greater":
            return 1.0 - c0
        if alternative == "two_sided":
            return min(1.0, 2.0 * min(c0, 1.0 - c0))
        raise CDError(f"unknown alternative {alternative!r}")

    # -- summaries -----------------------------------------------------

    def median(self) -> float:
        """Confidence median.

        Empirical CDs use the midpoint convention for even sample sizes so
        that tabulated point estimates are deterministic; other
        representations invert C at 1/2.
        """
        if self.kind == "empirical":
            return float(np.median(self.sample))
        return float(self._quantile_inclusive(0.5)[0])

    def mean(self, resolution: int = 512) -> float:
        if self.kind == "empirical":
            return float(np.mean(self.sample))
        if self.kind == "grid":
            c = self.grid_c
            psi = self.grid_psi
            mids = 0.5 * (psi[1:] + psi[:-1])
            mass = np.diff(c)
            total = psi[0] * c[0] + float(mids @ mass) + psi[-1] * (1.0 - c[-1])
            return float(total)
        u = (np.arange(resolution) + 0.5) / resolution
        return float(np.mean(self._quantile_inclusive(u)))

    def point_estimates(self, density: "ConfidenceDensity | None" = None,
                        mode_draws: int = 4096) -> dict:
        """Median, mean, and mode of the confidence distribution.

        The mode is read off a kernel-density grid; if no density is
        supplied one is computed from the CD first.
        """
        if density is None:
            density = density_from_cd(self, mode_draws)
        return {
            "median": self.median(),
            "mean": self.mean(),
            "mode": density.mode,
        }

    def is_monotone(self) -> bool:
        if self.kind == "grid":
            return bool(self.diagnostics.get("monotone", True))
        return True


def monotonize(psi, c_raw) -> ConfidenceDistribution:
    """Isotonic projection of a raw (psi, C) grid onto a valid CD.

    The largest pointwise adjustment is retained on the result as
    ``max_adjustment`` for diagnostic use.
    """
    return ConfidenceDistribution.from_grid(psi, c_raw, monotonize=True)


def normal_cd(center: float, se: float, width: float = 8.0) -> ConfidenceDistribution:
    """Closed-form CD Phi((psi - center) / se) on center +/- width * se."""
    if se <= 0.0 or not math.isfinite(se):
        raise CDError("scale of a normal CD must be positive and finite")
    support = (center - width * se, center + width * se)
    return ConfidenceDistribution.from_cdf(
        cdf=lambda x: stats.norm.cdf(x, loc=center, scale=se),
        quantile_fn=lambda a: stats.norm.ppf(a, loc=center, scale=se),
        support=support,
        diagnostics={"center": center, "se": se},
    )


def t_cd(center: float, se: float, df: float, width: float = 8.0) -> ConfidenceDistribution:
    """Closed-form CD from a Student-t pivot: T_df((psi - center) / se)."""
    if se <= 0.0 or df <= 0.0:
        raise CDError("t CD needs positive scale and degrees of freedom")
    support = (center - width * se, center + width * se)
    return ConfidenceDistribution.from_cdf(
        cdf=lambda x: stats.t.cdf((x - center) / se, df),
        quantile_fn=lambda a: center + se * stats.t.ppf(a, df),
        support=support,
        diagnostics={"center": center, "se": se, "df": df},
    )


@dataclass(frozen=True)
class ConfidenceDensity:
    """Sample and/or kernel grid representation of a confidence density."""

    sample: np.ndarray | None
    grid_x: np.ndarray
    grid_pdf: np.ndarray
    bandwidth: float | None = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_sample(cls, draws, grid_points: int = 512,
                    diagnostics: dict | None = None) -> "ConfidenceDensity":
        s = np.sort(np.asarray(draws, dtype=float).ravel())
        if s.size == 0:
            raise CDError("no accepted draws")
        spread = float(np.std(s))
        if spread == 0.0:
            # Degenerate sample: represent a narrow spike around the point.
            v = float(s[0])
            eps = max(1e-8, abs(v) * 1e-8)
            x = np.array([v - eps, v, v + eps])
            pdf = np.array([0.0, 1.0 / eps, 0.0])
            return cls(sample=_readonly(s), grid_x=_readonly(x), grid_pdf=_readonly(pdf),
                       bandwidth=0.0, diagnostics=diagnostics or {})
        kde = stats.gaussian_kde(s, bw_method="silverman")
        bw = float(kde.factor * spread)
        x = np.linspace(s[0] - 4.0 * bw, s[-1] + 4.0 * bw, grid_points)
        pdf = kde(x)
        return cls(sample=_readonly(s), grid_x=_readonly(x), grid_pdf=_readonly(pdf),
                   bandwidth=bw, diagnostics=diagnostics or {})

    @classmethod
    def from_grid(cls, x, pdf, diagnostics: dict | None = None) -> "ConfidenceDensity":
        x = np.asarray(x, dtype=float)
        pdf = np.asarray(pdf, dtype=float)
        if np.any(pdf < -1e-12):
            raise CDError("density values must be non-negative")
        return cls(sample=None, grid_x=_readonly(x), grid_pdf=_readonly(np.maximum(pdf, 0.0)),
                   diagnostics=diagnostics or {})

    @property
    def mode(self) -> float:
        return float(self.grid_x[int(np.argmax(self.grid_pdf))])

    def integral(self) -> float:
        return float(np.trapezoid(self.grid_pdf, self.grid_x))


def density_from_cd(cd: ConfidenceDistribution, r: int) -> ConfidenceDensity:
    """Confidence density via quantile inversion.

    Draws the sample ``{C^{-1}(j / r) : j = 1..r}`` and attaches a
    kernel-smoothed grid for plotting; the ECDF of the returned sample
    reconverges to the input CD.
    """
    if r < 2:
        raise CDError("density extraction needs r >= 2")
    if not cd.is_monotone():
        raise CDError("not a proper CD; monotonize or use confidence curve")
    levels = np.arange(1, r + 1) / r
    draws = cd._quantile_inclusive(levels)
    return ConfidenceDensity.from_sample(draws)


@dataclass(frozen=True)
class ConfidenceCurve:
    """cc(psi) = |1 - 2 C(psi)| with its zero-confidence point psi*."""

    psi: np.ndarray
    values: np.ndarray
    psi_star: float
    source: str = "cd"
    diagnostics: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_cd(cls, cd: ConfidenceDistribution, points: int = 401) -> "ConfidenceCurve":
        lo, hi = cd.support
        psi = np.linspace(lo, hi, points)
        c = np.atleast_1d(cd.evaluate(psi))
        return cls(psi=_readonly(psi), values=_readonly(np.abs(1.0 - 2.0 * c)),
                   psi_star=cd.median())

    def evaluate(self, psi):
        return np.interp(psi, self.psi, self.values)


# -- serialization -----------------------------------------------------

def save(cd: ConfidenceDistribution, path, points: int = 401) -> None:
    """Write a CD as two text columns (psi, C) with a one-line header.

    Closed-form CDs are sampled on a regular grid first; they load back as
    grid CDs.
    """
    if cd.kind == "empirical":
        xs = cd.sample
        cs = np.arange(1, xs.size + 1) / xs.size
        size = xs.size
    elif cd.kind == "grid":
        xs, cs = cd.grid_psi, cd.grid_c
        size = xs.size
    else:
        xs = np.linspace(cd.support[0], cd.support[1], points)
        cs = np.atleast_1d(cd.evaluate(xs))
        size = xs.size
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# representation={cd.kind} size={size}\n")
        for x, c in zip(xs, cs):
            fh.write(f"{float(x)!r},{float(c)!r}\n")


def load(path) -> ConfidenceDistribution:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# representation="):
            raise CDError(f"{path}: missing CD header line")
        fields = dict(item.split("=", 1) for item in header[2:].split())
        rows = [line.strip().split(",") for line in fh if line.strip()]
    psi = np.array([float(r[0]) for r in rows])
    c = np.array([float(r[1]) for r in rows])
    kind = fields.get("representation", "grid")
    if kind == "empirical":
        return ConfidenceDistribution.from_sample(psi)
    return ConfidenceDistribution.from_grid(psi, c, monotonize=False)
