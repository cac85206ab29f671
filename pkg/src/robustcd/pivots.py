"""Pivotal quantities and the confidence distributions they induce.

Kinds and their null reference distributions:

====================  =========================================  ===========
kind                  statistic                                  null law
====================  =========================================  ===========
``wald_classic``      (psi_hat - psi) / se_obs                   N(0, 1)
``lrt_classic``       2 (l_p(psi_hat) - l_p(psi))                chi2_1
``root_classic``      signed root of the above                   N(0, 1)
``wald_robust``       (psi_tilde - psi) / se_sandwich            N(0, 1)
``score_robust``      squared standardized profile score          chi2_1
``ratio_robust_adj``  2 (G(full) - G(constrained)) / nu          chi2_1
``root_robust``       signed root of the adjusted ratio          N(0, 1)
====================  =========================================  ===========

Classic kinds require the ``ml_score`` estimating function; ratio-type kinds
require an estimating function with an objective.  Chi-square statistics are
folded into one-sided CDs through the sign of (psi - psi_tilde).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .cd import ConfidenceDensity, ConfidenceDistribution, normal_cd, t_cd
from .mest import (
    EstimatingFunction,
    GodambeEstimates,
    ParameterPoint,
    SolverError,
    godambe,
    solve,
    solve_constrained,
)
from .models import RegressionData, TwoSampleData

__all__ = [
    "PIVOT_KINDS",
    "PivotError",
    "null_distribution",
    "pivot_value",
    "cd_from_pivot",
    "confidence_density_from_pivot",
    "tail_area_influence",
    "classical_t_cd",
    "export_plot_data",
]

PIVOT_KINDS = (
    "wald_classic",
    "lrt_classic",
    "root_classic",
    "wald_robust",
    "score_robust",
    "ratio_robust_adj",
    "root_robust",
)

_CLASSIC = {"wald_classic", "lrt_classic", "root_classic"}
_RATIO = {"lrt_classic", "root_classic", "ratio_robust_adj", "root_robust"}
_CHI2 = {"lrt_classic", "score_robust", "ratio_robust_adj"}

GRID_POINTS = 401
GRID_WIDTH = 8.0  # grid spans psi_tilde +/- GRID_WIDTH robust standard errors
MAX_DROP_FRACTION = 0.2


class PivotError(RuntimeError):
    """Pivot cannot be formed for the requested kind and estimating function."""


def null_distribution(kind: str) -> str:
    _check_kind(kind)
    return "chi2_1" if kind in _CHI2 else "normal"


def _check_kind(kind: str):
    if kind not in PIVOT_KINDS:
        raise PivotError(f"unknown pivot kind {kind!r}")


def _check_compat(kind: str, ef: EstimatingFunction):
    _check_kind(kind)
    if kind in _CLASSIC and ef.kind != "ml_score":
        raise PivotError(f"{kind} is likelihood-based and needs the ml_score estimating function")
    if kind in _RATIO and not ef.has_objective:
        raise PivotError("ratio-type pivot unavailable: estimating function has no objective")


@dataclass(frozen=True)
class _Fit:
    point: ParameterPoint
    gd: GodambeEstimates
    se_classic: float

    @property
    def psi(self) -> float:
        return self.point.psi

    def se(self, kind: str) -> float:
        if kind == "wald_classic":
            return self.se_classic
        return self.gd.se_psi


def _classical_se(ef: EstimatingFunction, data, gd: GodambeEstimates) -> float:
    """Observed-information standard error with the unbiased-variance
    convention for normal families (degrees-of-freedom corrected scale)."""
    if ef.kind != "ml_score" or ef.known_scale is not None:
        return math.sqrt(gd.k_psi_psi)
    if ef.family == "one_sample":
        n = np.asarray(data).size
        return math.sqrt(gd.k_psi_psi * n / (n - 1))
    if ef.family == "two_sample":
        n = data.n_total
        return math.sqrt(gd.k_psi_psi * n / (n - 2))
    n = data.n
    return math.sqrt(gd.k_psi_psi * n / (n - 3))


def _fit(ef: EstimatingFunction, data) -> _Fit:
    point = solve(ef, data)
    gd = godambe(ef, data, point)
    return _Fit(point=point, gd=gd, se_classic=_classical_se(ef, data, gd))


def _chi_statistic(kind: str, ef: EstimatingFunction, data, psi: float, fit: _Fit,
                   ratio_scale: str = "global") -> float:
    """Non-negative chi-square-scale statistic underlying the folded CD."""
    constrained = solve_constrained(ef, data, psi)
    if kind == "score_robust":
        g_psi = float(ef.g_total(data, constrained.theta)[0])
        return g_psi * g_psi * fit.gd.k_psi_psi**2 / fit.gd.v_psi_psi
    if kind in ("lrt_classic", "root_classic"):
        # the literal profile objective: nuisance (including scale) replaced
        # by its constrained estimate
        w = 2.0 * (ef.objective(data, fit.point.theta) - ef.objective(data, constrained.theta))
        return max(w, 0.0)
    # Adjusted robust ratio.  With a bounded rho the constrained-scale
    # variant saturates in the tails (the re-estimated scale absorbs the
    # misfit), so the scale is held at the global estimate by default;
    # ratio_scale="constrained" restores the profile-style variant.
    if ratio_scale == "global" and ef.estimates_scale:
        sigma = fit.point.theta[-1]
        g_constrained = ef.objective(data, constrained.theta, scale_override=sigma)
        g_full = ef.objective(data, fit.point.theta, scale_override=sigma)
    elif ratio_scale in ("constrained", "global"):
        g_constrained = ef.objective(data, constrained.theta)
        g_full = ef.objective(data, fit.point.theta)
    else:
        raise PivotError(f"unknown ratio_scale {ratio_scale!r}")
    w = 2.0 * (g_full - g_constrained)
    return max(w, 0.0) / fit.gd.nu


def pivot_value(kind: str, ef: EstimatingFunction, data, psi: float,
                ratio_scale: str = "global") -> float:
    """Value of the pivotal statistic at the hypothesized interest value."""
    _check_compat(kind, ef)
    fit = _fit(ef, data)
    if kind == "wald_classic" or kind == "wald_robust":
        return (fit.psi - psi) / fit.se(kind)
    stat = _chi_statistic(kind, ef, data, psi, fit, ratio_scale)
    if kind in _CHI2:
        return stat
    return math.copysign(math.sqrt(stat), fit.psi - psi)


def _default_grid(fit: _Fit, points: int, width: float) -> np.ndarray:
    se = fit.gd.se_psi
    return np.linspace(fit.psi - width * se, fit.psi + width * se, points)


def cd_from_pivot(kind: str, ef: EstimatingFunction, data, grid=None,
                  points: int = GRID_POINTS, width: float = GRID_WIDTH,
                  ratio_scale: str = "global") -> ConfidenceDistribution:
    """First-order asymptotic CD induced by the pivot.

    Wald kinds give closed-form normal CDs.  Ratio, root, and score kinds
    are evaluated on a grid of interest values (default 401 points spanning
    psi_tilde +/- 8 robust standard errors), folded through the sign of
    (psi - psi_tilde), and monotonized.  Grid points where the constrained
    solve fails are dropped with a warning; more than 20% drops is an error.
    """
    _check_compat(kind, ef)
    fit = _fit(ef, data)
    if kind in ("wald_classic", "wald_robust"):
        return normal_cd(fit.psi, fit.se(kind), width=width)
    psi_grid = _default_grid(fit, points, width) if grid is None else np.asarray(grid, dtype=float)
    c_vals = np.full(psi_grid.size, np.nan)
    for i, psi in enumerate(psi_grid):
        try:
            stat = _chi_statistic(kind, ef, data, float(psi), fit, ratio_scale)
        except SolverError:
            continue
        c_vals[i] = stats.norm.cdf(math.copysign(math.sqrt(stat), psi - fit.psi))
    keep = np.isfinite(c_vals)
    dropped = int(np.sum(~keep))
    if dropped:
        warnings.warn(f"dropped {dropped} grid points with failed constrained solves",
                      stacklevel=2)
    if dropped > MAX_DROP_FRACTION * psi_grid.size:
        raise PivotError(f"constrained solves failed at {dropped}/{psi_grid.size} grid points")
    cd = ConfidenceDistribution.from_grid(psi_grid[keep], c_vals[keep], monotonize=True)
    cd.diagnostics.update({"kind": kind, "psi_tilde": fit.psi, "se": fit.gd.se_psi,
                           "dropped": dropped})
    return cd


def confidence_density_from_pivot(kind: str, ef: EstimatingFunction, data, grid=None,
                                  points: int = GRID_POINTS, width: float = GRID_WIDTH,
                                  ratio_scale: str = "global") -> ConfidenceDensity:
    """Confidence density on a grid.

    Wald kinds use the exact normal density; the others differentiate the
    folded root numerically along the grid.
    """
    _check_compat(kind, ef)
    fit = _fit(ef, data)
    psi_grid = _default_grid(fit, points, width) if grid is None else np.asarray(grid, dtype=float)
    if kind in ("wald_classic", "wald_robust"):
        se = fit.se(kind)
        pdf = stats.norm.pdf((psi_grid - fit.psi) / se) / se
        return ConfidenceDensity.from_grid(psi_grid, pdf,
                                           diagnostics={"kind": kind, "psi_tilde": fit.psi})
    z = np.full(psi_grid.size, np.nan)
    for i, psi in enumerate(psi_grid):
        try:
            stat = _chi_statistic(kind, ef, data, float(psi), fit, ratio_scale)
        except SolverError:
            continue
        z[i] = math.copysign(math.sqrt(stat), psi - fit.psi)
    keep = np.isfinite(z)
    if np.sum(~keep) > MAX_DROP_FRACTION * psi_grid.size:
        raise PivotError("constrained solves failed on too many grid points")
    x = psi_grid[keep]
    dz = np.gradient(z[keep], x)
    pdf = stats.norm.pdf(z[keep]) * np.abs(dz)
    return ConfidenceDensity.from_grid(x, pdf, diagnostics={"kind": kind, "psi_tilde": fit.psi})


# -- tail-area influence ---------------------------------------------------

def _augmented(ef: EstimatingFunction, data, y, group: str):
    """Data extended with the contamination point, plus base/point weights."""
    if ef.family == "one_sample":
        base = np.asarray(data, dtype=float)
        return np.append(base, float(y)), base.size
    if ef.family == "two_sample":
        if str(group).upper() == "S":
            return TwoSampleData(y_s=np.append(data.y_s, float(y)), y_n=data.y_n), data.n_total
        return TwoSampleData(y_s=data.y_s, y_n=np.append(data.y_n, float(y))), data.n_total
    y_fu, y_bl, p = y
    return (
        RegressionData(
            y_fu=np.append(data.y_fu, float(y_fu)),
            y_bl=np.append(data.y_bl, float(y_bl)),
            p=np.append(data.p, float(p)),
        ),
        data.n,
    )


def tail_area_influence(kind: str, ef: EstimatingFunction, data, psi: float, y,
                        group: str = "N", eps: float = 1e-4,
                        ratio_scale: str = "global") -> float:
    """Directional derivative of the CD tail area under contamination at y.

    The empirical distribution is reweighted to (1 - eps) F_n + eps delta_y
    on both sides of zero and the estimate is re-solved; variance blocks,
    the scale, and the ratio scaling stay at their uncontaminated values, so
    the numeric derivative matches the factorized product of the normal
    density, the pivot gradient, and the influence function.
    """
    from dataclasses import replace as _replace

    _check_compat(kind, ef)
    if ef.kind == "median_sign":
        raise PivotError("tail-area influence unavailable for median_sign: the kernel-based "
                         "sensitivity is not stable under signed reweighting")
    fit = _fit(ef, data)
    if ef.estimates_scale:
        sigma_tilde = float(fit.point.theta[-1])
        ef_eps = _replace(ef, known_scale=sigma_tilde)
    else:
        ef_eps = ef
    data_aug, n_base = _augmented(ef, data, y, group)

    def tail(signed_eps: float) -> float:
        if ef.family == "two_sample":
            w_s = np.full(data_aug.y_s.size, (1.0 - signed_eps) / n_base)
            w_n = np.full(data_aug.y_n.size, (1.0 - signed_eps) / n_base)
            if str(group).upper() == "S":
                w_s[-1] = signed_eps
            else:
                w_n[-1] = signed_eps
            weights = (w_s, w_n)
        else:
            weights = np.full(n_base + 1, (1.0 - signed_eps) / n_base)
            weights[-1] = signed_eps
        point = solve(ef_eps, data_aug, weights=weights)
        if kind in ("wald_classic", "wald_robust"):
            q = (psi - point.psi) / fit.se(kind)
        else:
            constrained = solve_constrained(ef_eps, data_aug, psi, weights=weights)
            if kind == "score_robust":
                g_psi = float(ef_eps.g_total(data_aug, constrained.theta, weights=weights)[0])
                stat = g_psi * g_psi * fit.gd.k_psi_psi**2 / fit.gd.v_psi_psi
            else:
                g_full = ef_eps.objective(data_aug, point.theta, weights=weights)
                g_con = ef_eps.objective(data_aug, constrained.theta, weights=weights)
                stat = max(2.0 * (g_full - g_con), 0.0)
                if kind in ("ratio_robust_adj", "root_robust"):
                    stat /= fit.gd.nu
            q = math.copysign(math.sqrt(stat), psi - point.psi)
        if not math.isfinite(q):
            raise PivotError("non-finite pivot under contamination")
        return float(stats.norm.cdf(q))

    return (tail(eps) - tail(-eps)) / (2.0 * eps)


# -- exact classical CDs ----------------------------------------------------

def classical_t_cd(data, df: str = "pooled") -> ConfidenceDistribution:
    """Exact classical Wald-type CD from the Student-t pivot.

    Two-sample data uses the mean difference with pooled (default) or Welch
    degrees of freedom; regression data uses the treatment coefficient with
    n - 3 degrees of freedom.
    """
    if isinstance(data, TwoSampleData):
        n_s, n_n = data.y_s.size, data.y_n.size
        psi_hat = float(np.mean(data.y_s) - np.mean(data.y_n))
        v_s, v_n = float(np.var(data.y_s, ddof=1)), float(np.var(data.y_n, ddof=1))
        if df == "pooled":
            dof = n_s + n_n - 2
            sp2 = ((n_s - 1) * v_s + (n_n - 1) * v_n) / dof
            se = math.sqrt(sp2 * (1.0 / n_s + 1.0 / n_n))
        elif df == "welch":
            se2 = v_s / n_s + v_n / n_n
            se = math.sqrt(se2)
            dof = se2**2 / ((v_s / n_s) ** 2 / (n_s - 1) + (v_n / n_n) ** 2 / (n_n - 1))
        else:
            raise PivotError(f"unknown df rule {df!r}")
        if se <= 0:
            raise SolverError("zero-spread data: no exact-t CD")
        return t_cd(psi_hat, se, dof)
    if isinstance(data, RegressionData):
        x = np.column_stack([data.p, np.ones_like(data.p), data.y_bl])
        beta_hat, *_ = np.linalg.lstsq(x, data.y_fu, rcond=None)
        resid = data.y_fu - x @ beta_hat
        dof = data.n - x.shape[1]
        s2 = float(resid @ resid) / dof
        xtx_inv = np.linalg.inv(x.T @ x)
        se = math.sqrt(s2 * xtx_inv[0, 0])
        return t_cd(float(beta_hat[0]), se, dof)
    raise PivotError("exact-t CD is defined for two-sample and regression data")


def export_plot_data(cd: ConfidenceDistribution, path, points: int = GRID_POINTS) -> None:
    """Write (psi, C, cc, density) columns for plotting."""
    lo, hi = cd.support
    psi = np.linspace(lo, hi, points)
    c = np.atleast_1d(cd.evaluate(psi))
    cc = np.abs(1.0 - 2.0 * c)
    if cd.kind == "empirical":
        dens_obj = ConfidenceDensity.from_sample(cd.sample)
        dens = np.interp(psi, dens_obj.grid_x, dens_obj.grid_pdf)
    else:
        dens = np.gradient(c, psi)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("psi,C,cc,density\n")
        for row in zip(psi, c, cc, dens):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
