"""Simulation-based confidence distributions via accept-reject schemes.

Two samplers share the same machinery: an ABC-style rule that accepts
proposals whose simulated summary lands within a tolerance of the observed
one (yielding a confidence-density sample), and a significance-function rule
that accepts proposals whose simulated summary exceeds the observed one
(yielding a CD from per-bin acceptance frequencies).

Summary statistics:

``m_estimator``                  the interest-parameter M-estimate of the
                                 simulated data (one solve per proposal)
``profile_estimating_equation``  the interest block of the estimating
                                 function at the observed interest estimate,
                                 with proposal values plugged in for the
                                 nuisance parameters (no per-proposal solve)
``median_difference``            group median difference (two-sample only)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cd import CDError, ConfidenceCurve, ConfidenceDensity, ConfidenceDistribution, pava_increasing
from .mest import (
    EstimatingFunction,
    huber_psi,
    solve,
    _huber_location_rows,
    _huber_regression_rows,
    _two_sample_huber_rows,
)
from .models import OneSampleModel, RegressionModel, TwoSampleData, TwoSampleModel
from .rng import derive_rng

__all__ = [
    "ProposalSpec",
    "SummaryStatistic",
    "AbcConfig",
    "SimDiagnostics",
    "abc_cd",
    "sig_cd",
]

PILOT_SIZE = 1000
SIG_BINS = 200
# A monotonized acceptance profile whose mean isotonic adjustment exceeds
# this is not reported as a proper CD.
PAVA_ADJUSTMENT_LIMIT = 0.05

_SUMMARY_KINDS = ("m_estimator", "profile_estimating_equation", "median_difference")


@dataclass(frozen=True)
class ProposalSpec:
    """Independent uniform proposal ranges, interest first."""

    psi_range: tuple[float, float]
    nuisance_ranges: tuple[tuple[float, float], ...] = ()
    r: int = 10_000

    def __post_init__(self):
        for lo, hi in (self.psi_range, *self.nuisance_ranges):
            if not lo < hi:
                raise ValueError("proposal ranges must be non-degenerate")
        if self.r < 1:
            raise ValueError("need at least one proposal")


@dataclass(frozen=True)
class SummaryStatistic:
    kind: str
    rescale: bool = True

    def __post_init__(self):
        if self.kind not in _SUMMARY_KINDS:
            raise ValueError(f"unknown summary statistic {self.kind!r}")


@dataclass(frozen=True)
class AbcConfig:
    epsilon: float
    seed: int
    distance: str = "scaled_absolute"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("tolerance epsilon must be positive")
        if self.distance not in ("absolute", "scaled_absolute"):
            raise ValueError(f"unknown distance {self.distance!r}")


@dataclass
class SimDiagnostics:
    n_proposals: int = 0
    n_accepted: int = 0
    n_solver_failures: int = 0
    min_distance: float = math.nan
    pilot_scale: float = 1.0
    orientation: str = "increasing"
    pava_adjustment: float = 0.0
    max_pava_adjustment: float = 0.0
    monotone: bool = True

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_proposals if self.n_proposals else math.nan

    def summary_block(self) -> str:
        lines = [
            f"proposals={self.n_proposals}",
            f"accepted={self.n_accepted}",
            f"acceptance_rate={self.acceptance_rate:.6g}",
            f"solver_failures={self.n_solver_failures}",
            f"min_distance={self.min_distance:.6g}",
            f"pilot_scale={self.pilot_scale:.6g}",
            f"orientation={self.orientation}",
            f"pava_adjustment={self.pava_adjustment:.6g}",
            f"monotone={self.monotone}",
        ]
        return "\n".join(lines)


# -- proposal simulation ----------------------------------------------------

def _draw_proposals(proposal: ProposalSpec, r: int, rng) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = proposal.psi_range
    psis = rng.uniform(lo, hi, r)
    lams = np.column_stack([rng.uniform(a, b, r) for a, b in proposal.nuisance_ranges]) \
        if proposal.nuisance_ranges else np.empty((r, 0))
    return psis, lams


def _simulate_batch(model, psis, lams, rng):
    """Pseudo-data for each proposal row, matching the observed layout."""
    r = psis.size
    if isinstance(model, TwoSampleModel):
        if lams.shape[1] != 2:
            raise ValueError("two-sample proposals need nuisance ranges for (mu_n, sigma)")
        n = model.n_per_group
        mu_n, sigma = lams[:, 0], lams[:, 1]
        ys = (mu_n + psis)[:, None] + sigma[:, None] * rng.standard_normal((r, n))
        yn = mu_n[:, None] + sigma[:, None] * rng.standard_normal((r, n))
        return ys, yn
    if isinstance(model, OneSampleModel):
        sigma = model.sigma if lams.shape[1] == 0 else lams[:, 0][:, None]
        return psis[:, None] + sigma * rng.standard_normal((r, model.n)),
    if isinstance(model, RegressionModel):
        if lams.shape[1] != 3:
            raise ValueError("regression proposals need nuisance ranges for (b0, b1, sigma)")
        y_bl = np.asarray(model.y_bl, dtype=float)
        p = np.asarray(model.p, dtype=float)
        mean = lams[:, 0][:, None] + lams[:, 1][:, None] * y_bl + psis[:, None] * p
        return mean + lams[:, 2][:, None] * rng.standard_normal((r, y_bl.size)),
    raise TypeError(f"unknown model type {type(model).__name__}")


def _summaries(summary: SummaryStatistic, ef: EstimatingFunction, model, batch,
               psis, lams, psi_tilde_obs):
    """Summary statistic per proposal row plus a validity mask."""
    if isinstance(model, TwoSampleModel):
        ys, yn = batch
        r = ys.shape[0]
        ok = np.ones(r, dtype=bool)
        if summary.kind == "median_difference":
            return np.median(ys, axis=1) - np.median(yn, axis=1), ok
        if summary.kind == "m_estimator":
            if ef.kind == "ml_score":
                return ys.mean(axis=1) - yn.mean(axis=1), ok
            psi_hat, _, _, ok = _two_sample_huber_rows(ys, yn, ef.c)
            return psi_hat, ok
        # profile estimating equation with proposal nuisances plugged in
        mu_n, sigma = lams[:, 0][:, None], lams[:, 1][:, None]
        rs = (ys - mu_n - psi_tilde_obs) / sigma
        es = rs if ef.kind == "ml_score" else huber_psi(rs, ef.c)
        return (es / sigma).sum(axis=1), ok
    if isinstance(model, OneSampleModel):
        (y,) = batch
        r = y.shape[0]
        ok = np.ones(r, dtype=bool)
        if summary.kind == "median_difference":
            raise ValueError("median_difference applies to the two-sample family")
        if summary.kind == "m_estimator":
            if ef.kind == "ml_score":
                return y.mean(axis=1), ok
            if ef.kind == "median_sign":
                return np.median(y, axis=1), ok
            sigma = ef.known_scale if ef.known_scale is not None else None
            mu, _, ok = _huber_location_rows(y, ef.c, sigma=sigma)
            return mu, ok
        sigma = np.full(r, ef.known_scale) if lams.shape[1] == 0 else lams[:, 0]
        rr = (y - psi_tilde_obs) / sigma[:, None]
        es = rr if ef.kind == "ml_score" else huber_psi(rr, ef.c)
        return (es / sigma[:, None]).sum(axis=1), ok
    # regression
    (y,) = batch
    r = y.shape[0]
    ok = np.ones(r, dtype=bool)
    x = np.column_stack([model.p, np.ones(len(model.p)), model.y_bl])
    if summary.kind == "median_difference":
        raise ValueError("median_difference applies to the two-sample family")
    if summary.kind == "m_estimator":
        if ef.kind == "ml_score":
            beta = np.linalg.lstsq(x, y.T, rcond=None)[0].T
            return beta[:, 0], ok
        beta, _, ok = _huber_regression_rows(x, y, ef.c)
        return beta[:, 0], ok
    mean_rest = lams[:, 0][:, None] + lams[:, 1][:, None] * np.asarray(model.y_bl)
    sigma = lams[:, 2][:, None]
    p_col = np.asarray(model.p, dtype=float)
    rr = (y - mean_rest - psi_tilde_obs * p_col) / sigma
    es = rr if ef.kind == "ml_score" else huber_psi(rr, ef.c)
    return (es * p_col / sigma).sum(axis=1), ok


def _observed_summary(summary: SummaryStatistic, ef: EstimatingFunction, observed) -> tuple[float, float]:
    """(t_obs, psi_tilde_obs); the interest estimate feeds the profile summary."""
    if summary.kind == "median_difference":
        if not isinstance(observed, TwoSampleData):
            raise ValueError("median_difference applies to the two-sample family")
        return float(np.median(observed.y_s) - np.median(observed.y_n)), math.nan
    point = solve(ef, observed)
    if summary.kind == "m_estimator":
        return point.psi, point.psi
    # The observed profile equation vanishes at the full estimate by
    # construction; keeping the same functional keeps distances comparable.
    t_obs = float(ef.g_total(observed, point.theta)[0])
    return t_obs, point.psi


def _ef_for(model, summary: SummaryStatistic, ef: EstimatingFunction | None) -> EstimatingFunction:
    if ef is not None:
        return ef
    family = {"TwoSampleModel": "two_sample", "OneSampleModel": "one_sample",
              "RegressionModel": "regression"}[type(model).__name__]
    kind = "huber_regression" if family == "regression" else "huber_location"
    if summary.kind == "median_difference":
        kind = "median_sign"
    return EstimatingFunction(kind=kind, family=family)


# -- public samplers ----------------------------------------------------------

def abc_cd(model, proposal: ProposalSpec, summary: SummaryStatistic, cfg: AbcConfig,
           observed, ef: EstimatingFunction | None = None) -> ConfidenceDensity:
    """Accept-reject simulation of a robust confidence density.

    Proposals are drawn uniformly, pseudo-data is simulated at each proposal,
    and a proposal is accepted when its summary lands within ``cfg.epsilon``
    of the observed summary.  With uniform proposals the importance
    resampling step is the identity, so accepted interest values are returned
    directly as a confidence-density sample with acceptance diagnostics.
    """
    ef = _ef_for(model, summary, ef)
    t_obs, psi_tilde = _observed_summary(summary, ef, observed)
    diag = SimDiagnostics(n_proposals=proposal.r)
    scale = 1.0
    if cfg.distance == "scaled_absolute" and summary.rescale:
        scale = _pilot_scale(model, proposal, summary, ef, psi_tilde, cfg.seed)
    diag.pilot_scale = scale
    rng = derive_rng(cfg.seed, "proposals")
    psis, lams = _draw_proposals(proposal, proposal.r, rng)
    batch = _simulate_batch(model, psis, lams, rng)
    t_star, ok = _summaries(summary, ef, model, batch, psis, lams, psi_tilde)
    diag.n_solver_failures = int(np.sum(~ok))
    dist = np.abs(t_star - t_obs) / scale
    dist[~ok] = np.inf
    accept = dist <= cfg.epsilon
    diag.n_accepted = int(np.sum(accept))
    diag.min_distance = float(np.min(dist)) if np.any(np.isfinite(dist)) else math.nan
    if diag.n_accepted == 0:
        raise CDError("tolerance too tight or proposal mis-centered: no acceptances "
                      f"(min distance {diag.min_distance:.4g})")
    return ConfidenceDensity.from_sample(np.sort(psis[accept]), diagnostics=vars(diag).copy())


def _pilot_scale(model, proposal, summary, ef, psi_tilde, seed) -> float:
    rng = derive_rng(seed, "pilot")
    psis, lams = _draw_proposals(proposal, PILOT_SIZE, rng)
    batch = _simulate_batch(model, psis, lams, rng)
    t_star, ok = _summaries(summary, ef, model, batch, psis, lams, psi_tilde)
    t_ok = t_star[ok]
    if t_ok.size < 10:
        return 1.0
    mad = 1.4826 * float(np.median(np.abs(t_ok - np.median(t_ok))))
    return mad if mad > 0 else 1.0


def sig_cd(model, proposal: ProposalSpec, summary: SummaryStatistic, observed,
           seed: int, ef: EstimatingFunction | None = None,
           bins: int = SIG_BINS):
    """Significance-function CD: accept proposals whose summary exceeds the
    observed value, then read C off per-bin acceptance frequencies.

    The acceptance profile is oriented automatically (a summary that is
    stochastically decreasing in the interest parameter flips the profile),
    monotonized, and returned as a grid CD.  If the isotonic adjustment is
    too large the profile is returned as a confidence-curve object instead.
    """
    ef = _ef_for(model, summary, ef)
    t_obs, psi_tilde = _observed_summary(summary, ef, observed)
    rng = derive_rng(seed, "proposals")
    psis, lams = _draw_proposals(proposal, proposal.r, rng)
    batch = _simulate_batch(model, psis, lams, rng)
    t_star, ok = _summaries(summary, ef, model, batch, psis, lams, psi_tilde)
    return _sig_from_summaries(psis, t_star, ok, t_obs, proposal.psi_range, bins)


def _sig_from_summaries(psis, t_star, ok, t_obs, psi_range, bins: int = SIG_BINS):
    diag = SimDiagnostics(n_proposals=psis.size)
    diag.n_solver_failures = int(np.sum(~ok))
    accept = ok & (t_star >= t_obs)
    diag.n_accepted = int(np.sum(accept))
    lo, hi = psi_range
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.digitize(psis, edges) - 1, 0, bins - 1)
    proposed = np.bincount(idx[ok], minlength=bins)
    accepted = np.bincount(idx[accept], minlength=bins)
    keep = proposed > 0
    centers = 0.5 * (edges[:-1] + edges[1:])[keep]
    s_hat = accepted[keep] / proposed[keep]
    w = proposed[keep].astype(float)
    # Orient the profile: pick the monotone direction with less isotonic error.
    up = pava_increasing(s_hat, w)
    down = pava_increasing(s_hat[::-1], w[::-1])[::-1]
    err_up = float(w @ (s_hat - up) ** 2)
    err_down = float(w @ (s_hat - down) ** 2)
    if err_down < err_up:
        diag.orientation = "decreasing"
        c_raw = 1.0 - s_hat
        c_fit = 1.0 - down
    else:
        c_raw = s_hat
        c_fit = up
    c_fit = np.clip(c_fit, 0.0, 1.0)
    diag.pava_adjustment = float(np.mean(np.abs(c_raw - c_fit)))
    diag.max_pava_adjustment = float(np.max(np.abs(c_raw - c_fit)))
    diag.monotone = diag.pava_adjustment <= PAVA_ADJUSTMENT_LIMIT
    if not diag.monotone:
        profile = c_raw / max(float(np.max(c_raw)), 1e-12)
        values = 1.0 - profile
        star = float(centers[int(np.argmax(c_raw))])
        return ConfidenceCurve(psi=centers, values=values, psi_star=star,
                               source="acceptance_profile",
                               diagnostics=vars(diag).copy())
    # Weighted PAVA inside from_grid reproduces c_fit and records the max
    # pointwise adjustment on the resulting CD.
    return ConfidenceDistribution.from_grid(centers, c_raw, monotonize=True,
                                            pava_weights=w,
                                            diagnostics=vars(diag).copy())
