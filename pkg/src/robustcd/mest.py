"""M-estimating functions, solvers, and sandwich variance machinery.

Estimating-function kinds
-------------------------
``ml_score``          normal-model score (sample means / OLS, ML scale)
``huber_location``    Huber psi for one- or two-sample location; the scale
                      nuisance solves a consistency-corrected second-moment
                      equation (Proposal-2 style)
``huber_regression``  Huber psi for linear regression with the same scale
                      treatment
``median_sign``       sign function: sample median or median difference
``tsallis``           density-power score for the one-sample normal model,
                      index gamma > 1

Parameter layout always puts the scalar interest component first:

* one_sample    theta = (mu,) or (mu, sigma)
* two_sample    theta = (psi, mu_n) or (psi, mu_n, sigma) with group means
                mu_n + psi (group S) and mu_n (group N), common sigma
* regression    theta = (b_p, b0, b1) or (b_p, b0, b1, sigma) for
                y_fu = b0 + b1 * y_bl + b_p * p + u

Sign conventions: g is oriented like a score (positive when an observation
sits above its fitted location), the sensitivity is K = -E[dg/dtheta'] so
that K is positive definite and the influence function K^{-1} g(y) equals
y - mu for the normal-mean score.  The objective G, where one exists, is
oriented for maximization (log-likelihood-like).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .models import RegressionData, TwoSampleData

__all__ = [
    "HUBER_C_DEFAULT",
    "SolverError",
    "ParameterPoint",
    "EstimatingFunction",
    "GodambeEstimates",
    "huber_psi",
    "huber_rho",
    "huber_chi_const",
    "tsallis_power_integral",
    "tsallis_g",
    "solve",
    "solve_constrained",
    "godambe",
    "influence_function",
]

HUBER_C_DEFAULT = 1.345
MAX_ITER = 200
# Scale-free root tolerance: solutions satisfy |mean_i psi(r_i)| <= TOL in
# standardized residual units (equivalently ||sum g|| <= TOL * n / sigma).
TOL = 1e-8

_KINDS = ("ml_score", "huber_location", "huber_regression", "median_sign", "tsallis")
_FAMILIES = ("one_sample", "two_sample", "regression")


class SolverError(RuntimeError):
    """Estimating-equation solve failed; carries the last iterate."""

    def __init__(self, message, last_theta=None, residual=None):
        self.last_theta = last_theta
        self.residual = residual
        if last_theta is not None:
            message = f"{message} (last iterate {np.asarray(last_theta)}, residual {residual:.3e})"
        super().__init__(message)


@dataclass(frozen=True)
class ParameterPoint:
    """Full parameter split as scalar interest psi plus nuisance vector."""

    psi: float
    lam: tuple[float, ...] = ()

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.psi, *self.lam], dtype=float)

    @classmethod
    def from_theta(cls, theta) -> "ParameterPoint":
        theta = np.asarray(theta, dtype=float)
        return cls(psi=float(theta[0]), lam=tuple(float(v) for v in theta[1:]))


# -- Huber primitives ---------------------------------------------------

def huber_psi(r, c: float):
    return np.clip(r, -c, c)


def huber_psi_prime(r, c: float):
    # Kinks at |r| = c take the interior branch.
    return (np.abs(r) <= c).astype(float)


def huber_weight(r, c: float):
    a = np.abs(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(a > c, c / np.where(a > 0, a, 1.0), 1.0)
    return w


def huber_rho(r, c: float):
    a = np.abs(r)
    return np.where(a <= c, 0.5 * r * r, c * a - 0.5 * c * c)


def huber_chi_const(c: float) -> float:
    """E[psi_c(Z)^2] under Z ~ N(0,1); the Proposal-2 consistency constant."""
    return float(2.0 * ((stats.norm.cdf(c) - 0.5) - c * stats.norm.pdf(c))
                 + 2.0 * c * c * stats.norm.sf(c))


def huber_efficiency_const(c: float) -> float:
    """E[psi_c'(Z)] = P(|Z| <= c)."""
    return float(2.0 * stats.norm.cdf(c) - 1.0)


# -- Tsallis primitives --------------------------------------------------

def tsallis_power_integral(gamma: float, sigma: float) -> float:
    """Closed form of the normal power integral: int f(y; mu, sigma)^gamma dy."""
    return float((2.0 * math.pi * sigma * sigma) ** ((1.0 - gamma) / 2.0) / math.sqrt(gamma))


def _tsallis_g_cols(y, mu, sigma, gamma):
    f = stats.norm.pdf(y, loc=mu, scale=sigma)
    fg1 = f ** (gamma - 1.0)
    g_mu = gamma * (gamma - 1.0) * fg1 * (y - mu) / sigma**2
    power_term = (gamma - 1.0) ** 2 * tsallis_power_integral(gamma, sigma) / sigma
    g_sigma = power_term + gamma * (gamma - 1.0) * fg1 * ((y - mu) ** 2 - sigma**2) / sigma**3
    return g_mu, g_sigma


def tsallis_g(gamma: float, theta, y):
    """Density-power score vector at observation y for the normal model."""
    if gamma <= 1.0:
        raise ValueError("tsallis index gamma must exceed 1")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    mu = theta[0]
    sigma = theta[1] if theta.size > 1 else 1.0
    g_mu, g_sigma = _tsallis_g_cols(np.asarray(y, dtype=float), mu, sigma, gamma)
    if theta.size > 1:
        return np.stack(np.broadcast_arrays(g_mu, g_sigma), axis=-1)
    return np.asarray(g_mu)


# -- Estimating function -------------------------------------------------

@dataclass(frozen=True)
class EstimatingFunction:
    kind: str
    family: str = "one_sample"
    c: float = HUBER_C_DEFAULT
    gamma: float | None = None
    known_scale: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown estimating-function kind {self.kind!r}")
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.kind == "tsallis":
            if self.family != "one_sample":
                raise ValueError("the tsallis score is defined for the one-sample normal model")
            if self.gamma is None or self.gamma <= 1.0:
                raise ValueError("tsallis index gamma must exceed 1")
        if self.kind == "huber_regression" and self.family != "regression":
            raise ValueError("huber_regression applies to the regression family")
        if self.kind == "huber_location" and self.family == "regression":
            raise ValueError("use huber_regression for the regression family")
        if self.kind == "median_sign" and self.family == "regression":
            raise ValueError("median_sign is not defined for the regression family")
        if self.known_scale is not None and self.known_scale <= 0:
            raise ValueError("known_scale must be positive")

    @property
    def estimates_scale(self) -> bool:
        return self.kind != "median_sign" and self.known_scale is None

    @property
    def has_objective(self) -> bool:
        return self.kind != "median_sign"

    def dim(self) -> int:
        base = {"one_sample": 1, "two_sample": 2, "regression": 3}[self.family]
        return base + (1 if self.estimates_scale else 0)

    # -- internal layout helpers --

    def _loc_scale(self, theta):
        theta = np.asarray(theta, dtype=float)
        n_loc = {"one_sample": 1, "two_sample": 2, "regression": 3}[self.family]
        if self.kind == "median_sign":
            return theta[:n_loc], None
        if self.known_scale is not None:
            return theta[:n_loc], float(self.known_scale)
        return theta[:n_loc], float(theta[n_loc])

    def _residuals(self, data, theta):
        loc, scale = self._loc_scale(theta)
        if self.family == "one_sample":
            y = np.asarray(data, dtype=float)
            return y - loc[0], None
        if self.family == "two_sample":
            mu_s = loc[1] + loc[0]
            return data.y_s - mu_s, data.y_n - loc[1]
        x_int = np.column_stack([data.p, np.ones_like(data.p), data.y_bl])
        return data.y_fu - x_int @ loc, None

    def g_obs(self, data, theta) -> np.ndarray:
        """Per-observation estimating function, shape (n, dim)."""
        loc, scale = self._loc_scale(theta)
        d = self.dim()
        if self.family == "one_sample":
            y = np.asarray(data, dtype=float)
            r0 = y - loc[0]
            if self.kind == "median_sign":
                return np.sign(r0)[:, None]
            if self.kind == "tsallis":
                g_mu, g_sig = _tsallis_g_cols(y, loc[0], scale, self.gamma)
                cols = [g_mu] + ([np.broadcast_to(g_sig, y.shape)] if self.estimates_scale else [])
                return np.column_stack(cols)
            r = r0 / scale
            if self.kind == "ml_score":
                cols = [r / scale]
                if self.estimates_scale:
                    cols.append((r * r - 1.0) / scale)
            else:
                pc = huber_psi(r, self.c)
                cols = [pc / scale]
                if self.estimates_scale:
                    cols.append((pc * pc - huber_chi_const(self.c)) / scale)
            return np.column_stack(cols)
        if self.family == "two_sample":
            n_s, n_n = data.y_s.size, data.y_n.size
            rs0, rn0 = self._residuals(data, theta)
            if self.kind == "median_sign":
                g = np.zeros((n_s + n_n, 2))
                g[:n_s, 0] = np.sign(rs0)
                g[n_s:, 1] = np.sign(rn0)
                return g
            rs, rn = rs0 / scale, rn0 / scale
            if self.kind == "ml_score":
                es, en = rs, rn
                chi_s, chi_n = rs * rs - 1.0, rn * rn - 1.0
            else:
                es, en = huber_psi(rs, self.c), huber_psi(rn, self.c)
                beta = huber_chi_const(self.c)
                chi_s, chi_n = es * es - beta, en * en - beta
            g = np.zeros((n_s + n_n, d))
            g[:n_s, 0] = es / scale
            g[:n_s, 1] = es / scale
            g[n_s:, 1] = en / scale
            if self.estimates_scale:
                g[:n_s, 2] = chi_s / scale
                g[n_s:, 2] = chi_n / scale
            return g
        # regression
        r0, _ = self._residuals(data, theta)
        r = r0 / scale
        x_int = np.column_stack([data.p, np.ones_like(data.p), data.y_bl])
        if self.kind == "ml_score":
            e, chi = r, r * r - 1.0
        else:
            e = huber_psi(r, self.c)
            chi = e * e - huber_chi_const(self.c)
        cols = [x_int * (e / scale)[:, None]]
        if self.estimates_scale:
            cols.append((chi / scale)[:, None])
        return np.hstack(cols)

    def g_single(self, y, theta) -> np.ndarray:
        """Estimating function at one observation.

        For the two-sample family ``y`` is (value, group) with group "S" or
        "N"; for regression it is (y_fu, y_bl, p).
        """
        if self.family == "one_sample":
            return self.g_obs(np.array([y], dtype=float), theta)[0]
        if self.family == "two_sample":
            value, group = y
            empty = np.empty(0)
            if str(group).upper() == "S":
                data = TwoSampleData(y_s=np.array([value], dtype=float), y_n=empty)
            else:
                data = TwoSampleData(y_s=empty, y_n=np.array([value], dtype=float))
            return self.g_obs(data, theta)[0]
        y_fu, y_bl, p = y
        data = RegressionData(y_fu=np.array([y_fu], dtype=float),
                              y_bl=np.array([y_bl], dtype=float),
                              p=np.array([p], dtype=float))
        return self.g_obs(data, theta)[0]

    def g_total(self, data, theta, weights=None) -> np.ndarray:
        g = self.g_obs(data, theta)
        if weights is None:
            return g.sum(axis=0)
        w = _flat_weights(weights)
        return (g.shape[0] * w) @ g

    def objective(self, data, theta, scale_override: float | None = None,
                  weights=None) -> float:
        """Total objective whose gradient (in the location block) is g.

        Oriented for maximization.  Huber and tsallis expressions treat the
        scale as fixed; ``scale_override`` substitutes a different sigma.
        """
        if not self.has_objective:
            raise SolverError("ratio-type pivot unavailable: median_sign has no objective")
        loc, scale = self._loc_scale(theta)
        if scale_override is not None:
            scale = float(scale_override)
        if self.family == "two_sample":
            rs, rn = self._residuals(data, theta)
            r = np.concatenate([rs, rn])
        else:
            r, _ = self._residuals(data, theta)
        if self.kind == "ml_score":
            per = stats.norm.logpdf(r, scale=scale)
        elif self.kind in ("huber_location", "huber_regression"):
            per = -huber_rho(r / scale, self.c)
        else:  # tsallis
            y = np.asarray(data, dtype=float)
            f = stats.norm.pdf(y, loc=loc[0], scale=scale)
            per = -((self.gamma - 1.0) * tsallis_power_integral(self.gamma, scale)
                    - self.gamma * f ** (self.gamma - 1.0))
        if weights is None:
            return float(np.sum(per))
        return float(per.size * (_flat_weights(weights) @ per))

    def mean_dg(self, data, theta) -> np.ndarray:
        """Average derivative matrix (1/n) sum_i dg(y_i; theta)/dtheta'."""
        if self.kind == "tsallis":
            return _fd_mean_dg(self, data, theta)
        if self.kind == "median_sign":
            raise SolverError("median_sign has no pointwise derivative; use godambe")
        loc, scale = self._loc_scale(theta)
        d = self.dim()
        out = np.zeros((d, d))
        if self.family == "one_sample":
            r = (np.asarray(data, dtype=float) - loc[0]) / scale
            blocks = _location_scale_dg(self, r, scale)
            return blocks
        if self.family == "two_sample":
            rs0, rn0 = self._residuals(data, theta)
            rs, rn = rs0 / scale, rn0 / scale
            n = rs.size + rn.size
            bs = _location_scale_dg(self, rs, scale) * (rs.size / n)
            bn = _location_scale_dg(self, rn, scale) * (rn.size / n)
            # Map per-group (loc, scale) blocks into (psi, mu_n, sigma).
            out[0, 0] = bs[0, 0]
            out[0, 1] = bs[0, 0]
            out[1, 0] = bs[0, 0]
            out[1, 1] = bs[0, 0] + bn[0, 0]
            if self.estimates_scale:
                out[0, 2] = bs[0, 1]
                out[2, 0] = bs[1, 0]
                out[1, 2] = bs[0, 1] + bn[0, 1]
                out[2, 1] = bs[1, 0] + bn[1, 0]
                out[2, 2] = bs[1, 1] + bn[1, 1]
            return out
        # regression
        r0, _ = self._residuals(data, theta)
        r = r0 / scale
        x_int = np.column_stack([data.p, np.ones_like(data.p), data.y_bl])
        n = r.size
        if self.kind == "ml_score":
            e_prime = np.ones_like(r)
            e = r
        else:
            e_prime = huber_psi_prime(r, self.c)
            e = huber_psi(r, self.c)
        xtx = (x_int * e_prime[:, None]).T @ x_int / n
        out[:3, :3] = -xtx / scale**2
        if self.estimates_scale:
            d_loc_sigma = -(x_int * ((e_prime * r + e) / scale**2)[:, None]).mean(axis=0)
            out[:3, 3] = d_loc_sigma
            out[3, :3] = -(x_int * (2.0 * e * e_prime / scale**2)[:, None]).mean(axis=0)
            chi = e * e - (1.0 if self.kind == "ml_score" else huber_chi_const(self.c))
            out[3, 3] = float(np.mean(-(2.0 * e * e_prime * r + chi) / scale**2))
        return out


def _location_scale_dg(ef: EstimatingFunction, r, scale) -> np.ndarray:
    """Mean dg/dtheta' for a single location group (loc first, scale second)."""
    if ef.kind == "ml_score":
        e, e_prime = r, np.ones_like(r)
        const = 1.0
    else:
        e, e_prime = huber_psi(r, ef.c), huber_psi_prime(r, ef.c)
        const = huber_chi_const(ef.c)
    d = 2 if ef.estimates_scale else 1
    out = np.zeros((d, d))
    out[0, 0] = float(np.mean(-e_prime / scale**2))
    if ef.estimates_scale:
        out[0, 1] = float(np.mean(-(e_prime * r + e) / scale**2))
        out[1, 0] = float(np.mean(-2.0 * e * e_prime / scale**2))
        out[1, 1] = float(np.mean(-(2.0 * e * e_prime * r + (e * e - const)) / scale**2))
    return out


def _fd_mean_dg(ef: EstimatingFunction, data, theta, rel: float = 1e-5) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    d = theta.size
    out = np.zeros((d, d))
    for j in range(d):
        h = rel * (1.0 + abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        gp = ef.g_obs(data, tp).mean(axis=0)
        gm = ef.g_obs(data, tm).mean(axis=0)
        out[:, j] = (gp - gm) / (2.0 * h)
    return out


def _flat_weights(weights) -> np.ndarray:
    if isinstance(weights, tuple):
        w = np.concatenate([np.asarray(x, dtype=float) for x in weights])
    else:
        w = np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        raise SolverError("weights must have positive total mass")
    return w / total


# -- solvers --------------------------------------------------------------

def _weighted_median(y, w) -> float:
    order = np.argsort(y)
    ys, ws = y[order], w[order]
    cum = np.cumsum(ws)
    half = 0.5 * cum[-1]
    idx = int(np.searchsorted(cum, half, side="left"))
    if math.isclose(cum[idx], half, rel_tol=0.0, abs_tol=1e-12 * cum[-1]) and idx + 1 < ys.size:
        return 0.5 * (ys[idx] + ys[idx + 1])
    return float(ys[idx])


def _check_spread(y, what="data"):
    y = np.asarray(y, dtype=float)
    if y.size and float(np.max(y) - np.min(y)) == 0.0:
        raise SolverError(f"{what} has zero spread; scale is not identifiable")


def _mad_scale(r) -> float:
    s = 1.4826 * float(np.median(np.abs(r - np.median(r))))
    return s if s > 0 else float(np.std(r)) or 1.0


def _huber_loc_scale(y, c, weights=None, known_scale=None, mu0=None, sigma0=None):
    """Weighted Huber location (and Proposal-2 scale) for one location group."""
    y = np.asarray(y, dtype=float)
    w = np.full(y.size, 1.0 / y.size) if weights is None else _flat_weights(weights)
    estimate_scale = known_scale is None
    if estimate_scale:
        _check_spread(y)
    mu = _weighted_median(y, w) if mu0 is None else float(mu0)
    sigma = float(known_scale) if not estimate_scale else (
        float(sigma0) if sigma0 is not None else _mad_scale(y))
    beta = huber_chi_const(c)
    for _ in range(MAX_ITER):
        r = (y - mu) / sigma
        wl = w * huber_weight(r, c)
        mu_new = float(wl @ y) / float(wl.sum())
        if estimate_scale:
            sigma_new = sigma * math.sqrt(max(float(w @ huber_psi(r, c) ** 2) / beta, 1e-300))
        else:
            sigma_new = sigma
        mu, sigma = mu_new, max(sigma_new, 1e-12)
        r = (y - mu) / sigma
        res = abs(float(w @ huber_psi(r, c)))
        if estimate_scale:
            res = max(res, abs(float(w @ (huber_psi(r, c) ** 2 - beta))))
        if res <= TOL:
            return mu, sigma
    raise SolverError("Huber location solve did not converge",
                      last_theta=(mu, sigma), residual=res)


def _huber_lm(x, y, c, weights=None, known_scale=None):
    """Weighted Huber regression with Proposal-2 scale."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.size
    w = np.full(n, 1.0 / n) if weights is None else _flat_weights(weights)
    sw = np.sqrt(w)
    beta_hat, *_ = np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)
    r0 = y - x @ beta_hat
    estimate_scale = known_scale is None
    sigma = float(known_scale) if not estimate_scale else _mad_scale(r0)
    if estimate_scale:
        _check_spread(r0, what="residuals")
    beta_const = huber_chi_const(c)
    for _ in range(MAX_ITER):
        r = (y - x @ beta_hat) / sigma
        wl = w * huber_weight(r, c)
        xtw = x * wl[:, None]
        try:
            beta_new = np.linalg.solve(xtw.T @ x, xtw.T @ y)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular weighted design: {exc}") from exc
        if estimate_scale:
            sigma_new = sigma * math.sqrt(max(float(w @ huber_psi(r, c) ** 2) / beta_const, 1e-300))
        else:
            sigma_new = sigma
        beta_hat, sigma = beta_new, max(sigma_new, 1e-12)
        r = (y - x @ beta_hat) / sigma
        res = float(np.max(np.abs((x * (w * huber_psi(r, c))[:, None]).sum(axis=0))))
        if estimate_scale:
            res = max(res, abs(float(w @ (huber_psi(r, c) ** 2 - beta_const))))
        if res <= TOL:
            return beta_hat, sigma
    raise SolverError("Huber regression solve did not converge",
                      last_theta=np.append(beta_hat, sigma), residual=res)


def _ml_loc_scale(y, weights=None, known_scale=None):
    y = np.asarray(y, dtype=float)
    w = np.full(y.size, 1.0 / y.size) if weights is None else _flat_weights(weights)
    mu = float(w @ y)
    if known_scale is not None:
        return mu, float(known_scale)
    _check_spread(y)
    var = float(w @ (y - mu) ** 2)
    return mu, math.sqrt(var)


def _validate_size(ef: EstimatingFunction, data):
    if ef.family == "one_sample":
        n = np.asarray(data).size
    elif ef.family == "two_sample":
        n = data.n_total
        if data.y_s.size < 1 or data.y_n.size < 1:
            raise SolverError("two-sample data needs observations in both groups")
    else:
        n = data.n
    if n < ef.dim() + 1:
        raise SolverError(f"need at least dim(theta)+1 = {ef.dim() + 1} observations, got {n}")


def solve(ef: EstimatingFunction, data, weights=None) -> ParameterPoint:
    """Solve sum_i g(y_i; theta) = 0 for the full parameter.

    ``weights`` reweights observations (used for contamination analysis);
    for the two-sample family pass a (w_s, w_n) tuple.
    """
    _validate_size(ef, data)
    if ef.family == "one_sample":
        y = np.asarray(data, dtype=float)
        w = None if weights is None else _flat_weights(weights)
        if ef.kind == "ml_score":
            mu, sigma = _ml_loc_scale(y, weights=w, known_scale=ef.known_scale)
            lam = () if ef.known_scale is not None else (sigma,)
            return ParameterPoint(psi=mu, lam=lam)
        if ef.kind == "median_sign":
            if w is None:
                return ParameterPoint(psi=float(np.median(y)))
            return ParameterPoint(psi=_weighted_median(y, w))
        if ef.kind == "huber_location":
            mu, sigma = _huber_loc_scale(y, ef.c, weights=w, known_scale=ef.known_scale)
            lam = () if ef.known_scale is not None else (sigma,)
            return ParameterPoint(psi=mu, lam=lam)
        return _solve_tsallis(ef, y, w)
    if ef.family == "two_sample":
        return _solve_two_sample(ef, data, weights)
    return _solve_regression(ef, data, weights)


def _solve_tsallis(ef: EstimatingFunction, y, w):
    from scipy import optimize

    start_mu, start_sigma = _huber_loc_scale(y, HUBER_C_DEFAULT, weights=w,
                                             known_scale=ef.known_scale)
    if ef.known_scale is not None:
        theta0 = np.array([start_mu])
    else:
        theta0 = np.array([start_mu, start_sigma])

    def total(theta):
        if ef.known_scale is None and theta[-1] <= 0:
            return np.full_like(theta, 1e6)
        return ef.g_total(y, theta, weights=None if w is None else w)

    sol = optimize.root(total, theta0, method="hybr", tol=1e-12)
    n = y.size
    resid = float(np.max(np.abs(total(sol.x))))
    if not sol.success or resid > TOL * n:
        raise SolverError("tsallis score solve did not converge",
                          last_theta=sol.x, residual=resid / n)
    return ParameterPoint.from_theta(sol.x)


def _solve_two_sample(ef: EstimatingFunction, data: TwoSampleData, weights):
    y_s, y_n = data.y_s, data.y_n
    if weights is None:
        w_s = w_n = None
    else:
        w_s, w_n = weights
    if ef.kind == "median_sign":
        med_s = float(np.median(y_s)) if w_s is None else _weighted_median(y_s, np.asarray(w_s, float))
        med_n = float(np.median(y_n)) if w_n is None else _weighted_median(y_n, np.asarray(w_n, float))
        return ParameterPoint(psi=med_s - med_n, lam=(med_n,))
    if ef.kind == "ml_score":
        ws = np.ones(y_s.size) if w_s is None else np.asarray(w_s, float)
        wn = np.ones(y_n.size) if w_n is None else np.asarray(w_n, float)
        mu_s = float(ws @ y_s) / float(ws.sum())
        mu_n = float(wn @ y_n) / float(wn.sum())
        if ef.known_scale is not None:
            return ParameterPoint(psi=mu_s - mu_n, lam=(mu_n,))
        _check_spread(np.concatenate([y_s - mu_s, y_n - mu_n]), what="pooled residuals")
        sse = float(ws @ (y_s - mu_s) ** 2) + float(wn @ (y_n - mu_n) ** 2)
        sigma = math.sqrt(sse / (float(ws.sum()) + float(wn.sum())))
        return ParameterPoint(psi=mu_s - mu_n, lam=(mu_n, sigma))
    # Huber: per-group locations coupled through the pooled scale.
    ws = np.full(y_s.size, 1.0) if w_s is None else np.asarray(w_s, float)
    wn = np.full(y_n.size, 1.0) if w_n is None else np.asarray(w_n, float)
    total = ws.sum() + wn.sum()
    ws, wn = ws / total, wn / total
    mu_s, mu_n = float(np.median(y_s)), float(np.median(y_n))
    if ef.known_scale is not None:
        sigma = float(ef.known_scale)
    else:
        _check_spread(np.concatenate([y_s - mu_s, y_n - mu_n]), what="pooled residuals")
        sigma = _mad_scale(np.concatenate([y_s - mu_s, y_n - mu_n]))
    beta = huber_chi_const(ef.c)
    c = ef.c
    for _ in range(MAX_ITER):
        rs, rn = (y_s - mu_s) / sigma, (y_n - mu_n) / sigma
        wls, wln = ws * huber_weight(rs, c), wn * huber_weight(rn, c)
        mu_s = float(wls @ y_s) / float(wls.sum())
        mu_n = float(wln @ y_n) / float(wln.sum())
        if ef.known_scale is None:
            chi = float(ws @ huber_psi(rs, c) ** 2 + wn @ huber_psi(rn, c) ** 2)
            sigma = max(sigma * math.sqrt(max(chi / beta, 1e-300)), 1e-12)
        rs, rn = (y_s - mu_s) / sigma, (y_n - mu_n) / sigma
        res = max(abs(float(ws @ huber_psi(rs, c))), abs(float(wn @ huber_psi(rn, c))))
        if ef.known_scale is None:
            res = max(res, abs(float(ws @ (huber_psi(rs, c) ** 2 - beta)
                                     + wn @ (huber_psi(rn, c) ** 2 - beta))))
        if res <= TOL:
            lam = (mu_n,) if ef.known_scale is not None else (mu_n, sigma)
            return ParameterPoint(psi=mu_s - mu_n, lam=lam)
    raise SolverError("two-sample Huber solve did not converge",
                      last_theta=(mu_s - mu_n, mu_n, sigma), residual=res)


def _solve_regression(ef: EstimatingFunction, data: RegressionData, weights):
    x_int = np.column_stack([data.p, np.ones_like(data.p), data.y_bl])
    w = None if weights is None else _flat_weights(weights)
    if ef.kind == "ml_score":
        ww = np.full(data.n, 1.0 / data.n) if w is None else w
        sw = np.sqrt(ww)
        beta_hat, *_ = np.linalg.lstsq(x_int * sw[:, None], data.y_fu * sw, rcond=None)
        if ef.known_scale is not None:
            return ParameterPoint.from_theta(beta_hat)
        r = data.y_fu - x_int @ beta_hat
        _check_spread(r, what="residuals")
        sigma = math.sqrt(float(ww @ r**2))
        return ParameterPoint.from_theta(np.append(beta_hat, sigma))
    beta_hat, sigma = _huber_lm(x_int, data.y_fu, ef.c, weights=w, known_scale=ef.known_scale)
    if ef.known_scale is not None:
        return ParameterPoint.from_theta(beta_hat)
    return ParameterPoint.from_theta(np.append(beta_hat, sigma))


def solve_constrained(ef: EstimatingFunction, data, psi_fixed: float,
                      weights=None) -> ParameterPoint:
    """Solve the nuisance block at fixed interest value psi_fixed."""
    _validate_size(ef, data)
    psi_fixed = float(psi_fixed)
    if ef.family == "one_sample":
        return ParameterPoint(psi=psi_fixed, lam=_one_sample_constrained(ef, data, psi_fixed, weights))
    if ef.family == "two_sample":
        y_s, y_n = data.y_s, data.y_n
        if weights is None:
            w_s = w_n = None
        else:
            w_s, w_n = weights
        if ef.kind == "median_sign":
            med_n = float(np.median(y_n)) if w_n is None else _weighted_median(y_n, np.asarray(w_n, float))
            return ParameterPoint(psi=psi_fixed, lam=(med_n,))
        # The nuisance block pools the shifted S group with the N group.
        z = np.concatenate([y_s - psi_fixed, y_n])
        wz = None if weights is None else np.concatenate(
            [np.asarray(w_s, float), np.asarray(w_n, float)])
        if ef.kind == "ml_score":
            mu_n, sigma = _ml_loc_scale(z, weights=None if wz is None else _flat_weights(wz),
                                        known_scale=ef.known_scale)
        else:
            mu_n, sigma = _huber_loc_scale(z, ef.c,
                                           weights=None if wz is None else _flat_weights(wz),
                                           known_scale=ef.known_scale)
        lam = (mu_n,) if ef.known_scale is not None else (mu_n, sigma)
        return ParameterPoint(psi=psi_fixed, lam=lam)
    # regression: fit the remaining columns against the offset response
    x_rest = np.column_stack([np.ones_like(data.p), data.y_bl])
    y_off = data.y_fu - psi_fixed * data.p
    w = None if weights is None else _flat_weights(weights)
    if ef.kind == "ml_score":
        ww = np.full(data.n, 1.0 / data.n) if w is None else w
        sw = np.sqrt(ww)
        beta_rest, *_ = np.linalg.lstsq(x_rest * sw[:, None], y_off * sw, rcond=None)
        if ef.known_scale is not None:
            return ParameterPoint(psi=psi_fixed, lam=tuple(beta_rest))
        r = y_off - x_rest @ beta_rest
        sigma = math.sqrt(float(ww @ r**2))
        return ParameterPoint(psi=psi_fixed, lam=(*beta_rest, sigma))
    beta_rest, sigma = _huber_lm(x_rest, y_off, ef.c, weights=w, known_scale=ef.known_scale)
    if ef.known_scale is not None:
        return ParameterPoint(psi=psi_fixed, lam=tuple(beta_rest))
    return ParameterPoint(psi=psi_fixed, lam=(*beta_rest, sigma))


def _one_sample_constrained(ef, data, psi_fixed, weights):
    y = np.asarray(data, dtype=float)
    if ef.kind == "median_sign" or ef.known_scale is not None or ef.dim() == 1:
        return ()
    w = np.full(y.size, 1.0 / y.size) if weights is None else _flat_weights(weights)
    r0 = y - psi_fixed
    if ef.kind == "ml_score":
        return (math.sqrt(float(w @ r0**2)),)
    if ef.kind == "huber_location":
        sigma = _mad_scale(r0)
        beta = huber_chi_const(ef.c)
        for _ in range(MAX_ITER):
            r = r0 / sigma
            sigma_new = max(sigma * math.sqrt(max(float(w @ huber_psi(r, ef.c) ** 2) / beta, 1e-300)), 1e-12)
            if abs(sigma_new - sigma) <= 1e-12 * sigma:
                return (sigma_new,)
            sigma = sigma_new
        raise SolverError("constrained scale solve did not converge",
                          last_theta=(psi_fixed, sigma), residual=abs(sigma_new - sigma))
    # tsallis: root-find the scale component at fixed location
    from scipy import optimize

    def eq(log_sigma):
        theta = np.array([psi_fixed, math.exp(log_sigma)])
        return ef.g_total(y, theta, weights=None if weights is None else w)[1]

    s0 = math.log(_mad_scale(r0))
    sol = optimize.root_scalar(eq, x0=s0, x1=s0 + 0.1, method="secant", xtol=1e-12)
    if not sol.converged:
        raise SolverError("constrained tsallis scale solve did not converge")
    return (math.exp(sol.root),)


# -- sandwich variance ----------------------------------------------------

@dataclass(frozen=True)
class GodambeEstimates:
    """Sensitivity, variability, and Godambe information at an estimate.

    ``k_hat`` and ``j_hat`` are per-observation averages; ``v_theta`` is the
    estimated covariance of the full estimator, ``vg_hat`` its inverse (the
    total Godambe information).  ``v_psi_psi`` is the interest-block entry of
    ``v_theta`` and ``k_psi_psi`` the interest-block entry of the inverse
    total sensitivity.
    """

    k_hat: np.ndarray
    j_hat: np.ndarray
    v_theta: np.ndarray
    vg_hat: np.ndarray
    k_psi_psi: float
    v_psi_psi: float
    n: int

    @property
    def se_psi(self) -> float:
        return math.sqrt(self.v_psi_psi)

    @property
    def nu(self) -> float:
        """Scaling of the ratio statistic: nu = V^{psi psi} / K^{psi psi}."""
        return self.v_psi_psi / self.k_psi_psi


def _median_k_hat(ef: EstimatingFunction, data, theta) -> np.ndarray:
    """Sensitivity of sign-based equations via kernel density at the fit."""
    def dens(y, at):
        kde = stats.gaussian_kde(y, bw_method="silverman")
        return float(kde(np.array([at]))[0])

    if ef.family == "one_sample":
        y = np.asarray(data, dtype=float)
        return np.array([[2.0 * dens(y, theta[0])]])
    mu_n = theta[1]
    mu_s = theta[0] + mu_n
    n = data.n_total
    p_s, p_n = data.y_s.size / n, data.y_n.size / n
    f_s, f_n = dens(data.y_s, mu_s), dens(data.y_n, mu_n)
    return np.array([[2.0 * f_s * p_s, 2.0 * f_s * p_s],
                     [0.0, 2.0 * f_n * p_n]])


def godambe(ef: EstimatingFunction, data, theta) -> GodambeEstimates:
    """Estimate K, J, the sandwich covariance, and the Godambe information.

    K is estimated analytically where the kind admits it, by central finite
    differences for the tsallis score, and through a kernel density estimate
    for sign-based equations.
    """
    if isinstance(theta, ParameterPoint):
        theta = theta.theta
    theta = np.asarray(theta, dtype=float)
    g = ef.g_obs(data, theta)
    n = g.shape[0]
    j_hat = g.T @ g / n
    if ef.kind == "median_sign":
        k_hat = _median_k_hat(ef, data, theta)
    else:
        k_hat = -ef.mean_dg(data, theta)
    if not np.all(np.isfinite(k_hat)) or np.linalg.cond(k_hat) > 1e12:
        raise SolverError("sensitivity matrix singular")
    k_inv = np.linalg.inv(k_hat)
    v_theta = k_inv @ j_hat @ k_inv.T / n
    vg_hat = np.linalg.inv(v_theta)
    k_tot_inv = k_inv / n
    return GodambeEstimates(
        k_hat=k_hat,
        j_hat=j_hat,
        v_theta=v_theta,
        vg_hat=vg_hat,
        k_psi_psi=float(k_tot_inv[0, 0]),
        v_psi_psi=float(v_theta[0, 0]),
        n=n,
    )


def influence_function(ef: EstimatingFunction, data, theta, y) -> np.ndarray:
    """IF(y; theta) = K^{-1} g(y; theta), the first-order effect on the fit
    of an infinitesimal contamination at y."""
    if isinstance(theta, ParameterPoint):
        theta = theta.theta
    gd = godambe(ef, data, theta)
    g_y = ef.g_single(y, np.asarray(theta, dtype=float))
    return np.linalg.solve(gd.k_hat, np.atleast_1d(g_y))


# -- batched kernels (internal) -------------------------------------------

def _huber_location_rows(y_rows, c, sigma=None, max_iter=60):
    """Row-wise Huber location fits by blockwise Newton steps.

    ``sigma`` fixes the scale (scalar or per-row array); None estimates it
    per row by the consistency-corrected second-moment equation.  Returns
    (mu, sigma, ok).
    """
    y = np.asarray(y_rows, dtype=float)
    n_rows, n = y.shape
    mu = np.median(y, axis=1)
    estimate_scale = sigma is None
    if estimate_scale:
        mad = 1.4826 * np.median(np.abs(y - mu[:, None]), axis=1)
        sig = np.where(mad > 0, mad, np.std(y, axis=1))
        sig = np.where(sig > 0, sig, 1.0)
    else:
        sig = np.broadcast_to(np.asarray(sigma, dtype=float), (n_rows,)).astype(float).copy()
    beta = huber_chi_const(c)
    res = np.full(n_rows, np.inf)
    for _ in range(max_iter):
        r = (y - mu[:, None]) / sig[:, None]
        psi = np.clip(r, -c, c)
        inside = np.abs(r) <= c
        f_mu = psi.mean(axis=1)
        d_mu = np.maximum(inside.mean(axis=1), 1.0 / n)
        mu = mu + sig * np.clip(f_mu / d_mu, -2.0, 2.0)
        if estimate_scale:
            chi = np.mean(psi * psi, axis=1) - beta
            d_chi = 2.0 * np.mean(r * r * inside, axis=1)
            sig = sig * np.exp(np.clip(chi / np.maximum(d_chi, 1e-8), -0.5, 0.5))
        res = np.abs(f_mu)
        if estimate_scale:
            res = np.maximum(res, np.abs(chi))
        if np.max(res) <= TOL:
            break
    ok = res <= 1e-6
    return mu, sig, ok


def _two_sample_huber_rows(ys_rows, yn_rows, c, max_iter=60):
    """Row-wise two-sample Huber fits with pooled scale: (psi, mu_n, sigma, ok)."""
    ys = np.asarray(ys_rows, dtype=float)
    yn = np.asarray(yn_rows, dtype=float)
    n_rows = ys.shape[0]
    n_s, n_n = ys.shape[1], yn.shape[1]
    mu_s = np.median(ys, axis=1)
    mu_n = np.median(yn, axis=1)
    resid = np.hstack([ys - mu_s[:, None], yn - mu_n[:, None]])
    mad = 1.4826 * np.median(np.abs(resid - np.median(resid, axis=1)[:, None]), axis=1)
    sig = np.where(mad > 0, mad, np.std(resid, axis=1))
    sig = np.where(sig > 0, sig, 1.0)
    beta = huber_chi_const(c)
    frac_s = n_s / (n_s + n_n)
    res = np.full(n_rows, np.inf)
    for _ in range(max_iter):
        rs = (ys - mu_s[:, None]) / sig[:, None]
        rn = (yn - mu_n[:, None]) / sig[:, None]
        psi_s = np.clip(rs, -c, c)
        psi_n = np.clip(rn, -c, c)
        in_s = np.abs(rs) <= c
        in_n = np.abs(rn) <= c
        f_s = psi_s.mean(axis=1)
        f_n = psi_n.mean(axis=1)
        mu_s = mu_s + sig * np.clip(f_s / np.maximum(in_s.mean(axis=1), 1.0 / n_s), -2.0, 2.0)
        mu_n = mu_n + sig * np.clip(f_n / np.maximum(in_n.mean(axis=1), 1.0 / n_n), -2.0, 2.0)
        chi = (frac_s * np.mean(psi_s * psi_s, axis=1)
               + (1 - frac_s) * np.mean(psi_n * psi_n, axis=1) - beta)
        d_chi = 2.0 * (frac_s * np.mean(rs * rs * in_s, axis=1)
                       + (1 - frac_s) * np.mean(rn * rn * in_n, axis=1))
        sig = sig * np.exp(np.clip(chi / np.maximum(d_chi, 1e-8), -0.5, 0.5))
        res = np.maximum(np.abs(f_s), np.abs(f_n))
        res = np.maximum(res, np.abs(chi))
        if np.max(res) <= TOL:
            break
    ok = res <= 1e-6
    return mu_s - mu_n, mu_n, sig, ok


def _huber_regression_rows(x, y_rows, c, max_iter=100):
    """Row-wise Huber regression against a shared design: (beta, sigma, ok)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y_rows, dtype=float)
    n_rows, n = y.shape
    p = x.shape[1]
    beta_hat = np.linalg.lstsq(x, y.T, rcond=None)[0].T
    resid = y - beta_hat @ x.T
    mad = 1.4826 * np.median(np.abs(resid - np.median(resid, axis=1)[:, None]), axis=1)
    sig = np.where(mad > 0, mad, np.std(resid, axis=1))
    sig = np.where(sig > 0, sig, 1.0)
    beta_const = huber_chi_const(c)
    eye = np.eye(p)
    usable = np.ones(n_rows, dtype=bool)
    res = np.full(n_rows, np.inf)
    for _ in range(max_iter):
        r = (y - beta_hat @ x.T) / sig[:, None]
        w = huber_weight(r, c)
        xtwx = np.einsum("rn,np,nq->rpq", w, x, x)
        xtwy = np.einsum("rn,np,rn->rp", w, x, y)
        # rows whose weighted design degenerates are dropped, not raised
        dets = np.linalg.det(xtwx)
        bad = ~np.isfinite(dets) | (np.abs(dets) < 1e-300)
        if np.any(bad):
            usable &= ~bad
            xtwx[bad] = eye
            xtwy[bad] = 0.0
        beta_hat = np.linalg.solve(xtwx, xtwy[:, :, None])[:, :, 0]
        chi = np.mean(huber_psi(r, c) ** 2, axis=1)
        sig = np.maximum(sig * np.sqrt(np.maximum(chi / beta_const, 1e-300)), 1e-12)
        r = (y - beta_hat @ x.T) / sig[:, None]
        res = np.max(np.abs(np.einsum("rn,np->rp", huber_psi(r, c), x)) / n, axis=1) / sig
        res = np.maximum(res, np.abs(np.mean(huber_psi(r, c) ** 2, axis=1) - beta_const) / sig)
        if np.max(res[usable], initial=0.0) <= TOL:
            break
    ok = usable & np.isfinite(res) & (res <= 1e-6) & np.all(np.isfinite(beta_hat), axis=1)
    return beta_hat, sig, ok
