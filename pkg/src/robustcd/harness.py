"""Monte Carlo study engine: coverage, stability, and evidence tables.

Eleven CD methods are compared on the two-arm trial model across sample
sizes and contamination levels.  Replicates are the unit of parallelism;
each derives its streams from (master seed, scenario id, replicate index),
so results are identical under any worker schedule.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bootcd import BootstrapConfig, bootstrap_estimates
from .cd import CDError, ConfidenceDistribution, normal_cd, order_statistic
from .mest import EstimatingFunction, SolverError, godambe, solve, huber_psi
from .models import (
    ContaminationRecipe,
    DatasetSpec,
    RegressionData,
    TwoSampleData,
    TwoSampleModel,
    sample,
)
from .pivots import PivotError, cd_from_pivot, classical_t_cd
from .rng import derive_rng
from .simcd import _sig_from_summaries
from .cd import ConfidenceCurve

__all__ = [
    "ALL_METHODS",
    "REGRESSION_METHODS",
    "Scenario",
    "StudySpec",
    "MethodStats",
    "StudyReport",
    "run_study",
    "evidence_table",
    "build_method_cds",
    "build_regression_cds",
    "superiority_analysis",
]

ALL_METHODS = (
    "Wald/Mean",
    "Wald/M-test",
    "ABC/Median",
    "ABC/M-EE",
    "ABC/M-est",
    "CDensity/Median",
    "CDensity/M-EE",
    "CDensity/M-est",
    "Boot/Basic",
    "Boot/Norm",
    "Boot/Perc",
)

REGRESSION_METHODS = (
    "Wald/Mean",
    "Wald/M-test",
    "ABC/M-est",
    "ABC/M-EE",
    "CDensity/M-est",
    "CDensity/M-EE",
)

_SIM_METHODS = {
    "ABC/Median": ("abc", "median"),
    "ABC/M-EE": ("abc", "mee"),
    "ABC/M-est": ("abc", "mest"),
    "CDensity/Median": ("sig", "median"),
    "CDensity/M-EE": ("sig", "mee"),
    "CDensity/M-est": ("sig", "mest"),
}

_BOOT_METHODS = {"Boot/Basic": "basic", "Boot/Norm": "normal", "Boot/Perc": "percentile"}


@dataclass(frozen=True)
class Scenario:
    n_total: int
    contamination: float

    def __post_init__(self):
        if self.n_total % 2 or self.n_total < 4:
            raise ValueError("n_total must be an even count of at least 4")

    @property
    def n_per_group(self) -> int:
        return self.n_total // 2

    @property
    def label(self) -> str:
        return f"n={self.n_total},cont={self.contamination:g}"


@dataclass(frozen=True)
class StudySpec:
    seed: int = 170
    scenarios: tuple[Scenario, ...] = (
        Scenario(40, 0.0),
        Scenario(40, 0.10),
        Scenario(80, 0.0),
        Scenario(80, 0.10),
    )
    methods: tuple[str, ...] = ALL_METHODS
    replicates: int = 2000
    proposals: int = 4000
    psi0: float = 2.6
    delta: float = 4.0
    mu_n: float = 120.0
    sigma: float = 4.0
    alpha: float = 0.05
    epsilon: float = 0.1
    huber_c: float = 1.345
    boot_b: int = 1000
    psi_range: tuple[float, float] = (-3.0, 9.0)
    mu_range: tuple[float, float] = (110.0, 130.0)
    sigma_range: tuple[float, float] = (1.0, 8.0)
    workers: int = 1

    def __post_init__(self):
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")


@dataclass
class MethodStats:
    """Aggregated per-method, per-scenario results."""

    n_ok: int = 0
    n_fail: int = 0
    cover95: float = math.nan
    cover90: float = math.nan
    abs_bias: float = math.nan
    po: float = math.nan
    pu: float = math.nan
    type1: float = math.nan
    noninf_reject: float = math.nan
    evidence: float = math.nan


@dataclass
class StudyReport:
    spec: StudySpec
    stats: dict = field(default_factory=dict)  # (scenario.label, method) -> MethodStats

    def get(self, scenario: Scenario, method: str) -> MethodStats:
        return self.stats[(scenario.label, method)]

    def coverage_csv_lines(self) -> list[str]:
        lines = ["scenario,method,cover95,cover90,n_ok,n_fail"]
        for scen in self.spec.scenarios:
            for m in self.spec.methods:
                s = self.stats[(scen.label, m)]
                lines.append(f"{scen.label},{m},{s.cover95!r},{s.cover90!r},{s.n_ok},{s.n_fail}")
        return lines

    def stability_csv_lines(self) -> list[str]:
        lines = ["scenario,method,abs_bias,po,pu,type1,noninf_reject,evidence,n_ok,n_fail"]
        for scen in self.spec.scenarios:
            for m in self.spec.methods:
                s = self.stats[(scen.label, m)]
                lines.append(
                    f"{scen.label},{m},{s.abs_bias!r},{s.po!r},{s.pu!r},"
                    f"{s.type1!r},{s.noninf_reject!r},{s.evidence!r},{s.n_ok},{s.n_fail}")
        return lines

    def text_tables(self) -> str:
        """Aligned coverage and stability tables, one block per sample size."""
        out = []
        sizes = sorted({s.n_total for s in self.spec.scenarios})
        for n in sizes:
            scens = [s for s in self.spec.scenarios if s.n_total == n]
            header = f"Empirical coverages, n={n}"
            cols = "".join(f"  {s.contamination:>5.0%} 95/90 CI" for s in scens)
            out.append(header)
            out.append(f"{'method':<18}{cols}")
            for m in self.spec.methods:
                row = f"{m:<18}"
                for s in scens:
                    st = self.stats[(s.label, m)]
                    row += f"  {100 * st.cover95:>6.1f}/{100 * st.cover90:<6.1f}"
                out.append(row)
            out.append("")
            out.append(f"Stability of confidence medians, n={n}  (|b|, PO, PU, type-I)")
            for m in self.spec.methods:
                row = f"{m:<18}"
                for s in scens:
                    st = self.stats[(s.label, m)]
                    row += (f"  {st.abs_bias:>6.2f} {st.po:>4.2f} {st.pu:>4.2f} "
                            f"{st.type1:>4.2f}")
                out.append(row)
            out.append("")
        return "\n".join(out)


# -- per-replicate work -------------------------------------------------------

def _metrics_from_cd(cd: ConfidenceDistribution, spec: StudySpec) -> dict:
    lo95, hi95 = cd.interval(0.95)
    lo90, hi90 = cd.interval(0.90)
    median = cd.median()
    return {
        "median": median,
        "cover95": lo95 <= spec.psi0 <= hi95,
        "cover90": lo90 <= spec.psi0 <= hi90,
        "type1": not (lo95 <= spec.psi0 <= hi95),
        "noninf_reject": cd.evaluate(spec.delta) >= 1.0 - spec.alpha,
        "evidence": cd.evidence(spec.delta, math.inf),
    }


def _sim_summaries(spec: StudySpec, data: TwoSampleData, psis, mus, sigmas, ys, yn,
                   huber_fit) -> dict:
    """Shared summary statistics for all simulation methods on one replicate."""
    from .mest import _two_sample_huber_rows

    out = {}
    out["median"] = (np.median(ys, axis=1) - np.median(yn, axis=1),
                     np.ones(psis.size, dtype=bool),
                     float(np.median(data.y_s) - np.median(data.y_n)))
    psi_tilde, mu_tilde, sigma_tilde = huber_fit
    rs = (ys - mus[:, None] - psi_tilde) / sigmas[:, None]
    t_mee = (huber_psi(rs, spec.huber_c) / sigmas[:, None]).sum(axis=1)
    r_obs = (data.y_s - mu_tilde - psi_tilde) / sigma_tilde
    t_mee_obs = float((huber_psi(r_obs, spec.huber_c) / sigma_tilde).sum())
    out["mee"] = (t_mee, np.ones(psis.size, dtype=bool), t_mee_obs)
    t_mest, _, _, ok = _two_sample_huber_rows(ys, yn, spec.huber_c)
    out["mest"] = (t_mest, ok, psi_tilde)
    return out


def _replicate_metrics(spec: StudySpec, scenario: Scenario, rep: int) -> dict:
    """Build every requested CD on one replicate and score it."""
    seed_path = ("scenario", scenario.n_total, int(round(1000 * scenario.contamination)), rep)
    data_seed = derive_rng(spec.seed, *seed_path, "seed").integers(0, 2**63 - 1)
    model = TwoSampleModel(mu_n=spec.mu_n, psi=spec.psi0, sigma=spec.sigma,
                           n_per_group=scenario.n_per_group)
    recipe = (ContaminationRecipe(fraction=scenario.contamination)
              if scenario.contamination > 0 else None)
    data = sample(DatasetSpec(model=model, seed=int(data_seed), contamination=recipe))

    results: dict[str, dict | None] = {}
    needs_sim = [m for m in spec.methods if m in _SIM_METHODS]
    needs_boot = [m for m in spec.methods if m in _BOOT_METHODS]

    huber_ef = EstimatingFunction(kind="huber_location", family="two_sample", c=spec.huber_c)
    huber_fit = None
    try:
        point = solve(huber_ef, data)
        huber_fit = (point.psi, point.lam[0], point.lam[1])
    except SolverError:
        pass

    for method in spec.methods:
        if method in _SIM_METHODS or method in _BOOT_METHODS:
            continue
        try:
            if method == "Wald/Mean":
                cd = classical_t_cd(data)
            elif method == "Wald/M-test":
                if huber_fit is None:
                    raise SolverError("huber fit failed")
                gd = godambe(huber_ef, data, np.array(huber_fit))
                cd = normal_cd(huber_fit[0], gd.se_psi)
            else:  # pragma: no cover - guarded by StudySpec validation
                raise ValueError(method)
            results[method] = _metrics_from_cd(cd, spec)
        except (SolverError, CDError, PivotError):
            results[method] = None

    if needs_sim:
        rng = derive_rng(spec.seed, *seed_path, "proposals")
        r = spec.proposals
        psis = rng.uniform(*spec.psi_range, r)
        mus = rng.uniform(*spec.mu_range, r)
        sigmas = rng.uniform(*spec.sigma_range, r)
        n = scenario.n_per_group
        ys = (mus + psis)[:, None] + sigmas[:, None] * rng.standard_normal((r, n))
        yn = mus[:, None] + sigmas[:, None] * rng.standard_normal((r, n))
        if huber_fit is None:
            for method in needs_sim:
                results[method] = None
        else:
            summaries = _sim_summaries(spec, data, psis, mus, sigmas, ys, yn, huber_fit)
            scales = _pilot_scales(spec, scenario, rep, huber_fit, data)
            for method in needs_sim:
                mode, key = _SIM_METHODS[method]
                t_star, ok, t_obs = summaries[key]
                try:
                    if mode == "abc":
                        dist = np.abs(t_star - t_obs) / scales[key]
                        accepted = psis[ok & (dist <= spec.epsilon)]
                        if accepted.size == 0:
                            raise CDError("no acceptances")
                        cd = ConfidenceDistribution.from_sample(accepted)
                    else:
                        cd = _sig_from_summaries(psis, t_star, ok, t_obs, spec.psi_range)
                        if isinstance(cd, ConfidenceCurve):
                            raise CDError("acceptance profile not monotone")
                    results[method] = _metrics_from_cd(cd, spec)
                except (CDError, SolverError):
                    results[method] = None

    if needs_boot:
        boot_seed = derive_rng(spec.seed, *seed_path, "boot").integers(0, 2**63 - 1)
        try:
            cfg = BootstrapConfig(b=spec.boot_b, estimator="ml_score", variant="basic",
                                  seed=int(boot_seed))
            psi_hat, tau_hat, psi_star, tau_star = bootstrap_estimates(cfg, data)
            sorted_star = np.sort(psi_star)
            for method in needs_boot:
                variant = _BOOT_METHODS[method]
                cd = _boot_cd_from_estimates(variant, psi_hat, tau_hat, sorted_star)
                results[method] = _metrics_from_cd(cd, spec)
        except (SolverError, CDError):
            for method in needs_boot:
                results[method] = None
    return results


def _boot_cd_from_estimates(variant: str, psi_hat: float, tau_hat: float,
                            sorted_star: np.ndarray) -> ConfidenceDistribution:
    b = sorted_star.size
    if variant == "percentile":
        return ConfidenceDistribution.from_sample(sorted_star)
    if variant == "normal":
        return normal_cd(psi_hat, float(np.std(sorted_star, ddof=1)))
    lo = 2.0 * psi_hat - sorted_star[-1]
    hi = 2.0 * psi_hat - sorted_star[0]

    def cdf(x):
        t = 2.0 * psi_hat - np.asarray(x, dtype=float)
        return 1.0 - np.searchsorted(sorted_star, t, side="left") / b

    def quantile(a):
        upper = order_statistic(sorted_star, 1.0 - np.asarray(a, dtype=float))
        return 2.0 * psi_hat - upper

    return ConfidenceDistribution.from_cdf(cdf, (lo, hi), quantile_fn=quantile)


def _pilot_scales(spec: StudySpec, scenario: Scenario, rep: int, huber_fit, data) -> dict:
    """Robust scales of each summary from a dedicated pilot run."""
    from .simcd import PILOT_SIZE

    rng = derive_rng(spec.seed, "scenario", scenario.n_total,
                     int(round(1000 * scenario.contamination)), rep, "pilot")
    r = PILOT_SIZE
    psis = rng.uniform(*spec.psi_range, r)
    mus = rng.uniform(*spec.mu_range, r)
    sigmas = rng.uniform(*spec.sigma_range, r)
    n = scenario.n_per_group
    ys = (mus + psis)[:, None] + sigmas[:, None] * rng.standard_normal((r, n))
    yn = mus[:, None] + sigmas[:, None] * rng.standard_normal((r, n))
    summaries = _sim_summaries(spec, data, psis, mus, sigmas, ys, yn, huber_fit)
    scales = {}
    for key, (t_star, ok, _) in summaries.items():
        t_ok = t_star[ok]
        mad = 1.4826 * float(np.median(np.abs(t_ok - np.median(t_ok)))) if t_ok.size else 0.0
        scales[key] = mad if mad > 0 else 1.0
    return scales


def _scenario_chunk(args) -> tuple[str, int, list[dict]]:
    spec, scenario, rep_range = args
    return scenario.label, rep_range[0], [
        _replicate_metrics(spec, scenario, rep) for rep in rep_range
    ]


def run_study(spec: StudySpec) -> StudyReport:
    """Run the full simulation study and aggregate per-method statistics.

    Per-method failures on a replicate are excluded from that method's
    denominators and reported as a failure count.
    """
    all_rows: dict[str, list] = {s.label: [None] * spec.replicates for s in spec.scenarios}
    tasks = []
    chunk = max(1, min(50, spec.replicates // max(1, 4 * spec.workers)))
    for scenario in spec.scenarios:
        for start in range(0, spec.replicates, chunk):
            reps = range(start, min(start + chunk, spec.replicates))
            tasks.append((spec, scenario, reps))
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            for label, start, rows in pool.map(_scenario_chunk, tasks):
                all_rows[label][start : start + len(rows)] = rows
    else:
        for task in tasks:
            label, start, rows = _scenario_chunk(task)
            all_rows[label][start : start + len(rows)] = rows

    report = StudyReport(spec=spec)
    for scenario in spec.scenarios:
        rows = all_rows[scenario.label]
        for method in spec.methods:
            entries = [row[method] for row in rows if row[method] is not None]
            stats = MethodStats(n_ok=len(entries), n_fail=spec.replicates - len(entries))
            if entries:
                medians = np.array([e["median"] for e in entries])
                stats.cover95 = float(np.mean([e["cover95"] for e in entries]))
                stats.cover90 = float(np.mean([e["cover90"] for e in entries]))
                stats.abs_bias = abs(float(np.mean(medians - spec.psi0)))
                stats.po = float(np.mean(medians > spec.psi0))
                stats.pu = float(np.mean(medians < spec.psi0))
                stats.type1 = float(np.mean([e["type1"] for e in entries]))
                stats.noninf_reject = float(np.mean([e["noninf_reject"] for e in entries]))
                stats.evidence = float(np.mean([e["evidence"] for e in entries]))
            report.stats[(scenario.label, method)] = stats
    return report


# -- one-off evidence tables --------------------------------------------------

def evidence_table(data_clean: TwoSampleData, data_contaminated: TwoSampleData,
                   methods=ALL_METHODS, delta: float = 4.0, seed: int = 0,
                   proposals: int = 100_000, epsilon: float = 0.1,
                   boot_b: int = 1000, huber_c: float = 1.345,
                   psi_range=(-3.0, 9.0), mu_range=(110.0, 130.0),
                   sigma_range=(1.0, 8.0)) -> dict:
    """Evidence 1 - C(delta) per method on a clean/contaminated dataset pair."""
    table: dict[str, dict[str, float | None]] = {m: {} for m in methods}
    for label, data in (("clean", data_clean), ("contaminated", data_contaminated)):
        cds = build_method_cds(data, methods, seed=seed, proposals=proposals,
                               epsilon=epsilon, boot_b=boot_b, huber_c=huber_c,
                               psi_range=psi_range, mu_range=mu_range,
                               sigma_range=sigma_range)
        for m in methods:
            cd = cds.get(m)
            table[m][label] = None if cd is None else cd.evidence(delta, math.inf)
    return table


def build_method_cds(data: TwoSampleData, methods, seed: int, proposals: int,
                     epsilon: float, boot_b: int, huber_c: float,
                     psi_range, mu_range, sigma_range) -> dict:
    """One CD per requested method on a single two-sample dataset."""
    from .bootcd import BootstrapConfig, boot_cd
    from .simcd import AbcConfig, ProposalSpec, SummaryStatistic, abc_cd, sig_cd

    cds: dict[str, ConfidenceDistribution | None] = {}
    n = data.y_s.size
    model = TwoSampleModel(mu_n=float(np.mean(data.y_n)), psi=float(np.mean(data.y_s) - np.mean(data.y_n)),
                           sigma=max(float(np.std(np.concatenate([data.y_s, data.y_n]))), 1e-6),
                           n_per_group=n)
    proposal = ProposalSpec(psi_range=tuple(psi_range),
                            nuisance_ranges=(tuple(mu_range), tuple(sigma_range)),
                            r=proposals)
    huber_ef = EstimatingFunction(kind="huber_location", family="two_sample", c=huber_c)
    summary_map = {"Median": SummaryStatistic("median_difference"),
                   "M-EE": SummaryStatistic("profile_estimating_equation"),
                   "M-est": SummaryStatistic("m_estimator")}
    for method in methods:
        try:
            if method == "Wald/Mean":
                cds[method] = classical_t_cd(data)
            elif method == "Wald/M-test":
                cds[method] = cd_from_pivot("wald_robust", huber_ef, data)
            elif method in _BOOT_METHODS:
                cfg = BootstrapConfig(b=boot_b, variant=_BOOT_METHODS[method],
                                      seed=derive_seed(seed, "boot"))
                cds[method] = boot_cd(cfg, data)
            elif method in _SIM_METHODS:
                mode, key = _SIM_METHODS[method]
                label = method.split("/")[1]
                summary = summary_map[label]
                ef = None if key == "median" else huber_ef
                if mode == "abc":
                    cfg = AbcConfig(epsilon=epsilon, seed=derive_seed(seed, "sim"))
                    dens = abc_cd(model, proposal, summary, cfg, data, ef=ef)
                    cds[method] = ConfidenceDistribution.from_sample(dens.sample)
                else:
                    result = sig_cd(model, proposal, summary, data,
                                    seed=derive_seed(seed, "sim"), ef=ef)
                    if isinstance(result, ConfidenceCurve):
                        raise CDError("acceptance profile not monotone")
                    cds[method] = result
            else:
                raise ValueError(f"unknown method {method!r}")
        except (SolverError, CDError, PivotError):
            cds[method] = None
    return cds


def derive_seed(seed: int, *path) -> int:
    return int(derive_rng(seed, *path, "seed").integers(0, 2**63 - 1))


def build_regression_cds(data: RegressionData, methods=REGRESSION_METHODS,
                         seed: int = 0, proposals: int = 100_000, epsilon: float = 0.1,
                         huber_c: float = 1.345, width: float = 6.0,
                         sigma_range: tuple[float, float] | None = None) -> dict:
    """One treatment-coefficient CD per method on a regression dataset.

    Proposal ranges center on the robust fit: each coefficient gets
    plus/minus ``width`` robust standard errors and the scale a positive
    interval around the robust residual scale.
    """
    from .models import RegressionModel
    from .simcd import AbcConfig, ProposalSpec, SummaryStatistic, abc_cd, sig_cd

    unknown = set(methods) - set(REGRESSION_METHODS)
    if unknown:
        raise ValueError(f"methods not available for regression: {sorted(unknown)}")
    rob_ef = EstimatingFunction(kind="huber_regression", family="regression", c=huber_c)
    rob_point = solve(rob_ef, data)
    rob_gd = godambe(rob_ef, data, rob_point)
    sigma_tilde = rob_point.lam[-1]

    def se(gd, i):
        return math.sqrt(gd.v_theta[i, i])

    proposal = ProposalSpec(
        psi_range=(rob_point.psi - width * se(rob_gd, 0), rob_point.psi + width * se(rob_gd, 0)),
        nuisance_ranges=(
            (rob_point.lam[0] - width * se(rob_gd, 1), rob_point.lam[0] + width * se(rob_gd, 1)),
            (rob_point.lam[1] - width * se(rob_gd, 2), rob_point.lam[1] + width * se(rob_gd, 2)),
            tuple(sigma_range) if sigma_range is not None else (sigma_tilde / 3.0, 3.0 * sigma_tilde),
        ),
        r=proposals,
    )
    model = RegressionModel(beta0=rob_point.lam[0], beta1=rob_point.lam[1],
                            beta2=rob_point.psi, sigma=sigma_tilde,
                            y_bl=tuple(data.y_bl), p=tuple(int(v) for v in data.p))
    summary_map = {"M-EE": SummaryStatistic("profile_estimating_equation"),
                   "M-est": SummaryStatistic("m_estimator")}
    cds: dict[str, ConfidenceDistribution | None] = {}
    for method in methods:
        try:
            if method == "Wald/Mean":
                cds[method] = classical_t_cd(data)
            elif method == "Wald/M-test":
                cds[method] = cd_from_pivot("wald_robust", rob_ef, data)
            else:
                mode, _ = _SIM_METHODS[method]
                summary = summary_map[method.split("/")[1]]
                if mode == "abc":
                    cfg = AbcConfig(epsilon=epsilon, seed=derive_seed(seed, "sim", method))
                    dens = abc_cd(model, proposal, summary, cfg, data, ef=rob_ef)
                    cds[method] = ConfidenceDistribution.from_sample(dens.sample)
                else:
                    result = sig_cd(model, proposal, summary, data,
                                    seed=derive_seed(seed, "sim", method), ef=rob_ef)
                    if isinstance(result, ConfidenceCurve):
                        raise CDError("acceptance profile not monotone")
                    cds[method] = result
        except (SolverError, CDError, PivotError):
            cds[method] = None
    return cds


def superiority_analysis(data: RegressionData, margins, methods=REGRESSION_METHODS,
                         seed: int = 0, proposals: int = 100_000, epsilon: float = 0.1,
                         huber_c: float = 1.345, width: float = 6.0,
                         sigma_range: tuple[float, float] | None = None) -> dict:
    """Evidence for "treatment coefficient > margin" per method and margin."""
    ml_ef = EstimatingFunction(kind="ml_score", family="regression")
    rob_ef = EstimatingFunction(kind="huber_regression", family="regression", c=huber_c)
    ml_point = solve(ml_ef, data)
    ml_gd = godambe(ml_ef, data, ml_point)
    rob_point = solve(rob_ef, data)
    rob_gd = godambe(rob_ef, data, rob_point)
    cds = build_regression_cds(data, methods, seed=seed, proposals=proposals,
                               epsilon=epsilon, huber_c=huber_c, width=width,
                               sigma_range=sigma_range)
    table: dict[str, dict[float, float | None]] = {m: {} for m in methods}
    for m in methods:
        for margin in margins:
            cd = cds[m]
            table[m][float(margin)] = None if cd is None else cd.evidence(float(margin), math.inf)
    return {
        "evidence": table,
        "ml_estimate": (ml_point.psi, math.sqrt(ml_gd.v_theta[0, 0])),
        "robust_estimate": (rob_point.psi, math.sqrt(rob_gd.v_theta[0, 0])),
    }
