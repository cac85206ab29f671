"""Command-line surface: batch jobs that emit tables, plot data, and manifests.

Subcommands: ``analyze``, ``simulate``, ``npcd``, ``boot``, ``abc``.  Every
option can come from a config file (ini-style key=value sections, one per
subcommand) via ``--config``; explicit flags override config values.  Each
job writes a ``manifest.cfg`` with the fully resolved configuration, and
rerunning from that manifest reproduces byte-identical outputs.

Exit codes: 2 for input parse errors, 3 for configuration errors, 4 for
numeric failures.
"""

from __future__ import annotations

import argparse
import configparser
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cd import CDError, ConfidenceCurve, ConfidenceDistribution, density_from_cd
from .harness import (
    ALL_METHODS,
    REGRESSION_METHODS,
    Scenario,
    StudySpec,
    build_method_cds,
    build_regression_cds,
    run_study,
)
from .mest import SolverError
from .models import (
    ContaminationRecipe,
    CsvFormatError,
    DatasetSpec,
    OneSampleModel,
    load_one_sample_csv,
    load_regression_csv,
    load_two_sample_csv,
    sample,
)
from .npcd import ReferenceSpec, contamination_shift, semimetric_cd
from .pivots import PivotError, export_plot_data

EXIT_PARSE = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


def _slug(name: str) -> str:
    return name.lower().replace("/", "_").replace("-", "_")


def _default_out() -> str:
    return os.environ.get("ROBUSTCD_OUT", "robustcd_out")


# Option tables: name -> (type tag, default, help).  Types: int, float, str,
# floats (comma list), strs (comma list), flag.
_OPTIONS = {
    "analyze": {
        "input": ("str", "", "input CSV (y,group or y_fu,y_bl,p)"),
        "model": ("str", "two_sample", "two_sample or regression"),
        "methods": ("strs", "auto", "comma-separated method names (default: all for the model)"),
        "margins": ("floats", "4.0", "margins for one-sided evidence"),
        "proposals": ("int", "100000", "proposals for simulation methods"),
        "epsilon": ("float", "0.1", "ABC tolerance"),
        "boot_b": ("int", "1000", "bootstrap replicates"),
        "huber_c": ("float", "1.345", "Huber tuning constant"),
        "seed": ("int", "1", "master seed"),
        "svg": ("flag", "false", "also render SVG panels"),
    },
    "simulate": {
        "scenarios": ("strs", "40:0,40:0.1,80:0,80:0.1", "n:contamination pairs"),
        "methods": ("strs", ",".join(ALL_METHODS), "methods to include"),
        "replicates": ("int", "2000", "Monte Carlo replicates per scenario"),
        "proposals": ("int", "4000", "proposals per replicate"),
        "psi0": ("float", "2.6", "true interest value"),
        "delta": ("float", "4.0", "non-inferiority margin"),
        "mu_n": ("float", "120.0", "new-arm mean"),
        "sigma": ("float", "4.0", "error scale"),
        "epsilon": ("float", "0.1", "ABC tolerance"),
        "boot_b": ("int", "1000", "bootstrap replicates"),
        "huber_c": ("float", "1.345", "Huber tuning constant"),
        "seed": ("int", "170", "master seed"),
        "workers": ("int", "0", "worker processes (0 = all cores)"),
    },
    "npcd": {
        "input": ("str", "", "optional one-sample CSV (otherwise synthetic)"),
        "theta0": ("float", "1.0", "synthetic true location"),
        "n": ("int", "100", "synthetic sample size"),
        "contamination": ("floats", "0.05,0.10,0.15", "extreme-value contamination levels"),
        "sweep_eps": ("float", "0.2", "contamination level for the reference sweep"),
        "theta_ref": ("floats", "3,4,5,6,10,20,40,100", "reference parameters for the sweep"),
        "psi_lo": ("float", "-3.0", "proposal lower bound"),
        "psi_hi": ("float", "3.0", "proposal upper bound"),
        "r": ("int", "20000", "proposals per CD"),
        "kinds": ("strs", "ks,wasserstein1", "discrepancies to run"),
        "sweep": ("flag", "false", "run the reference-parameter sweep"),
        "seed": ("int", "1", "master seed"),
        "svg": ("flag", "false", "also render SVG panels"),
    },
    "boot": {
        "input": ("str", "", "input CSV (y,group or y)"),
        "model": ("str", "two_sample", "two_sample or one_sample"),
        "variant": ("str", "basic", "basic, normal, percentile, or t_boot"),
        "b": ("int", "1000", "bootstrap replicates"),
        "estimator": ("str", "ml_score", "ml_score or huber_location"),
        "seed": ("int", "1", "master seed"),
    },
    "abc": {
        "input": ("str", "", "input CSV (y,group)"),
        "summary": ("str", "m_estimator", "summary statistic kind"),
        "epsilon": ("float", "0.1", "tolerance"),
        "r": ("int", "100000", "proposals"),
        "psi_lo": ("float", "-3.0", "interest proposal lower bound"),
        "psi_hi": ("float", "9.0", "interest proposal upper bound"),
        "mu_lo": ("float", "110.0", "location nuisance lower bound"),
        "mu_hi": ("float", "130.0", "location nuisance upper bound"),
        "sigma_lo": ("float", "1.0", "scale nuisance lower bound"),
        "sigma_hi": ("float", "8.0", "scale nuisance upper bound"),
        "huber_c": ("float", "1.345", "Huber tuning constant"),
        "seed": ("int", "1", "master seed"),
    },
}


def _convert(tag: str, raw: str):
    if tag == "int":
        return int(raw)
    if tag == "float":
        return float(raw)
    if tag == "floats":
        return tuple(float(v) for v in raw.split(",") if v.strip() != "")
    if tag == "strs":
        return tuple(v.strip() for v in raw.split(",") if v.strip() != "")
    if tag == "flag":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return raw


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustcd",
        description="Confidence distributions from robust estimating functions.")
    parser.add_argument("--version", action="version", version=f"robustcd {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, options in _OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="ini config file; flags override")
        p.add_argument("--out", default=None, help="output directory "
                       "(default $ROBUSTCD_OUT or ./robustcd_out)")
        for name, (tag, _default, help_text) in options.items():
            flag = "--" + name.replace("_", "-")
            if tag == "flag":
                p.add_argument(flag, dest=name, action="store_const", const="true",
                               default=None, help=help_text)
            else:
                p.add_argument(flag, dest=name, default=None, help=help_text)
    return parser


def _resolve(cmd: str, args: argparse.Namespace) -> dict:
    """default < config file < explicit flag, with typed conversion."""
    raw = {name: spec[1] for name, spec in _OPTIONS[cmd].items()}
    if args.config:
        cp = configparser.ConfigParser()
        read = cp.read(args.config)
        if not read:
            raise ConfigError(f"config file not found: {args.config}")
        if cp.has_section(cmd):
            for key, value in cp.items(cmd):
                if key not in raw:
                    raise ConfigError(f"unknown config key [{cmd}] {key}")
                raw[key] = value
    for name in raw:
        given = getattr(args, name, None)
        if given is not None:
            raw[name] = given
    try:
        values = {name: _convert(_OPTIONS[cmd][name][0], raw[name]) for name in raw}
    except ValueError as exc:
        raise ConfigError(f"bad option value: {exc}") from exc
    values["_raw"] = raw
    return values


def _write_manifest(cmd: str, values: dict, out: Path) -> None:
    cp = configparser.ConfigParser()
    cp["run"] = {"command": cmd, "version": __version__}
    cp[cmd] = {k: str(v) for k, v in values["_raw"].items()}
    with open(out / "manifest.cfg", "w", encoding="utf-8") as fh:
        cp.write(fh)


def _out_dir(args) -> Path:
    out = Path(args.out) if args.out else Path(_default_out())
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path: Path, header: str, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _render_svg(path: Path, cd: ConfidenceDistribution, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "robustcd"
    lo, hi = cd.support
    xs = np.linspace(lo, hi, 401)
    c = np.atleast_1d(cd.evaluate(xs))
    dens = density_from_cd(cd, 2048)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    axes[0].plot(xs, c)
    axes[0].set_title(f"{title} CD")
    axes[1].plot(xs, np.abs(1 - 2 * c))
    axes[1].set_title("confidence curve")
    axes[2].plot(dens.grid_x, dens.grid_pdf)
    axes[2].set_title("confidence density")
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


# -- subcommands -------------------------------------------------------------

def _cmd_analyze(args) -> int:
    values = _resolve("analyze", args)
    out = _out_dir(args)
    if not values["input"]:
        raise ConfigError("analyze needs --input")
    margins = values["margins"]
    if not values["methods"]:
        raise ConfigError("empty method list; available: " + ", ".join(ALL_METHODS))
    if values["model"] == "two_sample":
        data = load_two_sample_csv(values["input"])
        methods = ALL_METHODS if values["methods"] == ("auto",) else values["methods"]
        unknown = set(methods) - set(ALL_METHODS)
        if unknown:
            raise ConfigError(f"unknown methods: {sorted(unknown)}; "
                              f"available: {', '.join(ALL_METHODS)}")
        cds = build_method_cds(data, methods, seed=values["seed"],
                               proposals=values["proposals"], epsilon=values["epsilon"],
                               boot_b=values["boot_b"], huber_c=values["huber_c"],
                               psi_range=(-3.0, 9.0), mu_range=(110.0, 130.0),
                               sigma_range=(1.0, 8.0))
    elif values["model"] == "regression":
        data = load_regression_csv(values["input"])
        methods = REGRESSION_METHODS if values["methods"] == ("auto",) else values["methods"]
        unknown = set(methods) - set(REGRESSION_METHODS)
        if unknown:
            raise ConfigError(f"methods not available for regression: {sorted(unknown)}")
        cds = build_regression_cds(data, methods, seed=values["seed"],
                                   proposals=values["proposals"], epsilon=values["epsilon"],
                                   huber_c=values["huber_c"])
    else:
        raise ConfigError(f"unknown model {values['model']!r}")
    if not methods:
        raise ConfigError("empty method list")

    rows = []
    for method in methods:
        cd = cds.get(method)
        if cd is None:
            rows.append([method] + ["unavailable"] * (7 + len(margins)))
            continue
        est = cd.point_estimates()
        lo90, hi90 = cd.interval(0.90)
        lo95, hi95 = cd.interval(0.95)
        row = [method, est["median"], est["mean"], lo90, hi90, lo95, hi95,
               cd.p_value(0.0, "two_sided")]
        row += [cd.evidence(m, math.inf) for m in margins]
        rows.append(row)
        export_plot_data(cd, out / f"cd_{_slug(method)}.csv")
        if values["svg"]:
            _render_svg(out / f"cd_{_slug(method)}.svg", cd, method)
    if all(cds.get(m) is None for m in methods):
        raise CDError("every requested method failed on this dataset")
    header = ("method,median,mean,lo90,hi90,lo95,hi95,p_zero_two_sided,"
              + ",".join(f"evidence_gt_{m:g}" for m in margins))
    _write_rows(out / "summary.csv", header, rows)
    _write_manifest("analyze", values, out)
    print(f"analyze: wrote {len(methods)} methods to {out}")
    return 0


def _parse_scenarios(tokens) -> tuple[Scenario, ...]:
    scenarios = []
    for token in tokens:
        try:
            n_str, cont_str = token.split(":")
            scenarios.append(Scenario(int(n_str), float(cont_str)))
        except ValueError as exc:
            raise ConfigError(f"bad scenario {token!r} (want n:contamination)") from exc
    return tuple(scenarios)


def _cmd_simulate(args) -> int:
    values = _resolve("simulate", args)
    out = _out_dir(args)
    if not values["methods"]:
        raise ConfigError("empty method list; available: " + ", ".join(ALL_METHODS))
    workers = values["workers"] or (os.cpu_count() or 1)
    spec = StudySpec(
        seed=values["seed"],
        scenarios=_parse_scenarios(values["scenarios"]),
        methods=tuple(values["methods"]),
        replicates=values["replicates"],
        proposals=values["proposals"],
        psi0=values["psi0"],
        delta=values["delta"],
        mu_n=values["mu_n"],
        sigma=values["sigma"],
        epsilon=values["epsilon"],
        huber_c=values["huber_c"],
        boot_b=values["boot_b"],
        workers=workers,
    )
    report = run_study(spec)
    (out / "coverage.csv").write_text("\n".join(report.coverage_csv_lines()) + "\n",
                                      encoding="utf-8")
    (out / "stability.csv").write_text("\n".join(report.stability_csv_lines()) + "\n",
                                       encoding="utf-8")
    (out / "tables.txt").write_text(report.text_tables(), encoding="utf-8")
    _write_manifest("simulate", values, out)
    print(f"simulate: {spec.replicates} replicates x {len(spec.scenarios)} scenarios -> {out}")
    return 0


def _cmd_npcd(args) -> int:
    values = _resolve("npcd", args)
    out = _out_dir(args)
    psi_range = (values["psi_lo"], values["psi_hi"])
    kinds = values["kinds"]
    for kind in kinds:
        if kind not in ("ks", "wasserstein1"):
            raise ConfigError(f"unknown discrepancy kind {kind!r}")
    model = OneSampleModel(theta=values["theta0"], n=values["n"])
    if values["input"]:
        observed_base = load_one_sample_csv(values["input"])
        model = OneSampleModel(theta=float(np.median(observed_base)), n=observed_base.size)
    summary_lines = []
    for level in values["contamination"]:
        for kind in kinds:
            if values["input"]:
                data = observed_base
                if level > 0:
                    raise ConfigError("contamination levels apply to synthetic data only")
            else:
                recipe = (ContaminationRecipe(fraction=level,
                                              mechanism="cauchy_extreme_replacement")
                          if level > 0 else None)
                data = sample(DatasetSpec(model=model, seed=values["seed"],
                                          contamination=recipe))
            result = semimetric_cd(kind, data, ReferenceSpec(), psi_range,
                                   r=values["r"], seed=values["seed"])
            tag = f"{kind}_{int(round(100 * level))}"
            if isinstance(result, ConfidenceCurve):
                _write_rows(out / f"cc_{tag}.csv", "psi,cc",
                            list(zip(result.psi, result.values)))
                summary_lines.append(f"{tag}: confidence curve only (non-monotone profile)")
            else:
                export_plot_data(result, out / f"cd_{tag}.csv")
                if values["svg"]:
                    _render_svg(out / f"cd_{tag}.svg", result, tag)
                summary_lines.append(
                    f"{tag}: median={result.median()!r} mean_obs={float(np.mean(data))!r}")
    if values["sweep"]:
        recipe = ContaminationRecipe(fraction=values["sweep_eps"],
                                     mechanism="cauchy_extreme_replacement")
        base_spec = DatasetSpec(model=model, seed=values["seed"])
        for kind in kinds:
            records = contamination_shift(base_spec, recipe, psi_range, values["r"],
                                          theta_refs=values["theta_ref"], kind=kind)
            _write_rows(out / f"shift_sweep_{kind}.csv",
                        "theta_ref,median_clean,median_contaminated,shift",
                        [[r["theta_ref"], r["median_clean"], r["median_contaminated"],
                          r["shift"]] for r in records])
    (out / "npcd_summary.txt").write_text("\n".join(summary_lines) + "\n", encoding="utf-8")
    _write_manifest("npcd", values, out)
    print(f"npcd: wrote {out}")
    return 0


def _cmd_boot(args) -> int:
    from .bootcd import BootstrapConfig, boot_cd

    values = _resolve("boot", args)
    out = _out_dir(args)
    if not values["input"]:
        raise ConfigError("boot needs --input")
    if values["model"] == "two_sample":
        data = load_two_sample_csv(values["input"])
    elif values["model"] == "one_sample":
        data = load_one_sample_csv(values["input"])
    else:
        raise ConfigError(f"unknown model {values['model']!r}")
    cfg = BootstrapConfig(b=values["b"], estimator=values["estimator"],
                          variant=values["variant"], seed=values["seed"])
    cd = boot_cd(cfg, data)
    export_plot_data(cd, out / f"cd_boot_{values['variant']}.csv")
    lo95, hi95 = cd.interval(0.95)
    (out / "boot_summary.txt").write_text(
        f"variant={values['variant']}\nmedian={cd.median()!r}\n"
        f"ci95=({float(lo95)!r},{float(hi95)!r})\n", encoding="utf-8")
    _write_manifest("boot", values, out)
    print(f"boot: wrote {out}")
    return 0


def _cmd_abc(args) -> int:
    from .mest import EstimatingFunction
    from .models import TwoSampleModel
    from .simcd import AbcConfig, ProposalSpec, SummaryStatistic, abc_cd

    values = _resolve("abc", args)
    out = _out_dir(args)
    if not values["input"]:
        raise ConfigError("abc needs --input")
    data = load_two_sample_csv(values["input"])
    if data.y_s.size != data.y_n.size:
        raise ConfigError("abc two-sample model needs equal group sizes")
    model = TwoSampleModel(mu_n=float(np.mean(data.y_n)),
                           psi=float(np.mean(data.y_s) - np.mean(data.y_n)),
                           sigma=max(float(np.std(np.concatenate([data.y_s, data.y_n]))), 1e-6),
                           n_per_group=data.y_s.size)
    proposal = ProposalSpec(psi_range=(values["psi_lo"], values["psi_hi"]),
                            nuisance_ranges=((values["mu_lo"], values["mu_hi"]),
                                             (values["sigma_lo"], values["sigma_hi"])),
                            r=values["r"])
    try:
        summary = SummaryStatistic(values["summary"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ef = None
    if summary.kind != "median_difference":
        ef = EstimatingFunction(kind="huber_location", family="two_sample", c=values["huber_c"])
    cfg = AbcConfig(epsilon=values["epsilon"], seed=values["seed"])
    dens = abc_cd(model, proposal, summary, cfg, data, ef=ef)
    with open(out / "accepted.txt", "w", encoding="utf-8") as fh:
        for v in dens.sample:
            fh.write(f"{float(v)!r}\n")
    diag = dens.diagnostics
    with open(out / "diagnostics.txt", "w", encoding="utf-8") as fh:
        for key in ("n_proposals", "n_accepted", "n_solver_failures",
                    "min_distance", "pilot_scale"):
            fh.write(f"{key}={diag[key]!r}\n")
        fh.write(f"acceptance_rate={diag['n_accepted'] / diag['n_proposals']!r}\n")
    cd = ConfidenceDistribution.from_sample(dens.sample)
    export_plot_data(cd, out / "cd_abc.csv")
    _write_manifest("abc", values, out)
    print(f"abc: accepted {diag['n_accepted']}/{diag['n_proposals']} -> {out}")
    return 0


_COMMANDS = {
    "analyze": _cmd_analyze,
    "simulate": _cmd_simulate,
    "npcd": _cmd_npcd,
    "boot": _cmd_boot,
    "abc": _cmd_abc,
}


def _normalize_argv(argv) -> list[str]:
    """Join flags with values that start with a minus (negative margins),
    which argparse would otherwise read as option names."""
    import re

    out = []
    skip = False
    numeric_list = re.compile(r"^-\d|^-\.\d")
    for i, token in enumerate(argv):
        if skip:
            skip = False
            continue
        nxt = argv[i + 1] if i + 1 < len(argv) else None
        if (token.startswith("--") and "=" not in token and nxt is not None
                and numeric_list.match(nxt)):
            out.append(f"{token}={nxt}")
            skip = True
        else:
            out.append(token)
    return out


def main(argv=None) -> int:
    parser = _build_parser()
    if argv is None:
        argv = sys.argv[1:]
    args = parser.parse_args(_normalize_argv(list(argv)))
    try:
        return _COMMANDS[args.command](args)
    except (CsvFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, CDError, PivotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
