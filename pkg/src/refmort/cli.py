"""Command-line front end: simulate, estimate, bootstrap, report.

Every run is reproducible from its manifest: all randomness flows from the
user-supplied seed, outputs carry no wall-clock entropy, and the manifest
records the content hashes of every input plus the full configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, bootstrap_estimate
from .errors import ConfigurationError, RefmortError, ValidationError
from .estimators import (
    EstimateResult,
    Method,
    estimate_method0,
    estimate_method1,
    estimate_method2,
    estimate_method3,
)
from .glm import predict_mean
from .lagmodel import (
    estimate_lag_survival,
    parse_lag_csv,
    write_lag_csv,
    write_survival_csv,
)
from .registry import (
    TableColumns,
    parse_mortality_csv,
    parse_raw_mortality_csv,
    parse_schedule_csv,
    split_risk_time,
    validate,
    write_mortality_csv,
    write_schedule_csv,
)
from .simulator import load_scenario, simulate

log = logging.getLogger(__name__)

METHOD_LABELS = {
    Method.M0: "observed vs expected post-invitation deaths, diagnosis timing ignored",
    Method.M1: "observed vs expected deaths from post-invitation diagnoses",
    Method.M2: "refined-mortality offset regression (recommended)",
    Method.M3: "full maximum likelihood with refined mortality",
}


@dataclass
class RunConfig:
    command: str
    input: str | None = None
    lag: str | None = None
    schedule: str | None = None
    scenario: str | None = None
    method: str = "all"
    replicates: int = 1000
    seed: int = 0
    jobs: int = 1
    ci_level: float = 0.95
    out: str = "."


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(outdir: Path, config: RunConfig, inputs: list[str]) -> None:
    manifest = {
        "tool": "refmort",
        "version": __version__,
        "command": config.command,
        "seed": config.seed,
        "config": asdict(config),
        "inputs": {p: _sha256(Path(p)) for p in inputs},
    }
    _write_json(outdir / "manifest.json", manifest)


def _methods(config: RunConfig) -> list[Method]:
    if config.method == "all":
        return [Method.M0, Method.M1, Method.M2, Method.M3]
    return [Method(f"M{config.method}")]


def _require(path: str | None, flag: str, purpose: str):
    if path is None:
        raise ConfigurationError(f"{flag} is required {purpose}")
    if not Path(path).exists():
        raise ConfigurationError(f"{flag} file {path!r} does not exist")
    return Path(path)


def _load_inputs(config: RunConfig, need_lag: bool):
    """Load the analysis table (splitting raw input if needed) and lag data."""
    inputs = []
    path = _require(config.input, "--input", "to locate the mortality table")
    inputs.append(str(path))
    with open(path, newline="") as fh:
        header = fh.readline()
    is_raw = "cases_pre_dx" in header

    hist = None
    rho = None
    if config.lag is not None:
        lag_path = _require(config.lag, "--lag", "to locate the lag histogram")
        inputs.append(str(lag_path))
        hist = parse_lag_csv(lag_path)
        rho = estimate_lag_survival(hist)
    if need_lag and hist is None:
        raise ConfigurationError(
            "--lag (historic diagnosis-to-death histogram) is required for the requested method(s)"
        )

    if is_raw:
        if rho is None:
            raise ConfigurationError("--lag is required to split a raw (pre-split) table")
        sched_path = _require(config.schedule, "--schedule", "to split a raw (pre-split) table")
        inputs.append(str(sched_path))
        schedule = parse_schedule_csv(sched_path)
        raw = parse_raw_mortality_csv(path)
        table = split_risk_time(raw, schedule, rho)
    else:
        table = parse_mortality_csv(path)

    report = validate(table)
    if not report.ok:
        raise ValidationError(
            f"mortality table failed validation with {len(report.violations)} violation(s)",
            violations=report.violations,
        )
    return table, hist, rho, inputs


def _write_comparison(outdir: Path, results: list[EstimateResult]) -> None:
    lines = ["method,label,screening_rate_ratio,ci_low,ci_high"]
    for r in results:
        ci_lo = "" if r.ci_low is None else repr(r.ci_low)
        ci_hi = "" if r.ci_high is None else repr(r.ci_high)
        lines.append(
            f"{r.method.value},\"{METHOD_LABELS[r.method]}\",{r.screening_rate_ratio!r},{ci_lo},{ci_hi}"
        )
    (outdir / "comparison.csv").write_text("\n".join(lines) + "\n")


def _run_estimators(table, hist, rho, methods: list[Method]) -> list[EstimateResult]:
    results: list[EstimateResult] = []
    warm = None
    for m in methods:
        if m is Method.M0:
            results.append(estimate_method0(table))
        elif m is Method.M1:
            results.append(estimate_method1(table, rho))
        elif m is Method.M2:
            warm = estimate_method2(table)
            results.append(warm)
        else:
            if warm is None:
                warm = estimate_method2(table)
            results.append(estimate_method3(table, hist, warm))
    return results


def cmd_simulate(config: RunConfig) -> None:
    if config.scenario is None:
        raise ConfigurationError("--scenario is required for simulate")
    scenario = load_scenario(config.scenario)
    out = simulate(scenario, config.seed)
    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_mortality_csv(out.table, outdir / "registry.csv")
    write_lag_csv(out.hist, outdir / "lag.csv")
    write_schedule_csv(scenario.schedule(), outdir / "schedule.csv")
    _write_json(outdir / "truth.json", out.truth.to_dict())
    inputs = [config.scenario] if Path(config.scenario).exists() else []
    _write_manifest(outdir, config, inputs)
    log.info("wrote registry.csv, lag.csv, schedule.csv, truth.json to %s", outdir)


def cmd_estimate(config: RunConfig) -> None:
    methods = _methods(config)
    need_lag = any(m in (Method.M1, Method.M3) for m in methods)
    table, hist, rho, inputs = _load_inputs(config, need_lag)
    results = _run_estimators(table, hist, rho, methods)
    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for r in results:
        _write_json(outdir / f"estimate_{r.method.value.lower()}.json", r.to_dict())
    _write_comparison(outdir, results)
    if rho is not None:
        write_survival_csv(rho, outdir / "rho.csv")
    _write_manifest(outdir, config, inputs)
    for r in results:
        log.info("%s: rate ratio %.4f", r.method.value, r.screening_rate_ratio)


def cmd_bootstrap(config: RunConfig) -> None:
    methods = _methods(config)
    need_lag = any(m is not Method.M0 for m in methods)
    table, hist, rho, inputs = _load_inputs(config, need_lag)
    cfg = BootstrapConfig(
        replicates=config.replicates,
        seed=config.seed,
        ci_level=config.ci_level,
        jobs=config.jobs,
    )
    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    results = []
    for m in methods:
        r = bootstrap_estimate(m, table, hist, cfg)
        results.append(r)
        _write_json(outdir / f"estimate_{m.value.lower()}.json", r.to_dict())
        lines = ["replicate,estimate,converged"]
        for b, v in enumerate(r.replicate_table):
            ok = bool(np.isfinite(v))
            lines.append(f"{b},{repr(float(v)) if ok else ''},{int(ok)}")
        (outdir / f"replicates_{m.value.lower()}.csv").write_text("\n".join(lines) + "\n")
        log.info(
            "%s: rate ratio %.4f  [%.4f, %.4f]",
            m.value,
            r.screening_rate_ratio,
            r.ci_low,
            r.ci_high,
        )
    _write_comparison(outdir, results)
    _write_manifest(outdir, config, inputs)


def _trend_rows(table, fit_result: EstimateResult) -> list[dict]:
    cols = table.columns
    design = fit_result.model.design(cols)
    with np.errstate(divide="ignore"):
        offset = np.log(cols.person_years) + np.log(cols.prop_target)
    fitted = np.where(offset > -np.inf, predict_mean(fit_result.fit, design, np.where(offset > -np.inf, offset, 0.0)), 0.0)
    rows = []
    for year in np.unique(cols.year):
        in_year = cols.year == year
        none = in_year & (cols.group == TableColumns.GROUP_NONE)
        old = in_year & (cols.group == TableColumns.GROUP_POST_OLD)
        new = in_year & (cols.group == TableColumns.GROUP_POST_NEW)
        py_pre = cols.person_years[none].sum() + cols.person_years[old].sum()
        py_post = cols.person_years[new].sum()
        obs_pre = cols.cases[none].sum() + cols.cases[old].sum()
        obs_post = cols.cases[new].sum()
        fit_pre = fitted[none].sum() + fitted[old].sum()
        fit_post = fitted[new].sum()
        rows.append(
            {
                "year": int(year),
                "person_years_pre_dx": float(py_pre),
                "observed_pre_dx_deaths": float(obs_pre),
                "fitted_pre_dx_deaths": float(fit_pre),
                "observed_pre_dx_rate_per_100k": float(1e5 * obs_pre / py_pre) if py_pre > 0 else 0.0,
                "fitted_pre_dx_rate_per_100k": float(1e5 * fit_pre / py_pre) if py_pre > 0 else 0.0,
                "person_years_post_dx": float(py_post),
                "observed_post_dx_deaths": float(obs_post),
                "fitted_post_dx_deaths": float(fit_post),
                "observed_post_dx_rate_per_100k": float(1e5 * obs_post / py_post) if py_post > 0 else 0.0,
                "fitted_post_dx_rate_per_100k": float(1e5 * fit_post / py_post) if py_post > 0 else 0.0,
            }
        )
    return rows


def _write_trend_svg(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "refmort"
    years = [r["year"] for r in rows]
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.plot(years, [r["observed_pre_dx_rate_per_100k"] for r in rows], "o-", color="#666666", label="pre-invitation diagnosis, observed")
    ax.plot(years, [r["fitted_pre_dx_rate_per_100k"] for r in rows], "--", color="#666666", label="pre-invitation diagnosis, fitted")
    ax.plot(years, [r["observed_post_dx_rate_per_100k"] for r in rows], "o-", color="#1f77b4", label="post-invitation diagnosis, observed")
    ax.plot(years, [r["fitted_post_dx_rate_per_100k"] for r in rows], "--", color="#1f77b4", label="post-invitation diagnosis, fitted")
    ax.set_xlabel("calendar year")
    ax.set_ylabel("cause-specific mortality per 100,000 person-years")
    ax.set_title("Mortality split by diagnosis timing relative to first invitation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(config: RunConfig) -> None:
    table, hist, rho, inputs = _load_inputs(config, need_lag=False)
    fit_result = estimate_method2(table)
    rows = _trend_rows(table, fit_result)
    outdir = Path(config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    header = list(rows[0].keys())
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in header))
    (outdir / "trends.csv").write_text("\n".join(lines) + "\n")
    _write_trend_svg(rows, outdir / "trends.svg")
    model_doc = {
        "model": fit_result.model.to_dict(),
        "labels": list(fit_result.fit.labels),
        "coefficients": {lab: float(c) for lab, c in zip(fit_result.fit.labels, fit_result.fit.coef)},
        "aliased": list(fit_result.fit.aliased),
        "deviance": fit_result.fit.deviance,
        "screening_rate_ratio": fit_result.screening_rate_ratio,
    }
    _write_json(outdir / "model.json", model_doc)
    _write_manifest(outdir, config, inputs)
    log.info("wrote trends.csv, trends.svg, model.json to %s", outdir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refmort",
        description="Screening-effect estimation from refined (incidence-based) mortality",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_inputs=True):
        if with_inputs:
            p.add_argument("--input", help="split or raw mortality table CSV")
            p.add_argument("--lag", help="historic diagnosis-to-death lag histogram CSV")
            p.add_argument("--schedule", help="rollout schedule CSV (needed for raw input)")
            p.add_argument(
                "--method",
                choices=["0", "1", "2", "3", "all"],
                default="all",
                help="estimator selection",
            )
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=0, help="random seed")

    p_sim = sub.add_parser("simulate", help="generate a synthetic registry from a scenario")
    p_sim.add_argument("--scenario", required=True, help="bundled scenario name or YAML path")
    add_common(p_sim, with_inputs=False)

    p_est = sub.add_parser("estimate", help="point estimates of the screening effect")
    add_common(p_est)

    p_boot = sub.add_parser("bootstrap", help="estimates with bootstrap confidence intervals")
    add_common(p_boot)
    p_boot.add_argument("-B", "--replicates", type=int, default=1000, help="bootstrap replicates")
    p_boot.add_argument("--ci-level", type=float, default=0.95, help="confidence level")
    p_boot.add_argument("--jobs", type=int, default=1, help="parallel workers")

    p_rep = sub.add_parser("report", help="fitted-trend CSV and SVG chart")
    add_common(p_rep)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        command=args.command,
        input=getattr(args, "input", None),
        lag=getattr(args, "lag", None),
        schedule=getattr(args, "schedule", None),
        scenario=getattr(args, "scenario", None),
        method=getattr(args, "method", "all"),
        replicates=getattr(args, "replicates", 1000),
        seed=args.seed,
        jobs=getattr(args, "jobs", 1),
        ci_level=getattr(args, "ci_level", 0.95),
        out=args.out,
    )


def run(config: RunConfig) -> int:
    """Execute one command; returns the process exit code."""
    try:
        if config.command == "simulate":
            cmd_simulate(config)
        elif config.command == "estimate":
            cmd_estimate(config)
        elif config.command == "bootstrap":
            cmd_bootstrap(config)
        elif config.command == "report":
            cmd_report(config)
        else:
            raise ConfigurationError(f"unknown command {config.command!r}")
    except RefmortError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, ValidationError):
            for v in exc.violations[:50]:
                print(f"  {v}", file=sys.stderr)
        return exc.exit_code
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return run(config_from_args(args))


if __name__ == "__main__":
    sys.exit(main())
