"""``teleograsp`` command line.

Typical session::

    teleograsp plan --out run/plans --seed 7
    teleograsp simulate --plans run/plans --out run/logs --workers 4
    teleograsp analyze --logs run/logs --out run/metrics
    teleograsp verdict --metrics run/metrics --out run/report
    teleograsp report --report run/report/report.json

Exit codes: 0 success, 2 validation error, 3 too many excluded trials,
4 model fit failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from . import pipeline, stats
from .agents import PopulationParams
from .metrics import AnalysisConfig, aggregate, analyze_trial, read_log, read_metrics, write_log, write_metrics
from .model import (CONDITIONS, Condition, Experiment, make_cohort, read_cohort, read_plan, validate_plan,
                    write_cohort, write_plan)
from .teleop import SimConfig

log = logging.getLogger("teleograsp")

EXIT_OK, EXIT_VALIDATION, EXIT_EXCLUSIONS, EXIT_FIT = 0, 2, 3, 4
COHORT_FILE = "cohort.json"
CONFIG_FILE = "run_config.json"


class ValidationError(Exception):
    pass


@dataclass(frozen=True)
class StatsConfig:
    alpha: float = 0.05
    df_method: str = "satterthwaite"
    sd_mode: str = "nonsignificant"
    margin: float | None = None
    min_n: int = 3
    max_exclusion_rate: float = 0.10

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.df_method not in ("satterthwaite", "residual"):
            raise ValueError(f"unknown df_method {self.df_method!r}")
        if self.sd_mode not in ("nonsignificant", "equivalence"):
            raise ValueError(f"unknown sd_mode {self.sd_mode!r}")
        if self.sd_mode == "equivalence" and not (self.margin and self.margin > 0):
            raise ValueError("equivalence mode needs a positive margin")
        if not 0 <= self.max_exclusion_rate <= 1:
            raise ValueError("max_exclusion_rate must lie in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run; seeds plus this fix every output byte."""

    seed: int = 0
    cohort: dict = field(default_factory=lambda: {"fine": 10, "normal": 11, "quick": 10})
    population: PopulationParams = field(default_factory=PopulationParams)
    sim: SimConfig = field(default_factory=SimConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)

    def __post_init__(self):
        sizes = {Condition(k).value: int(v) for k, v in self.cohort.items()}
        if any(v < 0 for v in sizes.values()) or sum(sizes.values()) == 0:
            raise ValueError(f"invalid cohort sizes {self.cohort}")
        object.__setattr__(self, "cohort", sizes)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "cohort": dict(self.cohort), "population": self.population.to_dict(),
                "sim": self.sim.to_dict(), "analysis": asdict(self.analysis), "stats": asdict(self.stats)}

    @classmethod
    def from_dict(cls, d: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Build from a (possibly partial) dict; missing keys come from ``base``."""
        base = base or cls()
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        cur = _merge(base.to_dict(), d)
        if "cohort" in d:
            cur["cohort"] = dict(d["cohort"])
        return cls(
            seed=int(cur["seed"]), cohort=cur["cohort"],
            population=PopulationParams.from_dict(cur["population"]),
            sim=SimConfig.from_dict(cur["sim"]),
            analysis=AnalysisConfig(**cur["analysis"]),
            stats=StatsConfig(**cur["stats"]),
        )

    def hash(self) -> str:
        return pipeline.config_hash(self.to_dict())


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def version() -> str:
    try:
        return metadata.version("teleograsp")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _dump(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _parse_cohort(text: str) -> dict:
    try:
        parts = [int(x) for x in text.split(",")]
    except ValueError:
        raise ValidationError(f"--cohort expects three integers 'fine,normal,quick', got {text!r}") from None
    if len(parts) != 3:
        raise ValidationError(f"--cohort expects three integers 'fine,normal,quick', got {text!r}")
    return {c.value: n for c, n in zip(CONDITIONS, parts)}


def _flag_overrides(args) -> dict:
    flags: dict = {}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "cohort", None):
        flags["cohort"] = _parse_cohort(args.cohort)
    st = {k: getattr(args, k) for k in ("alpha", "sd_mode", "margin", "df_method", "max_exclusion_rate")
          if getattr(args, k, None) is not None}
    if st:
        flags["stats"] = st
    if getattr(args, "population", None):
        flags["population"] = json.loads(Path(args.population).read_text())
    return flags


def build_config(args, base: RunConfig | None = None) -> RunConfig:
    """``base`` (or defaults), then explicit flags, then the config file (file values win)."""
    cfg = RunConfig.from_dict(_flag_overrides(args), base=base)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ValidationError(f"config file {path} not found")
        cfg = RunConfig.from_dict(json.loads(path.read_text()), base=cfg)
    return cfg


def _stored_config(directory: Path, args) -> RunConfig:
    """Config saved by the upstream stage, with this stage's flags and config file applied."""
    path = directory / CONFIG_FILE
    base = RunConfig.from_dict(json.loads(path.read_text())) if path.is_file() else None
    return build_config(args, base)


def _out_dir(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ValidationError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ----------------------------------------------------------------

def cmd_plan(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args.out)
    cohort = make_cohort(cfg.seed, cfg.cohort)
    write_cohort(cohort, out / COHORT_FILE)
    _dump(cfg.to_dict(), out / CONFIG_FILE)
    n = 0
    for subj in cohort.subjects:
        for plan in cohort.plans_for(subj):
            problems = validate_plan(plan)
            if problems:
                raise ValidationError(f"generated plan for {subj.id} failed validation: {problems}")
            write_plan(plan, out / f"{subj.id}_{plan.experiment.value}.plan")
            n += 1
    log.info("wrote %d plan files for %d subjects to %s", n, len(cohort.subjects), out)
    return EXIT_OK


def _simulate_one(job):
    subject, plan, master_seed, population, sim, out = job
    written = []

    def save(tl):
        d = out / subject.id / plan.experiment.value
        d.mkdir(parents=True, exist_ok=True)
        written.append((tl.meta.get("clamped_ticks", 0), tl.meta.get("mga_hit") or tl.meta.get("ps_hit")))
        write_log(tl, d / f"trial_{tl.meta['trial']:03d}.csv")

    rows = pipeline.simulate_plan(subject, plan, master_seed, population, sim, on_log=save)
    failed = [(r["trial"], r["reason"]) for r in rows]
    clamped = sum(1 for c, _ in written if c)
    return subject.id, plan.experiment.value, len(written), failed, clamped


def cmd_simulate(args) -> int:
    plans_dir = Path(args.plans)
    if not (plans_dir / COHORT_FILE).is_file():
        raise ValidationError(f"no {COHORT_FILE} in {plans_dir}; run `teleograsp plan` first")
    cohort = read_cohort(plans_dir / COHORT_FILE)
    cfg = _stored_config(plans_dir, args)
    out = _out_dir(args.out)
    jobs = []
    for subj in cohort.subjects:
        if args.subject and subj.id not in args.subject:
            continue
        for exp in subj.order:
            if args.experiment and exp.value != args.experiment:
                continue
            path = plans_dir / f"{subj.id}_{exp.value}.plan"
            if not path.is_file():
                raise ValidationError(f"missing plan file {path}")
            plan = read_plan(path)
            problems = validate_plan(plan)
            if problems:
                raise ValidationError(f"{path}: invalid plan ({', '.join(problems)})")
            if plan.subject != subj.id or plan.condition is not subj.condition:
                raise ValidationError(f"{path}: plan does not belong to {subj.id}/{subj.condition.value}")
            jobs.append((subj, plan, cohort.seed, cfg.population, cfg.sim, out))
    if not jobs:
        raise ValidationError("nothing to simulate (check --subject/--experiment)")
    _dump(cfg.to_dict(), out / CONFIG_FILE)
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as ex:
            results = list(ex.map(_simulate_one, jobs))
    else:
        results = [_simulate_one(j) for j in jobs]
    n_fail = 0
    for sid, exp, n, failed, clamped in results:
        log.info("%s %s: %d trials written, %d with gripper clamping", sid, exp, n, clamped)
        for trial, reason in failed:
            log.warning("%s %s trial %d infeasible: %s", sid, exp, trial, reason)
        n_fail += len(failed)
    log.info("simulation done: %d plans, %d infeasible trials", len(results), n_fail)
    return EXIT_OK


def cmd_analyze(args) -> int:
    logs_dir = Path(args.logs)
    paths = sorted(p for p in logs_dir.glob("*/*/trial_*.csv")) if logs_dir.is_dir() else []
    if not paths:
        raise ValidationError(f"no trial logs found under {logs_dir}")
    cfg = _stored_config(logs_dir, args)
    out = _out_dir(args.out)
    rows, exclusions = [], []
    for p in paths:
        try:
            tl = read_log(p)
        except (ValueError, KeyError, OSError, json.JSONDecodeError, pd.errors.ParserError) as exc:
            exclusions.append({"file": str(p.relative_to(logs_dir)), "reason": f"corrupt log: {exc}"})
            continue
        row = analyze_trial(tl, cfg.analysis)
        row["clamped_ticks"] = int(tl.meta.get("clamped_ticks", 0))
        if not row["analyzable"]:
            exclusions.append({"file": str(p.relative_to(logs_dir)), "reason": row["reason"]})
        rows.append(row)
    trials = pipeline.sort_trials(pd.DataFrame(rows)) if rows else pd.DataFrame()
    write_metrics(trials, out / "trials.csv")
    agg = aggregate(trials, min_n=cfg.stats.min_n) if rows else pd.DataFrame()
    write_metrics(agg, out / "aggregate.csv")
    pd.DataFrame(exclusions, columns=["file", "reason"]).to_csv(out / "exclusions.csv", index=False,
                                                               lineterminator="\n")
    _dump(cfg.to_dict(), out / CONFIG_FILE)
    n_test = int((~trials["is_training"].astype(bool)).sum()) if rows else 0
    n_bad = sum(1 for e in exclusions if e["reason"].startswith("corrupt"))
    n_bad += int((~trials["analyzable"].astype(bool) & ~trials["is_training"].astype(bool)).sum()) if rows else 0
    rate = n_bad / max(n_test + sum(1 for e in exclusions if e["reason"].startswith("corrupt")), 1)
    log.info("analysed %d logs, %d excluded (rate %.3f)", len(paths), len(exclusions), rate)
    if rate > cfg.stats.max_exclusion_rate:
        log.error("exclusion rate %.3f exceeds bound %.3f", rate, cfg.stats.max_exclusion_rate)
        return EXIT_EXCLUSIONS
    return EXIT_OK


def _load_aggregate(metrics_dir: Path) -> pd.DataFrame:
    path = metrics_dir / "aggregate.csv"
    if not path.is_file():
        raise ValidationError(f"{path} not found; run `teleograsp analyze` first")
    agg = read_metrics(path)
    if agg.empty:
        raise ValidationError(f"{path} is empty")
    return agg


def _fit_report(fits, errors, cfg: RunConfig) -> dict:
    return {
        "software": {"name": "teleograsp", "version": version()},
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "models": {name: fit.to_dict() for name, fit in fits.items()},
        "errors": errors,
    }


def cmd_fit(args) -> int:
    metrics_dir = Path(args.metrics)
    agg = _load_aggregate(metrics_dir)
    cfg = _stored_config(metrics_dir, args)
    out = _out_dir(args.out)
    fits, errors = pipeline.fit_models(agg, df_method=cfg.stats.df_method)
    _dump(_fit_report(fits, errors, cfg), out / "fits.json")
    for name, msg in errors.items():
        log.error("fit of %s failed: %s", name, msg)
    return EXIT_FIT if errors else EXIT_OK


def _ceilings(cfg: RunConfig) -> dict:
    return {c.value: cfg.sim.limits.slave_ceiling(cfg.sim.scaling(c)) for c in CONDITIONS}


def _plot_data(agg, fits, cfg: RunConfig, out: Path):
    ceil = _ceilings(cfg)
    slope_rows = []
    for spec in pipeline.MODELS:
        if spec.name not in fits:
            continue
        fit = fits[spec.name]
        tab = pipeline.long_table(agg, spec)
        obs = pd.DataFrame({"condition": tab.condition, "diameter_mm": tab.diameter, "v": tab.value})
        obs = obs.groupby(["condition", "diameter_mm"], sort=True)["v"].agg(["mean", "std", "count"]).reset_index()
        lines = []
        for c in fit.levels:
            for d in sorted(set(tab.diameter)):
                est = fit.contrast(fit.mean_vector(c) + (d - fit.center) * fit.slope_vector(c))[0]
                lines.append({"condition": c, "diameter_mm": d,
                              "fitted": float(np.exp(est)) if fit.transform == "log" else est})
        plot = obs.merge(pd.DataFrame(lines), on=["condition", "diameter_mm"], how="outer")
        plot = plot.rename(columns={"mean": "observed_mean", "std": "observed_sd", "count": "n_subjects"})
        plot["ceiling"] = plot["condition"].map(ceil)
        plot.to_csv(out / f"regression_{spec.name}.csv", index=False, float_format="%.12g", lineterminator="\n")
        stats.qq_residuals(fit).to_csv(out / f"qq_{spec.name}.csv", index=False, float_format="%.12g",
                                       lineterminator="\n")
        one_sided = stats.slope_tests(fit, "greater")
        for c in fit.levels:
            s, am = fit.slopes[c], fit.adjusted[c]
            slope_rows.append({
                "model": spec.name, "transform": spec.transform, "condition": c, "slope": s.slope, "se": s.se,
                "t": s.t, "df": s.df, "p_two_sided": s.p, "p_greater": one_sided[c].p,
                "adjusted_mean": am["estimate"], "ci_low": am["ci_low"], "ci_high": am["ci_high"],
                "ceiling": ceil[c],
            })
    pd.DataFrame(slope_rows).to_csv(out / "slopes.csv", index=False, float_format="%.12g", lineterminator="\n")


def cmd_verdict(args) -> int:
    metrics_dir = Path(args.metrics)
    agg = _load_aggregate(metrics_dir)
    cfg = _stored_config(metrics_dir, args)
    out = _out_dir(args.out)
    fits, errors = pipeline.fit_models(agg, df_method=cfg.stats.df_method)
    report = _fit_report(fits, errors, cfg)
    bart = {}
    for name, fit in fits.items():
        spec = next(s for s in pipeline.MODELS if s.name == name)
        try:
            bart[name] = stats.residual_bartlett(fit, pipeline.long_table(agg, spec))
        except ValueError as exc:
            bart[name] = {"error": str(exc)}
    report["bartlett"] = bart
    report["ceilings"] = _ceilings(cfg)
    code = EXIT_OK
    try:
        v = pipeline.verdict(fits, cfg.stats.alpha, cfg.stats.sd_mode, cfg.stats.margin)
        report["verdict"] = v.to_dict()
    except ValueError as exc:
        report["verdict"] = {"error": str(exc)}
        code = EXIT_FIT
    if errors:
        code = EXIT_FIT
    _dump(report, out / "report.json")
    _plot_data(agg, fits, cfg, out)
    if "transparent" in report["verdict"]:
        for c, flag in report["verdict"]["transparent"].items():
            log.info("%-6s transparent=%s", c, flag)
    return code


def cmd_report(args) -> int:
    path = Path(args.report)
    if not path.is_file():
        raise ValidationError(f"{path} not found; run `teleograsp verdict` first")
    rep = json.loads(path.read_text())
    lines = [f"teleograsp {rep['software']['version']}  config {rep['config_hash']}  seed {rep['seed']}", ""]
    lines.append(f"{'model':<20}{'effect':<13}{'F':>9}{'df':>14}{'p':>10}")
    for name, m in rep["models"].items():
        for eff, a in m["anova"].items():
            df = f"{a['num_df']},{a['den_df']:.2f}"
            lines.append(f"{name:<20}{eff:<13}{a['F']:>9.2f}{df:>14}{a['p']:>10.4f}")
    lines += ["", f"{'model':<20}{'condition':<10}{'slope':>11}{'t':>8}{'df':>8}{'p(2s)':>9}{'adj.mean':>11}"]
    for name, m in rep["models"].items():
        for c, s in m["slopes"].items():
            am = m["adjusted_means"][c]["estimate"]
            lines.append(f"{name:<20}{c:<10}{s['slope']:>11.5f}{s['t']:>8.2f}{s['df']:>8.1f}{s['p']:>9.4f}{am:>11.4f}")
    v = rep.get("verdict", {})
    lines.append("")
    if "conditions" in v:
        lines.append(f"{'condition':<10}{'act.mean':>9}{'act.sd':>8}{'per.mean':>9}{'per.sd':>8}  transparent")
        for c, cv in v["conditions"].items():
            flags = [cv[k] for k in ("action_mean_ok", "action_sd_weber_violated", "perception_mean_ok",
                                     "perception_sd_weber_obeyed")]
            lines.append(f"{c:<10}" + "".join(f"{'yes' if f else 'no':>{w}}" for f, w in zip(flags, (9, 8, 9, 8)))
                         + f"  {cv['transparent']}")
    else:
        lines.append(f"verdict unavailable: {v.get('error', 'missing')}")
    for name, msg in rep.get("errors", {}).items():
        lines.append(f"fit failed: {name}: {msg}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_replay(args) -> int:
    path = Path(args.log)
    if not path.is_file():
        raise ValidationError(f"{path} not found")
    try:
        tl = read_log(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: {exc}") from None
    frame = pipeline.replay_frame(tl)
    cfg = AnalysisConfig()
    row = analyze_trial(tl, cfg)
    frame["ceiling"] = tl.meta.get("ceiling", np.nan)
    dest = Path(args.out) if args.out else None
    text = frame.to_csv(index=False, float_format="%.9g", lineterminator="\n")
    if dest:
        dest.write_text(text)
    else:
        sys.stdout.write(text)
    summary = {k: row[k] for k in ("analyzable", "reason", "mga", "mga_time_fraction", "ps", "reaction_time",
                                   "transport_time", "total_time", "perception_time", "path_length")}
    log.info("metrics: %s", json.dumps(summary, default=_json_default))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _common(p, seed=False):
    p.add_argument("--config", help="JSON run config; its values override command-line flags")
    if seed:
        p.add_argument("--seed", type=int, help="master seed (integer, default 0)")


def _stats_flags(p):
    p.add_argument("--alpha", type=float, help="significance level per test (default 0.05)")
    p.add_argument("--sd-mode", dest="sd_mode", choices=["nonsignificant", "equivalence"],
                   help="how the SD-of-MGA flag is decided (default: non-significant two-sided slope)")
    p.add_argument("--margin", type=float, help="equivalence margin for the SD-of-MGA slope, rad/mm")
    p.add_argument("--df-method", dest="df_method", choices=["satterthwaite", "residual"],
                   help="denominator degrees of freedom (default satterthwaite)")


def build_parser() -> argparse.ArgumentParser:
    verb = argparse.ArgumentParser(add_help=False)
    verb.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="more diagnostics on stderr")
    verb.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS, help="only errors on stderr")
    ap = argparse.ArgumentParser(prog="teleograsp", description="Teleoperated grasping simulator and analysis",
                                 parents=[verb])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[verb])

    p = add("plan", help="write the cohort manifest and per-subject plan files")
    _common(p, seed=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cohort", help="subjects per scaling as 'fine,normal,quick' (default 10,11,10)")
    p.add_argument("--population", help="JSON file with agent population parameters")
    p.set_defaults(func=cmd_plan)

    p = add("simulate", help="simulate every trial of the planned cohort into log files")
    _common(p)
    p.add_argument("--plans", required=True, help="directory written by `plan`")
    p.add_argument("--out", required=True, help="log directory")
    p.add_argument("--workers", type=int, default=1, help="worker processes (outputs do not depend on it)")
    p.add_argument("--subject", action="append", help="restrict to subject id (repeatable)")
    p.add_argument("--experiment", choices=[e.value for e in Experiment], help="restrict to one experiment")
    p.set_defaults(func=cmd_simulate)

    p = add("analyze", help="compute per-trial metrics and per-subject aggregates")
    _common(p)
    p.add_argument("--logs", required=True, help="log directory written by `simulate`")
    p.add_argument("--out", required=True, help="metrics directory")
    p.add_argument("--max-exclusion-rate", dest="max_exclusion_rate", type=float,
                   help="fraction of test trials that may be excluded before exit code 3 (default 0.10)")
    p.set_defaults(func=cmd_analyze)

    p = add("fit", help="fit the mixed models and write fits.json")
    _common(p)
    _stats_flags(p)
    p.add_argument("--metrics", required=True, help="metrics directory written by `analyze`")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = add("verdict", help="fit models, run Bartlett tests, decide transparency, emit plot data")
    _common(p)
    _stats_flags(p)
    p.add_argument("--metrics", required=True, help="metrics directory written by `analyze`")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_verdict)

    p = add("report", help="print a text summary of a verdict report")
    p.add_argument("--report", required=True, help="report.json written by `verdict`")
    p.add_argument("--out", help="write the summary here instead of stdout")
    p.set_defaults(func=cmd_report)

    p = add("replay", help="re-emit one trial's filtered 100 Hz trajectories as CSV")
    p.add_argument("--log", required=True, help="trial log CSV")
    p.add_argument("--out", help="CSV destination (default stdout)")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    quiet, verbose = getattr(args, "quiet", False), getattr(args, "verbose", 0)
    level = logging.ERROR if quiet else (logging.DEBUG if verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (ValidationError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
