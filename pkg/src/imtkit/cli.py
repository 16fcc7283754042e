"""Command-line driver: simulate, analyze, km, bench, reproduce, fetch-stanford.

Every subcommand builds a :class:`RunConfig` and hands it to :func:`run`,
which owns error-to-exit-code translation (1 = bad input, 2 = estimation
failure) and removes output files the failed run had started writing.
Config files are JSON documents whose keys mirror the corresponding
dataclass fields (``ScenarioSpec``, ``MethodSpec``, ``BenchConfig``,
``ColumnMapping``), so a config can be generated, diffed, and checked
mechanically.

Numbers in emitted CSV files carry full precision; the 2-decimal hazard
ratios exist only in the terminal rendering.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, replace

from . import io as iomod
from .bench import BenchConfig, run_replicates, table2_config
from .core import TREAT, km_estimate, to_counting_process
from .cox import FitResult
from .errors import EstimationError, ImtkitError, InputError
from .methods import MethodSpec, analyze
from .simulate import ScenarioSpec, TimeGrid, generate_cohort, standard_scenarios

PROG = "imtkit"

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_ESTIMATION = 2

# Named mappings usable anywhere a mapping file is accepted.
_NAMED_MAPPINGS = ("subjects", "stanford")

# Stanford re-analysis: every method at the published settings (time in days).
_TABLE3_SPECS: tuple[tuple[str, MethodSpec], ...] = (
    ("include_imt", MethodSpec("include_imt")),
    ("exclude_imt", MethodSpec("exclude_imt")),
    ("ptdm", MethodSpec("ptdm")),
    ("landmark_20", MethodSpec("landmark", landmark_time=20.0)),
    ("landmark_40", MethodSpec("landmark", landmark_time=40.0)),
    ("landmark_60", MethodSpec("landmark", landmark_time=60.0)),
    ("time_varying", MethodSpec("time_varying")),
    ("sequential", MethodSpec("sequential", trial_count=3, window_width=20.0,
                              adherence_mode="pp")),
    ("cloning_20", MethodSpec("cloning", grace_end=20.0)),
    ("cloning_40", MethodSpec("cloning", grace_end=40.0)),
    ("cloning_60", MethodSpec("cloning", grace_end=60.0)),
)


@dataclass(frozen=True)
class RunConfig:
    """One fully-resolved unit of CLI work."""

    command: str          # simulate | analyze | km | bench | reproduce | fetch-stanford
    payload: dict         # command-specific settings, JSON-compatible values
    outputs: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# JSON <-> dataclass bridges


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"config {path} must hold a JSON object")
    return doc


def _reject_unknown(doc: dict, allowed, what: str) -> None:
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise InputError(f"unknown {what} field(s): {', '.join(unknown)}")


def scenario_from_json(doc: dict) -> ScenarioSpec:
    """Build a ScenarioSpec from its JSON mirror.

    ``grid`` may be an integer (that many unit intervals) or an explicit
    ascending boundary list; tuples arrive as JSON arrays.
    """
    allowed = ("id", "survival_dist", "censor_range", "treat_range",
               "never_treated_fraction", "n", "grid", "beta_covariate",
               "beta_treatment", "covariate_success_prob")
    _reject_unknown(doc, allowed, "scenario")
    kw = dict(doc)
    for key in ("survival_dist", "censor_range", "treat_range"):
        if key in kw:
            kw[key] = tuple(kw[key])
    if "grid" in kw:
        g = kw["grid"]
        kw["grid"] = (TimeGrid.regular(int(g)) if isinstance(g, (int, float))
                      else TimeGrid(tuple(float(b) for b in g)))
    try:
        return ScenarioSpec(**kw)
    except TypeError as exc:
        raise InputError(f"bad scenario config: {exc}") from exc


def method_from_json(doc: dict) -> MethodSpec:
    allowed = ("kind", "landmark_time", "grace_end", "window_width",
               "trial_count", "adherence_mode", "ptdm_source", "rng_seed",
               "weight_cap", "weight_resolution")
    _reject_unknown(doc, allowed, "method")
    if "kind" not in doc:
        raise InputError("method config needs a 'kind'")
    try:
        return MethodSpec(**doc)
    except TypeError as exc:
        raise InputError(f"bad method config: {exc}") from exc


def bench_from_json(doc: dict) -> BenchConfig:
    """Scenarios may be standard ids (integers) or full scenario objects."""
    allowed = ("scenarios", "methods", "replicates", "master_seed", "parallelism")
    _reject_unknown(doc, allowed, "bench")
    for key in ("scenarios", "methods", "replicates"):
        if key not in doc:
            raise InputError(f"bench config needs '{key}'")
    std = standard_scenarios()
    scenarios = []
    for entry in doc["scenarios"]:
        if isinstance(entry, int):
            if entry not in std:
                raise InputError(f"no standard scenario {entry}; have 1..{len(std)}")
            scenarios.append(std[entry])
        else:
            scenarios.append(scenario_from_json(entry))
    methods = tuple(method_from_json(m) for m in doc["methods"])
    return BenchConfig(
        scenarios=tuple(scenarios), methods=methods,
        replicates=int(doc["replicates"]),
        master_seed=int(doc.get("master_seed", 0)),
        parallelism=int(doc.get("parallelism", 1)))


def mapping_from_json(doc: dict) -> iomod.ColumnMapping:
    allowed = ("id", "followup_end", "event", "event_true", "event_false",
               "treat_init", "treated_flag", "treated_true", "covariates",
               "covariate_codings", "time_unit")
    _reject_unknown(doc, allowed, "mapping")
    kw = dict(doc)
    for key in ("event_true", "event_false"):
        if key in kw:
            kw[key] = frozenset(str(v) for v in kw[key])
    if "covariate_codings" in kw:
        kw["covariate_codings"] = {
            cov: {str(k): float(v) for k, v in coding.items()}
            for cov, coding in kw["covariate_codings"].items()}
    try:
        return iomod.ColumnMapping(**kw)
    except TypeError as exc:
        raise InputError(f"bad mapping config: {exc}") from exc


def _load_subjects(data_path, mapping_arg: str):
    """Resolve --mapping (named or JSON file) and load the data file."""
    if mapping_arg == "subjects":
        return iomod.read_subjects_csv(data_path)
    if mapping_arg == "stanford":
        return iomod.load_stanford(data_path)
    return iomod.load_csv(data_path, mapping_from_json(_load_json(mapping_arg)))


# ---------------------------------------------------------------------------
# coefficient tables


def _wald_p(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def fit_table(fit: FitResult, use_robust: bool) -> list[dict]:
    """Per-term rows: coefficient, SEs, HR with 95% CI, Wald p-value.

    The interval and p-value use the robust SE when the method calls for
    one (clustered designs), else the model-based SE.
    """
    rows = []
    for name in fit.covariate_names:
        beta = fit.coefficient(name)
        se_model = fit.se(name)
        se_used = fit.se(name, robust=True) if use_robust else se_model
        rows.append({
            "term": name,
            "coefficient": beta,
            "se": se_model,
            "robust_se": fit.se(name, robust=True) if fit.robust_se is not None else None,
            "hr": math.exp(beta),
            "hr_lo": math.exp(beta - 1.96 * se_used),
            "hr_hi": math.exp(beta + 1.96 * se_used),
            "p_value": _wald_p(beta / se_used),
        })
    return rows


_TABLE_COLUMNS = ("term", "coefficient", "se", "robust_se",
                  "hr", "hr_lo", "hr_hi", "p_value")


def _table_csv(rows: list[dict], lead: tuple[str, ...] = ()) -> str:
    """Full-precision CSV; ``lead`` names extra columns present in rows."""
    cols = lead + _TABLE_COLUMNS
    out = [",".join(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c)
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


def _render_table(rows: list[dict], lead: tuple[str, ...] = ()) -> str:
    """Terminal rendering; hazard ratios rounded to 2 decimals here only."""
    head = lead + ("term", "hr", "95% ci", "p")
    body = []
    for r in rows:
        body.append(tuple(str(r[c]) for c in lead) + (
            r["term"], f"{r['hr']:.2f}",
            f"({r['hr_lo']:.2f}, {r['hr_hi']:.2f})",
            f"{r['p_value']:.4g}"))
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def _write_text(path, text: str) -> None:
    tmp = f"{path}.part"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# subcommand bodies (compute first, write declared outputs last)


def _cmd_simulate(p: dict) -> None:
    if p.get("config") is not None:
        spec = scenario_from_json(_load_json(p["config"]))
    else:
        std = standard_scenarios()
        sid = p["scenario"]
        if sid not in std:
            raise InputError(f"no standard scenario {sid}; have 1..{len(std)}")
        spec = std[sid]
    if p.get("n") is not None:
        spec = replace(spec, n=p["n"])
    cohort = generate_cohort(spec, p["seed"], p["replicate"])
    iomod.write_subjects_csv(cohort, p["out"])
    n_treated = sum(s.ever_treated for s in cohort)
    print(f"wrote {len(cohort)} subjects ({n_treated} ever treated) to {p['out']}")


def _method_spec_from_args(p: dict) -> MethodSpec:
    if p.get("method_config") is not None:
        return method_from_json(_load_json(p["method_config"]))
    kw = dict(kind=p["method"], adherence_mode=p["adherence"],
              ptdm_source=p["ptdm_source"], rng_seed=p["method_seed"])
    for key in ("landmark_time", "grace_end", "window_width", "trial_count"):
        if p.get(key) is not None:
            kw[key] = p[key]
    return MethodSpec(**kw)


def _cmd_analyze(p: dict) -> None:
    spec = _method_spec_from_args(p)
    subjects = list(_load_subjects(p["data"], p["mapping"]))
    fit = analyze(subjects, spec)
    if not fit.converged:
        raise EstimationError("fit did not converge")
    rows = fit_table(fit, use_robust=spec.kind in ("sequential", "cloning"))
    sys.stdout.write(_render_table(rows))
    if p.get("out") is not None:
        _write_text(p["out"], _table_csv(rows))
        print(f"coefficient table written to {p['out']}")


def _cmd_km(p: dict) -> None:
    subjects = list(_load_subjects(p["data"], p["mapping"]))
    ds = to_counting_process(subjects, split_at_treatment=False)
    group = None if p["pooled"] else p["group"]
    curves = km_estimate(ds, group=group)
    iomod.write_curves_csv(curves, p["out_csv"])
    iomod.svg_step_plot(curves, p["out_svg"], title=p["title"])
    labels = ", ".join(c.label for c in curves)
    print(f"{len(curves)} curve(s) [{labels}] -> {p['out_csv']}, {p['out_svg']}")


def _cmd_bench(p: dict) -> None:
    config = bench_from_json(_load_json(p["config"]))
    if p.get("parallelism") is not None:
        config = replace(config, parallelism=p["parallelism"])
    report = run_replicates(config)
    sys.stdout.write(report.to_text())
    for flag in report.metadata["flags"]:
        print(f"note: {flag}", file=sys.stderr)
    _write_text(p["out"], report.to_csv())
    print(f"benchmark report written to {p['out']}")


def _cmd_reproduce_table2(p: dict) -> None:
    config = table2_config(replicates=p["replicates"], master_seed=p["seed"],
                           parallelism=p["parallelism"])
    started = time.monotonic()
    report = run_replicates(config)
    elapsed = time.monotonic() - started
    sys.stdout.write(report.to_text())
    for flag in report.metadata["flags"]:
        print(f"note: {flag}", file=sys.stderr)
    _write_text(p["out"], report.to_csv())
    print(f"{p['replicates']} replicates x 6 scenarios in {elapsed:.0f}s "
          f"-> {p['out']}")


def _cmd_reproduce_table3(p: dict) -> None:
    subjects = list(iomod.load_stanford(p["data"]))
    specs = _TABLE3_SPECS
    if p.get("method") is not None:
        want = p["method"].replace("-", "_")
        specs = tuple((lb, sp) for lb, sp in specs
                      if sp.kind == want or lb == want)
        if not specs:
            raise InputError(f"no table3 method matches {p['method']!r}")
    all_rows: list[dict] = []
    for label, spec in specs:
        if spec.kind == "ptdm":
            spec = replace(spec, rng_seed=p["seed"])
        fit = analyze(subjects, spec)
        rows = fit_table(fit, use_robust=spec.kind in ("sequential", "cloning"))
        for r in rows:
            r["method"] = label
        all_rows.extend(rows)
    treated_only = [r for r in all_rows if r["term"] == TREAT]
    sys.stdout.write(_render_table(treated_only, lead=("method",)))
    _write_text(p["out"], _table_csv(all_rows, lead=("method",)))
    print(f"full coefficient tables written to {p['out']}")


def _cmd_fetch_stanford(p: dict) -> None:
    iomod.fetch_stanford(p["out"])
    n = len(iomod.load_stanford(p["out"]))
    print(f"fetched {n} subjects to {p['out']}")


_DISPATCH = {
    "simulate": _cmd_simulate,
    "analyze": _cmd_analyze,
    "km": _cmd_km,
    "bench": _cmd_bench,
    "reproduce-table2": _cmd_reproduce_table2,
    "reproduce-table3": _cmd_reproduce_table3,
    "fetch-stanford": _cmd_fetch_stanford,
}


def run(config: RunConfig) -> int:
    """Execute one RunConfig; returns the process exit code.

    Declared outputs that appear (or change) during a failing run are
    removed so a nonzero exit never leaves partial files behind.
    """
    before: dict[str, float | None] = {}
    for path in config.outputs:
        try:
            before[path] = os.stat(path).st_mtime_ns
        except OSError:
            before[path] = None
    try:
        handler = _DISPATCH[config.command]
    except KeyError:
        print(f"{PROG}: unknown command {config.command!r}", file=sys.stderr)
        return EXIT_INPUT
    try:
        handler(config.payload)
        return EXIT_OK
    except ImtkitError as exc:
        for path in config.outputs:
            for candidate in (path, f"{path}.part"):
                try:
                    st = os.stat(candidate).st_mtime_ns
                except OSError:
                    continue
                if candidate.endswith(".part") or st != before[path]:
                    os.unlink(candidate)
        code = EXIT_ESTIMATION if isinstance(exc, EstimationError) else EXIT_INPUT
        print(f"{PROG}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return EXIT_INPUT


# ---------------------------------------------------------------------------
# argument parsing


def _add_data_args(sp) -> None:
    sp.add_argument("--data", required=True, help="input CSV file")
    sp.add_argument(
        "--mapping", default="subjects",
        help="column mapping: 'subjects' (this tool's own CSV schema), "
             "'stanford', or a JSON mapping file (default: subjects)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog=PROG,
        description="Survival analysis under immortal-time bias: "
                    "simulation, accommodation methods, benchmarks.")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="generate a synthetic cohort CSV")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--scenario", type=int, help="standard scenario id (1-6)")
    g.add_argument("--config", help="JSON scenario file")
    sp.add_argument("--n", type=int, help="override cohort size")
    sp.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    sp.add_argument("--replicate", type=int, default=0,
                    help="replicate index within the seed stream (default 0)")
    sp.add_argument("--out", required=True, help="output subjects CSV")

    sp = sub.add_parser("analyze", help="run one method on one dataset")
    _add_data_args(sp)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--method", choices=(
        "include_imt", "exclude_imt", "ptdm", "landmark", "time_varying",
        "sequential", "cloning"))
    g.add_argument("--method-config", help="JSON method file")
    sp.add_argument("--landmark-time", type=float, dest="landmark_time")
    sp.add_argument("--grace-end", type=float, dest="grace_end")
    sp.add_argument("--window-width", type=float, dest="window_width")
    sp.add_argument("--trial-count", type=int, dest="trial_count")
    sp.add_argument("--adherence", choices=("itt_like", "pp"), default="pp")
    sp.add_argument("--ptdm-source", choices=("observed", "uniform_grace"),
                    default="observed", dest="ptdm_source")
    sp.add_argument("--method-seed", type=int, default=0, dest="method_seed",
                    help="seed for methods with internal randomness (ptdm)")
    sp.add_argument("--out", help="write the coefficient table CSV here")

    sp = sub.add_parser("km", help="Kaplan-Meier curves as CSV + SVG")
    _add_data_args(sp)
    sp.add_argument("--group", default=TREAT,
                    help=f"grouping covariate (default: {TREAT})")
    sp.add_argument("--pooled", action="store_true",
                    help="single pooled curve, no grouping")
    sp.add_argument("--title", default="Kaplan-Meier survival")
    sp.add_argument("--out-csv", required=True, dest="out_csv")
    sp.add_argument("--out-svg", required=True, dest="out_svg")

    sp = sub.add_parser("bench", help="replicated simulation benchmark")
    sp.add_argument("--config", required=True, help="JSON bench file")
    sp.add_argument("--parallelism", type=int, help="worker processes")
    sp.add_argument("--out", required=True, help="output metrics CSV")

    sp = sub.add_parser("reproduce", help="canned replication runs")
    rsub = sp.add_subparsers(dest="target", required=True)

    rp = rsub.add_parser("table2", help="simulation comparison, 6 scenarios")
    rp.add_argument("--replicates", type=int, default=200)
    rp.add_argument("--seed", type=int, default=20240801)
    rp.add_argument("--parallelism", type=int, default=1)
    rp.add_argument("--out", required=True, help="output metrics CSV")

    rp = rsub.add_parser("table3", help="Stanford heart transplant re-analysis")
    rp.add_argument("--data", required=True, help="Stanford CSV (see fetch-stanford)")
    rp.add_argument("--method",
                    help="restrict to one method kind (e.g. include-imt, landmark)")
    rp.add_argument("--seed", type=int, default=0, help="seed for the ptdm row")
    rp.add_argument("--out", required=True, help="output coefficient-table CSV")

    sp = sub.add_parser("fetch-stanford",
                        help="download the public Stanford heart transplant CSV")
    sp.add_argument("--out", required=True, help="destination CSV path")

    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    payload = {k: v for k, v in vars(args).items() if k not in ("command", "target")}
    command = args.command
    if command == "reproduce":
        command = f"reproduce-{args.target}"
    outputs = tuple(
        payload[k] for k in ("out", "out_csv", "out_svg")
        if payload.get(k) is not None)
    return RunConfig(command=command, payload=payload, outputs=outputs)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return run(config_from_args(args))


if __name__ == "__main__":
    sys.exit(main())
