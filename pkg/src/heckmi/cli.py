"""Command line front end.

Four commands: ``impute`` fills a CSV's missing outcomes and writes estimate
and coefficient tables, ``simulate`` runs a Monte Carlo study grid,
``validate`` scores earlier estimates against later-reported values, and
``report`` renders the metric CSVs as aligned text tables.

Jobs are declared in a YAML config file; command line flags override config
values. All randomness flows from the single master seed in the job, so a
rerun with the same config is byte-identical, whatever ``--threads`` says.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np
import scipy

import heckmi

from .data import DesignSpec, Variable, VariableSchema, load_csv
from .errors import ConfigError, ConvergenceError, DataError, NumericError
from .impute import METHODS, MethodConfig
from .kernels import BACKEND
from .simulate import (MECHANISMS, ScenarioConfig, _pred_metrics,
                       apply_method, run_scenario)
from .stats import RngStream
from .stepwise import prune_insignificant, stepwise_aic

FLOAT_FMT = ".10g"


def _fmt(value):
    """CSV cell for a value; empty for missing/None/NaN."""
    if value is None:
        return ""
    if isinstance(value, float) and math.isnan(value):
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), FLOAT_FMT)
    return str(value)


def _write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _load_config(path):
    import yaml
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse config {path}: {err}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    return cfg


def _check_keys(section, allowed, where):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(allowed))}")


def _ensure_outdir(out):
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"cannot create output directory {out}: {err}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _build_schema(section):
    if not isinstance(section, dict):
        raise ConfigError("schema section must be a mapping")
    _check_keys(section, ("outcome", "categorical", "continuous", "group"),
                "schema")
    if "outcome" not in section:
        raise ConfigError("schema needs an outcome column name")
    variables = [Variable(str(section["outcome"]), "continuous",
                          role="outcome")]
    cat = section.get("categorical") or []
    if isinstance(cat, dict):
        for name, levels in cat.items():
            levels = tuple(str(lv) for lv in levels) if levels else None
            variables.append(Variable(str(name), "categorical", levels=levels))
    else:
        for name in cat:
            variables.append(Variable(str(name), "categorical"))
    for name in section.get("continuous") or []:
        variables.append(Variable(str(name), "continuous"))
    group = section.get("group")
    if group is not None:
        group = str(group)
        have = {v.name: v for v in variables}
        if group in have:
            v = have[group]
            if v.role == "outcome":
                raise ConfigError("group key cannot be the outcome")
            variables = [Variable(v.name, v.kind, v.levels, "group")
                         if v.name == group else v for v in variables]
        else:
            variables.append(Variable(group, "categorical", role="group"))
    return VariableSchema(variables), group


def _build_methods(entries, override_names):
    if override_names:
        entries = list(override_names)
    if not entries:
        raise ConfigError("no methods configured; use the methods section "
                          "or --method")
    out = []
    for entry in entries:
        if isinstance(entry, str):
            out.append(MethodConfig(entry))
        elif isinstance(entry, dict):
            _check_keys(entry, ("method", "m", "donors", "trees", "min_leaf"),
                        "method")
            if "method" not in entry:
                raise ConfigError("each methods entry needs a method name")
            out.append(MethodConfig(**entry))
        else:
            raise ConfigError(f"bad methods entry: {entry!r}")
    names = [mc.method for mc in out]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate method in job")
    return tuple(out)


def _build_design(section):
    if not isinstance(section, dict):
        raise ConfigError("design section must be a mapping")
    _check_keys(section, ("outcome", "selection"), "design")
    outcome = tuple(str(c) for c in section.get("outcome") or ())
    selection = tuple(str(c) for c in section.get("selection") or ())
    return DesignSpec(outcome_covariates=outcome,
                      selection_covariates=selection)


def _resolve_design(ds, cfgd):
    """DesignSpec from the config: explicit lists or a stepwise search."""
    design = cfgd.get("design")
    sw = cfgd.get("stepwise")
    if design is not None and sw is not None:
        raise ConfigError("give either a design section or a stepwise "
                          "section, not both")
    if design is not None:
        return _build_design(design), None
    if sw is None:
        raise ConfigError("config needs a design or a stepwise section")
    _check_keys(sw, ("candidates", "start", "prune_alpha"), "stepwise")
    candidates = tuple(str(c) for c in sw.get("candidates") or ())
    if not candidates:
        raise ConfigError("stepwise needs a candidates list")
    start = tuple(str(c) for c in sw.get("start") or ())
    trace_out = stepwise_aic(ds, candidates, "linear", start=start)
    trace_sel = stepwise_aic(ds, candidates, "probit", start=start)
    spec = DesignSpec(outcome_covariates=trace_out.final_spec,
                      selection_covariates=trace_sel.final_spec)
    alpha = sw.get("prune_alpha")
    if alpha is not None:
        spec = prune_insignificant(ds, spec, "linear", alpha=float(alpha))
        spec = prune_insignificant(ds, spec, "probit", alpha=float(alpha))
    detail = {"outcome_steps": [(s.action, s.covariate) for s in trace_out.steps],
              "selection_steps": [(s.action, s.covariate) for s in trace_sel.steps]}
    return spec, detail


def _write_manifest(out, command, config_echo, seed):
    manifest = {
        "command": command,
        "config": config_echo,
        "seed": seed,
        "backend": BACKEND,
        "versions": {
            "heckmi": heckmi.__version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    with open(os.path.join(out, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _spec_echo(spec):
    return {"outcome": list(spec.outcome_covariates),
            "selection": list(spec.selection_covariates)}


def cmd_impute(args):
    cfgd = _load_config(args.config)
    _check_keys(cfgd, ("input", "schema", "design", "stepwise", "methods",
                       "seed", "out", "threads"), "config")
    if "input" not in cfgd:
        raise ConfigError("config needs an input CSV path")
    if "schema" not in cfgd:
        raise ConfigError("config needs a schema section")
    seed = args.seed if args.seed is not None else int(cfgd.get("seed", 0))
    out = _ensure_outdir(args.out or cfgd.get("out") or ".")
    schema, group_key = _build_schema(cfgd["schema"])
    methods = _build_methods(cfgd.get("methods") or [], args.method)

    ds = load_csv(cfgd["input"], schema)
    if ds.n0 == 0:
        raise DataError(f"{cfgd['input']}: no missing outcomes to impute")
    spec, sw_detail = _resolve_design(ds, cfgd)
    if any(mc.method == "Median" for mc in methods) and group_key is None:
        raise ConfigError("the Median method needs a schema group key")

    est_rows, coef_rows = [], []
    for idx, mc in enumerate(methods):
        rng = RngStream(seed).child(idx)
        try:
            param, plist, names = apply_method(ds, spec, mc, rng, group_key)
        except (DataError, NumericError, ConvergenceError) as err:
            raise type(err)(f"method {mc.method}: {err}") from err
        for p in plist:
            if math.isnan(p.lower):
                length = rel = lo = hi = None
            else:
                lo, hi = p.lower, p.upper
                length = hi - lo
                rel = 100.0 * length / p.y_hat if p.y_hat != 0 else None
            est_rows.append((p.row_id, mc.method, p.y_hat, lo, hi,
                             length, rel))
        if param is not None:
            for name, est, se, lo, hi in zip(names, param.theta, param.se,
                                             param.ci_lower, param.ci_upper):
                coef_rows.append((mc.method, name, est, se, lo, hi))

    _write_table(os.path.join(out, "estimates.csv"),
                 ("row_id", "method", "y_hat", "pi_lower", "pi_upper",
                  "pi_length", "rel_pi"), est_rows)
    _write_table(os.path.join(out, "coefficients.csv"),
                 ("method", "coefficient", "estimate", "se",
                  "ci_lower", "ci_upper"), coef_rows)
    echo = {"input": cfgd["input"], "schema": cfgd["schema"],
            "design": _spec_echo(spec),
            "methods": [mc.method for mc in methods]}
    if sw_detail is not None:
        echo["stepwise"] = sw_detail
    _write_manifest(out, "impute", echo, seed)
    print(f"impute: {len(est_rows)} estimates, {len(methods)} methods, "
          f"{ds.n0} missing rows -> {out}")
    return 0


def _scenario_cells(cfgd):
    """Expand the config into per-cell kwargs for ScenarioConfig."""
    if "scenarios" in cfgd:
        cells = []
        for sc in cfgd["scenarios"]:
            if not isinstance(sc, dict) or "mechanism" not in sc:
                raise ConfigError("each scenarios entry needs a mechanism")
            _check_keys(sc, ("mechanism", "rho", "sigma2", "c", "slope",
                             "deterministic_threshold"), "scenario")
            cell = {"mechanism": str(sc["mechanism"]),
                    "sigma2_eps": float(sc.get("sigma2", 1.0))}
            for key in ("rho", "c", "slope", "deterministic_threshold"):
                if key in sc:
                    cell[key] = sc[key]
            cells.append(cell)
        return cells
    mechanisms = cfgd.get("mechanisms") or list(MECHANISMS)
    sigma2 = cfgd.get("sigma2") or [1.0]
    return [{"mechanism": str(m), "sigma2_eps": float(s)}
            for m in mechanisms for s in sigma2]


PARAM_HEADER = ("mechanism", "sigma2", "method", "coefficient", "n_used",
                "mean", "rbias_pct", "se_emp", "se_model", "re_se_pct",
                "cr_pct", "rmse", "absolute_bias", "failures")
PRED_HEADER = ("mechanism", "sigma2", "method", "n_used", "re_pct", "rmse",
               "cr_pct", "pi_length", "zero_excluded", "failures",
               "mean_missing_rate")


def cmd_simulate(args):
    cfgd = _load_config(args.config)
    _check_keys(cfgd, ("scenarios", "mechanisms", "sigma2", "replications",
                       "n_rows", "methods", "seed", "out", "threads",
                       "sector_key", "design", "seed_rho",
                       "seed_outcome_coefs", "seed_selection_coefs"),
                "config")
    seed = args.seed if args.seed is not None else cfgd.get("seed")
    if seed is None:
        raise ConfigError("simulate needs an explicit seed (config key "
                          "'seed' or --seed); there is no wall-clock default")
    seed = int(seed)
    out = _ensure_outdir(args.out or cfgd.get("out") or ".")
    threads = args.threads if args.threads is not None \
        else int(cfgd.get("threads", 1))
    methods = _build_methods(cfgd.get("methods") or list(METHODS), args.method)

    shared = {"replications": int(cfgd.get("replications", 100)),
              "n_rows": int(cfgd.get("n_rows", 2000)),
              "seed": seed, "methods": methods,
              "sector_key": str(cfgd.get("sector_key", "Sector"))}
    if "design" in cfgd:
        shared["spec"] = _build_design(cfgd["design"])
    for key in ("seed_rho", "seed_outcome_coefs", "seed_selection_coefs"):
        if key in cfgd:
            shared[key] = cfgd[key]

    cells = _scenario_cells(cfgd)
    param_rows, pred_rows = [], []
    raw_param_rows, raw_pred_rows = [], []
    for cell in cells:
        cfg = ScenarioConfig(**cell, **shared)
        results, report = run_scenario(cfg, workers=threads)
        mech, s2 = cell["mechanism"], cell["sigma2_eps"]
        mean_missing = float(np.mean([r.missing_rate for r in results]))
        for mc in cfg.methods:
            name = mc.method
            fails = report.failures.get(name, 0)
            if fails:
                print(f"{mech} sigma2={s2}: {name} failed in {fails} "
                      f"replication(s)", file=sys.stderr)
            if report.parameters and name in report.parameters:
                d = report.parameters[name]
                for j, coef in enumerate(report.column_names):
                    param_rows.append((mech, s2, name, coef, d["n_used"],
                                       d["mean"][j], d["rbias"][j],
                                       d["se_e"][j], d["se_m"][j],
                                       d["re_se"][j], d["cr"][j],
                                       d["rmse"][j],
                                       bool(d["absolute_bias"][j]), fails))
            if name in report.predictions:
                d = report.predictions[name]
                pred_rows.append((mech, s2, name, d["n_used"], d["re"],
                                  d["rmse"], d["cr"], d["pi"],
                                  d["zero_excluded"], fails, mean_missing))
        if args.keep_raw:
            for res in results:
                for name, rec in res.params.items():
                    for j, coef in enumerate(report.column_names):
                        raw_param_rows.append(
                            (mech, s2, res.replication_id, name, coef,
                             rec.theta[j], rec.se[j], rec.ci_lower[j],
                             rec.ci_upper[j]))
                for name, rec in res.preds.items():
                    d = _pred_metrics([rec])
                    raw_pred_rows.append(
                        (mech, s2, res.replication_id, name,
                         rec.row_ids.shape[0], d["re"], d["rmse"],
                         d["cr"], d["pi"], res.missing_rate))

    _write_table(os.path.join(out, "params_metrics.csv"), PARAM_HEADER,
                 param_rows)
    _write_table(os.path.join(out, "pred_metrics.csv"), PRED_HEADER,
                 pred_rows)
    if args.keep_raw:
        _write_table(os.path.join(out, "raw_params.csv"),
                     ("mechanism", "sigma2", "replication", "method",
                      "coefficient", "estimate", "se", "ci_lower",
                      "ci_upper"), raw_param_rows)
        _write_table(os.path.join(out, "raw_preds.csv"),
                     ("mechanism", "sigma2", "replication", "method",
                      "n_missing", "re_pct", "rmse", "cr_pct", "pi_length",
                      "missing_rate"), raw_pred_rows)
    echo = {"cells": cells, "replications": shared["replications"],
            "n_rows": shared["n_rows"],
            "methods": [mc.method for mc in methods],
            "sector_key": shared["sector_key"]}
    if "spec" in shared:
        echo["design"] = _spec_echo(shared["spec"])
    _write_manifest(out, "simulate", echo, seed)
    print(f"simulate: {len(cells)} cells x {shared['replications']} "
          f"replications, {len(methods)} methods -> {out}")
    return 0


def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return rows


def _corr(a, b):
    if a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def cmd_validate(args):
    import scipy.stats as sps

    est_rows = _read_rows(args.estimates)
    rep_rows = _read_rows(args.reported)
    key, value = args.key, args.value
    for name, rows, path in ((key, est_rows, args.estimates),
                             (key, rep_rows, args.reported),
                             (value, rep_rows, args.reported)):
        if name not in rows[0]:
            raise DataError(f"{path}: missing column {name!r}")
    reported = {}
    for row in rep_rows:
        cell = row[value].strip()
        if cell != "":
            reported[row[key]] = float(cell)

    by_method = {}
    for row in est_rows:
        if row[key] in reported:
            by_method.setdefault(row["method"], []).append(row)
    if not any(by_method.values()):
        raise DataError("no rows joined; check the key columns")

    out_rows = []
    for method, rows in by_method.items():
        y = np.array([reported[r[key]] for r in rows])
        yhat = np.array([float(r["y_hat"]) for r in rows])
        err = yhat - y
        nonzero = y != 0
        re = 100.0 * np.abs(err[nonzero] / y[nonzero])
        has_pi = np.array([r["pi_lower"] != "" for r in rows])
        cr = pi = None
        if has_pi.any():
            lo = np.array([float(r["pi_lower"]) for r, h in zip(rows, has_pi) if h])
            hi = np.array([float(r["pi_upper"]) for r, h in zip(rows, has_pi) if h])
            yv = y[has_pi]
            cr = 100.0 * float(np.mean((lo <= yv) & (yv <= hi)))
            pi = float(np.mean(hi - lo))
        spearman = None
        if y.std() > 0 and yhat.std() > 0:
            spearman = float(sps.spearmanr(yhat, y).statistic)
        out_rows.append((method, len(rows),
                         float(re.min()) if re.size else None,
                         float(re.mean()) if re.size else None,
                         float(re.max()) if re.size else None,
                         float(np.sqrt(np.mean(err ** 2))),
                         cr, pi, _corr(yhat, y), spearman))

    out = _ensure_outdir(args.out or ".")
    _write_table(os.path.join(out, "validation.csv"),
                 ("method", "n", "re_min", "re_mean", "re_max", "rmse",
                  "cr_pct", "pi_length", "pearson", "spearman"), out_rows)
    print(f"validate: {len(out_rows)} methods against "
          f"{len(reported)} reported values -> {out}")
    return 0


def _text_table(rows, header):
    widths = [max(len(str(h)), *(len(r[i]) for r in rows)) if rows
              else len(str(h)) for i, h in enumerate(header)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)


def _report_cell(row, col, digits=2):
    cell = row.get(col, "")
    if cell == "":
        return "-"
    try:
        return format(float(cell), f".{digits}f")
    except ValueError:
        return cell


def cmd_report(args):
    sections = []
    params_path = os.path.join(args.results, "params_metrics.csv")
    if os.path.exists(params_path):
        rows = _read_rows(params_path)
        coefs = args.coefficient or sorted({r["coefficient"] for r in rows})
        for coef in coefs:
            sub = [r for r in rows if r["coefficient"] == coef]
            if not sub:
                raise DataError(f"coefficient {coef!r} not in {params_path}")
            body = [[r["mechanism"], r["sigma2"], r["method"], r["n_used"],
                     _report_cell(r, "mean", 4), _report_cell(r, "rbias_pct"),
                     _report_cell(r, "se_emp", 4), _report_cell(r, "se_model", 4),
                     _report_cell(r, "re_se_pct"), _report_cell(r, "cr_pct"),
                     _report_cell(r, "rmse", 4)] for r in sub]
            sections.append(f"Coefficient: {coef}\n" + _text_table(
                body, ("mechanism", "sigma2", "method", "n", "mean",
                       "rbias%", "se_emp", "se_model", "re_se%", "cr%",
                       "rmse")))
    pred_path = os.path.join(args.results, "pred_metrics.csv")
    if os.path.exists(pred_path):
        rows = _read_rows(pred_path)
        body = [[r["mechanism"], r["sigma2"], r["method"], r["n_used"],
                 _report_cell(r, "re_pct"), _report_cell(r, "rmse", 4),
                 _report_cell(r, "cr_pct"), _report_cell(r, "pi_length"),
                 r["failures"]] for r in rows]
        sections.append("Predictions for missing rows\n" + _text_table(
            body, ("mechanism", "sigma2", "method", "n", "re%", "rmse",
                   "cr%", "pi", "failures")))
    val_path = os.path.join(args.results, "validation.csv")
    if os.path.exists(val_path):
        rows = _read_rows(val_path)
        body = [[r["method"], r["n"], _report_cell(r, "re_min"),
                 _report_cell(r, "re_mean"), _report_cell(r, "re_max"),
                 _report_cell(r, "rmse", 4), _report_cell(r, "cr_pct"),
                 _report_cell(r, "pi_length"), _report_cell(r, "pearson", 4),
                 _report_cell(r, "spearman", 4)] for r in rows]
        sections.append("Retrospective validation\n" + _text_table(
            body, ("method", "n", "re_min", "re_mean", "re_max", "rmse",
                   "cr%", "pi", "pearson", "spearman")))
    if not sections:
        raise DataError(f"no metric CSVs found in {args.results}")

    out = _ensure_outdir(args.out or args.results)
    path = os.path.join(out, "report.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n\n".join(sections))
        fh.write("\n")
    print(f"report: {len(sections)} table(s) -> {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="heckmi",
        description="Selection-model-based imputation for missing-not-at-"
                    "random outcomes: impute, simulate, validate, report.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="YAML job file")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (overrides config)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker process cap (never changes results)")
        p.add_argument("--method", action="append", default=None,
                       metavar="NAME",
                       help="restrict to this method (repeatable)")

    p_imp = sub.add_parser("impute", help="impute a CSV's missing outcomes")
    common(p_imp)
    p_imp.set_defaults(func=cmd_impute)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    common(p_sim)
    p_sim.add_argument("--keep-raw", action="store_true",
                       help="also write per-replication records")
    p_sim.set_defaults(func=cmd_simulate)

    p_val = sub.add_parser("validate",
                           help="score estimates against later-reported values")
    p_val.add_argument("--estimates", required=True,
                       help="estimates.csv from an impute run")
    p_val.add_argument("--reported", required=True,
                       help="CSV with the later-reported outcomes")
    p_val.add_argument("--key", default="row_id", help="join column")
    p_val.add_argument("--value", default="reported",
                       help="reported-value column")
    p_val.add_argument("--out", default=None)
    p_val.set_defaults(func=cmd_validate)

    p_rep = sub.add_parser("report", help="render metric CSVs as text tables")
    p_rep.add_argument("--results", required=True,
                       help="directory with metric CSVs")
    p_rep.add_argument("--coefficient", action="append", default=None,
                       help="coefficient table filter (repeatable)")
    p_rep.add_argument("--out", default=None)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except (NumericError, ConvergenceError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
