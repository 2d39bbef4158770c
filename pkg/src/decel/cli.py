"""Command-line interface.

Exit codes: 0 success, 2 input error (files, selectors, config), 3 numeric
failure (non-converged fit).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hmd import (
    ExtractionError,
    HMDParseError,
    extract_cohort_table,
    extract_period_table,
    parse_hmd_file,
)
from .model import DomainError, ModelParams, PenaltyConfig
from .optimize import FitError, SearchBox, fit_map, fit_ml, profile_curve
from .simulate import (
    format_value,
    load_scenarios,
    run_scenario,
    summaries_to_csv,
    worker_count,
)

logger = logging.getLogger("decel")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

FIT_COLUMNS = [
    "method", "a", "b", "sigma2", "loglik", "penalized_loglik", "mse",
    "se_a", "se_b", "se_sigma2", "ci_sigma2_lower", "ci_sigma2_upper",
    "deceleration", "converged", "evaluations",
]
FULL_SCALE_REPLICATIONS = 2000


class InputError(Exception):
    pass


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row.get(c)) for c in columns])
    return buf.getvalue()


def _load_table(deaths, exposures, year, sex, start_age, cohort=False):
    try:
        d = parse_hmd_file(deaths, "deaths")
        e = parse_hmd_file(exposures, "exposures")
        extract = extract_cohort_table if cohort else extract_period_table
        return extract(d, e, year, sex, start_age)
    except (OSError, HMDParseError, ExtractionError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def _penalty(args) -> PenaltyConfig:
    try:
        return PenaltyConfig(lam=args.lam)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _fit_both(table, cfg, seed):
    ml = fit_ml(table, seed=seed)
    mp = fit_map(table, cfg, seed=seed)
    return ml, mp


# --------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    table = _load_table(args.deaths, args.exposures, args.year, args.sex,
                        args.start_age, args.cohort)
    cfg = _penalty(args)
    ml, mp = _fit_both(table, cfg, args.seed)
    rows = [ml.as_dict(), mp.as_dict()]
    if args.format == "json":
        text = json.dumps([{k: _json_value(r[k]) for k in FIT_COLUMNS} for r in rows],
                          indent=2) + "\n"
    else:
        text = _csv(rows, FIT_COLUMNS)
    _emit(text, args.out)
    if not (ml.converged and mp.converged):
        logger.error("fit did not converge")
        return EXIT_NUMERIC
    return EXIT_OK


def _json_value(v):
    if isinstance(v, str):
        return v
    if v is None or isinstance(v, (bool, np.bool_)):
        return None if v is None else bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(format_value(v)) if np.isfinite(v) else None


def cmd_simulate(args) -> int:
    try:
        scenarios = load_scenarios(
            args.scenarios,
            replications=FULL_SCALE_REPLICATIONS if args.full_scale else args.replications,
            master_seed=args.seed,
        )
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(str(exc)) from exc
    cfg = _penalty(args)
    summaries = []
    for sc in scenarios:
        logger.info("running %s (%d replications)", sc.name, sc.replications)
        s = run_scenario(sc, cfg, workers=worker_count(), max_failure_rate=1.0)
        for method, failed in s.n_failed.items():
            if failed > 0.1 * sc.replications:
                logger.warning("%s: %d %s fits failed", sc.name, failed, method)
        summaries.append(s)
    _emit(summaries_to_csv(summaries), args.out)
    return EXIT_OK


@dataclass
class Population:
    label: str
    deaths: str
    exposures: str
    year: int
    sex: str
    start_age: int
    cohort: bool


def _parse_years(text: str) -> list:
    years = []
    for part in text.replace(",", ";").split(";"):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-"))
            years.extend(range(lo, hi + 1))
        else:
            years.append(int(part))
    return years


def read_manifest(path, default_start_age: int = 70) -> list:
    """Expand a manifest CSV into one entry per (population, year, sex).

    Columns: ``label, deaths, exposures, years, sexes`` and optionally
    ``start_age`` and ``cohort``.  Years use ``1960;1980`` or ``1950-2019``,
    sexes ``f;m``.  Relative paths resolve against the manifest directory.
    """
    base = Path(path).parent
    pops = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"label", "deaths", "exposures", "years", "sexes"} - set(reader.fieldnames or [])
        if missing:
            raise InputError(f"manifest lacks columns: {', '.join(sorted(missing))}")
        for row in reader:
            start = int(row.get("start_age") or default_start_age)
            cohort = (row.get("cohort") or "").strip().lower() in ("1", "true", "yes")
            for year in _parse_years(row["years"]):
                for sex in row["sexes"].replace(",", ";").split(";"):
                    if sex.strip():
                        pops.append(Population(
                            row["label"], str(base / row["deaths"]),
                            str(base / row["exposures"]), year, sex.strip(), start, cohort,
                        ))
    return pops


BATCH_COLUMNS = [
    "label", "year", "sex", "ml_sigma2", "ml_ci_lower", "ml_ci_upper", "ml_mse",
    "map_sigma2", "map_mse", "better_fit", "ml_significant", "map_positive", "agree",
]


def ml_significant(fit) -> bool:
    """ML detects heterogeneity when its 95% Wald interval excludes 0."""
    return fit.ci_sigma2 is not None and fit.ci_sigma2[0] > 0


def compare_fits(ml, mp) -> dict:
    ml_sig = ml_significant(ml)
    ci = ml.ci_sigma2 or (None, None)
    return {
        "ml_sigma2": ml.params.sigma2,
        "ml_ci_lower": ci[0],
        "ml_ci_upper": ci[1],
        "ml_mse": ml.mse,
        "map_sigma2": mp.params.sigma2,
        "map_mse": mp.mse,
        "better_fit": "MAP" if mp.mse < ml.mse else "ML",
        "ml_significant": ml_sig,
        "map_positive": mp.deceleration_detected,
        "agree": ml_sig == mp.deceleration_detected,
    }


def compare_population(table, cfg, seed) -> dict:
    return compare_fits(*_fit_both(table, cfg, seed))


def cmd_batch_compare(args) -> int:
    try:
        pops = read_manifest(args.manifest, args.start_age)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    if not pops:
        raise InputError("manifest lists no populations")
    cfg = _penalty(args)
    rows, skipped = [], []
    for p in pops:
        try:
            table = _load_table(p.deaths, p.exposures, p.year, p.sex, p.start_age, p.cohort)
            row = compare_population(table, cfg, args.seed)
        except (InputError, FitError) as exc:
            skipped.append((f"{p.label} {p.year} {p.sex}", str(exc)))
            logger.warning("skipped %s: %s", *skipped[-1])
            continue
        rows.append({"label": p.label, "year": p.year, "sex": p.sex, **row})
    if not rows:
        for name, reason in skipped:
            print(f"{name}: {reason}", file=sys.stderr)
        return EXIT_INPUT
    agree = sum(r["agree"] for r in rows) / len(rows)
    map_better = sum(r["better_fit"] == "MAP" for r in rows)
    text = _csv(rows, BATCH_COLUMNS)
    text += "\nsummary,value\n"
    text += f"populations,{len(rows)}\n"
    text += f"skipped,{len(skipped)}\n"
    text += f"agreement,{format_value(agree)}\n"
    text += f"map_better_fit,{map_better}\n"
    if skipped:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["skipped_population", "reason"])
        w.writerows(skipped)
        text += "\n" + buf.getvalue()
    _emit(text, args.out)
    return EXIT_OK


def parse_grid(text: str) -> np.ndarray:
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise InputError(f"grid must look like LO:HI:N, got {text!r}") from None
    if n < 1 or hi < lo or (n > 1 and hi == lo):
        raise InputError(f"invalid grid {text!r}")
    return np.linspace(lo, hi, n)


def cmd_profile(args) -> int:
    grid = parse_grid(args.grid)
    table = _load_table(args.deaths, args.exposures, args.year, args.sex,
                        args.start_age, args.cohort)
    cfg = _penalty(args)
    given = [args.a, args.b, args.sigma2]
    if all(v is not None for v in given):
        try:
            theta = ModelParams(*given)
        except DomainError as exc:
            raise InputError(str(exc)) from exc
    elif any(v is not None for v in given):
        raise InputError("give all of --a, --b, --sigma2 or none")
    else:
        theta = fit_ml(table, seed=args.seed, with_se=False).params
    try:
        curve = profile_curve(table, theta, args.param, grid, lam=cfg.lam,
                              profile=not args.slice, box=SearchBox())
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    rows = [{args.param: v, "loglik": ll, "penalized_loglik": lp} for v, ll, lp in curve]
    _emit(_csv(rows, [args.param, "loglik", "penalized_loglik"]), args.out)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_population_args(p, required=True):
    p.add_argument("--deaths", required=required, help="HMD deaths 1x1 file")
    p.add_argument("--exposures", required=required, help="HMD exposures 1x1 file")
    p.add_argument("--year", type=int, required=required,
                   help="calendar year (birth year with --cohort)")
    p.add_argument("--sex", default="f", choices=["f", "m", "t"])
    p.add_argument("--start-age", type=int, default=70)
    p.add_argument("--cohort", action="store_true", help="files use the cohort layout")


def _add_common(p):
    p.add_argument("--lambda", dest="lam", type=float, default=0.5, help="penalty weight")
    p.add_argument("--seed", type=int, default=1, help="optimizer seed")
    p.add_argument("--out", help="output path (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decel", description="Detect mortality deceleration with ML and MAP "
                                  "gamma-Gompertz fits.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one population by ML and MAP")
    _add_population_args(p)
    _add_common(p)
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="Monte Carlo bias/SD study")
    p.add_argument("--scenarios", required=True, help="INI file of scenarios")
    p.add_argument("--replications", type=int, help="override replications per scenario")
    p.add_argument("--full-scale", action="store_true",
                   help=f"use {FULL_SCALE_REPLICATIONS} replications per scenario")
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--seed", type=int, help="override master seed of every scenario")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("batch-compare", help="compare ML and MAP across populations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--start-age", type=int, default=70)
    _add_common(p)
    p.set_defaults(func=cmd_batch_compare)

    p = sub.add_parser("profile", help="profile or slice likelihood curves")
    _add_population_args(p)
    _add_common(p)
    p.add_argument("--param", choices=["a", "b", "sigma2"], required=True)
    p.add_argument("--grid", required=True, help="LO:HI:N")
    p.add_argument("--slice", action="store_true",
                   help="hold the other parameters fixed instead of re-maximizing")
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--sigma2", type=float)
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"decel {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FitError as exc:
        print(f"decel {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
