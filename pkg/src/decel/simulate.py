"""Lifetime sampling, life-table construction and the Monte Carlo harness."""
from __future__ import annotations

import configparser
import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .model import LifeTable, ModelParams, PenaltyConfig
from .optimize import DEConfig, FitError, SearchBox, fit_map, fit_ml

logger = logging.getLogger(__name__)

PARAMETERS = ("a", "b", "sigma2")
METHODS = ("ML", "MAP")


def worker_count(default: int = 1) -> int:
    """Worker cap from ``DECEL_THREADS`` (falls back to ``default``)."""
    raw = os.environ.get("DECEL_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"DECEL_THREADS must be an integer, got {raw!r}") from None


# --------------------------------------------------------------------------
# sampling


def inverse_survival(u, params: ModelParams):
    """Age x with gg_survival(x) = u, for u in (0, 1]."""
    u = np.asarray(u, dtype=float)
    a, b, s = params.a, params.b, params.sigma2
    log_u = np.log(u)
    if s == 0.0:
        return np.log1p(-(b / a) * log_u) / b
    return np.log1p((b / (a * s)) * np.expm1(-s * log_u)) / b


def sample_lifetimes(n: int, params: ModelParams, seed=None) -> np.ndarray:
    """Draw ``n`` gamma-Gompertz lifetimes by inversion."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    # 1 - U lies in (0, 1], keeping log finite
    u = 1.0 - rng.random(n)
    return inverse_survival(u, params)


def build_life_table(lifetimes, max_age: int = 120) -> LifeTable:
    """Aggregate individual lifetimes into single-year deaths and exposures.

    Exposure is exact fractional person-years.  Lifetimes reaching
    ``max_age + 1`` contribute exposure up to that age and are counted as
    censored rather than as deaths.
    """
    t = np.asarray(lifetimes, dtype=float)
    if t.ndim != 1:
        raise ValueError("lifetimes must be one-dimensional")
    if np.any(~np.isfinite(t)) or np.any(t <= 0):
        raise ValueError("lifetimes must be positive and finite")
    n_cells = max_age + 1
    horizon = float(n_cells)
    died = t < horizon
    t_cap = np.minimum(t, horizon)

    whole = np.floor(t_cap).astype(np.int64)
    deaths = np.bincount(whole[died], minlength=n_cells)[:n_cells].astype(float)

    # each life adds a full year to every cell below floor(t) plus the
    # fractional remainder to cell floor(t)
    full_years = np.bincount(np.minimum(whole, n_cells), minlength=n_cells + 1)
    exposures = (len(t) - np.cumsum(full_years)[:n_cells]).astype(float)
    partial = t_cap - whole
    inside = whole < n_cells
    exposures += np.bincount(whole[inside], weights=partial[inside], minlength=n_cells)[:n_cells]
    return LifeTable(0, deaths, exposures, censored=int((~died).sum()))


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class SimulationScenario:
    true_params: ModelParams
    sample_size: int = 10_000
    replications: int = 200
    max_age: int = 120
    master_seed: int = 20240101
    name: str = "scenario"

    def __post_init__(self):
        if self.sample_size < 1:
            raise ValueError("sample_size must be at least 1")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.max_age < 1:
            raise ValueError("max_age must be at least 1")

    @property
    def is_null(self) -> bool:
        return self.true_params.sigma2 == 0.0


def replication_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Seed stream of replication ``index``: SeedSequence([master_seed, index])."""
    return np.random.SeedSequence([int(master_seed), int(index)])


@dataclass(frozen=True)
class ReplicationRecord:
    index: int
    estimates: dict  # method -> 3-array, or None when the fit failed
    converged: dict  # method -> bool


@dataclass
class SimulationSummary:
    scenario: SimulationScenario
    bias: dict  # (method, parameter) -> float
    sd: dict
    n_converged: dict  # method -> int
    n_failed: dict
    n_positive: dict  # method -> replications with sigma2 > 0
    n_zero: dict
    records: list = field(default_factory=list, repr=False)

    def mean(self, method: str, parameter: str) -> float:
        truth = getattr(self.scenario.true_params, parameter)
        return self.bias[method, parameter] + truth


def run_replication(
    scenario: SimulationScenario,
    index: int,
    penalty_cfg: PenaltyConfig = PenaltyConfig(),
    box: SearchBox | None = None,
    de_config: DEConfig = DEConfig(),
) -> ReplicationRecord:
    sample_seq, ml_seq, map_seq = replication_seed(scenario.master_seed, index).spawn(3)
    lifetimes = sample_lifetimes(scenario.sample_size, scenario.true_params, sample_seq)
    table = build_life_table(lifetimes, scenario.max_age)
    estimates, converged = {}, {}
    for method, seq in (("ML", ml_seq), ("MAP", map_seq)):
        try:
            if method == "ML":
                fit = fit_ml(table, box, seed=seq, de_config=de_config, with_se=False)
            else:
                fit = fit_map(table, penalty_cfg, box, seed=seq, de_config=de_config,
                              with_se=False)
        except FitError as exc:
            logger.warning("%s replication %d %s fit failed: %s", scenario.name, index, method, exc)
            estimates[method], converged[method] = None, False
            continue
        estimates[method] = fit.params.as_array()
        converged[method] = fit.converged
    return ReplicationRecord(index, estimates, converged)


def _run_replication_args(args):
    return run_replication(*args)


def summarize(scenario: SimulationScenario, records: Iterable[ReplicationRecord]) -> SimulationSummary:
    """Aggregate replication records; order of ``records`` does not matter."""
    records = sorted(records, key=lambda r: r.index)
    truth = scenario.true_params.as_array()
    bias, sd, n_conv, n_fail, n_pos, n_zero = {}, {}, {}, {}, {}, {}
    for method in METHODS:
        ok = [r.estimates[method] for r in records if r.converged.get(method)]
        n_conv[method] = len(ok)
        n_fail[method] = len(records) - len(ok)
        est = np.array(ok, dtype=float).reshape(-1, 3)
        n_pos[method] = int(np.sum(est[:, 2] > 0))
        n_zero[method] = int(np.sum(est[:, 2] == 0))
        for j, name in enumerate(PARAMETERS):
            col = est[:, j]
            bias[method, name] = float(np.sum(col - truth[j]) / col.size) if col.size else np.nan
            sd[method, name] = float(np.std(col, ddof=1)) if col.size > 1 else np.nan
    return SimulationSummary(scenario, bias, sd, n_conv, n_fail, n_pos, n_zero, records)


def run_scenario(
    scenario: SimulationScenario,
    penalty_cfg: PenaltyConfig = PenaltyConfig(),
    box: SearchBox | None = None,
    de_config: DEConfig = DEConfig(),
    workers: Optional[int] = None,
    max_failure_rate: float = 0.10,
) -> SimulationSummary:
    """Run every replication of ``scenario`` and aggregate bias and SD.

    Replications are independent and may run on several processes; the
    summary is identical for any worker count.
    """
    workers = worker_count() if workers is None else workers
    jobs = [(scenario, r, penalty_cfg, box, de_config) for r in range(scenario.replications)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_replication_args, jobs, chunksize=4))
    else:
        records = [_run_replication_args(j) for j in jobs]
    summary = summarize(scenario, records)
    for method in METHODS:
        rate = summary.n_failed[method] / scenario.replications
        if rate > max_failure_rate:
            raise FitError(
                f"{scenario.name}: {summary.n_failed[method]} of {scenario.replications} "
                f"{method} fits failed"
            )
    return summary


def error_rates(summaries: Iterable[SimulationSummary], method: str = "MAP"):
    """Type I and type II error proportions of ``method``'s sigma2 verdict.

    Type I: share of null (sigma2 = 0) replications estimated with sigma2 > 0.
    Type II: share of alternative replications estimated with sigma2 = 0.
    """
    summaries = list(summaries)
    null = [s for s in summaries if s.scenario.is_null]
    alt = [s for s in summaries if not s.scenario.is_null]
    if not null or not alt:
        raise ValueError("need at least one null and one alternative scenario")
    null_total = sum(s.n_converged[method] for s in null)
    alt_total = sum(s.n_converged[method] for s in alt)
    if null_total == 0 or alt_total == 0:
        raise ValueError("no converged replications to count")
    type_i = sum(s.n_positive[method] for s in null) / null_total
    type_ii = sum(s.n_zero[method] for s in alt) / alt_total
    return type_i, type_ii


# --------------------------------------------------------------------------
# scenario files and CSV output


def load_scenarios(path, replications: Optional[int] = None,
                   master_seed: Optional[int] = None) -> list:
    """Read scenarios from an INI file, one section per scenario.

    Keys: ``a``, ``b``, ``sigma2`` (required), ``sample_size``,
    ``replications``, ``max_age``, ``seed``.  A ``[DEFAULT]`` section sets
    shared values.  The keyword arguments override every section.
    """
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    scenarios = []
    for name in parser.sections():
        sec = parser[name]
        try:
            params = ModelParams(sec.getfloat("a"), sec.getfloat("b"), sec.getfloat("sigma2", 0.0))
            scenarios.append(
                SimulationScenario(
                    true_params=params,
                    sample_size=sec.getint("sample_size", 10_000),
                    replications=replications or sec.getint("replications", 200),
                    max_age=sec.getint("max_age", 120),
                    master_seed=master_seed if master_seed is not None
                    else sec.getint("seed", 20240101),
                    name=name,
                )
            )
        except (TypeError, ValueError) as exc:
            raise ValueError(f"scenario [{name}]: {exc}") from exc
    if not scenarios:
        raise ValueError(f"{path}: no scenarios defined")
    return scenarios


def format_value(v) -> str:
    """Render a value for CSV output: 9 significant digits, blank when missing."""
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".9g")


def summaries_to_csv(summaries: list) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["scenario", "method", "parameter", "bias", "sd", "n_converged"])
    for s in summaries:
        for method in METHODS:
            for name in PARAMETERS:
                w.writerow([s.scenario.name, method, name, format_value(s.bias[method, name]),
                            format_value(s.sd[method, name]), s.n_converged[method]])
    null = any(s.scenario.is_null for s in summaries)
    alt = any(not s.scenario.is_null for s in summaries)
    if null and alt:
        type_i, type_ii = error_rates(summaries)
        w.writerow([])
        w.writerow(["rate", "value"])
        w.writerow(["type_I", format_value(type_i)])
        w.writerow(["type_II", format_value(type_ii)])
    return out.getvalue()
