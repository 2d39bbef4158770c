"""Reader for Human Mortality Database 1x1 deaths and exposures files.

Period files (``Deaths_1x1.txt``, ``Exposures_1x1.txt``) and cohort files
(``cExposures_1x1.txt`` and cohort deaths) share one layout::

    France, Exposure to risk (period 1x1), Total   Last modified: ...
    <blank>
      Year      Age       Female        Male       Total
      1960       70     1292.53     801.12     2093.65
      ...
      1960     110+        4.13       0.55        4.68

In cohort files the ``Year`` column is the birth year.  Missing values are
written as ``.``.  HMD marks territorial changes with ``1959-`` and
``1959+`` year tokens; the ``+`` rows (current territory) are kept and the
``-`` rows dropped.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .model import LifeTable

OPEN_AGE = 110
AGES = range(OPEN_AGE + 1)
SEXES = {"f": "female", "m": "male", "t": "total"}
HEADER = ["Year", "Age", "Female", "Male", "Total"]


class HMDParseError(ValueError):
    def __init__(self, message, line: Optional[int] = None, source: str = "<stream>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


class ExtractionError(ValueError):
    """Requested population or cell is not available in the data."""


def normalize_sex(sex: str) -> str:
    key = sex.strip().lower()
    if key in SEXES:
        return SEXES[key]
    if key in SEXES.values():
        return key
    raise ValueError(f"unknown sex {sex!r}; use f, m or t")


@dataclass
class HMDDataset:
    """Values keyed by ``(year, age)``; each entry holds (female, male, total).

    Missing values are ``None``.  Age 110 is the open interval 110+.
    """

    kind: str
    label: str = ""
    records: dict = field(default_factory=dict)

    @property
    def years(self) -> list:
        return sorted({y for y, _ in self.records})

    def value(self, year: int, age: int, sex: str) -> Optional[float]:
        col = ("female", "male", "total").index(normalize_sex(sex))
        try:
            return self.records[year, age][col]
        except KeyError:
            raise ExtractionError(
                f"{self.kind} data has no entry for year {year}, age {age}"
            ) from None


def _parse_value(token, lineno, source):
    if token == ".":
        return None
    try:
        v = float(token)
    except ValueError:
        raise HMDParseError(f"non-numeric value {token!r}", lineno, source) from None
    if not np.isfinite(v) or v < 0:
        raise HMDParseError(f"invalid value {token!r}", lineno, source)
    return v


def parse_hmd_file(stream, kind: str, source: str | None = None) -> HMDDataset:
    """Parse an HMD 1x1 text file from a stream, path or string buffer."""
    if kind not in ("deaths", "exposures"):
        raise ValueError("kind must be 'deaths' or 'exposures'")
    if isinstance(stream, (str, Path)):
        source = source or str(stream)
        with open(stream, encoding="utf-8") as fh:
            return parse_hmd_file(fh, kind, source)
    source = source or getattr(stream, "name", "<stream>")

    lines = stream.read().splitlines()
    if not lines:
        raise HMDParseError("empty file", None, source)
    title = lines[0].strip()
    label = title.split(",")[0].strip()

    i = 1
    while i < len(lines) and not lines[i].strip():
        i += 1
    if i >= len(lines) or lines[i].split() != HEADER:
        raise HMDParseError(
            f"expected header '{' '.join(HEADER)}'", i + 1 if i < len(lines) else None, source
        )

    ds = HMDDataset(kind=kind, label=label)
    for lineno, line in enumerate(lines[i + 1:], start=i + 2):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 5:
            raise HMDParseError(f"expected 5 fields, found {len(tokens)}", lineno, source)
        year_tok, age_tok = tokens[0], tokens[1]
        if year_tok.endswith("-"):
            continue
        year_tok = year_tok.rstrip("+")
        if not year_tok.isdigit():
            raise HMDParseError(f"bad year {tokens[0]!r}", lineno, source)
        if age_tok == f"{OPEN_AGE}+":
            age = OPEN_AGE
        elif age_tok.isdigit() and int(age_tok) < OPEN_AGE:
            age = int(age_tok)
        else:
            raise HMDParseError(f"bad age {age_tok!r}", lineno, source)
        key = (int(year_tok), age)
        if key in ds.records:
            raise HMDParseError(f"duplicate entry for year {key[0]}, age {age_tok}", lineno, source)
        ds.records[key] = tuple(_parse_value(t, lineno, source) for t in tokens[2:])

    ages_by_year: dict = {}
    for y, a in ds.records:
        ages_by_year.setdefault(y, set()).add(a)
    for y, ages in ages_by_year.items():
        if len(ages) != len(AGES):
            missing = sorted(set(AGES) - ages)
            raise HMDParseError(f"year {y} is missing ages {missing[:5]}", None, source)
    return ds


def format_hmd(ds: HMDDataset, title: Optional[str] = None) -> str:
    """Serialize a dataset in the HMD 1x1 layout (inverse of parsing)."""
    out = io.StringIO()
    out.write((title or f"{ds.label}, {ds.kind.capitalize()} (1x1)") + "\n\n")
    out.write("{:>6}{:>10}{:>16}{:>16}{:>16}\n".format(*HEADER))
    for (year, age) in sorted(ds.records):
        age_tok = f"{OPEN_AGE}+" if age == OPEN_AGE else str(age)
        vals = ["." if v is None else repr(float(v)) for v in ds.records[year, age]]
        # a leading space keeps long values separable
        out.write("{:>6} {:>9} {:>15} {:>15} {:>15}\n".format(year, age_tok, *vals))
    return out.getvalue()


def _extract(deaths: HMDDataset, exposures: HMDDataset, year: int, sex: str,
             start_age: int, what: str) -> LifeTable:
    if deaths.kind != "deaths" or exposures.kind != "exposures":
        raise ValueError("pass a deaths dataset and an exposures dataset, in that order")
    if not 0 <= start_age <= OPEN_AGE:
        raise ValueError(f"start_age must lie in 0..{OPEN_AGE}")
    sex = normalize_sex(sex)
    for ds in (deaths, exposures):
        if (year, start_age) not in ds.records:
            raise ExtractionError(f"{ds.kind} data ({ds.label}) has no {what} {year}")
    d, e = [], []
    for age in range(start_age, OPEN_AGE + 1):
        dv = deaths.value(year, age, sex)
        ev = exposures.value(year, age, sex)
        if dv is None or ev is None:
            kind = "deaths" if dv is None else "exposures"
            raise ExtractionError(f"missing {kind} for {what} {year}, age {age}, {sex}")
        d.append(dv)
        e.append(ev)
    try:
        return LifeTable(start_age, np.array(d), np.array(e))
    except ValueError as exc:
        raise ExtractionError(f"{what} {year}, {sex}: {exc}") from exc


def extract_period_table(deaths: HMDDataset, exposures: HMDDataset, year: int,
                         sex: str, start_age: int = 70) -> LifeTable:
    """Life table for calendar ``year`` from ``start_age`` through 110+."""
    return _extract(deaths, exposures, year, sex, start_age, "year")


def extract_cohort_table(deaths: HMDDataset, exposures: HMDDataset, cohort_year: int,
                         sex: str, start_age: int = 70) -> LifeTable:
    """Life table for the cohort born in ``cohort_year`` (cohort-layout files)."""
    return _extract(deaths, exposures, cohort_year, sex, start_age, "cohort")
