import os
from pathlib import Path

import numpy as np
import pytest

from decel.hmd import OPEN_AGE, HMDDataset, format_hmd
from decel.model import LifeTable, ModelParams
from decel.simulate import build_life_table, sample_lifetimes

HMD_DIR = os.environ.get("DECEL_HMD_DIR")


def synthetic_table(a=1e-4, b=0.1, sigma2=0.2, n=10_000, seed=0, max_age=120):
    lifetimes = sample_lifetimes(n, ModelParams(a, b, sigma2), seed)
    return build_life_table(lifetimes, max_age)


def expected_table(params, n_cells=41, scale=1e5, start_age=70):
    """Noise-free table: deaths equal the model hazard times exposure."""
    from decel.model import gg_hazard

    x = np.arange(n_cells, dtype=float)
    e = np.full(n_cells, scale)
    return LifeTable(start_age, gg_hazard(x, params) * e, e)


def table_to_hmd(table: LifeTable, year=2000, label="Synthland"):
    """Embed ``table`` into HMD deaths/exposure datasets (female column).

    Ages outside the table get small placeholder values so every year holds
    the full 0..110 range.
    """
    deaths = HMDDataset("deaths", label)
    exposures = HMDDataset("exposures", label)
    for age in range(OPEN_AGE + 1):
        i = age - table.start_age
        if 0 <= i < len(table):
            d, e = float(table.deaths[i]), float(table.exposures[i])
        else:
            d, e = 1.0, 1000.0
        deaths.records[year, age] = (d, d, 2 * d)
        exposures.records[year, age] = (e, e, 2 * e)
    return deaths, exposures


def write_hmd_pair(tmp_path: Path, table: LifeTable, year=2000, label="Synthland"):
    deaths, exposures = table_to_hmd(table, year, label)
    dpath = tmp_path / f"{label}_Deaths_1x1.txt"
    epath = tmp_path / f"{label}_Exposures_1x1.txt"
    dpath.write_text(format_hmd(deaths, f"{label}, Deaths (period 1x1), Total"))
    epath.write_text(format_hmd(exposures, f"{label}, Exposure to risk (period 1x1), Total"))
    return dpath, epath


def hmd_paths(country: str, cohort: bool = False):
    """Locate HMD files for ``country`` under DECEL_HMD_DIR, or skip."""
    if not HMD_DIR:
        pytest.skip("HMD files not available (set DECEL_HMD_DIR)")
    base = Path(HMD_DIR) / country
    names = ("cDeaths_1x1.txt", "cExposures_1x1.txt") if cohort else (
        "Deaths_1x1.txt", "Exposures_1x1.txt")
    paths = [base / n for n in names]
    for p in paths:
        if not p.exists():
            pytest.skip(f"missing HMD file {p}")
    return paths


@pytest.fixture
def gg_table():
    return synthetic_table(sigma2=0.2, seed=11)


@pytest.fixture
def gompertz_table():
    return synthetic_table(b=0.1, sigma2=0.0, seed=12)
