"""Regenerate the bundled synthetic multi-year fixture.

Run from the repository root: ``python3 tests/data/make_fixture.py``.
"""

from __future__ import annotations

import math
from pathlib import Path

from tsenowcast.simulation import simulate_series
from tsenowcast.tables import emit_counts_csv

YEARS = list(range(2010, 2024))
MISSING = (2019,)
SEED = 20240


def population(year: int) -> int:
    return 30_000 + 500 * (year - 2010)


def parameters(year: int) -> dict[str, float]:
    t = year - 2010
    return {
        "A": -0.4 - 0.01 * t,
        "B": -0.9 + 0.03 * t,
        "C": -0.2,
        "AB": math.log(2.0),
        "AC": 0.3 + 0.01 * t,
        "BC": 0.2,
    }


def build():
    return simulate_series(
        YEARS,
        {y: population(y) for y in YEARS},
        {y: parameters(y) for y in YEARS},
        SEED,
        MISSING,
    )


if __name__ == "__main__":
    tables = build()
    text = emit_counts_csv([t for t in tables.values() if t is not None])
    Path(__file__).with_name("synthetic_years.csv").write_text(text, encoding="utf-8")
