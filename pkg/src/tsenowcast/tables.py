"""Contingency data for one period, partially observed periods and stacked pairs.

Inclusion patterns are handled as three-character strings over ``{0, 1, +}``
(``"110"``, ``"11+"``, ``"1++"``). Position 0 is sample A, 1 is B, 2 is C.
Counts stay exact Python integers throughout this module.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Union

__all__ = [
    "OBSERVED_PATTERNS",
    "ALL_PATTERNS",
    "STAGE_PATTERNS",
    "TableError",
    "Diagnostic",
    "InclusionPattern",
    "PeriodTable",
    "AggregatedCounts",
    "StackedTable",
    "marginal",
    "relabel_pattern",
    "from_microdata",
    "read_microdata_csv",
    "read_counts_csv",
    "parse_counts_csv",
    "emit_counts_csv",
    "validate",
]

# fixed cell order used by every design matrix and array view
OBSERVED_PATTERNS: tuple[str, ...] = ("111", "110", "101", "011", "100", "010", "001")
ALL_PATTERNS: tuple[str, ...] = OBSERVED_PATTERNS + ("000",)

STAGE_PATTERNS: dict[str, tuple[str, ...]] = {
    "a": ("1++",),
    "b": ("11+", "10+", "01+"),
}

SAMPLES = "abc"


class TableError(ValueError):
    """Malformed or inconsistent contingency data."""


class Diagnostic(NamedTuple):
    severity: str  # "error" or "warning"
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.message}"


class InclusionPattern(NamedTuple):
    """Membership flags for samples A, B, C; ``None`` stands for ``+``.

    Only the trailing positions may be wildcards: ``11+`` and ``1++`` are the
    aggregated patterns that occur when C (and B) have not arrived yet.
    """

    a: int
    b: int | None
    c: int | None

    @classmethod
    def parse(cls, text: str) -> "InclusionPattern":
        text = str(text).strip()
        if len(text) != 3 or any(ch not in "01+" for ch in text):
            raise TableError(f"invalid inclusion pattern {text!r}")
        if text[0] == "+":
            raise TableError(f"wildcard not allowed in position a: {text!r}")
        if text[1] == "+" and text[2] != "+":
            raise TableError(f"wildcard in b requires wildcard in c: {text!r}")
        flags = [None if ch == "+" else int(ch) for ch in text]
        pattern = cls(*flags)
        if pattern.key == "000":
            raise TableError("pattern 000 is never observed")
        return pattern

    @property
    def key(self) -> str:
        return "".join("+" if f is None else str(f) for f in self)

    @property
    def complete(self) -> bool:
        return self.b is not None and self.c is not None

    def __str__(self) -> str:
        return self.key


def _check_count(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        try:
            as_int = int(value)
        except (TypeError, ValueError):
            raise TableError(f"non-integer count {value!r} for {where}") from None
        if as_int != value:
            raise TableError(f"non-integer count {value!r} for {where}")
        value = as_int
    if value < 0:
        raise TableError(f"negative count for {where}")
    return value


@dataclass(frozen=True)
class PeriodTable:
    """Counts of the seven observable inclusion patterns of one period.

    The constructor rejects unknown patterns and negative counts. A table with
    missing patterns can be built (so that :func:`validate` can report it),
    but every estimator calls :meth:`require_complete` first.
    """

    period: object
    counts: Mapping[str, int]

    def __post_init__(self):
        clean = {}
        for key, value in dict(self.counts).items():
            key = str(key)
            if key not in OBSERVED_PATTERNS:
                if key == "000":
                    raise TableError("pattern 000 is never observed")
                raise TableError(f"invalid complete pattern {key!r}")
            clean[key] = _check_count(value, f"period {self.period} pattern {key}")
        object.__setattr__(self, "counts", {k: clean[k] for k in OBSERVED_PATTERNS if k in clean})

    @classmethod
    def from_array(cls, period, values: Iterable[int]) -> "PeriodTable":
        values = list(values)
        if len(values) != 7:
            raise TableError("expected 7 counts in the order 111,110,101,011,100,010,001")
        return cls(period, dict(zip(OBSERVED_PATTERNS, values)))

    @property
    def complete(self) -> bool:
        return len(self.counts) == 7

    def require_complete(self) -> "PeriodTable":
        if not self.complete:
            missing = [k for k in OBSERVED_PATTERNS if k not in self.counts]
            raise TableError(f"incomplete period {self.period}: missing {', '.join(missing)}")
        return self

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, pattern: str) -> int:
        try:
            return self.counts[pattern]
        except KeyError:
            raise TableError(f"period {self.period} has no count for {pattern}") from None

    def as_list(self) -> list[int]:
        self.require_complete()
        return [self.counts[k] for k in OBSERVED_PATTERNS]

    def relabel(self, order: str) -> "PeriodTable":
        """Reorder samples so that ``order[i]`` becomes canonical sample ``i``."""
        return PeriodTable(self.period, {relabel_pattern(k, order): v for k, v in self.counts.items()})

    def aggregate(self, stage: str) -> "AggregatedCounts":
        """Collapse over the samples that have not arrived at ``stage``."""
        self.require_complete()
        if stage not in STAGE_PATTERNS:
            raise TableError(f"cannot aggregate to stage {stage!r}")
        return AggregatedCounts(self.period, {p: marginal(self, p) for p in STAGE_PATTERNS[stage]})

    def with_period(self, period) -> "PeriodTable":
        return PeriodTable(period, self.counts)


@dataclass(frozen=True)
class AggregatedCounts:
    """Counts available for a period whose later samples are still missing.

    Stage ``a`` holds only ``1++`` (the size of sample A); stage ``b`` holds
    ``11+``, ``10+`` and ``01+``.
    """

    period: object
    entries: Mapping[str, int]

    def __post_init__(self):
        clean = {}
        for key, value in dict(self.entries).items():
            pattern = InclusionPattern.parse(key)
            if pattern.complete:
                raise TableError(f"aggregated entry {key!r} has no wildcard")
            clean[pattern.key] = _check_count(value, f"period {self.period} pattern {key}")
        keys = set(clean)
        for stage, patterns in STAGE_PATTERNS.items():
            if keys == set(patterns):
                object.__setattr__(self, "stage", stage)
                break
        else:
            raise TableError(
                f"aggregated counts for period {self.period} must be exactly 1++ "
                f"(stage a) or 11+,10+,01+ (stage b); got {sorted(keys)}"
            )
        object.__setattr__(self, "entries", {k: clean[k] for k in STAGE_PATTERNS[self.stage]})

    stage: str = field(init=False)

    @property
    def n(self) -> int:
        return sum(self.entries.values())

    def __getitem__(self, pattern: str) -> int:
        return self.entries[pattern]


PeriodData = Union[PeriodTable, AggregatedCounts]


@dataclass(frozen=True)
class StackedTable:
    """A complete base period followed by the current period."""

    base: PeriodTable
    current: PeriodData

    def __post_init__(self):
        if not isinstance(self.base, PeriodTable):
            raise TableError("base period must be complete")
        if self.base.period == self.current.period:
            raise TableError(f"base and current period share the id {self.base.period!r}")

    @property
    def stage(self) -> str:
        return self.current.stage if isinstance(self.current, AggregatedCounts) else "c"

    def relabel(self, order: str) -> "StackedTable":
        if isinstance(self.current, AggregatedCounts):
            raise TableError("aggregated counts are already in arrival order and cannot be relabeled")
        return StackedTable(self.base.relabel(order), self.current.relabel(order))

    def hold_out(self, stage: str) -> "StackedTable":
        """Hide the current period's late samples, as if at delivery ``stage``."""
        if stage == "c":
            return self
        if isinstance(self.current, AggregatedCounts):
            if self.current.stage != stage:
                raise TableError(f"current period is at stage {self.current.stage}, not {stage}")
            return self
        return StackedTable(self.base, self.current.aggregate(stage))


def relabel_pattern(pattern: str, order: str) -> str:
    """Permute pattern positions so canonical position i holds sample ``order[i]``."""
    order = order.lower()
    if sorted(order) != list(SAMPLES):
        raise TableError(f"order must be a permutation of 'abc', got {order!r}")
    return "".join(pattern[SAMPLES.index(s)] for s in order)


def marginal(table: PeriodTable, pattern) -> int:
    """Sum the counts matching ``pattern``, where ``+`` sums over a sample.

    >>> t = PeriodTable.from_array(0, [3, 2, 0, 0, 0, 0, 0])
    >>> marginal(t, "11+")
    5
    """
    if not isinstance(pattern, str):
        pattern = "".join("+" if f is None else str(f) for f in pattern)
    if len(pattern) != 3 or any(ch not in "01+" for ch in pattern):
        raise TableError(f"invalid pattern {pattern!r}")
    if all(ch in "0+" for ch in pattern):
        raise TableError(f"marginal {pattern} includes the unobserved cell 000")
    table.require_complete()
    return sum(
        v for k, v in table.counts.items() if all(p == "+" or p == ch for p, ch in zip(pattern, k))
    )


def from_microdata(records: Iterable[tuple], period=None) -> PeriodTable:
    """Tabulate ``(unit_id, period, sample)`` records by exact unit id.

    Repeated appearances of a unit in the same sample collapse. All records
    must belong to one period; ``period`` labels an empty record list.
    """
    membership: dict[object, set[str]] = defaultdict(set)
    periods = set()
    for unit, rec_period, sample in records:
        label = str(sample).strip().lower()
        if label not in SAMPLES:
            raise TableError(f"unknown sample label {sample!r} for unit {unit!r}")
        periods.add(rec_period)
        membership[unit].add(label)
    if len(periods) > 1:
        raise TableError(f"records span several periods: {sorted(map(str, periods))}")
    if periods:
        found = periods.pop()
        if period is not None and str(found) != str(period):
            raise TableError(f"records belong to period {found}, not {period}")
        period = found
    counts = dict.fromkeys(OBSERVED_PATTERNS, 0)
    for samples in membership.values():
        counts["".join("1" if s in samples else "0" for s in SAMPLES)] += 1
    return PeriodTable(period, counts)


def read_microdata_csv(stream) -> dict[object, PeriodTable]:
    """Read a ``unit_id,period,sample`` file into one table per period."""
    text = stream.read() if hasattr(stream, "read") else str(stream)
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["unit_id", "period", "sample"]:
        raise TableError("microdata header must be unit_id,period,sample")
    by_period: dict[object, list] = defaultdict(list)
    for lineno, row in enumerate(reader, start=2):
        if None in row or any(v is None for v in row.values()):
            raise TableError(f"line {lineno}: malformed row")
        period = _period_label(row["period"])
        by_period[period].append((row["unit_id"].strip(), period, row["sample"]))
    return {p: from_microdata(recs, p) for p, recs in by_period.items()}


def _period_label(text: str):
    text = text.strip()
    if not text:
        raise TableError("empty period label")
    try:
        return int(text)
    except ValueError:
        return text


def read_counts_csv(stream) -> dict[object, PeriodData]:
    """Read a ``period,a,b,c,count`` file holding any number of periods.

    Periods are returned in file order. Each period is either complete (seven
    rows, no wildcards) or aggregated (wildcard rows only).
    """
    text = stream.read() if hasattr(stream, "read") else str(stream)
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise TableError("empty counts file") from None
    if [h.strip().lower() for h in header] != ["period", "a", "b", "c", "count"]:
        raise TableError("counts header must be period,a,b,c,count")
    rows: dict[object, dict[str, int]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 5:
            raise TableError(f"line {lineno}: malformed row, expected 5 fields")
        period = _period_label(row[0])
        key = "".join(cell.strip() for cell in row[1:4])
        try:
            pattern = InclusionPattern.parse(key)
        except TableError as err:
            raise TableError(f"line {lineno}: {err}") from None
        raw = row[4].strip()
        try:
            count = int(raw, 10)
        except ValueError:
            raise TableError(f"line {lineno}: malformed count {raw!r}") from None
        if count < 0:
            raise TableError(f"line {lineno}: negative count")
        cells = rows.setdefault(period, {})
        if pattern.key in cells:
            raise TableError(f"line {lineno}: duplicate pattern {pattern.key} for period {period}")
        cells[pattern.key] = count
    result: dict[object, PeriodData] = {}
    for period, cells in rows.items():
        wild = [k for k in cells if "+" in k]
        if wild and len(wild) != len(cells):
            raise TableError(f"period {period} mixes wildcard and complete rows")
        result[period] = AggregatedCounts(period, cells) if wild else PeriodTable(period, cells)
    return result


def parse_counts_csv(stream) -> StackedTable:
    """Read exactly two periods into a :class:`StackedTable`.

    A period given with wildcard rows is the current one. When both are
    complete, the smaller label (numeric when both are integers) is the base.
    """
    periods = read_counts_csv(stream)
    if len(periods) > 2:
        raise TableError(f"more than two periods in counts file: {list(periods)}")
    if len(periods) < 2:
        raise TableError("a stacked table needs two periods")
    first, second = periods.values()
    if isinstance(first, AggregatedCounts) and isinstance(second, AggregatedCounts):
        raise TableError("base period must be complete")
    if isinstance(first, AggregatedCounts):
        first, second = second, first
    elif isinstance(second, PeriodTable):
        try:
            swap = second.period < first.period
        except TypeError:
            swap = False
        if swap:
            first, second = second, first
    stacked = StackedTable(first, second)
    errors = [d for d in validate(stacked) if d.severity == "error"]
    if errors:
        raise TableError("; ".join(d.message for d in errors))
    return stacked


def _rows(data: PeriodData):
    if isinstance(data, PeriodTable):
        for key in OBSERVED_PATTERNS:
            if key in data.counts:
                yield data.period, key, data.counts[key]
    else:
        for key, value in data.entries.items():
            yield data.period, key, value


def emit_counts_csv(data) -> str:
    """Serialize tables back into the counts CSV format."""
    if isinstance(data, StackedTable):
        parts = [data.base, data.current]
    elif isinstance(data, (PeriodTable, AggregatedCounts)):
        parts = [data]
    else:
        parts = list(data)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["period", "a", "b", "c", "count"])
    for part in parts:
        for period, key, value in _rows(part):
            writer.writerow([period, key[0], key[1], key[2], value])
    return out.getvalue()


def validate(stacked: StackedTable) -> list[Diagnostic]:
    """Check a stacked table; never raises. An empty list means ok."""
    diags: list[Diagnostic] = []
    base, current = stacked.base, stacked.current
    if not base.complete:
        missing = [k for k in OBSERVED_PATTERNS if k not in base.counts]
        diags.append(Diagnostic("error", f"incomplete base period (missing {', '.join(missing)})"))
    if isinstance(current, PeriodTable) and not current.complete:
        missing = [k for k in OBSERVED_PATTERNS if k not in current.counts]
        diags.append(Diagnostic("error", f"incomplete current period (missing {', '.join(missing)})"))
    if base.period == current.period:
        diags.append(Diagnostic("error", "base and current period ids coincide"))
    if base.counts.get("111", None) == 0:
        diags.append(Diagnostic("warning", "zero cell: saturated closed form undefined (base 111)"))
    for key, value in base.counts.items():
        if value == 0 and key != "111":
            diags.append(Diagnostic("warning", f"zero cell in base period: {key}"))
    if isinstance(current, PeriodTable):
        for key, value in current.counts.items():
            if value == 0:
                diags.append(Diagnostic("warning", f"zero cell in current period: {key}"))
    else:
        for key, value in current.entries.items():
            if value == 0:
                diags.append(Diagnostic("warning", f"zero aggregate in current period: {key}"))
    return diags
