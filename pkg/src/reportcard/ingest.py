"""Unit-level input records and the measurement transforms applied to them."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

logger = logging.getLogger(__name__)


class IngestError(ValueError):
    """Raised when an input row cannot be turned into a UnitRecord."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"field {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DomainError(ValueError):
    """Raised when a transform is evaluated outside its domain."""


@dataclass(frozen=True)
class UnitRecord:
    id: str
    estimate: float
    se: float
    group: str | None = None
    counts: tuple[int, int] | None = None
    aux: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.estimate):
            raise IngestError(f"unit {self.id}: estimate must be finite")
        if not (self.se > 0 and math.isfinite(self.se)):
            raise IngestError(f"unit {self.id}: se must be positive, got {self.se}")
        if self.group is not None and self.group == "":
            raise IngestError(f"unit {self.id}: empty group label")
        if self.counts is not None:
            c, n = self.counts
            if not (0 <= c <= n and n > 0):
                raise IngestError(f"unit {self.id}: counts must satisfy 0 <= C <= N, N > 0")


@dataclass(frozen=True)
class Schema:
    """Column names used to read unit data, plus optional sample filters."""

    id_col: str = "id"
    estimate_col: str | None = "estimate"
    se_col: str | None = "se"
    group_col: str | None = None
    successes_col: str | None = None
    trials_col: str | None = None
    aux_cols: tuple[str, ...] = ()
    transform: str = "passthrough"  # passthrough | arcsine | log-gap
    min_rate: float | None = None
    min_trials: int | None = None
    rate_col: str | None = None
    jobs_col: str | None = None
    # log-gap inputs: two rates with their sampling variances and covariance
    rate_a_col: str | None = None
    rate_b_col: str | None = None
    var_a_col: str | None = None
    var_b_col: str | None = None
    cov_col: str | None = None

    @classmethod
    def from_mapping(cls, cfg: Mapping[str, Any] | None) -> "Schema":
        cfg = dict(cfg or {})
        if "aux_cols" in cfg:
            cfg["aux_cols"] = tuple(cfg["aux_cols"])
        known = set(cls.__dataclass_fields__)
        unknown = set(cfg) - known
        if unknown:
            raise IngestError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**cfg)


def arcsine_transform(successes: int, trials: int) -> tuple[float, float]:
    """Variance-stabilised rate: ``asin(sqrt(C/N))`` with standard error ``(4N)^-1/2``."""
    if trials <= 0 or successes < 0 or successes > trials:
        raise DomainError(f"need 0 <= C <= N and N > 0, got C={successes}, N={trials}")
    return math.asin(math.sqrt(successes / trials)), 1.0 / math.sqrt(4.0 * trials)


def back_transform_rate(theta: float) -> float:
    if not (0.0 <= theta <= math.pi / 2):
        raise DomainError(f"theta must lie in [0, pi/2], got {theta}")
    return math.sin(theta) ** 2


def log_gap_transform(
    pw: float, pb: float, var_w: float, var_b: float, cov: float
) -> tuple[float, float]:
    """Log ratio of two rates with its Delta-method standard error."""
    if pw <= 0 or pb <= 0:
        raise DomainError(f"rates must be positive, got pw={pw}, pb={pb}")
    var = var_w / pw**2 + var_b / pb**2 - 2.0 * cov / (pw * pb)
    if not var > 0:
        raise DomainError(f"implied variance must be positive, got {var}")
    return math.log(pw) - math.log(pb), math.sqrt(var)


def _parse_float(raw: Any, row: int, col: str) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise IngestError(f"cannot parse {raw!r} as a number", row, col) from None
    if not math.isfinite(value):
        raise IngestError(f"non-finite value {raw!r}", row, col)
    return value


def _parse_int(raw: Any, row: int, col: str) -> int:
    value = _parse_float(raw, row, col)
    if value != int(value):
        raise IngestError(f"expected an integer, got {raw!r}", row, col)
    return int(value)


def _read_rows(path: Path) -> list[dict[str, Any]]:
    if path.suffix.lower() == ".json":
        with path.open(encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, list):
            raise IngestError("JSON input must be an array of objects")
        return data
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        columns = reader.fieldnames or []
    # keep header information around for the column check below
    if rows:
        return rows
    return [{"__header__": columns}] if columns else []


def records_from_rows(rows: list[Mapping[str, Any]], schema: Schema) -> list[UnitRecord]:
    """Convert parsed rows to UnitRecords; row numbers in errors are 1-based data rows."""
    if not rows:
        return []
    header = set(rows[0].keys())
    needed = [schema.id_col]
    if schema.transform == "arcsine":
        needed += [schema.successes_col, schema.trials_col]
    elif schema.transform == "passthrough":
        needed += [schema.estimate_col, schema.se_col]
    elif schema.transform == "log-gap":
        needed += [schema.rate_a_col, schema.rate_b_col, schema.var_a_col, schema.var_b_col, schema.cov_col]
    else:
        raise IngestError(f"unknown transform {schema.transform!r}")
    for col in (schema.group_col, *schema.aux_cols, schema.rate_col, schema.jobs_col):
        if col:
            needed.append(col)
    for col in needed:
        if col is None:
            raise IngestError(f"transform {schema.transform!r} requires more schema columns")
        if col not in header:
            raise IngestError(f"missing column {col!r}")

    records: list[UnitRecord] = []
    seen: set[str] = set()
    dropped = 0
    for r, row in enumerate(rows, start=1):
        uid = str(row[schema.id_col]).strip()
        if uid in seen:
            raise IngestError(f"duplicate id {uid!r}", r, schema.id_col)
        seen.add(uid)
        counts = None
        if schema.successes_col and schema.trials_col and schema.successes_col in row:
            c = _parse_int(row[schema.successes_col], r, schema.successes_col)
            n = _parse_int(row[schema.trials_col], r, schema.trials_col)
            if n <= 0 or not 0 <= c <= n:
                raise IngestError(f"counts must satisfy 0 <= C <= N, N > 0 (C={c}, N={n})", r)
            counts = (c, n)
        if schema.transform == "arcsine":
            est, se = arcsine_transform(*counts)
        elif schema.transform == "log-gap":
            cols = (schema.rate_a_col, schema.rate_b_col, schema.var_a_col, schema.var_b_col, schema.cov_col)
            vals = [_parse_float(row[c], r, c) for c in cols]
            try:
                est, se = log_gap_transform(*vals)
            except DomainError as err:
                raise IngestError(str(err), r) from None
        else:
            est = _parse_float(row[schema.estimate_col], r, schema.estimate_col)
            se = _parse_float(row[schema.se_col], r, schema.se_col)
            if se <= 0:
                raise IngestError(f"se must be positive, got {se}", r, schema.se_col)
        if not _passes_filter(row, schema, counts, r):
            dropped += 1
            continue
        group = None
        if schema.group_col:
            group = str(row[schema.group_col]).strip()
            if not group:
                raise IngestError("empty group label", r, schema.group_col)
        aux = {col: row[col] for col in schema.aux_cols}
        records.append(UnitRecord(uid, est, se, group, counts, aux))
    if dropped:
        logger.info("sample filter dropped %d of %d units", dropped, len(rows))
    return records


def _passes_filter(row: Mapping[str, Any], schema: Schema, counts, r: int) -> bool:
    if schema.min_rate is not None:
        if schema.rate_col:
            rate = _parse_float(row[schema.rate_col], r, schema.rate_col)
        elif counts is not None:
            rate = counts[0] / counts[1]
        else:
            raise IngestError("min_rate filter needs rate_col or counts")
        if rate < schema.min_rate:
            return False
    if schema.min_trials is not None:
        if schema.jobs_col:
            trials = _parse_float(row[schema.jobs_col], r, schema.jobs_col)
        elif counts is not None:
            trials = counts[1]
        else:
            raise IngestError("min_trials filter needs jobs_col or counts")
        if trials < schema.min_trials:
            return False
    return True


def load_units(path: str | Path, schema: Schema | Mapping[str, Any] | None = None) -> list[UnitRecord]:
    """Read a CSV (or JSON array) of units according to ``schema``."""
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    path = Path(path)
    rows = _read_rows(path)
    if not rows or "__header__" in rows[0]:
        logger.warning("no units found in %s", path)
        return []
    return records_from_rows(rows, schema)


def firm_data_path() -> Path:
    """Bundled 97-firm table of contact-gap estimates, standard errors and SIC codes."""
    return Path(__file__).with_name("data") / "firms.csv"


TRANSFORMS = ("passthrough", "arcsine", "log-gap")

FIRM_SCHEMA = Schema(id_col="firm", estimate_col="estimate", se_col="se", group_col="sic")


def load_firms() -> list[UnitRecord]:
    return load_units(firm_data_path(), FIRM_SCHEMA)
