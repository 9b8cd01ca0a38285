"""Microdata records: schema-driven ingestion, sample filters, occupation crosswalks.

Input files are delimited text (comma or tab) with a header row. A schema
(YAML or JSON) maps record fields to column names and carries the code
dictionaries used to validate categorical cells.
"""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import yaml

from .errors import ConfigError, CrosswalkError, DataError, SchemaError

AMBIGUOUS = "AMBIGUOUS"
REQUIRED_FIELDS = ("year", "age", "sex", "race", "state", "occupation")
CHUNK_ROWS = 4096

DEFAULT_SEX_CODES = {"1": "male", "2": "female", "m": "male", "f": "female",
                     "male": "male", "female": "female"}
# IPUMS RACE: 1 white, 2 black, 3-9 other groups
DEFAULT_RACE_CODES = {"white": "white", "black": "black", "other": "other",
                      "1": "white", "2": "black", "3": "other", "4": "other",
                      "5": "other", "6": "other", "7": "other", "8": "other",
                      "9": "other"}
TRUE_TOKENS = frozenset({"1", "true", "t", "yes", "y"})
FALSE_TOKENS = frozenset({"0", "false", "f", "no", "n"})


@dataclass(frozen=True)
class PersonRecord:
    record_id: str
    year: int
    age: int
    sex: str
    race: str
    state: str
    region: str
    occupation: str
    birthplace: str = ""
    nativity: bool = True
    industry: str | None = None
    earnings: float | None = None
    in_labor_force: bool = True
    farm_status: bool = False
    family_size: int = 1
    marital_status: str = ""
    n_families_in_household: int = 1
    relation_to_head: str = ""
    weight: float = 1.0
    extras: Mapping[str, float | None] = field(default_factory=dict, compare=True)

    def __post_init__(self):
        if self.age < 0:
            raise DataError("negative age")
        if not self.weight > 0:
            raise DataError("nonpositive weight")
        if self.earnings is not None and self.earnings < 0:
            raise DataError("negative earnings")
        if self.sex not in ("male", "female"):
            raise DataError("unknown code")
        if self.race not in ("white", "black", "other"):
            raise DataError("unknown code")

    def get(self, name: str):
        """Field or extra-column value by name."""
        if name in self.extras:
            return self.extras[name]
        return getattr(self, name)


class RegionLookup:
    """State code -> census region, accepting postal or FIPS codes."""

    def __init__(self, rows: Iterable[tuple[str, str, str]]):
        self.canonical: dict[str, str] = {}
        self.region_of: dict[str, str] = {}
        for state, fips, region in rows:
            state = state.strip().upper()
            self.region_of[state] = region.strip()
            for key in (state, fips.strip(), fips.strip().lstrip("0")):
                if key:
                    self.canonical[key] = state

    @classmethod
    def from_file(cls, path: str | Path | None = None) -> "RegionLookup":
        if path is None:
            text = resources.files("lidoscore").joinpath("data/regions.csv").read_text()
        else:
            text = Path(path).read_text()
        reader = csv.DictReader(io.StringIO(text))
        return cls((r["state"], r.get("fips") or "", r["region"]) for r in reader)

    def resolve(self, code: str) -> str | None:
        code = code.strip()
        return self.canonical.get(code.upper(), self.canonical.get(code.lstrip("0")))

    def region(self, state: str) -> str:
        return self.region_of[state]

    @property
    def regions(self) -> list[str]:
        return sorted(set(self.region_of.values()))


_DEFAULT_REGIONS: RegionLookup | None = None


def default_regions() -> RegionLookup:
    global _DEFAULT_REGIONS
    if _DEFAULT_REGIONS is None:
        _DEFAULT_REGIONS = RegionLookup.from_file()
    return _DEFAULT_REGIONS


@dataclass
class Schema:
    """Column map and code dictionaries for one microdata layout."""

    columns: dict[str, str]
    delimiter: str | None = None
    missing: tuple[str, ...] = ("", "NA", ".")
    earnings_missing: tuple[str, ...] = ()
    sex_codes: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_SEX_CODES))
    race_codes: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_RACE_CODES))
    state_codes: dict[str, str] | None = None
    occupation_codes: frozenset[str] | None = None
    industry_codes: frozenset[str] | None = None
    extra_columns: dict[str, str] = field(default_factory=dict)
    regions_path: str | None = None
    occ_scheme: str | None = None

    def __post_init__(self):
        known = {f.name for f in fields(PersonRecord)} - {"region", "extras"}
        unknown = set(self.columns) - known
        if unknown:
            raise ConfigError(f"schema maps unknown fields: {sorted(unknown)}")
        missing = [f for f in REQUIRED_FIELDS if f not in self.columns]
        if missing:
            raise ConfigError(f"schema does not map required fields: {missing}")
        if self.delimiter not in (None, ",", "\t"):
            raise ConfigError("delimiter must be ',' or tab")

    @classmethod
    def from_dict(cls, cfg: Mapping) -> "Schema":
        cfg = dict(cfg)
        kw = {"columns": {k: str(v) for k, v in cfg.pop("columns").items()}}
        if "delimiter" in cfg:
            d = cfg.pop("delimiter")
            kw["delimiter"] = "\t" if d in ("\\t", "tab", "\t") else d
        for key in ("missing", "earnings_missing"):
            if key in cfg:
                kw[key] = tuple(str(v) for v in cfg.pop(key))
        for key in ("sex_codes", "race_codes", "state_codes", "extra_columns"):
            if key in cfg:
                kw[key] = {str(k): str(v) for k, v in cfg.pop(key).items()}
        for key in ("occupation_codes", "industry_codes"):
            if key in cfg:
                kw[key] = frozenset(str(v) for v in cfg.pop(key))
        for key in ("regions_path", "occ_scheme"):
            if key in cfg:
                kw[key] = cfg.pop(key)
        if cfg:
            raise ConfigError(f"unknown schema keys: {sorted(cfg)}")
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "Schema":
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
        if not isinstance(cfg, Mapping) or "columns" not in cfg:
            raise ConfigError(f"{path}: schema must be a mapping with a 'columns' key")
        schema = cls.from_dict(cfg)
        if schema.regions_path and not Path(schema.regions_path).is_absolute():
            schema.regions_path = str(Path(path).parent / schema.regions_path)
        return schema

    def prefixed(self, prefix: str) -> "Schema":
        """Same schema with every column name prefixed (linked-pair layouts)."""
        return replace(self, columns={k: prefix + v for k, v in self.columns.items()},
                       extra_columns={k: prefix + v for k, v in self.extra_columns.items()})


@dataclass
class IngestReport:
    n_rows: int = 0
    n_parsed: int = 0
    n_rejected: int = 0
    reasons: dict[str, int] = field(default_factory=dict)
    rejected_lines: list[tuple[int, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"n_rows": self.n_rows, "n_parsed": self.n_parsed,
                "n_rejected": self.n_rejected,
                "reasons": dict(sorted(self.reasons.items())),
                "rejected_lines": [list(x) for x in self.rejected_lines]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class _Reject(Exception):
    pass


class RowParser:
    """Turns one header-keyed row into a PersonRecord, or raises a reject reason."""

    def __init__(self, schema: Schema, header: Sequence[str]):
        self.schema = schema
        self.regions = (RegionLookup.from_file(schema.regions_path)
                        if schema.regions_path else default_regions())
        index = {name: i for i, name in enumerate(header)}
        absent = [c for f, c in schema.columns.items() if c not in index]
        absent += [c for c in schema.extra_columns.values() if c not in index]
        if absent:
            raise SchemaError(f"missing required column(s): {sorted(absent)}")
        self.pos = {f: index[c] for f, c in schema.columns.items()}
        self.extra_pos = {k: index[c] for k, c in schema.extra_columns.items()}
        self.missing = set(schema.missing)

    def _cell(self, row, name):
        i = self.pos.get(name)
        if i is None or i >= len(row):
            return None
        v = row[i].strip()
        return None if v in self.missing else v

    def _int(self, row, name, default=None):
        v = self._cell(row, name)
        if v is None:
            if default is None:
                raise _Reject("missing value")
            return default
        try:
            f = float(v)
        except ValueError:
            raise _Reject("unparseable value") from None
        if f != int(f):
            raise _Reject("unparseable value")
        return int(f)

    def _flag(self, row, name, default):
        v = self._cell(row, name)
        if v is None:
            return default
        v = v.lower()
        if v in TRUE_TOKENS:
            return True
        if v in FALSE_TOKENS:
            return False
        raise _Reject("unparseable value")

    def _code(self, row, name, table):
        v = self._cell(row, name)
        if v is None:
            raise _Reject("missing value")
        out = table.get(v, table.get(v.lower()))
        if out is None:
            raise _Reject("unknown code")
        return out

    def _float(self, v):
        try:
            return float(v)
        except ValueError:
            raise _Reject("unparseable value") from None

    def parse(self, row: Sequence[str], line_no: int) -> PersonRecord:
        s = self.schema
        state_raw = self._cell(row, "state")
        if state_raw is None:
            raise _Reject("missing value")
        if s.state_codes is not None:
            state_raw = s.state_codes.get(state_raw, "")
        state = self.regions.resolve(state_raw) if state_raw else None
        if state is None:
            raise _Reject("unknown code")
        occupation = self._cell(row, "occupation")
        if occupation is None:
            raise _Reject("missing value")
        if s.occupation_codes is not None and occupation not in s.occupation_codes:
            raise _Reject("unknown code")
        industry = self._cell(row, "industry")
        if industry is not None and s.industry_codes is not None and industry not in s.industry_codes:
            raise _Reject("unknown code")

        earn = self._cell(row, "earnings")
        if earn is not None and earn in s.earnings_missing:
            earn = None
        earnings = None if earn is None else self._float(earn)
        if earnings is not None and earnings < 0:
            raise _Reject("negative earnings")
        age = self._int(row, "age")
        if age < 0:
            raise _Reject("negative age")
        w = self._cell(row, "weight")
        weight = 1.0 if w is None else self._float(w)
        if not weight > 0:
            raise _Reject("nonpositive weight")
        extras = {}
        for k, i in self.extra_pos.items():
            v = row[i].strip() if i < len(row) else ""
            extras[k] = None if v in self.missing else self._float(v)
        rid = self._cell(row, "record_id")
        return PersonRecord(
            record_id=rid if rid is not None else str(line_no),
            year=self._int(row, "year"),
            age=age,
            sex=self._code(row, "sex", s.sex_codes),
            race=self._code(row, "race", s.race_codes),
            state=state,
            region=self.regions.region(state),
            occupation=occupation,
            birthplace=self._cell(row, "birthplace") or "",
            nativity=self._flag(row, "nativity", True),
            industry=industry,
            earnings=earnings,
            in_labor_force=self._flag(row, "in_labor_force", True),
            farm_status=self._flag(row, "farm_status", False),
            family_size=self._int(row, "family_size", 1),
            marital_status=self._cell(row, "marital_status") or "",
            n_families_in_household=self._int(row, "n_families_in_household", 1),
            relation_to_head=self._cell(row, "relation_to_head") or "",
            weight=weight,
            extras=extras,
        )

    def parse_chunk(self, rows, first_line):
        out = []
        for k, row in enumerate(rows):
            line = first_line + k
            try:
                out.append((line, self.parse(row, line), None))
            except _Reject as e:
                out.append((line, None, str(e)))
        return out


def read_table(path: str | Path, delimiter: str | None = None) -> tuple[list[str], list[list[str]]]:
    """Header and rows of a delimited file; the delimiter is sniffed when not given."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, newline="") as fh:
        text = fh.read()
    if delimiter is None:
        first = text.split("\n", 1)[0]
        delimiter = "\t" if first.count("\t") > first.count(",") else ","
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError(f"{path}: file has no header row") from None
    rows = [r for r in reader if r and any(c.strip() for c in r)]
    return header, rows


def parse_rows(parser: RowParser, rows: Sequence[Sequence[str]], threads: int = 1):
    """Parse rows in fixed-size chunks; output order never depends on ``threads``."""
    chunks = [(rows[i:i + CHUNK_ROWS], i + 2) for i in range(0, len(rows), CHUNK_ROWS)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parsed = list(ex.map(lambda c: parser.parse_chunk(*c), chunks))
    else:
        parsed = [parser.parse_chunk(*c) for c in chunks]
    return [item for chunk in parsed for item in chunk]


def load_microdata(path: str | Path, schema: Schema, threads: int = 1
                   ) -> tuple[list[PersonRecord], IngestReport]:
    header, rows = read_table(path, schema.delimiter)
    parser = RowParser(schema, header)
    records, report, reasons = [], IngestReport(n_rows=len(rows)), Counter()
    for line, rec, reason in parse_rows(parser, rows, threads):
        if rec is None:
            reasons[reason] += 1
            report.rejected_lines.append((line, reason))
        else:
            records.append(rec)
    report.n_parsed = len(records)
    report.n_rejected = len(rows) - len(records)
    report.reasons = dict(sorted(reasons.items()))
    return records, report


@dataclass(frozen=True)
class FilterSpec:
    age_min: int | None = None
    age_max: int | None = None
    require_positive_earnings: bool = False
    require_labor_force: bool = False
    exclude_races: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.age_min is not None and self.age_max is not None and self.age_min > self.age_max:
            raise ConfigError(f"age_min {self.age_min} > age_max {self.age_max}")
        object.__setattr__(self, "exclude_races", frozenset(self.exclude_races))

    @classmethod
    def from_dict(cls, cfg: Mapping | None) -> "FilterSpec":
        cfg = dict(cfg or {})
        unknown = set(cfg) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown filter keys: {sorted(unknown)}")
        if "exclude_races" in cfg:
            cfg["exclude_races"] = frozenset(cfg["exclude_races"])
        return cls(**cfg)


FILTER_PREDICATES = ("age", "earnings", "labor_force", "race")


def _first_failure(r: PersonRecord, spec: FilterSpec) -> str | None:
    if (spec.age_min is not None and r.age < spec.age_min) or \
            (spec.age_max is not None and r.age > spec.age_max):
        return "age"
    if spec.require_positive_earnings and not (r.earnings is not None and r.earnings > 0):
        return "earnings"
    if spec.require_labor_force and not r.in_labor_force:
        return "labor_force"
    if r.race in spec.exclude_races:
        return "race"
    return None


def filter_sample(records: Iterable[PersonRecord], spec: FilterSpec
                  ) -> tuple[list[PersonRecord], dict[str, int]]:
    """Keep records passing every predicate.

    A record failing several predicates is counted once, under the first
    failing one in ``FILTER_PREDICATES`` order.
    """
    kept, counts = [], dict.fromkeys(FILTER_PREDICATES, 0)
    for r in records:
        why = _first_failure(r, spec)
        if why is None:
            kept.append(r)
        else:
            counts[why] += 1
    return kept, counts


@dataclass
class Crosswalk:
    source_scheme: str
    target_scheme: str
    entries: dict[str, str | None]  # None marks an ambiguous source code

    @property
    def n_ambiguous(self) -> int:
        return sum(v is None for v in self.entries.values())

    @classmethod
    def identity(cls, codes: Iterable[str], scheme: str) -> "Crosswalk":
        return cls(scheme, scheme, {c: c for c in codes})


def load_crosswalk(path: str | Path, delimiter: str | None = None) -> Crosswalk:
    """Read a two-column crosswalk; the header row names the source and target schemes."""
    header, rows = read_table(path, delimiter)
    if len(header) != 2:
        raise CrosswalkError(f"{path}: crosswalk must have exactly two columns")
    entries: dict[str, str | None] = {}
    for row in rows:
        if len(row) != 2:
            raise CrosswalkError(f"{path}: malformed row {row!r}")
        src, dst = row[0].strip(), row[1].strip()
        if src in entries:
            raise CrosswalkError(f"{path}: source code {src!r} appears more than once")
        entries[src] = None if dst.upper() == AMBIGUOUS else dst
    return Crosswalk(header[0], header[1], entries)


def apply_crosswalk(records: Iterable[PersonRecord], crosswalk: Crosswalk, scheme: str
                    ) -> tuple[list[PersonRecord], dict[str, int]]:
    """Remap occupations; ambiguous and unmapped codes drop the record.

    ``scheme`` labels the coding of the incoming records and must match the
    crosswalk's source scheme.
    """
    if scheme != crosswalk.source_scheme:
        raise CrosswalkError(
            f"records are coded {scheme!r} but crosswalk maps from {crosswalk.source_scheme!r}")
    out, report = [], {"mapped": 0, "ambiguous": 0, "unmapped": 0}
    for r in records:
        if r.occupation not in crosswalk.entries:
            report["unmapped"] += 1
            continue
        target = crosswalk.entries[r.occupation]
        if target is None:
            report["ambiguous"] += 1
            continue
        report["mapped"] += 1
        out.append(r if target == r.occupation else replace(r, occupation=target))
    return out, report


def write_records(path: str | Path, records: Sequence[PersonRecord], delimiter: str = ","):
    """Write records in the default column layout (field name == column name)."""
    names = [f.name for f in fields(PersonRecord) if f.name not in ("region", "extras")]
    extra = sorted({k for r in records for k in r.extras})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(names + extra)
        for r in records:
            row = []
            for n in names:
                v = getattr(r, n)
                if v is None:
                    v = ""
                elif isinstance(v, bool):
                    v = int(v)
                elif isinstance(v, float):
                    v = repr(v)
                row.append(v)
            row += ["" if r.extras.get(k) is None else repr(r.extras[k]) for k in extra]
            w.writerow(row)


def default_schema(extra_columns: Iterable[str] = ()) -> Schema:
    """Schema for files written by :func:`write_records`."""
    names = [f.name for f in fields(PersonRecord) if f.name not in ("region", "extras")]
    return Schema(columns={n: n for n in names},
                  extra_columns={k: k for k in extra_columns})
