"""Parsing of DNS event records from tabular extracts and live log lines."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

NUMERIC = "numeric"
QNAME = "qname"
LABEL = "label"
KINDS = (NUMERIC, QNAME, LABEL)

# Listing order of the 12-class tunnel corpus.
CANONICAL_CLASSES = (
    "normal",
    "wildcard",
    "tcp-over-dns",
    "dnscat2",
    "andiodine",
    "dns2tcp",
    "iodine",
    "dnspot",
    "dns-shell",
    "tuns",
    "CobaltStrike",
    "OzymanDNS",
)

DEFAULT_NUMERIC_COLUMNS = (
    "frame.len",  # bytes
    "dns.resp.ttl",  # seconds
    "qname.len",
    "qname.labels",
    "qname.entropy",  # bits per character
    "dns.qry.type",
    "dns.count.answers",
    "frame.time_delta",  # seconds since previous query
)


class IngestError(ValueError):
    """Raised for malformed input files, rows or schemas."""


def normalize_qname(qname: str) -> str:
    name = qname.strip()
    if name.endswith("."):
        name = name[:-1]
    if not name:
        raise IngestError("empty qname")
    return name


@dataclass(frozen=True)
class DnsEvent:
    qname: str
    numerics: tuple[float, ...]
    label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "qname", normalize_qname(self.qname))
        nums = tuple(float(v) for v in self.numerics)
        if not all(math.isfinite(v) for v in nums):
            raise IngestError(f"non-finite numeric feature in {nums!r}")
        object.__setattr__(self, "numerics", nums)
        if self.label is not None and self.label < 0:
            raise IngestError(f"negative label {self.label}")


@dataclass(frozen=True)
class LabelMap:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise IngestError(f"duplicate class names in {self.names!r}")
        if not self.names:
            raise IngestError("label map needs at least one class")

    @classmethod
    def canonical(cls) -> "LabelMap":
        return cls(CANONICAL_CLASSES)

    @classmethod
    def infer(cls, names: Iterable[str]) -> "LabelMap":
        """Build a map from observed names: canonical classes first, in canonical order, then the rest sorted."""
        seen = set(names)
        known = [n for n in CANONICAL_CLASSES if n in seen]
        extra = sorted(seen.difference(CANONICAL_CLASSES))
        return cls(tuple(known + extra))

    @property
    def k(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise IngestError(f"unknown class name {name!r}") from None

    def name(self, idx: int) -> str:
        return self.names[idx]


@dataclass(frozen=True)
class FeatureSchema:
    columns: tuple[tuple[str, str], ...]

    def __post_init__(self):
        cols = tuple((str(n), str(k)) for n, k in self.columns)
        object.__setattr__(self, "columns", cols)
        for name, kind in cols:
            if kind not in KINDS:
                raise IngestError(f"column {name!r}: unknown kind {kind!r}")
        kinds = [k for _, k in cols]
        if kinds.count(QNAME) != 1:
            raise IngestError("schema needs exactly one qname column")
        if kinds.count(LABEL) > 1:
            raise IngestError("schema allows at most one label column")
        names = [n for n, _ in cols]
        if len(set(names)) != len(names):
            raise IngestError("duplicate column names in schema")

    @classmethod
    def default(cls) -> "FeatureSchema":
        cols = [("dns.qry.name", QNAME)]
        cols += [(n, NUMERIC) for n in DEFAULT_NUMERIC_COLUMNS]
        cols.append(("label", LABEL))
        return cls(tuple(cols))

    @classmethod
    def from_file(cls, path) -> "FeatureSchema":
        """Read a schema file of ``name:kind`` lines; blank lines and ``#`` comments are ignored."""
        cols = []
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            name, sep, kind = line.rpartition(":")
            if not sep or not name.strip():
                raise IngestError(f"{path}:{lineno}: expected name:kind, got {raw!r}")
            cols.append((name.strip(), kind.strip()))
        return cls(tuple(cols))

    def to_text(self) -> str:
        return "".join(f"{n}:{k}\n" for n, k in self.columns)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.columns]

    @property
    def numeric_names(self) -> list[str]:
        return [n for n, k in self.columns if k == NUMERIC]

    @property
    def d_n(self) -> int:
        return len(self.numeric_names)

    @property
    def has_label(self) -> bool:
        return any(k == LABEL for _, k in self.columns)

    def without_label(self) -> "FeatureSchema":
        return FeatureSchema(tuple(c for c in self.columns if c[1] != LABEL))


@dataclass
class ParseReport:
    rows: int = 0
    rejected: int = 0
    errors: list[str] = field(default_factory=list)


@dataclass
class ParsedDataset:
    events: list[DnsEvent]
    labels: LabelMap
    report: ParseReport

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, i):
        return self.events[i]


def _parse_float(cell: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise IngestError(f"unparseable numeric {cell!r}") from None
    if not math.isfinite(value):
        raise IngestError(f"non-finite numeric {cell!r}")
    return value


def _row_to_event(fields: Sequence[str], schema: FeatureSchema, labels: Optional[LabelMap]) -> DnsEvent:
    qname = None
    nums = []
    label = None
    for (name, kind), cell in zip(schema.columns, fields):
        if kind == QNAME:
            qname = cell
        elif kind == NUMERIC:
            nums.append(_parse_float(cell.strip()))
        elif labels is not None:
            label = labels.index(cell.strip())
    return DnsEvent(qname, tuple(nums), label)


def parse_dataset(
    path,
    schema: FeatureSchema,
    labels: Optional[LabelMap] = None,
    delimiter: str = ",",
    lenient: bool = False,
) -> ParsedDataset:
    """Read a header-first CSV file into labeled events.

    Columns are matched to the schema by header name, so column order in the
    file may differ from the schema. When ``labels`` is None the label map is
    inferred from the label column. In lenient mode rows with malformed or
    non-finite numeric cells are dropped and counted; unknown class names are
    always an error.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"dataset not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file, header row missing") from None
        if sorted(header) != sorted(schema.names):
            raise IngestError(f"{path}: header {header} does not match schema columns {schema.names}")
        order = [header.index(n) for n in schema.names]
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    if labels is None and schema.has_label:
        label_pos = header.index(next(n for n, k in schema.columns if k == LABEL))
        labels = LabelMap.infer(r[label_pos].strip() for r in rows if len(r) == len(header))
    report = ParseReport()
    events = []
    for lineno, row in enumerate(rows, 2):
        report.rows += 1
        if len(row) != len(header):
            raise IngestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        fields = [row[i] for i in order]
        try:
            events.append(_row_to_event(fields, schema, labels))
        except IngestError as exc:
            if not lenient or "unknown class" in str(exc):
                raise IngestError(f"{path}:{lineno}: {exc}") from None
            report.rejected += 1
            report.errors.append(f"line {lineno}: {exc}")
    if report.rejected:
        log.warning("%s: rejected %d of %d rows", path, report.rejected, report.rows)
    return ParsedDataset(events, labels, report)


def parse_log_line(line: str, schema: FeatureSchema, delimiter: str = "|") -> DnsEvent:
    """Parse one live record; fields follow the schema order with any label column omitted."""
    live = schema.without_label()
    fields = line.rstrip("\r\n").split(delimiter)
    if not line.strip() or len(fields) != len(live.columns):
        raise IngestError(f"expected {len(live.columns)} fields, got {len(fields) if line.strip() else 0}")
    return _row_to_event(fields, live, None)


def event_to_row(event: DnsEvent, schema: FeatureSchema, labels: Optional[LabelMap] = None) -> list[str]:
    nums = iter(event.numerics)
    row = []
    for _, kind in schema.columns:
        if kind == QNAME:
            row.append(event.qname)
        elif kind == NUMERIC:
            row.append(repr(next(nums)))
        else:
            row.append("" if event.label is None or labels is None else labels.name(event.label))
    return row


def write_dataset(path, events: Iterable[DnsEvent], schema: FeatureSchema, labels: LabelMap, delimiter: str = ","):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(schema.names)
        for ev in events:
            writer.writerow(event_to_row(ev, schema, labels))


def format_log_line(event: DnsEvent, schema: FeatureSchema, delimiter: str = "|") -> str:
    return delimiter.join(event_to_row(event, schema.without_label()))


def _round(x: float) -> int:
    return math.floor(x + 0.5)


def split_events(events: Sequence[DnsEvent], train_ratio: float, val_ratio: float, seed: int):
    """Stratified, seeded train/validation/test partition.

    Every class with at least three samples appears in all three splits.
    Smaller classes are kept in the training split only, with a warning.
    """
    if not (0 < train_ratio < 1 and 0 <= val_ratio < 1 and train_ratio + val_ratio < 1):
        raise ValueError(f"invalid split ratios ({train_ratio}, {val_ratio})")
    by_class = defaultdict(list)
    for i, ev in enumerate(events):
        if ev.label is None:
            raise IngestError(f"event {i} ({ev.qname}) is unlabeled")
        by_class[ev.label].append(i)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in sorted(by_class):
        n = len(by_class[c])
        idx = [by_class[c][j] for j in rng.permutation(n)]
        if n < 3:
            log.warning("class %d has %d sample(s); kept in the training split only", c, n)
            train += idx
            continue
        # rounding the cumulative cut points keeps each split within one sample of its quota
        cut1 = _round(n * train_ratio)
        cut2 = _round(n * (train_ratio + val_ratio))
        a = max(cut1, 1)
        b = max(cut2 - cut1, 1)
        while a + b > n - 1:
            if a >= b and a > 1:
                a -= 1
            else:
                b -= 1
        train += idx[:a]
        val += idx[a : a + b]
        test += idx[a + b :]

    def pick(ids):
        return [events[i] for i in rng.permutation(np.array(ids, dtype=np.int64))] if ids else []

    return pick(train), pick(val), pick(test)
