"""Per-round experiment records and their lossless CSV form.

A trace is a list of per-round rows plus JSON metadata (config hash,
seed, version).  Floats are serialized with 17 significant digits so a
write/read round trip is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
import numpy as np

TRACE_VERSION = 1

COLUMNS = ("round", "f_gap", "dist_sq", "lyapunov", "scalars_sent",
           "K_used", "cost_cum", "comm_rounds")
_INT_COLUMNS = {"round", "K_used", "comm_rounds"}


class TraceSchemaError(ValueError):
    pass


@dataclass
class TraceRow:
    round: int
    f_gap: float = math.nan
    dist_sq: float = math.nan
    lyapunov: float = math.nan
    scalars_sent: float = 0.0
    K_used: int = 0
    cost_cum: float = 0.0
    comm_rounds: int = 0


@dataclass
class Trace:
    rows: list[TraceRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, **kwargs) -> TraceRow:
        row = TraceRow(**kwargs)
        self.rows.append(row)
        return row

    def column(self, name: str) -> np.ndarray:
        if name not in COLUMNS:
            raise KeyError(name)
        return np.asarray([getattr(r, name) for r in self.rows])

    @property
    def final(self) -> TraceRow:
        return self.rows[-1]

    def validate(self) -> None:
        rounds = self.column("round")
        if len(rounds) and (np.diff(rounds) <= 0).any():
            raise TraceSchemaError("rounds are not strictly increasing")
        cost = self.column("cost_cum")
        if len(cost) and (np.diff(cost) < 0).any():
            raise TraceSchemaError("cost_cum decreases")

    def first_round_at(self, column: str, threshold: float) -> TraceRow | None:
        """First row whose ``column`` is <= threshold (NaN rows skipped)."""
        for row in self.rows:
            value = getattr(row, column)
            if not math.isnan(value) and value <= threshold:
                return row
        return None


def _format(value, column: str) -> str:
    if column in _INT_COLUMNS:
        return str(int(value))
    return format(float(value), ".17g")


def write_trace(trace: Trace, path) -> None:
    trace.validate()
    meta = dict(trace.meta)
    meta.setdefault("trace_version", TRACE_VERSION)
    lines = ["#meta " + json.dumps(meta, sort_keys=True)]
    lines.append(",".join(COLUMNS))
    for row in trace.rows:
        lines.append(",".join(_format(getattr(row, c), c) for c in COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace(path) -> Trace:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#meta "):
        raise TraceSchemaError("missing #meta header line")
    meta = json.loads(lines[0][len("#meta "):])
    version = meta.get("trace_version")
    if version != TRACE_VERSION:
        raise TraceSchemaError(f"trace version {version!r} != {TRACE_VERSION}")
    if len(lines) < 2:
        raise TraceSchemaError("truncated file: no column header")
    header = tuple(lines[1].split(","))
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise TraceSchemaError(f"missing column {missing[0]!r}")
    extra = [c for c in header if c not in COLUMNS]
    if extra:
        raise TraceSchemaError(f"unknown column {extra[0]!r}")
    trace = Trace(meta=meta)
    for line_no, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise TraceSchemaError(f"line {line_no}: expected {len(header)} fields")
        values = {}
        for name, text in zip(header, parts):
            values[name] = int(text) if name in _INT_COLUMNS else float(text)
        trace.rows.append(TraceRow(**values))
    trace.validate()
    return trace
