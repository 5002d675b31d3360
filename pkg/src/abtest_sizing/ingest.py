"""Session logs -> user aggregates -> traffic recommendation.

Input is a headered CSV with columns ``user_id,session_id,metric`` where
``session_id`` may be omitted. Aggregation is a single streaming pass that
keeps one (count, sum) pair per distinct user.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Literal

from .clustered import UserAggregate
from .errors import DataValidationError, DomainError

__all__ = [
    "Aggregator",
    "SessionRecord",
    "TrafficPlan",
    "aggregate",
    "iter_sessions",
    "read_aggregates",
    "read_sessions",
    "traffic_plan",
    "write_aggregates",
]

log = logging.getLogger(__name__)

Mode = Literal["binary", "continuous"]


@dataclass(frozen=True)
class SessionRecord:
    user_id: str
    metric: float
    session_id: str | None = None


def _parse_metric(raw: str, mode: Mode, line: int) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise DataValidationError(f"metric {raw!r} is not a number", line) from None
    if not math.isfinite(value):
        raise DataValidationError(f"metric {raw!r} is not finite", line)
    if mode == "binary":
        if value not in (0.0, 1.0):
            raise DataValidationError(f"binary metric must be 0 or 1, got {raw!r}", line)
        return int(value)
    return value


def iter_sessions(path: str | Path, mode: Mode = "binary") -> Iterator[SessionRecord]:
    """Yield validated session rows one at a time."""
    if mode not in ("binary", "continuous"):
        raise DomainError(f"mode must be 'binary' or 'continuous', got {mode!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            log.warning("%s is empty", path)
            return
        cols = [c.strip() for c in header]
        if "user_id" not in cols or "metric" not in cols:
            raise DataValidationError("header must contain user_id and metric columns", 1)
        i_user = cols.index("user_id")
        i_metric = cols.index("metric")
        i_session = cols.index("session_id") if "session_id" in cols else None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(cols):
                raise DataValidationError(f"expected {len(cols)} fields, got {len(row)}", line)
            user = row[i_user].strip()
            if not user:
                raise DataValidationError("empty user_id", line)
            session = None
            if i_session is not None:
                session = row[i_session].strip() or None
            yield SessionRecord(user, _parse_metric(row[i_metric].strip(), mode, line), session)


def read_sessions(path: str | Path, mode: Mode = "binary") -> list[SessionRecord]:
    records = list(iter_sessions(path, mode))
    log.info("read %d session rows from %s", len(records), path)
    return records


class Aggregator:
    """Streaming fold of session rows into per-user (N_i, S_i).

    Duplicate (user_id, session_id) pairs are counted as separate rows and
    tallied in ``duplicates``. Aggregators over disjoint chunks can be
    combined with :meth:`merge`.
    """

    def __init__(self):
        self._counts: dict[str, int] = {}
        self._sums: dict[str, float] = {}
        self._seen: set[tuple[str, str]] = set()
        self.rows = 0
        self.duplicates = 0

    def add(self, record: SessionRecord) -> None:
        uid = record.user_id
        self._counts[uid] = self._counts.get(uid, 0) + 1
        self._sums[uid] = self._sums.get(uid, 0) + record.metric
        self.rows += 1
        if record.session_id is not None:
            key = (uid, record.session_id)
            if key in self._seen:
                self.duplicates += 1
            else:
                self._seen.add(key)

    def update(self, records: Iterable[SessionRecord]) -> "Aggregator":
        for r in records:
            self.add(r)
        return self

    def merge(self, other: "Aggregator") -> "Aggregator":
        for uid, c in other._counts.items():
            self._counts[uid] = self._counts.get(uid, 0) + c
            self._sums[uid] = self._sums.get(uid, 0) + other._sums[uid]
        self.duplicates += other.duplicates + len(self._seen & other._seen)
        self._seen |= other._seen
        self.rows += other.rows
        return self

    def results(self) -> list[UserAggregate]:
        """Aggregates sorted by user_id, so output never depends on input order."""
        return [UserAggregate(uid, self._counts[uid], self._sums[uid]) for uid in sorted(self._counts)]


def aggregate(records: Iterable[SessionRecord]) -> list[UserAggregate]:
    agg = Aggregator().update(records)
    if agg.duplicates:
        log.warning("%d duplicate (user_id, session_id) rows kept", agg.duplicates)
    return agg.results()


def write_aggregates(path: str | Path, aggregates: Iterable[UserAggregate]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "n_sessions", "metric_sum"])
        for a in aggregates:
            s = a.metric_sum
            # integral sums (always the case for binary metrics) are written without a decimal point
            text = str(int(s)) if float(s).is_integer() else repr(float(s))
            w.writerow([a.user_id, a.n_sessions, text])


def read_aggregates(path: str | Path) -> list[UserAggregate]:
    """Read ``user_id,n_sessions,metric_sum``; users with zero sessions are dropped."""
    out: list[UserAggregate] = []
    dropped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"user_id", "n_sessions", "metric_sum"} - set(reader.fieldnames or ())
        if missing:
            raise DataValidationError(f"missing columns: {', '.join(sorted(missing))}", 1)
        for row in reader:
            line = reader.line_num
            try:
                n = int(row["n_sessions"])
                s = float(row["metric_sum"])
            except (TypeError, ValueError):
                raise DataValidationError("unparseable n_sessions/metric_sum", line) from None
            if n < 0:
                raise DataValidationError(f"negative n_sessions {n}", line)
            if n == 0:
                dropped += 1
                continue
            out.append(UserAggregate(row["user_id"], n, s))
    if dropped:
        log.warning("dropped %d users with zero sessions", dropped)
    return out


@dataclass(frozen=True)
class TrafficPlan:
    required_users_per_arm: int
    available_users_in_window: int
    pct_per_arm: float
    window_days: int | None
    feasible: bool
    advice: str


def traffic_plan(required_k: int, available_users: int,
                 window_days: int | None = None) -> TrafficPlan:
    """Share of the window's unique users each arm needs."""
    if required_k < 1:
        raise DomainError(f"required_k must be positive, got {required_k!r}")
    if available_users < 1:
        raise DomainError(f"available_users must be positive, got {available_users!r}")
    pct = required_k / available_users
    feasible = 2 * pct <= 1
    span = "the window" if window_days is None else f"{window_days} days"
    if feasible:
        advice = f"allocate {pct:.1%} of traffic to each arm and run for {span}"
    else:
        advice = (f"{2 * required_k} users are needed but only {available_users} were seen in "
                  f"{span}; choose a longer duration, re-estimate h from a window "
                  "of that length, and size again")
    return TrafficPlan(required_k, available_users, pct, window_days, feasible, advice)
