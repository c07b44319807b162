"""Append-only audit tables: killed sessions and the DDL log.

Both live as CSV files in the state directory, written with the same
quoting the export uses, so an unfiltered export of a chronologically
written file is byte-identical to the file itself.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import threading
from dataclasses import dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable

from .errors import DuplicateSession, InvalidRange, InvalidRecord, NotDdl, StorageFailure
from .policy import KILL_REASONS, Reason, Verdict
from .sql import DDL, classify

log = logging.getLogger(__name__)

KILLED_FILE = "killed_sessions.csv"
DDL_FILE = "ddl_log.csv"
KILLED_HEADER = ("session_id", "user", "statement", "reason", "killed_at")
DDL_HEADER = ("session_id", "user", "statement", "verdict", "logged_at")


def format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_ts(text: str) -> datetime:
    if not text.endswith("Z"):
        raise ValueError(f"timestamp without Z: {text!r}")
    body = text[:-1]
    fmt = "%Y-%m-%dT%H:%M:%S.%f" if "." in body else "%Y-%m-%dT%H:%M:%S"
    return datetime.strptime(body, fmt).replace(tzinfo=timezone.utc)


@dataclass(frozen=True)
class KilledSessionRecord:
    session_id: int
    user: str
    statement: str
    reason: Reason
    killed_at: datetime

    def row(self) -> tuple[str, ...]:
        return (str(self.session_id), self.user, self.statement, self.reason.value,
                format_ts(self.killed_at))


@dataclass(frozen=True)
class DdlLogRecord:
    session_id: int
    user: str
    statement: str
    verdict: Verdict
    logged_at: datetime

    def row(self) -> tuple[str, ...]:
        return (str(self.session_id), self.user, self.statement, self.verdict.value,
                format_ts(self.logged_at))


def _write_rows(buf: io.StringIO, rows: Iterable[Iterable[str]]) -> None:
    # QUOTE_MINIMAL leaves a bare \r unquoted when the terminator is \n,
    # and readers then split the record there
    minimal = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    quoted = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_ALL)
    for row in rows:
        row = list(row)
        (quoted if any("\r" in f for f in row) else minimal).writerow(row)


def to_csv(header: Iterable[str], rows: Iterable[Iterable[str]]) -> str:
    buf = io.StringIO()
    _write_rows(buf, [header])
    _write_rows(buf, rows)
    return buf.getvalue()


def _csv_line(row: Iterable[str]) -> str:
    buf = io.StringIO()
    _write_rows(buf, [row])
    return buf.getvalue()


def parse_killed_csv(text: str) -> list[KilledSessionRecord]:
    rows = list(csv.reader(io.StringIO(text, newline="")))
    if not rows or tuple(rows[0]) != KILLED_HEADER:
        raise ValueError("missing killed_sessions header")
    return [KilledSessionRecord(int(r[0]), r[1], r[2], Reason(r[3]), parse_ts(r[4]))
            for r in rows[1:]]


def parse_ddl_csv(text: str) -> list[DdlLogRecord]:
    rows = list(csv.reader(io.StringIO(text, newline="")))
    if not rows or tuple(rows[0]) != DDL_HEADER:
        raise ValueError("missing ddl_log header")
    return [DdlLogRecord(int(r[0]), r[1], r[2], Verdict(r[3]), parse_ts(r[4]))
            for r in rows[1:]]


class _AppendFile:
    """One CSV table. Appends are serialized and fsync'd before returning."""

    def __init__(self, path: Path, header: tuple[str, ...], fsync: bool):
        self.path = path
        self.header = header
        self.fsync = fsync
        self.lock = threading.Lock()
        self._recover()
        self._fh = open(self.path, "a", encoding="utf-8", newline="")

    def _recover(self) -> None:
        """Create the file, or cut off a torn final record left by a crash.
        A torn record was never acknowledged, so dropping it loses nothing."""
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.write_text(_csv_line(self.header), encoding="utf-8", newline="")
            return
        data = self.path.read_bytes()
        good = _complete_prefix(data)
        if good == 0:
            raise StorageFailure(f"{self.path}: unreadable header")
        if good != len(data):
            log.warning("%s: dropping %d bytes of torn record", self.path, len(data) - good)
            with open(self.path, "r+b") as fh:
                fh.truncate(good)

    def append(self, row: Iterable[str]) -> None:
        line = _csv_line(row)
        with self.lock:
            try:
                self._fh.write(line)
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            except OSError as exc:
                raise StorageFailure(f"{self.path}: {exc}") from exc

    def read(self) -> str:
        with self.lock:
            self._fh.flush()
            with open(self.path, encoding="utf-8", newline="") as fh:
                return fh.read()

    def close(self) -> None:
        with self.lock:
            if not self._fh.closed:
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
                self._fh.close()


def _complete_prefix(data: bytes) -> int:
    """Length of the longest prefix of *data* made of whole CSV records."""
    end = len(data)
    while end > 0:
        if data.endswith(b"\n", 0, end):
            try:
                text = data[:end].decode("utf-8")
                rows = list(csv.reader(io.StringIO(text, newline=""), strict=True))
                width = len(rows[0]) if rows else 0
                if rows and text.count('"') % 2 == 0 and all(len(r) == width for r in rows):
                    return end
            except (csv.Error, UnicodeDecodeError):
                pass
        end = data.rfind(b"\n", 0, end - 1) + 1 if end > 1 else 0
    return 0


class AuditStore:
    def __init__(self, state_dir: str | Path, fsync: bool = True):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        try:
            self._killed = _AppendFile(self.state_dir / KILLED_FILE, KILLED_HEADER, fsync)
            self._ddl = _AppendFile(self.state_dir / DDL_FILE, DDL_HEADER, fsync)
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc
        self._killed_ids = {r.session_id for r in self.killed_records()}

    @property
    def killed_path(self) -> Path:
        return self._killed.path

    @property
    def ddl_path(self) -> Path:
        return self._ddl.path

    def max_session_id(self) -> int:
        ids = [r.session_id for r in self.ddl_records()] + list(self._killed_ids)
        return max(ids, default=0)

    def record_killed(self, r: KilledSessionRecord) -> None:
        if r.reason not in KILL_REASONS:
            raise InvalidRecord(f"{r.reason} is not a kill reason")
        if r.session_id < 0:
            raise InvalidRecord("negative session id")
        with self._killed.lock:
            if r.session_id in self._killed_ids:
                raise DuplicateSession(f"session {r.session_id} was already killed")
            self._killed_ids.add(r.session_id)
        try:
            self._killed.append(r.row())
        except StorageFailure:
            with self._killed.lock:
                self._killed_ids.discard(r.session_id)
            raise

    def record_ddl(self, r: DdlLogRecord, checked: bool = False) -> None:
        """Append a DDL log row. Unless *checked*, the statement is classified
        again and anything that is not DDL is refused."""
        if not checked and classify(r.statement, r.user).cls != DDL:
            raise NotDdl("only DDL statements go to the DDL log")
        self._ddl.append(r.row())

    def killed_records(self) -> list[KilledSessionRecord]:
        return parse_killed_csv(self._killed.read())

    def ddl_records(self) -> list[DdlLogRecord]:
        return parse_ddl_csv(self._ddl.read())

    def export_killed(self, start: date | None = None, end: date | None = None) -> str:
        """CSV of killed sessions whose UTC date lies in [start, end]."""
        if start is not None and end is not None and start > end:
            raise InvalidRange(f"{start} is after {end}")
        selected = []
        for r in self.killed_records():
            d = r.killed_at.astimezone(timezone.utc).date()
            if start is not None and d < start:
                continue
            if end is not None and d > end:
                continue
            selected.append(r)
        selected.sort(key=lambda r: r.killed_at)
        return to_csv(KILLED_HEADER, (r.row() for r in selected))

    def close(self) -> None:
        self._killed.close()
        self._ddl.close()
