import csv
import io
from datetime import date, datetime, timedelta, timezone

import pytest
from hypothesis import given, strategies as st

from plsqlguard.audit import (
    KILLED_HEADER, AuditStore, DdlLogRecord, KilledSessionRecord, format_ts, parse_killed_csv,
    parse_ts,
)
from plsqlguard.errors import DuplicateSession, InvalidRange, InvalidRecord, NotDdl
from plsqlguard.policy import Reason, Verdict

T0 = datetime(2024, 5, 1, 8, 0, tzinfo=timezone.utc)


def killed(sid, when=T0, stmt="DROP PACKAGE hr.emp_actions;", reason=Reason.PROTECTED_OBJECT):
    return KilledSessionRecord(sid, "SYS", stmt, reason, when)


@pytest.fixture
def store(tmp_path):
    s = AuditStore(tmp_path, fsync=False)
    yield s
    s.close()


def test_empty_export_is_header_only(store):
    assert store.export_killed() == "session_id,user,statement,reason,killed_at\n"


def test_record_then_export(store):
    store.record_killed(killed(7))
    rows = parse_killed_csv(store.export_killed())
    assert rows == [killed(7)]


def test_duplicate_session_rejected(store):
    store.record_killed(killed(1))
    with pytest.raises(DuplicateSession):
        store.record_killed(killed(1, reason=Reason.GUARD_OBJECT))
    assert len(store.killed_records()) == 1


def test_non_kill_reason_rejected(store):
    with pytest.raises(InvalidRecord):
        store.record_killed(killed(1, reason=Reason.OK))


def test_range_filter_matches_brute_force(store):
    days = [datetime(2024, 5, d, h, tzinfo=timezone.utc) for d, h in ((1, 1), (2, 23), (3, 0))]
    for i, when in enumerate(days):
        store.record_killed(killed(i + 1, when))
    mid = days[1].date()
    rows = parse_killed_csv(store.export_killed(mid, mid))
    assert [r.session_id for r in rows] == [2]
    for start in (None, days[0].date(), mid):
        for end in (None, mid, days[2].date()):
            if start and end and start > end:
                continue
            want = [r for r in store.killed_records()
                    if (start is None or r.killed_at.date() >= start)
                    and (end is None or r.killed_at.date() <= end)]
            assert parse_killed_csv(store.export_killed(start, end)) == want


def test_invalid_range(store):
    with pytest.raises(InvalidRange):
        store.export_killed(date(2024, 2, 1), date(2024, 1, 1))


def test_export_sorted_by_time(store):
    store.record_killed(killed(1, T0 + timedelta(hours=2)))
    store.record_killed(killed(2, T0))
    assert [r.session_id for r in parse_killed_csv(store.export_killed())] == [2, 1]


def test_quoting(store):
    stmt = 'UPDATE t SET a = "x", b = \'y,z\'\nWHERE 1=1'
    store.record_killed(killed(3, stmt=stmt))
    text = store.export_killed()
    assert '"UPDATE t SET a = ""x"", b' in text
    assert parse_killed_csv(text)[0].statement == stmt


@pytest.mark.parametrize("stmt", ["\r", "a\rb", "\r\n", "x\n\r"])
def test_carriage_returns_survive(tmp_path, stmt):
    s = AuditStore(tmp_path, fsync=False)
    s.record_killed(killed(1, stmt=stmt))
    s.close()
    s = AuditStore(tmp_path, fsync=False)
    assert s.killed_records() == [killed(1, stmt=stmt)]
    assert parse_killed_csv(s.export_killed())[0].statement == stmt
    s.close()


def test_unfiltered_export_equals_file(store):
    for i in range(5):
        store.record_killed(killed(i, T0 + timedelta(minutes=i), stmt=f"DROP TABLE t{i}, x"))
    assert store.export_killed() == store.killed_path.read_text(encoding="utf-8")


def test_ddl_log_accepts_only_ddl(store):
    store.record_ddl(DdlLogRecord(1, "SCOTT", "CREATE TABLE t (a NUMBER)", Verdict.ALLOW, T0))
    store.record_ddl(DdlLogRecord(2, "SYS", "DROP PACKAGE hr.emp_actions", Verdict.KILL, T0))
    with pytest.raises(NotDdl):
        store.record_ddl(DdlLogRecord(3, "HR", "UPDATE t SET a = 1", Verdict.ALLOW, T0))
    assert [(r.session_id, r.verdict) for r in store.ddl_records()] == [
        (1, Verdict.ALLOW), (2, Verdict.KILL)]


def test_records_survive_reopen(tmp_path):
    s = AuditStore(tmp_path, fsync=True)
    s.record_killed(killed(9))
    s.record_ddl(DdlLogRecord(9, "SYS", "DROP TABLE x", Verdict.KILL, T0))
    s.close()
    s = AuditStore(tmp_path)
    assert s.killed_records() == [killed(9)]
    assert s.max_session_id() == 9
    with pytest.raises(DuplicateSession):
        s.record_killed(killed(9))
    s.close()


@pytest.mark.parametrize("torn", [b'10,SYS,"DROP TABLE', b"10,SYS,DROP", b'11,SYS,"a\n',
                                  b"12,SYS\n"])
def test_torn_trailing_record_dropped(tmp_path, torn):
    s = AuditStore(tmp_path, fsync=False)
    s.record_killed(killed(1, stmt="multi\nline"))
    s.close()
    with open(tmp_path / "killed_sessions.csv", "ab") as fh:
        fh.write(torn)
    s = AuditStore(tmp_path, fsync=False)
    assert s.killed_records() == [killed(1, stmt="multi\nline")]
    s.record_killed(killed(2))
    assert [r.session_id for r in s.killed_records()] == [1, 2]
    s.close()


def test_timestamp_format():
    assert format_ts(datetime(2024, 1, 2, 3, 4, 5, 6, tzinfo=timezone.utc)) == \
        "2024-01-02T03:04:05.000006Z"
    assert parse_ts("2024-01-02T03:04:05Z") == datetime(2024, 1, 2, 3, 4, 5, tzinfo=timezone.utc)


statements = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"),
                     max_size=60)


@given(st.lists(st.tuples(statements, st.sampled_from(sorted(Reason.__members__)),
                          st.integers(0, 10**6)), max_size=12))
def test_export_round_trip(tmp_path_factory, items):
    d = tmp_path_factory.mktemp("audit")
    s = AuditStore(d, fsync=False)
    expected = []
    for i, (stmt, reason, offset) in enumerate(items):
        reason = Reason[reason]
        if reason in (Reason.OK, Reason.DISABLED_PASSTHROUGH):
            continue
        r = KilledSessionRecord(i, "SCOTT", stmt, reason, T0 + timedelta(seconds=offset))
        s.record_killed(r)
        expected.append(r)
    got = parse_killed_csv(s.export_killed())
    assert got == sorted(expected, key=lambda r: r.killed_at)
    header = next(csv.reader(io.StringIO(s.export_killed())))
    assert tuple(header) == KILLED_HEADER
    s.close()
