"""The guard proxy: data port, admin port and local console.

Every statement on the data port goes classify -> decide -> (DDL log) ->
execute or kill. A killed session gets its audit row written before the
socket is closed.
"""

from __future__ import annotations

import itertools
import logging
import os
import re
import socket
import socketserver
import threading
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Callable

from .admin import AdminControl
from .audit import AuditStore, DdlLogRecord, KilledSessionRecord
from .catalog import Catalog, DbUser, ExecResult
from .errors import (
    BindFailure,
    GuardError,
    StorageFailure,
    UnknownUser,
)
from .policy import Decision, Reason
from .protocol import MAX_FRAME, MAX_LINE, escape_field, one_line
from .sql import DDL, classify

log = logging.getLogger(__name__)

MAX_AUTH_FAILURES = 3
_STMT_RE = re.compile(rb"STMT (\d{1,10})\r?\n\Z")
_DATE_RE = re.compile(r"\d{4}-\d{2}-\d{2}\Z")

OPEN = "OPEN"
KILLED = "KILLED"
CLOSED = "CLOSED"


@dataclass
class Session:
    id: int
    user: str
    is_dba: bool
    connected_at: datetime
    state: str = OPEN
    sock: socket.socket | None = field(default=None, repr=False)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class _Handler(socketserver.StreamRequestHandler):
    def setup(self) -> None:
        super().setup()
        if self.request.family != socket.AF_UNIX:
            self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.server.guard._track(self.request)

    def finish(self) -> None:
        self.server.guard._untrack(self.request)
        try:
            super().finish()
        except OSError:
            pass


class _DataHandler(_Handler):
    def handle(self) -> None:
        self.server.guard.handle_session(self.request, self.rfile)


class _AdminHandler(_Handler):
    def handle(self) -> None:
        self.server.guard.handle_admin(self.request, self.rfile)


class _ConsoleHandler(_Handler):
    def handle(self) -> None:
        self.server.guard.handle_console(self.request, self.rfile)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True


class _UnixServer(socketserver.ThreadingUnixStreamServer):
    daemon_threads = False
    block_on_close = True


class GuardServer:
    def __init__(
        self,
        admin: AdminControl,
        catalog: Catalog,
        audit: AuditStore,
        host: str = "127.0.0.1",
        data_port: int = 0,
        admin_port: int = 0,
        console_path: str | Path | None = None,
        clock: Callable[[], datetime] | None = None,
        max_frame: int = MAX_FRAME,
    ):
        self.admin = admin
        self.catalog = catalog
        self.audit = audit
        self.host = host
        self.data_port = data_port
        self.admin_port = admin_port
        self.console_path = Path(console_path) if console_path else None
        self.clock = clock or (lambda: datetime.now(timezone.utc))
        self.max_frame = max_frame
        self.diagnostics: Counter[str] = Counter()
        self.sessions: dict[int, Session] = {}
        self._sessions_lock = threading.Lock()
        self._ids = itertools.count(audit.max_session_id() + 1)
        self._servers: list[socketserver.BaseServer] = []
        self._threads: list[threading.Thread] = []
        self._stopped = threading.Event()
        self._conns: set[socket.socket] = set()

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> GuardServer:
        try:
            data = _TCPServer((self.host, self.data_port), _DataHandler)
            admin = _TCPServer((self.host, self.admin_port), _AdminHandler)
        except OSError as exc:
            for s in self._servers:
                s.server_close()
            raise BindFailure(str(exc)) from exc
        self._servers = [data, admin]
        if self.console_path is not None:
            if self.console_path.exists():
                self.console_path.unlink()
            console = _UnixServer(str(self.console_path), _ConsoleHandler)
            os.chmod(self.console_path, 0o600)
            self._servers.append(console)
        for srv in self._servers:
            srv.guard = self
            t = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.1},
                                 name=f"guard-{type(srv).__name__}", daemon=True)
            t.start()
            self._threads.append(t)
        self.data_port = data.server_address[1]
        self.admin_port = admin.server_address[1]
        log.info("guard listening: data %s:%d admin %s:%d", self.host, self.data_port,
                 self.host, self.admin_port)
        return self

    @property
    def data_address(self) -> tuple[str, int]:
        return (self.host, self.data_port)

    @property
    def admin_address(self) -> tuple[str, int]:
        return (self.host, self.admin_port)

    def stop(self) -> None:
        """Stop listening, close open sessions and flush the audit files."""
        if self._stopped.is_set():
            return
        self._stopped.set()
        for srv in self._servers:
            srv.shutdown()
        with self._sessions_lock:
            open_sessions = list(self.sessions.values())
        for s in open_sessions:
            self._close(s, CLOSED)
        with self._sessions_lock:
            conns = list(self._conns)
        for sock in conns:
            self._shutdown_socket(sock)
        for srv in self._servers:
            srv.server_close()
        for t in self._threads:
            t.join(timeout=5)
        if self.console_path is not None and self.console_path.exists():
            self.console_path.unlink()
        self.audit.close()

    def __enter__(self) -> GuardServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _track(self, sock: socket.socket) -> None:
        with self._sessions_lock:
            self._conns.add(sock)
            stopping = self._stopped.is_set()
        if stopping:
            self._shutdown_socket(sock)

    def _untrack(self, sock: socket.socket) -> None:
        with self._sessions_lock:
            self._conns.discard(sock)

    # -- data port -----------------------------------------------------------

    def _send(self, sock: socket.socket, text: str) -> bool:
        try:
            sock.sendall(text.encode("utf-8"))
            return True
        except OSError:
            return False

    def _close(self, session: Session, state: str) -> None:
        with session.lock:
            if session.state != OPEN:
                return
            session.state = state
        self._shutdown_socket(session.sock)
        with self._sessions_lock:
            self.sessions.pop(session.id, None)

    @staticmethod
    def _shutdown_socket(sock: socket.socket | None) -> None:
        if sock is None:
            return
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass

    def handle_session(self, sock: socket.socket, rfile) -> str:
        line = rfile.readline(MAX_LINE)
        if not line.startswith(b"AUTH ") or not line.endswith(b"\n"):
            self._send(sock, "ERR protocol expected AUTH <username>\n")
            return CLOSED
        name = line[5:].strip().decode("utf-8", "replace")
        try:
            user = self.catalog.user(name)
        except UnknownUser:
            self._send(sock, f"ERR auth unknown user {one_line(name)}\n")
            return CLOSED
        session = Session(next(self._ids), user.name, user.is_dba, self.clock(), sock=sock)
        with self._sessions_lock:
            if self._stopped.is_set():
                return CLOSED
            self.sessions[session.id] = session
        self._send(sock, f"OK session={session.id}\n")
        try:
            while session.state == OPEN:
                header = rfile.readline(MAX_LINE)
                if not header:
                    break
                m = _STMT_RE.match(header)
                if not m:
                    self._send(sock, "ERR protocol expected STMT <nbytes>\n")
                    break
                n = int(m.group(1))
                if n > self.max_frame:
                    self._send(sock, f"ERR frame_too_large statement exceeds {self.max_frame} bytes\n")
                    break
                data = rfile.read(n)
                if len(data) != n:
                    break
                try:
                    text = data.decode("utf-8")
                except UnicodeDecodeError:
                    self._send(sock, "ERR protocol statement is not UTF-8\n")
                    break
                reply = self.process(session, user, text)
                if reply is not None and not self._send(sock, reply):
                    break
        except OSError:
            pass
        finally:
            self._close(session, CLOSED)
        return session.state

    def process(self, session: Session, user: DbUser, text: str) -> str | None:
        """Run one statement. Returns the reply, or None once the session is killed."""
        snap = self.admin.snapshot()
        stmt = classify(text, user.default_schema, snap.config.dictionary_views)
        now = self.clock()
        decision = snap.decide(user.name, user.is_dba, stmt, now)
        if stmt.cls == DDL:
            try:
                self.audit.record_ddl(
                    DdlLogRecord(session.id, user.name, text, decision.verdict, now),
                    checked=True)
            except StorageFailure as exc:
                self.diagnostics["storage_failure"] += 1
                log.error("ddl_log append failed: %s", exc)
                if decision.allowed:
                    return f"ERR storage_failure {one_line(exc)}\n"
        if not decision.allowed:
            self.kill_session(session, decision, text, now)
            return None
        if stmt.error is not None:
            return f"ERR {stmt.error.code} {one_line(stmt.error)}\n"
        try:
            result = self.catalog.execute(stmt, user)
        except GuardError as exc:
            return f"ERR {exc.code} {one_line(exc)}\n"
        return format_result(result)

    def kill_session(self, session: Session, decision: Decision | Reason, statement: str = "",
                     at: datetime | None = None) -> None:
        reason = decision.reason if isinstance(decision, Decision) else Reason(decision)
        with session.lock:
            if session.state != OPEN:
                return
            session.state = KILLED
        at = at or self.clock()
        try:
            self.audit.record_killed(
                KilledSessionRecord(session.id, session.user, statement, reason, at))
        except GuardError as exc:
            self.diagnostics["storage_failure"] += 1
            log.error("killed_sessions append failed for session %d: %s", session.id, exc)
        log.warning("killed session %d (%s): %s", session.id, session.user, reason.value)
        # gone from the table before the client can observe the KILL
        with self._sessions_lock:
            self.sessions.pop(session.id, None)
        if session.sock is not None:
            self._send(session.sock, f"KILL {reason.value}\n")
            self._shutdown_socket(session.sock)

    # -- admin port ----------------------------------------------------------

    def handle_admin(self, sock: socket.socket, rfile) -> None:
        failures = 0
        while True:
            line = rfile.readline(MAX_LINE)
            if not line:
                return
            text = line.decode("utf-8", "replace").rstrip("\r\n")
            if not text.startswith("AUTH "):
                self._send(sock, "ERR protocol expected AUTH <password>\n")
                return
            password = text[5:]
            if self.admin.verify(password):
                self._send(sock, "OK authenticated\n")
                break
            failures += 1
            self.diagnostics["bad_password"] += 1
            self._send(sock, "ERR bad_password password rejected\n")
            if failures >= MAX_AUTH_FAILURES:
                return
        ctx = {"password": password}
        while True:
            line = rfile.readline(MAX_LINE)
            if not line:
                return
            text = line.decode("utf-8", "replace").rstrip("\r\n")
            if not text.strip():
                continue
            reply = self.admin_command(text, ctx)
            if isinstance(reply, bytes):
                if not self._send_bytes(sock, reply):
                    return
            elif not self._send(sock, reply):
                return
            if text.split()[0].upper() == "QUIT":
                return

    def _send_bytes(self, sock: socket.socket, data: bytes) -> bool:
        try:
            sock.sendall(data)
            return True
        except OSError:
            return False

    def admin_command(self, line: str, ctx: dict) -> str | bytes:
        """Execute one admin line for a session authenticated with ctx["password"]."""
        words = line.split()
        cmd, args = words[0].upper(), words[1:]
        try:
            return self._dispatch(cmd, args, ctx)
        except GuardError as exc:
            return f"ERR {exc.code} {one_line(exc)}\n"
        except (ValueError, IndexError) as exc:
            return f"ERR usage {one_line(exc)}\n"

    def _dispatch(self, cmd: str, args: list[str], ctx: dict) -> str | bytes:
        admin = self.admin
        if cmd == "SET_SECURITY":
            if len(args) != 1 or args[0].lower() not in ("on", "off"):
                raise ValueError("SET_SECURITY on|off")
            # re-verified: the password may have changed since this session authenticated
            admin.set_security(ctx["password"], args[0].lower() == "on")
            return f"OK security={args[0].lower()}\n"
        if cmd == "SET_PASSWORD":
            if len(args) != 2:
                raise ValueError("SET_PASSWORD <old> <new>")
            admin.set_password(args[0], args[1])
            ctx["password"] = args[1]
            return "OK password_changed\n"
        if cmd == "ADD_OBJECT":
            _arity(args, 3, "ADD_OBJECT <owner> <type> <name>")
            admin.add_object(*args)
            return "OK added\n"
        if cmd == "REMOVE_OBJECT":
            _arity(args, 3, "REMOVE_OBJECT <owner> <type> <name>")
            admin.remove_object(*args)
            return "OK removed\n"
        if cmd == "GRANT":
            if len(args) < 4:
                raise ValueError("GRANT <user> <owner> <type> <name> [key=value ...]")
            opts = _grant_options(args[4:])
            admin.grant_permission(*args[:4], **opts)
            return "OK granted\n"
        if cmd == "REVOKE":
            _arity(args, 4, "REVOKE <user> <owner> <type> <name>")
            admin.revoke_permission(*args)
            return "OK revoked\n"
        if cmd == "EXPORT_KILLED":
            opts = _key_values(args, {"from", "to"})
            body = self.audit.export_killed(_date(opts.get("from")), _date(opts.get("to")))
            data = body.encode("utf-8")
            return b"OK export %d\n" % len(data) + data
        if cmd == "STATUS":
            st = admin.state
            return (f"OK enabled={'on' if st.config.enabled else 'off'} version={st.version} "
                    f"objects={len(st.registry)} grants={len(st.grants)} "
                    f"sessions={len(self.sessions)}\n")
        if cmd == "QUIT":
            return "OK bye\n"
        if cmd == "RESET_PASSWORD":
            return "ERR not_permitted reset_password is only available on the local console\n"
        return f"ERR unknown_command {one_line(cmd)}\n"

    # -- local console -------------------------------------------------------

    def handle_console(self, sock: socket.socket, rfile) -> None:
        line = rfile.readline(MAX_LINE).decode("utf-8", "replace").strip()
        if line.upper() != "RESET_PASSWORD":
            self._send(sock, "ERR unknown_command console accepts RESET_PASSWORD only\n")
            return
        try:
            event = self.admin.reset_password()
        except GuardError as exc:
            self._send(sock, f"ERR {exc.code} {one_line(exc)}\n")
            return
        self._send(sock, f"OK reset recipient={event.recipient}\n")


def format_result(result: ExecResult) -> str:
    if not result.is_rowset:
        return "OK\n"
    lines = [f"ROWS {len(result.rows)}\n"]
    lines.extend("\t".join(escape_field(v) for v in row) + "\n" for row in result.rows)
    return "".join(lines)


def _arity(args: list[str], n: int, usage: str) -> None:
    if len(args) != n:
        raise ValueError(usage)


def _key_values(args: list[str], allowed: set[str]) -> dict[str, str]:
    out = {}
    for a in args:
        key, sep, value = a.partition("=")
        if not sep or key not in allowed or not value:
            raise ValueError(f"bad option {a!r}; expected one of {sorted(allowed)} as key=value")
        out[key] = value
    return out


def _date(text: str | None) -> date | None:
    if text is None:
        return None
    if not _DATE_RE.match(text):
        raise ValueError(f"bad date {text!r}; expected YYYY-MM-DD")
    return date.fromisoformat(text)


def _hour(text: str | None) -> int | None:
    if text is None:
        return None
    if not text.isdigit():
        raise ValueError(f"bad hour {text!r}")
    return int(text)


def _grant_options(args: list[str]) -> dict:
    opts = _key_values(args, {"start_date", "end_date", "start_hour", "end_hour"})
    return {
        "start_date": _date(opts.get("start_date")),
        "end_date": _date(opts.get("end_date")),
        "start_hour": _hour(opts.get("start_hour")),
        "end_hour": _hour(opts.get("end_hour")),
    }
