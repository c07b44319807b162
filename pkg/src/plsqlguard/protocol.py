"""Wire format helpers and blocking clients for the data and admin ports.

Data port, client side::

    AUTH <username>\\n
    STMT <nbytes>\\n<nbytes of UTF-8 statement>

Server replies ``OK session=<id>`` after AUTH and one of ``OK``,
``ROWS <n>`` plus n tab-separated lines, ``ERR <code> <message>`` or
``KILL <reason>`` (followed by close) per statement.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass, field

MAX_FRAME = 1024 * 1024
MAX_LINE = 4096


def escape_field(value) -> str:
    return (str(value).replace("\\", "\\\\").replace("\t", "\\t")
            .replace("\n", "\\n").replace("\r", "\\r"))


def unescape_field(value: str) -> str:
    out = []
    it = iter(value)
    for c in it:
        if c == "\\":
            nxt = next(it, "")
            out.append({"t": "\t", "n": "\n", "r": "\r"}.get(nxt, nxt))
        else:
            out.append(c)
    return "".join(out)


def one_line(text: str) -> str:
    return " ".join(str(text).split())


class ConnectionClosed(Exception):
    pass


@dataclass
class Reply:
    status: str  # OK, ROWS, ERR, KILL
    text: str
    rows: list[tuple[str, ...]] = field(default_factory=list)

    @property
    def code(self) -> str:
        return self.text.split(" ", 1)[0] if self.text else ""

    def lines(self) -> list[str]:
        head = f"{self.status} {self.text}".rstrip()
        return [head] + ["\t".join(escape_field(f) for f in r) for r in self.rows]


class _LineSocket:
    def __init__(self, host: str, port: int, timeout: float | None = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.rfile = self.sock.makefile("rb")

    def readline(self) -> str:
        try:
            line = self.rfile.readline(MAX_FRAME + MAX_LINE)
        except (ConnectionResetError, OSError) as exc:
            raise ConnectionClosed(str(exc)) from exc
        if not line:
            raise ConnectionClosed("server closed the connection")
        return line.decode("utf-8").rstrip("\r\n")

    def read_exact(self, n: int) -> bytes:
        data = self.rfile.read(n)
        if len(data) != n:
            raise ConnectionClosed("short read")
        return data

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ConnectionClosed(str(exc)) from exc

    def close(self) -> None:
        try:
            self.rfile.close()
        finally:
            self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SqlClient(_LineSocket):
    """One database session through the guard."""

    def __init__(self, host: str, port: int, user: str, timeout: float | None = 30.0):
        super().__init__(host, port, timeout)
        self.session_id: int | None = None
        self.closed = False
        self.send(f"AUTH {user}\n".encode("utf-8"))
        line = self.readline()
        if not line.startswith("OK session="):
            self.close()
            raise PermissionError(line)
        self.session_id = int(line.split("=", 1)[1])

    def execute(self, statement: str) -> Reply:
        data = statement.encode("utf-8")
        self.send(b"STMT %d\n" % len(data) + data)
        return self._reply()

    def _reply(self) -> Reply:
        try:
            line = self.readline()
        except ConnectionClosed:
            self.closed = True
            raise
        status, _, rest = line.partition(" ")
        if status == "ROWS":
            n = int(rest)
            rows = [tuple(unescape_field(f) for f in self.readline().split("\t"))
                    for _ in range(n)]
            return Reply("ROWS", rest, rows)
        if status == "KILL":
            self.closed = True
        return Reply(status, rest)


class AdminClient(_LineSocket):
    def __init__(self, host: str, port: int, password: str, timeout: float | None = 30.0):
        super().__init__(host, port, timeout)
        self.send(f"AUTH {password}\n".encode("utf-8"))
        line = self.readline()
        if not line.startswith("OK"):
            self.close()
            raise PermissionError(line)

    def command(self, line: str) -> str:
        self.send(line.encode("utf-8") + b"\n")
        return self.readline()

    def export_killed(self, start: str | None = None, end: str | None = None) -> str:
        cmd = "EXPORT_KILLED"
        if start:
            cmd += f" from={start}"
        if end:
            cmd += f" to={end}"
        reply = self.command(cmd)
        if not reply.startswith("OK export "):
            raise RuntimeError(reply)
        n = int(reply.rsplit(" ", 1)[1])
        return self.read_exact(n).decode("utf-8")
