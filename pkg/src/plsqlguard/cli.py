"""Command line tools: guardd, guardctl, sqlc and wrap.

Exit codes are shared by all four: 0 success, 1 operational error,
2 usage error.
"""

from __future__ import annotations

import argparse
import getpass
import logging
import re
import signal
import sys
import threading
from dataclasses import dataclass
from pathlib import Path

from .admin import AdminControl, FileOutbox, init_state, is_initialized
from .audit import AuditStore
from .catalog import Catalog, load_users, run_seed
from .errors import GuardError, SqlError, WrapError
from .protocol import AdminClient, ConnectionClosed, SqlClient, one_line
from .server import GuardServer
from .sql import SOURCE_VIEWS, split_script
from .wrap import resolve_iname, wrap_file

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2

DEFAULT_DATA_PORT = 15210
DEFAULT_ADMIN_PORT = 15211


class UsageError(Exception):
    pass


@dataclass
class ServerConfig:
    state_dir: Path
    users_file: Path
    host: str = "127.0.0.1"
    data_port: int = DEFAULT_DATA_PORT
    admin_port: int = DEFAULT_ADMIN_PORT
    seed_sql: Path | None = None
    outbox_dir: Path | None = None
    console: Path | None = None
    officer: str = "security-officer"
    dictionary_views: frozenset[str] = SOURCE_VIEWS
    fsync: bool = True


def load_config(path: str | Path) -> ServerConfig:
    """Parse a key=value config file. Relative paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    kv: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        kv[key.strip()] = value.strip()
    base = path.parent

    def p(key: str) -> Path | None:
        v = kv.get(key)
        if not v:
            return None
        q = Path(v)
        return q if q.is_absolute() else base / q

    known = {"data_port", "admin_port", "state_dir", "users_file", "seed_sql", "outbox_dir",
             "host", "console", "officer", "dictionary_views", "fsync"}
    unknown = set(kv) - known
    if unknown:
        raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
    if "state_dir" not in kv or "users_file" not in kv:
        raise UsageError(f"{path}: state_dir and users_file are required")
    try:
        cfg = ServerConfig(
            state_dir=p("state_dir"),
            users_file=p("users_file"),
            host=kv.get("host", "127.0.0.1"),
            data_port=int(kv.get("data_port", DEFAULT_DATA_PORT)),
            admin_port=int(kv.get("admin_port", DEFAULT_ADMIN_PORT)),
            seed_sql=p("seed_sql"),
            outbox_dir=p("outbox_dir"),
            officer=kv.get("officer", "security-officer"),
            fsync=kv.get("fsync", "1").lower() not in ("0", "false", "no", "off"),
        )
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if "dictionary_views" in kv:
        cfg.dictionary_views = frozenset(v.strip().upper()
                                         for v in kv["dictionary_views"].split(",") if v.strip())
    if cfg.outbox_dir is None:
        cfg.outbox_dir = cfg.state_dir / "outbox"
    if "console" in kv:
        cfg.console = p("console")
    else:
        cfg.console = cfg.state_dir / "console.sock"
    return cfg


def _read_password(path: str | None, prompt: str, confirm: bool = False) -> str:
    if path:
        return Path(path).read_text(encoding="utf-8").rstrip("\r\n")
    pw = getpass.getpass(prompt)
    if confirm and getpass.getpass("Repeat: ") != pw:
        raise GuardError("passwords do not match")
    return pw


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        _err(f"{self.prog}: error: {message}")
        raise SystemExit(EXIT_USAGE)


# --------------------------------------------------------------------------
# guardd


def build_server(cfg: ServerConfig) -> GuardServer:
    users = load_users(cfg.users_file)
    admin = AdminControl.open(cfg.state_dir, notifier=FileOutbox(cfg.outbox_dir, cfg.officer),
                              recipient=cfg.officer)
    catalog = Catalog(users, admin.state.config.dictionary_views)
    if cfg.seed_sql is not None:
        run_seed(catalog, cfg.seed_sql)
    audit = AuditStore(cfg.state_dir, fsync=cfg.fsync)
    return GuardServer(admin, catalog, audit, cfg.host, cfg.data_port, cfg.admin_port,
                       console_path=cfg.console)


def guardd_main(argv: list[str] | None = None) -> int:
    ap = _Parser(prog="guardd", description="Run the guard proxy.")
    ap.add_argument("--config", required=True, help="key=value server configuration")
    ap.add_argument("--init", action="store_true", help="initialize the state directory and exit")
    ap.add_argument("--password-file", help="read the initial password from this file")
    ap.add_argument("--log-level", default="INFO")
    args = ap.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except UsageError as exc:
        _err(f"guardd: {exc}")
        return EXIT_USAGE

    if args.init:
        if is_initialized(cfg.state_dir):
            _err(f"guardd: {cfg.state_dir} is already initialized; refusing")
            return EXIT_ERROR
        try:
            pw = _read_password(args.password_file, "New guard password: ", confirm=True)
            init_state(cfg.state_dir, pw, cfg.dictionary_views)
        except (GuardError, OSError) as exc:
            _err(f"guardd: {exc}")
            return EXIT_ERROR
        print(f"initialized {cfg.state_dir}")
        return EXIT_OK

    try:
        server = build_server(cfg)
        server.start()
    except GuardError as exc:
        _err(f"guardd: refusing to start: {exc.code}: {exc}")
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        _err(f"guardd: refusing to start: {exc}")
        return EXIT_ERROR

    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    print(f"listening data={server.host}:{server.data_port} "
          f"admin={server.host}:{server.admin_port}", flush=True)
    while not stop.wait(0.5):
        pass
    server.stop()
    print("stopped", flush=True)
    return EXIT_OK


# --------------------------------------------------------------------------
# guardctl


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _hour(text: str) -> int:
    if not text.isdigit():
        raise argparse.ArgumentTypeError(f"bad hour {text!r}")
    return int(text)


def _object_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("owner")
    p.add_argument("obj_type", metavar="type")
    p.add_argument("name")


def guardctl_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="guardctl", description="Administer a running guard.")
    ap.add_argument("--server", type=_address, default=("127.0.0.1", DEFAULT_ADMIN_PORT),
                    help="admin port as host:port")
    ap.add_argument("--password-file", help="file holding the guard password")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    sub.add_parser("status")
    p = sub.add_parser("set-security")
    p.add_argument("state", choices=["on", "off"])
    p = sub.add_parser("set-password")
    p.add_argument("--new-password-file", help="file holding the new password")
    _object_args(sub.add_parser("add-object"))
    _object_args(sub.add_parser("remove-object"))
    p = sub.add_parser("grant")
    p.add_argument("user")
    _object_args(p)
    p.add_argument("--start-date")
    p.add_argument("--end-date")
    p.add_argument("--start-hour", type=_hour)
    p.add_argument("--end-hour", type=_hour)
    p = sub.add_parser("revoke")
    p.add_argument("user")
    _object_args(p)
    p = sub.add_parser("export-killed")
    p.add_argument("--from", dest="start")
    p.add_argument("--to", dest="end")
    p.add_argument("--out", help="write CSV here instead of standard output")
    p = sub.add_parser("reset-password", help="rotate the password via the local console socket")
    p.add_argument("--console", required=True, help="console socket path (state_dir/console.sock)")
    return ap


# guardctl subcommand -> admin protocol command
GUARDCTL_COMMANDS = {
    "status": "STATUS",
    "set-security": "SET_SECURITY",
    "set-password": "SET_PASSWORD",
    "add-object": "ADD_OBJECT",
    "remove-object": "REMOVE_OBJECT",
    "grant": "GRANT",
    "revoke": "REVOKE",
    "export-killed": "EXPORT_KILLED",
    "reset-password": "RESET_PASSWORD",
}


def _admin_line(args, password: str) -> str:
    cmd = GUARDCTL_COMMANDS[args.cmd]
    if args.cmd == "set-security":
        return f"{cmd} {args.state}"
    if args.cmd == "set-password":
        new = _read_password(args.new_password_file, "New guard password: ", confirm=True)
        return f"{cmd} {password} {new}"
    if args.cmd in ("add-object", "remove-object"):
        return f"{cmd} {args.owner} {args.obj_type} {args.name}"
    if args.cmd == "revoke":
        return f"{cmd} {args.user} {args.owner} {args.obj_type} {args.name}"
    if args.cmd == "grant":
        line = f"{cmd} {args.user} {args.owner} {args.obj_type} {args.name}"
        for key in ("start_date", "end_date", "start_hour", "end_hour"):
            value = getattr(args, key)
            if value is not None:
                line += f" {key}={value}"
        return line
    return cmd


def _console_reset(path: str) -> int:
    import socket

    try:
        with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
            s.settimeout(30)
            s.connect(path)
            s.sendall(b"RESET_PASSWORD\n")
            reply = s.makefile("rb").readline().decode("utf-8").strip()
    except OSError as exc:
        _err(f"guardctl: cannot reach console {path}: {exc}")
        return EXIT_ERROR
    print(reply)
    return EXIT_OK if reply.startswith("OK") else EXIT_ERROR


def guardctl_main(argv: list[str] | None = None) -> int:
    args = guardctl_parser().parse_args(argv)
    if args.cmd == "reset-password":
        return _console_reset(args.console)
    host, port = args.server
    try:
        password = _read_password(args.password_file, "Guard password: ")
    except (OSError, GuardError) as exc:
        _err(f"guardctl: {exc}")
        return EXIT_ERROR
    try:
        with AdminClient(host, port, password) as client:
            if args.cmd == "export-killed":
                try:
                    body = client.export_killed(args.start, args.end)
                except RuntimeError as exc:
                    print(exc)
                    return EXIT_ERROR
                if args.out:
                    Path(args.out).write_text(body, encoding="utf-8", newline="")
                    print(f"OK exported {body.count(chr(10)) - 1} rows to {args.out}")
                else:
                    sys.stdout.write(body)
                return EXIT_OK
            reply = client.command(_admin_line(args, password))
    except PermissionError as exc:
        _err(f"guardctl: authentication failed: {exc}")
        return EXIT_ERROR
    except (OSError, ConnectionClosed, GuardError) as exc:
        _err(f"guardctl: {exc}")
        return EXIT_ERROR
    print(reply)
    return EXIT_OK if reply.startswith("OK") else EXIT_ERROR


# --------------------------------------------------------------------------
# sqlc


def sqlc_main(argv: list[str] | None = None) -> int:
    ap = _Parser(prog="sqlc", description="Send SQL statements through the guard.")
    ap.add_argument("--server", type=_address, default=("127.0.0.1", DEFAULT_DATA_PORT),
                    help="data port as host:port")
    ap.add_argument("--user", required=True)
    ap.add_argument("script", nargs="?", default="-", help="SQL file, or - for standard input")
    args = ap.parse_args(argv)
    try:
        text = sys.stdin.read() if args.script == "-" else Path(args.script).read_text("utf-8")
        chunks = split_script(text)
    except (OSError, SqlError) as exc:
        _err(f"sqlc: {exc}")
        return EXIT_ERROR
    if not chunks:
        return EXIT_OK
    host, port = args.server
    status = EXIT_OK
    try:
        client = SqlClient(host, port, args.user)
    except PermissionError as exc:
        _err(f"sqlc: {exc}")
        return EXIT_ERROR
    except OSError as exc:
        _err(f"sqlc: cannot connect to {host}:{port}: {exc}")
        return EXIT_ERROR
    with client:
        for chunk in chunks:
            print(f"> {one_line(chunk.text)}")
            try:
                reply = client.execute(chunk.text)
            except ConnectionClosed as exc:
                print(f"< (connection closed: {exc})")
                return EXIT_ERROR
            for line in reply.lines():
                print(f"< {line}")
            if reply.status == "KILL":
                return EXIT_ERROR
            if reply.status == "ERR":
                status = EXIT_ERROR
    return status


# --------------------------------------------------------------------------
# wrap

WRAP_USAGE = "usage: wrap iname=input_file [oname=output_file]"
_WRAP_ARG = re.compile(r"(iname|oname)=(\S+)\Z")


def wrap_main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    opts: dict[str, str] = {}
    for a in argv:
        m = _WRAP_ARG.match(a)
        if not m or m.group(1) in opts:
            _err(WRAP_USAGE)
            return EXIT_USAGE
        opts[m.group(1)] = m.group(2)
    if "iname" not in opts:
        _err(WRAP_USAGE)
        return EXIT_USAGE
    try:
        out = wrap_file(opts["iname"], opts.get("oname"))
    except FileNotFoundError as exc:
        _err(f"wrap: {exc}")
        return EXIT_ERROR
    except (WrapError, SqlError, OSError) as exc:
        _err(f"wrap: {exc}")
        return EXIT_ERROR
    print(f"Processing {resolve_iname(opts['iname'])} to {out}")
    return EXIT_OK


TOOLS = {"guardd": guardd_main, "guardctl": guardctl_main, "sqlc": sqlc_main, "wrap": wrap_main}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] not in TOOLS:
        _err(f"usage: python -m plsqlguard {{{','.join(TOOLS)}}} ...")
        return EXIT_USAGE
    return TOOLS[argv[0]](argv[1:])
