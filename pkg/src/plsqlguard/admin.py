"""Guard administration: enable flag, password, protected objects, grants.

State lives in three tab-separated files, one per table::

    p_config.tsv  security_object.tsv  user_permission.tsv

Each file starts with ``#<table>\\tversion=<n>`` and ends with
``#digest\\tsha256=<hex>`` over everything above it. A missing or wrong
digest makes the state unusable; the server refuses to start instead of
running unprotected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import hmac
import logging
import os
import secrets
import string
import tempfile
import threading
from dataclasses import dataclass
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

from .errors import (
    AlreadyInitialized,
    BadPassword,
    CorruptState,
    DuplicateGrant,
    DuplicateObject,
    GrantNotFound,
    GuardObjectImmutable,
    InvalidIdentifier,
    InvalidWindow,
    NotFound,
    NotifyFailure,
    NotInitialized,
    ObjectNotProtected,
    StorageFailure,
    WeakPassword,
)
from .policy import (
    GUARD_OBJECTS,
    Grant,
    GrantTable,
    GuardConfig,
    PolicySnapshot,
    ProtectedObject,
    Registry,
    is_guard_object,
)
from .sql import OBJECT_TYPES, SOURCE_VIEWS, ObjectRef, normalize_identifier

log = logging.getLogger(__name__)

CONFIG_FILE = "p_config.tsv"
OBJECTS_FILE = "security_object.tsv"
GRANTS_FILE = "user_permission.tsv"
STATE_FILES = (CONFIG_FILE, OBJECTS_FILE, GRANTS_FILE)

MIN_PASSWORD_LENGTH = 8
RESET_PASSWORD_LENGTH = 16
DEFAULT_ITERATIONS = 100_000
_RESET_ALPHABET = string.ascii_letters + string.digits


def hash_password(password: str, salt: bytes, iterations: int = DEFAULT_ITERATIONS) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)


def make_config(password: str, enabled: bool = True,
                dictionary_views: Iterable[str] = SOURCE_VIEWS,
                iterations: int = DEFAULT_ITERATIONS) -> GuardConfig:
    salt = secrets.token_bytes(16)
    return GuardConfig(enabled, hash_password(password, salt, iterations), salt,
                       frozenset(v.upper() for v in dictionary_views), iterations)


def verify_password(candidate: str, cfg: GuardConfig) -> bool:
    digest = hash_password(candidate, cfg.salt, cfg.iterations)
    return hmac.compare_digest(digest, cfg.password_digest)


def guard_registry(now: datetime | None = None) -> tuple[ProtectedObject, ...]:
    now = now or datetime.now(timezone.utc)
    return tuple(ProtectedObject(ref, now, guard_owned=True) for ref in GUARD_OBJECTS)


@dataclass(frozen=True)
class AdminState:
    config: GuardConfig
    registry: tuple[ProtectedObject, ...]
    grants: tuple[Grant, ...]
    version: int = 0

    def snapshot(self) -> PolicySnapshot:
        return PolicySnapshot(self.version, self.config, Registry(self.registry),
                              GrantTable(self.grants))


def initial_state(password: str, dictionary_views: Iterable[str] = SOURCE_VIEWS,
                  iterations: int = DEFAULT_ITERATIONS) -> AdminState:
    if len(password) < MIN_PASSWORD_LENGTH:
        raise WeakPassword(f"password must have at least {MIN_PASSWORD_LENGTH} characters")
    return AdminState(make_config(password, True, dictionary_views, iterations),
                      guard_registry(), ())


# --------------------------------------------------------------------------
# TSV persistence


def _esc(value: str) -> str:
    return value.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def _unesc(value: str) -> str:
    out = []
    i = 0
    while i < len(value):
        c = value[i]
        if c == "\\" and i + 1 < len(value):
            nxt = value[i + 1]
            out.append({"t": "\t", "n": "\n", "r": "\r", "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def _ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _parse_ts(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)


def _render(table: str, version: int, rows: Iterable[Iterable[str]]) -> bytes:
    body = f"#{table}\tversion={version}\n" + "".join(
        "\t".join(_esc(f) for f in row) + "\n" for row in rows)
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return (body + f"#digest\tsha256={digest}\n").encode("utf-8")


def _parse(path: Path, table: str) -> tuple[int, list[list[str]]]:
    try:
        data = path.read_bytes().decode("utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptState(f"{path}: {exc}") from exc
    if not data.endswith("\n"):
        raise CorruptState(f"{path}: truncated")
    lines = data[:-1].split("\n")
    if len(lines) < 2 or not lines[-1].startswith("#digest\tsha256="):
        raise CorruptState(f"{path}: missing integrity line")
    body = "".join(ln + "\n" for ln in lines[:-1])
    expected = lines[-1].split("=", 1)[1]
    if not hmac.compare_digest(hashlib.sha256(body.encode("utf-8")).hexdigest(), expected):
        raise CorruptState(f"{path}: digest mismatch")
    head = lines[0].split("\t")
    if len(head) != 2 or head[0] != f"#{table}" or not head[1].startswith("version="):
        raise CorruptState(f"{path}: bad header line")
    try:
        version = int(head[1].split("=", 1)[1])
    except ValueError as exc:
        raise CorruptState(f"{path}: bad version") from exc
    return version, [[_unesc(f) for f in ln.split("\t")] for ln in lines[1:-1]]


def _write_atomic(path: Path, data: bytes) -> None:
    try:
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        dfd = os.open(path.parent, os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)
    except OSError as exc:
        raise StorageFailure(f"{path}: {exc}") from exc


def _config_rows(cfg: GuardConfig) -> list[tuple[str, str]]:
    return [
        ("enabled", "1" if cfg.enabled else "0"),
        ("salt", cfg.salt.hex()),
        ("password_digest", cfg.password_digest.hex()),
        ("iterations", str(cfg.iterations)),
        ("dictionary_views", ",".join(sorted(cfg.dictionary_views))),
    ]


def _object_rows(registry: Iterable[ProtectedObject]) -> list[tuple[str, ...]]:
    return [(po.ref.owner, po.ref.obj_type, po.ref.name, _ts(po.added_at),
             "1" if po.guard_owned else "0") for po in registry]


def _opt(value) -> str:
    return "" if value is None else str(value)


def _grant_rows(grants: Iterable[Grant]) -> list[tuple[str, ...]]:
    return [(g.grantee, g.object.owner, g.object.obj_type, g.object.name,
             _opt(g.start_date), _opt(g.end_date), _opt(g.start_hour), _opt(g.end_hour))
            for g in grants]


def save_state(state: AdminState, state_dir: str | Path,
               tables: Iterable[str] = STATE_FILES) -> None:
    """Write the selected tables atomically (temp file + rename)."""
    d = Path(state_dir)
    d.mkdir(parents=True, exist_ok=True)
    for name in tables:
        if name == CONFIG_FILE:
            data = _render("p_config", state.version, _config_rows(state.config))
        elif name == OBJECTS_FILE:
            data = _render("security_object", state.version, _object_rows(state.registry))
        elif name == GRANTS_FILE:
            data = _render("user_permission", state.version, _grant_rows(state.grants))
        else:
            raise ValueError(f"unknown state table {name}")
        _write_atomic(d / name, data)


def is_initialized(state_dir: str | Path) -> bool:
    return any((Path(state_dir) / f).exists() for f in STATE_FILES)


def load_state(state_dir: str | Path) -> AdminState:
    d = Path(state_dir)
    present = [(d / f).exists() for f in STATE_FILES]
    if not any(present):
        raise NotInitialized(f"{d} holds no guard state; initialize it first")
    if not all(present):
        missing = [f for f, p in zip(STATE_FILES, present) if not p]
        raise CorruptState(f"{d}: missing {', '.join(missing)}")
    try:
        v1, cfg_rows = _parse(d / CONFIG_FILE, "p_config")
        v2, obj_rows = _parse(d / OBJECTS_FILE, "security_object")
        v3, grant_rows = _parse(d / GRANTS_FILE, "user_permission")
        kv = dict(cfg_rows)
        config = GuardConfig(
            enabled={"1": True, "0": False}[kv["enabled"]],
            password_digest=bytes.fromhex(kv["password_digest"]),
            salt=bytes.fromhex(kv["salt"]),
            dictionary_views=frozenset(v for v in kv["dictionary_views"].split(",") if v),
            iterations=int(kv["iterations"]),
        )
        registry = tuple(
            ProtectedObject(ObjectRef(r[0], r[1], r[2]), _parse_ts(r[3]), r[4] == "1")
            for r in obj_rows)
        grants = tuple(
            Grant(r[0], ObjectRef(r[1], r[2], r[3]),
                  date.fromisoformat(r[4]) if r[4] else None,
                  date.fromisoformat(r[5]) if r[5] else None,
                  int(r[6]) if r[6] else None,
                  int(r[7]) if r[7] else None)
            for r in grant_rows)
    except CorruptState:
        raise
    except (KeyError, ValueError, IndexError, TypeError) as exc:
        raise CorruptState(f"{d}: unparseable state: {exc}") from exc
    refs = {po.ref for po in registry if po.guard_owned}
    if not all(ref in refs for ref in GUARD_OBJECTS):
        raise CorruptState(f"{d}: guard self-protection entries missing")
    return AdminState(config, registry, grants, max(v1, v2, v3))


def init_state(state_dir: str | Path, password: str,
               dictionary_views: Iterable[str] = SOURCE_VIEWS,
               iterations: int = DEFAULT_ITERATIONS) -> AdminState:
    if is_initialized(state_dir):
        raise AlreadyInitialized(f"{state_dir} is already initialized")
    state = initial_state(password, dictionary_views, iterations)
    save_state(state, state_dir)
    return state


# --------------------------------------------------------------------------
# notification


@dataclass(frozen=True)
class Notification:
    recipient: str
    password: str
    issued_at: datetime


class FileOutbox:
    """Notification sink writing one UTF-8 file per event."""

    def __init__(self, outbox_dir: str | Path, recipient: str = "security-officer"):
        self.outbox_dir = Path(outbox_dir)
        self.recipient = recipient

    def __call__(self, event: Notification) -> Path:
        self.outbox_dir.mkdir(parents=True, exist_ok=True)
        stamp = event.issued_at.strftime("%Y%m%dT%H%M%S%fZ")
        path = self.outbox_dir / f"reset-{stamp}-{secrets.token_hex(4)}.txt"
        body = (f"recipient={event.recipient}\n"
                f"password={event.password}\n"
                f"issued_at={_ts(event.issued_at)}\n")
        with open(path, "x", encoding="utf-8") as fh:
            fh.write(body)
            fh.flush()
            os.fsync(fh.fileno())
        return path


def read_notification(path: str | Path) -> Notification:
    kv = dict(line.split("=", 1) for line in Path(path).read_text(encoding="utf-8").splitlines())
    return Notification(kv["recipient"], kv["password"], _parse_ts(kv["issued_at"]))


# --------------------------------------------------------------------------
# control surface


def parse_object_type(text: str) -> str:
    t = "_".join(text.upper().split())
    if t not in OBJECT_TYPES:
        raise InvalidIdentifier(f"unknown object type {text!r}")
    return t


def make_ref(owner: str, obj_type: str, name: str) -> ObjectRef:
    try:
        return ObjectRef(normalize_identifier(owner), parse_object_type(obj_type),
                         normalize_identifier(name))
    except ValueError as exc:
        raise InvalidIdentifier(str(exc)) from exc


def _user(name: str) -> str:
    try:
        return normalize_identifier(name)
    except ValueError as exc:
        raise InvalidIdentifier(str(exc)) from exc


class AdminControl:
    """Serialized mutations over AdminState, each persisted before it is visible."""

    def __init__(self, state: AdminState, state_dir: str | Path | None,
                 notifier: Callable[[Notification], object] | None = None,
                 recipient: str = "security-officer",
                 clock: Callable[[], datetime] | None = None):
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self.notifier = notifier
        self.recipient = recipient
        self.clock = clock or (lambda: datetime.now(timezone.utc))
        self.failed_auth = 0
        self._state = state
        self._snapshot: PolicySnapshot | None = None
        self._lock = threading.RLock()

    @classmethod
    def open(cls, state_dir: str | Path, **kwargs) -> AdminControl:
        return cls(load_state(state_dir), state_dir, **kwargs)

    @property
    def state(self) -> AdminState:
        return self._state

    def snapshot(self) -> PolicySnapshot:
        snap = self._snapshot
        state = self._state
        if snap is None or snap.version != state.version:
            with self._lock:
                state = self._state
                snap = self._snapshot
                if snap is None or snap.version != state.version:
                    snap = state.snapshot()
                    self._snapshot = snap
        return snap

    def _commit(self, new: AdminState, table: str) -> AdminState:
        new = dataclasses.replace(new, version=self._state.version + 1)
        if self.state_dir is not None:
            save_state(new, self.state_dir, (table,))
        self._state = new
        return new

    def verify(self, password: str) -> bool:
        ok = verify_password(password, self._state.config)
        if not ok:
            self.failed_auth += 1
            log.warning("admin password rejected (%d failures so far)", self.failed_auth)
        return ok

    def _require(self, password: str) -> None:
        if not self.verify(password):
            raise BadPassword("password rejected")

    def set_security(self, password: str, enabled: bool) -> AdminState:
        with self._lock:
            self._require(password)
            cfg = dataclasses.replace(self._state.config, enabled=enabled)
            return self._commit(dataclasses.replace(self._state, config=cfg), CONFIG_FILE)

    def set_password(self, old: str, new: str) -> AdminState:
        with self._lock:
            self._require(old)
            if len(new) < MIN_PASSWORD_LENGTH:
                raise WeakPassword(f"password must have at least {MIN_PASSWORD_LENGTH} characters")
            return self._commit(self._with_password(new), CONFIG_FILE)

    def _with_password(self, password: str) -> AdminState:
        cfg = self._state.config
        salt = secrets.token_bytes(16)
        cfg = dataclasses.replace(cfg, salt=salt,
                                  password_digest=hash_password(password, salt, cfg.iterations))
        return dataclasses.replace(self._state, config=cfg)

    def reset_password(self) -> Notification:
        """Generate a new password and hand it to the notification sink.

        The sink runs before anything is stored: if it fails, the old
        password stays valid.
        """
        with self._lock:
            password = "".join(secrets.choice(_RESET_ALPHABET)
                               for _ in range(RESET_PASSWORD_LENGTH))
            event = Notification(self.recipient, password, self.clock())
            candidate = self._with_password(password)
            if self.notifier is None:
                raise NotifyFailure("no notification sink configured")
            try:
                self.notifier(event)
            except Exception as exc:
                raise NotifyFailure(f"notification failed: {exc}") from exc
            self._commit(candidate, CONFIG_FILE)
            return event

    def add_object(self, owner: str, obj_type: str, name: str) -> AdminState:
        ref = make_ref(owner, obj_type, name)
        with self._lock:
            if is_guard_object(ref) or any(po.ref == ref for po in self._state.registry):
                raise DuplicateObject(f"{ref} is already protected")
            po = ProtectedObject(ref, self.clock(), guard_owned=False)
            new = dataclasses.replace(self._state, registry=self._state.registry + (po,))
            return self._commit(new, OBJECTS_FILE)

    def remove_object(self, owner: str, obj_type: str, name: str) -> AdminState:
        ref = make_ref(owner, obj_type, name)
        with self._lock:
            if is_guard_object(ref):
                raise GuardObjectImmutable(f"{ref} belongs to the guard")
            kept = tuple(po for po in self._state.registry if po.ref != ref)
            if len(kept) == len(self._state.registry):
                raise NotFound(f"{ref} is not protected")
            return self._commit(dataclasses.replace(self._state, registry=kept), OBJECTS_FILE)

    def grant_permission(self, user: str, owner: str, obj_type: str, name: str,
                         start_date: date | None = None, end_date: date | None = None,
                         start_hour: int | None = None, end_hour: int | None = None
                         ) -> AdminState:
        grantee = _user(user)
        ref = make_ref(owner, obj_type, name)
        with self._lock:
            if is_guard_object(ref):
                raise GuardObjectImmutable(f"{ref} belongs to the guard; no grants possible")
            if not any(po.ref == ref for po in self._state.registry):
                raise ObjectNotProtected(f"{ref} is not protected")
            try:
                grant = Grant(grantee, ref, start_date, end_date, start_hour, end_hour)
            except ValueError as exc:
                raise InvalidWindow(str(exc)) from exc
            if any(g.grantee == grantee and g.object == ref for g in self._state.grants):
                raise DuplicateGrant(f"{grantee} already holds a grant on {ref}")
            new = dataclasses.replace(self._state, grants=self._state.grants + (grant,))
            return self._commit(new, GRANTS_FILE)

    def revoke_permission(self, user: str, owner: str, obj_type: str, name: str) -> AdminState:
        grantee = _user(user)
        ref = make_ref(owner, obj_type, name)
        with self._lock:
            kept = tuple(g for g in self._state.grants
                         if not (g.grantee == grantee and g.object == ref))
            if len(kept) == len(self._state.grants):
                raise GrantNotFound(f"{grantee} holds no grant on {ref}")
            return self._commit(dataclasses.replace(self._state, grants=kept), GRANTS_FILE)

