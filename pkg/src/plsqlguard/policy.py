"""Admission decisions: ALLOW or KILL for one statement of one session."""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from typing import Iterable

from .sql import DDL, DML, ObjectRef, ParsedStatement, SOURCE_VIEWS, types_compatible

GUARD_SCHEMA = "GUARD"
GUARD_PACKAGE = "GUARD_PKG"
GUARD_TABLES = ("SECURITY_OBJECT", "USER_PERMISSION", "P_CONFIG", "KILLED_SESSIONS", "DDL_LOG")
GUARD_NAMES = frozenset(GUARD_TABLES + (GUARD_PACKAGE,))

GUARD_OBJECTS = tuple(ObjectRef(GUARD_SCHEMA, "TABLE", n) for n in GUARD_TABLES) + (
    ObjectRef(GUARD_SCHEMA, "PACKAGE", GUARD_PACKAGE),
)


class Verdict(str, enum.Enum):
    ALLOW = "ALLOW"
    KILL = "KILL"


class Reason(str, enum.Enum):
    OK = "OK"
    PROTECTED_OBJECT = "PROTECTED_OBJECT"
    GUARD_OBJECT = "GUARD_OBJECT"
    DICTIONARY_VIEW = "DICTIONARY_VIEW"
    DISABLED_PASSTHROUGH = "DISABLED_PASSTHROUGH"


KILL_REASONS = frozenset({Reason.PROTECTED_OBJECT, Reason.GUARD_OBJECT, Reason.DICTIONARY_VIEW})


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    reason: Reason

    def __post_init__(self) -> None:
        allow = self.reason in (Reason.OK, Reason.DISABLED_PASSTHROUGH)
        if allow != (self.verdict is Verdict.ALLOW):
            raise ValueError(f"inconsistent decision {self.verdict}/{self.reason}")

    @property
    def allowed(self) -> bool:
        return self.verdict is Verdict.ALLOW


ALLOW_OK = Decision(Verdict.ALLOW, Reason.OK)
ALLOW_DISABLED = Decision(Verdict.ALLOW, Reason.DISABLED_PASSTHROUGH)
KILL_GUARD = Decision(Verdict.KILL, Reason.GUARD_OBJECT)
KILL_PROTECTED = Decision(Verdict.KILL, Reason.PROTECTED_OBJECT)
KILL_DICTIONARY = Decision(Verdict.KILL, Reason.DICTIONARY_VIEW)


@dataclass(frozen=True)
class ProtectedObject:
    ref: ObjectRef
    added_at: datetime
    guard_owned: bool = False


@dataclass(frozen=True)
class Grant:
    grantee: str
    object: ObjectRef
    start_date: date | None = None
    end_date: date | None = None
    start_hour: int | None = None
    end_hour: int | None = None

    def __post_init__(self) -> None:
        if self.start_date and self.end_date and self.start_date > self.end_date:
            raise ValueError("start_date after end_date")
        if (self.start_hour is None) != (self.end_hour is None):
            raise ValueError("start_hour and end_hour go together")
        if self.start_hour is not None:
            for h in (self.start_hour, self.end_hour):
                if not 0 <= h <= 23:
                    raise ValueError(f"hour {h} outside 0-23")
            if self.start_hour == self.end_hour:
                raise ValueError("empty hour window")


@dataclass(frozen=True)
class GuardConfig:
    enabled: bool
    password_digest: bytes
    salt: bytes
    dictionary_views: frozenset[str] = SOURCE_VIEWS
    iterations: int = 100_000

    def __post_init__(self) -> None:
        if not self.password_digest:
            raise ValueError("password digest must not be empty")


def is_grant_active(g: Grant, at: datetime) -> bool:
    at = at.astimezone(timezone.utc)
    day = at.date()
    if g.start_date is not None and day < g.start_date:
        return False
    if g.end_date is not None and day > g.end_date:
        return False
    if g.start_hour is None:
        return True
    hour = at.hour
    if g.start_hour < g.end_hour:
        return g.start_hour <= hour < g.end_hour
    return hour >= g.start_hour or hour < g.end_hour


def is_guard_object(ref: ObjectRef) -> bool:
    return ref.owner == GUARD_SCHEMA and ref.name in GUARD_NAMES


class Registry:
    """Read-only protected-object set indexed by (owner, name)."""

    def __init__(self, objects: Iterable[ProtectedObject] = ()):
        self.objects: tuple[ProtectedObject, ...] = tuple(objects)
        self._by_key: dict[tuple[str, str], list[ProtectedObject]] = defaultdict(list)
        for po in self.objects:
            self._by_key[po.ref.key].append(po)
        self.user_objects = tuple(po for po in self.objects if not po.guard_owned)

    def __len__(self) -> int:
        return len(self.objects)

    def __iter__(self):
        return iter(self.objects)

    def lookup(self, ref: ObjectRef) -> list[ProtectedObject]:
        hits = self._by_key.get(ref.key)
        if not hits:
            return []
        return [po for po in hits if types_compatible(po.ref.obj_type, ref.obj_type)]


class GrantTable:
    """Read-only grant list indexed by (grantee, owner, name)."""

    def __init__(self, grants: Iterable[Grant] = ()):
        self.grants: tuple[Grant, ...] = tuple(grants)
        self._by_key: dict[tuple[str, str, str], list[Grant]] = defaultdict(list)
        self._by_user: dict[str, list[Grant]] = defaultdict(list)
        for g in self.grants:
            self._by_key[(g.grantee, g.object.owner, g.object.name)].append(g)
            self._by_user[g.grantee].append(g)

    def __len__(self) -> int:
        return len(self.grants)

    def __iter__(self):
        return iter(self.grants)

    def has_active(self, user: str, ref: ObjectRef, at: datetime) -> bool:
        for g in self._by_key.get((user, ref.owner, ref.name), ()):
            if types_compatible(g.object.obj_type, ref.obj_type) and is_grant_active(g, at):
                return True
        return False

    def for_user(self, user: str) -> list[Grant]:
        return self._by_user.get(user, [])


def _covers_all(user: str, registry: Registry, grants: GrantTable, at: datetime) -> bool:
    protected = registry.user_objects
    if not protected:
        return True
    mine = grants.for_user(user)
    if len(mine) < len(protected):
        return False
    return all(grants.has_active(user, po.ref, at) for po in protected)


def decide(
    user: str,
    is_dba: bool,
    stmt: ParsedStatement,
    registry: Registry,
    grants: GrantTable,
    cfg: GuardConfig,
    at: datetime,
) -> Decision:
    """Decide whether *user* may run *stmt*.

    Rules apply in a fixed order: guard objects, enable flag, dictionary
    views, protected objects. ``is_dba`` is accepted and ignored; DBAs get no
    exemption from any rule.
    """
    del is_dba
    user = user.upper()
    for t in stmt.targets:
        if is_guard_object(t):
            return KILL_GUARD
    if not cfg.enabled:
        return ALLOW_DISABLED
    if stmt.dictionary_refs and not _covers_all(user, registry, grants, at):
        return KILL_DICTIONARY
    if stmt.cls in (DDL, DML):
        for t in stmt.targets:
            for po in registry.lookup(t):
                if not grants.has_active(user, po.ref, at):
                    return KILL_PROTECTED
    return ALLOW_OK


@dataclass(frozen=True)
class PolicySnapshot:
    """One consistent view of config, registry and grants."""

    version: int
    config: GuardConfig
    registry: Registry = field(repr=False)
    grants: GrantTable = field(repr=False)

    def decide(self, user: str, is_dba: bool, stmt: ParsedStatement, at: datetime) -> Decision:
        return decide(user, is_dba, stmt, self.registry, self.grants, self.config, at)
