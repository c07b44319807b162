"""In-memory stand-in for the database behind the proxy.

Only what the guard needs to be observable: stored objects with source
text, users with a DBA flag, the ``*_SOURCE`` dictionary views, and stub
acknowledgements for everything else.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import (
    CatalogError,
    DuplicateObject,
    NoSuchObject,
    UnknownUser,
    UnknownView,
)
from .sql import (
    COMMENT,
    DDL,
    DML,
    IDENT,
    KEYWORD,
    QIDENT,
    QUERY,
    SESSION_CTRL,
    SOURCE_VIEWS,
    STRING,
    ObjectRef,
    ParsedStatement,
    classify,
    split_script,
    tokenize,
    types_compatible,
)
from .wrap import is_wrapped_text

SOURCE_COLUMNS = ("NAME", "TYPE", "LINE", "TEXT")
_SOURCE_TYPES = {
    "PROCEDURE": "PROCEDURE",
    "FUNCTION": "FUNCTION",
    "PACKAGE": "PACKAGE",
    "PACKAGE_BODY": "PACKAGE BODY",
    "TRIGGER": "TRIGGER",
}


@dataclass
class CatalogObject:
    ref: ObjectRef
    source: str
    wrapped: bool
    created_at: datetime


@dataclass(frozen=True)
class DbUser:
    name: str
    is_dba: bool
    default_schema: str


@dataclass
class ExecResult:
    message: str = "OK"
    columns: tuple[str, ...] = ()
    rows: list[tuple] = field(default_factory=list)
    is_rowset: bool = False


def load_users(path: str | Path) -> dict[str, DbUser]:
    """Read ``users.tsv``: name, is_dba (0/1), default_schema per line."""
    users: dict[str, DbUser] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3 or fields[1] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected name<TAB>0|1<TAB>schema")
        name = fields[0].strip().upper()
        if name in users:
            raise ValueError(f"{path}:{lineno}: duplicate user {name}")
        users[name] = DbUser(name, fields[1] == "1", fields[2].strip().upper())
    return users


def _unit_source(stmt: ParsedStatement) -> str:
    """Source as the dictionary shows it: the text after CREATE [OR REPLACE]."""
    toks = [t for t in tokenize(stmt.raw) if t.kind != COMMENT]
    i = 1
    while i < len(toks) and toks[i].value in ("OR", "REPLACE", "EDITIONABLE", "NONEDITIONABLE"):
        i += 1
    return stmt.raw[toks[i].pos:].rstrip() if i < len(toks) else stmt.raw.rstrip()


class Catalog:
    def __init__(self, users: dict[str, DbUser] | None = None,
                 dictionary_views=SOURCE_VIEWS):
        self.users: dict[str, DbUser] = dict(users or {})
        self._objects: dict[tuple[str, str], dict[str, CatalogObject]] = {}
        self.dictionary_views = frozenset(dictionary_views)
        self._lock = threading.Lock()

    def user(self, name: str) -> DbUser:
        try:
            return self.users[name.upper()]
        except KeyError:
            raise UnknownUser(f"no such user {name}") from None

    @property
    def objects(self) -> list[CatalogObject]:
        return [o for by_type in self._objects.values() for o in by_type.values()]

    def find(self, ref: ObjectRef) -> list[CatalogObject]:
        by_type = self._objects.get(ref.key, {})
        return [o for t, o in by_type.items() if types_compatible(t, ref.obj_type)]

    def _remove(self, obj: CatalogObject) -> None:
        by_type = self._objects[obj.ref.key]
        del by_type[obj.ref.obj_type]
        if not by_type:
            del self._objects[obj.ref.key]

    def get(self, owner: str, name: str, obj_type: str = "UNKNOWN") -> CatalogObject | None:
        hits = self.find(ObjectRef(owner.upper(), obj_type, name.upper()))
        return hits[0] if hits else None

    def execute(self, stmt: ParsedStatement, user: DbUser) -> ExecResult:
        """Apply an admitted statement. Statements are serialized."""
        if stmt.error is not None:
            raise stmt.error
        with self._lock:
            if stmt.cls == DDL:
                return self._ddl(stmt)
            if stmt.cls == QUERY:
                return self._query(stmt, user)
            if stmt.cls == DML:
                return ExecResult(f"{stmt.verb} 0")
            if stmt.cls == SESSION_CTRL:
                return ExecResult()
            if stmt.verb in ("CALL", "EXEC", "EXECUTE"):
                return self._call(stmt, user)
            return ExecResult()

    def _ddl(self, stmt: ParsedStatement) -> ExecResult:
        if stmt.verb == "CREATE" and stmt.targets:
            ref = stmt.targets[0]
            existing = [o for o in self.find(ref) if o.ref.obj_type == ref.obj_type]
            if existing and not stmt.is_or_replace:
                raise DuplicateObject(f"{ref.owner}.{ref.name} already exists")
            source = _unit_source(stmt)
            self._objects.setdefault(ref.key, {})[ref.obj_type] = CatalogObject(
                ref, source, is_wrapped_text(source), datetime.now(timezone.utc))
            return ExecResult("created")
        if stmt.verb == "DROP" and stmt.targets:
            ref = stmt.targets[0]
            hits = self.find(ref)
            if ref.obj_type == "PACKAGE_BODY":
                hits = [o for o in hits if o.ref.obj_type == "PACKAGE_BODY"]
            if not hits:
                raise NoSuchObject(f"{ref.owner}.{ref.name} does not exist")
            for o in hits:
                self._remove(o)
            return ExecResult("dropped")
        return ExecResult()

    def _call(self, stmt: ParsedStatement, user: DbUser) -> ExecResult:
        toks = [t for t in tokenize(stmt.raw) if t.kind != COMMENT]
        parts = []
        i = 1
        while i < len(toks) and toks[i].kind in (IDENT, QIDENT, KEYWORD):
            parts.append(toks[i].value)
            if i + 1 < len(toks) and toks[i + 1].is_sym("."):
                i += 2
            else:
                break
        # CALL [owner.]unit[.subprogram](...)
        candidates = []
        if len(parts) >= 2:
            candidates.append((parts[-3] if len(parts) >= 3 else user.default_schema, parts[-2]))
            candidates.append((parts[-2], parts[-1]))
        if parts:
            candidates.append((user.default_schema, parts[-1]))
        for owner, name in candidates:
            if self.get(owner, name) is not None:
                return ExecResult("called")
        raise NoSuchObject(f"{'.'.join(parts) or '?'} does not exist")

    def _query(self, stmt: ParsedStatement, user: DbUser) -> ExecResult:
        views = [r for r in stmt.dictionary_refs if r in SOURCE_VIEWS]
        if not views:
            return ExecResult(is_rowset=True, columns=())
        columns, name_filter = _projection_and_filter(stmt.raw)
        rows = []
        for v in views:
            rows.extend(self._source_rows(v, user, name_filter))
        idx = [SOURCE_COLUMNS.index(c) for c in columns]
        return ExecResult(columns=columns, rows=[tuple(r[i] for i in idx) for r in rows],
                          is_rowset=True)

    def query_source_view(self, view: str, user: DbUser, name_filter: str | None = None
                          ) -> list[tuple[str, str, int, str]]:
        with self._lock:
            return self._source_rows(view, user, name_filter)

    def _source_rows(self, view: str, user: DbUser, name_filter: str | None):
        view = view.upper()
        if view not in SOURCE_VIEWS:
            raise UnknownView(f"{view} is not a source view")
        objs = sorted(self.objects,
                      key=lambda o: (o.ref.owner, o.ref.name, o.ref.obj_type))
        rows = []
        for o in objs:
            if o.ref.obj_type not in _SOURCE_TYPES:
                continue
            if view == "USER_SOURCE" and o.ref.owner != user.default_schema:
                continue
            if name_filter is not None and o.ref.name != name_filter:
                continue
            for n, line in enumerate(o.source.split("\n"), 1):
                rows.append((o.ref.name, _SOURCE_TYPES[o.ref.obj_type], n, line))
        return rows


def _projection_and_filter(raw: str) -> tuple[tuple[str, ...], str | None]:
    """Columns of ``SELECT a, b FROM`` and the literal of ``WHERE name = '...'``."""
    toks = [t for t in tokenize(raw) if t.kind != COMMENT]
    cols: list[str] = []
    i = 1
    star = False
    while i < len(toks) and not toks[i].is_kw("FROM"):
        t = toks[i]
        if t.is_sym("*"):
            star = True
        elif t.kind in (IDENT, KEYWORD, QIDENT) and t.value in SOURCE_COLUMNS:
            cols.append(t.value)
        i += 1
    columns = SOURCE_COLUMNS if star or not cols else tuple(cols)
    name_filter = None
    for j in range(i, len(toks) - 2):
        if (toks[j].kind in (IDENT, KEYWORD) and toks[j].value == "NAME"
                and toks[j + 1].is_sym("=") and toks[j + 2].kind == STRING):
            lit = toks[j + 2].text
            name_filter = lit[1:-1].replace("''", "'")
            break
    return columns, name_filter


def install_source(catalog: Catalog, statement: str, user: str = "SYS") -> CatalogObject:
    """Run a CREATE statement directly against the catalog, with no policy
    check. Used for bootstrap and for the wrap toolkit's CREATE_WRAPPED."""
    db_user = catalog.users.get(user.upper()) or DbUser(user.upper(), True, user.upper())
    stmt = classify(statement, db_user.default_schema, catalog.dictionary_views)
    if stmt.error is not None:
        raise stmt.error
    if stmt.verb != "CREATE" or not stmt.targets:
        raise CatalogError("not a CREATE statement")
    stmt = ParsedStatement(stmt.raw, stmt.cls, stmt.verb, stmt.targets, stmt.dictionary_refs,
                           True, stmt.sources)
    catalog.execute(stmt, db_user)
    return catalog.find(stmt.targets[0])[0]


def run_seed(catalog: Catalog, path: str | Path, user: str = "SYS") -> int:
    """Execute a bootstrap script, bypassing the policy. Returns statement count."""
    text = Path(path).read_text(encoding="utf-8")
    db_user = catalog.users.get(user.upper()) or DbUser(user.upper(), True, user.upper())
    count = 0
    for chunk in split_script(text):
        stmt = classify(chunk.text, db_user.default_schema, catalog.dictionary_views)
        if stmt.error is not None:
            raise stmt.error
        catalog.execute(stmt, db_user)
        count += 1
    return count
