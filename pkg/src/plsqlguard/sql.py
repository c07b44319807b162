"""SQL lexing and statement classification.

The classifier is keyword driven rather than grammar driven. It walks the
token stream once and extracts the object names sitting in table-source
positions (FROM, JOIN, INTO, UPDATE, USING, ...) and the object named by a
DDL verb. When in doubt it extracts too much: an extra target can only
cause a kill, a missing one could let a statement through.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .errors import (
    EmptyStatement,
    MalformedStatement,
    SqlError,
    UnterminatedComment,
    UnterminatedString,
)

# token kinds
KEYWORD = "keyword"
IDENT = "identifier"
QIDENT = "quoted-identifier"
STRING = "string-literal"
NUMBER = "number"
SYMBOL = "symbol"
COMMENT = "comment"

# statement classes
DDL = "DDL"
DML = "DML"
QUERY = "QUERY"
SESSION_CTRL = "SESSION_CTRL"
OTHER = "OTHER"

OBJECT_TYPES = frozenset(
    {"PROCEDURE", "FUNCTION", "PACKAGE", "PACKAGE_BODY", "TRIGGER", "TABLE", "VIEW", "UNKNOWN"}
)
PLSQL_TYPES = frozenset({"PROCEDURE", "FUNCTION", "PACKAGE", "PACKAGE_BODY", "TRIGGER"})

DDL_VERBS = frozenset({"CREATE", "ALTER", "DROP", "TRUNCATE", "RENAME", "GRANT", "REVOKE", "COMMENT"})
DML_VERBS = frozenset({"INSERT", "UPDATE", "DELETE", "MERGE"})
SESSION_VERBS = frozenset({"COMMIT", "ROLLBACK", "SAVEPOINT", "SET"})

SOURCE_VIEWS = frozenset({"USER_SOURCE", "ALL_SOURCE", "DBA_SOURCE"})
# Dictionary tables that still hold compiled PL/SQL; opt-in extension of
# the dictionary set.
IDL_TABLES = frozenset({"IDL_UB1$", "IDL_UB2$", "IDL_CHAR$", "IDL_SB4$"})
DEFAULT_DICTIONARY_VIEWS = SOURCE_VIEWS

# Words that end a name list or introduce a clause. They are never read as
# object names.
RESERVED = frozenset(
    """
    ACCESS ADD ALL ALTER AND ANY AS ASC AUDIT BEGIN BETWEEN BY CASE CHECK
    CLUSTER COLUMN COMMENT CONNECT CREATE CROSS CURRENT DECLARE DEFAULT
    DELETE DESC DISTINCT DROP ELSE END EXCEPT EXCLUSIVE EXISTS FETCH FOR
    FROM FULL GRANT GROUP HAVING IN INNER INSERT INTERSECT INTO IS JOIN
    LEFT LIKE LIMIT LOCK MERGE MINUS MODE NATURAL NOT NOWAIT NULL OF
    OFFSET ON OPTION OR ORDER OUTER PARTITION PIVOT PRIOR RENAME REPLACE
    RETURNING REVOKE RIGHT ROWS SAMPLE SELECT SET START TABLE THEN TO
    TRUNCATE UNION UNIQUE UNPIVOT UPDATE USING VALUES VIEW WHEN WHERE
    WINDOW WITH
    """.split()
)
# Keywords that may still appear as (part of) an object name.
SOFT_KEYWORDS = frozenset(
    """
    BODY CALL COMMIT EDITIONABLE EXPLAIN FORCE FUNCTION GLOBAL IF INDEX
    MATERIALIZED NONEDITIONABLE NOFORCE PACKAGE PLAN PROCEDURE PUBLIC
    ROLLBACK SAVEPOINT SEQUENCE SESSION SYNONYM SYSTEM TEMPORARY TRIGGER
    TYPE USER WRAPPED
    """.split()
)
KEYWORDS = RESERVED | SOFT_KEYWORDS

_CREATE_MODIFIERS = frozenset(
    {"OR", "REPLACE", "EDITIONABLE", "NONEDITIONABLE", "FORCE", "NOFORCE", "GLOBAL",
     "PRIVATE", "TEMPORARY", "UNIQUE", "BITMAP", "PUBLIC", "SHARED", "NO"}
)


@dataclass(frozen=True, slots=True)
class Token:
    kind: str
    text: str
    pos: int

    @property
    def value(self) -> str:
        """Normalized value: uppercase for words, inner text for quoted identifiers."""
        if self.kind in (KEYWORD, IDENT):
            return self.text.upper()
        if self.kind == QIDENT:
            return self.text[1:-1].replace('""', '"')
        return self.text

    def is_kw(self, *words: str) -> bool:
        return self.kind == KEYWORD and self.text.upper() in words

    def is_sym(self, sym: str) -> bool:
        return self.kind == SYMBOL and self.text == sym


_WS = re.compile(r"\s+")
_WORD = re.compile(r"[^\W\d][\w$#]*")
_NUMBER = re.compile(r"(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
_SYMBOLS = ("||", ":=", "=>", "<>", "!=", "<=", ">=", "..", "**")
_Q_CLOSERS = {"[": "]", "{": "}", "(": ")", "<": ">"}


def tokenize(text: str) -> list[Token]:
    """Split *text* into tokens. Whitespace is skipped; every other character
    belongs to exactly one token, so ``text[t.pos:t.pos + len(t.text)]`` for
    consecutive tokens plus the gaps between them reproduces the input."""
    return list(_scan(text))


def _scan(text: str) -> Iterator[Token]:
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i = _WS.match(text, i).end()
            continue
        if text.startswith("--", i):
            j = text.find("\n", i)
            j = n if j < 0 else j
            yield Token(COMMENT, text[i:j], i)
            i = j
            continue
        if text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j < 0:
                raise UnterminatedComment(f"unterminated comment at offset {i}")
            yield Token(COMMENT, text[i:j + 2], i)
            i = j + 2
            continue
        if c == "'":
            j = _string_end(text, i + 1, i)
            yield Token(STRING, text[i:j], i)
            i = j
            continue
        if c in "nNqQ":
            j = _prefixed_string(text, i)
            if j:
                yield Token(STRING, text[i:j], i)
                i = j
                continue
        if c == '"':
            j = i + 1
            while True:
                k = text.find('"', j)
                if k < 0:
                    raise UnterminatedString(f"unterminated quoted identifier at offset {i}")
                if text.startswith('""', k):
                    j = k + 2
                    continue
                break
            yield Token(QIDENT, text[i:k + 1], i)
            i = k + 1
            continue
        m = _WORD.match(text, i)
        if m:
            word = m.group()
            yield Token(KEYWORD if word.upper() in KEYWORDS else IDENT, word, i)
            i = m.end()
            continue
        m = _NUMBER.match(text, i)
        if m:
            yield Token(NUMBER, m.group(), i)
            i = m.end()
            continue
        for sym in _SYMBOLS:
            if text.startswith(sym, i):
                yield Token(SYMBOL, sym, i)
                i += len(sym)
                break
        else:
            yield Token(SYMBOL, c, i)
            i += 1


def _string_end(text: str, j: int, start: int) -> int:
    while True:
        k = text.find("'", j)
        if k < 0:
            raise UnterminatedString(f"unterminated string literal at offset {start}")
        if text.startswith("''", k):
            j = k + 2
            continue
        return k + 1


def _prefixed_string(text: str, i: int) -> int:
    """End offset of an N'..', Q'x..x' or NQ'x..x' literal starting at *i*, or 0."""
    j = i
    if text[j] in "nN":
        j += 1
        if text.startswith("'", j):
            return _string_end(text, j + 1, i)
    if j < len(text) and text[j] in "qQ" and text.startswith("'", j + 1):
        if j + 2 >= len(text):
            raise UnterminatedString(f"unterminated string literal at offset {i}")
        opener = text[j + 2]
        closer = _Q_CLOSERS.get(opener, opener)
        k = text.find(closer + "'", j + 3)
        if k < 0:
            raise UnterminatedString(f"unterminated string literal at offset {i}")
        return k + 2
    return 0


# --------------------------------------------------------------------------
# classification


@dataclass(frozen=True, slots=True)
class ObjectRef:
    owner: str
    obj_type: str
    name: str

    def __post_init__(self) -> None:
        if not self.owner or not self.name:
            raise ValueError("owner and name must be non-empty")
        if self.obj_type not in OBJECT_TYPES:
            raise ValueError(f"unknown object type {self.obj_type!r}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.owner, self.name)

    def matches(self, other: ObjectRef) -> bool:
        """Same (owner, name) and compatible types. UNKNOWN matches any type
        and a package specification covers its body."""
        return self.key == other.key and types_compatible(self.obj_type, other.obj_type)

    def __str__(self) -> str:
        return f"{self.owner}.{self.name} ({self.obj_type})"


def types_compatible(a: str, b: str) -> bool:
    if a == b or a == "UNKNOWN" or b == "UNKNOWN":
        return True
    return {a, b} == {"PACKAGE", "PACKAGE_BODY"}


@dataclass(frozen=True)
class ParsedStatement:
    raw: str
    cls: str
    verb: str
    targets: tuple[ObjectRef, ...] = ()
    dictionary_refs: tuple[str, ...] = ()
    is_or_replace: bool = False
    sources: tuple[ObjectRef, ...] = ()
    error: SqlError | None = field(default=None, compare=False)


_IDENT_RE = re.compile(r"[^\W\d][\w$#]*\Z")


def normalize_identifier(text: str) -> str:
    """Uppercase an unquoted identifier; strip the quotes of a quoted one.

    Raises ValueError for anything that is neither.
    """
    if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
        inner = text[1:-1]
        if not inner or '"' in inner.replace('""', ""):
            raise ValueError(f"bad quoted identifier {text!r}")
        return inner.replace('""', '"')
    if not _IDENT_RE.match(text):
        raise ValueError(f"bad identifier {text!r}")
    return text.upper()


def classify(
    text: str,
    default_schema: str,
    dictionary_views: Iterable[str] = DEFAULT_DICTIONARY_VIEWS,
) -> ParsedStatement:
    """Classify one SQL statement.

    Lexer failures and empty input do not raise: they come back as class
    OTHER with no targets and the exception stored in ``error``.
    """
    try:
        tokens = [t for t in tokenize(text) if t.kind != COMMENT]
    except SqlError as exc:
        return ParsedStatement(text, OTHER, "", error=MalformedStatement(str(exc)))
    while tokens and (tokens[-1].is_sym(";") or tokens[-1].is_sym("/")):
        tokens.pop()
    if not tokens:
        return ParsedStatement(text, OTHER, "", error=EmptyStatement("empty statement"))
    return _Classifier(text, tokens, default_schema.upper(), frozenset(dictionary_views)).run()


class _Classifier:
    def __init__(self, raw: str, tokens: list[Token], schema: str, dictionary: frozenset[str]):
        self.raw = raw
        self.toks = tokens
        self.schema = schema
        self.dictionary = dictionary

    def run(self) -> ParsedStatement:
        toks = self.toks
        first = toks[0]
        word = first.value if first.kind in (KEYWORD, IDENT) else ""

        if word in ("DECLARE", "BEGIN"):
            return ParsedStatement(self.raw, OTHER, word)

        if first.is_sym("(") or word == "SELECT":
            verb = "SELECT"
        elif word == "WITH":
            verb = self._verb_after_with()
        else:
            verb = word

        sources = self._sources()
        dict_refs = _unique(s.name for s in sources if s.name in self.dictionary)

        if verb == "ALTER" and len(toks) > 1 and toks[1].is_kw("SESSION", "SYSTEM"):
            return ParsedStatement(self.raw, SESSION_CTRL, "ALTER " + toks[1].value,
                                   dictionary_refs=dict_refs, sources=sources)
        if verb in SESSION_VERBS:
            return ParsedStatement(self.raw, SESSION_CTRL, verb, dictionary_refs=dict_refs,
                                   sources=sources)
        if verb in DDL_VERBS:
            targets, or_replace = self._ddl_targets(verb, sources)
            return ParsedStatement(self.raw, DDL, verb, targets, dict_refs, or_replace, sources)
        if verb in DML_VERBS:
            return ParsedStatement(self.raw, DML, verb, sources, dict_refs, sources=sources)
        if verb == "SELECT":
            return ParsedStatement(self.raw, QUERY, verb, sources, dict_refs, sources=sources)
        return ParsedStatement(self.raw, OTHER, verb, dictionary_refs=dict_refs, sources=sources)

    # -- helpers -------------------------------------------------------------

    def _verb_after_with(self) -> str:
        depth = 0
        for t in self.toks[1:]:
            if t.is_sym("("):
                depth += 1
            elif t.is_sym(")"):
                depth -= 1
            elif depth == 0 and t.is_kw("SELECT", "INSERT", "UPDATE", "DELETE", "MERGE"):
                return t.value
        return "SELECT"

    def _is_name(self, i: int) -> bool:
        if i >= len(self.toks):
            return False
        t = self.toks[i]
        return t.kind in (IDENT, QIDENT) or (t.kind == KEYWORD and t.value in SOFT_KEYWORDS)

    def _read_name(self, i: int) -> tuple[list[str], int]:
        """Read a dotted name starting at *i*; returns ([] , i) if none."""
        if not self._is_name(i):
            return [], i
        parts = [self.toks[i].value]
        i += 1
        while (i + 1 < len(self.toks) and self.toks[i].is_sym(".") and self._is_name(i + 1)):
            parts.append(self.toks[i + 1].value)
            i += 2
        if i + 1 < len(self.toks) and self.toks[i].is_sym("@") and self._is_name(i + 1):
            _, i = self._read_name(i + 1)
        return parts, i

    def _ref(self, parts: list[str], obj_type: str = "UNKNOWN") -> ObjectRef:
        if len(parts) == 1:
            return ObjectRef(self.schema, obj_type, parts[0])
        return ObjectRef(parts[-2], obj_type, parts[-1])

    def _skip_parens(self, i: int) -> int:
        depth = 0
        while i < len(self.toks):
            t = self.toks[i]
            if t.is_sym("("):
                depth += 1
            elif t.is_sym(")"):
                depth -= 1
                if depth == 0:
                    return i + 1
            i += 1
        return i

    def _skip_alias(self, i: int) -> int:
        if i < len(self.toks) and self.toks[i].is_kw("AS"):
            i += 1
        if i < len(self.toks) and self.toks[i].kind in (IDENT, QIDENT):
            i += 1
        return i

    def _sources(self) -> tuple[ObjectRef, ...]:
        toks = self.toks
        found: list[ObjectRef] = []
        n = len(toks)
        for i, t in enumerate(toks):
            if t.kind != KEYWORD:
                continue
            w = t.value
            if w == "FROM":
                self._read_source_list(i + 1, found)
            elif w in ("JOIN", "INTO", "USING"):
                parts, _ = self._read_name(i + 1)
                if parts:
                    found.append(self._ref(parts))
            elif w == "UPDATE":
                # SELECT ... FOR UPDATE [OF col] is not a table position
                if i > 0 and toks[i - 1].is_kw("FOR"):
                    continue
                parts, _ = self._read_name(i + 1)
                if parts:
                    found.append(self._ref(parts))
            elif w == "DELETE" and i + 1 < n and not toks[i + 1].is_kw("FROM"):
                parts, _ = self._read_name(i + 1)
                if parts:
                    found.append(self._ref(parts))
        return _unique_refs(found)

    def _read_source_list(self, i: int, found: list[ObjectRef]) -> None:
        toks = self.toks
        while i < len(toks):
            if toks[i].is_sym("("):
                i = self._skip_parens(i)
            else:
                parts, j = self._read_name(i)
                if not parts:
                    return
                found.append(self._ref(parts))
                i = j
            i = self._skip_alias(i)
            if i < len(toks) and toks[i].is_sym(","):
                i += 1
                continue
            return

    def _ddl_targets(self, verb: str, sources: tuple[ObjectRef, ...]) -> tuple[tuple[ObjectRef, ...], bool]:
        toks = self.toks
        i = 1
        or_replace = False
        targets: list[ObjectRef] = []
        include_sources = True

        if verb in ("CREATE", "ALTER", "DROP"):
            while i < len(toks) and toks[i].kind == KEYWORD and toks[i].value in _CREATE_MODIFIERS:
                if toks[i].value == "REPLACE" and toks[i - 1].is_kw("OR"):
                    or_replace = True
                i += 1
            obj_type, i = self._object_type(i)
            if i + 1 < len(toks) and toks[i].is_kw("IF"):
                i += 2 if toks[i + 1].is_kw("EXISTS") else 3
            parts, i = self._read_name(i)
            if parts:
                targets.append(self._ref(parts, obj_type))
            if obj_type in PLSQL_TYPES:
                include_sources = False
                if obj_type == "TRIGGER":
                    self._name_after_on(i, targets)
            elif verb == "CREATE":
                self._name_after_on(i, targets)
        elif verb == "TRUNCATE":
            if i < len(toks) and toks[i].is_kw("TABLE"):
                parts, _ = self._read_name(i + 1)
                if parts:
                    targets.append(self._ref(parts, "TABLE"))
            else:
                parts, _ = self._read_name(i + 1)
                if parts:
                    targets.append(self._ref(parts))
        elif verb == "RENAME":
            parts, j = self._read_name(i)
            if parts:
                targets.append(self._ref(parts))
            if j < len(toks) and toks[j].is_kw("TO"):
                parts, _ = self._read_name(j + 1)
                if parts:
                    targets.append(self._ref(parts))
        elif verb in ("GRANT", "REVOKE"):
            # REVOKE ... FROM names a grantee, not a table
            include_sources = False
            self._name_after_on(i, targets)
        elif verb == "COMMENT":
            if i < len(toks) and toks[i].is_kw("ON") and i + 1 < len(toks):
                kind = toks[i + 1].value
                parts, _ = self._read_name(i + 2)
                if kind == "COLUMN" and len(parts) > 1:
                    parts = parts[:-1]
                if parts:
                    obj_type = kind if kind in ("TABLE", "VIEW") else "UNKNOWN"
                    targets.append(self._ref(parts, obj_type))

        if include_sources:
            targets.extend(sources)
        return _unique_refs(targets), or_replace

    def _object_type(self, i: int) -> tuple[str, int]:
        toks = self.toks
        if i >= len(toks) or toks[i].kind not in (KEYWORD, IDENT):
            return "UNKNOWN", i
        w = toks[i].value
        nxt = toks[i + 1] if i + 1 < len(toks) else None
        if w == "PACKAGE":
            if nxt is not None and nxt.is_kw("BODY"):
                return "PACKAGE_BODY", i + 2
            return "PACKAGE", i + 1
        if w in ("PROCEDURE", "FUNCTION", "TRIGGER", "TABLE", "VIEW"):
            return w, i + 1
        if w == "TYPE" and nxt is not None and nxt.is_kw("BODY"):
            return "UNKNOWN", i + 2
        if w == "MATERIALIZED" and nxt is not None and nxt.value == "VIEW":
            if i + 2 < len(toks) and toks[i + 2].value == "LOG":
                return "UNKNOWN", i + 3
            return "UNKNOWN", i + 2
        if w == "DATABASE" and nxt is not None and nxt.value == "LINK":
            return "UNKNOWN", i + 2
        return "UNKNOWN", i + 1

    def _name_after_on(self, i: int, targets: list[ObjectRef]) -> None:
        toks = self.toks
        while i < len(toks):
            t = toks[i]
            if t.is_kw("ON"):
                j = i + 1
                if j < len(toks) and toks[j].value in ("DATABASE", "SCHEMA"):
                    return
                if j < len(toks) and toks[j].value in ("DIRECTORY", "EDITION", "MINING"):
                    j += 1
                parts, _ = self._read_name(j)
                if parts:
                    targets.append(self._ref(parts))
                return
            if t.is_kw("BEGIN", "DECLARE", "AS", "IS", "TO", "FROM"):
                return
            i += 1


def _unique(items: Iterable[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(items))


def _unique_refs(refs: Iterable[ObjectRef]) -> tuple[ObjectRef, ...]:
    return tuple(dict.fromkeys(refs))


# --------------------------------------------------------------------------
# script splitting

_UNIT_WORDS = frozenset({"PROCEDURE", "FUNCTION", "PACKAGE", "TYPE", "TRIGGER"})


def is_plsql_block(tokens: list[Token]) -> bool:
    """True if the statement starting at tokens[0] is a PL/SQL unit definition
    or anonymous block, i.e. one that SQL*Plus terminates with a lone ``/``."""
    sig = [t for t in tokens[:8] if t.kind != COMMENT]
    if not sig:
        return False
    if sig[0].is_kw("DECLARE", "BEGIN"):
        return True
    if not sig[0].is_kw("CREATE"):
        return False
    for t in sig[1:]:
        if t.kind == KEYWORD and t.value in _CREATE_MODIFIERS:
            continue
        return t.value in _UNIT_WORDS
    return False


@dataclass(frozen=True)
class ScriptChunk:
    text: str
    start: int
    line: int


def split_script(text: str) -> list[ScriptChunk]:
    """Split a script into single statements.

    Plain SQL ends at a top-level ``;``. PL/SQL units and anonymous blocks end
    at a line holding only ``/``. The terminating ``/`` line is dropped, the
    ``;`` is kept. Raises SqlError on unterminated literals or comments.
    """
    tokens = tokenize(text)
    chunks: list[ScriptChunk] = []
    i = 0
    while i < len(tokens):
        if tokens[i].kind == COMMENT:
            i += 1
            continue
        start_tok = i
        start = tokens[i].pos
        if is_plsql_block(tokens[i:]):
            end = len(text)
            j = i
            while j < len(tokens):
                t = tokens[j]
                if t.is_sym("/") and _alone_on_line(text, t.pos):
                    end = t.pos
                    break
                j += 1
            chunk_text = text[start:end].rstrip()
            i = j + 1
        else:
            j = i
            while j < len(tokens) and not tokens[j].is_sym(";"):
                if tokens[j].is_sym("/") and _alone_on_line(text, tokens[j].pos):
                    break
                j += 1
            if j < len(tokens) and tokens[j].is_sym(";"):
                chunk_text = text[start:tokens[j].pos + 1]
            else:
                chunk_text = text[start:tokens[j].pos if j < len(tokens) else len(text)].rstrip()
            i = j + 1
        if chunk_text.strip() and any(t.kind != COMMENT for t in tokens[start_tok:i]):
            chunks.append(ScriptChunk(chunk_text, start, text.count("\n", 0, start) + 1))
    return chunks


def _alone_on_line(text: str, pos: int) -> bool:
    line_start = text.rfind("\n", 0, pos) + 1
    line_end = text.find("\n", pos)
    line_end = len(text) if line_end < 0 else line_end
    return text[line_start:line_end].strip() == "/"
