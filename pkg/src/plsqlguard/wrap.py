"""A reversible imitation of the PL/SQL wrap utility.

The wrapped form keeps the look of real wrapped units::

    PACKAGE EMP_ACTIONS WRAPPED
    a000000
    <source length in bytes, lowercase hex>
    abcd
    <base64 of the source, 64 columns>

The payload is plain base64, so anyone can recover the source. That is the
point: wrapping is an encoding, not access control.
"""

from __future__ import annotations

import base64
import binascii
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    AnonymousBlockNotWrappable,
    BadPayload,
    CreateFailure,
    GuardError,
    LengthMismatch,
    MalformedHeader,
    SqlError,
    TriggerNotWrappable,
    UnrecognizedUnit,
)
from .sql import COMMENT, IDENT, KEYWORD, QIDENT, split_script, tokenize

UNIT_KEYWORDS = {
    "PROCEDURE": "PROCEDURE",
    "FUNCTION": "FUNCTION",
    "PACKAGE": "PACKAGE",
    "PACKAGE_BODY": "PACKAGE BODY",
    "TYPE_SPEC": "TYPE",
    "TYPE_BODY": "TYPE BODY",
}
_KEYWORD_UNITS = {v: k for k, v in UNIT_KEYWORDS.items()}

VERSION_MARKER = "a000000"
SEPARATOR = "abcd"
PAYLOAD_WIDTH = 64

_HEADER_RE = re.compile(
    r"^(?:CREATE\s+(?:OR\s+REPLACE\s+)?)?(PACKAGE\s+BODY|TYPE\s+BODY|PACKAGE|PROCEDURE|FUNCTION|TYPE)"
    r"\s+((?:\"(?:[^\"]|\"\")*\"|[^\s\".]+)(?:\.(?:\"(?:[^\"]|\"\")*\"|[^\s\".]+))*)\s+WRAPPED\s*$",
    re.IGNORECASE,
)
_PLAIN_NAME = re.compile(r"[A-Z][A-Z0-9_$#]*\Z")
_MODIFIERS = {"OR", "REPLACE", "EDITIONABLE", "NONEDITIONABLE"}


@dataclass(frozen=True)
class WrappedUnit:
    unit_type: str
    unit_name: str
    header: tuple[str, ...]
    payload: str

    @property
    def text(self) -> str:
        return "\n".join(self.header) + "\n" + self.payload + "\n"


@dataclass(frozen=True)
class _UnitHead:
    unit_type: str
    name: str
    prefix_end: int  # offset where the unit keyword starts
    wrapped: bool


def _display_name(parts: list[str]) -> str:
    out = []
    for p in parts:
        out.append(p if _PLAIN_NAME.match(p) else '"' + p.replace('"', '""') + '"')
    return ".".join(out)


def _unit_head(source: str) -> _UnitHead:
    """Locate the unit keyword and name after an optional CREATE [OR REPLACE]."""
    try:
        toks = [t for t in tokenize(source) if t.kind != COMMENT]
    except SqlError as exc:
        raise UnrecognizedUnit(f"cannot tokenize unit: {exc}") from exc
    if not toks:
        raise UnrecognizedUnit("empty source")
    i = 0
    if toks[0].is_kw("DECLARE", "BEGIN"):
        raise AnonymousBlockNotWrappable("anonymous PL/SQL blocks are not wrapped")
    if toks[0].is_kw("CREATE"):
        i = 1
        while i < len(toks) and toks[i].value in _MODIFIERS:
            i += 1
    if i >= len(toks):
        raise UnrecognizedUnit("no unit keyword")
    word = toks[i].value
    start = toks[i].pos
    if word == "TRIGGER":
        name = toks[i + 1].value if i + 1 < len(toks) else "?"
        raise TriggerNotWrappable(f"trigger {name} cannot be wrapped")
    if word in ("PACKAGE", "TYPE") and i + 1 < len(toks) and toks[i + 1].is_kw("BODY"):
        unit_type = "PACKAGE_BODY" if word == "PACKAGE" else "TYPE_BODY"
        i += 2
    elif word in ("PACKAGE", "PROCEDURE", "FUNCTION"):
        unit_type = word
        i += 1
    elif word == "TYPE":
        unit_type = "TYPE_SPEC"
        i += 1
    else:
        raise UnrecognizedUnit(f"not a wrappable unit: {word or toks[i].text!r}")
    parts: list[str] = []
    while i < len(toks) and toks[i].kind in (IDENT, QIDENT, KEYWORD) and not toks[i].is_kw("AS", "IS"):
        parts.append(toks[i].value)
        if i + 1 < len(toks) and toks[i + 1].is_sym("."):
            i += 2
            continue
        i += 1
        break
    if not parts:
        raise UnrecognizedUnit("unit has no name")
    wrapped = i < len(toks) and toks[i].value == "WRAPPED"
    return _UnitHead(unit_type, _display_name(parts), start, wrapped)


def wrap_unit(source: str) -> WrappedUnit:
    """Wrap one PL/SQL unit. The payload encodes the full *source*."""
    head = _unit_head(source)
    if head.wrapped:
        raise UnrecognizedUnit(f"{head.name} is already wrapped")
    data = source.encode("utf-8")
    b64 = base64.b64encode(data).decode("ascii")
    payload = "\n".join(b64[i:i + PAYLOAD_WIDTH] for i in range(0, len(b64), PAYLOAD_WIDTH))
    header = (
        f"{UNIT_KEYWORDS[head.unit_type]} {head.name} WRAPPED",
        VERSION_MARKER,
        format(len(data), "x"),
        SEPARATOR,
    )
    return WrappedUnit(head.unit_type, head.name, header, payload)


def parse_wrapped(text: str) -> WrappedUnit:
    lines = text.strip("\n").split("\n")
    lines = [ln.rstrip("\r") for ln in lines]
    while lines and lines[-1].strip() in ("", "/"):
        lines.pop()
    if len(lines) < 4:
        raise MalformedHeader("wrapped unit needs at least four header lines")
    m = _HEADER_RE.match(lines[0].strip())
    if not m:
        raise MalformedHeader(f"bad first header line: {lines[0]!r}")
    if lines[1].strip() != VERSION_MARKER:
        raise MalformedHeader(f"bad version marker: {lines[1]!r}")
    if not re.fullmatch(r"[0-9a-f]+", lines[2].strip()):
        raise MalformedHeader(f"bad length line: {lines[2]!r}")
    if lines[3].strip() != SEPARATOR:
        raise MalformedHeader(f"bad separator line: {lines[3]!r}")
    keyword = " ".join(m.group(1).upper().split())
    header = (f"{keyword} {m.group(2)} WRAPPED", VERSION_MARKER, lines[2].strip(), SEPARATOR)
    payload = "\n".join(ln.strip() for ln in lines[4:])
    return WrappedUnit(_KEYWORD_UNITS[keyword], m.group(2), header, payload)


def unwrap_unit(wrapped: str | WrappedUnit) -> str:
    """Recover the original source from a wrapped unit."""
    unit = parse_wrapped(wrapped) if isinstance(wrapped, str) else wrapped
    try:
        data = base64.b64decode("".join(unit.payload.split()), validate=True)
    except (binascii.Error, ValueError) as exc:
        raise BadPayload(f"payload is not valid base64: {exc}") from exc
    expected = int(unit.header[2], 16)
    if len(data) != expected:
        raise LengthMismatch(f"header says {expected} bytes, payload holds {len(data)}")
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BadPayload("payload is not UTF-8") from exc


def is_wrapped_text(text: str) -> bool:
    first = text.lstrip().split("\n", 1)[0].strip()
    return bool(_HEADER_RE.match(first))


def _is_unit_statement(chunk: str) -> bool:
    try:
        toks = [t for t in tokenize(chunk) if t.kind != COMMENT]
    except SqlError:
        return False
    if not toks or not toks[0].is_kw("CREATE"):
        return False
    for t in toks[1:]:
        if t.value in _MODIFIERS:
            continue
        return t.value in ("PACKAGE", "PROCEDURE", "FUNCTION", "TYPE", "TRIGGER")
    return False


def wrap_statement(chunk: str) -> str:
    """Wrap a CREATE statement, keeping its CREATE [OR REPLACE] prefix."""
    head = _unit_head(chunk)
    if head.wrapped:
        return chunk
    unit = wrap_unit(chunk)
    return chunk[:head.prefix_end] + unit.text.rstrip("\n")


def resolve_iname(iname: str | Path) -> Path:
    path = Path(iname)
    if not path.suffix:
        path = path.with_suffix(".sql")
    return path


def wrap_file(iname: str | Path, oname: str | Path | None = None) -> Path:
    """Wrap every PL/SQL unit of a SQL*Plus script; copy everything else.

    Without an extension *iname* gets ``.sql``; without *oname* the output
    lands next to the input with a ``.plb`` extension.
    """
    src = resolve_iname(iname)
    if not src.is_file():
        raise FileNotFoundError(f"input file {src} not found")
    out = Path(oname) if oname else src.with_suffix(".plb")
    text = src.read_text(encoding="utf-8")
    pieces: list[str] = []
    last = 0
    for chunk in split_script(text):
        if not _is_unit_statement(chunk.text):
            continue
        try:
            wrapped = wrap_statement(chunk.text)
        except TriggerNotWrappable as exc:
            raise TriggerNotWrappable(f"{src}:{chunk.line}: {exc}") from exc
        pieces.append(text[last:chunk.start])
        pieces.append(wrapped)
        last = chunk.start + len(chunk.text)
    pieces.append(text[last:])
    out.write_text("".join(pieces), encoding="utf-8")
    return out


def create_wrapped(catalog, source: str, user: str = "SYS"):
    """Wrap *source* and install the wrapped unit in *catalog* as *user*."""
    from .catalog import install_source

    if not _is_unit_statement(source):
        _unit_head(source)
        raise UnrecognizedUnit("create_wrapped needs a CREATE [OR REPLACE] unit")
    statement = wrap_statement(source)
    try:
        return install_source(catalog, statement, user)
    except GuardError as exc:
        raise CreateFailure(str(exc)) from exc
