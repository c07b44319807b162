"""Exception hierarchy shared by every guard component.

Each error carries a short ``code`` used verbatim on the wire
(``ERR <code> <message>``).
"""

from __future__ import annotations


class GuardError(Exception):
    code = "error"


# --- statement analysis -----------------------------------------------------

class SqlError(GuardError):
    code = "malformed_statement"


class UnterminatedString(SqlError):
    pass


class UnterminatedComment(SqlError):
    pass


class EmptyStatement(SqlError):
    code = "empty_statement"


class MalformedStatement(SqlError):
    pass


# --- admin control ----------------------------------------------------------

class BadPassword(GuardError):
    code = "bad_password"


class WeakPassword(GuardError):
    code = "weak_password"


class NotifyFailure(GuardError):
    code = "notify_failure"


class DuplicateObject(GuardError):
    code = "duplicate_object"


class InvalidIdentifier(GuardError):
    code = "invalid_identifier"


class NotFound(GuardError):
    code = "not_found"


class GuardObjectImmutable(GuardError):
    code = "guard_object_immutable"


class ObjectNotProtected(GuardError):
    code = "object_not_protected"


class InvalidWindow(GuardError):
    code = "invalid_window"


class DuplicateGrant(GuardError):
    code = "duplicate_grant"


class GrantNotFound(GuardError):
    code = "grant_not_found"


class CorruptState(GuardError):
    code = "corrupt_state"


class NotInitialized(GuardError):
    code = "not_initialized"


class AlreadyInitialized(GuardError):
    code = "already_initialized"


class StorageFailure(GuardError):
    code = "storage_failure"


# --- audit ------------------------------------------------------------------

class DuplicateSession(GuardError):
    code = "duplicate_session"


class InvalidRange(GuardError):
    code = "invalid_range"


class NotDdl(GuardError):
    code = "not_ddl"


class InvalidRecord(GuardError):
    code = "invalid_record"


# --- wrap toolkit -----------------------------------------------------------

class WrapError(GuardError):
    code = "wrap_error"


class TriggerNotWrappable(WrapError):
    code = "trigger_not_wrappable"


class AnonymousBlockNotWrappable(WrapError):
    code = "anonymous_block_not_wrappable"


class UnrecognizedUnit(WrapError):
    code = "unrecognized_unit"


class MalformedHeader(WrapError):
    code = "malformed_header"


class LengthMismatch(WrapError):
    code = "length_mismatch"


class BadPayload(WrapError):
    code = "bad_payload"


class CreateFailure(WrapError):
    code = "create_failure"


# --- catalog ----------------------------------------------------------------

class CatalogError(GuardError):
    code = "catalog_error"


class NoSuchObject(CatalogError):
    code = "no_such_object"


class UnknownView(CatalogError):
    code = "unknown_view"


class UnknownUser(CatalogError):
    code = "unknown_user"


# --- protocol ---------------------------------------------------------------

class ProtocolViolation(GuardError):
    code = "protocol"


class FrameTooLarge(ProtocolViolation):
    code = "frame_too_large"


class AuthFailure(ProtocolViolation):
    code = "auth"


class BindFailure(GuardError):
    code = "bind_failure"
