"""A statement-level guard for PL/SQL objects, and a toy wrap/unwrap toolkit."""

from .policy import Decision, Grant, GuardConfig, Reason, Verdict, decide, is_grant_active
from .sql import ObjectRef, ParsedStatement, classify, tokenize
from .wrap import unwrap_unit, wrap_file, wrap_unit

__all__ = [
    "Decision",
    "Grant",
    "GuardConfig",
    "ObjectRef",
    "ParsedStatement",
    "Reason",
    "Verdict",
    "classify",
    "decide",
    "is_grant_active",
    "tokenize",
    "unwrap_unit",
    "wrap_file",
    "wrap_unit",
]
