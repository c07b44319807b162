"""Reference decision procedure written without reusing the policy module.

Everything is a plain tuple and a linear scan so it can be checked by eye.
registry rows: (owner, obj_type, name, guard_owned)
grant rows:    (grantee, owner, obj_type, name, start_date, end_date, start_hour, end_hour)
"""

from datetime import timezone

GUARD_NAMES = {"SECURITY_OBJECT", "USER_PERMISSION", "P_CONFIG", "KILLED_SESSIONS",
               "DDL_LOG", "GUARD_PKG"}


def same_type(a, b):
    if a == b:
        return True
    if a == "UNKNOWN" or b == "UNKNOWN":
        return True
    return sorted([a, b]) == ["PACKAGE", "PACKAGE_BODY"]


def hour_ok(start, end, hour):
    if start is None:
        return True
    if start < end:
        return start <= hour and hour < end
    return hour >= start or hour < end


def grant_live(row, at):
    _, _, _, _, sd, ed, sh, eh = row
    at = at.astimezone(timezone.utc)
    if sd is not None and at.date() < sd:
        return False
    if ed is not None and at.date() > ed:
        return False
    return hour_ok(sh, eh, at.hour)


def has_grant(user, owner, obj_type, name, grants, at):
    for row in grants:
        if row[0] != user or row[1] != owner or row[3] != name:
            continue
        if same_type(row[2], obj_type) and grant_live(row, at):
            return True
    return False


def naive_decide(user, cls, targets, dictionary_refs, registry, grants, enabled, at):
    """targets: list of (owner, obj_type, name). Returns (verdict, reason)."""
    user = user.upper()
    for owner, _, name in targets:
        if owner == "GUARD" and name in GUARD_NAMES:
            return ("KILL", "GUARD_OBJECT")
    if not enabled:
        return ("ALLOW", "DISABLED_PASSTHROUGH")
    if dictionary_refs:
        for owner, obj_type, name, guard in registry:
            if guard:
                continue
            if not has_grant(user, owner, obj_type, name, grants, at):
                return ("KILL", "DICTIONARY_VIEW")
    if cls in ("DDL", "DML"):
        for t_owner, t_type, t_name in targets:
            for owner, obj_type, name, _ in registry:
                if owner == t_owner and name == t_name and same_type(obj_type, t_type):
                    if not has_grant(user, owner, obj_type, name, grants, at):
                        return ("KILL", "PROTECTED_OBJECT")
    return ("ALLOW", "OK")
