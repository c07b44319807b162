import os
import tempfile
from datetime import date

import pytest
from hypothesis import settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from conftest import FAST_ITERATIONS
from plsqlguard.admin import (
    CONFIG_FILE, DEFAULT_ITERATIONS, GRANTS_FILE, OBJECTS_FILE, AdminControl, FileOutbox,
    initial_state, init_state, load_state, read_notification, save_state, verify_password,
)
from plsqlguard.errors import (
    AlreadyInitialized, BadPassword, CorruptState, DuplicateGrant, DuplicateObject,
    GrantNotFound, GuardObjectImmutable, InvalidIdentifier, InvalidWindow, NotFound,
    NotInitialized, NotifyFailure, ObjectNotProtected, WeakPassword,
)
from plsqlguard.policy import GUARD_OBJECTS, Reason
from plsqlguard.sql import ObjectRef, classify

PW = "initial-pass"


@pytest.fixture
def ctl(tmp_path):
    init_state(tmp_path, PW, iterations=FAST_ITERATIONS)
    return AdminControl.open(tmp_path, notifier=FileOutbox(tmp_path / "outbox"),
                             recipient="officer")


def test_verify_password(ctl):
    cfg = ctl.state.config
    assert verify_password(PW, cfg)
    assert not verify_password("wrong-pass", cfg)
    assert not verify_password("", cfg)


def test_default_iteration_count_is_used():
    st_ = initial_state("abcdefgh")
    assert st_.config.iterations == DEFAULT_ITERATIONS and len(st_.config.salt) == 16


def test_set_security(ctl):
    v = ctl.state.version
    ctl.set_security(PW, False)
    assert not ctl.state.config.enabled
    stmt = classify("DROP PACKAGE hr.x", "SYS")
    at = ctl.clock()
    assert ctl.snapshot().decide("SYS", True, stmt, at).reason == Reason.DISABLED_PASSTHROUGH
    with pytest.raises(BadPassword):
        ctl.set_security("wrong-pass", True)
    assert not ctl.state.config.enabled and ctl.failed_auth == 1
    ctl.set_security(PW, True)
    ctl.set_security(PW, True)
    assert ctl.state.version == v + 3


def test_set_password(ctl):
    with pytest.raises(BadPassword):
        ctl.set_password("wrong-pass", "hunter2hunter2")
    with pytest.raises(WeakPassword):
        ctl.set_password(PW, "short")
    old_salt = ctl.state.config.salt
    ctl.set_password(PW, "hunter2hunter2")
    assert ctl.verify("hunter2hunter2") and not ctl.verify(PW)
    assert ctl.state.config.salt != old_salt


def test_reset_password_writes_outbox(ctl, tmp_path):
    event = ctl.reset_password()
    files = list((tmp_path / "outbox").iterdir())
    assert len(files) == 1
    note = read_notification(files[0])
    assert note.password == event.password and note.recipient == "officer"
    assert len(event.password) == 16
    assert ctl.verify(event.password) and not ctl.verify(PW)
    # survives reload
    assert verify_password(event.password, load_state(tmp_path).config)


def test_reset_password_rolls_back_on_notify_failure(tmp_path):
    init_state(tmp_path, PW, iterations=FAST_ITERATIONS)

    def broken(event):
        raise OSError("mail server down")

    ctl = AdminControl.open(tmp_path, notifier=broken)
    with pytest.raises(NotifyFailure):
        ctl.reset_password()
    assert ctl.verify(PW)
    assert verify_password(PW, load_state(tmp_path).config)


def test_reset_password_unwritable_outbox(tmp_path):
    init_state(tmp_path, PW, iterations=FAST_ITERATIONS)
    blocker = tmp_path / "outbox"
    blocker.write_text("not a directory")
    ctl = AdminControl.open(tmp_path, notifier=FileOutbox(blocker))
    with pytest.raises(NotifyFailure):
        ctl.reset_password()
    assert ctl.verify(PW)


def test_reset_passwords_are_distinct(tmp_path):
    ctl = AdminControl(initial_state(PW, iterations=1), None, notifier=lambda e: None)
    seen = {ctl.reset_password().password for _ in range(10_000)}
    assert len(seen) == 10_000


def test_add_and_remove_object(ctl):
    ctl.add_object("hr", "package", "emp_actions")
    assert any(po.ref == ObjectRef("HR", "PACKAGE", "EMP_ACTIONS") for po in ctl.state.registry)
    with pytest.raises(DuplicateObject):
        ctl.add_object("HR", "PACKAGE", "EMP_ACTIONS")
    with pytest.raises(DuplicateObject):
        ctl.add_object("GUARD", "TABLE", "DDL_LOG")
    with pytest.raises(InvalidIdentifier):
        ctl.add_object("HR", "WIDGET", "X")
    with pytest.raises(InvalidIdentifier):
        ctl.add_object("HR", "TABLE", "1bad")
    ctl.remove_object("HR", "PACKAGE", "EMP_ACTIONS")
    with pytest.raises(NotFound):
        ctl.remove_object("HR", "PACKAGE", "EMP_ACTIONS")
    with pytest.raises(GuardObjectImmutable):
        ctl.remove_object("GUARD", "TABLE", "P_CONFIG")


def test_package_body_type_spelling(ctl):
    ctl.add_object("HR", "PACKAGE BODY", "EMP_ACTIONS")
    assert ctl.state.registry[-1].ref.obj_type == "PACKAGE_BODY"


def test_grant_and_revoke(ctl):
    with pytest.raises(ObjectNotProtected):
        ctl.grant_permission("SCOTT", "HR", "PACKAGE", "EMP_ACTIONS")
    ctl.add_object("HR", "PACKAGE", "EMP_ACTIONS")
    with pytest.raises(InvalidWindow):
        ctl.grant_permission("SCOTT", "HR", "PACKAGE", "EMP_ACTIONS", start_hour=9, end_hour=9)
    with pytest.raises(InvalidWindow):
        ctl.grant_permission("SCOTT", "HR", "PACKAGE", "EMP_ACTIONS",
                             date(2024, 2, 1), date(2024, 1, 1))
    ctl.grant_permission("SCOTT", "HR", "PACKAGE", "EMP_ACTIONS", start_hour=9, end_hour=17)
    ctl.grant_permission("HR", "HR", "PACKAGE", "EMP_ACTIONS")
    with pytest.raises(DuplicateGrant):
        ctl.grant_permission("scott", "HR", "PACKAGE", "EMP_ACTIONS")
    with pytest.raises(GuardObjectImmutable):
        ctl.grant_permission("SCOTT", "GUARD", "TABLE", "DDL_LOG")
    ctl.revoke_permission("SCOTT", "HR", "PACKAGE", "EMP_ACTIONS")
    assert [g.grantee for g in ctl.state.grants] == ["HR"]
    with pytest.raises(GrantNotFound):
        ctl.revoke_permission("SCOTT", "HR", "PACKAGE", "EMP_ACTIONS")


def test_removed_object_grants_are_inert_but_kept(ctl):
    ctl.add_object("HR", "PACKAGE", "EMP_ACTIONS")
    ctl.grant_permission("SCOTT", "HR", "PACKAGE", "EMP_ACTIONS")
    ctl.remove_object("HR", "PACKAGE", "EMP_ACTIONS")
    assert len(ctl.state.grants) == 1
    stmt = classify("DROP PACKAGE hr.emp_actions", "SYS")
    assert ctl.snapshot().decide("SYS", True, stmt, ctl.clock()).allowed


# -- persistence ------------------------------------------------------------


def test_save_load_round_trip(ctl, tmp_path):
    ctl.add_object("HR", "PACKAGE", "EMP_ACTIONS")
    ctl.add_object("HR", "TABLE", "\"Tab\tWith\\Odd\"")
    ctl.grant_permission("SCOTT", "HR", "PACKAGE", "EMP_ACTIONS",
                         date(2024, 1, 1), date(2024, 12, 31), 22, 6)
    ctl.set_security(PW, False)
    loaded = load_state(tmp_path)
    assert loaded == ctl.state


def test_fresh_dir_needs_initialization(tmp_path):
    with pytest.raises(NotInitialized):
        load_state(tmp_path)
    init_state(tmp_path, PW, iterations=FAST_ITERATIONS)
    s = load_state(tmp_path)
    assert s.config.enabled
    assert {po.ref for po in s.registry} == set(GUARD_OBJECTS)
    with pytest.raises(AlreadyInitialized):
        init_state(tmp_path, PW)
    with pytest.raises(WeakPassword):
        init_state(tmp_path / "other", "short")


@pytest.mark.parametrize("name", [CONFIG_FILE, OBJECTS_FILE, GRANTS_FILE])
def test_truncated_state_file_is_corrupt(ctl, tmp_path, name):
    ctl.add_object("HR", "PACKAGE", "EMP_ACTIONS")
    ctl.grant_permission("SCOTT", "HR", "PACKAGE", "EMP_ACTIONS")
    path = tmp_path / name
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 10])
    with pytest.raises(CorruptState):
        load_state(tmp_path)


def test_tampered_state_file_is_corrupt(ctl, tmp_path):
    path = tmp_path / OBJECTS_FILE
    text = path.read_text()
    path.write_text(text.replace("DDL_LOG", "DDL_LOX"))
    with pytest.raises(CorruptState):
        load_state(tmp_path)


def test_missing_state_file_is_corrupt(ctl, tmp_path):
    os.unlink(tmp_path / GRANTS_FILE)
    with pytest.raises(CorruptState):
        load_state(tmp_path)


def test_no_plaintext_password_on_disk(ctl, tmp_path):
    ctl.set_password(PW, "brand-new-secret")
    ev = ctl.reset_password()
    for name in (CONFIG_FILE, OBJECTS_FILE, GRANTS_FILE):
        body = (tmp_path / name).read_text()
        for secret in (PW, "brand-new-secret", ev.password):
            assert secret not in body


def test_save_writes_only_requested_table(ctl, tmp_path):
    before = (tmp_path / GRANTS_FILE).read_bytes()
    save_state(ctl.state, tmp_path, (OBJECTS_FILE,))
    assert (tmp_path / GRANTS_FILE).read_bytes() == before
    assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]


# -- model-based ------------------------------------------------------------

OWNERS = st.sampled_from(["HR", "SCOTT", "GUARD"])
TYPES = st.sampled_from(["PACKAGE", "TABLE", "PROCEDURE"])
NAMES = st.sampled_from(["EMP_ACTIONS", "EMPLOYEES", "DDL_LOG", "P_CONFIG", "X"])
USERS = st.sampled_from(["SCOTT", "HR", "SYS"])
GUARD_KEYS = {(r.owner, r.name) for r in GUARD_OBJECTS}


class AdminModel(RuleBasedStateMachine):
    """Random admin sequences against plain sets; the state dir is reloaded
    every step to check persistence as well."""

    def __init__(self):
        super().__init__()
        self.dir = tempfile.mkdtemp()
        init_state(self.dir, PW, iterations=1)
        self.ctl = AdminControl.open(self.dir)
        self.objects = set()
        self.grants = set()

    @rule(o=OWNERS, t=TYPES, n=NAMES)
    def add(self, o, t, n):
        guard = (o, n) in GUARD_KEYS
        try:
            self.ctl.add_object(o, t, n)
            assert not guard and (o, t, n) not in self.objects
            self.objects.add((o, t, n))
        except DuplicateObject:
            assert guard or (o, t, n) in self.objects

    @rule(o=OWNERS, t=TYPES, n=NAMES)
    def remove(self, o, t, n):
        try:
            self.ctl.remove_object(o, t, n)
            self.objects.remove((o, t, n))
        except GuardObjectImmutable:
            assert (o, n) in GUARD_KEYS
        except NotFound:
            assert (o, t, n) not in self.objects

    @rule(u=USERS, o=OWNERS, t=TYPES, n=NAMES)
    def grant(self, u, o, t, n):
        try:
            self.ctl.grant_permission(u, o, t, n)
            assert (o, t, n) in self.objects and (u, o, t, n) not in self.grants
            self.grants.add((u, o, t, n))
        except GuardObjectImmutable:
            assert (o, n) in GUARD_KEYS
        except ObjectNotProtected:
            assert (o, t, n) not in self.objects
        except DuplicateGrant:
            assert (u, o, t, n) in self.grants

    @rule(u=USERS, o=OWNERS, t=TYPES, n=NAMES)
    def revoke(self, u, o, t, n):
        try:
            self.ctl.revoke_permission(u, o, t, n)
            self.grants.remove((u, o, t, n))
        except GrantNotFound:
            assert (u, o, t, n) not in self.grants

    @rule(flag=st.booleans())
    def toggle(self, flag):
        self.ctl.set_security(PW, flag)

    @invariant()
    def matches_model(self):
        s = load_state(self.dir)
        assert s == self.ctl.state
        refs = {(po.ref.owner, po.ref.obj_type, po.ref.name) for po in s.registry
                if not po.guard_owned}
        assert refs == self.objects
        assert {(g.grantee, g.object.owner, g.object.obj_type, g.object.name)
                for g in s.grants} == self.grants
        assert set(GUARD_OBJECTS) <= {po.ref for po in s.registry}


TestAdminModel = AdminModel.TestCase
TestAdminModel.settings = settings(max_examples=40, stateful_step_count=25, deadline=None)
