from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from plsqlguard.admin import AdminControl, FileOutbox, init_state
from plsqlguard.audit import AuditStore
from plsqlguard.catalog import Catalog, DbUser, install_source
from plsqlguard.protocol import AdminClient, SqlClient
from plsqlguard.server import GuardServer

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")

PASSWORD = "correct-horse-9"
# cheap key stretching keeps the suite fast; the default count is tested separately
FAST_ITERATIONS = 1000

USERS = {
    "SYS": DbUser("SYS", True, "SYS"),
    "SYSTEM": DbUser("SYSTEM", True, "SYSTEM"),
    "SCOTT": DbUser("SCOTT", False, "SCOTT"),
    "HR": DbUser("HR", False, "HR"),
    "ALICE": DbUser("ALICE", True, "HR"),
}

EMP_SPEC = """CREATE OR REPLACE PACKAGE hr.emp_actions AS
  PROCEDURE raise_salary (emp_id NUMBER, amount NUMBER);
  PROCEDURE fire_employee (emp_id NUMBER);
END emp_actions;"""

SEED = [
    EMP_SPEC,
    "CREATE TABLE hr.employees (employee_id NUMBER, salary NUMBER)",
    "CREATE TABLE hr.departments (id NUMBER)",
    "CREATE OR REPLACE PROCEDURE scott.hello AS BEGIN NULL; END;",
]


USERS_TSV = "sys\t1\tSYS\nscott\t0\tSCOTT\nhr\t0\tHR\n"
SEED_SQL = """CREATE OR REPLACE PACKAGE hr.emp_actions AS
  PROCEDURE fire_employee (emp_id NUMBER);
END emp_actions;
/
CREATE TABLE hr.employees (employee_id NUMBER)
/
"""


def seeded_catalog() -> Catalog:
    cat = Catalog(dict(USERS))
    for stmt in SEED:
        install_source(cat, stmt)
    return cat


@dataclass
class Harness:
    state_dir: Path
    admin: AdminControl
    catalog: Catalog
    audit: AuditStore
    server: GuardServer

    def sql(self, user: str) -> SqlClient:
        host, port = self.server.data_address
        return SqlClient(host, port, user, timeout=10)

    def ctl(self, password: str = PASSWORD) -> AdminClient:
        host, port = self.server.admin_address
        return AdminClient(host, port, password, timeout=10)


def start_harness(state_dir: Path, catalog: Catalog | None = None, init: bool = True,
                  fsync: bool = False, **server_kw) -> Harness:
    if init:
        init_state(state_dir, PASSWORD, iterations=FAST_ITERATIONS)
    admin = AdminControl.open(state_dir, notifier=FileOutbox(state_dir / "outbox"),
                              recipient="officer@example.org")
    catalog = catalog or seeded_catalog()
    audit = AuditStore(state_dir, fsync=fsync)
    server = GuardServer(admin, catalog, audit, console_path=state_dir / "console.sock",
                         **server_kw)
    server.start()
    return Harness(state_dir, admin, catalog, audit, server)


@pytest.fixture
def harness(tmp_path):
    h = start_harness(tmp_path / "state")
    yield h
    h.server.stop()


def write_config(tmp_path, **extra):
    (tmp_path / "users.tsv").write_text(USERS_TSV)
    (tmp_path / "seed.sql").write_text(SEED_SQL)
    lines = {"state_dir": "state", "users_file": "users.tsv", "seed_sql": "seed.sql",
             "data_port": "0", "admin_port": "0", "fsync": "0", **extra}
    cfg = tmp_path / "guard.conf"
    cfg.write_text("# test server\n" + "".join(f"{k} = {v}\n" for k, v in lines.items()))
    (tmp_path / "pw").write_text(PASSWORD + "\n")
    return cfg
