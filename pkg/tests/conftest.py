import os
import shutil
import subprocess
import tempfile
import time
from pathlib import Path

import pytest

from sqlfix import FIXTURE_DATABASES, FIXTURE_TASKS
from sqlfix.domain import load_tasks
from sqlfix.sandbox import default_sandbox


@pytest.fixture(scope="session")
def fixture_tasks():
    return load_tasks(FIXTURE_TASKS)


@pytest.fixture(scope="session")
def tasks_by_id(fixture_tasks):
    return {t.task_id: t for t in fixture_tasks}


@pytest.fixture(scope="session")
def sandbox():
    return default_sandbox(FIXTURE_DATABASES)


def _pg_bin() -> Path | None:
    try:
        import pgserver
    except ImportError:
        return None
    b = Path(pgserver.__file__).parent / "pginstall" / "bin"
    return b if (b / "initdb").exists() else None


@pytest.fixture(scope="session")
def pg_dsn():
    """DSN of a throwaway PostgreSQL server, or skip.

    ``SQLFIX_TEST_PG_DSN`` points at an existing server; otherwise the
    binaries bundled with ``pgserver`` are started in a temp dir (as
    ``nobody`` when running as root, since initdb refuses root).
    """
    pytest.importorskip("psycopg")
    if os.environ.get("SQLFIX_TEST_PG_DSN"):
        yield os.environ["SQLFIX_TEST_PG_DSN"]
        return
    bindir = _pg_bin()
    if bindir is None:
        pytest.skip("no PostgreSQL binaries available")
    root = Path(tempfile.mkdtemp(prefix="sqlfix-pg-"))
    data, sock = root / "data", root / "sock"
    sock.mkdir()
    prefix: list[str] = []
    if os.geteuid() == 0:
        if not shutil.which("setpriv"):
            pytest.skip("running as root without setpriv")
        prefix = ["setpriv", "--reuid=nobody", "--regid=nogroup", "--clear-groups"]
        for p in (root, sock):
            os.chmod(p, 0o777)
    port = 54000 + os.getpid() % 1000
    log = root / "pg.log"
    try:
        subprocess.run(prefix + [str(bindir / "initdb"), "-D", str(data), "-U", "postgres",
                                 "--auth=trust", "-E", "UTF8", "--no-sync"],
                       check=True, capture_output=True, timeout=120)
        subprocess.run(prefix + [str(bindir / "pg_ctl"), "-D", str(data), "-l", str(log), "-w",
                                 "-o", f"-k {sock} -p {port} -h ''", "start"],
                       check=True, capture_output=True, timeout=120)
    except (subprocess.SubprocessError, OSError) as exc:
        shutil.rmtree(root, ignore_errors=True)
        pytest.skip(f"could not start PostgreSQL: {exc}")
    time.sleep(0.2)
    try:
        yield f"host={sock} port={port} user=postgres"
    finally:
        subprocess.run(prefix + [str(bindir / "pg_ctl"), "-D", str(data), "-m", "immediate", "stop"],
                       capture_output=True, timeout=60)
        shutil.rmtree(root, ignore_errors=True)
