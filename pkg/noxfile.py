"""Lints, tests and runs the desk experiment using `nox`."""
import glob
import json
import os
import sys
from contextlib import suppress

import nox


PYTHON_VERSIONS_FILE = "pyversions.json"
try:
    with open(PYTHON_VERSIONS_FILE, "r", encoding="utf8") as f:
        python_versions_dict = json.load(f)
except Exception:
    print(
        "Please ensure Python executable paths are configured correctly in",
        PYTHON_VERSIONS_FILE)
    sys.exit(1)
PYTHON_VERSIONS = tuple(python_versions_dict.values())
# The newest configured interpreter runs the long sessions.
LATEST = PYTHON_VERSIONS[-1]
DESK_CONFIG = "configs/bachelier_1d.json"


def _test_modules() -> list:
    return [
        module for module in sorted(glob.glob("testing/*.py"))
        if os.path.basename(module).startswith("test")]


@nox.session(python=PYTHON_VERSIONS)
def lint(session: nox.Session) -> None:
    """Lints all library source code."""
    session.install("pylint", ".")
    for module in sorted(glob.glob("sobolprune/*.py")):
        with suppress(Exception):
            session.run("pylint", module)


@nox.session(python=PYTHON_VERSIONS)
def test(session: nox.Session) -> None:
    """Runs the unit tests, one module at a time. The desk test is skipped."""
    session.install(".")
    for module in _test_modules():
        session.run("python", module, env={"SOBOLPRUNE_SLOW": "0"})


@nox.session(python=LATEST)
def slow(session: nox.Session) -> None:
    """Runs the 1-d desk reproduction test (several minutes)."""
    session.install(".")
    session.run(
        "python", "-m", "unittest", "-v", "testing.test_pipeline.DeskScaleTest",
        env={"SOBOLPRUNE_SLOW": "1"})


@nox.session(python=LATEST)
def desk(session: nox.Session) -> None:
    """Runs the full pipeline on the desk config and prints the R² table."""
    session.install(".")
    session.run("sobolprune", "all", "--config", DESK_CONFIG, *session.posargs)
