"""Shared fixtures.

The desk-scale experiment (family V plus five paired replications) is costly,
so it is built once per session.  Point PRWM_TEST_CACHE at a directory to keep
it between sessions; finished runs and the family are then reused.
"""

import os
from pathlib import Path

import pytest

from prwm.config import parse_config
from prwm.continual import load_logs, prepare_family, run_replications
from prwm.metrics import write_report

ROOT = Path(__file__).resolve().parent.parent
DESK_CONFIG = ROOT / "configs" / "desk.cfg"


@pytest.fixture(scope="session")
def desk_outdir(tmp_path_factory) -> Path:
    cache = os.environ.get("PRWM_TEST_CACHE")
    if cache:
        out = Path(cache) / "desk"
        out.mkdir(parents=True, exist_ok=True)
        return out
    return tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="session")
def desk_cfg(desk_outdir):
    return parse_config(DESK_CONFIG, [f"outdir={desk_outdir}"])


@pytest.fixture(scope="session")
def desk_family(desk_cfg):
    return prepare_family(desk_cfg)


@pytest.fixture(scope="session")
def desk_logs(desk_cfg, desk_family):
    run_replications(desk_cfg, desk_family)
    logs = load_logs(desk_cfg.outdir)
    write_report(logs, desk_cfg.outdir)
    return logs


# -- acceptance verdict lines -------------------------------------------------

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records the verdict line for acceptance criterion n."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_VERDICTS[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        terminalreporter.write_line(_VERDICTS.get(number, f"criterion {number:2d}: FAIL  (not evaluated)"))
