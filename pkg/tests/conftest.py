import hashlib
import shutil
from pathlib import Path

import pytest
import torch

from agediff.backbone.toy import load_checkpoint
from agediff.config import RunConfig
from agediff.pipeline import run_pipeline

SRC = Path(__file__).resolve().parents[1] / "src" / "agediff"

ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(SRC.rglob("*.py")):
        h.update(str(p.relative_to(SRC)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_run(request):
    """The default pipeline output, reused across sessions while sources are unchanged."""
    root = request.config.cache.mkdir(f"default-run-{source_digest()}")
    out = root / "run"
    if not (out / "run.json").exists():
        shutil.rmtree(out, ignore_errors=True)
        run_pipeline(RunConfig(), out)
    return out


@pytest.fixture(scope="session")
def specialized(default_run):
    return load_checkpoint(default_run / "specialized")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    num, title = marker.args
    ok = call.excinfo is None
    prev = ACCEPTANCE.get(num, (title, True))
    ACCEPTANCE[num] = (title, prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}")
