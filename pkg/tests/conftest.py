import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from orthoplanes import scenes  # noqa: E402


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    """Blobs baked at 16x16: 8 training and 2 test views."""
    root = tmp_path_factory.mktemp("tiny_blobs")
    scenes.bake_dataset(scenes.blobs_scene(), 8, 2, 16, seed=0, out_dir=root, n_samples=128)
    return root


_ACCEPTANCE = {}


class _Recorder:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} [{status}] {self.title}: {self.detail or exc}"
        _ACCEPTANCE[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c: c.detail = ...; assert ...`` records one line per criterion."""
    return _Recorder


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
