import time
from contextlib import contextmanager

import pytest

_LINES = {}


class CriterionRecorder:
    """Records one PASS/FAIL line per acceptance criterion."""

    @contextmanager
    def __call__(self, number, title, cpu_limit=None):
        notes = []
        t0 = time.process_time()
        ok = False
        try:
            yield notes
            elapsed = time.process_time() - t0
            notes.append(f"{elapsed:.1f} s CPU" + (f" (limit {cpu_limit} s)" if cpu_limit else ""))
            assert cpu_limit is None or elapsed < cpu_limit, f"criterion {number} took {elapsed:.1f} s CPU"
            ok = True
        except BaseException as exc:
            notes.append(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            raise
        finally:
            status = "PASS" if ok else "FAIL"
            _LINES[number] = f"criterion {number} {status}  {title}: " + "; ".join(notes)


@pytest.fixture(scope="session")
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
