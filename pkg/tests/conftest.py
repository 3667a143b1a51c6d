import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: list[tuple[int, str, bool, str]] = []


def record(n: int, name: str, ok: bool, detail: str) -> None:
    _RESULTS.append((n, name, ok, detail))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains real models for several minutes")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance")
    for n, name, ok, detail in sorted(_RESULTS):
        terminalreporter.write_line(f"criterion {n} {name}: {'PASS' if ok else 'FAIL'}  {detail}")
