"""Test-session plumbing: the acceptance criteria reporter."""

import sys

_CRITERIA: list[tuple[str, bool, str]] = []


def record_criterion(name: str, ok: bool, detail: str = "") -> None:
    _CRITERIA.append((name, ok, detail))
    # emit immediately too, so long runs show progress under -s
    status = "PASS" if ok else "FAIL"
    print(f"[criterion] {status}: {name}  {detail}", file=sys.stderr, flush=True)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, ok, detail in _CRITERIA:
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status}: {name}  {detail}")
