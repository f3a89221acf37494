from collections import defaultdict

import pytest

# criterion number -> list of (part, passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, list[tuple[str, bool | None, str]]] = defaultdict(list)


@pytest.fixture
def record():
    """``record(criterion, part, passed, detail)``; ``passed=None`` marks a skip."""

    def _record(criterion: int, part: str, passed: bool | None, detail: str) -> None:
        ACCEPTANCE[criterion].append((part, passed, detail))
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        print(f"criterion {criterion} [{part}]: {status} {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        if any(p is False for _, p, _ in parts):
            status = "FAIL"
        elif all(p is None for _, p, _ in parts):
            status = "SKIP"
        else:
            status = "PASS"
        if len(parts) == 1:
            detail = parts[0][2]
        elif status == "PASS":
            detail = f"all {len(parts)} checks passed"
        else:
            detail = "; ".join(f"{name}: {d}" for name, p, d in parts if p is not True)
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
