import pytest

# criterion number -> list of (part, ok, detail)
_CRITERIA: dict[int, list[tuple[str, bool, str]]] = {}


@pytest.fixture
def criterion():
    def record(num: int, part: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA.setdefault(num, []).append((part, bool(ok), detail))
        print(f"criterion {num} [{part}] {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        parts = _CRITERIA[num]
        failed = [p for p in parts if not p[1]]
        status = "PASS" if not failed else "FAIL"
        note = "; ".join(f"{p[0]}: {p[2]}" for p in failed) if failed else f"{len(parts)} checks"
        terminalreporter.write_line(f"CRITERION {num}: {status} ({note})")
    terminalreporter.section("acceptance details")
    for num in sorted(_CRITERIA):
        for part, ok, detail in _CRITERIA[num]:
            terminalreporter.write_line(f"  {num} {part}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
