import pytest

_verdicts: dict[int, str] = {}
_attachments: list[tuple[str, str]] = []


@pytest.fixture
def verdict():
    """Record a criterion's outcome so it is printed even when the test fails."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _verdicts[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


@pytest.fixture
def attach():
    def add(title: str, text: str) -> None:
        _attachments.append((title, text))
    return add


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        terminalreporter.write_line(_verdicts[n])
    for title, text in _attachments:
        terminalreporter.section(title, sep="-")
        terminalreporter.write(text)
