import pytest

# filled by tests/test_acceptance.py: (criterion, passed, detail)
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0].split("-")[1])):
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")


@pytest.fixture
def criterion():
    def record(name, passed, detail):
        ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
        print(f"{name} {'PASS' if passed else 'FAIL'}: {detail}")
        assert passed, f"{name}: {detail}"
    return record
