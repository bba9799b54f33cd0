import pytest

from fedperm.datamodel import load_bundled_digits
from fedperm.paillier import keygen, seeded_rng


@pytest.fixture(scope="session")
def keys512():
    return keygen(512, seeded_rng(7))


@pytest.fixture(scope="session")
def other_keys512():
    return keygen(512, seeded_rng(8))


@pytest.fixture(scope="session")
def digits():
    return load_bundled_digits()


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record a criterion outcome; the terminal summary prints one line each."""

    def record(number: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(ok), detail)
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
