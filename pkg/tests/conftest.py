import numpy as np
import pytest

from symlab.oracle import OracleSpec, build_literal_induction_oracle, build_oracle
from symlab.tasks import Vocab


@pytest.fixture(scope="session")
def oracle():
    return build_oracle(OracleSpec())


@pytest.fixture(scope="session")
def literal_oracle():
    return build_literal_induction_oracle(OracleSpec())


@pytest.fixture(scope="session")
def vocab():
    return Vocab.for_size(64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance line; the terminal summary repeats them all."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append((number, line))
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
