import numpy as np
import pytest

from volhawkes.kernels import ZERO, KernelMatrix, PowerLaw, sign_expand

# criterion number -> (passed, detail); filled by test_acceptance and printed at the end
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


DAY = 1.0 / 252


def three_strike_kernel(share: float = 1.0) -> KernelMatrix:
    """Three strikes (ITM, ATM, OTM) on one slice with day-scaled power laws."""
    pl = lambda a, g: PowerLaw(a, g, DAY)
    entries = (
        (pl(0.48, 0.08), pl(0.18, 0.15), pl(0.13, 0.15)),
        (pl(0.18, 0.15), pl(0.52, 0.08), ZERO),
        (pl(0.13, 0.15), ZERO, pl(0.14, 0.08)),
    )
    return sign_expand(KernelMatrix(entries), share)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
