from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def gamma_pair(rng, n0, n1, a0=2.0, b0=1.0, a1=3.0, b1=1.5):
    """Reference Gamma(a0, rate b0) and fusion Gamma(a1, rate b1).

    Their log density ratio is exactly linear in ``(x, log x)`` with
    ``beta = (b0 - b1, a1 - a0)``.
    """
    x0 = rng.gamma(a0, 1.0 / b0, n0)
    x1 = rng.gamma(a1, 1.0 / b1, n1)
    return x0, x1, np.array([b0 - b1, a1 - a0])


LN11_T = 59.75377


@pytest.fixture(scope="session")
def ln11_reference():
    from tailfuse.io import load_reference_csv

    return load_reference_csv(FIXTURES / "ln11_reference.csv")


@pytest.fixture(scope="session")
def ln11_bounds(ln11_reference):
    """2,000 ROSF bounds for the shipped LN(1,1) fixture (fusion seed 0)."""
    from tailfuse.fusion import FusionConfig, run_rosf

    cfg = FusionConfig.for_threshold(LN11_T, 2000, 100, seed=0)
    return run_rosf(ln11_reference, LN11_T, cfg, workers=1)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
