import numpy as np
import pytest
from scipy.special import expit

from ctmle_lasso.data import Dataset


def make_obs(n=400, p=6, seed=0, effect=1.0, ps_coef=0.8, binary_y=False):
    """Small confounded dataset: W standard normal, logistic A, linear or binary Y."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((n, p))
    a = rng.binomial(1, expit(ps_coef * w[:, 0] - 0.5 * w[:, 1]))
    if binary_y:
        y = rng.binomial(1, expit(-0.3 + w[:, 0] + 0.5 * w[:, 2] + effect * a)).astype(float)
    else:
        y = 1.0 + w[:, 0] + 0.5 * w[:, 2] + effect * a + rng.standard_normal(n)
    return Dataset(y, a, w)


@pytest.fixture
def obs():
    return make_obs()


# acceptance verdicts, filled by test_acceptance and echoed after the run
VERDICTS = {}


def record_verdict(number, ok, detail=""):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
    VERDICTS[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
