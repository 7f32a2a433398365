import numpy as np
import pytest

from batchlab import data, gp
from batchlab.reward import RewardModel, RewardSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    """Reward model over a 6-point pool conditioned on 4 labelled points."""
    pool, orc = data.sample_pool(10, rng_seed=3)
    train, pool = data.draw_seed_set(pool, orc, 4, np.random.default_rng(0))
    params = gp.KernelParams(lengthscale=0.7, outputscale=1.2, noise_var=0.05)
    fitted = gp.FittedGP(params, train)
    return RewardModel.from_gp(fitted, pool.x, RewardSpec(1.0)), pool, train


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(ACCEPTANCE[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
