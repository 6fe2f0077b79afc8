import numpy as np
import pytest

from selfheal import MAIN_MODEL
from selfheal.dynamics import EvolutionConfig, InitialState, evolve_batch
from selfheal.ensemble import rng_for
from selfheal.lattice import HoppingModel


@pytest.fixture
def main_model():
    return MAIN_MODEL


@pytest.fixture
def nn_model():
    return HoppingModel({1: 0.7, -1: 1.0})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_state(rng, n):
    return rng.standard_normal(n) + 1j * rng.standard_normal(n)


ACCEPTANCE_LINES = {}


def report(number, passed, detail):
    """Record one acceptance verdict; the terminal summary lists them in order."""
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def weak_coefficients_run(model, spec, index, noise, n, times, seed=3, dt=0.1):
    """Biorthogonal coefficients of ``n`` noisy runs started in mode ``index``.

    Returns shape ``(len(times), L, n)``.
    """
    cfg = EvolutionConfig(model, spec.size, noise=noise, dt=dt, t_max=float(times[-1]),
                          sample_stride=int(round(times[-1] / dt)),
                          init=InitialState(kind="eigen_index", index=index),
                          snapshot_times=tuple(times))
    res = evolve_batch(cfg, [rng_for(seed, i) for i in range(n)], pair=False)
    V = res.snap_psi * np.exp(res.snap_log_amp)[:, None, :]
    return np.einsum("lm,tlb->tmb", spec.left.conj(), V)
