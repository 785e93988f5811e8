import numpy as np
import pytest

from colar.dataset import gen_synthetic
from colar.model import Hyper, init_model
from colar.numeric import make_rng


def micro_model(seed, C=2, D=3, H=4, T=3, M=2, lam=1.0, beta=0.3, bias_scale=0.3):
    """Random micro-instance with non-zero biases so every parameter is exercised."""
    model = init_model(C, D, Hyper(T=T, H=H, M=M, lam=lam, beta=beta), seed)
    rng = np.random.default_rng(seed + 1000)
    for part in (model.dynamic, model.static):
        for name, arr in part.items():
            if name.endswith("_b"):
                arr[...] = bias_scale * rng.standard_normal(arr.shape)
    return model


@pytest.fixture
def small_data():
    return gen_synthetic(C=2, D=4, n_videos=4, frames_per_video=40, separation=6.0, rng=make_rng(3))


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
