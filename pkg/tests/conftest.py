import numpy as np
import pytest

from eve import config, data, kernels


@pytest.fixture
def tiny():
    return config.tiny()


@pytest.fixture
def small_cfg():
    # structure of the tiny config at a size that trains in a second
    return config.tiny().replace(dim=16, heads=2, image_size=16, patch_size=4, dec_dim=8, dec_heads=2,
                                 batch_size=8, steps=12, warmup_steps=2, router_stats_every=4)


@pytest.fixture
def small_pairs(small_cfg):
    return data.generate_corpus(48, small_cfg.image_size, 0, small_cfg.patch_size)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------

ACCEPTANCE = {}


def record(number, passed, detail=""):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
