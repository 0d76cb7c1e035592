import numpy as np
import pytest

from metatpp.encoder import EncoderConfig, EventSequence
from metatpp.intensity import IntensityModel, ModelConfig
from metatpp.metatrain import split_episode

# criterion number -> PASS/FAIL line, filled by test_acceptance and echoed at the end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


def central_diff(fn, arr, h=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return out


def rel_err(a, b):
    """Normwise relative error max|a - b| / max|b|; structurally zero gradients compare absolutely."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def tiny_config(periods=(24.0,), context_dim=2, width=8, kz=4, time_unit=1.0):
    enc = EncoderConfig(hidden=4, support_dim=4, context_dim=context_dim, task_dim=kz,
                        fusion_layers=1, fusion_units=8)
    return ModelConfig(periods=periods, mnn_width=width, mnn_depth=2, time_scale=168.0,
                       mnn_time_unit=time_unit, encoder=enc)


def random_episode(rng, n_support=6, n_query=20, context_dim=2, T_c=12.0, T_e=168.0, task_id="t"):
    sup = np.sort(rng.uniform(0, T_c, n_support))
    qry = np.sort(rng.uniform(T_c, T_e, n_query))
    return split_episode(EventSequence(np.concatenate([sup, qry]), task_id),
                         rng.normal(size=context_dim), T_c, T_e, task_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return IntensityModel(tiny_config(), seed=7, scale=5.0)
