import numpy as np
import pytest

from stlsnn.layers import LayerKind, LayerSpec
from stlsnn.network import Network


def random_dense_net(rng, n_in=None, hidden=None, C=None, P=None, v_th=None, gain=1.5):
    """Small dense net with jittered thresholds (so soft-mode gradients are well conditioned)."""
    n_in = n_in or int(rng.integers(3, 9))
    C = C or int(rng.integers(2, 4))
    P = P or int(rng.integers(1, 4))
    specs = [LayerSpec(LayerKind.DENSE, features=h) for h in (hidden or [int(rng.integers(3, 10))])]
    specs.append(LayerSpec(LayerKind.VOTING, classes=C, population=P))
    v = float(rng.uniform(0.3, 1.5)) if v_th is None else v_th
    net = Network(specs, (n_in,), v_th_init=v, rng=rng, init_gain=gain)
    for p in net.params:
        if p is not None:
            p.v_th = p.v_th + rng.normal(0, 0.1, p.v_th.shape)
    return net


def random_window(rng, net, T, B, binary=False):
    x = rng.random((T, B) + net.input_shape)
    return (x < 0.5).astype(float) if binary else x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
