import numpy as np
import pytest
from hypothesis import settings

from nexprune import models
from nexprune.layers import BatchNorm2d, Conv2d, Flatten, Linear, ReLU
from nexprune.network import INPUT, Network

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def tiny_conv_net(channels=(4, 5), size=6, classes=3, seed=0):
    """conv-bn-relu x2, flatten, linear: small enough for loop oracles."""
    c1, c2 = channels
    layers = [
        Conv2d("c1", [INPUT], 2, c1, 3, padding=1, bias=False),
        BatchNorm2d("c1_bn", ["c1"], c1),
        ReLU("c1_relu", ["c1_bn"]),
        Conv2d("c2", ["c1_relu"], c1, c2, 3, padding=1, bias=True),
        ReLU("c2_relu", ["c2"]),
        Flatten("flat", ["c2_relu"]),
        Linear("fc", ["flat"], c2 * size * size, classes),
    ]
    return Network(layers, (2, size, size), name="tiny").init_params(seed)


def randomize_bn(net, seed=0):
    """Give every batchnorm non-trivial affine params and running stats."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if isinstance(layer, BatchNorm2d):
            c = layer.channels
            layer.params["weight"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
            layer.params["bias"] = rng.uniform(-0.3, 0.3, c).astype(np.float32)
            layer.buffers["running_mean"] = rng.uniform(-0.2, 0.2, c).astype(np.float32)
            layer.buffers["running_var"] = rng.uniform(0.5, 2.0, c).astype(np.float32)
            layer.buffers["num_batches_tracked"] = np.ones(1, np.float32)
    return net


@pytest.fixture
def tiny_net():
    return tiny_conv_net()


@pytest.fixture(params=sorted(models.ARCHITECTURES))
def toy_net(request):
    return randomize_bn(models.build(request.param, size=8, classes=4, seed=1))


# -- acceptance reporting --------------------------------------------------

ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, title: str, passed: bool, detail: str):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
