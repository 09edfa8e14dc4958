import numpy as np
import pytest

from conftest import randomize_bn, tiny_conv_net
from oracles import numeric_grad_at, rel_error
from nexprune import models
from nexprune.errors import BackwardBeforeForwardError, NonFiniteError, ShapeMismatchError
from nexprune.layers import Conv2d, ReLU
from nexprune.network import (INPUT, Network, checkpoint_meta, cross_entropy_loss,
                              load_architecture, load_checkpoint, save_architecture,
                              save_checkpoint, sgd_step)


def test_cross_entropy_against_direct_formula():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    loss, grad = cross_entropy_loss(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert loss == pytest.approx(-np.log(p[np.arange(5), labels]).mean(), rel=1e-12)
    onehot = np.eye(4)[labels]
    np.testing.assert_allclose(grad, (p - onehot) / 5, atol=1e-12)
    with pytest.raises(IndexError):
        cross_entropy_loss(logits, np.array([0, 4, 1, 1, 2]))


@pytest.mark.parametrize("arch", sorted(models.ARCHITECTURES))
def test_whole_network_gradient(arch):
    net = randomize_bn(models.build(arch, size=8, classes=3, seed=3)).astype(np.float64)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3, 8, 8))
    labels = rng.integers(0, 3, 4)

    def loss():
        out, _ = net.forward(x, train=True)
        return cross_entropy_loss(out, labels)[0]

    out, _ = net.forward(x, train=True)
    grads = net.backward(cross_entropy_loss(out, labels)[1])
    for key in ("fc.weight", net.convs()[0].name + ".weight"):
        p = net.parameter(key)
        idx = rng.choice(p.size, size=min(15, p.size), replace=False)
        assert rel_error(numeric_grad_at(loss, p, idx), grads[key].reshape(-1)[idx]) < 1e-5


def test_every_parameter_gets_a_gradient(tiny_net):
    out, _ = tiny_net.forward(np.ones((2, 2, 6, 6), np.float32), train=True)
    grads = tiny_net.backward(np.ones_like(out))
    assert set(grads) == {k for k, _ in tiny_net.parameters()}
    for k, p in tiny_net.parameters():
        assert grads[k].shape == p.shape


def test_backward_before_forward(tiny_net):
    with pytest.raises(BackwardBeforeForwardError):
        tiny_net.backward(np.zeros((1, 3)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_input_shape_and_finiteness_checks(tiny_net):
    with pytest.raises(ShapeMismatchError):
        tiny_net.forward(np.zeros((1, 3, 6, 6), np.float32))
    bad = np.zeros((1, 2, 6, 6), np.float32)
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        tiny_net.forward(bad)


def test_construction_validates_graph():
    with pytest.raises(ValueError):
        Network([ReLU("r", ["missing"])], (1, 2, 2))
    with pytest.raises(ShapeMismatchError):
        Network([Conv2d("c", [INPUT], 3, 2)], (2, 5, 5))


def test_capture_points_follow_bn_and_residual_add():
    net = models.build("resnet_small", size=8)
    pts = net.capture_points()
    assert pts["stem"] == "stem_relu"
    assert pts["b1_c2"] == "b1_relu"
    assert pts["b2_sc"] == "b2_relu"
    _, caps = net.forward(np.ones((2, 3, 8, 8), np.float32), capture=["b2_c1"])
    assert list(caps) == ["b2_c1"] and caps["b2_c1"].min() >= 0


def test_sgd_step_is_in_place_and_checks_shapes(tiny_net):
    before = tiny_net.parameter("fc.weight").copy()
    grads = {k: np.ones_like(p) for k, p in tiny_net.parameters()}
    sgd_step(tiny_net, grads, 0.1)
    np.testing.assert_allclose(tiny_net.parameter("fc.weight"), before - 0.1, atol=1e-6)
    with pytest.raises(ShapeMismatchError):
        sgd_step(tiny_net, {"fc.weight": np.ones(3)}, 0.1)


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    net = randomize_bn(models.build("resnet_small", size=8, classes=3, seed=5))
    net["stem"].channel_ids = np.array([0, 2, 3, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17])
    save_checkpoint(net, tmp_path / "ck", {"seed": 5})
    back = load_checkpoint(tmp_path / "ck")
    for (k, a), (k2, b) in zip(net.parameters(), back.parameters()):
        assert k == k2 and a.dtype == b.dtype and np.array_equal(a, b)
    for la, lb in zip(net.layers, back.layers):
        for k in la.buffers:
            assert np.array_equal(la.buffers[k], lb.buffers[k])
    assert np.array_equal(back["stem"].channel_ids, net["stem"].channel_ids)
    assert checkpoint_meta(tmp_path / "ck") == {"seed": 5}
    x = np.random.default_rng(0).standard_normal((3, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(net.forward(x)[0], back.forward(x)[0])


def test_architecture_round_trip(tmp_path):
    net = tiny_conv_net()
    save_architecture(net, tmp_path / "a.json")
    back = load_architecture(tmp_path / "a.json", seed=0)
    assert [layer.hparams() for layer in back.layers] == [layer.hparams() for layer in net.layers]
    for (_, a), (_, b) in zip(net.parameters(), back.parameters()):
        assert np.array_equal(a, b)


def test_copy_is_independent(tiny_net):
    other = tiny_net.copy()
    other.parameter("fc.weight")[:] = 0
    assert np.abs(tiny_net.parameter("fc.weight")).sum() > 0
