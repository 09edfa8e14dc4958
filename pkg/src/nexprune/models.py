"""Built-in toy architectures used by the CLI and the acceptance runs.

All three take ``(channels, size, size)`` inputs with ``size`` divisible by 8
and end in a single linear classifier head.
"""

from __future__ import annotations

from .layers import (Add, AvgPool2d, BatchNorm2d, Conv2d, Flatten, Linear,
                     MaxPool2d, ReLU)
from .network import INPUT, Network


class _Builder:
    def __init__(self):
        self.layers = []
        self.last = INPUT

    def add(self, layer):
        self.layers.append(layer)
        self.last = layer.name
        return layer.name

    def conv_bn_relu(self, name, cin, cout, stride=1, src=None, relu=True):
        src = src or self.last
        self.add(Conv2d(f"{name}", [src], cin, cout, 3, stride=stride, padding=1, bias=False))
        self.add(BatchNorm2d(f"{name}_bn", [self.last], cout))
        if relu:
            self.add(ReLU(f"{name}_relu", [self.last]))
        return self.last


def plain_cnn(in_channels=3, size=12, classes=4, widths=(16, 32, 64)) -> Network:
    """conv-bn-relu-pool x2, conv-bn-relu, global average pool, linear."""
    b = _Builder()
    c1, c2, c3 = widths
    b.conv_bn_relu("conv1", in_channels, c1)
    b.add(MaxPool2d("pool1", [b.last], 2))
    b.conv_bn_relu("conv2", c1, c2)
    b.add(MaxPool2d("pool2", [b.last], 2))
    b.conv_bn_relu("conv3", c2, c3)
    s = size // 4
    b.add(AvgPool2d("gap", [b.last], s))
    b.add(Flatten("flatten", [b.last]))
    b.add(Linear("fc", [b.last], c3, classes))
    return Network(b.layers, (in_channels, size, size), name="plain_cnn")


def vgg_small(in_channels=3, size=12, classes=4, cfg=(32, 32, "M", 64, 64, "M", 96, 96, "M")) -> Network:
    """VGG-style stack of 3x3 conv-bn-relu blocks with max pooling."""
    b = _Builder()
    cin = in_channels
    i = 0
    p = 0
    s = size
    for v in cfg:
        if v == "M":
            p += 1
            b.add(MaxPool2d(f"pool{p}", [b.last], 2))
            s //= 2
        else:
            i += 1
            b.conv_bn_relu(f"conv{i}", cin, v)
            cin = v
    b.add(Flatten("flatten", [b.last]))
    b.add(Linear("fc", [b.last], cin * s * s, classes))
    return Network(b.layers, (in_channels, size, size), name="vgg_small")


def resnet_small(in_channels=3, size=12, classes=4, widths=(16, 32, 64)) -> Network:
    """Stem + three residual blocks; blocks 2 and 3 downsample with 1x1 projections."""
    b = _Builder()
    w1, w2, w3 = widths
    stem = b.conv_bn_relu("stem", in_channels, w1)

    def block(tag, src, cin, cout, stride):
        b.conv_bn_relu(f"{tag}_c1", cin, cout, stride=stride, src=src)
        main = b.conv_bn_relu(f"{tag}_c2", cout, cout, relu=False)
        if stride != 1 or cin != cout:
            b.add(Conv2d(f"{tag}_sc", [src], cin, cout, 1, stride=stride, bias=False))
            short = b.add(BatchNorm2d(f"{tag}_sc_bn", [b.last], cout))
        else:
            short = src
        b.add(Add(f"{tag}_add", [main, short]))
        return b.add(ReLU(f"{tag}_relu", [b.last]))

    x = block("b1", stem, w1, w1, 1)
    x = block("b2", x, w1, w2, 2)
    x = block("b3", x, w2, w3, 2)
    b.add(AvgPool2d("gap", [x], size // 4))
    b.add(Flatten("flatten", [b.last]))
    b.add(Linear("fc", [b.last], w3, classes))
    return Network(b.layers, (in_channels, size, size), name="resnet_small")


ARCHITECTURES = {
    "plain_cnn": plain_cnn,
    "vgg_small": vgg_small,
    "resnet_small": resnet_small,
}


def build(name: str, in_channels=3, size=12, classes=4, seed: int | None = 0) -> Network:
    try:
        factory = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    net = factory(in_channels=in_channels, size=size, classes=classes)
    if seed is not None:
        net.init_params(seed)
    return net
