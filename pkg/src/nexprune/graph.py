"""Structural coupling, channel removal and FLOPs/params accounting.

Every 4-D activation tensor in the network lives in a *channel space*.  A
conv opens a new space; batchnorm, ReLU and pooling pass their input's
space through; a residual add merges the spaces of all its operands.  One
coupling group is one channel index of one space: the producing conv
filters, the batchnorm channels normalising them and every consumer slice
(conv input channels, or the linear columns reached through a flatten).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import CouplingError, LayerCollapseError
from .layers import Add, BatchNorm2d, Conv2d, Flatten, Linear
from .network import INPUT, Network

OUT, IN, BN = "out_channels", "in_channels", "bn_channels"

# MACs charged per output element for the non-matmul layers.
ELEMENTWISE_MACS = {"batchnorm2d": 1, "relu": 1}


@dataclass(frozen=True)
class CouplingGroup:
    gid: str
    anchor: str
    index: int  # current channel position inside the space
    filter_id: int  # original filter index of the anchor
    members: tuple  # ((layer, axis, (idx, ...)), ...)
    space: str
    order: tuple  # (anchor layer position, filter_id) for tie-breaking

    @property
    def key(self):
        return (self.anchor, self.filter_id)

    def producers(self):
        return [(layer, idx[0]) for layer, axis, idx in self.members if axis == OUT]


@dataclass
class ChannelSpace:
    name: str
    channels: int
    producers: list
    batchnorms: list
    conv_consumers: list
    linear_consumers: list  # (linear, spatial size per channel)
    reaches_output: bool = False

    @property
    def prunable(self):
        return bool(self.producers) and not self.reaches_output


def channel_spaces(net: Network) -> dict[str, ChannelSpace]:
    """Partition the network's channel-bearing tensors into coupled spaces."""
    parent = {INPUT: INPUT}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            # keep the earliest-defined node as the root so names are stable
            if order[rb] < order[ra]:
                ra, rb = rb, ra
            parent[rb] = ra

    order = {INPUT: -1}
    node_of = {INPUT: INPUT}
    flat_src = {}
    shapes = net.shapes()
    for pos, layer in enumerate(net.layers):
        order[layer.name] = pos
        if isinstance(layer, Conv2d):
            parent[layer.name] = layer.name
            node_of[layer.name] = layer.name
        elif isinstance(layer, Add):
            node_of[layer.name] = node_of[layer.inputs[0]]
            for src in layer.inputs[1:]:
                union(node_of[layer.inputs[0]], node_of[src])
        elif isinstance(layer, Flatten):
            flat_src[layer.name] = layer.inputs[0]
        elif layer.inputs[0] in node_of:
            node_of[layer.name] = node_of[layer.inputs[0]]

    spaces: dict[str, ChannelSpace] = {}

    def space(node):
        root = find(node)
        if root not in spaces:
            spaces[root] = ChannelSpace(root, 0, [], [], [], [])
        return spaces[root]

    for layer in net.layers:
        if isinstance(layer, Conv2d):
            sp = space(layer.name)
            sp.producers.append(layer.name)
            space(node_of[layer.inputs[0]]).conv_consumers.append(layer.name)
        elif isinstance(layer, BatchNorm2d):
            space(node_of[layer.inputs[0]]).batchnorms.append(layer.name)
        elif isinstance(layer, Linear):
            src = layer.inputs[0]
            if src in flat_src:
                feed = flat_src[src]
                c, h, w = shapes[feed]
                space(node_of[feed]).linear_consumers.append((layer.name, h * w))
    space(INPUT)

    out = net.output.name
    if out in node_of:
        space(node_of[out]).reaches_output = True
    for sp in spaces.values():
        if sp.name == INPUT:
            sp.channels = net.input_shape[0]
            continue
        counts = {p: net[p].out_channels for p in sp.producers}
        if len(set(counts.values())) > 1:
            raise CouplingError(f"residual operands disagree on channel count: {counts}")
        sp.channels = next(iter(counts.values()))
    return spaces


def build_coupling_groups(net: Network) -> list[CouplingGroup]:
    """One group per channel of every prunable space, in (layer, filter) order."""
    groups = []
    pos = {layer.name: i for i, layer in enumerate(net.layers)}
    for sp in channel_spaces(net).values():
        if not sp.prunable:
            continue
        anchor = min(sp.producers, key=pos.__getitem__)
        ids = net[anchor].channel_ids
        for i in range(sp.channels):
            members = [(p, OUT, (i,)) for p in sp.producers]
            members += [(b, BN, (i,)) for b in sp.batchnorms]
            members += [(c, IN, (i,)) for c in sp.conv_consumers]
            members += [(lin, IN, tuple(range(i * hw, (i + 1) * hw))) for lin, hw in sp.linear_consumers]
            fid = int(ids[i])
            groups.append(CouplingGroup(
                gid=f"{anchor}:{fid}", anchor=anchor, index=i, filter_id=fid,
                members=tuple(members), space=sp.name, order=(pos[anchor], fid)))
    groups.sort(key=lambda g: g.order)
    return groups


def space_sizes(net: Network) -> dict[str, int]:
    return {name: sp.channels for name, sp in channel_spaces(net).items() if sp.prunable}


def apply_prune(net: Network, groups) -> Network:
    """Return a copy of ``net`` with every group's slices removed.

    Raises :class:`LayerCollapseError` if some space would lose all of its
    channels, and ``KeyError`` if a group is not present in ``net``.
    """
    current = {g.gid: g for g in build_coupling_groups(net)}
    removing: dict[str, set] = {}
    for g in groups:
        if g.gid not in current or current[g.gid].index != g.index:
            raise KeyError(f"group {g.gid} is not present in the network")
        removing.setdefault(g.space, set()).add(g.index)
    sizes = space_sizes(net)
    for sp, idx in removing.items():
        if len(idx) >= sizes[sp]:
            raise LayerCollapseError(f"removing {len(idx)} of {sizes[sp]} channels would empty {sp}")

    cuts: dict[tuple, set] = {}
    for g in groups:
        for layer, axis, idx in current[g.gid].members:
            cuts.setdefault((layer, axis), set()).update(idx)

    new = net.copy()
    for (lname, axis), idx in cuts.items():
        idx = np.array(sorted(idx), dtype=np.int64)
        layer = new[lname]
        if isinstance(layer, Conv2d) and axis == OUT:
            layer.params["weight"] = np.delete(layer.params["weight"], idx, axis=0)
            if "bias" in layer.params:
                layer.params["bias"] = np.delete(layer.params["bias"], idx)
            layer.channel_ids = np.delete(layer.channel_ids, idx)
            layer.out_channels -= len(idx)
        elif isinstance(layer, Conv2d):
            layer.params["weight"] = np.delete(layer.params["weight"], idx, axis=1)
            layer.in_channels -= len(idx)
        elif isinstance(layer, BatchNorm2d):
            for store in (layer.params, layer.buffers):
                for k in ("weight", "bias", "running_mean", "running_var"):
                    if k in store:
                        store[k] = np.delete(store[k], idx)
            layer.channels -= len(idx)
        elif isinstance(layer, Linear):
            layer.params["weight"] = np.delete(layer.params["weight"], idx, axis=1)
            layer.in_features -= len(idx)
        else:
            raise CouplingError(f"cannot cut {axis} of {layer.kind} layer {lname}")
    new.shapes()
    return new


def zero_fanout(net: Network, groups) -> Network:
    """Copy of ``net`` with each group's consumer slices set to zero (shapes unchanged)."""
    current = {g.gid: g for g in build_coupling_groups(net)}
    new = net.copy()
    for g in groups:
        for lname, axis, idx in current[g.gid].members:
            if axis == IN:
                new[lname].params["weight"][:, list(idx)] = 0
    return new


# -- accounting ------------------------------------------------------------

def flops_breakdown(net: Network) -> dict[str, int]:
    """MACs per layer (one multiply-add = 1).

    conv: out*in*m*n*Ho*Wo; linear: out*in; batchnorm and ReLU: one per
    output element; pooling: m*n per output element; residual add: one per
    output element per extra operand; flatten: 0.  Biases are not counted.
    """
    shapes = net.shapes()
    out = {}
    for layer in net.layers:
        shp = shapes[layer.name]
        numel = int(np.prod(shp))
        if isinstance(layer, Conv2d):
            m, n = layer.kernel_size
            out[layer.name] = layer.out_channels * layer.in_channels * m * n * shp[1] * shp[2]
        elif isinstance(layer, Linear):
            out[layer.name] = layer.out_features * layer.in_features
        elif layer.kind in ELEMENTWISE_MACS:
            out[layer.name] = ELEMENTWISE_MACS[layer.kind] * numel
        elif layer.kind in ("maxpool2d", "avgpool2d"):
            m, n = layer.kernel_size
            out[layer.name] = m * n * numel
        elif isinstance(layer, Add):
            out[layer.name] = (len(layer.inputs) - 1) * numel
        else:
            out[layer.name] = 0
    return out


def count_flops(net: Network, as_flops: bool = False) -> int:
    """Total MACs per sample; ``as_flops`` doubles it (multiply and add counted apart)."""
    total = sum(flops_breakdown(net).values())
    return 2 * total if as_flops else total


def count_params(net: Network) -> int:
    return int(sum(p.size for _, p in net.parameters()))


def count_running_stats(net: Network) -> int:
    return int(sum(layer.buffers["running_mean"].size + layer.buffers["running_var"].size
                   for layer in net.layers if isinstance(layer, BatchNorm2d)))


@dataclass
class CompressionReport:
    flops_original: int
    flops_current: int
    params_original: int
    params_current: int

    @property
    def ratio_flops(self) -> float:
        return self.flops_original / self.flops_current

    @property
    def ratio_params(self) -> float:
        return self.params_original / self.params_current

    @property
    def msp(self) -> float:
        return 100.0 * self.flops_current / self.flops_original

    @property
    def psp(self) -> float:
        return 100.0 * self.params_current / self.params_original

    def exact_msp(self) -> Fraction:
        return Fraction(100 * self.flops_current, self.flops_original)

    def exact_psp(self) -> Fraction:
        return Fraction(100 * self.params_current, self.params_original)

    def to_dict(self) -> dict:
        return {
            "flops_original": self.flops_original, "flops_current": self.flops_current,
            "params_original": self.params_original, "params_current": self.params_current,
            "ratio_flops": self.ratio_flops, "ratio_params": self.ratio_params,
            "msp": self.msp, "psp": self.psp,
        }


def compression_report(original: Network, current: Network) -> CompressionReport:
    return CompressionReport(count_flops(original), count_flops(current),
                             count_params(original), count_params(current))
