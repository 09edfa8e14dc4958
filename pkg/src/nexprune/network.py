"""Layer graph container, forward/backward driver, SGD and checkpoint IO."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .errors import (BackwardBeforeForwardError, NonFiniteError,
                     ShapeMismatchError)
from .layers import DTYPE, BatchNorm2d, Conv2d, Layer, Linear, layer_from_spec

INPUT = "input"
CHECKPOINT_FORMAT = "nexprune.checkpoint/v1"
ARCHITECTURE_FORMAT = "nexprune.architecture/v1"


class Network:
    """An ordered, acyclic layer graph with a single input and a single output.

    Layers are stored in topological order; each names its producers in
    ``layer.inputs`` (the graph input is called ``"input"``).  The last
    layer is the output.
    """

    def __init__(self, layers: list[Layer], input_shape, name: str = "net"):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.name = name
        self._by_name = {}
        for layer in self.layers:
            if layer.name in self._by_name or layer.name == INPUT:
                raise ValueError(f"duplicate layer name {layer.name!r}")
            for src in layer.inputs:
                if src != INPUT and src not in self._by_name:
                    raise ValueError(f"{layer.name}: producer {src!r} not defined before use")
            self._by_name[layer.name] = layer
        self._forwarded = False
        self.shapes()  # validates channel agreement

    # -- structure -------------------------------------------------------

    def __getitem__(self, name: str) -> Layer:
        return self._by_name[name]

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    @property
    def output(self) -> Layer:
        return self.layers[-1]

    def index(self, name: str) -> int:
        return self.layers.index(self._by_name[name])

    def consumers(self) -> dict[str, list[str]]:
        out = {INPUT: []}
        out.update({layer.name: [] for layer in self.layers})
        for layer in self.layers:
            for src in layer.inputs:
                out[src].append(layer.name)
        return out

    def convs(self) -> list[Conv2d]:
        return [layer for layer in self.layers if isinstance(layer, Conv2d)]

    def shapes(self) -> dict[str, tuple]:
        """Per-sample output shape of every layer (and of the input)."""
        shapes = {INPUT: self.input_shape}
        for layer in self.layers:
            shapes[layer.name] = tuple(layer.output_shape([shapes[s] for s in layer.inputs]))
        return shapes

    def capture_points(self) -> dict[str, str]:
        """Map each conv to the layer whose output is its post-nonlinearity map.

        The walk follows the conv's sole consumer through an optional
        batchnorm, and through a residual add when the add is what feeds
        the ReLU.  Without a ReLU the last layer reached is used.
        """
        cons = self.consumers()
        points = {}
        for conv in self.convs():
            node = conv.name
            nxt = cons[node]
            if len(nxt) == 1 and self[nxt[0]].kind == "batchnorm2d":
                node = nxt[0]
                nxt = cons[node]
            if len(nxt) == 1 and self[nxt[0]].kind == "add":
                after = cons[nxt[0]]
                if len(after) >= 1 and any(self[a].kind == "relu" for a in after):
                    node = next(a for a in after if self[a].kind == "relu")
            elif len(nxt) >= 1 and any(self[a].kind == "relu" for a in nxt):
                node = next(a for a in nxt if self[a].kind == "relu")
            points[conv.name] = node
        return points

    # -- parameters ------------------------------------------------------

    def parameters(self):
        for layer in self.layers:
            for pname, arr in layer.params.items():
                yield f"{layer.name}.{pname}", arr

    def parameter(self, key: str) -> np.ndarray:
        lname, pname = key.rsplit(".", 1)
        return self[lname].params[pname]

    def set_parameter(self, key: str, value: np.ndarray):
        lname, pname = key.rsplit(".", 1)
        self[lname].params[pname] = value

    def copy(self) -> "Network":
        for layer in self.layers:
            layer.clear_cache()
        self._forwarded = False
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        for layer in net.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
            for k in layer.buffers:
                layer.buffers[k] = layer.buffers[k].astype(dtype)
        return net

    def init_params(self, seed: int = 0) -> "Network":
        """He-normal weights, zero biases, identity batchnorm.  In place."""
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if isinstance(layer, (Conv2d, Linear)):
                w = layer.params["weight"]
                fan_in = int(np.prod(w.shape[1:]))
                layer.params["weight"] = (rng.standard_normal(w.shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)
                if "bias" in layer.params:
                    layer.params["bias"] = np.zeros_like(layer.params["bias"])
            elif isinstance(layer, BatchNorm2d):
                layer.params["weight"] = np.ones(layer.channels, DTYPE)
                layer.params["bias"] = np.zeros(layer.channels, DTYPE)
                layer.buffers["running_mean"] = np.zeros(layer.channels, DTYPE)
                layer.buffers["running_var"] = np.ones(layer.channels, DTYPE)
                layer.buffers["num_batches_tracked"] = np.zeros(1, DTYPE)
        return self

    # -- execution -------------------------------------------------------

    def forward(self, x: np.ndarray, capture=(), train: bool = False, bn: str = "auto"):
        """Run the graph on a batch.

        ``capture`` names conv layers whose post-nonlinearity activations
        are returned (``"all"`` captures every conv).  ``bn`` picks the
        batchnorm statistics outside training: ``"running"``, ``"batch"``,
        or ``"auto"`` (batch statistics only for never-trained layers).

        Returns ``(output, captured)`` with ``captured`` keyed by conv name.
        """
        x = np.asarray(x)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(
                f"batch shape {x.shape} does not match input spec (N, {self.input_shape})")
        if x.shape[0] < 1:
            raise ShapeMismatchError("empty batch")
        points = self.capture_points()
        if capture == "all":
            capture = list(points)
        wanted = {}
        for cname in capture:
            if cname not in points:
                raise KeyError(f"{cname!r} is not a capture point (conv layer)")
            wanted.setdefault(points[cname], []).append(cname)

        acts = {INPUT: x}
        captured = {}
        for layer in self.layers:
            xs = [acts[s] for s in layer.inputs]
            if isinstance(layer, BatchNorm2d):
                if train:
                    y = layer.forward(xs, train=True)
                else:
                    use_batch = bn == "batch" or (bn == "auto" and not layer.has_statistics)
                    y = layer.forward(xs, train=use_batch, update_stats=False)
            else:
                y = layer.forward(xs, train=train)
            if not np.isfinite(y).all():
                raise NonFiniteError(f"non-finite activations produced by {layer.name}")
            acts[layer.name] = y
            for cname in wanted.get(layer.name, ()):
                captured[cname] = y
        self._forwarded = True
        return acts[self.layers[-1].name], captured

    __call__ = forward

    def backward(self, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
        """Backpropagate ``d loss / d output``; returns ``{"layer.param": grad}``."""
        if not self._forwarded:
            raise BackwardBeforeForwardError("backward called without a forward pass")
        grads_out = {self.layers[-1].name: loss_grad}
        for layer in reversed(self.layers):
            dy = grads_out.pop(layer.name, None)
            if dy is None:
                layer.clear_cache()
                continue
            dxs = layer.backward(dy)
            for src, dx in zip(layer.inputs, dxs):
                if src == INPUT:
                    continue
                if src in grads_out:
                    grads_out[src] = grads_out[src] + dx
                else:
                    grads_out[src] = dx
        self._forwarded = False
        store = {}
        for layer in self.layers:
            for pname, p in layer.params.items():
                g = layer.grads.pop(pname, None)
                store[f"{layer.name}.{pname}"] = np.zeros_like(p) if g is None else g.astype(p.dtype, copy=False)
        return store

    def summary(self) -> str:
        shapes = self.shapes()
        lines = [f"{self.name}: input {self.input_shape}"]
        for layer in self.layers:
            lines.append(f"  {layer.name:<14} {layer.kind:<12} <- {','.join(layer.inputs):<20} {shapes[layer.name]}")
        return "\n".join(lines)


def forward(network: Network, batch, capture=(), train=False, bn="auto"):
    return network.forward(batch, capture=capture, train=train, bn=bn)


def backward(network: Network, loss_grad) -> dict[str, np.ndarray]:
    return network.backward(loss_grad)


def sgd_step(network: Network, grads: dict[str, np.ndarray], lr: float) -> Network:
    """In-place ``p <- p - lr * grad`` for every parameter; returns the network."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for key, g in grads.items():
        p = network.parameter(key)
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
    for key, g in grads.items():
        p = network.parameter(key)
        p -= (lr * g).astype(p.dtype, copy=False)
    return network


def cross_entropy_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatchError(f"{n} logit rows but {labels.shape} labels")
    if (labels < 0).any() or (labels >= c).any():
        raise IndexError(f"label out of range for {c} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype, copy=False)


# -- serialization ---------------------------------------------------------

def architecture_dict(network: Network) -> dict:
    return {
        "format": ARCHITECTURE_FORMAT,
        "name": network.name,
        "input_shape": list(network.input_shape),
        "layers": [
            {"name": layer.name, "kind": layer.kind, "inputs": layer.inputs, "hparams": layer.hparams()}
            for layer in network.layers
        ],
        "edges": [[src, layer.name] for layer in network.layers for src in layer.inputs],
        "captures": network.capture_points(),
    }


def network_from_architecture(arch: dict, seed: int | None = 0) -> Network:
    layers = [layer_from_spec(spec) for spec in arch["layers"]]
    net = Network(layers, arch["input_shape"], name=arch.get("name", "net"))
    if seed is not None:
        net.init_params(seed)
    return net


def save_architecture(network: Network, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(architecture_dict(network), indent=2))
    return path


def load_architecture(path, seed: int | None = 0) -> Network:
    return network_from_architecture(json.loads(Path(path).read_text()), seed=seed)


def _write_blob(arr: np.ndarray, path: Path):
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(path: Path, shape) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype="<f4").astype(DTYPE)
    return data.reshape(shape)


def save_checkpoint(network: Network, path, meta: dict | None = None) -> Path:
    """Write ``path/manifest.json`` plus one raw little-endian float32 blob per tensor."""
    root = Path(path)
    blobs = root / "blobs"
    blobs.mkdir(parents=True, exist_ok=True)
    manifest = architecture_dict(network)
    manifest["format"] = CHECKPOINT_FORMAT
    manifest["meta"] = meta or {}
    for spec, layer in zip(manifest["layers"], network.layers):
        for group in ("params", "buffers"):
            entries = {}
            for tname, arr in getattr(layer, group).items():
                rel = f"blobs/{layer.name}.{tname}.f32"
                _write_blob(arr, root / rel)
                entries[tname] = {"shape": list(arr.shape), "path": rel}
            spec[group] = entries
        if isinstance(layer, Conv2d):
            spec["channel_ids"] = [int(v) for v in layer.channel_ids]
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_checkpoint(path) -> Network:
    root = Path(path)
    if root.is_file():
        root = root.parent
    manifest = json.loads((root / "manifest.json").read_text())
    net = network_from_architecture(manifest, seed=None)
    for spec, layer in zip(manifest["layers"], net.layers):
        for group in ("params", "buffers"):
            for tname, entry in spec.get(group, {}).items():
                getattr(layer, group)[tname] = _read_blob(root / entry["path"], entry["shape"])
        if "channel_ids" in spec:
            layer.channel_ids = np.asarray(spec["channel_ids"], dtype=np.int64)
    return net


def checkpoint_meta(path) -> dict:
    root = Path(path)
    if root.is_file():
        root = root.parent
    return json.loads((root / "manifest.json").read_text()).get("meta", {})
