"""Per-filter scores: activation-overlap expressiveness, group L1, hybrids.

The expressiveness of a filter is the mean normalized Hamming distance
between its binarized activation maps over every pair of samples in a
batch.  Constant (or dead) filters score 0; filters whose on/off pattern
changes a lot from sample to sample score high.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bits
from .bits import PatternSet
from .graph import IN, OUT, CouplingGroup, build_coupling_groups
from .layers import BatchNorm2d
from .network import Network

SCORE_SCHEMA = "nexprune.scoremap/v1"
STATISTICS = ("mean", "min", "max", "median")
# beyond this many samples the per-bit counting identity replaces the pair loop
PAIRWISE_LIMIT = 512


@dataclass
class ScoreMap:
    """Scalar score per filter, keyed by ``(layer, original filter index)``.

    Values are float64 and written in shortest round-trip decimal form, so
    text files reload bit-exactly.  ``layer_order`` fixes the (layer,
    filter) order used for every tie-break.
    """

    scores: dict
    layer_order: list
    kind: str = "nexp"
    sample_count: int | None = None
    provenance: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = {(str(k[0]), int(k[1])): float(v) for k, v in self.scores.items()}
        self.layer_order = list(self.layer_order)
        pos = {name: i for i, name in enumerate(self.layer_order)}
        for layer, _ in self.scores:
            if layer not in pos:
                raise ValueError(f"layer {layer!r} missing from layer_order")
        self._pos = pos

    def __len__(self):
        return len(self.scores)

    def __getitem__(self, key):
        return self.scores[key]

    def __contains__(self, key):
        return key in self.scores

    def order_key(self, key):
        return (self._pos[key[0]], key[1])

    def keys(self) -> list:
        return sorted(self.scores, key=self.order_key)

    def values(self) -> np.ndarray:
        return np.array([self.scores[k] for k in self.keys()], dtype=np.float64)

    def layers(self) -> dict[str, np.ndarray]:
        out = {}
        for key in self.keys():
            out.setdefault(key[0], []).append(self.scores[key])
        return {k: np.asarray(v, dtype=np.float64) for k, v in out.items()}

    def ranking(self) -> list:
        """Keys by ascending score; ties in (layer, filter) order."""
        return sorted(self.scores, key=lambda k: (self.scores[k], self.order_key(k)))

    def minmax(self) -> "ScoreMap":
        v = self.values()
        lo, hi = v.min(), v.max()
        span = hi - lo
        norm = {k: ((s - lo) / span if span > 0 else 0.0) for k, s in self.scores.items()}
        return ScoreMap(norm, self.layer_order, self.kind, self.sample_count, self.provenance, dict(self.meta))

    # -- serialization -------------------------------------------------

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {SCORE_SCHEMA}\n")
        buf.write("# meta: " + json.dumps(self._header()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "filter", "score", "provenance"])
        for key in self.keys():
            w.writerow([key[0], key[1], repr(self.scores[key]), self.provenance])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def _header(self):
        return {"kind": self.kind, "sample_count": self.sample_count, "provenance": self.provenance,
                "layer_order": self.layer_order, "meta": self.meta}

    @classmethod
    def from_csv(cls, source) -> "ScoreMap":
        text = _read_text(source)
        lines = text.splitlines()
        header = {}
        body = []
        for line in lines:
            if line.startswith("# meta: "):
                header = json.loads(line[len("# meta: "):])
            elif not line.startswith("#"):
                body.append(line)
        rows = list(csv.DictReader(body))
        scores = {(r["layer"], int(r["filter"])): float(r["score"]) for r in rows}
        order = header.get("layer_order") or list(dict.fromkeys(r["layer"] for r in rows))
        prov = header.get("provenance", rows[0]["provenance"] if rows else "")
        return cls(scores, order, header.get("kind", "nexp"), header.get("sample_count"), prov,
                   header.get("meta", {}))

    def to_json(self, path=None) -> str:
        doc = {"schema": SCORE_SCHEMA, **self._header(),
               "scores": [{"layer": k[0], "filter": k[1], "score": self.scores[k]}
                          for k in self.keys()]}
        text = json.dumps(doc, indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source) -> "ScoreMap":
        doc = json.loads(_read_text(source))
        scores = {(e["layer"], e["filter"]): e["score"] for e in doc["scores"]}
        return cls(scores, doc["layer_order"], doc.get("kind", "nexp"), doc.get("sample_count"),
                   doc.get("provenance", ""), doc.get("meta", {}))

    @classmethod
    def load(cls, path) -> "ScoreMap":
        path = Path(path)
        return cls.from_json(path) if path.suffix == ".json" else cls.from_csv(path)


NexpMap = ScoreMap
ImportanceMap = ScoreMap


def _read_text(source) -> str:
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
        return Path(source).read_text()
    return source


# -- expressiveness --------------------------------------------------------

def _pair_totals(words: np.ndarray, n_bits: int) -> np.ndarray:
    if words.shape[-2] > PAIRWISE_LIMIT:
        return bits.column_count_total(words, n_bits)
    return bits.upper_triangle_total(words)


def _scores_from_words(words: np.ndarray, n_bits: int, statistic: str = "mean") -> np.ndarray:
    """Score every leading-axis pattern set in ``words`` of shape ``(..., N, W)``."""
    n = words.shape[-2]
    if n < 2:
        raise ValueError(f"expressiveness needs at least 2 samples, got {n}")
    if statistic == "mean":
        totals = _pair_totals(words, n_bits)
        denom = n_bits * (n * (n - 1) // 2)
        return np.array([int(t) / denom for t in np.ravel(totals)]).reshape(totals.shape)
    if statistic not in STATISTICS:
        raise ValueError(f"unknown statistic {statistic!r}")
    d = bits.pair_distances(words) / n_bits
    return {"min": np.min, "max": np.max, "median": np.median}[statistic](d, axis=-1)


def nexp_score(patterns: PatternSet, statistic: str = "mean") -> float:
    """Expressiveness of one filter: mean normalized Hamming distance over pairs i < j."""
    return float(_scores_from_words(patterns.words, patterns.n_bits, statistic))


def scores_from_captures(net: Network, captures: dict, statistic: str = "mean") -> dict:
    """``{(conv, filter id): score}`` from post-nonlinearity maps ``(N, C, H, W)``."""
    out = {}
    for cname, act in captures.items():
        words = bits.binarize(act)
        n_bits = int(np.prod(act.shape[2:]))
        vals = _scores_from_words(words, n_bits, statistic)
        for fid, v in zip(net[cname].channel_ids, vals):
            out[(cname, int(fid))] = v
    return out


def capture_patterns(net: Network, batch: np.ndarray, bn: str = "auto", chunk: int = 256) -> dict:
    """Forward the batch and return packed patterns ``{conv: (words (C, N, W), n_bits)}``.

    The batch is processed in chunks only when no batchnorm uses batch
    statistics (chunking would otherwise change the normalisation).
    """
    bn_layers = [layer for layer in net.layers if isinstance(layer, BatchNorm2d)]
    batch_stats = bn == "batch" or (bn == "auto" and any(not b.has_statistics for b in bn_layers))
    step = len(batch) if batch_stats else chunk
    parts: dict[str, list] = {}
    n_bits = {}
    for start in range(0, len(batch), step):
        _, caps = net.forward(batch[start:start + step], capture="all", bn=bn)
        for cname, act in caps.items():
            parts.setdefault(cname, []).append(bits.binarize(act))
            n_bits[cname] = int(np.prod(act.shape[2:]))
    for layer in net.layers:
        layer.clear_cache()
    return {c: (np.concatenate(p, axis=1), n_bits[c]) for c, p in parts.items()}


def nexp_map(net: Network, batch: np.ndarray, provenance: str = "random",
             statistic: str = "mean", bn: str = "auto") -> ScoreMap:
    """Expressiveness of every conv filter from one capture pass over ``batch``."""
    if len(batch) < 2:
        raise ValueError("expressiveness needs a batch of at least 2 samples")
    scores = {}
    for cname, (words, n_bits) in capture_patterns(net, batch, bn=bn).items():
        vals = _scores_from_words(words, n_bits, statistic)
        for fid, v in zip(net[cname].channel_ids, vals):
            scores[(cname, int(fid))] = v
    return ScoreMap(scores, [layer.name for layer in net.layers], "nexp", len(batch), provenance,
                    {"statistic": statistic})


def group_scores(scores: ScoreMap, groups: list[CouplingGroup], reduce: str = "mean") -> ScoreMap:
    """Collapse a per-filter map onto coupling-group anchors.

    A merged residual group gets the ``reduce`` of its producing filters.
    """
    fn = {"mean": np.mean, "min": np.min, "max": np.max}[reduce]
    out = {}
    for g in groups:
        vals = [float(scores[(layer, g.filter_id)]) for layer, _ in g.producers()]
        out[g.key] = fn(vals)
    return ScoreMap(out, scores.layer_order, scores.kind, scores.sample_count, scores.provenance,
                    dict(scores.meta))


# -- importance and hybrids ------------------------------------------------

def group_l1_importance(net: Network, groups: list[CouplingGroup] | None = None) -> ScoreMap:
    """Sum of |w| over every conv/linear weight slice in each group.

    Biases and batchnorm affine parameters are not included.
    """
    groups = build_coupling_groups(net) if groups is None else groups
    out = {}
    for g in groups:
        total = 0.0
        for lname, axis, idx in g.members:
            layer = net[lname]
            if layer.kind not in ("conv2d", "linear"):
                continue
            w = layer.params["weight"]
            sl = w[list(idx)] if axis == OUT else w[:, list(idx)] if axis == IN else None
            total += float(np.abs(sl, dtype=np.float64).sum())
        out[g.key] = total
    return ScoreMap(out, [layer.name for layer in net.layers], "l1", None, "weights")


def hybrid_score(imp: ScoreMap, nexp: ScoreMap, alpha: float) -> ScoreMap:
    """``(1 - alpha) * minmax(imp) + alpha * minmax(nexp)`` over identical key sets."""
    if set(imp.scores) != set(nexp.scores):
        raise KeyError("importance and expressiveness maps cover different filters")
    a = imp.minmax()
    b = nexp.minmax()
    alpha = float(alpha)
    out = {k: (1.0 - alpha) * float(a[k]) + alpha * float(b[k]) for k in imp.scores}
    return ScoreMap(out, imp.layer_order, "hybrid", nexp.sample_count, nexp.provenance, {"alpha": alpha})


@dataclass
class HybridConfig:
    alpha: float = 0.5
    importance: str = "group-l1"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


ALPHA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def random_scores(groups: list[CouplingGroup], layer_order, rng: np.random.Generator) -> ScoreMap:
    vals = rng.random(len(groups))
    return ScoreMap({g.key: v for g, v in zip(groups, vals)}, layer_order, "random", None, "rng")
