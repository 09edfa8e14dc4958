"""Comparing score maps: rasterization and four similarity metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .scoring import ScoreMap

SIMILARITY_SCHEMA = "nexprune.similarity/v1"
METRICS = ("euclidean", "cosine", "pearson", "ssim")
SSIM_WINDOW = 8
SSIM_RANGE = 1.0
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class MapRaster:
    """``layers x widest-layer`` grid; ``mask[l, j]`` marks the cells layer ``l`` filled before interpolation."""

    grid: np.ndarray
    mask: np.ndarray
    layers: list

    @property
    def shape(self):
        return self.grid.shape

    def head(self, n: int) -> "MapRaster":
        return MapRaster(self.grid[:n], self.mask[:n], self.layers[:n])


def interpolate_row(values, width: int) -> np.ndarray:
    """Linearly stretch ``values`` over ``width`` cells, endpoints pinned to the ends."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 1:
        return np.full(width, v[0])
    knots = np.linspace(0.0, width - 1.0, len(v))
    return np.interp(np.arange(width, dtype=np.float64), knots, v)


def rasterize_map(smap: ScoreMap) -> MapRaster:
    per_layer = smap.layers()
    if not per_layer:
        raise ValueError("cannot rasterize an empty map")
    names = list(per_layer)
    width = max(len(v) for v in per_layer.values())
    grid = np.stack([interpolate_row(per_layer[n], width) for n in names])
    mask = np.stack([np.arange(width) < len(per_layer[n]) for n in names])
    return MapRaster(grid, mask, names)


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW, data_range: float = SSIM_RANGE) -> float:
    """Mean SSIM over all stride-1 square windows (uniform weights, population moments).

    The window shrinks to the smaller raster side when the raster is
    narrower than ``window``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = min(window, a.shape[0], a.shape[1])
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    wa = sliding_window_view(a, (w, w))
    wb = sliding_window_view(b, (w, w))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = ((wa - mu_a[..., None, None]) ** 2).mean(axis=(-2, -1))
    var_b = ((wb - mu_b[..., None, None]) ** 2).mean(axis=(-2, -1))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-2, -1))
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def compare_maps(a: MapRaster, b: MapRaster) -> dict:
    """Euclidean distance, cosine, Pearson and SSIM between two rasters.

    Pearson is ``None`` when either raster is constant; cosine is ``None``
    when either raster is all zeros.
    """
    if a.shape != b.shape:
        raise ValueError(f"raster shapes differ: {a.shape} vs {b.shape}")
    x = a.grid.ravel().astype(np.float64)
    y = b.grid.ravel().astype(np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    cosine = float(x @ y / (nx * ny)) if nx > 0 and ny > 0 else None
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    constant = np.ptp(x) == 0 or np.ptp(y) == 0  # exact test; centred sums can round away from zero
    pearson = None if constant else float(dx @ dy / (sx * sy))
    return {
        "euclidean": float(np.linalg.norm(x - y)),
        "cosine": cosine,
        "pearson": pearson,
        "ssim": ssim(a.grid, b.grid),
    }


def map_similarity(a: ScoreMap, b: ScoreMap) -> dict:
    if set(a.scores) != set(b.scores):
        raise ValueError("maps come from different architectures")
    return compare_maps(rasterize_map(a), rasterize_map(b))


@dataclass
class SimilarityReport:
    rows: list  # (strategy, metric, scope, value)
    first_layers_more_similar: bool | None = None

    def value(self, metric: str, scope: str = "all", strategy: str | None = None):
        for s, m, sc, v in self.rows:
            if m == metric and sc == scope and (strategy is None or s == strategy):
                return v
        raise KeyError((metric, scope))

    def to_csv(self, path=None, meta: dict | None = None) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {SIMILARITY_SCHEMA}\n")
        buf.write("# meta: " + json.dumps({**(meta or {}),
                                            "first_layers_more_similar": self.first_layers_more_similar}) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "metric", "scope", "value"])
        for s, m, sc, v in self.rows:
            w.writerow([s, m, sc, "" if v is None else repr(v)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_json(self, path=None, meta: dict | None = None) -> str:
        doc = {"schema": SIMILARITY_SCHEMA, **(meta or {}),
               "first_layers_more_similar": self.first_layers_more_similar,
               "rows": [dict(zip(("strategy", "metric", "scope", "value"), r)) for r in self.rows]}
        text = json.dumps(doc, indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text


def state_similarity_report(map_a: ScoreMap, map_b: ScoreMap, first_n: int = 5,
                            strategy: str = "") -> SimilarityReport:
    """Metrics over all layers and over the first ``first_n`` layers.

    ``first_layers_more_similar`` records whether the leading layers agree
    at least as well (by cosine) as the whole network; it is a trend
    indicator, not a check.
    """
    if set(map_a.scores) != set(map_b.scores):
        raise ValueError("maps come from different architectures")
    ra, rb = rasterize_map(map_a), rasterize_map(map_b)
    n = max(1, min(first_n, ra.shape[0]))
    rows = []
    full = compare_maps(ra, rb)
    head = compare_maps(ra.head(n), rb.head(n))
    for scope, res in (("all", full), (f"first-{n}", head)):
        for m in METRICS:
            rows.append((strategy, m, scope, res[m]))
    trend = None
    if full["cosine"] is not None and head["cosine"] is not None:
        trend = bool(head["cosine"] >= full["cosine"])
    return SimilarityReport(rows, trend)


def sampling_similarity_report(reference: ScoreMap, candidates: dict) -> SimilarityReport:
    """Compare several sampling strategies' maps against one reference map."""
    rows = []
    for name, smap in candidates.items():
        res = map_similarity(reference, smap)
        rows.extend((name, m, "all", res[m]) for m in METRICS)
    return SimilarityReport(rows)
