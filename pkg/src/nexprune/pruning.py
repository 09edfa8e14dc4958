"""Iterative bottom-k group removal toward a target compression ratio."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import NoPrunableGroupError
from .graph import (CouplingGroup, apply_prune, build_coupling_groups,
                    compression_report)
from .network import Network
from .scoring import (ScoreMap, group_l1_importance, group_scores,
                      hybrid_score, nexp_map, random_scores)

log = logging.getLogger(__name__)

TRAJECTORY_SCHEMA = "nexprune.prune_trajectory/v1"
RUN_SCHEMA = "nexprune.prune_run/v1"
CRITERIA = ("nexp", "l1", "hybrid", "random")


@dataclass
class PruneConfig:
    tau: float = 2.0
    steps_max: int = 64
    kappa_fraction: float = 0.05
    scope: str = "global"
    schedule: str = "one-shot"
    finetune_epochs_per_step: int = 0
    finetune_epochs_final: int = 0
    score_update_every: int | None = 1  # None: score once, never refresh
    criterion: str = "nexp"
    alpha: float = 0.5
    target: str = "flops"
    statistic: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not 0 < self.kappa_fraction <= 1:
            raise ValueError("kappa_fraction must lie in (0, 1]")
        if self.steps_max < 1:
            raise ValueError("steps_max must be positive")
        if self.scope not in ("global", "local"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.schedule not in ("one-shot", "iterative"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.target not in ("flops", "params"):
            raise ValueError(f"unknown target {self.target!r}")
        if self.score_update_every is not None and self.score_update_every < 1:
            raise ValueError("score_update_every must be positive or None")
        if self.finetune_epochs_per_step < 0 or self.finetune_epochs_final < 0:
            raise ValueError("fine-tune epochs must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class StepRecord:
    step: int
    removed: list
    scores: list
    report: dict
    guard_skipped: int = 0
    accuracy: float | None = None


@dataclass
class PruneRun:
    config: PruneConfig
    records: list = field(default_factory=list)
    network: Network | None = None
    initial_report: dict = field(default_factory=dict)
    shortfall: bool = False
    shortfall_reason: str = ""
    guard_bound: bool = False
    final_accuracy: float | None = None

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def final_report(self) -> dict:
        return self.records[-1].report if self.records else self.initial_report

    @property
    def ratio_flops(self) -> float:
        return self.final_report["ratio_flops"]

    @property
    def ratio_params(self) -> float:
        return self.final_report["ratio_params"]

    def removal_sequence(self) -> list:
        return [list(r.removed) for r in self.records]

    def to_dict(self) -> dict:
        return {
            "schema": RUN_SCHEMA,
            "config": self.config.to_dict(),
            "initial_report": self.initial_report,
            "steps": [asdict(r) for r in self.records],
            "shortfall": self.shortfall,
            "shortfall_reason": self.shortfall_reason,
            "guard_bound": self.guard_bound,
            "final_accuracy": self.final_accuracy,
        }

    def to_json(self, path=None, extra: dict | None = None) -> str:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        text = json.dumps(doc, indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path=None, extra: dict | None = None) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {TRAJECTORY_SCHEMA}\n")
        buf.write("# config: " + json.dumps({**self.config.to_dict(), **(extra or {})}) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "ratio_flops", "ratio_params", "msp", "psp", "accuracy"])
        rows = [(0, self.initial_report, None)] + [(r.step, r.report, r.accuracy) for r in self.records]
        for step, rep, acc in rows:
            w.writerow([step, repr(rep["ratio_flops"]), repr(rep["ratio_params"]),
                        repr(rep["msp"]), repr(rep["psp"]), "" if acc is None else repr(acc)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


# -- selection -------------------------------------------------------------

def _select(scores: ScoreMap, groups: list[CouplingGroup], k, scope: str):
    sizes: dict[str, int] = {}
    for g in groups:
        sizes[g.space] = sizes.get(g.space, 0) + 1
    missing = [g.gid for g in groups if g.key not in scores]
    if missing:
        raise KeyError(f"scores missing for groups {missing[:5]}")
    ranked = sorted(groups, key=lambda g: (scores[g.key], g.order))
    taken: dict[str, int] = {}
    chosen, skipped = [], 0
    if scope == "global":
        for g in ranked:
            if len(chosen) == k:
                break
            if taken.get(g.space, 0) + 1 >= sizes[g.space]:
                skipped += 1
                continue
            taken[g.space] = taken.get(g.space, 0) + 1
            chosen.append(g)
    else:
        for g in ranked:
            quota = k[g.space] if isinstance(k, dict) else k
            if taken.get(g.space, 0) >= quota:
                continue
            if taken.get(g.space, 0) + 1 >= sizes[g.space]:
                skipped += 1
                continue
            taken[g.space] = taken.get(g.space, 0) + 1
            chosen.append(g)
    if not chosen:
        raise NoPrunableGroupError("every remaining group is protected by the layer-collapse guard")
    chosen.sort(key=lambda g: g.order)
    return chosen, skipped


def select_bottom_k(scores: ScoreMap, groups: list[CouplingGroup], k, scope: str = "global") -> list:
    """The ``k`` lowest-scoring groups network-wide (``global``) or per layer (``local``).

    For ``local``, ``k`` may also be a ``{space: count}`` mapping.  Groups
    whose removal would empty their layer are skipped in favour of the next
    lowest; ties resolve in (layer, filter) order.
    """
    if isinstance(k, int) and k < 1:
        raise ValueError("k must be >= 1")
    return _select(scores, groups, k, scope)[0]


# -- scoring ---------------------------------------------------------------

def criterion_scores(net: Network, batch, cfg: PruneConfig, groups, rng) -> ScoreMap:
    """Anchor-keyed scores for ``groups`` under ``cfg.criterion`` (lower = prune first)."""
    layer_order = [layer.name for layer in net.layers]
    if cfg.criterion == "random":
        return random_scores(groups, layer_order, rng)
    if cfg.criterion == "l1":
        return group_l1_importance(net, groups)
    nexp = group_scores(nexp_map(net, batch, statistic=cfg.statistic), groups)
    if cfg.criterion == "nexp":
        return nexp
    return hybrid_score(group_l1_importance(net, groups), nexp, cfg.alpha)


# -- the loop ----------------------------------------------------------------

def run_pruning(net: Network, batch, cfg: PruneConfig,
                finetune: Callable | None = None,
                evaluate: Callable | None = None) -> PruneRun:
    """Prune ``net`` (left untouched) until the target ratio or the step budget.

    ``finetune(net, epochs)`` trains in place; it is called after every step
    for the iterative schedule and once at the end (with
    ``finetune_epochs_final``) for either schedule.  ``evaluate(net)``
    returns an accuracy logged per step.
    """
    if cfg.criterion in ("nexp", "hybrid") and (batch is None or len(batch) < 2):
        raise ValueError("expressiveness scoring needs a batch of at least 2 samples")
    rng = np.random.default_rng(cfg.seed)
    original = net
    current = net.copy()
    ratio_key = "ratio_flops" if cfg.target == "flops" else "ratio_params"
    run = PruneRun(cfg, initial_report=compression_report(original, current).to_dict())
    scores = None
    tau_current = 1.0
    while tau_current < cfg.tau and run.steps < cfg.steps_max:
        groups = build_coupling_groups(current)
        if scores is None:
            scores = criterion_scores(current, batch, cfg, groups, rng)
        if cfg.scope == "global":
            k = max(1, math.ceil(cfg.kappa_fraction * len(groups)))
        else:
            per_space: dict[str, int] = {}
            for g in groups:
                per_space[g.space] = per_space.get(g.space, 0) + 1
            k = {s: max(1, math.ceil(cfg.kappa_fraction * n)) for s, n in per_space.items()}
        try:
            chosen, skipped = _select(scores, groups, k, cfg.scope)
        except NoPrunableGroupError as exc:
            run.guard_bound = True
            run.shortfall_reason = f"layer-collapse guard: {exc}"
            break
        if skipped:
            run.guard_bound = True
        removed_scores = [scores[g.key] for g in chosen]
        current = apply_prune(current, chosen)
        step = run.steps + 1
        if cfg.schedule == "iterative" and finetune is not None and cfg.finetune_epochs_per_step > 0:
            finetune(current, cfg.finetune_epochs_per_step)
        report = compression_report(original, current).to_dict()
        tau_current = report[ratio_key]
        acc = evaluate(current) if evaluate is not None else None
        run.records.append(StepRecord(step, [g.gid for g in chosen], removed_scores, report, skipped, acc))
        log.debug("step %d removed %d groups, %s=%.3f", step, len(chosen), ratio_key, tau_current)
        if cfg.score_update_every is not None and step % cfg.score_update_every == 0:
            scores = None
    if tau_current < cfg.tau:
        run.shortfall = True
        if not run.shortfall_reason:
            run.shortfall_reason = f"steps_max={cfg.steps_max} exhausted at {ratio_key}={tau_current:.4f}"
    if finetune is not None and cfg.finetune_epochs_final > 0:
        finetune(current, cfg.finetune_epochs_final)
    if evaluate is not None:
        run.final_accuracy = evaluate(current)
    run.network = current
    return run


def pai_sweep(net_at_init: Network, batch, exponents, cfg: PruneConfig | None = None,
              finetune: Callable | None = None, evaluate: Callable | None = None) -> list[PruneRun]:
    """One-shot pruning of an untrained network to params ratios ``10**r``."""
    base = cfg or PruneConfig()
    runs = []
    for r in exponents:
        c = replace(base, tau=float(10 ** r), target="params", schedule="one-shot")
        runs.append(run_pruning(net_at_init, batch, c, finetune=finetune, evaluate=evaluate))
    return runs
