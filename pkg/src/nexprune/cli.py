"""Command-line entry point: ``nexprune <command> [options]``.

Settings resolve as built-in defaults, then ``--config`` JSON, then flags.
The top-level seed is copied into every sub-config so one number fixes a
run.  Exit codes: 0 success, 2 invalid input, 3 target ratio not reached,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import models
from .analysis import state_similarity_report
from .config import ExperimentConfig
from .errors import NexpruneError, NonFiniteError
from .graph import build_coupling_groups, count_flops, count_params, space_sizes
from .network import load_checkpoint, save_checkpoint
from .pruning import run_pruning
from .sampling import load_dataset, make_train_test, sample_batch, save_dataset
from .scoring import ScoreMap, group_l1_importance, group_scores, hybrid_score, nexp_map
from .train import evaluate, finetune_hook, train

log = logging.getLogger("nexprune")

EXIT_OK, EXIT_INVALID, EXIT_SHORTFALL, EXIT_NUMERIC = 0, 2, 3, 4
WORKERS_ENV = "NEXPRUNE_WORKERS"
TRAIN_LOG_SCHEMA = "nexprune.train_log/v1"
HYBRID_SWEEP_SCHEMA = "nexprune.hybrid_sweep/v1"
PAI_SWEEP_SCHEMA = "nexprune.pai_sweep/v1"


# -- config resolution -----------------------------------------------------

def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    top = {k: getattr(args, k) for k in ("seed", "arch", "dataset", "checkpoint", "out")
           if getattr(args, k, None) is not None}
    cfg = replace(cfg, **top)
    p = {}
    for flag, key in (("criterion", "criterion"), ("tau", "tau"), ("alpha", "alpha"),
                      ("steps_max", "steps_max"), ("kappa", "kappa_fraction"),
                      ("scope", "scope"), ("schedule", "schedule")):
        if getattr(args, flag, None) is not None:
            p[key] = getattr(args, flag)
    if getattr(args, "finetune_epochs", None) is not None:
        p["finetune_epochs_final"] = args.finetune_epochs
    cfg = replace(cfg, prune=replace(cfg.prune, seed=cfg.seed, **p))
    s = {"seed": cfg.seed}
    if getattr(args, "sampling", None) is not None:
        s["strategy"] = args.sampling
    cfg = replace(cfg, sampling=replace(cfg.sampling, **s))
    t = {"seed": cfg.seed}
    if getattr(args, "epochs", None) is not None:
        t["epochs"] = args.epochs
    cfg = replace(cfg, train=replace(cfg.train, **t), finetune=replace(cfg.finetune, seed=cfg.seed))
    if getattr(args, "alpha", None) is not None:
        cfg = replace(cfg, hybrid=replace(cfg.hybrid, alpha=args.alpha))
    return cfg


def _out(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    return path


def _data(cfg: ExperimentConfig):
    if cfg.dataset:
        root = Path(cfg.dataset)
        if not root.exists():
            raise FileNotFoundError(f"dataset directory {root} does not exist")
        return load_dataset(root / "train"), load_dataset(root / "test")
    d = cfg.data
    return make_train_test(d.n_train, d.n_test, d.classes, (d.channels, d.size, d.size), seed=cfg.seed,
                           noise=d.noise, jitter=d.jitter)


def _checkpoint(cfg: ExperimentConfig):
    if not cfg.checkpoint:
        raise ValueError("--checkpoint is required for this command")
    if not Path(cfg.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {cfg.checkpoint} does not exist")
    return load_checkpoint(cfg.checkpoint)


def _csv(header_lines: list, columns: list, rows: list) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


# -- commands --------------------------------------------------------------

def cmd_make_dataset(cfg: ExperimentConfig) -> int:
    out = _out(cfg)
    tr, te = _data(cfg)
    save_dataset(tr, out / "train")
    save_dataset(te, out / "test")
    log.info("wrote %d train / %d test samples to %s", len(tr), len(te), out)
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    out = _out(cfg)
    tr, te = _data(cfg)
    c, h, _ = tr.input_shape
    net = models.build(cfg.arch, in_channels=c, size=h, classes=tr.class_count, seed=cfg.seed)
    tlog = train(net, tr, cfg.train)
    acc = evaluate(net, te)
    meta = {"config": cfg.to_dict(), "seed": cfg.seed, "test_accuracy": acc}
    save_checkpoint(net, out / "checkpoint", meta)
    rows = [(i, repr(loss), repr(a)) for i, (loss, a) in enumerate(zip(tlog.losses, tlog.train_accuracy))]
    text = _csv([f"# schema: {TRAIN_LOG_SCHEMA}", "# config: " + json.dumps(cfg.to_dict())],
                ["epoch", "loss", "train_accuracy"], rows)
    (out / "train_log.csv").write_text(text)
    log.info("test accuracy %.4f", acc)
    print(json.dumps({"test_accuracy": acc, "checkpoint": str(out / "checkpoint")}))
    return EXIT_OK


def cmd_score(cfg: ExperimentConfig) -> int:
    out = _out(cfg)
    net = _checkpoint(cfg)
    tr, _ = _data(cfg)
    batch = sample_batch(tr, cfg.sampling)
    if len(batch) < 2:
        raise ValueError("expressiveness needs a batch of at least 2 samples")
    groups = build_coupling_groups(net)
    meta = {"config": cfg.to_dict(), "seed": cfg.seed}
    per_filter = nexp_map(net, batch, provenance=cfg.sampling.strategy, statistic=cfg.prune.statistic)
    per_filter.meta.update(meta)
    per_filter.to_csv(out / "nexp_map.csv")
    nexp = group_scores(per_filter, groups)
    imp = group_l1_importance(net, groups)
    imp.meta.update(meta)
    imp.to_csv(out / "importance_map.csv")
    hyb = hybrid_score(imp, nexp, cfg.hybrid.alpha)
    hyb.meta.update(meta)
    hyb.to_csv(out / "hybrid_map.csv")
    return EXIT_OK


def _prune_once(net, tr, te, cfg: ExperimentConfig, prune_cfg):
    batch = sample_batch(tr, cfg.sampling) if prune_cfg.criterion in ("nexp", "hybrid") else None
    return run_pruning(net, batch, prune_cfg, finetune=finetune_hook(tr, cfg.finetune),
                       evaluate=lambda n: evaluate(n, te))


def cmd_prune(cfg: ExperimentConfig) -> int:
    out = _out(cfg)
    net = _checkpoint(cfg)
    tr, te = _data(cfg)
    baseline = evaluate(net, te)
    run = _prune_once(net, tr, te, cfg, cfg.prune)
    extra = {"seed": cfg.seed, "experiment": cfg.to_dict(), "baseline_accuracy": baseline}
    run.to_csv(out / "trajectory.csv", extra=extra)
    run.to_json(out / "run.json", extra=extra)
    save_checkpoint(run.network, out / "pruned", {**extra, "ratio_flops": run.ratio_flops,
                                                   "ratio_params": run.ratio_params})
    print(json.dumps({"ratio_flops": run.ratio_flops, "ratio_params": run.ratio_params,
                      "steps": run.steps, "baseline_accuracy": baseline,
                      "final_accuracy": run.final_accuracy, "shortfall": run.shortfall}))
    if run.shortfall:
        log.warning("target not reached: %s", run.shortfall_reason)
        return EXIT_SHORTFALL
    return EXIT_OK


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _map_cells(fn, cells):
    n = _workers()
    if n == 1 or len(cells) < 2:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, cells))


def _hybrid_cell(args):
    net, tr, te, cfg, tau, alpha, baseline = args
    pc = replace(cfg.prune, criterion="hybrid", tau=tau, alpha=alpha)
    try:
        run = _prune_once(net, tr, te, cfg, pc)
    except (NexpruneError, ValueError, FloatingPointError) as exc:
        return [tau, alpha, "", "", "", "", "", f"error: {exc}"]
    acc = run.final_accuracy
    return [tau, alpha, repr(run.ratio_params), repr(run.ratio_flops), repr(acc), repr(acc - baseline),
            int(run.shortfall), "ok"]


def cmd_hybrid_sweep(cfg: ExperimentConfig) -> int:
    out = _out(cfg)
    net = _checkpoint(cfg)
    tr, te = _data(cfg)
    baseline = evaluate(net, te)
    cells = [(net, tr, te, cfg, float(t), float(a), baseline) for t in cfg.tau_grid for a in cfg.alpha_grid]
    rows = _map_cells(_hybrid_cell, cells)
    header = [f"# schema: {HYBRID_SWEEP_SCHEMA}",
              "# config: " + json.dumps({**cfg.to_dict(), "baseline_accuracy": baseline})]
    (out / "hybrid_sweep.csv").write_text(_csv(
        header, ["tau", "alpha", "ratio_params", "ratio_flops", "accuracy", "delta_accuracy", "shortfall",
                 "status"], rows))
    failed = sum(r[-1] != "ok" for r in rows)
    if failed:
        log.warning("%d of %d sweep cells failed", failed, len(rows))
    return EXIT_OK


def _pai_cell(args):
    cfg, tr, te, r = args
    c, h, _ = tr.input_shape
    net = models.build(cfg.arch, in_channels=c, size=h, classes=tr.class_count, seed=cfg.seed)
    pc = replace(cfg.prune, tau=float(10 ** r), target="params", schedule="one-shot",
                 finetune_epochs_final=0)
    try:
        batch = sample_batch(tr, cfg.sampling) if pc.criterion in ("nexp", "hybrid") else None
        run = run_pruning(net, batch, pc)
        pruned = run.network
        train(pruned, tr, cfg.train)
        acc = evaluate(pruned, te)
    except (NexpruneError, ValueError, FloatingPointError) as exc:
        return [r, 10 ** r, "", "", "", "", f"error: {exc}"]
    return [r, repr(float(10 ** r)), repr(run.ratio_params), repr(run.ratio_flops), repr(acc),
            min(space_sizes(pruned).values()), "ok"]


def cmd_pai_sweep(cfg: ExperimentConfig) -> int:
    out = _out(cfg)
    tr, te = _data(cfg)
    rows = _map_cells(_pai_cell, [(cfg, tr, te, float(r)) for r in cfg.exponent_grid])
    header = [f"# schema: {PAI_SWEEP_SCHEMA}", "# config: " + json.dumps(cfg.to_dict())]
    (out / "pai_sweep.csv").write_text(_csv(
        header, ["exponent", "target_ratio", "ratio_params", "ratio_flops", "accuracy", "min_width", "status"],
        rows))
    return EXIT_OK


def cmd_compare_maps(cfg: ExperimentConfig, map_a: str, map_b: str) -> int:
    out = _out(cfg)
    a, b = ScoreMap.load(map_a), ScoreMap.load(map_b)
    report = state_similarity_report(a, b, first_n=cfg.first_n, strategy=Path(map_b).stem)
    meta = {"config": cfg.to_dict(), "seed": cfg.seed, "map_a": str(map_a), "map_b": str(map_b)}
    report.to_csv(out / "similarity.csv", meta)
    report.to_json(out / "similarity.json", meta)
    print(report.to_csv(meta={"seed": cfg.seed}))
    return EXIT_OK


def cmd_info(cfg: ExperimentConfig) -> int:
    net = _checkpoint(cfg) if cfg.checkpoint else models.build(
        cfg.arch, cfg.data.channels, cfg.data.size, cfg.data.classes, seed=cfg.seed)
    print(json.dumps({"name": net.name, "flops": count_flops(net), "params": count_params(net),
                      "widths": space_sizes(net)}, indent=1))
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--arch", choices=sorted(models.ARCHITECTURES))
    common.add_argument("--dataset", help="directory with train/ and test/ datasets")
    common.add_argument("--checkpoint")
    common.add_argument("-v", "--verbose", action="store_true")

    prune = argparse.ArgumentParser(add_help=False)
    prune.add_argument("--criterion", choices=["nexp", "l1", "hybrid", "random"])
    prune.add_argument("--tau", type=float)
    prune.add_argument("--alpha", type=float)
    prune.add_argument("--steps-max", type=int)
    prune.add_argument("--kappa", type=float, help="fraction of remaining groups removed per step")
    prune.add_argument("--scope", choices=["global", "local"])
    prune.add_argument("--schedule", choices=["one-shot", "iterative"])
    prune.add_argument("--sampling", choices=["random", "kmeans", "noise", "full"])
    prune.add_argument("--finetune-epochs", type=int)

    parser = argparse.ArgumentParser(prog="nexprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-dataset", parents=[common], help="write synthetic train/test datasets")
    t = sub.add_parser("train", parents=[common], help="train a baseline checkpoint")
    t.add_argument("--epochs", type=int)
    sub.add_parser("score", parents=[common, prune], help="write expressiveness, L1 and hybrid maps")
    sub.add_parser("prune", parents=[common, prune], help="prune a checkpoint toward a FLOPs ratio")
    sub.add_parser("hybrid-sweep", parents=[common, prune], help="tau x alpha grid of hybrid runs")
    p = sub.add_parser("pai-sweep", parents=[common, prune], help="prune at initialization, then train")
    p.add_argument("--epochs", type=int)
    c = sub.add_parser("compare-maps", parents=[common], help="similarity metrics between two maps")
    c.add_argument("map_a")
    c.add_argument("map_b")
    c.add_argument("--first-n", type=int)
    sub.add_parser("info", parents=[common], help="FLOPs, params and widths of a network")
    return parser


COMMANDS = {
    "make-dataset": cmd_make_dataset, "train": cmd_train, "score": cmd_score, "prune": cmd_prune,
    "hybrid-sweep": cmd_hybrid_sweep, "pai-sweep": cmd_pai_sweep, "info": cmd_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "compare-maps":
            if args.first_n is not None:
                cfg = replace(cfg, first_n=args.first_n)
            return cmd_compare_maps(cfg, args.map_a, args.map_b)
        return COMMANDS[args.command](cfg)
    except NonFiniteError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError, TypeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
