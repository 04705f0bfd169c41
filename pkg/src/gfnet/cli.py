"""Command-line entry point: ``gfnet <command> [options]``.

Commands: convert-dataset, train, eval, sweep, trace, solve-budget. Every
command resolves a RunConfig (flags > file > defaults) and writes it next to
its outputs under the run directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import bench
from .budget import CostModel, calibrate_thresholds, expected_cost, solve_q
from .config import RunConfig
from .dataio import Dataset, channel_stats, load_dataset, patch_window, save_dataset
from .engine import InferenceConfig, batch_infer, infer, write_traces
from .errors import ConfigurationError, GfError, UsageError
from .model import GfModel, load_checkpoint, save_checkpoint
from .trainer import MetricsLog, stage0_pretrain, stage1_train, stage2_train, stage3_finetune

log = logging.getLogger("gfnet")

SUBDIRS = ("checkpoints", "logs", "traces", "curves")
SPLITS = ("train", "val", "test")


# -- run directory ------------------------------------------------------------------

@contextmanager
def run_dir(cfg: RunConfig, *subdirs):
    """Create the output layout, take the lock, write the resolved config everywhere used."""
    root = cfg.output_dir
    root.mkdir(parents=True, exist_ok=True)
    lock = root / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory {root} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        cfg.write(root)
        for sub in subdirs:
            (root / sub).mkdir(exist_ok=True)
            cfg.write(root / sub)
        yield root
    finally:
        lock.unlink(missing_ok=True)


def checkpoint_path(cfg: RunConfig, stage: int) -> Path:
    return cfg.output_dir / "checkpoints" / f"stage{stage}.gfck"


def load_split(cfg: RunConfig, split: str) -> Dataset:
    path = cfg.split_path(split)
    if not path.exists():
        raise UsageError(f"dataset split {split!r} not found at {path}; run convert-dataset first")
    return load_dataset(path)


def resolve_checkpoint(cfg: RunConfig, given):
    if given:
        return Path(given)
    for stage in (3, 2, 1, 0):
        p = checkpoint_path(cfg, stage)
        if p.exists():
            return p
    raise UsageError(f"no checkpoint under {cfg.output_dir / 'checkpoints'}; train first or pass --checkpoint")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- commands -----------------------------------------------------------------------

def cmd_convert(args, cfg: RunConfig) -> int:
    out = Path(cfg["data"]["dir"])
    targets = {s: cfg.split_path(s) for s in SPLITS}
    existing = [str(p) for p in targets.values() if p.exists()]
    if existing:
        raise UsageError(f"refusing to overwrite existing dataset files: {', '.join(existing)}")
    if args.synthetic:
        from .synth import make_splits

        splits = make_splits(args.n_train, args.n_val, args.n_test, seed=cfg.seed)
    else:
        if not args.npz:
            raise UsageError("convert-dataset needs --npz PATH or --synthetic")
        splits = _from_npz(Path(args.npz))
    out.mkdir(parents=True, exist_ok=True)
    for split, ds in splits.items():
        save_dataset(ds, targets[split])
        print(f"{split}: {len(ds)} samples -> {targets[split]}")
    return 0


def _from_npz(path: Path) -> dict:
    """Arrays ``{split}_images`` (N, C, H, W) uint8 and ``{split}_labels`` for train/val/test."""
    with np.load(path) as z:
        missing = [f"{s}_{k}" for s in SPLITS for k in ("images", "labels") if f"{s}_{k}" not in z]
        if missing:
            raise ConfigurationError(f"{path} is missing arrays: {', '.join(missing)}")
        raw = {s: (z[f"{s}_images"], z[f"{s}_labels"].astype(np.int64)) for s in SPLITS}
    num_classes = int(max(int(lab.max()) for _, lab in raw.values()) + 1)
    mean, std = channel_stats(raw["train"][0])
    stats = {"mean": mean.tolist(), "std": std.tolist()}
    return {s: Dataset(np.ascontiguousarray(img, dtype=np.uint8), lab, num_classes, s,
                       {"source": str(path), "normalization": stats})
            for s, (img, lab) in raw.items()}


def cmd_train(args, cfg: RunConfig) -> int:
    stages = [0, 1, 2, 3] if args.stage == "all" else [int(args.stage)]
    train = load_split(cfg, "train")
    with run_dir(cfg, "checkpoints", "logs") as root:
        for stage in stages:
            if stage == 0:
                model = GfModel(cfg.model_config(train))
            else:
                prev = checkpoint_path(cfg, stage - 1)
                if not prev.exists():
                    raise UsageError(f"stage {stage - 1} checkpoint required (expected {prev})")
                model = load_checkpoint(prev).model
            metrics = MetricsLog(root / "logs" / f"stage{stage}.jsonl")
            if stage == 0:
                result = stage0_pretrain(model, train, cfg.stage_config(0), metrics)
            elif stage == 1:
                result = stage1_train(model, train, cfg.stage_config(1), metrics)
            elif stage == 2:
                result = stage2_train(model, train, cfg.ppo_config(), load_split(cfg, "val"), metrics)
            else:
                result = stage3_finetune(model, train, cfg.stage_config(3), metrics)
            path = save_checkpoint(model, checkpoint_path(cfg, stage), stage=f"stage{stage}",
                                   rng_state={"seed": cfg.seed})
            summary = result if isinstance(result, dict) else {"final_loss": result[-1] if result else None}
            print(json.dumps({"stage": stage, "checkpoint": str(path), "steps": len(metrics.records), **summary},
                             sort_keys=True))
    return 0


def _policy(name: str) -> str:
    return name.replace("-", "_")


def _calibrated(model, cfg: RunConfig, cost: CostModel, budget: float, policy: str, concurrency: int):
    exit = solve_q(budget, cost)
    calib = load_split(cfg, cfg["eval"]["calibration_split"])
    conf = bench.full_confidences(model, calib, policy, cfg.seed, concurrency)
    return exit, calibrate_thresholds(exit, conf)


def cmd_eval(args, cfg: RunConfig) -> int:
    ck = load_checkpoint(resolve_checkpoint(cfg, args.checkpoint))
    model = ck.model
    policy = _policy(args.policy or cfg["eval"]["policy"])
    conc = args.concurrency or cfg["eval"]["concurrency"]
    ds = load_split(cfg, args.split or cfg["eval"]["split"])
    cost = bench.count_ops(model).cost_model()
    report = {"mode": args.mode, "policy": policy}
    if args.mode == "budgeted":
        if args.budget is None:
            raise UsageError("--mode budgeted needs --budget")
        exit, eta = _calibrated(model, cfg, cost, args.budget, policy, conc)
        icfg = InferenceConfig(mode="budgeted", thresholds=eta, policy=policy, seed=cfg.seed)
        report.update(budget=args.budget, q=exit.q, thresholds=list(eta), expected_cost=expected_cost(exit, cost))
    elif args.mode == "anytime":
        icfg = InferenceConfig(mode="anytime", anytime_step=args.step, policy=policy, seed=cfg.seed)
        report["step"] = args.step
    else:
        icfg = InferenceConfig(mode="full", policy=policy, seed=cfg.seed)
    traces, summary = batch_infer(model, ds, icfg, conc, cost=cost.costs)
    report.update(summary.to_dict())
    with run_dir(cfg, "traces") as root:
        name = f"eval-{args.mode}-{policy}"
        write_traces(traces, root / "traces" / f"{name}.jsonl")
        (root / "traces" / f"{name}.summary.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    print(f"accuracy {summary.accuracy:.4f}  average cost {summary.average_cost:.6g}  "
          f"exits {' '.join(str(c) for c in summary.exit_counts)}")
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    ck_path = resolve_checkpoint(cfg, args.checkpoint)
    model = load_checkpoint(ck_path).model
    policy = _policy(args.policy or cfg["eval"]["policy"])
    conc = args.concurrency or cfg["eval"]["concurrency"]
    cost = bench.count_ops(model).cost_model()
    if args.budgets == "auto":
        budgets = bench.auto_budgets(cost, 10)
    else:
        try:
            budgets = [float(b) for b in args.budgets.split(",")]
        except ValueError:
            raise UsageError(f"--budgets must be 'auto' or a comma-separated list, got {args.budgets!r}") from None
    ds = load_split(cfg, args.split or cfg["eval"]["split"])
    calib = load_split(cfg, cfg["eval"]["calibration_split"])
    points = bench.sweep_budgets(model, ds, cost, budgets, calibration=calib, policy=policy, seed=cfg.seed,
                                 concurrency=conc)
    if not points:
        raise UsageError("every requested budget was infeasible")
    prov = {"checkpoint": str(ck_path), "checkpoint_sha256": file_sha256(ck_path), "seed": cfg.seed,
            "policy": policy, "C_t": list(cost.costs), "config": json.loads(cfg.to_text())}
    with run_dir(cfg, "curves") as root:
        for fmt in ("csv", "json"):
            bench.export_curves(points, root / "curves" / f"sweep.{fmt}", fmt, prov)
    for p in points:
        print(f"budget {p.budget:.6g}  cost {p.realized_cost:.6g}  accuracy {p.accuracy:.4f}")
    return 0


def cmd_trace(args, cfg: RunConfig) -> int:
    model = load_checkpoint(resolve_checkpoint(cfg, args.checkpoint)).model
    ds = load_split(cfg, args.split or cfg["eval"]["split"])
    policy = _policy(args.policy or cfg["eval"]["policy"])
    ids = [int(i) for i in args.ids.split(",")]
    bad = [i for i in ids if not 0 <= i < len(ds)]
    if bad:
        raise UsageError(f"unknown sample id(s) {bad}; split has {len(ds)} samples")
    icfg = InferenceConfig(mode="anytime", anytime_step=args.step, policy=policy, seed=cfg.seed) if args.step \
        else InferenceConfig(mode="full", policy=policy, seed=cfg.seed)
    spec = model.patch_spec
    hw = ds.image_shape[1:]
    records = []
    for i in ids:
        tr = infer(model, ds.images[i], icfg, i, int(ds.labels[i]))
        steps = []
        for t, (loc, p, conf) in enumerate(zip(tr.locations, tr.probs, tr.confidences), start=1):
            if loc is None:
                window = [0, 0, hw[0], hw[1]]
            else:
                top, left = patch_window(loc, hw, spec)
                window = [top, left, spec.patch_h, spec.patch_w]
            steps.append({"t": t, "location": loc, "window": window, "confidence": conf,
                          "predicted": int(np.argmax(p)), "correct": bool(int(np.argmax(p)) == tr.label)})
        records.append({"id": i, "label": tr.label, "exit_step": tr.exit_step, "steps": steps})
    with run_dir(cfg, "traces") as root:
        path = root / "traces" / "trace.jsonl"
        with open(path, "w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"{len(records)} traces -> {path}")
    return 0


def cmd_solve_budget(args, cfg: RunConfig) -> int:
    if args.costs:
        cost = CostModel(tuple(float(c) for c in args.costs.split(",")))
    else:
        cost = bench.count_ops(cfg.model_config()).cost_model()
    exit = solve_q(args.budget, cost)
    out = {"budget": args.budget, "q": exit.q, "z": exit.z, "q_t": list(exit.probs), "C_t": list(cost.costs),
           "expected_cost": expected_cost(exit, cost)}
    print(json.dumps(out, sort_keys=True))
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $GFNET_CONFIG)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set stage1.epochs=5")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data-dir", help="dataset directory")
    common.add_argument("-v", "--verbose", action="store_true")

    ev = argparse.ArgumentParser(add_help=False)
    ev.add_argument("--checkpoint")
    ev.add_argument("--policy", choices=["learned", "random", "centre-corner", "centre_corner"])
    ev.add_argument("--split", choices=SPLITS)
    ev.add_argument("--concurrency", type=int)

    p = argparse.ArgumentParser(prog="gfnet", description="Glance-and-focus adaptive inference toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert-dataset", parents=[common], help="write GFDS train/val/test splits")
    c.add_argument("--npz", help="npz with {train,val,test}_{images,labels}")
    c.add_argument("--synthetic", action="store_true", help="generate the procedural desk corpus")
    c.add_argument("--n-train", type=int, default=8000)
    c.add_argument("--n-val", type=int, default=2000)
    c.add_argument("--n-test", type=int, default=2000)
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", parents=[common], help="run training stages")
    t.add_argument("--stage", choices=["0", "1", "2", "3", "all"], default="all")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common, ev], help="evaluate a checkpoint")
    e.add_argument("--mode", choices=["full", "anytime", "budgeted"], default="full")
    e.add_argument("--step", type=int, help="exit step for --mode anytime")
    e.add_argument("--budget", type=float, help="per-sample budget for --mode budgeted")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common, ev], help="accuracy-vs-cost curve over budgets")
    s.add_argument("--budgets", default="auto", help="'auto' or comma-separated per-sample budgets")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("trace", parents=[common, ev], help="per-sample step dumps with patch windows")
    r.add_argument("--ids", required=True, help="comma-separated sample ids")
    r.add_argument("--step", type=int, help="stop at this step (default: run to T)")
    r.set_defaults(func=cmd_trace)

    b = sub.add_parser("solve-budget", parents=[common], help="exit distribution for a per-sample budget")
    b.add_argument("--budget", type=float, required=True)
    b.add_argument("--costs", help="comma-separated C_1..C_T (default: analytic count of the configured model)")
    b.set_defaults(func=cmd_solve_budget)
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    if args.out:
        overrides.append({"output_dir": args.out})
    if args.data_dir:
        overrides.append({"data": {"dir": args.data_dir}})
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, resolve_config(args))
    except (GfError, ValueError, OSError) as err:
        print(f"gfnet {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
