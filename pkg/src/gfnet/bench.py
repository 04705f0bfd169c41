"""Multiply-add accounting, latency measurement and accuracy-vs-cost curves.

Conventions: one multiply-add per MAC, biases and activations excluded. The
policy network and the per-step auxiliary heads are counted in every step
they run, which overstates inference cost slightly but never understates it.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .budget import CostModel, calibrate_thresholds, expected_cost, solve_q
from .engine import InferenceConfig, Summary, batch_infer, infer
from .errors import ConfigurationError, InfeasibleBudgetError
from .model import GfModel, ModelConfig

log = logging.getLogger(__name__)

COST_CONVENTION = "multiply-adds; biases/activations excluded; policy and auxiliary heads included"


# -- analytic counts ----------------------------------------------------------------

def conv_madds(n, out_ch, in_ch, kh, kw, h_out, w_out) -> int:
    return n * out_ch * in_ch * kh * kw * h_out * w_out


def gru_madds(input_size: int, hidden: int) -> int:
    return 3 * hidden * (input_size + hidden)


def encoder_layers(config: ModelConfig, side: int) -> list:
    """(name, madds) per conv layer of one encoder applied to a ``side`` x ``side`` input."""
    out, h, prev = [], side, config.in_channels
    for i, (ch, s) in enumerate(zip(config.channels, config.strides)):
        h = (h + 2 * 1 - 3) // s + 1
        out.append((f"conv{i}", conv_madds(1, ch, prev, 3, 3, h, h)))
        prev = ch
    return out


def encoder_madds(config: ModelConfig, side: int) -> int:
    return sum(m for _, m in encoder_layers(config, side))


@dataclass
class OpCount:
    layers: list  # (component, layer name, madds)
    step_costs: tuple  # cumulative C_1..C_T

    @property
    def components(self) -> dict:
        totals: dict = {}
        for comp, _, m in self.layers:
            totals[comp] = totals.get(comp, 0) + m
        return totals

    @property
    def total(self) -> int:
        return sum(m for _, _, m in self.layers)

    def cost_model(self) -> CostModel:
        return CostModel(tuple(float(c) for c in self.step_costs))


def count_ops(model, input_size: int | None = None) -> OpCount:
    """Per-layer multiply-adds and cumulative per-step costs.

    ``input_size`` overrides the side fed to both encoders (the patch size by
    default). C_t = f_G + (t - 1) (f_L + pi) + classifier and head costs up to t.
    """
    cfg = model.config if isinstance(model, GfModel) else model
    side = cfg.patch_size if input_size is None else int(input_size)
    F, C, T = cfg.feature_dim, cfg.num_classes, cfg.T
    fs = cfg.feature_side if input_size is None else _feature_side(cfg, side)

    enc = encoder_layers(cfg, side)
    policy = [
        ("reduce", conv_madds(1, cfg.policy_channels, F, 1, 1, fs, fs)),
        ("gru", gru_madds(cfg.policy_channels * fs * fs, cfg.policy_hidden)),
        ("mean_head", cfg.policy_hidden * 2),
        ("value_head", cfg.policy_hidden),
    ]

    def classifier(t):
        if cfg.classifier == "gru":
            return [("gru", gru_madds(F, cfg.classifier_hidden)), ("head", cfg.classifier_hidden * C)]
        return [(f"head{t}", t * F * C)]

    layers = [("f_G", n, m) for n, m in enc]
    steps = []
    for t in range(1, T + 1):
        part = []
        if t > 1:
            part += [("pi", f"{n}@{t - 1}", m) for n, m in policy]
            part += [("f_L", f"{n}@{t}", m) for n, m in enc]
        part += [("f_C", f"{n}@{t}", m) for n, m in classifier(t)]
        part += [("FC_t", f"aux{t}", F * C)]
        layers += part
        steps.append(sum(m for _, _, m in part))
    glance = sum(m for _, m in enc)
    cum = np.cumsum(steps) + glance
    return OpCount(layers, tuple(int(c) for c in cum))


def _feature_side(cfg: ModelConfig, side: int) -> int:
    for s in cfg.strides:
        side = (side + 2 - 3) // s + 1
    return side


# -- wall clock ---------------------------------------------------------------------

def measure_latency(model: GfModel, images: np.ndarray, reps: int = 11, warmup: int = 2,
                    policy: str = "learned", max_reps: int = 10_000) -> tuple:
    """Median milliseconds per sample for each exit length t = 1..T (batch of one, one lane).

    Each timed run covers crop/resize and every network call up to the exit. If
    the median is too close to the timer resolution, ``reps`` is doubled.
    """
    if len(images) == 0:
        raise ConfigurationError("latency needs at least one image")
    res = time.get_clock_info("perf_counter").resolution
    out = []
    for t in range(1, model.T + 1):
        cfg = InferenceConfig(mode="anytime", anytime_step=t, policy=policy)
        for i in range(warmup):
            infer(model, images[i % len(images)], cfg)
        n = reps
        while True:
            times = []
            for i in range(n):
                t0 = time.perf_counter()
                infer(model, images[i % len(images)], cfg)
                times.append(time.perf_counter() - t0)
            med = statistics.median(times)
            if med > 100 * res or n >= max_reps:
                break
            n *= 2
        out.append(med * 1e3)
    return tuple(out)


def weighted_latency(summary: Summary, latency) -> float:
    return math.fsum(c * l for c, l in zip(summary.exit_counts, latency)) / summary.n


# -- curves -------------------------------------------------------------------------

@dataclass
class CurvePoint:
    budget: float
    accuracy: float
    realized_cost: float
    exit_counts: list
    q: float = math.nan
    thresholds: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "accuracy": self.accuracy,
            "realized_cost": self.realized_cost,
            "exit_counts": list(self.exit_counts),
            "q": self.q,
            "thresholds": list(self.thresholds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CurvePoint":
        return cls(float(d["budget"]), float(d["accuracy"]), float(d["realized_cost"]),
                   [int(c) for c in d["exit_counts"]], float(d["q"]), tuple(float(e) for e in d["thresholds"]))


def full_confidences(model: GfModel, dataset, policy: str = "learned", seed: int = 0,
                     concurrency: int = 1) -> np.ndarray:
    """(N, T) confidence matrix from the same per-sample path used at evaluation."""
    traces, _ = batch_infer(model, dataset, InferenceConfig(mode="full", policy=policy, seed=seed), concurrency)
    return np.asarray([tr.confidences for tr in traces], dtype=np.float64)


def sweep_budgets(model: GfModel, dataset, cost, budgets, calibration=None, policy: str = "learned",
                  seed: int = 0, concurrency: int = 1) -> list:
    """Accuracy/cost points for each per-sample budget; no retraining between points.

    Thresholds are calibrated on ``calibration`` (``dataset`` itself if omitted).
    Infeasible budgets are skipped with a warning.
    """
    cm = cost if isinstance(cost, CostModel) else CostModel(tuple(cost))
    conf = full_confidences(model, calibration if calibration is not None else dataset, policy, seed, concurrency)
    points = []
    for b in sorted(float(b) for b in budgets):
        try:
            exit = solve_q(b, cm)
        except InfeasibleBudgetError as err:
            log.warning("skipping budget: %s", err)
            continue
        eta = calibrate_thresholds(exit, conf)
        cfg = InferenceConfig(mode="budgeted", thresholds=eta, policy=policy, seed=seed)
        _, summary = batch_infer(model, dataset, cfg, concurrency, cost=cm.costs)
        points.append(CurvePoint(b, summary.accuracy, summary.average_cost, summary.exit_counts, exit.q, eta))
        log.info("budget %.6g: accuracy %.4f, cost %.6g (expected %.6g)",
                 b, summary.accuracy, summary.average_cost, expected_cost(exit, cm))
    return points


def anytime_curve(model: GfModel, dataset, cost, policy: str = "learned", seed: int = 0,
                  concurrency: int = 1) -> list:
    cm = cost if isinstance(cost, CostModel) else CostModel(tuple(cost))
    points = []
    for t in range(1, model.T + 1):
        cfg = InferenceConfig(mode="anytime", anytime_step=t, policy=policy, seed=seed)
        _, s = batch_infer(model, dataset, cfg, concurrency, cost=cm.costs)
        points.append(CurvePoint(cm.costs[t - 1], s.accuracy, s.average_cost, s.exit_counts))
    return points


def auto_budgets(cost, n: int = 10) -> list:
    cm = cost if isinstance(cost, CostModel) else CostModel(tuple(cost))
    b = np.geomspace(cm.costs[0], cm.costs[-1], n)
    b[0], b[-1] = cm.costs[0], cm.costs[-1]
    return [float(v) for v in b]


# -- export -------------------------------------------------------------------------

def csv_columns(T: int) -> list:
    return ["budget", "realized_cost", "accuracy", "q"] + [f"eta_{t}" for t in range(1, T + 1)] + ["exit_counts"]


def export_curves(points, path, format: str = "csv", provenance: dict | None = None):
    """Write points as CSV (``# key: value`` header lines, then a fixed schema) or JSON.

    Exit counts are one ';'-joined column so the column count depends only on T.
    """
    if not points:
        raise ConfigurationError("no curve points to export")
    prov = dict(provenance or {})
    prov.setdefault("cost_convention", COST_CONVENTION)
    T = len(points[0].exit_counts)
    if format == "json":
        text = json.dumps({"provenance": prov, "points": [p.to_dict() for p in points]}, sort_keys=True, indent=1)
    elif format == "csv":
        buf = io.StringIO()
        for k in sorted(prov):
            buf.write(f"# {k}: {json.dumps(prov[k], sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(csv_columns(T))
        for p in points:
            eta = list(p.thresholds) if p.thresholds else [math.nan] * T
            w.writerow([repr(p.budget), repr(p.realized_cost), repr(p.accuracy), repr(p.q)]
                       + [repr(float(e)) for e in eta] + [";".join(str(c) for c in p.exit_counts)])
        text = buf.getvalue()
    else:
        raise ConfigurationError(f"unknown curve format {format!r}")
    with open(path, "w") as fh:
        fh.write(text)
    return path


def read_curves(path) -> tuple[dict, list]:
    """Inverse of ``export_curves``; returns (provenance, points)."""
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        d = json.loads(text)
        return d["provenance"], [CurvePoint.from_dict(p) for p in d["points"]]
    prov, body = {}, []
    for line in text.splitlines():
        if line.startswith("# "):
            key, _, val = line[2:].partition(": ")
            prov[key] = json.loads(val)
        else:
            body.append(line)
    rows = list(csv.reader(body))
    header, rows = rows[0], rows[1:]
    T = len(header) - 5
    if header != csv_columns(T):
        raise ConfigurationError(f"unexpected curve columns {header}")
    points = []
    for r in rows:
        eta = tuple(float(v) for v in r[4:4 + T])
        points.append(CurvePoint(float(r[0]), float(r[2]), float(r[1]),
                                 [int(c) for c in r[-1].split(";")], float(r[3]),
                                 () if all(math.isnan(e) for e in eta) else eta))
    return prov, points
