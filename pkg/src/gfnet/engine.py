"""Sequential adaptive inference: glance, confidence check, focus steps, early exit."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .budget import BudgetSolution
from .errors import ConfigurationError
from .model import GfModel
from .numcore import Tensor, no_grad

GLANCE = None  # location marker for step 1

CORNERS = ((0.5, 0.5), (0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0))


@dataclass
class InferenceConfig:
    mode: str = "full"  # full | anytime | budgeted
    anytime_step: int | None = None
    thresholds: tuple | None = None
    policy: str = "learned"  # learned | random | centre_corner
    seed: int = 0

    @classmethod
    def budgeted(cls, solution: BudgetSolution, **kw) -> "InferenceConfig":
        return cls(mode="budgeted", thresholds=tuple(solution.thresholds), **kw)

    def validate(self, T: int) -> None:
        if self.mode not in ("full", "anytime", "budgeted"):
            raise ConfigurationError(f"unknown inference mode {self.mode!r}")
        if self.policy not in ("learned", "random", "centre_corner"):
            raise ConfigurationError(f"unknown policy {self.policy!r}")
        if self.mode == "anytime" and not (self.anytime_step and 1 <= self.anytime_step <= T):
            raise ConfigurationError(f"anytime step must lie in [1, {T}]")
        if self.mode == "budgeted":
            if self.thresholds is None or len(self.thresholds) != T:
                raise ConfigurationError(f"budgeted mode needs {T} thresholds")

    def halts(self, t: int, confidence: float, T: int) -> bool:
        if t >= T:
            return True
        if self.mode == "anytime":
            return t >= self.anytime_step
        if self.mode == "budgeted":
            return confidence > self.thresholds[t - 1]
        return False


@dataclass
class EpisodeTrace:
    sample_id: int
    label: int | None
    locations: list = field(default_factory=list)  # per step; None for the glance
    probs: list = field(default_factory=list)
    confidences: list = field(default_factory=list)
    exit_step: int = 0
    predicted: int = -1
    cost: float = 0.0

    def to_record(self) -> dict:
        return {
            "id": self.sample_id,
            "exit_step": self.exit_step,
            "predicted": self.predicted,
            "label": self.label,
            "confidences": self.confidences,
            "locations": self.locations,
            "cost": self.cost,
        }


def centre_corner_policy(t: int, T: int | None = None) -> tuple:
    """Centre at t = 2, then corners (0,0), (0,1), (1,0), (1,1); wraps around after t = 6."""
    if t < 2:
        raise ConfigurationError("the glance step has no patch location")
    return CORNERS[(t - 2) % len(CORNERS)]


def random_location(seed: int, sample_id: int, t: int) -> tuple:
    rng = np.random.default_rng((seed, sample_id, t))
    y, x = rng.random(2)
    return float(y), float(x)


def _argmax(p: np.ndarray) -> int:
    return int(np.argmax(p))  # first maximum -> lowest class index on ties


def infer(model: GfModel, image: np.ndarray, config: InferenceConfig, sample_id: int = 0,
          label: int | None = None, cost=None) -> EpisodeTrace:
    """Run one image through the glance/focus loop until the halting rule fires.

    ``cost`` is an optional per-step cumulative cost sequence C_1..C_T.
    """
    T = model.T
    config.validate(T)
    batch = image[None]
    trace = EpisodeTrace(sample_id, None if label is None else int(label))
    with no_grad():
        cls_state, pol_state = None, None
        x = model.glance_input(batch)
        for t in range(1, T + 1):
            out = model.step(x, t, cls_state)
            cls_state = out.cls_state
            p = out.probs[0]
            conf = float(p.max())
            trace.probs.append(p)
            trace.confidences.append(conf)
            if config.halts(t, conf, T):
                break
            if config.policy == "learned":
                loc, _, _, _, pol_state, _ = model.propose_step(out.features, pol_state, "deterministic")
                loc = (float(loc[0, 0]), float(loc[0, 1]))
            elif config.policy == "random":
                loc = random_location(config.seed, sample_id, t + 1)
            else:
                loc = centre_corner_policy(t + 1, T)
            trace.locations.append(loc)
            x = model.patch_input(batch, np.asarray([loc]))
    trace.locations.insert(0, GLANCE)
    trace.exit_step = len(trace.confidences)
    trace.predicted = _argmax(trace.probs[-1])
    if cost is not None:
        trace.cost = float(cost[trace.exit_step - 1])
    return trace


@dataclass
class Summary:
    n: int
    accuracy: float
    exit_counts: list
    average_cost: float
    correct_counts: list

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(traces: list, T: int, cost=None) -> Summary:
    exits = np.zeros(T, dtype=np.int64)
    correct = np.zeros(T, dtype=np.int64)
    for tr in traces:
        exits[tr.exit_step - 1] += 1
        if tr.label is not None and tr.predicted == tr.label:
            correct[tr.exit_step - 1] += 1
    n = len(traces)
    avg = 0.0
    if cost is not None and n:
        # integer exit counts make the reduction independent of trace order
        avg = math.fsum(int(exits[t]) * float(cost[t]) for t in range(T)) / n
    acc = float(correct.sum()) / n if n else 0.0
    return Summary(n, acc, exits.tolist(), avg, correct.tolist())


def batch_infer(model: GfModel, dataset, config: InferenceConfig, concurrency: int = 1, cost=None,
                ids=None) -> tuple[list, Summary]:
    """``infer`` over a dataset; results are independent of ``concurrency``."""
    config.validate(model.T)
    ids = np.arange(len(dataset)) if ids is None else np.asarray(ids)

    def run(i):
        return infer(model, dataset.images[i], config, int(i), int(dataset.labels[i]), cost)

    if concurrency <= 1:
        traces = [run(i) for i in ids]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            traces = list(pool.map(run, ids))
    return traces, summarize(traces, model.T, cost)


def write_traces(traces, path) -> None:
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(json.dumps(tr.to_record(), sort_keys=True) + "\n")


def read_traces(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- batched evaluation used during training -------------------------------------

def anytime_accuracy(model: GfModel, images: np.ndarray, labels: np.ndarray, policy: str = "learned",
                     seed: int = 0, batch_size: int = 250, return_confidences: bool = False):
    """Per-step accuracy (and optionally confidences) over a full-T unroll, evaluated in batches.

    Random locations use the same per-(sample, step) streams as ``infer``.
    """
    T = model.T
    n = len(labels)
    confs = np.zeros((n, T))
    preds = np.zeros((n, T), dtype=np.int64)
    with no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            imgs = images[sl]
            cls_state, pol_state = None, None
            x = model.glance_input(imgs)
            for t in range(1, T + 1):
                out = model.step(Tensor(x), t, cls_state)
                cls_state = out.cls_state
                p = out.probs
                preds[sl, t - 1] = p.argmax(axis=1)
                confs[sl, t - 1] = p.max(axis=1)
                if t == T:
                    break
                if policy == "learned":
                    loc, _, _, _, pol_state, _ = model.propose_step(out.features, pol_state, "deterministic")
                elif policy == "random":
                    loc = np.array([random_location(seed, i, t + 1) for i in range(sl.start, sl.stop)])
                else:
                    loc = np.tile(centre_corner_policy(t + 1, T), (len(imgs), 1))
                x = model.patch_input(imgs, loc)
    acc = (preds == labels[:, None]).mean(axis=0)
    if return_confidences:
        return acc, confs, preds
    return acc
