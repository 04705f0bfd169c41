"""Exit distributions, budget solving and confidence-threshold calibration.

The target exit distribution is geometric over steps, q_t = z (1 - q)^(t-1) q.
Writing rho = 1 - q, the weights are proportional to rho^(t-1): rho < 1 front-
loads exits (0 < q < 1), rho > 1 (q < 0) back-loads them. Both sides are needed
to cover every per-sample budget in [C_1, C_T]; rho = 1 (q = 0) is uniform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InfeasibleBudgetError

LOG_RHO_BOUND = 40.0


@dataclass(frozen=True)
class ExitDistribution:
    q: float
    z: float
    probs: tuple  # q_1..q_T

    @property
    def T(self) -> int:
        return len(self.probs)


@dataclass(frozen=True)
class CostModel:
    costs: tuple  # cumulative cost C_t of exiting at step t
    unit: str = "madds"

    def __post_init__(self):
        c = np.asarray(self.costs, dtype=np.float64)
        if c.ndim != 1 or c.size < 1:
            raise ConfigurationError("cost model needs at least one step")
        if np.any(np.diff(c) <= 0):
            raise ConfigurationError("per-step costs must be strictly increasing")
        object.__setattr__(self, "costs", tuple(float(v) for v in c))

    @property
    def T(self) -> int:
        return len(self.costs)

    def __getitem__(self, i):
        return self.costs[i]

    def __len__(self):
        return len(self.costs)


@dataclass(frozen=True)
class BudgetSolution:
    exit: ExitDistribution
    thresholds: tuple  # eta_1..eta_T, eta_T = 0
    costs: tuple
    budget: float
    expected_cost: float

    def to_text(self) -> str:
        return json.dumps(
            {
                "q": self.exit.q,
                "z": self.exit.z,
                "q_t": list(self.exit.probs),
                "eta_t": list(self.thresholds),
                "C_t": list(self.costs),
                "B": self.budget,
                "expected_cost": self.expected_cost,
            },
            sort_keys=True,
        )

    @classmethod
    def from_text(cls, text: str) -> "BudgetSolution":
        d = json.loads(text)
        exit = ExitDistribution(d["q"], d["z"], tuple(d["q_t"]))
        return cls(exit, tuple(d["eta_t"]), tuple(d["C_t"]), d["B"], d["expected_cost"])


def _from_log_rho(log_rho: float, T: int) -> ExitDistribution:
    steps = np.arange(T, dtype=np.float64)
    logw = steps * log_rho
    w = np.exp(logw - logw.max())
    probs = w / w.sum()
    rho = math.exp(log_rho)
    q = 1.0 - rho
    z = _normalizer(q, T)
    return ExitDistribution(q, z, tuple(float(p) for p in probs))


def _normalizer(q: float, T: int) -> float:
    if q == 0.0:
        return math.inf
    rho = 1.0 - q
    try:
        total = sum(rho ** t for t in range(T)) * q
    except OverflowError:
        return 0.0
    return 1.0 / total if total else math.inf


def exit_distribution(q: float, T: int) -> ExitDistribution:
    """Normalized truncated-geometric exit probabilities q_t = z (1-q)^(t-1) q.

    Accepts any q < 1 (q = 0 is the uniform limit); q >= 1 is rejected.
    """
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if not math.isfinite(q) or q >= 1.0:
        raise ValueError(f"exit parameter q must be finite and < 1, got {q}")
    if T == 1:
        return ExitDistribution(float(q), _normalizer(q, 1), (1.0,))
    rho = 1.0 - q
    steps = np.arange(T, dtype=np.float64)
    logw = steps * math.log(rho)
    w = np.exp(logw - logw.max())
    probs = w / w.sum()
    return ExitDistribution(float(q), _normalizer(q, T), tuple(float(p) for p in probs))


def expected_cost(exit: ExitDistribution, cost) -> float:
    costs = cost.costs if isinstance(cost, CostModel) else tuple(cost)
    if len(costs) != exit.T:
        raise ConfigurationError(f"cost model has {len(costs)} steps, exit distribution {exit.T}")
    return math.fsum(p * c for p, c in zip(exit.probs, costs))


def solve_q(budget_per_sample: float, cost, T: int | None = None) -> ExitDistribution:
    """Exit distribution whose expected per-sample cost equals the budget.

    Bisection on log(1 - q); expected cost increases monotonically in it. The
    returned point satisfies expected_cost <= budget and is within 1e-6 * C_T of it.
    """
    cm = cost if isinstance(cost, CostModel) else CostModel(tuple(cost))
    T = cm.T if T is None else T
    if T != cm.T:
        raise ConfigurationError(f"T={T} does not match the {cm.T}-step cost model")
    c1, cT = cm.costs[0], cm.costs[-1]
    if budget_per_sample < c1:
        raise InfeasibleBudgetError(budget_per_sample, c1, cT)
    if T == 1:
        return exit_distribution(0.5, 1)
    tol = 1e-6 * cT
    lo, hi = -LOG_RHO_BOUND, LOG_RHO_BOUND
    if budget_per_sample >= cT:
        return _from_log_rho(hi, T)
    if expected_cost(_from_log_rho(lo, T), cm) >= budget_per_sample:
        return _from_log_rho(lo, T)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expected_cost(_from_log_rho(mid, T), cm) <= budget_per_sample:
            lo = mid
        else:
            hi = mid
        if budget_per_sample - expected_cost(_from_log_rho(lo, T), cm) < tol and hi - lo < 1e-12:
            break
    return _from_log_rho(lo, T)


def calibrate_thresholds(exit: ExitDistribution, confidences) -> tuple:
    """Sequential-quantile thresholds from a full-T confidence matrix (N, T).

    At step t a fraction q_t / sum_{s>=t} q_s of the surviving samples should
    exceed eta_t. The count is taken from cumulative targets round(N * sum_{s<=t} q_s),
    so each step's exit count is within one sample of q_t * N. Thresholds sit
    midway between the last exiting and first remaining confidence.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    n, T = conf.shape
    if T != exit.T:
        raise ConfigurationError(f"confidence matrix has {T} steps, exit distribution {exit.T}")
    thresholds = []
    alive = np.ones(n, dtype=bool)
    cum = np.cumsum(exit.probs)
    exited = 0
    for t in range(T - 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            thresholds.append(0.0)
            continue
        k = int(np.clip(int(np.floor(n * cum[t] + 0.5)) - exited, 0, idx.size))
        vals = np.sort(conf[idx, t])[::-1]
        upper = 1.0 if k == 0 else vals[k - 1]
        lower = 0.0 if k == idx.size else vals[k]
        eta = 0.5 * (upper + lower)
        thresholds.append(float(eta))
        leaving = idx[conf[idx, t] > eta]
        alive[leaving] = False
        exited += leaving.size
    thresholds.append(0.0)
    return tuple(thresholds)


def replay_exits(thresholds, confidences) -> np.ndarray:
    """Exit step (1-based) of every row of a full-T confidence matrix under ``thresholds``."""
    conf = np.asarray(confidences, dtype=np.float64)
    n, T = conf.shape
    eta = np.asarray(thresholds, dtype=np.float64)
    passed = conf[:, :T - 1] > eta[None, :T - 1]
    first = np.where(passed.any(axis=1), passed.argmax(axis=1) + 1, T)
    return first


def solve_budget(budget_per_sample: float, cost, confidences) -> BudgetSolution:
    cm = cost if isinstance(cost, CostModel) else CostModel(tuple(cost))
    exit = solve_q(budget_per_sample, cm)
    eta = calibrate_thresholds(exit, confidences)
    return BudgetSolution(exit, eta, cm.costs, float(budget_per_sample), expected_cost(exit, cm))
