"""Staged training: low-resolution pre-fit, random-patch training, PPO, fine-tuning."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import Dataset, augment_batch, iterate_minibatches
from .engine import anytime_accuracy
from .errors import ConfigurationError
from .model import GfModel
from .numcore import (
    Linear,
    Optimizer,
    OptimizerConfig,
    Tensor,
    clip,
    exp,
    minimum,
    no_grad,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)


@dataclass
class StageConfig:
    stage: int = 1
    epochs: int = 10
    batch_size: int = 64
    lr_classifier: float = 0.1
    lr_encoder: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lam: float = 1.0
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.stage not in (0, 1, 3):
            raise ConfigurationError("StageConfig covers stages 0, 1 and 3; stage 2 uses PpoConfig")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class PpoConfig:
    gamma: float = 0.7
    clip_eps: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    epochs: int = 15
    ppo_epochs: int = 4
    minibatch_size: int = 64
    rollout_size: int = 256
    normalize_advantages: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigurationError("gamma must lie in (0, 1)")
        if not 0 < self.clip_eps < 1:
            raise ConfigurationError("clip epsilon must lie in (0, 1)")
        self.betas = tuple(self.betas)


class MetricsLog:
    """Line-delimited JSON records; one per optimizer step (no wall-clock fields)."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            open(path, "w").close()

    def write(self, **record) -> None:
        record = {k: _jsonable(v) for k, v in record.items()}
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [float(x) for x in v]
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _sgd(params, lr, cfg: StageConfig, total_steps: int) -> Optimizer:
    return Optimizer(params, OptimizerConfig(
        kind="sgd-nesterov", learning_rate=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        schedule="cosine", total_steps=max(total_steps, 1)))


def _batch_images(dataset: Dataset, idx, cfg: StageConfig, rng) -> np.ndarray:
    images = dataset.images[idx]
    return augment_batch(images, rng) if cfg.augment else images


# -- Stage 0 -----------------------------------------------------------------------

def stage0_pretrain(model: GfModel, dataset: Dataset, cfg: StageConfig, metrics: MetricsLog | None = None,
                    probe=None) -> list:
    """Fit the global encoder as a plain classifier on glance-sized images.

    A temporary linear head is trained alongside and discarded. Returns the
    per-step training losses. ``probe(model, head)`` runs after every step.
    """
    if cfg.lam:
        log.warning("stage 0 ignores lambda=%s (no auxiliary heads in this stage)", cfg.lam)
    rng = np.random.default_rng((cfg.seed, 0))
    head = Linear(model.config.feature_dim, model.config.num_classes, rng=rng)
    steps = cfg.epochs * -(-len(dataset) // cfg.batch_size)
    enc_opt = _sgd(model.global_encoder.parameters(), cfg.lr_encoder, cfg, steps)
    head_opt = _sgd(head.parameters(), cfg.lr_classifier, cfg, steps)
    losses = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in iterate_minibatches(len(dataset), cfg.batch_size, rng):
            images = _batch_images(dataset, idx, cfg, rng)
            enc_opt.zero_grad()
            head_opt.zero_grad()
            _, pooled = model.encode(Tensor(model.glance_input(images)), "global")
            loss, _ = softmax_cross_entropy(head(pooled), dataset.labels[idx])
            loss.backward()
            enc_opt.step()
            head_opt.step()
            if probe is not None:
                probe(model, head)
            losses.append(loss.item())
            if metrics is not None:
                metrics.write(stage=0, step=step, epoch=epoch, loss=loss.item())
            step += 1
    return losses


# -- classification loss ---------------------------------------------------------

def uniform_locator(rng):
    def locate(t, prev, policy_state):
        return rng.random((prev.features.shape[0], 2)), policy_state
    return locate


def policy_locator(model: GfModel):
    """Deterministic frozen-policy locations (no gradient into the policy or through e_t)."""
    def locate(t, prev, policy_state):
        with no_grad():
            loc, _, _, _, policy_state, _ = model.propose_step(Tensor(prev.features.data), policy_state, "deterministic")
        return loc, policy_state
    return locate


def unroll(model: GfModel, images: np.ndarray, locate, T: int | None = None) -> list:
    """Full T-step forward with gradients; ``locate`` picks each next patch centre."""
    T = model.T if T is None else T
    outs = []
    cls_state, pol_state = None, None
    x = model.glance_input(images)
    for t in range(1, T + 1):
        out = model.step(Tensor(x), t, cls_state)
        cls_state = out.cls_state
        outs.append(out)
        if t < T:
            centers, pol_state = locate(t, out, pol_state)
            x = model.patch_input(images, centers)
    return outs


def compute_cls_loss(model: GfModel, outs: list, labels, lam: float) -> Tensor:
    """mean over batch of (1/T) sum_t [CE(p_t, y) + lam * CE(softmax(FC_t(ebar_t)), y)]."""
    T = len(outs)
    total = None
    for t, out in enumerate(outs):
        term, _ = softmax_cross_entropy(out.logits, labels)
        if lam:
            aux, _ = softmax_cross_entropy(model.aux_heads[t](out.pooled), labels)
            term = term + aux * lam
        total = term if total is None else total + term
    return total * (1.0 / T)


def _train_classification(model: GfModel, dataset: Dataset, cfg: StageConfig, locate_factory,
                          metrics: MetricsLog | None, stage: int) -> list:
    rng = np.random.default_rng((cfg.seed, stage))
    steps = cfg.epochs * -(-len(dataset) // cfg.batch_size)
    enc_params = model.global_encoder.parameters() + model.local_encoder.parameters()
    cls_params = model.classifier.parameters() + model.aux_parameters()
    enc_opt = _sgd(enc_params, cfg.lr_encoder, cfg, steps)
    cls_opt = _sgd(cls_params, cfg.lr_classifier, cfg, steps)
    losses = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in iterate_minibatches(len(dataset), cfg.batch_size, rng):
            images = _batch_images(dataset, idx, cfg, rng)
            enc_opt.zero_grad()
            cls_opt.zero_grad()
            outs = unroll(model, images, locate_factory(rng))
            loss = compute_cls_loss(model, outs, dataset.labels[idx], cfg.lam)
            loss.backward()
            enc_opt.step()
            cls_opt.step()
            losses.append(loss.item())
            if metrics is not None:
                metrics.write(stage=stage, step=step, epoch=epoch, loss=loss.item())
            step += 1
    return losses


def stage1_train(model: GfModel, dataset: Dataset, cfg: StageConfig, metrics: MetricsLog | None = None) -> list:
    """Encoders + classifier + auxiliary heads under uniformly random patch centres."""
    return _train_classification(model, dataset, cfg, uniform_locator, metrics, 1)


def stage3_finetune(model: GfModel, dataset: Dataset, cfg: StageConfig, metrics: MetricsLog | None = None) -> list:
    """Same objective as stage 1, with patches chosen by the frozen deterministic policy."""
    return _train_classification(model, dataset, cfg, lambda rng: policy_locator(model), metrics, 3)


# -- Stage II: PPO -----------------------------------------------------------------

@dataclass
class Rollout:
    """Transitions for steps t = 2..T (index j = t - 2) of a batch of episodes."""

    features: np.ndarray  # (T-1, N, F, s, s): e_{t-1}
    actions: np.ndarray  # (T-1, N, 2) raw (unclipped) actions l_t
    old_logp: np.ndarray  # (T-1, N)
    values: np.ndarray  # (T-1, N): V(s_t)
    rewards: np.ndarray  # (T-1, N): r_t
    true_probs: np.ndarray  # (T, N): p_{t,y}
    returns: np.ndarray = field(default=None)  # V^target(s_t)
    advantages: np.ndarray = field(default=None)

    @property
    def num_episodes(self) -> int:
        return self.actions.shape[1]


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """V^target(s_t) = sum_{k>=t} gamma^(k-t) r_k along axis 0 (steps)."""
    out = np.zeros_like(rewards, dtype=np.float64)
    acc = np.zeros(rewards.shape[1:], dtype=np.float64)
    for j in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[j] + gamma * acc
        out[j] = acc
    return out


def finish_rollout(ro: Rollout, gamma: float) -> Rollout:
    ro.returns = discounted_returns(ro.rewards, gamma)
    ro.advantages = ro.returns - ro.values
    return ro


def collect_rollouts(model: GfModel, images: np.ndarray, labels: np.ndarray, ppo: PpoConfig, rng) -> Rollout:
    """Full-T stochastic episodes with rewards r_t = p_{t,y} - p_{t-1,y} (no early exit)."""
    T = model.T
    if T < 2:
        raise ConfigurationError("policy training needs T >= 2")
    n = len(labels)
    rows = np.arange(n)
    feats, acts, logps, vals = [], [], [], []
    true_p = np.zeros((T, n))
    with no_grad():
        cls_state, pol_state = None, None
        x = model.glance_input(images)
        for t in range(1, T + 1):
            out = model.step(Tensor(x), t, cls_state)
            cls_state = out.cls_state
            true_p[t - 1] = out.probs[rows, labels]
            if t == T:
                break
            loc, action, logp, value, pol_state, _ = model.propose_step(out.features, pol_state, "stochastic", rng)
            feats.append(out.features.data)
            acts.append(action)
            logps.append(logp.data.astype(np.float64))
            vals.append(value.data.astype(np.float64))
            x = model.patch_input(images, loc)
    rewards = np.diff(true_p, axis=0)
    ro = Rollout(np.stack(feats), np.stack(acts), np.stack(logps), np.stack(vals), rewards, true_p)
    return finish_rollout(ro, ppo.gamma)


def clipped_surrogate(ratio: Tensor, advantages: np.ndarray, eps: float) -> Tensor:
    """min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A), elementwise."""
    adv = Tensor(np.asarray(advantages, dtype=ratio.dtype))
    return minimum(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)


def ppo_objective(policy, ro: Rollout, idx, ppo: PpoConfig, advantages: np.ndarray) -> tuple[Tensor, dict]:
    """mean_t [L^CLIP - c1 L^VF + c2 S] over the selected episodes, recomputing the policy recurrence."""
    h = policy.initial_state(len(idx))
    clip_terms, vf_terms = None, None
    for j in range(ro.actions.shape[0]):
        mean, value, h = policy(Tensor(ro.features[j, idx]), h)
        logp = policy.log_prob(ro.actions[j, idx], mean)
        ratio = exp(logp - Tensor(ro.old_logp[j, idx].astype(np.float32)))
        if not np.all(np.isfinite(ratio.data)):
            raise FloatingPointError(
                f"non-finite PPO ratio at step {j + 2}: logp range [{logp.data.min()}, {logp.data.max()}], "
                f"old logp range [{ro.old_logp[j, idx].min()}, {ro.old_logp[j, idx].max()}]")
        surr = clipped_surrogate(ratio, advantages[j, idx], ppo.clip_eps).sum()
        diff = value - Tensor(ro.returns[j, idx].astype(np.float32))
        vf = (diff * diff).sum()
        clip_terms = surr if clip_terms is None else clip_terms + surr
        vf_terms = vf if vf_terms is None else vf_terms + vf
    count = len(idx) * ro.actions.shape[0]
    entropy = policy.entropy()
    objective = clip_terms * (1.0 / count) - vf_terms * (ppo.c1 / count) + entropy * ppo.c2
    ent = entropy.item() if isinstance(entropy, Tensor) else entropy
    return objective, {"clip": clip_terms.item() / count, "vf": vf_terms.item() / count, "entropy": ent}


def ppo_update(policy, ro: Rollout, ppo: PpoConfig, optimizer: Optimizer, rng) -> list:
    """Several epochs of minibatch Adam ascent on the PPO objective. Returns per-minibatch stats."""
    adv = ro.advantages
    if ppo.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    stats = []
    for _ in range(ppo.ppo_epochs):
        for idx in iterate_minibatches(ro.num_episodes, ppo.minibatch_size, rng):
            optimizer.zero_grad()
            objective, info = ppo_objective(policy, ro, idx, ppo, adv)
            (objective * -1.0).backward()
            optimizer.step()
            info["objective"] = objective.item()
            stats.append(info)
    return stats


def adam_for(params, ppo: PpoConfig) -> Optimizer:
    return Optimizer(params, OptimizerConfig(kind="adam", learning_rate=ppo.lr, betas=ppo.betas))


def stage2_train(model: GfModel, dataset: Dataset, ppo: PpoConfig, val: Dataset | None = None,
                 metrics: MetricsLog | None = None) -> dict:
    """Alternate rollouts and PPO updates; keep the epoch with best final-step validation accuracy."""
    rng = np.random.default_rng((ppo.seed, 2))
    opt = adam_for(model.policy.parameters(), ppo)
    best = {"key": None, "epoch": -1, "params": None}
    step = 0
    for epoch in range(ppo.epochs):
        for idx in iterate_minibatches(len(dataset), ppo.rollout_size, rng):
            ro = collect_rollouts(model, dataset.images[idx], dataset.labels[idx], ppo, rng)
            stats = ppo_update(model.policy, ro, ppo, opt, rng)
            if metrics is not None:
                metrics.write(stage=2, step=step, epoch=epoch,
                              mean_reward=float(ro.rewards.sum(axis=0).mean()),
                              objective=float(np.mean([s["objective"] for s in stats])))
            step += 1
        if val is not None:
            per_step = anytime_accuracy(model, val.images, val.labels, "learned")
            # accuracy at T decides; the mean over steps breaks ties once T saturates
            key = (float(per_step[-1]), float(per_step.mean()))
            log.info("stage 2 epoch %d: val accuracy at T = %.4f, mean over steps = %.4f", epoch, *key)
            if best["key"] is None or key > best["key"]:
                best = {"key": key, "epoch": epoch, "params": [p.data.copy() for p in model.policy.parameters()]}
    if best["params"] is not None:
        for p, data in zip(model.policy.parameters(), best["params"]):
            p.data = data
    return {"best_epoch": best["epoch"], "best_accuracy": best["key"][0] if best["key"] else None}
