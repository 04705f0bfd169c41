"""The four-part glance-and-focus network and its checkpoint format.

Components: a global encoder for the downsampled glance, a local encoder for
full-resolution patches, a recurrent classifier that emits a prediction after
every step (plus per-step auxiliary linear heads used only as a training
regularizer), and a recurrent patch-proposal policy with a value head.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import PatchSpec, crop_batch, normalize, resize_glance
from .errors import CheckpointHashError, CheckpointMagicError, CheckpointVersionError, ConfigurationError, UsageError
from .numcore import (
    Conv2d,
    GRUCell,
    Linear,
    Module,
    Tensor,
    Parameter,
    concat,
    exp,
    global_avg_pool,
    relu,
    reshape,
    sigmoid,
    softmax,
)

CKPT_MAGIC = b"GFCK"
CKPT_VERSION = 1
LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass
class ModelConfig:
    in_channels: int = 3
    image_size: int = 32
    patch_size: int = 16
    num_classes: int = 10
    channels: tuple = (16, 32, 64, 128)
    strides: tuple = (1, 2, 2, 2)
    classifier: str = "gru"  # or "cascaded_fc"
    classifier_hidden: int = 128
    policy_channels: int = 8
    policy_hidden: int = 64
    policy_sigma: float = 0.1
    policy_learnable_sigma: bool = False
    T: int = 4
    norm_mean: tuple = (0.5, 0.5, 0.5)
    norm_std: tuple = (0.25, 0.25, 0.25)
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        self.norm_mean = tuple(float(v) for v in self.norm_mean)
        self.norm_std = tuple(float(v) for v in self.norm_std)
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ConfigurationError("channels and strides must be non-empty and of equal length")
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")
        if self.classifier not in ("gru", "cascaded_fc"):
            raise ConfigurationError(f"unknown classifier variant {self.classifier!r}")
        if not self.policy_sigma > 0:
            raise ConfigurationError("policy_sigma must be positive")
        if self.patch_size > self.image_size:
            raise ConfigurationError("patch_size must not exceed image_size")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def patch_spec(self) -> PatchSpec:
        return PatchSpec(self.patch_size, self.patch_size)

    @property
    def feature_side(self) -> int:
        side = self.patch_size
        for s in self.strides:
            side = (side + 2 - 3) // s + 1
        return side

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Encoder(Module):
    """Stack of 3x3 conv + ReLU stages; returns the last feature map and its pooled vector."""

    def __init__(self, in_channels: int, channels, strides, rng):
        layers, prev = [], in_channels
        for ch, s in zip(channels, strides):
            layers.append(Conv2d(prev, ch, 3, stride=s, padding=1, rng=rng))
            prev = ch
        self.layers = layers

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        for layer in self.layers:
            x = relu(layer(x))
        return x, global_avg_pool(x)


class GruClassifier(Module):
    def __init__(self, feature_dim, hidden, num_classes, rng):
        self.cell = GRUCell(feature_dim, hidden, rng=rng)
        self.head = Linear(hidden, num_classes, rng=rng)

    def initial_state(self, batch: int):
        return self.cell.initial_state(batch)

    def __call__(self, ebar: Tensor, state, t: int):
        h = self.cell(ebar, state)
        return self.head(h), h


class CascadedFcClassifier(Module):
    """Step t applies a (t*F) x C linear map to the concatenated pooled features of steps 1..t."""

    def __init__(self, feature_dim, num_classes, T, rng):
        self.heads = [Linear(t * feature_dim, num_classes, rng=rng) for t in range(1, T + 1)]
        self.feature_dim = feature_dim

    def initial_state(self, batch: int):
        return []

    def __call__(self, ebar: Tensor, state, t: int):
        feats = list(state) + [ebar]
        x = feats[0] if len(feats) == 1 else concat(feats, axis=1)
        if x.shape[1] != t * self.feature_dim:
            raise ConfigurationError(f"cascaded classifier at step {t} expects {t * self.feature_dim} features")
        return self.heads[t - 1](x), feats


class PolicyNet(Module):
    """1x1 channel reducer -> GRU -> (sigmoid mean head, value head); isotropic Gaussian actions.

    The stddev is fixed unless ``learnable_sigma`` is set, in which case its log
    becomes a parameter (the entropy bonus then has a gradient).
    """

    def __init__(self, feature_dim, reduced, side, hidden, sigma, rng, learnable_sigma: bool = False):
        self.reduce = Conv2d(feature_dim, reduced, 1, rng=rng)
        self.cell = GRUCell(reduced * side * side, hidden, rng=rng)
        self.mean_head = Linear(hidden, 2, rng=rng)
        self.value_head = Linear(hidden, 1, rng=rng)
        self.learnable_sigma = bool(learnable_sigma)
        if self.learnable_sigma:
            self.log_sigma = Parameter(np.full(1, math.log(sigma), dtype=np.float32))
        else:
            self._sigma = float(sigma)

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma.data[0])) if self.learnable_sigma else self._sigma

    def initial_state(self, batch: int):
        return self.cell.initial_state(batch)

    def __call__(self, e: Tensor, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (mean in (0,1)^2, value, new hidden) for feature maps ``e``."""
        r = relu(self.reduce(e))
        h = self.cell(reshape(r, (r.shape[0], -1)), h)
        return sigmoid(self.mean_head(h)), reshape(self.value_head(h), (-1,)), h

    def log_prob(self, actions, mean: Tensor) -> Tensor:
        """Sum over both coordinates of the Gaussian log-density (unclipped actions)."""
        diff = mean - Tensor(np.asarray(actions, dtype=mean.dtype))
        sq = (diff * diff).sum(axis=1)
        if self.learnable_sigma:
            return sq * exp(self.log_sigma * -2.0) * -0.5 - self.log_sigma * 2.0 - 2 * LOG_SQRT_2PI
        const = 2 * (math.log(self.sigma) + LOG_SQRT_2PI)
        return sq * (-0.5 / self.sigma ** 2) - const

    def entropy(self):
        """Entropy of the 2-D isotropic Gaussian; a plain float while sigma is fixed."""
        if self.learnable_sigma:
            return (self.log_sigma * 2.0 + 2 * (0.5 + LOG_SQRT_2PI)).sum()
        return 2 * (0.5 + LOG_SQRT_2PI + math.log(self.sigma))


@dataclass
class StepOutput:
    t: int
    features: Tensor  # e_t
    pooled: Tensor  # ebar_t
    logits: Tensor
    cls_state: object

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits.data.astype(np.float64))


class GfModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.global_encoder = Encoder(config.in_channels, config.channels, config.strides, rng)
        self.local_encoder = Encoder(config.in_channels, config.channels, config.strides, rng)
        F, C = config.feature_dim, config.num_classes
        if config.classifier == "gru":
            self.classifier = GruClassifier(F, config.classifier_hidden, C, rng)
        else:
            self.classifier = CascadedFcClassifier(F, C, config.T, rng)
        self.aux_heads = [Linear(F, C, rng=rng) for _ in range(config.T)]
        self.policy = PolicyNet(F, config.policy_channels, config.feature_side, config.policy_hidden,
                                config.policy_sigma, rng, config.policy_learnable_sigma)
        self._mean = np.asarray(config.norm_mean, dtype=np.float32)
        self._std = np.asarray(config.norm_std, dtype=np.float32)

    @property
    def T(self) -> int:
        return self.config.T

    @property
    def patch_spec(self) -> PatchSpec:
        return self.config.patch_spec

    # -- inputs ---------------------------------------------------------------
    def glance_input(self, images: np.ndarray) -> np.ndarray:
        """(N, C, H, W) raw pixels -> normalized glance batch."""
        return normalize(resize_glance(images, self.patch_spec), self._mean, self._std)

    def patch_input(self, images: np.ndarray, centers: np.ndarray) -> np.ndarray:
        return normalize(crop_batch(images, centers, self.patch_spec), self._mean, self._std)

    # -- components -----------------------------------------------------------
    def encode(self, x, which: str) -> tuple[Tensor, Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        p = self.config.patch_size
        if x.ndim != 4 or x.shape[-2:] != (p, p):
            raise ConfigurationError(f"encoder input must be (N, C, {p}, {p}), got {x.shape}")
        if which == "global":
            return self.global_encoder(x)
        if which == "local":
            return self.local_encoder(x)
        raise ConfigurationError(f"unknown encoder {which!r}")

    def classify_step(self, pooled: Tensor, state, t: int):
        """(logits, new state) for step ``t`` (1-based); state is None at t = 1."""
        if not 1 <= t <= self.T:
            raise UsageError(f"classify_step at t={t} outside [1, {self.T}]")
        if state is None:
            state = self.classifier.initial_state(pooled.shape[0])
        return self.classifier(pooled, state, t)

    def step(self, x, t: int, cls_state) -> StepOutput:
        """Encode one input (glance at t = 1, patch afterwards) and advance the classifier."""
        e, pooled = self.encode(x, "global" if t == 1 else "local")
        logits, cls_state = self.classify_step(pooled, cls_state, t)
        return StepOutput(t, e, pooled, logits, cls_state)

    def propose_step(self, e: Tensor, policy_state, mode: str = "deterministic", rng=None):
        """Next patch centre from the policy.

        Returns (location clipped to [0,1]^2, raw action, log-prob of the raw
        action, value, new policy state, mean).
        """
        if policy_state is None:
            policy_state = self.policy.initial_state(e.shape[0])
        mean, value, h = self.policy(e, policy_state)
        if mode == "deterministic":
            action = mean.data.astype(np.float64)
        elif mode == "stochastic":
            if rng is None:
                raise UsageError("stochastic proposals need an rng")
            action = mean.data.astype(np.float64) + self.policy.sigma * rng.standard_normal(mean.shape)
        else:
            raise ConfigurationError(f"unknown proposal mode {mode!r}")
        logp = self.policy.log_prob(action, mean)
        return np.clip(action, 0.0, 1.0), action, logp, value, h, mean

    def component(self, name: str) -> Module:
        return {
            "global_encoder": self.global_encoder,
            "local_encoder": self.local_encoder,
            "classifier": self.classifier,
            "policy": self.policy,
        }[name]

    def aux_parameters(self) -> list:
        return [p for head in self.aux_heads for p in head.parameters()]


# -- hashing and checkpoints ------------------------------------------------------

def param_hash(module: Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(model: GfModel, stage: str = "", rng_state: dict | None = None, extra: dict | None = None) -> bytes:
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", CKPT_VERSION)
    for blob in (model.config.to_text().encode(), _canonical({"stage": stage, "rng": rng_state, **(extra or {})})):
        out += struct.pack("<I", len(blob)) + blob
    params = list(model.named_parameters())
    out += struct.pack("<I", len(params))
    for name, p in params:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
        out += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    out += hashlib.sha256(bytes(out)).digest()
    return bytes(out)


def save_checkpoint(model: GfModel, path, stage: str = "", rng_state: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, stage, rng_state, extra))
    tmp.replace(path)
    return path


@dataclass
class Checkpoint:
    model: GfModel
    stage: str
    meta: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointMagicError(f"bad magic {raw[:4]!r} in {path}")
    if len(raw) < 8 + 32:
        raise CheckpointHashError("checkpoint too short")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointHashError(f"checksum mismatch in {path}")
    off = 8
    blobs = []
    for _ in range(2):
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        blobs.append(json.loads(body[off:off + n]))
        off += n
    config, meta = ModelConfig.from_dict(blobs[0]), blobs[1]
    model = GfModel(config)
    table = dict(model.named_parameters())
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    if count != len(table):
        raise CheckpointHashError(f"parameter count {count} does not match config ({len(table)})")
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        if name not in table or table[name].shape != tuple(shape):
            raise CheckpointHashError(f"unexpected parameter {name} {shape}")
        table[name].data = arr.astype(np.float32)
    return Checkpoint(model, meta.get("stage", ""), meta)
