"""Cloud-side adaptation engine.

Each step takes one uploaded batch: the foundation model first adapts
itself by weighted entropy minimization, then teaches the edge model on
the uploaded samples plus a random draw from a FIFO replay buffer. The
distillation loss combines a KL term against the teacher distribution,
cross-entropy on the teacher's argmax pseudo labels, and the student's
own entropy, each sample weighted by exp(E_max - teacher_entropy) so
confident samples dominate. Only normalization scale/shift parameters
move, and only those are emitted for distribution to the edges.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nn
from .samples import Sample, stack_features


class AdaptationError(RuntimeError):
    """A step could not be taken; carries the offending sample ids."""

    def __init__(self, message: str, sample_ids=()):
        super().__init__(message)
        self.sample_ids = list(sample_ids)


@dataclass(frozen=True)
class AdaptConfig:
    learning_rate: float = 0.00025
    momentum: float = 0.9
    alpha: float = 3.0
    beta: float = 3.0
    upload_batch: int = 32
    replay_draw: int = 96
    buffer_capacity: int = 10_000
    e_max_ref: float | None = None  # defaults to 0.4 * ln(num_classes)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha/beta must be >= 0, got {self.alpha}, {self.beta}")
        if self.upload_batch < 1:
            raise ValueError(f"upload_batch must be >= 1, got {self.upload_batch}")
        if self.replay_draw < 0:
            raise ValueError(f"replay_draw must be >= 0, got {self.replay_draw}")
        if self.buffer_capacity < 0:
            raise ValueError(f"buffer_capacity must be >= 0, got {self.buffer_capacity}")

    def resolve_e_max_ref(self, num_classes: int) -> float:
        if self.e_max_ref is not None:
            return self.e_max_ref
        return 0.4 * math.log(num_classes)


class ReplayBuffer:
    """Bounded FIFO store of uploaded samples."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self._store: deque[Sample] = deque(maxlen=capacity if capacity > 0 else 0)

    def __len__(self) -> int:
        return len(self._store)

    def ingest(self, batch) -> "ReplayBuffer":
        """Append in arrival order; the oldest entries fall out first."""
        if self.capacity > 0:
            self._store.extend(batch)
        return self

    def contents(self) -> list[Sample]:
        return list(self._store)

    def draw(self, k: int, rng: np.random.Generator) -> list[Sample]:
        """Uniform draw of k samples; with replacement only when the
        buffer holds fewer than k. Empty buffer yields an empty draw."""
        n = len(self._store)
        if n == 0 or k == 0:
            return []
        replace = n < k
        idx = rng.choice(n, size=k, replace=replace)
        store = self._store
        return [store[int(i)] for i in idx]


def sample_weight(entropy, e_max_ref: float):
    """exp(E_max - entropy): emphasis on confident samples. Constant in
    every gradient; nothing backpropagates through it."""
    return np.exp(e_max_ref - np.asarray(entropy, dtype=np.float64))


def entropy_loss_grad(probs: np.ndarray, entropy: np.ndarray) -> np.ndarray:
    """d(entropy_i)/d(logit_ij) = -p_ij (ln p_ij + entropy_i)."""
    p = probs.astype(np.float64)
    logp = np.log(np.clip(p, 1e-300, None))
    return -p * (logp + entropy[:, None])


def weighted_entropy_loss(params: nn.ModelParams, spec: nn.ModelSpec,
                          features: np.ndarray, weights: np.ndarray) -> float:
    """Mean of w_i * entropy_i under a batch-statistics forward pass.

    Evaluates on a copy so running statistics are left alone; used for
    loss reporting and descent checks.
    """
    logits, _ = nn.forward(params.copy(), spec, features, nn.NormMode.BATCH)
    _, ent = nn.softmax_entropy(logits)
    return float(np.mean(weights * ent))


def kl_divergence(p_probs: np.ndarray, q_probs: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) in nats, computed in float64."""
    p = np.asarray(p_probs, dtype=np.float64)
    q = np.asarray(q_probs, dtype=np.float64)
    ratio = np.log(np.clip(p, 1e-300, None)) - np.log(np.clip(q, 1e-300, None))
    return np.maximum((p * ratio).sum(axis=1), 0.0)


def pseudo_labels(teacher_probs: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest index."""
    return np.argmax(teacher_probs, axis=1)


@dataclass
class StepResult:
    version: int
    foundation_loss: float
    edge_loss: float
    batch_size: int
    affine_set: nn.AffineParamSet


class AdaptationEngine:
    """Owns the foundation and edge models, the replay buffer and both
    optimizers. Calls must be serialized by the owner."""

    def __init__(self, foundation_spec: nn.ModelSpec, foundation_params: nn.ModelParams,
                 edge_spec: nn.ModelSpec, edge_params: nn.ModelParams,
                 config: AdaptConfig, seed: int = 0):
        if foundation_spec.num_classes != edge_spec.num_classes:
            raise nn.ConfigError("foundation and edge must share num_classes")
        if foundation_spec.input_dim != edge_spec.input_dim:
            raise nn.ConfigError("foundation and edge must share input_dim")
        self.foundation_spec = foundation_spec
        self.foundation = foundation_params
        self.edge_spec = edge_spec
        self.edge = edge_params
        self.config = config
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.rng = np.random.default_rng(seed)
        self.e_max_ref = config.resolve_e_max_ref(edge_spec.num_classes)
        self.version = 0
        mask = nn.ParamMask.AFFINE_ONLY
        self._f_opt = nn.make_optimizer(foundation_params, mask,
                                        config.learning_rate, config.momentum)
        self._e_opt = nn.make_optimizer(edge_params, mask,
                                        config.learning_rate, config.momentum)

    # -- individual phases --------------------------------------------------

    def ingest(self, batch) -> None:
        self.buffer.ingest(batch)

    def adapt_foundation(self, batch) -> float:
        """One affine-only SGD step minimizing mean(H_i * entropy_i)."""
        feats = stack_features(batch)
        logits, cache = nn.forward(self.foundation, self.foundation_spec,
                                   feats, nn.NormMode.BATCH)
        probs, ent = nn.softmax_entropy(logits)
        weights = sample_weight(ent, self.e_max_ref)
        loss = float(np.mean(weights * ent))
        if not math.isfinite(loss):
            raise AdaptationError("non-finite foundation loss",
                                  sample_ids=[s.sample_id for s in batch])
        n = feats.shape[0]
        d_logits = (weights[:, None] * entropy_loss_grad(probs, ent)) / n
        grads = nn.backward(self.foundation, self.foundation_spec, cache,
                            d_logits, nn.ParamMask.AFFINE_ONLY)
        nn.sgd_step(self.foundation, grads, self._f_opt, nn.ParamMask.AFFINE_ONLY)
        return loss

    def teacher_outputs(self, features: np.ndarray):
        """Teacher probabilities and entropies without touching the
        foundation model (running-statistics forward is pure)."""
        logits, _ = nn.forward(self.foundation, self.foundation_spec,
                               features, nn.NormMode.RUNNING)
        return nn.softmax_entropy(logits)

    def adapt_edge(self, uploaded) -> StepResult:
        """Distill into the edge model on uploaded + replayed samples and
        emit the next versioned affine parameter set."""
        cfg = self.config
        replay = self.buffer.draw(cfg.replay_draw, self.rng)
        batch = list(uploaded) + replay
        feats = stack_features(batch)
        n = feats.shape[0]

        t_probs, t_ent = self.teacher_outputs(feats)
        weights = sample_weight(t_ent, self.e_max_ref)
        labels = pseudo_labels(t_probs)

        s_logits, cache = nn.forward(self.edge, self.edge_spec, feats,
                                     nn.NormMode.BATCH)
        s_probs, s_ent = nn.softmax_entropy(s_logits)
        sp = s_probs.astype(np.float64)
        tp = t_probs.astype(np.float64)
        s_logp = np.log(np.clip(sp, 1e-300, None))
        t_logp = np.log(np.clip(tp, 1e-300, None))

        kl = np.maximum((sp * (s_logp - t_logp)).sum(axis=1), 0.0)
        ce = -s_logp[np.arange(n), labels]
        per_sample = cfg.alpha * kl + cfg.beta * ce + s_ent
        loss = float(np.mean(weights * per_sample))
        if not math.isfinite(loss):
            raise AdaptationError("non-finite edge loss",
                                  sample_ids=[s.sample_id for s in batch])

        # d/dz of each term, rows scaled by H_i / n afterwards
        d_kl = sp * ((s_logp - t_logp) - kl[:, None])
        onehot = np.zeros_like(sp)
        onehot[np.arange(n), labels] = 1.0
        d_ce = sp - onehot
        d_ent = entropy_loss_grad(s_probs, s_ent)
        d_logits = (weights[:, None] / n) * (cfg.alpha * d_kl + cfg.beta * d_ce + d_ent)

        grads = nn.backward(self.edge, self.edge_spec, cache,
                            d_logits, nn.ParamMask.AFFINE_ONLY)
        nn.sgd_step(self.edge, grads, self._e_opt, nn.ParamMask.AFFINE_ONLY)

        self.version += 1
        affine = nn.extract_affine(self.edge, version=self.version)
        return StepResult(version=self.version, foundation_loss=float("nan"),
                          edge_loss=loss, batch_size=n, affine_set=affine)

    # -- one full cloud step ------------------------------------------------

    def step(self, uploaded) -> StepResult:
        """ingest -> adapt_foundation -> adapt_edge for one uploaded batch."""
        self.ingest(uploaded)
        f_loss = self.adapt_foundation(uploaded)
        result = self.adapt_edge(uploaded)
        result.foundation_loss = f_loss
        return result
