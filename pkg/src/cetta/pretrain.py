"""Supervised pretraining of the foundation and edge models on clean data.

Plain SGD with momentum on the softmax cross-entropy, all parameters
trainable, batch statistics mode so the running averages end up matching
the clean training distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, streams


class PretrainError(RuntimeError):
    """Training failed to reach the required held-out accuracy."""


@dataclass
class PretrainResult:
    params: nn.ModelParams
    train_accuracy: float
    holdout_accuracy: float
    epochs: int


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start:start + batch_size]


def evaluate(params: nn.ModelParams, spec: nn.ModelSpec,
             x: np.ndarray, y: np.ndarray) -> float:
    logits, _ = nn.forward(params, spec, x, nn.NormMode.RUNNING)
    return float(np.mean(logits.argmax(axis=1) == y))


def pretrain(spec: nn.ModelSpec, x: np.ndarray, y: np.ndarray,
             epochs: int = 8, lr: float = 0.05, momentum: float = 0.9,
             batch_size: int = 128, seed: int = 0,
             holdout_frac: float = 0.1, min_accuracy: float = 0.8) -> PretrainResult:
    """Train from scratch; aborts if held-out accuracy ends below
    `min_accuracy`."""
    rng = np.random.default_rng(seed)
    params = nn.init_params(spec, rng)

    n_hold = max(1, int(len(x) * holdout_frac))
    x_hold, y_hold = x[:n_hold], y[:n_hold]
    x_tr, y_tr = x[n_hold:], y[n_hold:]

    opt = nn.make_optimizer(params, nn.ParamMask.ALL_PARAMS, lr, momentum)
    for _ in range(epochs):
        for idx in _batches(len(x_tr), batch_size, rng):
            xb, yb = x_tr[idx], y_tr[idx]
            logits, cache = nn.forward(params, spec, xb, nn.NormMode.BATCH)
            probs, _ = nn.softmax_entropy(logits)
            d_logits = probs.astype(np.float64)
            d_logits[np.arange(len(yb)), yb] -= 1.0
            d_logits /= len(yb)
            grads = nn.backward(params, spec, cache, d_logits, nn.ParamMask.ALL_PARAMS)
            nn.sgd_step(params, grads, opt, nn.ParamMask.ALL_PARAMS)

    train_acc = evaluate(params, spec, x_tr, y_tr) if epochs > 0 else 1.0 / spec.num_classes
    hold_acc = evaluate(params, spec, x_hold, y_hold)
    if epochs > 0 and hold_acc < min_accuracy:
        raise PretrainError(
            f"held-out accuracy {hold_acc:.3f} below {min_accuracy:.2f} "
            f"(train {train_acc:.3f}, spec {spec})")
    return PretrainResult(params=params, train_accuracy=train_acc,
                          holdout_accuracy=hold_acc, epochs=epochs)


def clean_training_set(generator: str, num_classes: int, input_dim: int,
                       n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    x = streams.sample_clean(generator, num_classes, input_dim, labels, rng)
    return x, labels


def pretrain_pair(foundation_spec: nn.ModelSpec, edge_spec: nn.ModelSpec,
                  generator: str = "blobs", n_train: int = 8000,
                  foundation_epochs: int = 14, edge_epochs: int = 8,
                  lr: float = 0.05, seed: int = 0
                  ) -> tuple[PretrainResult, PretrainResult]:
    """Train both models on the same clean draw (disjoint from any stream
    seed by construction: pretraining seeds are offset). The wider
    foundation model needs more epochs to overtake the edge model on
    held-out data."""
    x, y = clean_training_set(generator, foundation_spec.num_classes,
                              foundation_spec.input_dim, n_train,
                              seed=seed + 7_000_000)
    foundation = pretrain(foundation_spec, x, y, epochs=foundation_epochs,
                          lr=lr, seed=seed)
    edge = pretrain(edge_spec, x, y, epochs=edge_epochs, lr=lr, seed=seed + 1)
    return foundation, edge
