"""Edge-side sample selection.

A sample is uploaded to the cloud only if its prediction entropy falls
strictly inside (E_min, E_max^t). E_min is static; E_max^t shrinks with
the cumulative average entropy of everything inferred so far, so the
filter tightens as adaptation makes predictions more confident. An
optional redundancy filter drops samples whose probability vector is too
close to a moving average of recently accepted ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class FiltrationConfigError(ValueError):
    """Invalid filtration configuration."""


@dataclass(frozen=True)
class FiltrationConfig:
    num_classes: int
    e_max_factor: float = 0.4
    e_min_factor: float = 0.02
    lam: float = 1.0
    dynamic: bool = True
    redundancy_enabled: bool = False
    redundancy_eps: float = 0.05
    redundancy_decay: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise FiltrationConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        # e_min_factor = 0 disables the low filter; e_max_factor = inf opens
        # the high filter (the upload-all baseline).
        if not 0 <= self.e_min_factor < self.e_max_factor:
            raise FiltrationConfigError(
                f"need 0 <= e_min_factor < e_max_factor, got "
                f"{self.e_min_factor} vs {self.e_max_factor}")
        if math.isfinite(self.e_max_factor) and not self.e_max_factor < 1:
            raise FiltrationConfigError(
                f"e_max_factor must be < 1 (or inf to disable), got {self.e_max_factor}")
        if not self.lam > 0:
            raise FiltrationConfigError(f"lambda must be > 0, got {self.lam}")
        if not 0 < self.redundancy_decay < 1:
            raise FiltrationConfigError(
                f"redundancy_decay must be in (0,1), got {self.redundancy_decay}")

    @property
    def max_entropy(self) -> float:
        return math.log(self.num_classes)


@dataclass
class FiltrationState:
    """Mutable per-stream state: thresholds plus entropy bookkeeping."""

    config: FiltrationConfig
    e_max_t: float
    e_min: float
    seen_count: int = 0
    entropy_sum: float = 0.0          # float64 accumulator
    e_avg_prev: float | None = None
    redundancy_avg: np.ndarray | None = None


def init_state(config: FiltrationConfig) -> FiltrationState:
    ln_c = config.max_entropy
    return FiltrationState(
        config=config,
        e_max_t=config.e_max_factor * ln_c,
        e_min=config.e_min_factor * ln_c,
    )


def score(entropy: float, state: FiltrationState) -> bool:
    """Upload decision: strictly below E_max^t and strictly above E_min."""
    return (entropy < state.e_max_t) and (entropy > state.e_min)


def score_batch(entropies: np.ndarray, state: FiltrationState) -> np.ndarray:
    """Vectorized `score` over a batch; boolean mask."""
    entropies = np.asarray(entropies)
    return (entropies < state.e_max_t) & (entropies > state.e_min)


def update_threshold(state: FiltrationState, batch_entropies) -> FiltrationState:
    """Fold a finished inference batch into the cumulative entropy average.

    All inferred samples count, uploaded or not. The first batch only
    seeds the previous average; afterwards E_max^t is rescaled by
    lam * (E_avg^t / E_avg^{t-1}) when the dynamic threshold is on.
    """
    batch_entropies = np.asarray(batch_entropies, dtype=np.float64)
    if batch_entropies.size == 0:
        raise ValueError("batch_entropies must be nonempty")
    state.entropy_sum += float(batch_entropies.sum())
    state.seen_count += int(batch_entropies.size)
    e_avg = state.entropy_sum / state.seen_count
    # a zero previous average (all predictions exactly one-hot so far)
    # leaves the ratio undefined; keep the threshold as is
    if state.e_avg_prev is not None and state.config.dynamic and state.e_avg_prev > 0:
        state.e_max_t = state.config.lam * state.e_max_t * (e_avg / state.e_avg_prev)
    state.e_avg_prev = e_avg
    return state


def redundancy_pass(probs: np.ndarray, state: FiltrationState) -> bool:
    """True if `probs` is far enough from the moving average of accepted ones.

    Passing samples fold into the moving average; rejected ones do not.
    """
    probs = np.asarray(probs, dtype=np.float64)
    cfg = state.config
    if state.redundancy_avg is None:
        state.redundancy_avg = probs.copy()
        return True
    m = state.redundancy_avg
    denom = float(np.linalg.norm(probs) * np.linalg.norm(m))
    cosine = float(probs @ m) / denom if denom > 0 else 0.0
    if cosine < 1.0 - cfg.redundancy_eps:
        state.redundancy_avg = (1.0 - cfg.redundancy_decay) * m + cfg.redundancy_decay * probs
        return True
    return False
