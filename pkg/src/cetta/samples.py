"""The unit of data moving through the system."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Sample:
    """A feature vector with an identifier.

    The label, when present, exists only for metric computation; it is
    never shown to a model and never crosses the wire.
    """

    sample_id: int
    features: np.ndarray
    label: int | None = None


def stack_features(samples) -> np.ndarray:
    """(len(samples), dim) float32 matrix of the samples' features."""
    return np.stack([s.features for s in samples]).astype(np.float32, copy=False)
