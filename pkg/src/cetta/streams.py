"""Synthetic shifted test streams.

Two generators at desk scale: well-separated Gaussian blobs (linear
structure) and concentric rings (nonlinear boundary). A corruption with
a severity level 1-5 is applied on top, mimicking the structure of
corruption benchmarks: higher severity, stronger shift. Class geometry
is a fixed function of (generator, num_classes, input_dim) so streams
and pretraining data share the same task regardless of their seeds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .samples import Sample

STREAM_MAGIC = b"CEMS"
STREAM_VERSION = 1

# class-mean radius and within-class noise for the blob task
BLOB_RADIUS = 2.2
BLOB_NOISE = 0.5
# ring spacing, radial noise and number of informative dims for rings
RING_GAP = 1.0
RING_NOISE = 0.18
RING_AMBIENT = 0.3

_GEOMETRY_ENTROPY = 0x5EEDF00D

GAUSSIAN_SIGMA = {1: 0.2, 2: 0.4, 3: 0.6, 4: 0.9, 5: 1.3}
DROPOUT_RATE = {1: 0.05, 2: 0.1, 3: 0.2, 4: 0.3, 5: 0.4}
# contrast-style distortion: dynamic range shrinks, brightness shifts
AFFINE_SCALE = {1: 0.85, 2: 0.7, 3: 0.55, 4: 0.4, 5: 0.3}
AFFINE_SHIFT = {1: 0.1, 2: 0.25, 3: 0.5, 4: 0.75, 5: 1.0}


@dataclass(frozen=True)
class AdditiveGaussian:
    sigma: float


@dataclass(frozen=True)
class FeatureDropout:
    rate: float


@dataclass(frozen=True)
class AffineDistort:
    scale: float
    shift: float


Corruption = AdditiveGaussian | FeatureDropout | AffineDistort


def corruption_for(kind: str | None, severity: int) -> Corruption | None:
    """Resolve a corruption name and severity level to its magnitude."""
    if kind is None or kind == "none":
        return None
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    if kind == "gaussian":
        return AdditiveGaussian(GAUSSIAN_SIGMA[severity])
    if kind == "dropout":
        return FeatureDropout(DROPOUT_RATE[severity])
    if kind == "affine":
        return AffineDistort(AFFINE_SCALE[severity], AFFINE_SHIFT[severity])
    raise ValueError(f"unknown corruption kind {kind!r}")


@dataclass(frozen=True)
class StreamSpec:
    generator: str = "blobs"
    num_classes: int = 10
    input_dim: int = 512
    num_samples: int = 20_000
    corruption: str | None = None
    severity: int = 3
    mixed: tuple | None = None  # sequence of (kind, severity) segments
    seed: int = 0

    def resolve_corruptions(self) -> list[Corruption | None]:
        if self.mixed is not None:
            return [corruption_for(k, s) for k, s in self.mixed]
        return [corruption_for(self.corruption, self.severity)]


def _geometry_rng(generator: str, num_classes: int, input_dim: int) -> np.random.Generator:
    tag = sum(ord(c) for c in generator)
    seq = np.random.SeedSequence([_GEOMETRY_ENTROPY, tag, num_classes, input_dim])
    return np.random.default_rng(seq)


def blob_means(num_classes: int, input_dim: int) -> np.ndarray:
    rng = _geometry_rng("blobs", num_classes, input_dim)
    dirs = rng.standard_normal((num_classes, input_dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return (BLOB_RADIUS * dirs).astype(np.float32)


def sample_clean(generator: str, num_classes: int, input_dim: int,
                 labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw clean feature vectors for the given labels."""
    n = len(labels)
    if generator == "blobs":
        means = blob_means(num_classes, input_dim)
        return means[labels] + BLOB_NOISE * rng.standard_normal((n, input_dim)).astype(np.float32)
    if generator == "rings":
        radii = RING_GAP * (labels + 1) + RING_NOISE * rng.standard_normal(n)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        x = np.zeros((n, input_dim), dtype=np.float64)
        x[:, 0] = radii * np.cos(theta)
        x[:, 1] = radii * np.sin(theta)
        if input_dim > 2:
            x[:, 2:] = RING_AMBIENT * rng.standard_normal((n, input_dim - 2))
        return x.astype(np.float32)
    raise ValueError(f"unknown generator {generator!r}")


def apply_corruption(x: np.ndarray, corruption: Corruption | None,
                     rng: np.random.Generator) -> np.ndarray:
    if corruption is None:
        return x
    if isinstance(corruption, AdditiveGaussian):
        if corruption.sigma == 0:
            return x
        return x + corruption.sigma * rng.standard_normal(x.shape).astype(np.float32)
    if isinstance(corruption, FeatureDropout):
        keep = rng.random(x.shape) >= corruption.rate
        return x * keep.astype(np.float32)
    if isinstance(corruption, AffineDistort):
        return np.float32(corruption.scale) * x + np.float32(corruption.shift)
    raise ValueError(f"unknown corruption {corruption!r}")


def gen_stream(spec: StreamSpec) -> list[Sample]:
    """Deterministic per seed. Labels ride along for metrics only."""
    rng = np.random.default_rng(spec.seed)
    labels = rng.integers(0, spec.num_classes, size=spec.num_samples)
    x = sample_clean(spec.generator, spec.num_classes, spec.input_dim, labels, rng)

    corruptions = spec.resolve_corruptions()
    bounds = np.linspace(0, spec.num_samples, len(corruptions) + 1).astype(int)
    for corruption, lo, hi in zip(corruptions, bounds[:-1], bounds[1:]):
        x[lo:hi] = apply_corruption(x[lo:hi], corruption, rng)

    return [Sample(sample_id=i, features=x[i], label=int(labels[i]))
            for i in range(spec.num_samples)]


# ---------------------------------------------------------------------------
# Stream files


def write_stream(path, samples: list[Sample], num_classes: int, input_dim: int) -> None:
    with open(path, "wb") as fh:
        fh.write(STREAM_MAGIC + bytes([STREAM_VERSION]))
        fh.write(struct.pack("<III", num_classes, input_dim, len(samples)))
        for s in samples:
            fh.write(struct.pack("<QI", s.sample_id, s.label if s.label is not None else 0))
            fh.write(np.ascontiguousarray(s.features, dtype="<f4").tobytes())


def read_stream(path) -> tuple[list[Sample], int, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != STREAM_MAGIC:
        raise ValueError(f"bad stream magic {data[:4]!r}")
    if data[4] != STREAM_VERSION:
        raise ValueError(f"unsupported stream version {data[4]}")
    num_classes, input_dim, count = struct.unpack_from("<III", data, 5)
    off = 17
    rec = 12 + 4 * input_dim
    if len(data) != off + rec * count:
        raise ValueError("stream file length does not match its header")
    samples = []
    for _ in range(count):
        sid, label = struct.unpack_from("<QI", data, off)
        feats = np.frombuffer(data, dtype="<f4", count=input_dim, offset=off + 12).copy()
        samples.append(Sample(sample_id=sid, features=feats, label=label))
        off += rec
    return samples, num_classes, input_dim
