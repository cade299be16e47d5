"""Dense neural-network engine used by both the edge and the cloud.

The model is a multilayer perceptron of [Linear -> BatchNorm -> ReLU]
hidden blocks followed by a linear classifier head. Normalization runs
in one of two modes: batch statistics (used during adaptation, updates
the running averages) or running statistics (pure, used for deployment
inference). Backpropagation is exact, including the dependence of the
normalized output on the batch statistics, and can be restricted to the
per-layer affine (scale/shift) parameters.

All parameters are float32 by default; the functions operate in the
dtype of the parameter arrays, so float64 models can be built for
gradient verification.

Forward passes in RUNNING mode and softmax_entropy are pure and safe to
call concurrently on shared params; anything that mutates params,
optimizer state, or running statistics needs exclusive access to that
model instance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32

CHECKPOINT_MAGIC = b"CEMN"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid model configuration or shape mismatch between inputs."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during computation."""


class CompatibilityError(ValueError):
    """Parameter payload does not match the model it is applied to."""


class CheckpointError(ValueError):
    """Malformed checkpoint blob."""


class NormMode:
    """Normalization statistics source for a forward pass."""

    BATCH = "batch"      # normalize with batch stats, update running stats
    RUNNING = "running"  # normalize with running stats, never mutate


class ParamMask:
    """Which parameters gradients and optimizer updates touch."""

    AFFINE_ONLY = "affine"
    ALL_PARAMS = "all"


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    norm_eps: float = 1e-5
    norm_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if any(d < 1 for d in self.hidden_dims):
            raise ConfigError(f"hidden dims must be >= 1, got {self.hidden_dims}")
        if not self.norm_eps > 0:
            raise ConfigError(f"norm_eps must be > 0, got {self.norm_eps}")
        if not 0 < self.norm_momentum < 1:
            raise ConfigError(f"norm_momentum must be in (0,1), got {self.norm_momentum}")


@dataclass
class BlockParams:
    """One hidden block: linear weights plus its normalization layer."""

    w: np.ndarray         # (in, out)
    b: np.ndarray         # (out,)
    gamma: np.ndarray     # (out,) normalization scale
    beta: np.ndarray      # (out,) normalization shift
    run_mean: np.ndarray  # (out,)
    run_var: np.ndarray   # (out,)


@dataclass
class ModelParams:
    blocks: list[BlockParams]
    head_w: np.ndarray
    head_b: np.ndarray

    def named_arrays(self):
        """All arrays, including running statistics, in declaration order."""
        for i, blk in enumerate(self.blocks):
            yield f"block{i}.w", blk.w
            yield f"block{i}.b", blk.b
            yield f"block{i}.gamma", blk.gamma
            yield f"block{i}.beta", blk.beta
            yield f"block{i}.run_mean", blk.run_mean
            yield f"block{i}.run_var", blk.run_var
        yield "head.w", self.head_w
        yield "head.b", self.head_b

    def named_trainable(self, mask: str):
        """Trainable arrays selected by `mask` (running stats never train)."""
        for i, blk in enumerate(self.blocks):
            if mask == ParamMask.ALL_PARAMS:
                yield f"block{i}.w", blk.w
                yield f"block{i}.b", blk.b
            yield f"block{i}.gamma", blk.gamma
            yield f"block{i}.beta", blk.beta
        if mask == ParamMask.ALL_PARAMS:
            yield "head.w", self.head_w
            yield "head.b", self.head_b

    def copy(self) -> "ModelParams":
        return ModelParams(
            blocks=[
                BlockParams(
                    blk.w.copy(), blk.b.copy(), blk.gamma.copy(),
                    blk.beta.copy(), blk.run_mean.copy(), blk.run_var.copy(),
                )
                for blk in self.blocks
            ],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        for blk in out.blocks:
            blk.w = blk.w.astype(dtype)
            blk.b = blk.b.astype(dtype)
            blk.gamma = blk.gamma.astype(dtype)
            blk.beta = blk.beta.astype(dtype)
            blk.run_mean = blk.run_mean.astype(dtype)
            blk.run_var = blk.run_var.astype(dtype)
        out.head_w = out.head_w.astype(dtype)
        out.head_b = out.head_b.astype(dtype)
        return out

    @property
    def dtype(self):
        return self.head_w.dtype


def init_params(spec: ModelSpec, rng: np.random.Generator, dtype=DTYPE) -> ModelParams:
    """Glorot-uniform weights, zero biases, identity normalization."""
    blocks = []
    fan_in = spec.input_dim
    for width in spec.hidden_dims:
        limit = np.sqrt(6.0 / (fan_in + width))
        blocks.append(BlockParams(
            w=rng.uniform(-limit, limit, size=(fan_in, width)).astype(dtype),
            b=np.zeros(width, dtype=dtype),
            gamma=np.ones(width, dtype=dtype),
            beta=np.zeros(width, dtype=dtype),
            run_mean=np.zeros(width, dtype=dtype),
            run_var=np.ones(width, dtype=dtype),
        ))
        fan_in = width
    limit = np.sqrt(6.0 / (fan_in + spec.num_classes))
    head_w = rng.uniform(-limit, limit, size=(fan_in, spec.num_classes)).astype(dtype)
    head_b = np.zeros(spec.num_classes, dtype=dtype)
    return ModelParams(blocks=blocks, head_w=head_w, head_b=head_b)


def param_count(spec: ModelSpec) -> int:
    """Total serialized array entries, running statistics included."""
    total = 0
    fan_in = spec.input_dim
    for width in spec.hidden_dims:
        total += fan_in * width + 5 * width
        fan_in = width
    total += fan_in * spec.num_classes + spec.num_classes
    return total


def affine_count(spec: ModelSpec) -> int:
    """Entries in the transmitted scale/shift subset."""
    return 2 * sum(spec.hidden_dims)


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class BlockCache:
    x: np.ndarray
    mean: np.ndarray
    inv_std: np.ndarray
    xhat: np.ndarray
    y: np.ndarray       # gamma * xhat + beta, pre-ReLU
    act: np.ndarray


@dataclass
class ForwardCache:
    mode: str
    blocks: list[BlockCache] = field(default_factory=list)
    head_in: np.ndarray | None = None
    logits: np.ndarray | None = None


def forward(params: ModelParams, spec: ModelSpec, batch: np.ndarray,
            mode: str) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a (rows, input_dim) batch, returning logits.

    BATCH mode normalizes with the batch mean/variance (biased) and folds
    them into the running statistics as (1-m)*old + m*batch. RUNNING mode
    normalizes with the stored running statistics and mutates nothing.
    """
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != spec.input_dim:
        raise ConfigError(
            f"batch shape {batch.shape} incompatible with input_dim {spec.input_dim}")
    if batch.shape[0] < 1:
        raise ConfigError("batch must contain at least one row")
    if len(params.blocks) != len(spec.hidden_dims):
        raise ConfigError("params do not match spec block count")

    dtype = params.dtype
    x = batch.astype(dtype, copy=False)
    eps = dtype.type(spec.norm_eps)
    m = dtype.type(spec.norm_momentum)
    cache = ForwardCache(mode=mode)

    for i, blk in enumerate(params.blocks):
        pre = x @ blk.w + blk.b
        if mode == NormMode.BATCH:
            mean = pre.mean(axis=0)
            var = pre.var(axis=0)
            blk.run_mean[...] = (1 - m) * blk.run_mean + m * mean
            blk.run_var[...] = (1 - m) * blk.run_var + m * var
        elif mode == NormMode.RUNNING:
            mean = blk.run_mean
            var = blk.run_var
        else:
            raise ConfigError(f"unknown norm mode {mode!r}")
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (pre - mean) * inv_std
        y = blk.gamma * xhat + blk.beta
        act = np.maximum(y, 0)
        if not np.all(np.isfinite(act)):
            raise NumericError(f"non-finite activation in block{i}")
        cache.blocks.append(BlockCache(x=x, mean=mean, inv_std=inv_std,
                                       xhat=xhat, y=y, act=act))
        x = act

    logits = x @ params.head_w + params.head_b
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite activation in head")
    cache.head_in = x
    cache.logits = logits
    return logits, cache


def ema_update_running_stats(params: ModelParams, spec: ModelSpec,
                             cache: ForwardCache) -> None:
    """Fold the batch moments of a finished forward pass into the running
    statistics: new = (1-m)*old + m*batch.

    Reconstructs pre-normalization activations from the cache, so a pure
    RUNNING-mode pass can still refresh statistics afterwards. Forward
    only; no gradients involved.
    """
    m = params.dtype.type(spec.norm_momentum)
    for blk, bc in zip(params.blocks, cache.blocks):
        pre = bc.xhat / bc.inv_std + bc.mean
        blk.run_mean[...] = (1 - m) * blk.run_mean + m * pre.mean(axis=0)
        blk.run_var[...] = (1 - m) * blk.run_var + m * pre.var(axis=0)


def softmax_entropy(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax probabilities and Shannon entropy (nats).

    Stabilized with a max shift; the entropy reduction is carried out in
    float64. Entropy lies in [0, ln C].
    """
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    p = np.exp(logp)
    entropy = np.maximum(-(p * logp).sum(axis=1), 0.0)
    return p.astype(logits.dtype), entropy


def backward(params: ModelParams, spec: ModelSpec, cache: ForwardCache,
             d_logits: np.ndarray, mask: str) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss given d(loss)/d(logits).

    Returns a dict keyed by parameter name; with AFFINE_ONLY only the
    gamma/beta entries are present. In BATCH mode the gradient flows
    through the batch mean and variance exactly.
    """
    if cache.head_in is None or len(cache.blocks) != len(params.blocks):
        raise ConfigError("cache does not match params")
    d_logits = np.asarray(d_logits, dtype=params.dtype)
    if d_logits.shape != cache.logits.shape:
        raise ConfigError(
            f"d_logits shape {d_logits.shape} != logits shape {cache.logits.shape}")

    grads: dict[str, np.ndarray] = {}
    if mask == ParamMask.ALL_PARAMS:
        grads["head.w"] = cache.head_in.T @ d_logits
        grads["head.b"] = d_logits.sum(axis=0)
    d_x = d_logits @ params.head_w.T

    for i in reversed(range(len(params.blocks))):
        blk = params.blocks[i]
        bc = cache.blocks[i]
        d_y = d_x * (bc.y > 0)
        grads[f"block{i}.gamma"] = (d_y * bc.xhat).sum(axis=0)
        grads[f"block{i}.beta"] = d_y.sum(axis=0)
        d_xhat = d_y * blk.gamma
        if cache.mode == NormMode.BATCH:
            n = d_xhat.shape[0]
            d_pre = (bc.inv_std / n) * (
                n * d_xhat
                - d_xhat.sum(axis=0)
                - bc.xhat * (d_xhat * bc.xhat).sum(axis=0)
            )
        else:
            d_pre = d_xhat * bc.inv_std
        if mask == ParamMask.ALL_PARAMS:
            grads[f"block{i}.w"] = bc.x.T @ d_pre
            grads[f"block{i}.b"] = d_pre.sum(axis=0)
        d_x = d_pre @ blk.w.T
    return grads


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float
    velocity: dict[str, np.ndarray]


def make_optimizer(params: ModelParams, mask: str, learning_rate: float,
                   momentum: float) -> OptimizerState:
    if learning_rate <= 0:
        raise ConfigError(f"learning_rate must be > 0, got {learning_rate}")
    if not 0 <= momentum < 1:
        raise ConfigError(f"momentum must be in [0,1), got {momentum}")
    velocity = {name: np.zeros_like(arr) for name, arr in params.named_trainable(mask)}
    return OptimizerState(learning_rate=learning_rate, momentum=momentum,
                          velocity=velocity)


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray],
             opt: OptimizerState, mask: str) -> tuple[ModelParams, OptimizerState]:
    """v <- momentum*v + g; p <- p - lr*v, applied in place to masked params."""
    arrays = dict(params.named_trainable(mask))
    for name, p in arrays.items():
        g = grads[name]
        v = opt.velocity[name]
        v *= opt.momentum
        v += g
        p -= p.dtype.type(opt.learning_rate) * v
    return params, opt


# ---------------------------------------------------------------------------
# Affine parameter transfer


@dataclass
class AffineLayer:
    layer_idx: int
    gamma: np.ndarray
    beta: np.ndarray


@dataclass
class AffineParamSet:
    """Versioned per-layer (scale, shift) vectors — the transmitted subset."""

    version: int
    layers: list[AffineLayer]


def extract_affine(params: ModelParams, version: int = 0) -> AffineParamSet:
    layers = [AffineLayer(i, blk.gamma.copy(), blk.beta.copy())
              for i, blk in enumerate(params.blocks)]
    return AffineParamSet(version=version, layers=layers)


def apply_affine(params: ModelParams, aset: AffineParamSet) -> ModelParams:
    """Overwrite gamma/beta from `aset`; everything else is untouched."""
    if len(aset.layers) != len(params.blocks):
        raise CompatibilityError(
            f"affine set has {len(aset.layers)} layers, model has {len(params.blocks)}")
    for layer in aset.layers:
        if not 0 <= layer.layer_idx < len(params.blocks):
            raise CompatibilityError(f"layer index {layer.layer_idx} out of range")
        blk = params.blocks[layer.layer_idx]
        if layer.gamma.shape != blk.gamma.shape or layer.beta.shape != blk.beta.shape:
            raise CompatibilityError(
                f"width mismatch at layer {layer.layer_idx}: "
                f"{layer.gamma.shape} vs {blk.gamma.shape}")
    for layer in aset.layers:
        blk = params.blocks[layer.layer_idx]
        blk.gamma[...] = layer.gamma.astype(blk.gamma.dtype)
        blk.beta[...] = layer.beta.astype(blk.beta.dtype)
    return params


# ---------------------------------------------------------------------------
# Checkpoint serialization


def serialize_spec(spec: ModelSpec) -> bytes:
    out = struct.pack("<II", spec.input_dim, len(spec.hidden_dims))
    out += struct.pack(f"<{len(spec.hidden_dims)}I", *spec.hidden_dims)
    out += struct.pack("<Idd", spec.num_classes, spec.norm_eps, spec.norm_momentum)
    return out


def _read_spec(buf: memoryview, off: int) -> tuple[ModelSpec, int]:
    try:
        input_dim, n_hidden = struct.unpack_from("<II", buf, off)
        off += 8
        hidden = struct.unpack_from(f"<{n_hidden}I", buf, off)
        off += 4 * n_hidden
        num_classes, eps, momentum = struct.unpack_from("<Idd", buf, off)
        off += 20
    except struct.error as exc:
        raise CheckpointError(f"truncated spec block: {exc}") from None
    return ModelSpec(input_dim, tuple(hidden), num_classes,
                     float(eps), float(momentum)), off


def checkpoint_bytes(spec: ModelSpec, params: ModelParams) -> bytes:
    parts = [CHECKPOINT_MAGIC, bytes([CHECKPOINT_VERSION]), serialize_spec(spec)]
    for _, arr in params.named_arrays():
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_checkpoint(data: bytes) -> tuple[ModelSpec, ModelParams]:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    if data[4] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data[4]}")
    buf = memoryview(data)
    spec, off = _read_spec(buf, 5)

    def take(n_elems: int, shape) -> tuple[np.ndarray, int]:
        nonlocal off
        nbytes = 4 * n_elems
        if off + nbytes > len(data):
            raise CheckpointError("truncated parameter block")
        arr = np.frombuffer(data, dtype="<f4", count=n_elems, offset=off)
        off += nbytes
        return arr.reshape(shape).astype(DTYPE), off

    blocks = []
    fan_in = spec.input_dim
    for width in spec.hidden_dims:
        w, _ = take(fan_in * width, (fan_in, width))
        b, _ = take(width, (width,))
        gamma, _ = take(width, (width,))
        beta, _ = take(width, (width,))
        rm, _ = take(width, (width,))
        rv, _ = take(width, (width,))
        blocks.append(BlockParams(w, b, gamma, beta, rm, rv))
        fan_in = width
    head_w, _ = take(fan_in * spec.num_classes, (fan_in, spec.num_classes))
    head_b, _ = take(spec.num_classes, (spec.num_classes,))
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes in checkpoint")
    return spec, ModelParams(blocks=blocks, head_w=head_w, head_b=head_b)


def checkpoint_size(spec: ModelSpec) -> int:
    """Analytic size in bytes of a serialized checkpoint."""
    header = 4 + 1 + len(serialize_spec(spec))
    return header + 4 * param_count(spec)


def save_checkpoint(path, spec: ModelSpec, params: ModelParams) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(spec, params))


def load_checkpoint(path) -> tuple[ModelSpec, ModelParams]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
