"""Edge node: forward-only batched inference with upload filtration.

The inference loop owns the model, the filtration state and the
prediction output. Uploads go through a bounded queue that never blocks
inference: on overflow the highest-entropy sample currently queued
(including the incoming one) is discarded. Parameter updates from the
cloud land in a single-slot mailbox and are applied only at batch
boundaries; with an update interval K > 1 only every K-th received
update triggers an application.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import filtration as filt
from . import nn, wire
from .samples import Sample, stack_features


@dataclass(frozen=True)
class EdgeConfig:
    batch_size: int = 64
    update_interval: int = 1
    queue_capacity: int = 256
    cloud_addr: tuple[str, int] | None = None
    edge_id: int = 0
    # Batch-renormalization-style inference: predictions always use the
    # moving averages, which are refreshed from each finished batch
    # (forward-only). Off = strictly frozen statistics.
    track_stats: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.update_interval < 1:
            raise ValueError(f"update_interval must be >= 1, got {self.update_interval}")
        if self.queue_capacity < 1:
            raise ValueError(f"queue_capacity must be >= 1, got {self.queue_capacity}")


class UploadQueue:
    """Bounded FIFO of (sample, entropy) with drop-highest-entropy overflow."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: list[tuple[Sample, float]] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def push(self, sample: Sample, entropy: float):
        """Enqueue; returns the dropped (sample, entropy) on overflow."""
        with self._lock:
            self._items.append((sample, float(entropy)))
            if len(self._items) <= self.capacity:
                return None
            drop_idx = max(range(len(self._items)), key=lambda i: self._items[i][1])
            return self._items.pop(drop_idx)

    def drain(self) -> list[tuple[Sample, float]]:
        """Remove and return everything currently queued, oldest first."""
        with self._lock:
            items, self._items = self._items, []
            return items

    def snapshot(self) -> list[tuple[Sample, float]]:
        with self._lock:
            return list(self._items)


@dataclass
class EdgeStats:
    samples: int = 0
    batches: int = 0
    accepted: int = 0
    queue_drops: int = 0
    uploads_sent: int = 0
    batches_sent: int = 0
    updates_received: int = 0
    updates_applied: int = 0
    updates_rejected: int = 0
    current_version: int = 0
    versions_applied: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__, versions_applied=list(self.versions_applied))


@dataclass
class Prediction:
    sample_id: int
    label: int
    confidence: float
    entropy: float
    version: int


class EdgeRuntime:
    """Deterministic edge core; transports drive it from outside."""

    def __init__(self, spec: nn.ModelSpec, params: nn.ModelParams,
                 filt_config: filt.FiltrationConfig, config: EdgeConfig,
                 upload_enabled: bool = True):
        self.spec = spec
        self.params = params
        self.config = config
        self.filt_state = filt.init_state(filt_config)
        self.queue = UploadQueue(config.queue_capacity)
        self.stats = EdgeStats()
        self.upload_enabled = upload_enabled
        self.predictions: list[Prediction] = []
        self._mailbox: nn.AffineParamSet | None = None
        self._pending_updates = 0
        self._mail_lock = threading.Lock()

    # -- transport side -----------------------------------------------------

    def on_param_update(self, aset: nn.AffineParamSet) -> None:
        """Receive an update into the mailbox (latest wins)."""
        with self._mail_lock:
            self.stats.updates_received += 1
            self._pending_updates += 1
            if self._mailbox is None or aset.version > self._mailbox.version:
                self._mailbox = aset

    def take_uploads(self) -> list[tuple[Sample, float]]:
        """Drain the upload queue; called by the transport loop."""
        items = self.queue.drain()
        if items:
            self.stats.uploads_sent += len(items)
            self.stats.batches_sent += 1
        return items

    # -- inference side -----------------------------------------------------

    def apply_update(self, aset: nn.AffineParamSet) -> bool:
        """Swap in new scale/shift parameters; stale versions are no-ops."""
        if aset.version <= self.stats.current_version:
            return False
        try:
            nn.apply_affine(self.params, aset)
        except nn.CompatibilityError:
            self.stats.updates_rejected += 1
            return False
        self.stats.current_version = aset.version
        self.stats.updates_applied += 1
        self.stats.versions_applied.append(aset.version)
        return True

    def _apply_pending(self) -> None:
        with self._mail_lock:
            if self._mailbox is None or self._pending_updates < self.config.update_interval:
                return
            aset = self._mailbox
            self._mailbox = None
            self._pending_updates %= self.config.update_interval
        self.apply_update(aset)

    def process_batch(self, batch: list[Sample]) -> list[Prediction]:
        """Infer one batch with the parameter version held at its start."""
        self._apply_pending()
        feats = stack_features(batch)
        logits, cache = nn.forward(self.params, self.spec, feats, nn.NormMode.RUNNING)
        probs, entropies = nn.softmax_entropy(logits)
        pred = np.argmax(probs, axis=1)
        conf = probs[np.arange(len(batch)), pred]

        out = []
        for i, sample in enumerate(batch):
            out.append(Prediction(
                sample_id=sample.sample_id, label=int(pred[i]),
                confidence=float(conf[i]), entropy=float(entropies[i]),
                version=self.stats.current_version))
        self.predictions.extend(out)
        self.stats.samples += len(batch)
        self.stats.batches += 1

        mask = filt.score_batch(entropies, self.filt_state)
        cfg = self.filt_state.config
        for i, sample in enumerate(batch):
            if not mask[i]:
                continue
            if cfg.redundancy_enabled and not filt.redundancy_pass(probs[i], self.filt_state):
                continue
            self.stats.accepted += 1
            if self.upload_enabled:
                if self.queue.push(sample, float(entropies[i])) is not None:
                    self.stats.queue_drops += 1

        filt.update_threshold(self.filt_state, entropies)
        if self.config.track_stats:
            nn.ema_update_running_stats(self.params, self.spec, cache)
        return out

    def run_stream(self, stream: list[Sample], after_batch=None) -> list[Prediction]:
        """Process the whole stream in batches; `after_batch(self)` lets a
        caller flush uploads and deliver updates between batches."""
        bs = self.config.batch_size
        for start in range(0, len(stream), bs):
            self.process_batch(stream[start:start + bs])
            if after_batch is not None:
                after_batch(self)
        return self.predictions

    def stats_json(self) -> str:
        return json.dumps(self.stats.to_dict())


# ---------------------------------------------------------------------------
# TCP client


class EdgeTransport:
    """Background loop owning the connection: drains the upload queue and
    feeds received parameter updates into the runtime mailbox."""

    def __init__(self, runtime: EdgeRuntime, addr: tuple[str, int],
                 spec: nn.ModelSpec, poll_interval: float = 0.005):
        self.runtime = runtime
        self.addr = addr
        self.spec = spec
        self.poll_interval = poll_interval
        self._sock: socket.socket | None = None
        self._reader: wire.BufferedFrameReader | None = None
        self._seq = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def connect(self, timeout: float = 5.0) -> bool:
        sock = socket.create_connection(self.addr, timeout=timeout)
        sock.settimeout(timeout)
        wire.write_frame(sock, wire.encode(wire.ClientHello(
            edge_id=self.runtime.config.edge_id,
            spec_hash=wire.spec_hash(self.spec))))
        payload = wire.read_frame(sock)
        if payload is None:
            sock.close()
            return False
        hello = wire.decode(payload)
        if not isinstance(hello, wire.ServerHello) or not hello.accepted:
            sock.close()
            return False
        sock.settimeout(self.poll_interval)
        self._sock = sock
        self._reader = wire.BufferedFrameReader(sock)
        return True

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _send_pending(self) -> None:
        items = self.runtime.take_uploads()
        if not items or self._sock is None:
            return
        samples = tuple((s.sample_id, s.features) for s, _ in items)
        self._seq += 1
        self._sock.settimeout(5.0)
        try:
            wire.write_frame(self._sock, wire.encode(
                wire.SampleBatch(seq=self._seq, samples=samples)))
        finally:
            self._sock.settimeout(self.poll_interval)

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                self._send_pending()
                payloads = self._reader.poll()
            except socket.timeout:
                continue
            except (OSError, wire.ProtocolError):
                break
            if self._reader.eof:
                break
            for payload in payloads:
                msg = wire.decode(payload)
                if isinstance(msg, wire.ParamUpdate):
                    self.runtime.on_param_update(wire_to_affine(msg))
                # Acks only confirm delivery; nothing to do.
        if self._sock is not None:
            self._sock.close()

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass


def wire_to_affine(msg: wire.ParamUpdate) -> nn.AffineParamSet:
    layers = [nn.AffineLayer(idx, gamma, beta) for idx, gamma, beta in msg.layers]
    return nn.AffineParamSet(version=msg.version, layers=layers)


def affine_to_wire(aset: nn.AffineParamSet) -> wire.ParamUpdate:
    layers = tuple((l.layer_idx, l.gamma.astype("<f4"), l.beta.astype("<f4"))
                   for l in aset.layers)
    return wire.ParamUpdate(version=aset.version, layers=layers)


def run_edge(spec: nn.ModelSpec, params: nn.ModelParams, stream: list[Sample],
             filt_config: filt.FiltrationConfig, config: EdgeConfig,
             offline: bool = False, drain_wait: float = 0.2) -> EdgeRuntime:
    """Run a full stream against a TCP cloud (or offline)."""
    runtime = EdgeRuntime(spec, params, filt_config, config,
                          upload_enabled=not offline)
    transport = None
    if not offline:
        if config.cloud_addr is None:
            raise ValueError("cloud_addr required unless offline")
        transport = EdgeTransport(runtime, config.cloud_addr, spec)
        if not transport.connect():
            raise ConnectionError(f"cloud at {config.cloud_addr} rejected the session")
        transport.start()
    try:
        runtime.run_stream(stream)
        if transport is not None:
            # give the uploader a moment to flush the tail of the queue
            deadline = time.monotonic() + drain_wait
            while len(runtime.queue) > 0 and time.monotonic() < deadline:
                time.sleep(0.005)
    finally:
        if transport is not None:
            transport.close()
    return runtime
