"""Cloud server: pools uploaded samples across edge sessions into fixed
adaptation batches, runs the engine serially, and broadcasts versioned
affine parameter updates to every live session.

`CloudCore` holds all protocol/state logic and is transport-agnostic so
an in-process loopback can drive it deterministically; `CloudServer`
wraps it in a TCP accept loop with one reader and one writer thread per
connection, all feeding a single serialized engine context.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import threading
from dataclasses import dataclass, field

from . import nn, wire
from .adapt import AdaptationEngine, AdaptConfig, AdaptationError
from .edge import affine_to_wire
from .samples import Sample

log = logging.getLogger("cetta.cloud")


@dataclass
class SessionState:
    edge_id: int
    last_seq: int = 0
    last_version_sent: int = 0


@dataclass
class ServerConfig:
    listen_addr: tuple[str, int]
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    max_sessions: int = 64
    foundation_path: str | None = None
    edge_path: str | None = None


@dataclass
class CloudReport:
    steps: int = 0
    samples_ingested: int = 0
    final_version: int = 0
    buffer_occupancy: int = 0
    payload_bytes_total: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class CloudCore:
    """Session handling, sample pooling and the serialized engine."""

    def __init__(self, engine: AdaptationEngine):
        self.engine = engine
        self.pool: list[Sample] = []
        self.sessions: dict[int, SessionState] = {}
        self.samples_ingested = 0
        self.steps = 0
        self.payload_bytes_total = 0
        self.step_log: list[dict] = []
        self._edge_hash = wire.spec_hash(engine.edge_spec)

    def on_hello(self, msg: wire.ClientHello) -> wire.ServerHello:
        accepted = msg.spec_hash == self._edge_hash
        if accepted:
            self.sessions.setdefault(msg.edge_id, SessionState(edge_id=msg.edge_id))
        else:
            log.warning("rejected edge %d: configuration hash mismatch", msg.edge_id)
        return wire.ServerHello(accepted=accepted,
                                current_version=self.engine.version)

    def on_sample_batch(self, edge_id: int, msg: wire.SampleBatch
                        ) -> tuple[wire.Ack, list[bytes]]:
        """Stage the batch; run engine steps for every full pool of N.

        Returns the ack plus encoded ParamUpdate payloads to broadcast.
        """
        session = self.sessions.get(edge_id)
        if session is not None:
            session.last_seq = max(session.last_seq, msg.seq)
        for sid, feats in msg.samples:
            self.pool.append(Sample(sample_id=sid, features=feats))
        self.samples_ingested += len(msg.samples)

        broadcasts: list[bytes] = []
        n = self.engine.config.upload_batch
        while len(self.pool) >= n:
            batch, self.pool = self.pool[:n], self.pool[n:]
            try:
                result = self.engine.step(batch)
            except AdaptationError as exc:
                log.error("adaptation step aborted: %s (samples %s)",
                          exc, exc.sample_ids)
                continue
            payload = wire.encode(affine_to_wire(result.affine_set))
            self.steps += 1
            self.payload_bytes_total += len(payload)
            entry = {
                "step": self.steps,
                "version": result.version,
                "pool_size": len(self.pool),
                "foundation_loss": result.foundation_loss,
                "edge_loss": result.edge_loss,
                "buffer_size": len(self.engine.buffer),
            }
            self.step_log.append(entry)
            log.info("%s", json.dumps(entry))
            broadcasts.append(payload)
        return wire.Ack(seq=msg.seq), broadcasts

    def mark_sent(self, edge_id: int, version: int) -> None:
        session = self.sessions.get(edge_id)
        if session is not None:
            session.last_version_sent = max(session.last_version_sent, version)

    def report(self) -> CloudReport:
        return CloudReport(
            steps=self.steps,
            samples_ingested=self.samples_ingested,
            final_version=self.engine.version,
            buffer_occupancy=len(self.engine.buffer),
            payload_bytes_total=self.payload_bytes_total,
        )


# ---------------------------------------------------------------------------
# TCP server


class _Session:
    def __init__(self, sock: socket.socket, edge_id: int):
        self.sock = sock
        self.edge_id = edge_id
        self.outbox: "queue.Queue[bytes | None]" = queue.Queue()
        self.alive = True


class CloudServer:
    """Accept loop + per-session reader/writer threads around CloudCore."""

    def __init__(self, engine: AdaptationEngine, listen_addr: tuple[str, int] = ("127.0.0.1", 0),
                 max_sessions: int = 64):
        self.core = CloudCore(engine)
        self.max_sessions = max_sessions
        self._engine_lock = threading.Lock()
        self._sessions: list[_Session] = []
        self._sessions_lock = threading.Lock()
        self._listener = socket.create_server(listen_addr)
        self._listener.settimeout(0.1)
        self.addr = self._listener.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None
        self._shutdown_report: CloudReport | None = None

    def start(self) -> None:
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with self._sessions_lock:
                if len(self._sessions) >= self.max_sessions:
                    sock.close()
                    continue
            t = threading.Thread(target=self._handshake, args=(sock,), daemon=True)
            t.start()
            self._threads.append(t)

    def _handshake(self, sock: socket.socket) -> None:
        sock.settimeout(5.0)
        try:
            payload = wire.read_frame(sock)
            if payload is None:
                sock.close()
                return
            msg = wire.decode(payload)
            if not isinstance(msg, wire.ClientHello):
                sock.close()
                return
            with self._engine_lock:
                hello = self.core.on_hello(msg)
            wire.write_frame(sock, wire.encode(hello))
            if not hello.accepted:
                sock.close()
                return
        except (OSError, wire.DecodeError, wire.ProtocolError):
            sock.close()
            return

        session = _Session(sock, msg.edge_id)
        with self._sessions_lock:
            self._sessions.append(session)
        writer = threading.Thread(target=self._writer_loop, args=(session,), daemon=True)
        writer.start()
        self._threads.append(writer)
        self._reader_loop(session)

    def _reader_loop(self, session: _Session) -> None:
        sock = session.sock
        sock.settimeout(0.1)
        reader = wire.BufferedFrameReader(sock)
        while not self._stop.is_set() and session.alive:
            try:
                payloads = reader.poll()
            except socket.timeout:
                continue
            except (OSError, wire.ProtocolError):
                break
            if reader.eof:
                break
            try:
                for payload in payloads:
                    msg = wire.decode(payload)
                    if isinstance(msg, wire.SampleBatch):
                        with self._engine_lock:
                            ack, broadcasts = self.core.on_sample_batch(
                                session.edge_id, msg)
                            version = self.core.engine.version
                        session.outbox.put(wire.encode(ack))
                        for update_payload in broadcasts:
                            self._broadcast(update_payload, version)
            except wire.DecodeError as exc:
                log.error("dropping edge %d: %s", session.edge_id, exc)
                break
        self._drop_session(session)

    def _writer_loop(self, session: _Session) -> None:
        while session.alive:
            payload = session.outbox.get()
            if payload is None:
                break
            try:
                wire.write_frame(session.sock, payload)
            except OSError:
                self._drop_session(session)
                break

    def _broadcast(self, payload: bytes, version: int) -> None:
        with self._sessions_lock:
            targets = list(self._sessions)
        for session in targets:
            session.outbox.put(payload)
            with self._engine_lock:
                self.core.mark_sent(session.edge_id, version)

    def _drop_session(self, session: _Session) -> None:
        if not session.alive:
            return
        session.alive = False
        session.outbox.put(None)
        with self._sessions_lock:
            if session in self._sessions:
                self._sessions.remove(session)
        try:
            session.sock.close()
        except OSError:
            pass

    def shutdown(self) -> CloudReport:
        """Close sessions after in-flight frames; idempotent."""
        if self._shutdown_report is not None:
            return self._shutdown_report
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)
        with self._sessions_lock:
            sessions = list(self._sessions)
        for session in sessions:
            # let queued frames flush before closing
            session.outbox.put(None)
        for t in self._threads:
            t.join(timeout=2.0)
        for session in sessions:
            self._drop_session(session)
        with self._engine_lock:
            self._shutdown_report = self.core.report()
        return self._shutdown_report


def load_engine(foundation_path: str, edge_path: str, adapt_config: AdaptConfig,
                seed: int = 0) -> AdaptationEngine:
    """Build an engine from two checkpoint files."""
    f_spec, f_params = nn.load_checkpoint(foundation_path)
    e_spec, e_params = nn.load_checkpoint(edge_path)
    return AdaptationEngine(f_spec, f_params, e_spec, e_params,
                            adapt_config, seed=seed)


def serve(config: ServerConfig, seed: int = 0) -> CloudServer:
    """Start a server from checkpoints; caller owns shutdown."""
    engine = load_engine(config.foundation_path, config.edge_path,
                         config.adapt, seed=seed)
    server = CloudServer(engine, config.listen_addr, config.max_sessions)
    server.start()
    return server
