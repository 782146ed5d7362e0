"""Session control plane: commands in, events out.

One message schema rides two transports: length-prefixed UTF-8 JSON over a
local TCP socket, and the same payloads as text frames over a WebSocket
endpoint for browsers.

    command: {"v": 1, "id": "<req id>", "cmd": "...", "args": {...}}
    reply:   {"v": 1, "id": "<req id>", "ok": true, "state": {...}}
             {"v": 1, "id": "<req id>", "ok": false, "error": "..."}
    event:   {"v": 1, "seq": N, "event": "state|suggestion|detection|metrics|error",
              "data": {...}}

Replies to mutating commands are cached by request id, so a retry returns
the original reply instead of re-applying. Slow subscribers are disconnected
rather than back-pressuring the engine.
"""

from __future__ import annotations

import json
import queue
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from .audio import MODEL_RATE, RollingBuffer, Waveform, read_wav
from .context import ContextEngine, LabelMapping, SpectralTemplateClassifier
from .errors import EngineError, ProtocolError
from .metrics import profile_stream
from .personalization import (
    CustomClassDraft,
    DraftStore,
    ProfileStore,
    add_recording,
    finalize_class,
    save_snapshot_as_draft,
)
from .streaming import StreamConfig, StreamSession

PROTOCOL_VERSION = 1
EVENT_QUEUE_LIMIT = 1024
IDEMPOTENCY_CACHE = 4096


class Subscriber:
    """Bounded per-connection event queue with its own sequence numbering."""

    def __init__(self):
        self._q: queue.Queue = queue.Queue(maxsize=EVENT_QUEUE_LIMIT)
        self._seq = 0
        self.dead = False

    def offer(self, event: str, data: dict) -> None:
        if self.dead:
            return
        self._seq += 1
        msg = {"v": PROTOCOL_VERSION, "seq": self._seq, "event": event, "data": data}
        try:
            self._q.put_nowait(msg)
        except queue.Full:
            self.dead = True  # drop the subscriber, never block the engine

    def get(self, timeout: float | None = None) -> dict | None:
        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            return None


class EventBus:
    def __init__(self):
        self._subs: list[Subscriber] = []
        self._lock = threading.Lock()

    def subscribe(self) -> Subscriber:
        sub = Subscriber()
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscriber) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def publish(self, event: str, data: dict) -> None:
        with self._lock:
            live = [s for s in self._subs if not s.dead]
            self._subs = live
        for sub in live:
            sub.offer(event, data)


@dataclass
class ServiceConfig:
    device_rate: int = MODEL_RATE
    alpha: float = 1.0
    data_dir: str = "attenuate_data"
    metrics_interval_s: float = 1.0


class ControlService:
    """Routes commands to the streaming/personalization/context modules and
    broadcasts state changes. Transport-agnostic; see the socket/WebSocket
    frontends below."""

    def __init__(self, model, store, config: ServiceConfig | None = None,
                 classifier=None, mapping: LabelMapping | None = None,
                 clock=None):
        self.model = model
        self.store = store
        self.config = config or ServiceConfig()
        self.bus = EventBus()
        self.profiles = ProfileStore(f"{self.config.data_dir}/profiles.txt")
        self.drafts = DraftStore(self.config.data_dir)
        classifier = classifier or SpectralTemplateClassifier()
        mapping = mapping or LabelMapping.identity(store.ids())
        self.context = ContextEngine(classifier, mapping,
                                     profiles=self.profiles.list())
        self.session: StreamSession | None = None
        self._buffer = RollingBuffer(int(10.5 * MODEL_RATE), MODEL_RATE)
        self._snapshots: dict[str, Waveform] = {}
        self._model_samples = 0
        self._last_tick = 0
        self._last_metrics = 0.0
        self._lock = threading.RLock()
        self._replies: dict[str, dict] = {}
        self._clock = clock or time.monotonic

    # -- state ---------------------------------------------------------------

    def state(self) -> dict:
        session = self.session
        return {
            "targets": list(session.requested_targets) if session else [],
            "alpha": session.requested_alpha if session else self.config.alpha,
            "session_active": session is not None and not session._closed,
            "classes": [
                {"id": cid, "provenance": self.store.get(cid).provenance}
                for cid in self.store.ids()
            ],
            "profiles": [
                {"id": p.profile_id, "description": p.description}
                for p in self.profiles.list()
            ],
            "drafts": self.drafts.list_ids(),
            "suggestion_expiry_s": self.context.expiry_s,
        }

    def _broadcast_state(self) -> None:
        self.bus.publish("state", self.state())

    # -- audio pump ------------------------------------------------------------

    def push_audio(self, samples: np.ndarray) -> None:
        """Feed device-rate audio into the live session and the context path."""
        with self._lock:
            if self.session is None:
                return
            self.session.push_input(samples)

    def _tap_model_audio(self, model_samples: np.ndarray) -> None:
        self._buffer.write(model_samples)
        self._model_samples += model_samples.size
        while self._model_samples - self._last_tick >= MODEL_RATE:
            self._last_tick += MODEL_RATE
            self._context_tick()

    def _context_tick(self) -> None:
        window = Waveform(self._buffer.snapshot()[-MODEL_RATE:], MODEL_RATE)
        if len(window) < MODEL_RATE:
            return
        now = self._last_tick / MODEL_RATE  # stream-time clock, seconds
        targets = self.session.requested_targets if self.session else ()
        for ev in self.context.tick(window, self._buffer, targets, now):
            if ev.kind == "detection":
                self.bus.publish("detection", {
                    "labels": [{"label": l, "confidence": c}
                               for l, c in ev.detection.labels[:5]],
                    "timestamp": ev.detection.timestamp,
                })
            elif ev.kind == "suggestion" and ev.suggestion is not None:
                s = ev.suggestion
                if ev.snapshot is not None and s.snapshot_ref:
                    self._snapshots[s.snapshot_ref] = ev.snapshot
                self.bus.publish("suggestion", {
                    "suggestion_id": s.suggestion_id,
                    "kind": s.kind,
                    "class_id": s.class_id,
                    "snapshot_ref": s.snapshot_ref,
                    "description": s.description,
                    "profile_id": s.profile_id,
                    "created": s.created,
                    "expiry": s.expiry,
                })
        if self.session is not None:
            now_wall = self._clock()
            if now_wall - self._last_metrics >= self.config.metrics_interval_s:
                self._last_metrics = now_wall
                rec = profile_stream(self.session)
                self.bus.publish("metrics", {
                    "hop_ms_mean": rec.hop_ms_mean,
                    "hop_ms_p95": rec.hop_ms_p95,
                    "latency_ms": rec.latency_ms,
                    "buffer_occupancy_samples": rec.buffer_occupancy_samples,
                    "real_time_factor": rec.real_time_factor,
                    "drops": rec.drops,
                    "underruns": rec.underruns,
                })

    # -- commands ----------------------------------------------------------------

    def handle_command(self, msg: dict) -> dict:
        """Route one command; malformed input earns a protocol error reply."""
        if not isinstance(msg, dict) or "cmd" not in msg or "id" not in msg:
            return {"v": PROTOCOL_VERSION, "id": msg.get("id") if isinstance(msg, dict) else None,
                    "ok": False, "error": "protocol: message needs 'id' and 'cmd'"}
        req_id = str(msg["id"])
        with self._lock:
            if req_id in self._replies:
                return self._replies[req_id]
            try:
                self._apply(msg.get("cmd"), msg.get("args") or {})
                reply = {"v": PROTOCOL_VERSION, "id": req_id, "ok": True,
                         "state": self.state()}
                self._broadcast_state()
            except EngineError as exc:
                reply = {"v": PROTOCOL_VERSION, "id": req_id, "ok": False,
                         "error": f"{type(exc).__name__}: {exc}"}
            except (TypeError, KeyError, ValueError) as exc:
                reply = {"v": PROTOCOL_VERSION, "id": req_id, "ok": False,
                         "error": f"protocol: {exc}"}
            self._replies[req_id] = reply
            if len(self._replies) > IDEMPOTENCY_CACHE:
                for key in list(self._replies)[:IDEMPOTENCY_CACHE // 4]:
                    del self._replies[key]
            return reply

    def _require_session(self) -> StreamSession:
        if self.session is None:
            raise ProtocolError("no active session")
        return self.session

    def _apply(self, cmd: str, args: dict) -> None:
        if cmd == "start_session":
            cfg = StreamConfig(
                device_rate=int(args.get("device_rate", self.config.device_rate)),
                alpha=float(args.get("alpha", self.config.alpha)),
            )
            self.session = StreamSession(self.model, self.store, cfg)
            self.session.model_tap = self._tap_model_audio
        elif cmd == "stop_session":
            if self.session is not None:
                self.session.close()
                self.session = None
        elif cmd == "set_targets":
            self._require_session().set_targets(tuple(args["targets"]))
        elif cmd == "set_strength":
            self._require_session().set_strength(float(args["alpha"]))
        elif cmd == "accept_suggestion":
            now = self._last_tick / MODEL_RATE
            s = self.context.accept(str(args["suggestion_id"]), now)
            if s is None:
                raise ProtocolError("suggestion expired or unknown")
            if s.kind == "known-class":
                session = self._require_session()
                new = tuple(dict.fromkeys((*session.requested_targets, s.class_id)))
                session.set_targets(new)
            elif s.snapshot_ref and s.snapshot_ref in self._snapshots:
                name = str(args.get("name", s.snapshot_ref))
                snap = self._snapshots[s.snapshot_ref]
                draft = save_snapshot_as_draft(snap, name, self._existing_ids())
                self.drafts.save(draft)
        elif cmd == "dismiss_suggestion":
            self.context.dismiss(str(args["suggestion_id"]),
                                 self._last_tick / MODEL_RATE)
        elif cmd == "save_snapshot":
            ref, name = str(args["snapshot_ref"]), str(args["name"])
            if ref not in self._snapshots:
                raise ProtocolError(f"unknown snapshot {ref!r}")
            draft = save_snapshot_as_draft(self._snapshots[ref], name,
                                           self._existing_ids())
            self.drafts.save(draft)
        elif cmd == "add_recording":
            class_id = str(args["class_id"])
            samples = np.asarray(args["samples"], dtype=np.float32)
            rate = int(args.get("sample_rate", MODEL_RATE))
            try:
                draft = self.drafts.load(class_id)
            except EngineError:
                draft = CustomClassDraft(class_id)
            add_recording(draft, Waveform(samples, rate))
            self.drafts.save(draft)
        elif cmd == "finalize_class":
            draft = self.drafts.load(str(args["class_id"]))
            finalize_class(draft, self.model, self.store)
        elif cmd == "list_classes" or cmd == "list_profiles":
            pass  # state reply carries both
        elif cmd == "upsert_profile":
            self.profiles.upsert(str(args["profile_id"]), str(args["description"]))
            self.context.profiles = self.profiles.list()
        elif cmd == "delete_profile":
            self.profiles.delete(str(args["profile_id"]))
            self.context.profiles = self.profiles.list()
        else:
            raise ProtocolError(f"unknown command {cmd!r}")

    def _existing_ids(self) -> set[str]:
        return set(self.store.ids()) | set(self.drafts.list_ids())


# ---------------------------------------------------------------------------
# TCP transport: u32 big-endian length prefix + UTF-8 JSON
# ---------------------------------------------------------------------------


def _send_frame(sock, payload: dict) -> None:
    raw = json.dumps(payload).encode("utf-8")
    sock.sendall(struct.pack(">I", len(raw)) + raw)


def _recv_frame(sock) -> dict | None:
    head = _recv_exactly(sock, 4)
    if head is None:
        return None
    (n,) = struct.unpack(">I", head)
    if n > 16 * 1024 * 1024:
        raise ProtocolError("frame too large")
    body = _recv_exactly(sock, n)
    if body is None:
        return None
    try:
        return json.loads(body.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"bad JSON frame: {exc}") from exc


def _recv_exactly(sock, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class SocketServer:
    """Threaded local TCP frontend; replies and events interleave on the same
    connection, distinguished by 'id' vs 'seq'."""

    def __init__(self, service: ControlService, host: str = "127.0.0.1", port: int = 0):
        self.service = service
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                sub = outer.service.bus.subscribe()
                sub.offer("state", outer.service.state())
                stop = threading.Event()

                def pump():
                    while not stop.is_set() and not sub.dead:
                        msg = sub.get(timeout=0.1)
                        if msg is None:
                            continue
                        try:
                            _send_frame(self.request, msg)
                        except OSError:
                            break

                    outer.service.bus.unsubscribe(sub)

                t = threading.Thread(target=pump, daemon=True)
                t.start()
                try:
                    while True:
                        try:
                            msg = _recv_frame(self.request)
                        except ProtocolError as exc:
                            _send_frame(self.request, {
                                "v": PROTOCOL_VERSION, "id": None, "ok": False,
                                "error": str(exc)})
                            continue
                        if msg is None:
                            break
                        _send_frame(self.request, outer.service.handle_command(msg))
                except OSError:
                    pass
                finally:
                    stop.set()
                    outer.service.bus.unsubscribe(sub)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self.port = self._server.server_address[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class SocketClient:
    """Minimal client for tests and scripts."""

    def __init__(self, port: int, host: str = "127.0.0.1"):
        self._sock = socket.create_connection((host, port), timeout=5.0)
        self._events: list[dict] = []

    def command(self, cmd: str, args: dict | None = None, req_id: str | None = None,
                timeout: float = 5.0) -> dict:
        req_id = req_id or f"r{time.monotonic_ns()}"
        _send_frame(self._sock, {"v": PROTOCOL_VERSION, "id": req_id,
                                 "cmd": cmd, "args": args or {}})
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            msg = _recv_frame(self._sock)
            if msg is None:
                raise ProtocolError("connection closed")
            if msg.get("id") == req_id:
                return msg
            self._events.append(msg)
        raise ProtocolError("timed out waiting for reply")

    def drain_events(self, wait_s: float = 0.0) -> list[dict]:
        if wait_s > 0:
            self._sock.settimeout(wait_s)
            try:
                while True:
                    msg = _recv_frame(self._sock)
                    if msg is None:
                        break
                    self._events.append(msg)
            except (TimeoutError, OSError):
                pass
            finally:
                self._sock.settimeout(5.0)
        out, self._events = self._events, []
        return out

    def close(self) -> None:
        self._sock.close()


# ---------------------------------------------------------------------------
# WebSocket transport (same payloads as text frames)
# ---------------------------------------------------------------------------


class WebSocketServer:
    def __init__(self, service: ControlService, host: str = "127.0.0.1", port: int = 0):
        from websockets.sync.server import serve

        self.service = service

        def handler(ws):
            sub = service.bus.subscribe()
            sub.offer("state", service.state())
            stop = threading.Event()

            def pump():
                while not stop.is_set() and not sub.dead:
                    msg = sub.get(timeout=0.1)
                    if msg is None:
                        continue
                    try:
                        ws.send(json.dumps(msg))
                    except Exception:
                        break
                service.bus.unsubscribe(sub)

            t = threading.Thread(target=pump, daemon=True)
            t.start()
            try:
                for raw in ws:
                    try:
                        msg = json.loads(raw)
                    except json.JSONDecodeError as exc:
                        ws.send(json.dumps({"v": PROTOCOL_VERSION, "id": None,
                                            "ok": False, "error": f"bad JSON: {exc}"}))
                        continue
                    ws.send(json.dumps(service.handle_command(msg)))
            finally:
                stop.set()
                service.bus.unsubscribe(sub)

        self._server = serve(handler, host, port)
        self.port = self._server.socket.getsockname()[1]
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()


# ---------------------------------------------------------------------------
# Audio pump for serve mode
# ---------------------------------------------------------------------------


class AudioPump:
    """Feeds a source WAV (looped) or silence into the service at hop pace.

    ``realtime=False`` runs as fast as possible (useful under test).
    """

    def __init__(self, service: ControlService, source_path=None,
                 realtime: bool = True, sink=None):
        self.service = service
        self.realtime = realtime
        self.sink = sink
        rate = service.config.device_rate
        if source_path:
            wave = read_wav(source_path)
            if wave.sample_rate != rate:
                from .audio import resample
                wave = resample(wave, rate)
            self._source = wave.samples
        else:
            self._source = np.zeros(rate, dtype=np.float32)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self) -> None:
        rate = self.service.config.device_rate
        hop = int(rate * 0.025)
        pos = 0
        t0 = time.monotonic()
        pushed = 0
        while not self._stop.is_set():
            if pos + hop > self._source.size:
                chunk = np.concatenate([self._source[pos:],
                                        self._source[:hop - (self._source.size - pos)]])
                pos = (pos + hop) % self._source.size
            else:
                chunk = self._source[pos:pos + hop]
                pos += hop
            self.service.push_audio(chunk)
            session = self.service.session
            if session is not None and session.sink is None:
                out = session.pull_output(session.output_occupancy)
                if self.sink is not None and out.size:
                    self.sink(out)
            pushed += hop
            if self.realtime:
                target = t0 + pushed / rate
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2.0)
