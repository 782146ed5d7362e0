"""Low-latency live pipeline: sliding-window inference over a 250 ms window
with a 25 ms hop, boundary resampling, strength blending, capped output
buffering, and hot-swappable target sets.

Time alignment: the suppressed path carries no time shift (the window trails
the newest sample; both resamplers are zero-phase with bounded lookahead), so
dry and wet samples blend at identical stream indices. The dry path is held
back only until the wet path's availability lag (resampler lookahead plus hop
granularity) is satisfied.

Control changes (targets, strength) are recorded immediately and take effect
at the next hop boundary. Output is invariant to how the input is chunked
across ``push_input`` calls: hops fire on fixed sample counts and all hop
arithmetic runs on fixed-size blocks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .audio import MODEL_RATE, Resampler, Waveform
from .errors import ConfigError, NotFoundError, SessionClosedError, TargetCapError
from .fusion import fuse_embeddings

MAX_ACTIVE_TARGETS = 3


@dataclass
class StreamConfig:
    device_rate: int = 48_000
    model_rate: int = MODEL_RATE
    window_ms: float = 250.0
    hop_ms: float = 25.0
    buffer_cap_ms: float = 50.0
    alpha: float = 1.0
    max_targets: int = MAX_ACTIVE_TARGETS

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if self.window_ms < self.hop_ms:
            raise ConfigError("window must be at least one hop")
        for rate in (self.device_rate, self.model_rate):
            if rate * self.hop_ms % 1000:
                raise ConfigError(f"hop of {self.hop_ms} ms is fractional at {rate} Hz")

    @property
    def window_model(self) -> int:
        return int(self.model_rate * self.window_ms / 1000)

    @property
    def hop_model(self) -> int:
        return int(self.model_rate * self.hop_ms / 1000)

    @property
    def hop_device(self) -> int:
        return int(self.device_rate * self.hop_ms / 1000)

    @property
    def buffer_cap_device(self) -> int:
        return int(self.device_rate * self.buffer_cap_ms / 1000)


class _Queue:
    """Contiguous float32 FIFO backed by a preallocated arena; records every
    forced growth so the steady-state no-allocation invariant is checkable."""

    def __init__(self, capacity: int):
        self._buf = np.zeros(max(capacity, 16), dtype=np.float32)
        self._start = 0
        self._end = 0
        self.reallocs = 0

    def __len__(self) -> int:
        return self._end - self._start

    def push(self, x: np.ndarray) -> None:
        n = x.size
        if self._end + n > self._buf.size:
            live = self._buf[self._start:self._end]
            if live.size + n <= self._buf.size:
                self._buf[:live.size] = live  # compact in place
            else:
                grown = np.zeros(max(self._buf.size * 2, live.size + n), dtype=np.float32)
                grown[:live.size] = live
                self._buf = grown
                self.reallocs += 1
            self._end = live.size
            self._start = 0
        self._buf[self._end:self._end + n] = x
        self._end += n

    def pop(self, n: int) -> np.ndarray:
        n = min(n, len(self))
        out = self._buf[self._start:self._start + n].copy()
        self._start += n
        return out

    def peek(self, n: int) -> np.ndarray:
        n = min(n, len(self))
        return self._buf[self._start:self._start + n]

    def drop(self, n: int) -> None:
        self._start += min(n, len(self))


class StreamSession:
    """One live stream: single producer/consumer pair plus control ops.

    If a ``sink`` callable is supplied, each hop's output chunk is delivered
    to it directly and the capped pull buffer is bypassed (file processing and
    any transport that wants its own queueing). Without a sink, output
    accumulates in a buffer capped at ``buffer_cap_ms``; when the producer
    outruns the consumer the oldest samples are dropped so latency cannot
    drift.
    """

    def __init__(self, model, store, config: StreamConfig | None = None, sink=None,
                 mask_hook: str | None = None):
        torch.set_num_threads(1)  # small per-hop graphs run faster unsplit
        self.model = model
        self.store = store
        self.config = config or StreamConfig()
        if self.config.model_rate != model.config.sample_rate:
            raise ConfigError("stream model_rate must match the model's sample rate")
        self.sink = sink
        self.mask_hook = mask_hook  # test hook forcing a constant mask
        cfg = self.config

        self._down = Resampler(cfg.device_rate, cfg.model_rate)
        self._up = Resampler(cfg.model_rate, cfg.device_rate)
        self._resampled = cfg.device_rate != cfg.model_rate
        if self._resampled:
            # fixed sub-hop blocks: chunking independence needs fixed block
            # arithmetic, and a small block keeps the downsampler's lookahead
            # from costing a whole hop of input-side latency
            block = cfg.hop_device // 10 if cfg.hop_device % 10 == 0 else cfg.hop_device
            if block <= self._down.lookahead_in:
                block = cfg.hop_device
            self._block_dev = block
            ratio = cfg.device_rate / cfg.model_rate
            self.algorithmic_delay_samples = (
                self._block_dev + int(round(self._up.lookahead_in * ratio)))
        else:
            self._block_dev = cfg.hop_device
            self.algorithmic_delay_samples = 0
        self.hop_device_samples = cfg.hop_device
        self.buffer_cap_samples = cfg.buffer_cap_device

        self._window = np.zeros(cfg.window_model, dtype=np.float32)  # warm-up zeros
        self._pending = _Queue(4 * cfg.hop_model)
        self._rawdev = _Queue(4 * cfg.hop_device)
        self._dry = _Queue(8 * cfg.hop_device)
        self._wet = _Queue(8 * cfg.hop_device)
        self._out = _Queue(2 * self.buffer_cap_samples + cfg.hop_device)
        self._lstm_state = None

        self.alpha = cfg.alpha
        self.requested_alpha = cfg.alpha       # control-visible, pre-hop
        self.active_targets: tuple[str, ...] = ()
        self.requested_targets: tuple[str, ...] = ()
        self._cond: torch.Tensor | None = None
        self._pending_alpha: float | None = None
        self._pending_targets: tuple[tuple[str, ...], torch.Tensor | None] | None = None

        self.model_tap = None  # optional callable fed each model-rate chunk
        self.samples_in = 0
        self.model_samples_in = 0
        self.hops_run = 0
        self.samples_emitted = 0
        self.drops = 0
        self.underruns = 0
        self.buffer_highwater = 0
        self.hop_times_ms: list[float] = []
        self._closed = False

    # -- control ------------------------------------------------------------

    def set_targets(self, class_ids) -> None:
        """Validate and fuse now; swap in at the next hop boundary."""
        self._check_open()
        ids = tuple(class_ids)
        if len(ids) > self.config.max_targets:
            raise TargetCapError(
                f"{len(ids)} targets exceed the cap of {self.config.max_targets}")
        for cid in ids:
            if cid not in self.store:
                raise NotFoundError(f"unknown class {cid!r}")
        if ids:
            vectors = [self.store.vector(cid) for cid in ids]
            fused = fuse_embeddings(vectors, self.model.fusion)
            cond = torch.from_numpy(fused).reshape(1, -1)
        else:
            cond = None
        self.requested_targets = ids
        self._pending_targets = (ids, cond)

    def set_strength(self, alpha: float) -> None:
        self._check_open()
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha {alpha} outside [0, 1]")
        self.requested_alpha = float(alpha)
        self._pending_alpha = float(alpha)

    def close(self) -> None:
        self._closed = True

    def _check_open(self) -> None:
        if self._closed:
            raise SessionClosedError("session is closed")

    # -- data path ------------------------------------------------------------

    def push_input(self, samples: np.ndarray) -> None:
        """Feed device-rate samples; runs one inference hop per 25 ms of new
        audio beyond the current window position."""
        self._check_open()
        x = np.asarray(samples, dtype=np.float32).reshape(-1)
        if x.size == 0:
            return
        self.samples_in += x.size
        self._dry.push(x)
        if self._resampled:
            self._rawdev.push(x)
            while len(self._rawdev) >= self._block_dev:
                block = self._rawdev.pop(self._block_dev)
                got = self._down.process(block)
                if got.size:
                    self._pending.push(got)
                    self.model_samples_in += got.size
                    if self.model_tap is not None:
                        self.model_tap(got)
                self._maybe_hop()
        else:
            self._pending.push(x)
            self.model_samples_in += x.size
            if self.model_tap is not None:
                self.model_tap(x)
            self._maybe_hop()

    def _maybe_hop(self) -> None:
        cfg = self.config
        while len(self._pending) >= cfg.hop_model:
            t0 = time.perf_counter()
            self._apply_pending_controls()
            hop = self._pending.pop(cfg.hop_model)
            self._window[:-cfg.hop_model] = self._window[cfg.hop_model:]
            self._window[-cfg.hop_model:] = hop
            if self._cond is None:
                # passthrough: the dry hop is the output, bit-exact
                chunk = self._dry.pop(cfg.hop_device)
                self._emit(chunk)
            else:
                wet_model = self._suppress_window()
                wet_dev = self._up.process(wet_model) if self._resampled else wet_model
                if wet_dev.size:
                    self._wet.push(wet_dev)
                n = min(len(self._wet), len(self._dry))
                if n:
                    dry = self._dry.pop(n)
                    wet = self._wet.pop(n)
                    a = self.alpha
                    self._emit((1.0 - a) * dry + a * wet)
            self.hops_run += 1
            self.hop_times_ms.append((time.perf_counter() - t0) * 1000.0)

    def _suppress_window(self) -> np.ndarray:
        x = torch.from_numpy(self._window).unsqueeze(0)
        with torch.no_grad():
            y, self._lstm_state = self.model.forward_waveform(
                x, self._cond, state=self._lstm_state, mask_hook=self.mask_hook)
        return y[0, -self.config.hop_model:].numpy()

    def _apply_pending_controls(self) -> None:
        if self._pending_alpha is not None:
            self.alpha = self._pending_alpha
            self._pending_alpha = None
        if self._pending_targets is not None:
            ids, cond = self._pending_targets
            self._pending_targets = None
            self.active_targets = ids
            self._cond = cond
            if cond is None:
                # leaving suppression: discard wet leftovers, reset the chain
                self._wet = _Queue(8 * self.config.hop_device)
                if self._resampled:
                    self._up = Resampler(self.config.model_rate, self.config.device_rate)
                self._lstm_state = None

    def _emit(self, chunk: np.ndarray) -> None:
        self.samples_emitted += chunk.size
        if self.sink is not None:
            self.sink(chunk)
            return
        self._out.push(chunk)
        over = len(self._out) - self.buffer_cap_samples
        if over > 0:
            self._out.drop(over)
            self.drops += over
        self.buffer_highwater = max(self.buffer_highwater, len(self._out))

    def pull_output(self, n: int) -> np.ndarray:
        """Up to n buffered device-rate samples; short reads count underruns."""
        self._check_open()
        out = self._out.pop(n)
        if out.size < n:
            self.underruns += 1
        return out

    @property
    def output_occupancy(self) -> int:
        return len(self._out)

    @property
    def buffer_reallocs(self) -> int:
        queues = (self._pending, self._rawdev, self._dry, self._wet, self._out)
        return sum(q.reallocs for q in queues)


def process_file(model, store, wave: Waveform, targets, alpha: float,
                 config: StreamConfig | None = None) -> Waveform:
    """Offline harness over the identical hop loop; output length equals the
    input length and is delay-aligned with it."""
    cfg = config or StreamConfig(device_rate=wave.sample_rate, alpha=alpha)
    if cfg.device_rate != wave.sample_rate:
        raise ConfigError("config device_rate must match the file's sample rate")
    collected: list[np.ndarray] = []
    session = StreamSession(model, store, cfg, sink=collected.append)
    session.set_strength(alpha)
    session.set_targets(tuple(targets))
    session.push_input(wave.samples)
    # zero-pad the tail until every real input sample has been emitted
    guard = 0
    while session.samples_emitted < len(wave) and guard < 10_000:
        session.push_input(np.zeros(cfg.hop_device, dtype=np.float32))
        guard += 1
    session.close()
    out = np.concatenate(collected) if collected else np.zeros(0, dtype=np.float32)
    return Waveform(out[:len(wave)], wave.sample_rate)
