"""Waveform representation, WAV I/O, resampling, A-weighted metering, STFT front-end.

All audio in the engine is mono float32 in [-1, 1]. The STFT/iSTFT pair is
implemented once in torch (so the suppression network can differentiate
through it) and exposed here behind a numpy API.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import gcd

import numpy as np
import torch

from .errors import (
    ConfigError,
    DegenerateSignalError,
    FormatError,
    TooShortError,
    UnsupportedError,
)

MODEL_RATE = 16_000

# IEC 61672 analog pole frequencies for the A-curve.
_A_F1 = 20.598997
_A_F2 = 107.65265
_A_F3 = 737.86223
_A_F4 = 12194.217

DEFAULT_REFERENCE_DBA = 94.0
SILENCE_FLOOR_DBA = -120.0

RESAMPLER_TAPS_PER_PHASE = 64
RESAMPLER_KAISER_BETA = 9.0


@dataclass
class Waveform:
    """Mono sample buffer with its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ConfigError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """Time-frequency grid produced by :func:`stft`.

    ``num_samples`` records the pre-padding waveform length so the inverse
    transform can trim to the exact original extent.
    """

    frames: np.ndarray  # [T_f, F] complex
    window_size: int
    hop_size: int
    sample_rate: int
    num_samples: int

    def __post_init__(self):
        if self.frames.ndim != 2:
            raise ConfigError("spectrogram frames must be 2-D [T_f, F]")
        if self.frames.shape[1] != self.window_size // 2 + 1:
            raise ConfigError(
                f"bin count {self.frames.shape[1]} != window/2+1 = {self.window_size // 2 + 1}"
            )
        if self.hop_size > self.window_size:
            raise ConfigError("hop must not exceed window")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def num_bins(self) -> int:
        return int(self.frames.shape[1])


class RollingBuffer:
    """Fixed-capacity ring of the most recent samples.

    Single writer, single reader; ``snapshot`` copies and never blocks the
    writer.
    """

    def __init__(self, capacity: int, sample_rate: int):
        if capacity <= 0:
            raise ConfigError("capacity must be positive")
        self.capacity = int(capacity)
        self.sample_rate = int(sample_rate)
        self._buf = np.zeros(self.capacity, dtype=np.float32)
        self._pos = 0  # next write offset
        self._written = 0

    def write(self, samples: np.ndarray) -> None:
        x = np.asarray(samples, dtype=np.float32).reshape(-1)
        n = x.size
        if n == 0:
            return
        if n >= self.capacity:
            self._buf[:] = x[-self.capacity:]
            self._pos = 0
        else:
            first = min(n, self.capacity - self._pos)
            self._buf[self._pos:self._pos + first] = x[:first]
            if n > first:
                self._buf[:n - first] = x[first:]
            self._pos = (self._pos + n) % self.capacity
        self._written += n

    @property
    def written(self) -> int:
        return self._written

    def snapshot(self) -> np.ndarray:
        """Most recent ``min(written, capacity)`` samples in arrival order."""
        if self._written < self.capacity:
            return self._buf[:self._written].copy()
        return np.concatenate([self._buf[self._pos:], self._buf[:self._pos]])


# ---------------------------------------------------------------------------
# WAV I/O (RIFF/WAVE, PCM16 LE and IEEE float32 only)
# ---------------------------------------------------------------------------

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE file; multichannel input is downmixed by channel mean."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE file", offset=0)

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise FormatError("fmt chunk too small", offset=pos)
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < size:
                raise FormatError("data chunk truncated", offset=pos)
            payload = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise FormatError("missing fmt chunk")
    if payload is None:
        raise FormatError("missing data chunk")

    tag, channels, rate, _byte_rate, block_align, bits = fmt
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        raise UnsupportedError("WAVE_FORMAT_EXTENSIBLE not supported")
    if channels < 1:
        raise FormatError("channel count must be >= 1")

    if tag == _WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) // block_align * block_align], dtype="<i2")
        samples = raw.astype(np.float32) / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) // block_align * block_align], dtype="<f4")
        samples = raw.astype(np.float32)
    else:
        raise UnsupportedError(f"unsupported encoding: format tag {tag}, {bits} bits")

    if channels > 1:
        usable = samples.size // channels * channels
        samples = samples[:usable].reshape(-1, channels).mean(axis=1).astype(np.float32)
    return Waveform(samples, rate)


def write_wav(path, wave: Waveform, encoding: str = "float32") -> None:
    """Write mono WAV; ``encoding`` is ``pcm16`` or ``float32``."""
    if encoding == "pcm16":
        tag, bits = _WAVE_FORMAT_PCM, 16
        pcm = np.clip(np.rint(wave.samples.astype(np.float64) * 32768.0), -32768, 32767)
        payload = pcm.astype("<i2").tobytes()
    elif encoding == "float32":
        tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
        payload = wave.samples.astype("<f4").tobytes()
    else:
        raise UnsupportedError(f"unsupported encoding {encoding!r}")

    block_align = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, tag, 1, wave.sample_rate,
        wave.sample_rate * block_align, block_align, bits,
        b"data", len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header + payload)


# ---------------------------------------------------------------------------
# Resampling: windowed-sinc polyphase, 64 taps per phase, Kaiser beta = 9
# ---------------------------------------------------------------------------


def _prototype(up: int, down: int) -> tuple[np.ndarray, int]:
    """Lowpass prototype for conversion by up/down: odd length 64*up + 1,
    Kaiser window, group delay of exactly 32 input samples."""
    ntaps = RESAMPLER_TAPS_PER_PHASE * up + 1
    center = (ntaps - 1) // 2  # == 32 * up
    n = np.arange(ntaps, dtype=np.float64) - center
    cutoff = 1.0 / max(up, down)  # cycles/sample at the upsampled rate, x2
    h = cutoff * np.sinc(cutoff * n) * np.kaiser(ntaps, RESAMPLER_KAISER_BETA)
    h = h / np.sum(h) * up  # unit passband gain after zero-stuffing
    return h, center


class Resampler:
    """Streaming polyphase rational resampler between two fixed rates.

    ``process`` may be fed the stream in chunks; an output sample is emitted
    as soon as the filter's 32-input-sample lookahead is satisfied. Output
    sample m is a fixed dot product over input window ending at
    ``(center + m*down) // up``, so results are bit-identical for any
    partition of the input into fixed-size blocks.
    """

    def __init__(self, from_rate: int, to_rate: int):
        if from_rate <= 0 or to_rate <= 0:
            raise ConfigError("rates must be positive")
        g = gcd(from_rate, to_rate)
        self.from_rate = from_rate
        self.to_rate = to_rate
        self.up = to_rate // g
        self.down = from_rate // g
        self.identity = from_rate == to_rate
        self.lookahead_in = 0
        if self.identity:
            return
        self._h, self._center = _prototype(self.up, self.down)
        self._width = (self._h.size - 1) // self.up + 1  # inputs under the kernel
        self.lookahead_in = self._center // self.up      # 32 input samples
        self._hist = np.zeros(0, dtype=np.float64)
        self._hist_start = 0  # input index of _hist[0]
        self._n_in = 0        # input samples received
        self._n_out = 0       # output samples emitted

    def process(self, chunk: np.ndarray) -> np.ndarray:
        """Feed input samples; returns every output sample now computable."""
        x = np.asarray(chunk, dtype=np.float64).reshape(-1)
        if self.identity:
            return x.astype(np.float32)
        self._hist = np.concatenate([self._hist, x])
        self._n_in += x.size
        # output m reads inputs up to (center + m*down) // up
        m_stop = max((self.up * self._n_in - 1 - self._center) // self.down + 1, self._n_out)
        out = self._compute(self._n_out, m_stop)
        self._n_out = m_stop
        self._trim_history()
        return out

    def flush(self) -> np.ndarray:
        """Drain the lookahead with zero padding (end of stream)."""
        if self.identity:
            return np.zeros(0, dtype=np.float32)
        total = _output_length(self._n_in, self.from_rate, self.to_rate)
        self._hist = np.concatenate([self._hist, np.zeros(2 * self.lookahead_in)])
        out = self._compute(self._n_out, total)
        self._n_out = total
        return out

    def _compute(self, m_start: int, m_stop: int) -> np.ndarray:
        if m_stop <= m_start:
            return np.zeros(0, dtype=np.float32)
        taps, ntaps = self._h, self._h.size
        pos = self._center + np.arange(m_start, m_stop) * self.down
        q_hi = pos // self.up  # newest input index under the kernel
        idx = q_hi[:, None] + np.arange(-(self._width - 1), 1)[None, :]
        k = pos[:, None] - idx * self.up  # tap index for each input
        tap_ok = (k >= 0) & (k < ntaps)
        tapv = np.where(tap_ok, taps[np.clip(k, 0, ntaps - 1)], 0.0)
        rel = idx - self._hist_start
        in_hist = (idx >= 0) & (rel >= 0) & (rel < self._hist.size)
        vals = np.where(in_hist, self._hist[np.clip(rel, 0, self._hist.size - 1)], 0.0)
        return np.einsum("mw,mw->m", vals, tapv).astype(np.float32)

    def _trim_history(self) -> None:
        oldest_needed = (self._center + self._n_out * self.down) // self.up - self._width + 1
        keep_from = max(0, oldest_needed - self._hist_start)
        if keep_from > 0:
            self._hist = self._hist[keep_from:]
            self._hist_start += keep_from


def _output_length(n_in: int, from_rate: int, to_rate: int) -> int:
    return int(np.floor(n_in * to_rate / from_rate + 0.5))


def resample(wave: Waveform, to_rate: int) -> Waveform:
    """Band-limited rate conversion; identity when rates match."""
    if to_rate <= 0:
        raise ConfigError("to_rate must be positive")
    if to_rate == wave.sample_rate:
        return Waveform(wave.samples.copy(), to_rate)
    rs = Resampler(wave.sample_rate, to_rate)
    chunks = []
    x = wave.samples
    for start in range(0, x.size, 1 << 16):
        chunks.append(rs.process(x[start:start + (1 << 16)]))
    chunks.append(rs.flush())
    out = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)
    want = _output_length(len(wave), wave.sample_rate, to_rate)
    if out.size < want:
        out = np.concatenate([out, np.zeros(want - out.size, dtype=np.float32)])
    return Waveform(out[:want], to_rate)


# ---------------------------------------------------------------------------
# A-weighted level
# ---------------------------------------------------------------------------


def a_weighting_gain_db(freq_hz) -> np.ndarray:
    """IEC 61672 A-curve response in dB, normalized to 0 dB at 1 kHz."""
    f = np.asarray(freq_hz, dtype=np.float64)
    f2 = f * f

    def _ra(fsq):
        num = (_A_F4 ** 2) * fsq * fsq
        den = (
            (fsq + _A_F1 ** 2)
            * np.sqrt((fsq + _A_F2 ** 2) * (fsq + _A_F3 ** 2))
            * (fsq + _A_F4 ** 2)
        )
        return num / den

    with np.errstate(divide="ignore"):
        gain = 20.0 * np.log10(_ra(f2) / _ra(np.float64(1000.0) ** 2))
    return gain


def a_weighted_level(wave: Waveform, reference_dba: float = DEFAULT_REFERENCE_DBA) -> float:
    """A-weighted level in dBA, calibrated so a full-scale 1 kHz sine reads
    ``reference_dba``. Clamped at a -120 dBA silence floor."""
    if len(wave) == 0:
        raise DegenerateSignalError("cannot meter an empty waveform")
    x = wave.samples.astype(np.float64)
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, d=1.0 / wave.sample_rate)
    w = 10.0 ** (a_weighting_gain_db(freqs) / 20.0)
    w[0] = 0.0  # DC carries no A-weighted energy
    power = np.abs(spec) ** 2 * w ** 2
    # one-sided spectrum: double interior bins (Parseval)
    scale = np.full(power.size, 2.0)
    scale[0] = 1.0
    if x.size % 2 == 0:
        scale[-1] = 1.0
    mean_square = float(np.sum(power * scale)) / (x.size ** 2)
    if mean_square <= 0.0:
        return SILENCE_FLOOR_DBA
    # full-scale sine has mean square 0.5
    level = 10.0 * np.log10(mean_square / 0.5) + reference_dba
    return max(level, SILENCE_FLOOR_DBA)


# ---------------------------------------------------------------------------
# STFT / iSTFT  (sqrt-Hann analysis and synthesis, COLA at hop = window/4)
# ---------------------------------------------------------------------------


def sqrt_hann_window(window_size: int, dtype=torch.float32) -> torch.Tensor:
    return torch.sqrt(torch.hann_window(window_size, periodic=True, dtype=dtype))


def _check_stft_args(length: int, window_size: int, hop_size: int) -> None:
    if window_size & (window_size - 1):
        raise ConfigError("window_size must be a power of two")
    if window_size % hop_size:
        raise ConfigError("hop_size must divide window_size")
    if length < window_size // 2 + 1:
        raise TooShortError(
            f"waveform of {length} samples is too short for window {window_size}"
        )


def stft_torch(x: torch.Tensor, window_size: int, hop_size: int,
               window: torch.Tensor | None = None) -> torch.Tensor:
    """Batched STFT: x [B, L] -> complex [B, T_f, F] with reflect padding of
    window/2 on both ends; T_f = L // hop + 1."""
    if window is None:
        window = sqrt_hann_window(window_size, dtype=x.dtype)
    half = window_size // 2
    xp = torch.nn.functional.pad(x.unsqueeze(1), (half, half), mode="reflect").squeeze(1)
    frames = xp.unfold(-1, window_size, hop_size)  # [B, T, W]
    return torch.fft.rfft(frames * window, dim=-1)


def istft_torch(spec: torch.Tensor, window_size: int, hop_size: int, length: int,
                window: torch.Tensor | None = None) -> torch.Tensor:
    """Inverse of :func:`stft_torch`: complex [B, T_f, F] -> [B, length].

    Normalizes by the accumulated window-square sum so the round trip is
    exact everywhere the original signal was covered.
    """
    if window is None:
        window = sqrt_hann_window(window_size, dtype=torch.float32)
        if spec.dtype == torch.complex128:
            window = window.to(torch.float64)
    frames = torch.fft.irfft(spec, n=window_size, dim=-1) * window  # [B, T, W]
    n_frames = frames.shape[1]
    padded_len = (n_frames - 1) * hop_size + window_size
    ola = torch.nn.functional.fold(
        frames.permute(0, 2, 1),
        output_size=(1, padded_len),
        kernel_size=(1, window_size),
        stride=(1, hop_size),
    ).reshape(frames.shape[0], padded_len)
    wsq = torch.nn.functional.fold(
        (window * window).expand(n_frames, -1).T.unsqueeze(0),
        output_size=(1, padded_len),
        kernel_size=(1, window_size),
        stride=(1, hop_size),
    ).reshape(padded_len)
    out = ola / torch.clamp(wsq, min=1e-10)
    half = window_size // 2
    return out[:, half:half + length]


def stft(wave: Waveform, window_size: int = 512, hop_size: int = 128) -> ComplexSpectrogram:
    _check_stft_args(len(wave), window_size, hop_size)
    x = torch.from_numpy(wave.samples.astype(np.float64)).unsqueeze(0)
    spec = stft_torch(x, window_size, hop_size,
                      window=sqrt_hann_window(window_size, dtype=torch.float64))
    return ComplexSpectrogram(
        frames=spec.squeeze(0).numpy().astype(np.complex64),
        window_size=window_size,
        hop_size=hop_size,
        sample_rate=wave.sample_rate,
        num_samples=len(wave),
    )


def istft(spec: ComplexSpectrogram) -> Waveform:
    if spec.hop_size > spec.window_size or spec.window_size % spec.hop_size:
        raise ConfigError("inconsistent window/hop metadata")
    expected = spec.num_samples // spec.hop_size + 1
    if spec.num_frames != expected:
        raise ConfigError(
            f"frame count {spec.num_frames} inconsistent with num_samples "
            f"{spec.num_samples} (expected {expected})"
        )
    s = torch.from_numpy(spec.frames.astype(np.complex128)).unsqueeze(0)
    y = istft_torch(s, spec.window_size, spec.hop_size, spec.num_samples,
                    window=sqrt_hann_window(spec.window_size, dtype=torch.float64))
    return Waveform(y.squeeze(0).numpy().astype(np.float32), spec.sample_rate)
