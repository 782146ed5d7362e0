"""Class-level target embeddings: construction, storage, retrieval.

The external store maps a class id to a 768-dim unit vector. Built-in and
custom entries live in the same dictionary and are indistinguishable to
fusion and suppression; teaching the engine a new sound only ever adds an
entry here, never touches model weights.

Embeddings are built from the suppression model's own encoder: bottleneck
activations are frequency-collapsed, pooled over time with attentive
statistics pooling, projected to 768 dims, and unit-normalized. Recordings
of the same class are averaged (sorted by content hash first, so the mean is
bit-exactly order-independent).
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .audio import Waveform, resample
from .errors import FormatError, NotFoundError, ShapeError, TooShortError

EMBED_DIM = 768
ASP_EPS = 1e-9

PROVENANCE_BUILTIN = "builtin"
PROVENANCE_CUSTOM = "custom"
_PROVENANCE_TAGS = {PROVENANCE_BUILTIN: 0, PROVENANCE_CUSTOM: 1}
_PROVENANCE_NAMES = {v: k for k, v in _PROVENANCE_TAGS.items()}

# Catalog of the built-in class identifiers shipped with the engine. Entries
# appear in a store once the training pipeline has produced their vectors.
BUILTIN_CLASS_IDS = (
    "air_conditioner", "alarm_clock", "baby_cry", "blender", "car_horn",
    "chewing", "construction", "crowd_chatter", "dishes_clattering", "dog_bark",
    "door_slam", "hair_dryer", "keyboard_typing", "lawn_mower", "leaf_blower",
    "metal_scraping", "motorcycle", "phone_ringing", "power_drill", "siren",
    "sniffing", "snoring", "tv_background", "vacuum_cleaner", "water_running",
)


@dataclass
class TargetEmbedding:
    """Unit vector identifying one suppressible class; 768-dim in production
    (the store and the wire format enforce that)."""

    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        norm = float(np.linalg.norm(self.vector))
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-5:
            raise ShapeError(f"embedding must be unit norm, got {norm}")


class AttentiveStatsPooling(nn.Module):
    """Attention-weighted mean/std pooling over time plus projection to the
    embedding space.

    a_t = softmax_t(w . tanh(V h_t + b));  mu = sum a_t h_t;
    sigma = sqrt(sum a_t h_t^2 - mu^2 + eps);  out = normalize(P z([mu; sigma])).

    z(.) standardizes the pooled statistics against a fixed population of
    generic reference signals (see :func:`calibrate_embedder`); without it,
    one common direction dominates every class and the projected embeddings
    collapse toward each other.
    """

    def __init__(self, feature_dim: int, attn_dim: int, embed_dim: int = EMBED_DIM):
        super().__init__()
        self.feature_dim = feature_dim
        self.V = nn.Parameter(torch.empty(attn_dim, feature_dim))
        self.b = nn.Parameter(torch.zeros(attn_dim))
        self.w = nn.Parameter(torch.empty(attn_dim))
        self.proj = nn.Linear(2 * feature_dim, embed_dim)
        # calibration statistics ride in the checkpoint but never train
        self.stats_mu = nn.Parameter(torch.zeros(2 * feature_dim), requires_grad=False)
        self.stats_sd = nn.Parameter(torch.ones(2 * feature_dim), requires_grad=False)

    def reset(self, generator: torch.Generator) -> None:
        a = 5 ** 0.5
        nn.init.kaiming_uniform_(self.V, a=a, generator=generator)
        nn.init.uniform_(self.w, -1.0, 1.0, generator=generator)
        nn.init.zeros_(self.b)
        nn.init.kaiming_uniform_(self.proj.weight, a=a, generator=generator)
        nn.init.zeros_(self.proj.bias)
        nn.init.zeros_(self.stats_mu)
        nn.init.ones_(self.stats_sd)

    def pool(self, frames: torch.Tensor) -> torch.Tensor:
        """frames [T, D] -> [2D] attention-weighted statistics."""
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise TooShortError("pooling requires at least one frame")
        scores = torch.tanh(frames @ self.V.T + self.b) @ self.w  # [T]
        attn = torch.softmax(scores, dim=0).unsqueeze(1)          # [T, 1]
        mu = (attn * frames).sum(dim=0)
        second = (attn * frames * frames).sum(dim=0)
        sigma = torch.sqrt(torch.clamp(second - mu * mu, min=0.0) + ASP_EPS)
        return torch.cat([mu, sigma])

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames [T, D] -> unit-norm [embed_dim]."""
        pooled = (self.pool(frames) - self.stats_mu) / self.stats_sd
        out = self.proj(pooled)
        return out / torch.linalg.norm(out).clamp(min=1e-12)


def attentive_stats_pool(frames: np.ndarray, pooling: AttentiveStatsPooling) -> np.ndarray:
    """Public pooling op on a [T, D] frame sequence; returns the [2D] stats."""
    arr = np.asarray(frames, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise TooShortError("attentive_stats_pool requires a non-empty [T, D] input")
    if arr.shape[1] != pooling.feature_dim:
        raise ShapeError(f"feature dim {arr.shape[1]} != pooling dim {pooling.feature_dim}")
    with torch.no_grad():
        return pooling.pool(torch.from_numpy(arr)).numpy()


def reference_signals(sample_rate: int = 16_000, seconds: float = 2.0,
                      seed: int = 9090) -> list[Waveform]:
    """Fixed class-agnostic calibration population: white noise, tones, and
    band-limited noise across the spectrum."""
    n = int(seconds * sample_rate)
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(seed)
    waves = []
    for k in range(4):
        waves.append(rng.standard_normal(n) * 0.3)
        waves.append(0.4 * np.sin(2 * np.pi * (100 * 2 ** k) * t))
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        lo, hi = 100 * 2 ** k, 200 * 2 ** k
        spec[(freqs < lo) | (freqs > hi)] = 0.0
        band = np.fft.irfft(spec, n)
        waves.append(band / (np.abs(band).max() + 1e-9) * 0.4)
    return [Waveform(w.astype(np.float32), sample_rate) for w in waves]


def calibrate_embedder(model) -> None:
    """Standardize the pooled-statistics space against the fixed reference
    population. Run at init and after any encoder update the embeddings
    should track."""
    pooled = []
    with torch.no_grad():
        for ref in reference_signals(model.config.sample_rate):
            x = torch.from_numpy(ref.samples).unsqueeze(0)
            feats = model.encode_features(x).squeeze(0)
            pooled.append(model.embedder.pool(feats))
        stack = torch.stack(pooled)
        model.embedder.stats_mu.copy_(stack.mean(dim=0))
        model.embedder.stats_sd.copy_(stack.std(dim=0) + 1e-6)


def utterance_embedding(wave: Waveform, model) -> np.ndarray:
    """One recording -> unit-norm 768 vector via the model's encoder."""
    if wave.duration < 1.0:
        raise TooShortError(f"recording of {wave.duration:.2f} s is shorter than 1 s")
    if wave.sample_rate != model.config.sample_rate:
        wave = resample(wave, model.config.sample_rate)
    x = torch.from_numpy(wave.samples).unsqueeze(0)
    with torch.no_grad():
        feats = model.encode_features(x).squeeze(0)  # [T, D]
        emb = model.embedder(feats)
    return emb.numpy().astype(np.float32)


def build_class_embedding(recordings: list[Waveform], model) -> TargetEmbedding:
    """Average utterance embeddings over the recordings of one class."""
    if not recordings:
        raise TooShortError("at least one recording is required")
    for i, rec in enumerate(recordings):
        if rec.duration < 1.0:
            raise TooShortError(
                f"recording {i} is {rec.duration:.2f} s; each must be at least 1 s"
            )
    # sort by content hash so the mean is independent of recording order
    keyed = sorted(recordings, key=lambda r: hashlib.sha256(r.samples.tobytes()).hexdigest())
    embs = np.stack([utterance_embedding(r, model) for r in keyed])
    mean = embs.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-12:
        raise ShapeError("degenerate class embedding (zero mean vector)")
    return TargetEmbedding(mean / norm)


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

STORE_MAGIC = b"EMBD"
STORE_VERSION = 1


@dataclass
class StoreEntry:
    embedding: TargetEmbedding
    provenance: str
    recording_count: int


class EmbeddingStore:
    """class_id -> (embedding, provenance, recording count).

    Lookups are lock-free; upserts serialize through a lock and replace whole
    entries, so readers never observe torn state. The binary format carries
    768-dim vectors; smaller dimensions exist only in-memory for reduced test
    models.
    """

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim
        self._entries: dict[str, StoreEntry] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, class_id: str) -> bool:
        return class_id in self._entries

    def ids(self) -> list[str]:
        return sorted(self._entries)

    def upsert(self, class_id: str, embedding: TargetEmbedding,
               provenance: str = PROVENANCE_CUSTOM, recording_count: int = 0) -> None:
        if not class_id:
            raise ShapeError("class_id must be non-empty")
        if embedding.vector.size != self.dim:
            raise ShapeError(
                f"store embeddings must be {self.dim}-dim, got {embedding.vector.size}")
        if provenance not in _PROVENANCE_TAGS:
            raise ShapeError(f"unknown provenance {provenance!r}")
        with self._lock:
            self._entries[class_id] = StoreEntry(embedding, provenance, recording_count)

    def get(self, class_id: str) -> StoreEntry:
        try:
            return self._entries[class_id]
        except KeyError:
            raise NotFoundError(f"no embedding for class {class_id!r}") from None

    def vector(self, class_id: str) -> np.ndarray:
        return self.get(class_id).embedding.vector

    def save(self, path) -> None:
        if self.dim != EMBED_DIM:
            raise ShapeError(f"store file format carries {EMBED_DIM}-dim vectors")
        blob = bytearray()
        blob += STORE_MAGIC
        blob += struct.pack("<II", STORE_VERSION, len(self._entries))
        for class_id in sorted(self._entries):
            entry = self._entries[class_id]
            idb = class_id.encode("utf-8")
            blob += struct.pack("<H", len(idb)) + idb
            blob += struct.pack("<BI", _PROVENANCE_TAGS[entry.provenance],
                                entry.recording_count)
            blob += entry.embedding.vector.astype("<f4").tobytes()
        with open(path, "wb") as fh:
            fh.write(blob)

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < 12 or data[:4] != STORE_MAGIC:
            raise FormatError("bad store magic", offset=0)
        version, count = struct.unpack_from("<II", data, 4)
        if version != STORE_VERSION:
            raise FormatError(f"unsupported store version {version}", offset=4)
        pos = 12
        parsed: list[tuple[str, StoreEntry]] = []
        for _ in range(count):
            if pos + 2 > len(data):
                raise FormatError("truncated store record", offset=pos)
            (idlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + idlen + 5 + 4 * EMBED_DIM > len(data):
                raise FormatError("truncated store record", offset=pos)
            class_id = data[pos:pos + idlen].decode("utf-8")
            pos += idlen
            tag, rec_count = struct.unpack_from("<BI", data, pos)
            pos += 5
            if tag not in _PROVENANCE_NAMES:
                raise FormatError(f"unknown provenance tag {tag}", offset=pos - 5)
            vec = np.frombuffer(data, dtype="<f4", count=EMBED_DIM, offset=pos).copy()
            pos += 4 * EMBED_DIM
            parsed.append((class_id, StoreEntry(TargetEmbedding(vec),
                                                _PROVENANCE_NAMES[tag], rec_count)))
        store = cls()
        for class_id, entry in parsed:
            store._entries[class_id] = entry
        return store
