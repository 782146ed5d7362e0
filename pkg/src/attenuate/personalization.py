"""Personalization: custom sound-class lifecycle from recordings, sensitivity
profile management, and saved-snapshot conversion into drafts.

Finalizing a custom class builds its embedding from the draft's recordings
and inserts it into the store; model weights are never touched, which is the
point of the external-embedding design and is asserted by checkpoint-hash
equality in the tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, read_wav, write_wav
from .context import SensitivityProfile
from .embeddings import PROVENANCE_CUSTOM, EmbeddingStore, build_class_embedding
from .errors import EngineError, NotFoundError, TooShortError

TRIM_GATE_DBFS = -50.0
TRIM_HANGOVER_S = 0.1
MIN_RECORDING_S = 1.0


def trim_silence(wave: Waveform, gate_dbfs: float = TRIM_GATE_DBFS,
                 hangover_s: float = TRIM_HANGOVER_S) -> Waveform:
    """Strip leading/trailing audio below the gate, keeping a hangover margin."""
    x = wave.samples
    frame = max(1, wave.sample_rate // 100)  # 10 ms analysis frames
    n_frames = max(1, x.size // frame)
    rms = np.sqrt(np.mean(
        x[: n_frames * frame].reshape(n_frames, frame).astype(np.float64) ** 2, axis=1))
    level = 20.0 * np.log10(rms + 1e-12)
    voiced = np.flatnonzero(level > gate_dbfs)
    if voiced.size == 0:
        return Waveform(np.zeros(0, dtype=np.float32), wave.sample_rate)
    hang = int(hangover_s * wave.sample_rate)
    start = max(0, voiced[0] * frame - hang)
    stop = min(x.size, (voiced[-1] + 1) * frame + hang)
    return Waveform(x[start:stop].copy(), wave.sample_rate)


@dataclass
class CustomClassDraft:
    class_id: str
    recordings: list[Waveform] = field(default_factory=list)
    timestamps: list[float] = field(default_factory=list)

    @property
    def status(self) -> str:
        return "ready" if self.recordings else "draft"


def add_recording(draft: CustomClassDraft, wave: Waveform,
                  now: float | None = None) -> CustomClassDraft:
    """Append one recording; it must still be at least 1 s after silence
    trimming."""
    trimmed = trim_silence(wave)
    if trimmed.duration < MIN_RECORDING_S:
        raise TooShortError(
            f"recording is {trimmed.duration:.2f} s after trimming; need >= {MIN_RECORDING_S} s"
        )
    draft.recordings.append(trimmed)
    draft.timestamps.append(time.time() if now is None else now)
    return draft


def finalize_class(draft: CustomClassDraft, model, store: EmbeddingStore) -> EmbeddingStore:
    """Build the class embedding and insert it; no model weights change, and
    the class is immediately selectable by sessions."""
    if draft.status != "ready":
        raise TooShortError(f"draft {draft.class_id!r} has no recordings")
    emb = build_class_embedding(draft.recordings, model)
    store.upsert(draft.class_id, emb, PROVENANCE_CUSTOM,
                 recording_count=len(draft.recordings))
    return store


def unique_class_id(suggested: str, existing_ids) -> str:
    """Resolve a name collision by suffixing \"(2)\", \"(3)\", ..."""
    existing = set(existing_ids)
    if suggested not in existing:
        return suggested
    n = 2
    while f"{suggested} ({n})" in existing:
        n += 1
    return f"{suggested} ({n})"


def save_snapshot_as_draft(snapshot: Waveform, suggested_name: str,
                           existing_ids=(), now: float | None = None) -> CustomClassDraft:
    """Turn a gated-discovery snapshot into a draft seeded with that recording."""
    draft = CustomClassDraft(class_id=unique_class_id(suggested_name, existing_ids))
    draft.recordings.append(snapshot)
    draft.timestamps.append(time.time() if now is None else now)
    return draft


# ---------------------------------------------------------------------------
# Disk persistence
# ---------------------------------------------------------------------------


class DraftStore:
    """Drafts persist under ``<data_dir>/drafts/<class_id>/`` as float32 WAVs
    plus a manifest."""

    def __init__(self, data_dir):
        self.root = Path(data_dir) / "drafts"
        self.root.mkdir(parents=True, exist_ok=True)

    def _dir(self, class_id: str) -> Path:
        safe = class_id.replace("/", "_")
        return self.root / safe

    def save(self, draft: CustomClassDraft) -> None:
        d = self._dir(draft.class_id)
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("*.wav"):
            old.unlink()
        lines = [f"class_id={draft.class_id}"]
        for i, (rec, ts) in enumerate(zip(draft.recordings, draft.timestamps)):
            write_wav(d / f"{i:04d}.wav", rec, "float32")
            lines.append(f"recording={i:04d}.wav ts={ts:.6f} rate={rec.sample_rate}")
        (d / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    def load(self, class_id: str) -> CustomClassDraft:
        d = self._dir(class_id)
        manifest = d / "manifest.txt"
        if not manifest.exists():
            raise NotFoundError(f"no draft named {class_id!r}")
        draft = CustomClassDraft(class_id=class_id)
        for line in manifest.read_text(encoding="utf-8").splitlines():
            if line.startswith("recording="):
                parts = dict(kv.split("=", 1) for kv in line.split(" "))
                draft.recordings.append(read_wav(d / parts["recording"]))
                draft.timestamps.append(float(parts["ts"]))
        return draft

    def list_ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if (p / "manifest.txt").exists())

    def delete(self, class_id: str) -> None:
        d = self._dir(class_id)
        if d.exists():
            for p in d.iterdir():
                p.unlink()
            d.rmdir()


class ProfileStore:
    """Sensitivity profiles as a line-delimited text record file."""

    def __init__(self, path):
        self.path = Path(path)
        self._profiles: dict[str, SensitivityProfile] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                pid, _, desc = line.partition("\t")
                self._profiles[pid] = SensitivityProfile(pid, desc)

    def _persist(self) -> None:
        lines = [f"{p.profile_id}\t{p.description}" for p in self.list()]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    def list(self) -> list[SensitivityProfile]:
        return [self._profiles[k] for k in sorted(self._profiles)]

    def upsert(self, profile_id: str, description: str) -> SensitivityProfile:
        if not description.strip():
            raise EngineError("profile description must be non-empty")
        if not profile_id.strip():
            raise EngineError("profile id must be non-empty")
        prof = SensitivityProfile(profile_id, description)  # keywords recomputed
        self._profiles[profile_id] = prof
        self._persist()
        return prof

    def create(self, description: str) -> SensitivityProfile:
        n = 1
        while f"p{n}" in self._profiles:
            n += 1
        return self.upsert(f"p{n}", description)

    def delete(self, profile_id: str) -> None:
        if profile_id not in self._profiles:
            raise NotFoundError(f"no profile {profile_id!r}")
        del self._profiles[profile_id]
        self._persist()

    def get(self, profile_id: str) -> SensitivityProfile:
        try:
            return self._profiles[profile_id]
        except KeyError:
            raise NotFoundError(f"no profile {profile_id!r}") from None
