"""Context reasoning: periodic classification of the live stream, suggestions
for supported-but-unselected classes, and gated discovery of unsupported
sounds matched against the user's sensitivity profiles.

The classifier, the sound describer, and the profile judge are pluggable
interfaces. The built-in stubs are deterministic: a spectral-template
nearest-neighbor classifier over the synthetic classes, a feature-template
describer, and a token-overlap judge, so the whole loop runs offline.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .audio import RollingBuffer, Waveform, a_weighted_level
from .datagen import TOY_CLASSES, synth_class_clip
from .errors import DegenerateSignalError, EngineError
from .personalization_keywords import derive_keywords

QUIET_THRESHOLD_DBA = 45.0
LOUD_THRESHOLD_DBA = 75.0
LOUD_MODE_MEDIAN_DBA = 60.0
SNAPSHOT_SECONDS = 10.0
SUGGESTION_EXPIRY_S = 8.0
SUGGESTION_COOLDOWN_S = 60.0
MATCH_THRESHOLD = 0.2
SUGGEST_MIN_CONFIDENCE = 0.25
TOP_N = 3


@dataclass
class ClassifierResult:
    """Ranked labels with confidences, descending."""

    labels: list[tuple[str, float]]
    timestamp: float = 0.0

    def __post_init__(self):
        confs = [c for _, c in self.labels]
        if any(not 0.0 <= c <= 1.0 for c in confs):
            raise EngineError("confidences must be in [0, 1]")
        if any(confs[i] < confs[i + 1] for i in range(len(confs) - 1)):
            raise EngineError("confidences must be descending")

    def top(self, n: int = TOP_N) -> list[tuple[str, float]]:
        return self.labels[:n]

    @property
    def empty(self) -> bool:
        return not self.labels


@dataclass
class LabelMapping:
    """External classifier label -> internal class id (None = unmapped)."""

    table: dict[str, str | None]

    def map(self, label: str) -> str | None:
        return self.table.get(label)

    @classmethod
    def identity(cls, class_ids) -> "LabelMapping":
        return cls({cid: cid for cid in class_ids})

    @classmethod
    def from_file(cls, path) -> "LabelMapping":
        table: dict[str, str | None] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                ext, _, internal = line.partition("\t")
                table[ext] = internal or None
        return cls(table)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ext in sorted(self.table):
                fh.write(f"{ext}\t{self.table[ext] or ''}\n")


@dataclass
class SensitivityProfile:
    """User-authored description of bothersome sound qualities."""

    profile_id: str
    description: str
    keywords: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.description.strip():
            raise EngineError("profile description must be non-empty")
        if not self.keywords:
            self.keywords = derive_keywords(self.description)


@dataclass
class Suggestion:
    suggestion_id: str
    kind: str                      # "known-class" | "save-unknown"
    created: float
    expiry: float
    class_id: str | None = None
    snapshot_ref: str | None = None
    description: str | None = None
    profile_id: str | None = None

    def __post_init__(self):
        if self.expiry <= self.created:
            raise EngineError("suggestion expiry must be after creation")
        if self.kind == "known-class" and not self.class_id:
            raise EngineError("known-class suggestions must reference a class id")


# ---------------------------------------------------------------------------
# Pluggable stubs
# ---------------------------------------------------------------------------


def _band_features(wave: Waveform, bands: int = 10) -> np.ndarray:
    """Log band energies + spectral flatness + onset rate; the shared feature
    vector for the stub classifier and describer."""
    x = wave.samples.astype(np.float64)
    spec = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.size, 1.0 / wave.sample_rate)
    edges = np.geomspace(50.0, min(7500.0, wave.sample_rate / 2 * 0.95), bands + 1)
    feats = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (freqs >= lo) & (freqs < hi)
        feats.append(np.log10(spec[sel].sum() + 1e-12))
    body = spec[freqs > 30.0]
    flatness = float(np.exp(np.mean(np.log(body + 1e-12))) / (np.mean(body) + 1e-12))
    # onset rate from the envelope derivative; absolute floor keeps steady
    # signals from triggering on numerical ripple
    frame = max(1, wave.sample_rate // 100)
    env = np.sqrt(np.convolve(x * x, np.ones(frame) / frame, mode="same") + 1e-12)
    denv = np.diff(env)
    thresh = max(3.0 * float(np.std(denv)), 0.15 * float(np.mean(env)), 1e-9)
    onsets = np.sum((denv[1:] > thresh) & (denv[:-1] <= thresh)) / wave.duration
    feats.extend([10.0 * flatness, min(onsets, 20.0) / 2.0])
    return np.asarray(feats)


class SpectralTemplateClassifier:
    """Nearest-template classifier over the synthetic classes; confidences via
    a softmax over negative distances."""

    def __init__(self, class_ids=TOY_CLASSES, prototypes: int = 3, seed: int = 1234,
                 temperature: float = 4.0):
        self.class_ids = tuple(class_ids)
        self.temperature = temperature
        self._templates = {}
        for ci, cid in enumerate(self.class_ids):
            rows = []
            for j in range(prototypes):
                rng = np.random.Generator(np.random.PCG64(
                    np.random.SeedSequence(entropy=seed, spawn_key=(ci, j))))
                clip = synth_class_clip(cid, rng, duration=2.0)
                rows.append(_band_features(clip))
            self._templates[cid] = np.mean(rows, axis=0)

    def classify(self, window: Waveform) -> list[tuple[str, float]]:
        if len(window) == 0 or float(np.max(np.abs(window.samples))) < 1e-6:
            return []
        f = _band_features(window)
        dists = {cid: float(np.linalg.norm(f - t)) for cid, t in self._templates.items()}
        scale = min(dists.values()) + 1e-9
        logits = np.array([-dists[cid] / scale * self.temperature for cid in self.class_ids])
        conf = np.exp(logits - logits.max())
        conf /= conf.sum()
        ranked = sorted(zip(self.class_ids, conf.tolist()), key=lambda kv: -kv[1])
        return [(cid, float(c)) for cid, c in ranked]


def classify_tick(window: Waveform, classifier) -> ClassifierResult:
    """Delegate one ~1 s window to the classifier; failures yield an empty
    result rather than propagating into the audio path."""
    try:
        return ClassifierResult(labels=classifier.classify(window))
    except Exception:
        return ClassifierResult(labels=[])


class FeatureDescriber:
    """Template describer from measured features: dominant band, tonality,
    onset character."""

    def describe(self, snapshot: Waveform) -> str:
        if len(snapshot) < snapshot.sample_rate:
            raise DegenerateSignalError("snapshot shorter than 1 s")
        x = snapshot.samples.astype(np.float64)
        if float(np.max(np.abs(x))) < 1e-5:
            raise DegenerateSignalError("snapshot is silent")
        spec = np.abs(np.fft.rfft(x)) ** 2
        freqs = np.fft.rfftfreq(x.size, 1.0 / snapshot.sample_rate)
        body = (freqs > 30.0)
        centroid = float(np.sum(freqs[body] * spec[body]) / (np.sum(spec[body]) + 1e-12))
        dominant = float(freqs[np.argmax(spec * body)])
        pitch_hz = max(centroid, dominant)
        flatness = float(np.exp(np.mean(np.log(spec[body] + 1e-12)))
                         / (np.mean(spec[body]) + 1e-12))
        feats = _band_features(snapshot)
        onset_rate = feats[-1] * 2.0

        band = ("low-frequency" if pitch_hz < 300 else
                "mid-frequency" if pitch_hz < 2000 else "high-frequency")
        tone = ("tonal" if flatness < 0.1 else
                "broadband" if flatness > 0.4 else "textured")
        if onset_rate >= 3.0:
            temporal = "rapidly pulsing"
        elif onset_rate >= 0.75:
            temporal = "intermittent"
        else:
            temporal = "steady"
        kind = "mechanical" if tone != "tonal" else "whining"
        return f"{band} {tone} {temporal} {kind} sound"


def describe_sound(snapshot: Waveform, describer) -> str | None:
    """Natural-language description of a snapshot; None when the describer
    cannot produce one (pipeline degrades to no-match)."""
    try:
        return describer.describe(snapshot)
    except Exception:
        return None


class TokenOverlapJudge:
    """Stemmed keyword Jaccard overlap between a description and a profile."""

    def score(self, description: str, profile: SensitivityProfile) -> float:
        d = derive_keywords(description)
        p = profile.keywords
        if not d or not p:
            return 0.0
        return len(d & p) / len(d | p)


def match_profile(description: str, profiles: list[SensitivityProfile],
                  judge=None, threshold: float = MATCH_THRESHOLD) -> str | None:
    """Best-matching profile id at or above the score threshold; ties go to
    the lowest profile id."""
    judge = judge or TokenOverlapJudge()
    best_id, best_score = None, -1.0
    for prof in sorted(profiles, key=lambda p: p.profile_id):
        s = judge.score(description, prof)
        if s >= threshold and s > best_score:
            best_id, best_score = prof.profile_id, s
    return best_id


# ---------------------------------------------------------------------------
# Rules
# ---------------------------------------------------------------------------


def suggest_known(result: ClassifierResult, mapping: LabelMapping, active_targets,
                  now: float = 0.0, cooldown_until: dict[str, float] | None = None,
                  expiry_s: float = SUGGESTION_EXPIRY_S,
                  min_confidence: float = SUGGEST_MIN_CONFIDENCE,
                  suggestion_id: str = "s0") -> Suggestion | None:
    """Suggest the highest-ranked confidently-detected mapped label that is
    not currently selected and not inside its cooldown window."""
    active = set(active_targets)
    cooldown_until = cooldown_until or {}
    for label, conf in result.labels:
        if conf < min_confidence:
            break  # confidences are descending; nothing below is a detection
        cid = mapping.map(label)
        if cid is None:
            continue
        if cid in active:
            continue
        if cooldown_until.get(cid, -np.inf) > now:
            continue
        return Suggestion(suggestion_id=suggestion_id, kind="known-class",
                          created=now, expiry=now + expiry_s, class_id=cid)
    return None


def gate_unknown(result: ClassifierResult, mapping: LabelMapping, level_dba: float,
                 mode: str, buffer: RollingBuffer, now: float = 0.0,
                 snapshot_seconds: float = SNAPSHOT_SECONDS):
    """Fires iff none of the top-3 labels maps to a supported class AND the
    level clears the mode threshold (45 dBA quiet / 75 dBA loud). Returns the
    most recent 10 s snapshot on fire."""
    if mode not in ("quiet", "loud"):
        raise EngineError(f"unknown mode {mode!r}")
    if result.empty:
        return None
    if any(mapping.map(label) is not None for label, _ in result.top(TOP_N)):
        return None
    threshold = QUIET_THRESHOLD_DBA if mode == "quiet" else LOUD_THRESHOLD_DBA
    if level_dba < threshold:
        return None
    want = int(snapshot_seconds * buffer.sample_rate)
    if buffer.capacity < want:
        raise EngineError("rolling buffer capacity is below the snapshot length")
    snap = buffer.snapshot()
    return Waveform(snap[-want:], buffer.sample_rate)


def derive_mode(trailing_median_dba: float) -> str:
    """Loud surroundings when the trailing 30 s median level is >= 60 dBA."""
    return "loud" if trailing_median_dba >= LOUD_MODE_MEDIAN_DBA else "quiet"


# ---------------------------------------------------------------------------
# Engine: stateful wrapper driven once per second of stream time
# ---------------------------------------------------------------------------


@dataclass
class ContextEvent:
    kind: str                               # "detection" | "suggestion"
    detection: ClassifierResult | None = None
    suggestion: Suggestion | None = None
    snapshot: Waveform | None = None


class ContextEngine:
    """Runs on the analysis cadence, off the real-time path."""

    def __init__(self, classifier, mapping: LabelMapping, profiles=None,
                 describer=None, judge=None, mode: str = "auto",
                 expiry_s: float = SUGGESTION_EXPIRY_S,
                 cooldown_s: float = SUGGESTION_COOLDOWN_S,
                 match_threshold: float = MATCH_THRESHOLD):
        if mode not in ("auto", "quiet", "loud"):
            raise EngineError(f"unknown mode {mode!r}")
        self.classifier = classifier
        self.mapping = mapping
        self.profiles = list(profiles or [])
        self.describer = describer or FeatureDescriber()
        self.judge = judge or TokenOverlapJudge()
        self.mode = mode
        self.expiry_s = expiry_s
        self.cooldown_s = cooldown_s
        self.match_threshold = match_threshold
        self._cooldown_until: dict[str, float] = {}
        self._live: dict[str, Suggestion] = {}
        self._counter = 0
        self._level_history: list[float] = []

    def _next_id(self) -> str:
        self._counter += 1
        return f"s{self._counter}"

    def effective_mode(self) -> str:
        """Manual setting, or 'auto': loud when the trailing 30 s median level
        reaches 60 dBA."""
        if self.mode != "auto":
            return self.mode
        if not self._level_history:
            return "quiet"
        return derive_mode(float(np.median(self._level_history)))

    def expire(self, now: float) -> list[str]:
        """Sweep expired suggestions; expiry starts the re-suggest cooldown."""
        gone = [sid for sid, s in self._live.items() if s.expiry <= now]
        for sid in gone:
            s = self._live.pop(sid)
            if s.class_id:
                self._cooldown_until[s.class_id] = now + self.cooldown_s
        return gone

    def dismiss(self, suggestion_id: str, now: float) -> None:
        s = self._live.pop(suggestion_id, None)
        if s and s.class_id:
            self._cooldown_until[s.class_id] = now + self.cooldown_s

    def accept(self, suggestion_id: str, now: float) -> Suggestion | None:
        return self._live.pop(suggestion_id, None)

    def live_suggestions(self) -> list[Suggestion]:
        return list(self._live.values())

    def tick(self, window: Waveform, buffer: RollingBuffer, active_targets,
             now: float) -> list[ContextEvent]:
        """One ~1 s analysis tick."""
        self.expire(now)
        events: list[ContextEvent] = []
        result = classify_tick(window, self.classifier)
        result.timestamp = now
        events.append(ContextEvent(kind="detection", detection=result))
        if result.empty:
            return events

        try:
            level = a_weighted_level(window)
        except DegenerateSignalError:
            return events
        self._level_history.append(level)
        if len(self._level_history) > 30:
            self._level_history = self._level_history[-30:]

        known = suggest_known(result, self.mapping, active_targets, now=now,
                              cooldown_until=self._cooldown_until,
                              expiry_s=self.expiry_s,
                              suggestion_id=self._next_id())
        if known is not None:
            self._live[known.suggestion_id] = known
            events.append(ContextEvent(kind="suggestion", suggestion=known))
            return events

        snap = gate_unknown(result, self.mapping, level, self.effective_mode(),
                            buffer, now=now)
        if snap is not None:
            description = describe_sound(snap, self.describer)
            if description is None:
                return events
            pid = match_profile(description, self.profiles, self.judge,
                                self.match_threshold)
            if pid is not None:
                sug = Suggestion(suggestion_id=self._next_id(), kind="save-unknown",
                                 created=now, expiry=now + self.expiry_s,
                                 snapshot_ref=f"snap-{self._counter}",
                                 description=description, profile_id=pid)
                self._live[sug.suggestion_id] = sug
                events.append(ContextEvent(kind="suggestion", suggestion=sug,
                                           snapshot=snap))
        return events
