"""Synthetic paired-supervision mixture generation.

Each example mixes k in {2,3} classes (inverse-frequency weighted, without
replacement), designates 1..k-1 of them as suppression targets, scales every
target to its own signal-to-interference ratio drawn uniformly from [0, 10] dB
against the summed retained sources, and pairs the mixture with the residual
(targets removed). Evaluation shards force k and the target count so 1/2/3
target conditions can all be produced.

A parametric synthesizer covers the whole built-in class catalog so the
pipeline runs without any external datasets; the canonical 6-class toy subset
is what training and acceptance use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Waveform, read_wav, resample, write_wav
from .embeddings import BUILTIN_CLASS_IDS
from .errors import ConfigError, DegenerateSignalError, FormatError

MIX_DURATION = 4.0
MIX_RATE = 16_000
MIX_SAMPLES = int(MIX_DURATION * MIX_RATE)
CLIP_PEAK = 0.9

TOY_CLASSES = (
    "air_conditioner",   # low rumble + mains hum
    "alarm_clock",       # gated ~3 kHz beeps
    "keyboard_typing",   # sparse broadband clicks
    "siren",             # slow mid-band sweep
    "vacuum_cleaner",    # motor harmonics + broadband wash
    "water_running",     # high-band hiss
)


def example_rng(root_seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent per-example generator derived by counter from a root seed.

    ``stream`` separates non-overlapping uses (training batches, validation,
    reference recordings) under the same root.
    """
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=root_seed, spawn_key=(stream, index))))


@dataclass
class ClassCatalog:
    classes: dict[str, list[str]]

    def __post_init__(self):
        self.classes = {cid: [str(p) for p in paths] for cid, paths in self.classes.items()}

    @property
    def counts(self) -> dict[str, int]:
        return {cid: len(paths) for cid, paths in self.classes.items()}

    def ids(self) -> list[str]:
        return sorted(self.classes)

    @classmethod
    def from_manifest(cls, path) -> "ClassCatalog":
        classes: dict[str, list[str]] = {}
        base = Path(path).parent
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise FormatError(f"manifest line {lineno} is not 'class_id<TAB>path'")
                cid, rel = parts
                p = Path(rel)
                classes.setdefault(cid, []).append(str(p if p.is_absolute() else base / p))
        return cls(classes)

    @classmethod
    def from_dir(cls, root) -> "ClassCatalog":
        root = Path(root)
        classes = {
            sub.name: sorted(str(p) for p in sub.glob("*.wav"))
            for sub in sorted(root.iterdir()) if sub.is_dir()
        }
        return cls({cid: paths for cid, paths in classes.items() if paths})

    def write_manifest(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for cid in self.ids():
                for p in self.classes[cid]:
                    fh.write(f"{cid}\t{p}\n")


@dataclass
class MixtureExample:
    mixture: Waveform
    residual: Waveform
    target_ids: tuple[str, ...]
    retained_ids: tuple[str, ...]
    sirs: dict[str, float]
    scaled_targets: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def sample_classes(catalog: ClassCatalog, rng: np.random.Generator,
                   k: int | None = None) -> tuple[int, list[str]]:
    """Draw k distinct classes, probability inversely proportional to class
    count, sequentially without replacement."""
    ids = catalog.ids()
    if len(ids) < 3:
        raise ConfigError("catalog needs at least 3 classes for mixture sampling")
    if k is None:
        k = int(rng.integers(2, 4))
    if k > len(ids):
        raise ConfigError(f"cannot draw {k} distinct classes from {len(ids)}")
    counts = catalog.counts
    remaining = list(ids)
    weights = np.array([1.0 / counts[c] for c in remaining])
    picked: list[str] = []
    for _ in range(k):
        p = weights / weights.sum()
        j = int(rng.choice(len(remaining), p=p))
        picked.append(remaining.pop(j))
        weights = np.delete(weights, j)
    return k, picked


def extract_segment(path, rng: np.random.Generator, duration: float = MIX_DURATION,
                    target_rate: int = MIX_RATE) -> Waveform:
    """Random crop of ``duration`` seconds, resampled to ``target_rate``;
    sources shorter than the crop are zero-padded at the end."""
    wave = read_wav(path)
    need = int(round(duration * wave.sample_rate))
    x = wave.samples
    if x.size > need:
        start = int(rng.integers(0, x.size - need + 1))
        x = x[start:start + need]
    elif x.size < need:
        x = np.concatenate([x, np.zeros(need - x.size, dtype=np.float32)])
    seg = resample(Waveform(x, wave.sample_rate), target_rate)
    want = int(round(duration * target_rate))
    y = seg.samples
    if y.size < want:
        y = np.concatenate([y, np.zeros(want - y.size, dtype=np.float32)])
    return Waveform(y[:want], target_rate)


def scale_to_sir(target: Waveform, retained_sum: Waveform, sir_db: float) -> Waveform:
    """Scale ``target`` so 10*log10(P_target / P_retained) == sir_db."""
    p_t = float(np.mean(target.samples.astype(np.float64) ** 2))
    p_r = float(np.mean(retained_sum.samples.astype(np.float64) ** 2))
    if p_r <= 0.0:
        raise DegenerateSignalError("retained sum has zero power")
    if p_t <= 0.0:
        raise DegenerateSignalError("target segment has zero power")
    gain = np.sqrt(p_r / p_t * 10.0 ** (sir_db / 10.0))
    return Waveform((target.samples.astype(np.float64) * gain).astype(np.float32),
                    target.sample_rate)


def make_example(catalog: ClassCatalog, rng: np.random.Generator,
                 k: int | None = None, n_targets: int | None = None) -> MixtureExample:
    k, classes = sample_classes(catalog, rng, k=k)
    if n_targets is None:
        n_targets = int(rng.integers(1, k))
    if not 1 <= n_targets <= k - 1:
        raise ConfigError(f"target count {n_targets} must be in [1, k-1] = [1, {k - 1}]")

    segments: dict[str, Waveform] = {}
    for cid in classes:
        for attempt in range(5):
            path = catalog.classes[cid][int(rng.integers(0, len(catalog.classes[cid])))]
            seg = extract_segment(path, rng)
            if float(np.mean(seg.samples.astype(np.float64) ** 2)) > 0.0:
                segments[cid] = seg
                break
        else:
            raise DegenerateSignalError(f"class {cid!r} only yielded silent segments")

    order = rng.permutation(k)
    target_ids = tuple(classes[i] for i in order[:n_targets])
    retained_ids = tuple(classes[i] for i in order[n_targets:])

    residual = np.zeros(MIX_SAMPLES, dtype=np.float64)
    for cid in retained_ids:
        residual += segments[cid].samples.astype(np.float64)
    retained_wave = Waveform(residual.astype(np.float32), MIX_RATE)

    sirs: dict[str, float] = {}
    scaled: dict[str, np.ndarray] = {}
    for cid in target_ids:
        sirs[cid] = float(rng.uniform(0.0, 10.0))
        scaled[cid] = scale_to_sir(segments[cid], retained_wave, sirs[cid]).samples

    mixture = residual.copy()
    for cid in target_ids:
        mixture += scaled[cid].astype(np.float64)

    peak = float(np.max(np.abs(mixture))) if mixture.size else 0.0
    if peak > 1.0:
        f = CLIP_PEAK / peak
        mixture *= f
        residual *= f
        scaled = {cid: (s.astype(np.float64) * f).astype(np.float32) for cid, s in scaled.items()}
    else:
        scaled = {cid: s.astype(np.float32) for cid, s in scaled.items()}

    return MixtureExample(
        mixture=Waveform(mixture.astype(np.float32), MIX_RATE),
        residual=Waveform(residual.astype(np.float32), MIX_RATE),
        target_ids=target_ids,
        retained_ids=retained_ids,
        sirs=sirs,
        scaled_targets=scaled,
    )


# ---------------------------------------------------------------------------
# Shards: NNNN.mix.wav / NNNN.res.wav plus a line-record metadata file
# ---------------------------------------------------------------------------

SHARD_META = "shard_meta.txt"


@dataclass
class ShardExample:
    index: int
    condition: int
    mix_path: str
    res_path: str
    target_ids: tuple[str, ...]
    retained_ids: tuple[str, ...]
    sirs: dict[str, float]


def write_shards(examples: list[tuple[int, MixtureExample]], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / SHARD_META, "w", encoding="utf-8") as fh:
        for i, (condition, ex) in enumerate(examples):
            stem = f"{i:04d}"
            write_wav(out / f"{stem}.mix.wav", ex.mixture, "float32")
            write_wav(out / f"{stem}.res.wav", ex.residual, "float32")
            sirs = ",".join(f"{cid}:{ex.sirs[cid]:.9g}" for cid in ex.target_ids)
            fh.write(
                f"{stem}\tcondition={condition}\ttargets={','.join(ex.target_ids)}"
                f"\tretained={','.join(ex.retained_ids)}\tsirs={sirs}\n"
            )


def read_shards(shard_dir) -> list[ShardExample]:
    out: list[ShardExample] = []
    base = Path(shard_dir)
    meta = base / SHARD_META
    if not meta.exists():
        raise FormatError(f"missing {SHARD_META} in {shard_dir}")
    with open(meta, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            stem, *kvs = line.split("\t")
            d = dict(kv.split("=", 1) for kv in kvs)
            sirs = {}
            if d.get("sirs"):
                for item in d["sirs"].split(","):
                    cid, _, v = item.partition(":")
                    sirs[cid] = float(v)
            out.append(ShardExample(
                index=int(stem),
                condition=int(d["condition"]),
                mix_path=str(base / f"{stem}.mix.wav"),
                res_path=str(base / f"{stem}.res.wav"),
                target_ids=tuple(t for t in d["targets"].split(",") if t),
                retained_ids=tuple(t for t in d["retained"].split(",") if t),
                sirs=sirs,
            ))
    return out


def condition_draw(condition: int) -> tuple[int | None, int]:
    """(k, n_targets) needed to realize an evaluation condition."""
    if condition == 1:
        return None, 1  # k in {2,3}
    if condition == 2:
        return 3, 2
    if condition == 3:
        return 4, 3
    raise ConfigError(f"unsupported condition {condition}")


def make_eval_shards(catalog: ClassCatalog, out_dir, per_condition: int, seed: int,
                     conditions=(1, 2, 3)) -> None:
    rows: list[tuple[int, MixtureExample]] = []
    idx = 0
    for condition in conditions:
        k, n_targets = condition_draw(condition)
        for _ in range(per_condition):
            rng = example_rng(seed, idx)
            rows.append((condition, make_example(catalog, rng, k=k, n_targets=n_targets)))
            idx += 1
    write_shards(rows, out_dir)


# ---------------------------------------------------------------------------
# Parametric synthetic classes
# ---------------------------------------------------------------------------

# recipe fields: tone=(fmin, fmax, harmonics), sweep=(f0, f1, period_s),
# noise=(low_hz, high_hz, level), clicks=(rate_min, rate_max),
# gate=(rate_hz, duty) for on/off amplitude gating
_RECIPES: dict[str, dict] = {
    "air_conditioner": dict(tone=(58, 62, 2), noise=(30, 200, 1.0)),
    "alarm_clock": dict(tone=(2800, 3200, 1), gate=(4.0, 0.5)),
    "baby_cry": dict(tone=(350, 550, 4), sweep=(400, 600, 1.2)),
    "blender": dict(tone=(180, 260, 5), noise=(800, 5000, 0.5)),
    "car_horn": dict(tone=(420, 500, 3), gate=(1.0, 0.6)),
    "chewing": dict(clicks=(2.0, 4.0), noise=(100, 600, 0.2)),
    "construction": dict(clicks=(1.5, 3.0), noise=(80, 400, 0.6)),
    "crowd_chatter": dict(noise=(200, 2500, 1.0)),
    "dishes_clattering": dict(clicks=(3.0, 6.0), noise=(1500, 6000, 0.3)),
    "dog_bark": dict(tone=(500, 800, 3), gate=(2.5, 0.3)),
    "door_slam": dict(clicks=(0.5, 1.0), noise=(60, 300, 0.3)),
    "hair_dryer": dict(tone=(300, 380, 3), noise=(1000, 6000, 0.8)),
    "keyboard_typing": dict(clicks=(6.0, 10.0)),
    "lawn_mower": dict(tone=(90, 120, 6), noise=(200, 1500, 0.6)),
    "leaf_blower": dict(tone=(150, 200, 4), noise=(500, 3000, 0.9)),
    "metal_scraping": dict(noise=(2500, 7000, 1.0), gate=(1.5, 0.7)),
    "motorcycle": dict(tone=(70, 110, 8), noise=(100, 900, 0.5)),
    "phone_ringing": dict(tone=(1800, 2000, 2), gate=(2.0, 0.5)),
    "power_drill": dict(tone=(220, 300, 6), noise=(2000, 6000, 0.6)),
    "siren": dict(sweep=(600, 1400, 2.0)),
    "sniffing": dict(noise=(400, 1500, 0.5), gate=(1.2, 0.25)),
    "snoring": dict(tone=(80, 120, 5), gate=(0.8, 0.5)),
    "tv_background": dict(noise=(150, 3500, 0.7), tone=(1000, 1200, 1)),
    "vacuum_cleaner": dict(tone=(110, 140, 6), noise=(500, 4000, 0.9)),
    "water_running": dict(noise=(1000, 3500, 1.0)),
}
assert set(_RECIPES) == set(BUILTIN_CLASS_IDS)


def _band_noise(n: int, sr: int, low: float, high: float, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < low) | (freqs > high)] = 0.0
    x = np.fft.irfft(spec, n=n)
    rms = np.sqrt(np.mean(x * x))
    return x / max(rms, 1e-12)


def synth_class_clip(class_id: str, rng: np.random.Generator, duration: float = 5.0,
                     sample_rate: int = MIX_RATE) -> Waveform:
    """One synthetic recording of a class, with per-clip parameter jitter."""
    recipe = _RECIPES[class_id]
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    sig = np.zeros(n)

    if "tone" in recipe:
        fmin, fmax, harmonics = recipe["tone"]
        f0 = rng.uniform(fmin, fmax)
        for h in range(1, harmonics + 1):
            sig += (1.0 / h) * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
    if "sweep" in recipe:
        f0, f1, period = recipe["sweep"]
        period *= rng.uniform(0.9, 1.1)
        phase = 2 * np.pi * np.cumsum(
            f0 + (f1 - f0) * 0.5 * (1 - np.cos(2 * np.pi * t / period))
        ) / sample_rate
        sig += np.sin(phase + rng.uniform(0, 2 * np.pi))
    if "noise" in recipe:
        low, high, level = recipe["noise"]
        sig += level * _band_noise(n, sample_rate, low, high, rng)
    if "clicks" in recipe:
        rate = rng.uniform(*recipe["clicks"])
        period = int(sample_rate / rate)
        burst_len = int(0.008 * sample_rate)
        burst_env = np.exp(-np.arange(burst_len) / (0.002 * sample_rate))
        pos = int(rng.integers(0, period))
        while pos + burst_len < n:
            sig[pos:pos + burst_len] += 3.0 * burst_env * rng.standard_normal(burst_len)
            pos += period + int(rng.integers(-period // 8, period // 8 + 1))
    if "gate" in recipe:
        rate, duty = recipe["gate"]
        rate *= rng.uniform(0.9, 1.1)
        phase = (t * rate) % 1.0
        gate = 1.0 / (1.0 + np.exp(-80 * (duty - phase))) * (phase < 1.0)
        sig *= gate

    # slow amplitude drift so clips are not perfectly stationary
    sig *= 1.0 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 6.28))
    peak = np.max(np.abs(sig))
    sig = sig / max(peak, 1e-12) * rng.uniform(0.4, 0.7)
    return Waveform(sig.astype(np.float32), sample_rate)


def synth_corpus(out_dir, class_ids=TOY_CLASSES, per_class: int = 8,
                 duration: float = 5.0, seed: int = 0,
                 counts: dict[str, int] | None = None) -> ClassCatalog:
    """Write a class-organized corpus of synthetic WAVs and its manifest."""
    root = Path(out_dir)
    classes: dict[str, list[str]] = {}
    for ci, cid in enumerate(class_ids):
        sub = root / cid
        sub.mkdir(parents=True, exist_ok=True)
        n_files = (counts or {}).get(cid, per_class)
        paths = []
        for j in range(n_files):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(entropy=seed, spawn_key=(ci, j))))
            clip = synth_class_clip(cid, rng, duration)
            p = sub / f"{j:03d}.wav"
            write_wav(p, clip, "float32")
            paths.append(str(p))
        classes[cid] = paths
    catalog = ClassCatalog(classes)
    catalog.write_manifest(root / "manifest.txt")
    return catalog
