"""SI-SNR / SI-SNRi and the benchmark harness, plus stream profiling records."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Waveform, read_wav
from .datagen import read_shards
from .errors import DegenerateSignalError, NotFoundError, ShapeError
from .fusion import fuse_embeddings

SI_SNR_CAP_DB = 60.0


def si_snr(reference: Waveform | np.ndarray, estimate: Waveform | np.ndarray) -> float:
    """Scale-invariant signal-to-noise ratio in dB, capped to +/-60.

    Both signals are mean-centered, the estimate is projected onto the
    reference, and the ratio of projected to residual energy is returned.
    """
    s = (reference.samples if isinstance(reference, Waveform) else np.asarray(reference))
    x = (estimate.samples if isinstance(estimate, Waveform) else np.asarray(estimate))
    if s.shape != x.shape:
        raise ShapeError(f"length mismatch: {s.shape} vs {x.shape}")
    s = s.astype(np.float64)
    x = x.astype(np.float64)
    s = s - s.mean()
    x = x - x.mean()
    denom = float(np.dot(s, s))
    if denom <= 0.0:
        raise DegenerateSignalError("reference has zero power")
    s_t = (np.dot(x, s) / denom) * s
    e = x - s_t
    p_t = float(np.dot(s_t, s_t))
    p_e = float(np.dot(e, e))
    if p_e <= 0.0:
        return SI_SNR_CAP_DB
    if p_t <= 0.0:
        return -SI_SNR_CAP_DB
    return float(np.clip(10.0 * np.log10(p_t / p_e), -SI_SNR_CAP_DB, SI_SNR_CAP_DB))


def si_snri(mixture, estimate, reference) -> float:
    """Improvement of the estimate over the unprocessed mixture."""
    return si_snr(reference, estimate) - si_snr(reference, mixture)


@dataclass
class ConditionRow:
    condition: int
    count: int
    input_si_snr: float
    output_si_snr: float
    si_snri_mean: float          # per-example mean (primary)
    si_snri_of_means: float      # difference of the two means


@dataclass
class BenchReport:
    rows: list[ConditionRow]
    seed: int | None = None
    model_id: str = ""

    def row(self, condition: int) -> ConditionRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise NotFoundError(f"no row for condition {condition}")

    def format_table(self) -> str:
        lines = [
            f"{'':10s}{'Input SI-SNR':>14s}{'Output SI-SNR':>15s}{'SI-SNRi':>10s}{'n':>7s}",
        ]
        for r in self.rows:
            lines.append(
                f"{r.condition}-class {'':2s}{r.input_si_snr:>14.2f}{r.output_si_snr:>15.2f}"
                f"{r.si_snri_mean:>10.2f}{r.count:>7d}"
            )
        return "\n".join(lines)

    def to_records(self) -> str:
        lines = []
        if self.model_id or self.seed is not None:
            lines.append(f"model={self.model_id} seed={self.seed}")
        for r in self.rows:
            lines.append(
                f"condition={r.condition} n={r.count}"
                f" input_si_snr={r.input_si_snr:.6f} output_si_snr={r.output_si_snr:.6f}"
                f" si_snri={r.si_snri_mean:.6f} si_snri_of_means={r.si_snri_of_means:.6f}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class EvalExample:
    mixture: Waveform
    residual: Waveform
    target_ids: tuple[str, ...]
    condition: int


def evaluate_examples(model, store, examples: list[EvalExample],
                      mask_hook: str | None = None, seed: int | None = None,
                      model_id: str = "") -> BenchReport:
    """Suppress each example with the fused embeddings of its annotated
    targets and score against the annotated residual."""
    from .suppressor import suppress  # local import to avoid a cycle

    by_condition: dict[int, list[tuple[float, float]]] = {}
    for ex in examples:
        vectors = []
        for cid in ex.target_ids:
            if cid not in store:
                raise NotFoundError(f"no embedding for annotated class {cid!r}")
            vectors.append(store.vector(cid))
        fused = fuse_embeddings(vectors, model.fusion)
        est = suppress(model, ex.mixture, fused, mask_hook=mask_hook)
        s_in = si_snr(ex.residual, ex.mixture)
        s_out = si_snr(ex.residual, est)
        by_condition.setdefault(ex.condition, []).append((s_in, s_out))

    rows = []
    for condition in sorted(by_condition):
        pairs = np.array(by_condition[condition])
        mean_in = float(pairs[:, 0].mean())
        mean_out = float(pairs[:, 1].mean())
        rows.append(ConditionRow(
            condition=condition,
            count=pairs.shape[0],
            input_si_snr=mean_in,
            output_si_snr=mean_out,
            si_snri_mean=float((pairs[:, 1] - pairs[:, 0]).mean()),
            si_snri_of_means=mean_out - mean_in,
        ))
    return BenchReport(rows=rows, seed=seed, model_id=model_id)


def load_shard_examples(shard_dir, conditions=(1, 2, 3)) -> list[EvalExample]:
    examples = []
    for shard in read_shards(shard_dir):
        if shard.condition not in conditions:
            continue
        examples.append(EvalExample(
            mixture=read_wav(shard.mix_path),
            residual=read_wav(shard.res_path),
            target_ids=shard.target_ids,
            condition=shard.condition,
        ))
    return examples


def run_benchmark(model, store, shard_dir, conditions=(1, 2, 3),
                  mask_hook: str | None = None, seed: int | None = None,
                  model_id: str = "") -> BenchReport:
    examples = load_shard_examples(shard_dir, conditions)
    return evaluate_examples(model, store, examples, mask_hook=mask_hook,
                             seed=seed, model_id=model_id)


# ---------------------------------------------------------------------------
# Runtime profiling
# ---------------------------------------------------------------------------


@dataclass
class ProfileRecord:
    hops: int
    hop_ms_mean: float
    hop_ms_p95: float
    hop_ms_max: float
    real_time_factor: float
    algorithmic_delay_samples: int    # device rate
    hop_duration_samples: int         # device rate
    buffer_occupancy_samples: int     # post-consume steady state
    buffer_highwater_samples: int
    buffer_cap_samples: int
    latency_samples: int              # algorithmic + hop + occupancy
    device_rate: int
    drops: int
    underruns: int
    cpu_percent: float | None = None      # platform-specific; unavailable
    battery_pct_per_hour: float | None = None

    @property
    def latency_ms(self) -> float:
        return 1000.0 * self.latency_samples / self.device_rate

    def to_records(self) -> str:
        vals = {
            "hops": self.hops,
            "hop_ms_mean": f"{self.hop_ms_mean:.3f}",
            "hop_ms_p95": f"{self.hop_ms_p95:.3f}",
            "hop_ms_max": f"{self.hop_ms_max:.3f}",
            "real_time_factor": f"{self.real_time_factor:.4f}",
            "algorithmic_delay_samples": self.algorithmic_delay_samples,
            "hop_duration_samples": self.hop_duration_samples,
            "buffer_occupancy_samples": self.buffer_occupancy_samples,
            "buffer_highwater_samples": self.buffer_highwater_samples,
            "buffer_cap_samples": self.buffer_cap_samples,
            "latency_samples": self.latency_samples,
            "latency_ms": f"{self.latency_ms:.3f}",
            "device_rate": self.device_rate,
            "drops": self.drops,
            "underruns": self.underruns,
            "cpu_percent": "unavailable" if self.cpu_percent is None else self.cpu_percent,
            "battery_pct_per_hour": ("unavailable" if self.battery_pct_per_hour is None
                                     else self.battery_pct_per_hour),
        }
        return " ".join(f"{k}={v}" for k, v in vals.items()) + "\n"


def profile_stream(session) -> ProfileRecord:
    """Summarize a live session's counters; CPU and battery are platform
    metrics the desktop build reports as unavailable."""
    times = np.asarray(session.hop_times_ms, dtype=np.float64)
    if times.size:
        mean = float(times.mean())
        p95 = float(np.percentile(times, 95))
        peak = float(times.max())
    else:
        mean = p95 = peak = 0.0
    duration_s = session.samples_in / session.config.device_rate
    compute_s = float(times.sum()) / 1000.0
    occupancy = session.output_occupancy
    return ProfileRecord(
        hops=session.hops_run,
        hop_ms_mean=mean,
        hop_ms_p95=p95,
        hop_ms_max=peak,
        real_time_factor=(compute_s / duration_s) if duration_s > 0 else 0.0,
        algorithmic_delay_samples=session.algorithmic_delay_samples,
        hop_duration_samples=session.hop_device_samples,
        buffer_occupancy_samples=occupancy,
        buffer_highwater_samples=session.buffer_highwater,
        buffer_cap_samples=session.buffer_cap_samples,
        latency_samples=session.algorithmic_delay_samples + session.hop_device_samples + occupancy,
        device_rate=session.config.device_rate,
        drops=session.drops,
        underruns=session.underruns,
    )
