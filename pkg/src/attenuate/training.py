"""Negative SI-SNR training loop with fused conditioning.

Class embeddings are bootstrapped from the randomly initialized encoder and
refreshed on a fixed step cadence, so the conditioning vectors track the
encoder they are derived from. The fusion projection trains jointly with the
suppressor through the single loss path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import Waveform
from .datagen import (
    MIX_SAMPLES,
    ClassCatalog,
    condition_draw,
    example_rng,
    extract_segment,
    make_example,
)
from .embeddings import (
    PROVENANCE_BUILTIN,
    EmbeddingStore,
    TargetEmbedding,
    build_class_embedding,
    calibrate_embedder,
)
from .errors import DegenerateSignalError, NumericError
from .metrics import EvalExample, evaluate_examples
from .nn import (
    DEFAULT_BETAS,
    DEFAULT_CLIP_NORM,
    DEFAULT_LR,
    DEFAULT_WEIGHT_DECAY,
    ParamSet,
    adamw_step,
    lr_schedule,
)

_STREAM_TRAIN = 0
_STREAM_VAL = 1
_STREAM_REFS = 2


def neg_si_snr_loss(estimate: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """-SI-SNR(reference, estimate), capped at +/-60 dB, mean over the batch.

    Differentiable; matches the evaluation metric's definition.
    """
    if estimate.shape != reference.shape:
        raise DegenerateSignalError("estimate/reference length mismatch")
    if estimate.ndim == 1:
        estimate = estimate.unsqueeze(0)
        reference = reference.unsqueeze(0)
    s = reference - reference.mean(dim=-1, keepdim=True)
    x = estimate - estimate.mean(dim=-1, keepdim=True)
    denom = (s * s).sum(dim=-1, keepdim=True)
    if float(denom.min()) <= 0.0:
        raise DegenerateSignalError("reference has zero power")
    s_t = ((x * s).sum(dim=-1, keepdim=True) / denom) * s
    e = x - s_t
    ratio = (s_t * s_t).sum(dim=-1) / ((e * e).sum(dim=-1) + 1e-12)
    snr = torch.clamp(10.0 * torch.log10(ratio + 1e-12), -60.0, 60.0)
    return -snr.mean()


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    base_lr: float = DEFAULT_LR
    warmup_fraction: float = 0.05
    betas: tuple[float, float] = DEFAULT_BETAS
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    clip_norm: float = DEFAULT_CLIP_NORM
    seed: int = 7
    crop_seconds: float = 2.0          # random training crop of each 4 s example
    embed_refresh_steps: int = 250
    refs_per_class: int = 3            # recordings used to build class embeddings
    val_examples_per_condition: int = 24
    baseline_validation: bool = True
    checkpoint_every: int = 0          # 0 = final only
    out_dir: str | None = None


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    baseline: dict[int, float] | None = None
    validation: dict[int, float] | None = None
    aborted: bool = False
    wall_seconds: float = 0.0

    def to_text(self) -> str:
        lines = []
        for r in self.records:
            lines.append(
                f"step={r['step']} loss={r['loss']:.6f} lr={r['lr']:.8f}"
                f" grad_norm={r['grad_norm']:.6f}"
            )
        if self.baseline:
            for c, v in sorted(self.baseline.items()):
                lines.append(f"baseline_val condition={c} si_snri={v:.4f}")
        if self.validation:
            for c, v in sorted(self.validation.items()):
                lines.append(f"val condition={c} si_snri={v:.4f}")
        lines.append(f"aborted={int(self.aborted)} wall_seconds={self.wall_seconds:.1f}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


@dataclass
class TrainResult:
    model: object
    store: EmbeddingStore
    log: TrainLog


def class_reference_recordings(catalog: ClassCatalog, config: TrainConfig) -> dict[str, list[Waveform]]:
    """Fixed per-class recordings the embedding refresh re-encodes."""
    refs: dict[str, list[Waveform]] = {}
    for ci, cid in enumerate(catalog.ids()):
        paths = catalog.classes[cid][: config.refs_per_class]
        refs[cid] = [
            extract_segment(p, example_rng(config.seed, ci * 100 + j, stream=_STREAM_REFS))
            for j, p in enumerate(paths)
        ]
    return refs


def refresh_class_embeddings(model, refs: dict[str, list[Waveform]],
                             store: EmbeddingStore) -> None:
    calibrate_embedder(model)
    for cid, recordings in refs.items():
        emb = build_class_embedding(recordings, model)
        store.upsert(cid, emb, PROVENANCE_BUILTIN, recording_count=len(recordings))


def make_validation_examples(catalog: ClassCatalog, config: TrainConfig,
                             conditions=(1, 2, 3)) -> list[EvalExample]:
    examples = []
    idx = 0
    for condition in conditions:
        k, n_targets = condition_draw(condition)
        for _ in range(config.val_examples_per_condition):
            rng = example_rng(config.seed, idx, stream=_STREAM_VAL)
            ex = make_example(catalog, rng, k=k, n_targets=n_targets)
            examples.append(EvalExample(ex.mixture, ex.residual, ex.target_ids, condition))
            idx += 1
    return examples


def _validate(model, store, examples) -> dict[int, float]:
    report = evaluate_examples(model, store, examples)
    return {row.condition: row.si_snri_mean for row in report.rows}


def train(model, catalog: ClassCatalog, config: TrainConfig) -> TrainResult:
    """Run the optimization loop; returns the model, the refreshed embedding
    store, and the step log with validation SI-SNRi per condition."""
    torch.set_num_threads(2)
    torch.manual_seed(config.seed)
    t_start = time.time()

    store = EmbeddingStore(dim=model.config.embed_dim)
    refs = class_reference_recordings(catalog, config)
    log = TrainLog()
    val_examples = make_validation_examples(catalog, config) if (
        config.val_examples_per_condition > 0) else []

    refresh_class_embeddings(model, refs, store)
    if config.baseline_validation and val_examples and config.steps > 0:
        log.baseline = _validate(model, store, val_examples)

    trainables = model.trainable_param_dict()
    pset = ParamSet(params=trainables)
    crop = int(config.crop_seconds * model.config.sample_rate)
    crop = min(crop, MIX_SAMPLES)
    snapshot = {n: p.detach().clone() for n, p in trainables.items()}
    snapshot_every = config.checkpoint_every or 250  # last-good restore cadence

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    model.train()
    for step in range(config.steps):
        if step > 0 and config.embed_refresh_steps > 0 and step % config.embed_refresh_steps == 0:
            model.eval()
            refresh_class_embeddings(model, refs, store)
            model.train()

        xs, rs, conds = [], [], []
        for j in range(config.batch_size):
            rng = example_rng(config.seed, step * config.batch_size + j, stream=_STREAM_TRAIN)
            ex = make_example(catalog, rng)
            off = int(rng.integers(0, MIX_SAMPLES - crop + 1)) if crop < MIX_SAMPLES else 0
            xs.append(torch.from_numpy(ex.mixture.samples[off:off + crop]))
            rs.append(torch.from_numpy(ex.residual.samples[off:off + crop]))
            vecs = np.stack([store.vector(cid) for cid in ex.target_ids])
            conds.append(model.fusion(torch.from_numpy(vecs)))

        x = torch.stack(xs)
        ref = torch.stack(rs)
        cond = torch.stack(conds)
        est, _ = model.forward_waveform(x, cond)
        loss = neg_si_snr_loss(est, ref)

        if not torch.isfinite(loss):
            with torch.no_grad():
                for n, p in trainables.items():
                    p.copy_(snapshot[n])
            log.aborted = True
            break

        for p in trainables.values():
            p.grad = None
        loss.backward()
        grads = {n: p.grad for n, p in trainables.items() if p.grad is not None}
        lr = lr_schedule(step, config.steps, config.base_lr, config.warmup_fraction)
        try:
            grad_norm = adamw_step(pset, grads, lr=lr, betas=config.betas,
                                   weight_decay=config.weight_decay,
                                   clip_norm=config.clip_norm)
        except NumericError:
            with torch.no_grad():
                for n, p in trainables.items():
                    p.copy_(snapshot[n])
            log.aborted = True
            break
        log.records.append({"step": step, "loss": float(loss.detach()), "lr": lr,
                            "grad_norm": grad_norm})

        if (step + 1) % snapshot_every == 0:
            snapshot = {n: p.detach().clone() for n, p in trainables.items()}
            if out_dir and config.checkpoint_every:
                from .suppressor import save_model
                save_model(model, out_dir / f"ckpt_{step + 1:06d}.attn",
                           {"step": str(step + 1)})

    model.eval()
    if config.steps > 0 and not log.aborted:
        refresh_class_embeddings(model, refs, store)
    if val_examples and config.steps > 0 and not log.aborted:
        log.validation = _validate(model, store, val_examples)
    log.wall_seconds = time.time() - t_start
    return TrainResult(model=model, store=store, log=log)
