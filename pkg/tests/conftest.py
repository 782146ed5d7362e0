from __future__ import annotations

import numpy as np
import pytest
import torch

from attenuate.audio import Waveform
from attenuate.embeddings import EmbeddingStore, TargetEmbedding
from attenuate.suppressor import SuppressorConfig, init_model


def tiny_config() -> SuppressorConfig:
    """Smallest config that exercises every code path; used for gradient
    checks and fast structural tests."""
    return SuppressorConfig(enc_channels=(2, 3), lstm_hidden=4, lstm_layers=2,
                            embed_dim=16, fusion_hidden=24, asp_attn_dim=5)


@pytest.fixture(scope="session")
def tiny_model():
    return init_model(tiny_config(), seed=11)


@pytest.fixture(scope="session")
def toy_model():
    from attenuate.suppressor import toy_config

    return init_model(toy_config(), seed=7)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def unit_vec(rng: np.random.Generator, dim: int = 768) -> np.ndarray:
    v = rng.standard_normal(dim).astype(np.float32)
    return v / np.linalg.norm(v)


@pytest.fixture()
def random_store(rng) -> EmbeddingStore:
    store = EmbeddingStore()
    for cid in ("alpha", "beta", "gamma", "delta"):
        store.upsert(cid, TargetEmbedding(unit_vec(rng)), "builtin", 1)
    return store


def sine(freq: float, seconds: float, rate: int = 16_000, amp: float = 0.5) -> Waveform:
    t = np.arange(int(seconds * rate)) / rate
    return Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32), rate)


def fd_gradient(fn, tensor: torch.Tensor, coords, h: float = 1e-4) -> list[float]:
    """Central finite differences of a scalar function at selected coordinates."""
    grads = []
    flat = tensor.reshape(-1)
    for c in coords:
        orig = float(flat[c])
        with torch.no_grad():
            flat[c] = orig + h
        up = float(fn().detach())
        with torch.no_grad():
            flat[c] = orig - h
        down = float(fn().detach())
        with torch.no_grad():
            flat[c] = orig
        grads.append((up - down) / (2 * h))
    return grads
