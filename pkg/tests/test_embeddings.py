from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attenuate import embeddings as emb
from attenuate.audio import Waveform
from attenuate.errors import FormatError, NotFoundError, ShapeError, TooShortError

from .conftest import sine, unit_vec


def _pooling(feature_dim=4, attn_dim=3) -> emb.AttentiveStatsPooling:
    p = emb.AttentiveStatsPooling(feature_dim, attn_dim, embed_dim=8)
    p.reset(torch.Generator().manual_seed(0))
    return p


# -- attentive statistics pooling ------------------------------------------------


def test_uniform_attention_gives_mean_and_std():
    p = _pooling()
    with torch.no_grad():
        p.w.zero_()  # constant scores -> uniform softmax
    frames = np.array([[1.0, 0.0, 2.0, -1.0],
                       [3.0, 4.0, 0.0, -1.0],
                       [5.0, 2.0, 1.0, -1.0]], dtype=np.float32)
    out = emb.attentive_stats_pool(frames, p)
    mu = frames.mean(axis=0)
    sd = np.sqrt(frames.var(axis=0) + emb.ASP_EPS)
    assert np.allclose(out[:4], mu, atol=1e-6)
    assert np.allclose(out[4:], sd, atol=1e-6)


def test_single_frame_sigma_is_sqrt_eps():
    p = _pooling()
    frames = np.array([[0.5, -2.0, 1.0, 3.0]], dtype=np.float32)
    out = emb.attentive_stats_pool(frames, p)
    assert np.allclose(out[:4], frames[0], atol=1e-7)
    assert np.allclose(out[4:], np.sqrt(emb.ASP_EPS), atol=1e-9)


def test_two_frame_hand_case():
    # frames [1,0] and [0,1] with uniform attention: mu=(.5,.5), sigma=(.5,.5)
    p = emb.AttentiveStatsPooling(2, 3, embed_dim=8)
    p.reset(torch.Generator().manual_seed(0))
    with torch.no_grad():
        p.w.zero_()
    frames = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    out = emb.attentive_stats_pool(frames, p)
    assert np.allclose(out[:2], [0.5, 0.5], atol=1e-7)
    assert np.allclose(out[2:], [0.5, 0.5], atol=1e-6)


def test_empty_input_rejected():
    p = _pooling()
    with pytest.raises(TooShortError):
        emb.attentive_stats_pool(np.zeros((0, 4), dtype=np.float32), p)


def test_feature_dim_checked():
    p = _pooling()
    with pytest.raises(ShapeError):
        emb.attentive_stats_pool(np.zeros((3, 7), dtype=np.float32), p)


# -- class embedding construction ---------------------------------------------


def test_identical_recordings_equal_single(tiny_model):
    rec = sine(440, 1.5)
    one = emb.build_class_embedding([rec], tiny_model)
    three = emb.build_class_embedding([rec, rec, rec], tiny_model)
    assert np.allclose(one.vector, three.vector, atol=1e-6)


def test_two_recordings_normalized_midpoint(tiny_model):
    a, b = sine(440, 1.5), sine(1200, 1.5)
    ea = emb.utterance_embedding(a, tiny_model)
    eb = emb.utterance_embedding(b, tiny_model)
    mid = (ea + eb) / 2
    mid /= np.linalg.norm(mid)
    got = emb.build_class_embedding([a, b], tiny_model)
    assert np.allclose(got.vector, mid, atol=1e-6)


def test_recording_order_bit_exact(tiny_model, rng):
    recs = [sine(300, 1.2), sine(900, 1.2),
            Waveform(rng.standard_normal(20000).astype(np.float32) * 0.2, 16000)]
    a = emb.build_class_embedding(recs, tiny_model)
    b = emb.build_class_embedding(recs[::-1], tiny_model)
    assert np.array_equal(a.vector, b.vector)


def test_too_short_recording_identified(tiny_model):
    with pytest.raises(TooShortError) as exc:
        emb.build_class_embedding([sine(440, 1.5), sine(440, 0.4)], tiny_model)
    assert "1" in str(exc.value)  # names the offending recording


def test_distinct_classes_separate(tiny_model, rng):
    tone = [sine(440, 2.0)]
    noise = [Waveform(rng.standard_normal(32000).astype(np.float32) * 0.3, 16000)]
    et = emb.build_class_embedding(tone, tiny_model)
    en = emb.build_class_embedding(noise, tiny_model)
    assert float(et.vector @ en.vector) < 0.9


def test_unit_norm_enforced(tiny_model):
    e = emb.build_class_embedding([sine(440, 1.5)], tiny_model)
    assert abs(np.linalg.norm(e.vector) - 1.0) <= 1e-5
    with pytest.raises(ShapeError):
        emb.TargetEmbedding(np.full(768, 2.0, dtype=np.float32))


# -- store ---------------------------------------------------------------------


def test_store_upsert_lookup_bit_exact(rng):
    store = emb.EmbeddingStore()
    v = unit_vec(rng)
    store.upsert("dog_bark", emb.TargetEmbedding(v), "builtin", 3)
    assert np.array_equal(store.vector("dog_bark"), v)


def test_store_upsert_overwrites(rng):
    store = emb.EmbeddingStore()
    store.upsert("x", emb.TargetEmbedding(unit_vec(rng)), "builtin", 1)
    v2 = unit_vec(rng)
    store.upsert("x", emb.TargetEmbedding(v2), "custom", 2)
    assert len(store) == 1
    assert np.array_equal(store.vector("x"), v2)
    assert store.get("x").provenance == "custom"


def test_store_missing_id(rng):
    store = emb.EmbeddingStore()
    with pytest.raises(NotFoundError):
        store.get("nothing")


def test_store_roundtrip(tmp_path, rng):
    store = emb.EmbeddingStore()
    for i in range(25):
        prov = "custom" if i % 3 else "builtin"
        store.upsert(f"class_{i:02d}", emb.TargetEmbedding(unit_vec(rng)), prov, i)
    path = tmp_path / "s.embd"
    store.save(path)
    back = emb.EmbeddingStore.load(path)
    assert back.ids() == store.ids()
    for cid in store.ids():
        a, b = store.get(cid), back.get(cid)
        assert np.array_equal(a.embedding.vector, b.embedding.vector)
        assert a.provenance == b.provenance
        assert a.recording_count == b.recording_count


def test_store_empty_roundtrip(tmp_path):
    store = emb.EmbeddingStore()
    store.save(tmp_path / "e.embd")
    assert len(emb.EmbeddingStore.load(tmp_path / "e.embd")) == 0


def test_store_truncation_atomic(tmp_path, rng):
    store = emb.EmbeddingStore()
    store.upsert("a", emb.TargetEmbedding(unit_vec(rng)), "builtin", 1)
    store.upsert("b", emb.TargetEmbedding(unit_vec(rng)), "builtin", 1)
    path = tmp_path / "t.embd"
    store.save(path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(FormatError) as exc:
        emb.EmbeddingStore.load(path)
    assert exc.value.offset is not None


def test_store_bad_magic(tmp_path):
    p = tmp_path / "bad.embd"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(FormatError):
        emb.EmbeddingStore.load(p)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 12))
def test_store_roundtrip_property(tmp_path_factory, seed, count):
    r = np.random.default_rng(seed)
    store = emb.EmbeddingStore()
    for i in range(count):
        v = r.standard_normal(768).astype(np.float32)
        v /= np.linalg.norm(v)
        store.upsert(f"c{i}-{seed % 97}", emb.TargetEmbedding(v),
                     "custom" if r.integers(2) else "builtin", int(r.integers(100)))
    path = tmp_path_factory.mktemp("stores") / "p.embd"
    store.save(path)
    back = emb.EmbeddingStore.load(path)
    assert back.ids() == store.ids()
    for cid in store.ids():
        assert np.array_equal(back.vector(cid), store.vector(cid))


def test_builtin_catalog_size():
    assert len(emb.BUILTIN_CLASS_IDS) == 25
    assert len(set(emb.BUILTIN_CLASS_IDS)) == 25
