from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
import torch

from attenuate.errors import EmptyTargetError, ShapeError
from attenuate.fusion import Fusion, fuse_embeddings, fuse_torch

from .conftest import fd_gradient, unit_vec


def _random_fusion(seed: int = 0) -> Fusion:
    f = Fusion()
    f.reset(torch.Generator().manual_seed(seed))
    return f


def test_singleton_equals_direct_projection():
    f = _random_fusion()
    e = torch.randn(1, 768)
    out = f(e)
    hidden = torch.nn.functional.silu(e[0] @ f.W1.T + f.b1)
    want = f.W2 @ hidden + f.b2
    assert torch.equal(out, want)


def test_permutation_invariance_exact():
    f = _random_fusion(1)
    embs = torch.randn(3, 768)
    base = f(embs)
    for perm in itertools.permutations(range(3)):
        assert torch.equal(f(embs[list(perm)]), base)


def test_duplicate_idempotence_exact():
    f = _random_fusion(2)
    e = torch.randn(1, 768)
    pair = torch.cat([e, e])
    assert torch.equal(f(pair), f(e))


def test_toy_dims_hand_evaluated():
    # 2 -> 3 -> 2 with hand-set weights; expected values evaluated from the
    # two-layer formula by hand
    w1 = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, -1.0]])
    b1 = torch.tensor([0.0, 0.5, -0.5])
    w2 = torch.tensor([[1.0, 2.0, 0.0], [0.0, -1.0, 1.0]])
    b2 = torch.tensor([0.25, -0.75])
    e1 = torch.tensor([1.0, 0.0])
    e2 = torch.tensor([0.0, 2.0])

    def s(x):  # silu
        return x / (1.0 + math.exp(-x))

    h1 = [s(1.0), s(0.5), s(0.5)]
    h2 = [s(0.0), s(2.5), s(-2.5)]
    pooled = [max(a, b) for a, b in zip(h1, h2)]
    want = [
        1.0 * pooled[0] + 2.0 * pooled[1] + 0.0 * pooled[2] + 0.25,
        0.0 * pooled[0] - 1.0 * pooled[1] + 1.0 * pooled[2] - 0.75,
    ]
    out = fuse_torch(torch.stack([e1, e2]), w1, b1, w2, b2)
    assert np.allclose(out.numpy(), want, atol=1e-6)


def test_empty_set_rejected():
    f = _random_fusion()
    with pytest.raises(EmptyTargetError):
        f(torch.zeros(0, 768))
    with pytest.raises(EmptyTargetError):
        fuse_embeddings([], f)


def test_wrong_dimension_rejected(rng):
    f = _random_fusion()
    with pytest.raises(ShapeError):
        fuse_embeddings([rng.standard_normal(100).astype(np.float32)], f)


def test_monotone_pooling(rng):
    f = _random_fusion(3)
    embs = torch.randn(2, 768)
    extra = torch.randn(1, 768)
    with torch.no_grad():
        h2 = torch.nn.functional.silu(embs @ f.W1.T + f.b1).max(dim=0).values
        h3 = torch.nn.functional.silu(torch.cat([embs, extra]) @ f.W1.T + f.b1).max(dim=0).values
    assert torch.all(h3 >= h2)


def test_numpy_wrapper_matches_torch(rng):
    f = _random_fusion(4)
    vecs = [unit_vec(rng) for _ in range(3)]
    out = fuse_embeddings(vecs, f)
    with torch.no_grad():
        want = f(torch.from_numpy(np.stack(vecs))).numpy()
    assert np.array_equal(out, want)
    assert out.dtype == np.float32


def test_gradients_vs_fd_and_argmax_routing():
    torch.manual_seed(0)
    w1 = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
    b1 = torch.zeros(6, dtype=torch.float64, requires_grad=True)
    w2 = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    b2 = torch.zeros(4, dtype=torch.float64, requires_grad=True)
    embs = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)

    def forward():
        return fuse_torch(embs, w1, b1, w2, b2).sin().sum()

    loss = forward()
    loss.backward()
    for tensor in (w1, w2, embs):
        coords = [0, 3, 7]
        fd = fd_gradient(forward, tensor.data, coords, h=1e-5)
        an = tensor.grad.reshape(-1)[coords].tolist()
        for a_val, f_val in zip(an, fd):
            assert abs(a_val - f_val) <= 1e-3 * max(1.0, abs(f_val))

    # only the argmax-winning embedding receives gradient per hidden coord
    with torch.no_grad():
        hidden = torch.nn.functional.silu(embs @ w1.T + b1)
        winners = hidden.argmax(dim=0)
    for k in range(3):
        if not (winners == k).any():
            assert torch.all(embs.grad[k] == 0.0)


def test_tie_routes_gradient_to_lowest_index():
    w1 = torch.eye(2, dtype=torch.float64)
    b1 = torch.zeros(2, dtype=torch.float64)
    w2 = torch.ones(1, 2, dtype=torch.float64)
    b2 = torch.zeros(1, dtype=torch.float64)
    embs = torch.tensor([[1.0, 0.5], [1.0, 0.5]], dtype=torch.float64,
                        requires_grad=True)  # exact tie
    out = fuse_torch(embs, w1, b1, w2, b2).sum()
    out.backward()
    assert torch.all(embs.grad[0] != 0.0)
    assert torch.all(embs.grad[1] == 0.0)


def test_fusion_acceptance_batch(rng):
    """1000 random weight/embedding draws: exact permutation invariance and
    duplicate idempotence for K <= 4."""
    g = torch.Generator().manual_seed(99)
    for trial in range(1000):
        d_in, d_h = 6, 9
        w1 = torch.randn(d_h, d_in, generator=g)
        b1 = torch.randn(d_h, generator=g)
        w2 = torch.randn(d_in, d_h, generator=g)
        b2 = torch.randn(d_in, generator=g)
        k = int(torch.randint(1, 5, (1,), generator=g))
        embs = torch.randn(k, d_in, generator=g)
        base = fuse_torch(embs, w1, b1, w2, b2)
        perm = torch.randperm(k, generator=g)
        assert torch.equal(fuse_torch(embs[perm], w1, b1, w2, b2), base)
        dup = torch.cat([embs, embs[:1]])
        if k >= 1:
            assert torch.equal(fuse_torch(dup, w1, b1, w2, b2), base)
