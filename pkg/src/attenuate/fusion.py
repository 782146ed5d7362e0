"""Permutation-invariant fusion of a variable-sized target-embedding set.

A set of K class embeddings is projected through a learned two-layer map
with element-wise max-pooling between the layers:

    fused = W2 @ max_k silu(W1 @ e_k + b1) + b2

Max pooling is exact, so the result is bit-identical under reordering and
duplication of the inputs. K = 0 is rejected here; sessions treat an empty
target set as pure passthrough instead.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import EmptyTargetError, ShapeError
from .nn import silu

EMBED_DIM = 768
HIDDEN_DIM = 1024


def fuse_torch(embeddings: torch.Tensor, w1: torch.Tensor, b1: torch.Tensor,
               w2: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    """Core fusion on a [K, D_in] stack; returns [D_out].

    Ties in the max pool route gradient to the lowest-index contributor
    (torch.max returns the first maximal index).
    """
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise EmptyTargetError("fusion requires a non-empty [K, D] embedding stack")
    if embeddings.shape[1] != w1.shape[1]:
        raise ShapeError(
            f"embedding dim {embeddings.shape[1]} != projection input {w1.shape[1]}"
        )
    # project row by row: a batched matmul picks K-dependent BLAS kernels whose
    # roundings differ, which would break exact duplicate-idempotence across K
    hidden = torch.stack([silu(w1 @ e + b1) for e in embeddings])  # [K, H]
    pooled, _ = hidden.max(dim=0)                                  # [H]
    return w2 @ pooled + b2


class Fusion(nn.Module):
    """Learned fusion weights; parameter names are W1, b1, W2, b2 so the
    checkpoint records them as fusion.W1 etc."""

    def __init__(self, embed_dim: int = EMBED_DIM, hidden_dim: int = HIDDEN_DIM):
        super().__init__()
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.W1 = nn.Parameter(torch.empty(hidden_dim, embed_dim))
        self.b1 = nn.Parameter(torch.zeros(hidden_dim))
        self.W2 = nn.Parameter(torch.empty(embed_dim, hidden_dim))
        self.b2 = nn.Parameter(torch.zeros(embed_dim))

    def reset(self, generator: torch.Generator) -> None:
        nn.init.kaiming_uniform_(self.W1, a=5 ** 0.5, generator=generator)
        nn.init.kaiming_uniform_(self.W2, a=5 ** 0.5, generator=generator)
        nn.init.zeros_(self.b1)
        nn.init.zeros_(self.b2)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return fuse_torch(embeddings, self.W1, self.b1, self.W2, self.b2)


def fuse_embeddings(embeddings, fusion: Fusion) -> np.ndarray:
    """Fuse a sequence of 1-D numpy embeddings; returns float32 [D_out].

    The session/control layer entry point; training uses ``Fusion.forward``
    directly so gradients flow.
    """
    stack = [np.asarray(e, dtype=np.float32).reshape(-1) for e in embeddings]
    if not stack:
        raise EmptyTargetError("cannot fuse an empty target set")
    for e in stack:
        if e.size != fusion.embed_dim:
            raise ShapeError(f"embedding has dim {e.size}, expected {fusion.embed_dim}")
        if not np.all(np.isfinite(e)):
            raise ShapeError("embedding contains non-finite values")
    with torch.no_grad():
        out = fusion(torch.from_numpy(np.stack(stack)))
    return out.numpy().astype(np.float32)
