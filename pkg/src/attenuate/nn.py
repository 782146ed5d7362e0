"""Neural primitives with reverse-mode gradients, torch-backed.

Complex tensors are carried as paired real/imaginary float tensors; a complex
feature map with C channels is two real maps of C channels each (or one
stacked 2C-channel map where noted). Covers everything the suppressor needs:
complex 2-D convolution blocks, a complex LSTM realized as a real LSTM over
stacked real/imag features, FiLM, SiLU, an AdamW optimizer with decoupled
weight decay and global-norm clipping, and the binary checkpoint format.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError, NumericError, ShapeError

DEFAULT_LR = 1e-3
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_WEIGHT_DECAY = 1e-2
DEFAULT_CLIP_NORM = 5.0
DEFAULT_EPS = 1e-8
WARMUP_FRACTION = 0.05


def silu(x: torch.Tensor) -> torch.Tensor:
    """x * sigmoid(x)."""
    return F.silu(x)


def film(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-channel affine modulation: out[c, ...] = gamma[c]*features[c, ...] + beta[c].

    ``features`` is channel-first ([C, ...] or batched [B, C, ...]); gamma and
    beta are [C] or [B, C].
    """
    if gamma.shape != beta.shape:
        raise ShapeError(f"gamma {tuple(gamma.shape)} != beta {tuple(beta.shape)}")
    channels = gamma.shape[-1]
    batched = features.ndim >= 2 and gamma.ndim == 2
    c_axis = 1 if batched else 0
    if features.shape[c_axis] != channels:
        raise ShapeError(
            f"features have {features.shape[c_axis]} channels, modulation has {channels}"
        )
    shape = [1] * features.ndim
    shape[c_axis] = channels
    if batched:
        shape[0] = gamma.shape[0]
    return features * gamma.reshape(shape) + beta.reshape(shape)


def complex_conv2d(
    x_re: torch.Tensor,
    x_im: torch.Tensor,
    w_re: torch.Tensor,
    w_im: torch.Tensor,
    b_re: torch.Tensor | None = None,
    b_im: torch.Tensor | None = None,
    stride=1,
    padding=0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(A+iB) * (x+iy) = (Ax - By) + i(Bx + Ay) via four real convolutions.

    Inputs are [C_in, H, W] or [B, C_in, H, W]; weights [C_out, C_in, kh, kw].
    """
    if x_re.shape != x_im.shape:
        raise ShapeError("real/imag input shapes differ")
    squeeze = x_re.ndim == 3
    if squeeze:
        x_re, x_im = x_re.unsqueeze(0), x_im.unsqueeze(0)
    try:
        rr = F.conv2d(x_re, w_re, stride=stride, padding=padding)
        ii = F.conv2d(x_im, w_im, stride=stride, padding=padding)
        ri = F.conv2d(x_re, w_im, stride=stride, padding=padding)
        ir = F.conv2d(x_im, w_re, stride=stride, padding=padding)
    except RuntimeError as exc:
        raise ShapeError(str(exc)) from exc
    out_re, out_im = rr - ii, ri + ir
    if b_re is not None:
        out_re = out_re + b_re.reshape(1, -1, 1, 1)
    if b_im is not None:
        out_im = out_im + b_im.reshape(1, -1, 1, 1)
    if squeeze:
        out_re, out_im = out_re.squeeze(0), out_im.squeeze(0)
    return out_re, out_im


class ChannelLayerNorm(nn.Module):
    """Layer normalization across the channel axis at every position.

    Batch-size independent, so inference on a live stream behaves exactly as
    in training.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # [B, C, ...]
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        xn = (x - mu) / torch.sqrt(var + self.eps)
        shape = [1, -1] + [1] * (x.ndim - 2)
        return xn * self.gamma.reshape(shape) + self.beta.reshape(shape)


class ComplexConv2d(nn.Module):
    """Complex convolution with an explicit complex bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride=1,
                 padding=0, transposed: bool = False, output_padding=0):
        super().__init__()
        self.transposed = transposed
        kw = dict(stride=stride, padding=padding, bias=False)
        if transposed:
            kw["output_padding"] = output_padding
            conv = nn.ConvTranspose2d
        else:
            conv = nn.Conv2d
        self.conv_re = conv(in_channels, out_channels, kernel_size, **kw)
        self.conv_im = conv(in_channels, out_channels, kernel_size, **kw)
        self.bias_re = nn.Parameter(torch.zeros(out_channels))
        self.bias_im = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x_re: torch.Tensor, x_im: torch.Tensor):
        rr, ii = self.conv_re(x_re), self.conv_im(x_im)
        ri, ir = self.conv_im(x_re), self.conv_re(x_im)
        out_re = rr - ii + self.bias_re.reshape(1, -1, 1, 1)
        out_im = ri + ir + self.bias_im.reshape(1, -1, 1, 1)
        return out_re, out_im


class ComplexConvBlock(nn.Module):
    """Complex conv followed by channel layer norm and PReLU over the stacked
    real/imag channels. ``activation=False`` yields the raw conv (used for the
    mask output layer)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride=1,
                 padding=0, transposed: bool = False, output_padding=0,
                 activation: bool = True):
        super().__init__()
        self.conv = ComplexConv2d(in_channels, out_channels, kernel_size, stride,
                                  padding, transposed, output_padding)
        self.activation = activation
        if activation:
            self.norm = ChannelLayerNorm(2 * out_channels)
            self.act = nn.PReLU(2 * out_channels)

    def forward(self, x_re: torch.Tensor, x_im: torch.Tensor):
        out_re, out_im = self.conv(x_re, x_im)
        if not self.activation:
            return out_re, out_im
        stacked = torch.cat([out_re, out_im], dim=1)
        stacked = self.act(self.norm(stacked))
        c = out_re.shape[1]
        return stacked[:, :c], stacked[:, c:]


class ComplexLSTM(nn.Module):
    """Complex LSTM realized as a real LSTM of width 2H over concatenated
    (real, imag) features. Stateful across streaming chunks via the returned
    carry."""

    def __init__(self, input_dim: int, hidden_dim: int, num_layers: int = 2):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.lstm = nn.LSTM(2 * input_dim, 2 * hidden_dim, num_layers=num_layers)

    def forward(self, x_re: torch.Tensor, x_im: torch.Tensor, state=None):
        """x_re, x_im: [T, B, D] -> ([T, B, H], [T, B, H], state)."""
        if x_re.shape[-1] != self.input_dim:
            raise ShapeError(f"expected input dim {self.input_dim}, got {x_re.shape[-1]}")
        if state is not None and state[0].shape[-1] != 2 * self.hidden_dim:
            raise ShapeError("carried state width does not match hidden size")
        y, state = self.lstm(torch.cat([x_re, x_im], dim=-1), state)
        return y[..., :self.hidden_dim], y[..., self.hidden_dim:], state


def complex_lstm(module: ComplexLSTM, x_re: torch.Tensor, x_im: torch.Tensor, state=None):
    return module(x_re, x_im, state)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class ParamSet:
    """Named parameters plus optimizer state."""

    params: dict[str, torch.Tensor]
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.params)) != len(self.params):
            raise ShapeError("parameter names must be unique")


def clip_global_norm(grads: dict[str, torch.Tensor], clip_norm: float) -> tuple[dict[str, torch.Tensor], float]:
    """Scale all gradients so their joint L2 norm is at most ``clip_norm``.

    Returns the (possibly rescaled) gradients and the pre-clip norm.
    """
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
    norm = float(total)
    if clip_norm is not None and norm > clip_norm > 0:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@torch.no_grad()
def adamw_step(
    pset: ParamSet,
    grads: dict[str, torch.Tensor],
    lr: float = DEFAULT_LR,
    betas: tuple[float, float] = DEFAULT_BETAS,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    clip_norm: float | None = DEFAULT_CLIP_NORM,
    eps: float = DEFAULT_EPS,
) -> float:
    """Global-norm clipping, then Adam with decoupled weight decay.

    Rejects the step (no mutation) if any gradient is non-finite. Returns the
    pre-clip gradient norm.
    """
    for name, g in grads.items():
        if name not in pset.params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != pset.params[name].shape:
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}; step rejected")

    grads, norm = clip_global_norm(grads, clip_norm)
    pset.step += 1
    t = pset.step
    beta1, beta2 = betas
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = pset.params[name]
        if name not in pset.exp_avg:
            pset.exp_avg[name] = torch.zeros_like(p)
            pset.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = pset.exp_avg[name], pset.exp_avg_sq[name]
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.addcdiv_(m / bc1, torch.sqrt(v / bc2) + eps, value=-lr)
    return norm


def lr_schedule(step: int, total_steps: int, base_lr: float = DEFAULT_LR,
                warmup_fraction: float = WARMUP_FRACTION) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then cosine
    decay to zero."""
    if total_steps <= 0:
        return base_lr
    warmup = max(1, int(round(total_steps * warmup_fraction)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Checkpoint format: magic "ATTN", u32 version, header block, tensor records
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ATTN"
CHECKPOINT_VERSION = 1
_DTYPE_FLOAT32 = 0


def save_checkpoint(path, tensors: dict[str, np.ndarray | torch.Tensor],
                    header: dict[str, str] | None = None) -> None:
    """Write tensors in deterministic (sorted-name) order; float32 payloads."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    htext = "".join(f"{k}={v}\n" for k, v in sorted((header or {}).items()))
    hbytes = htext.encode("utf-8")
    blob += struct.pack("<I", len(hbytes)) + hbytes
    for name in sorted(tensors):
        t = tensors[name]
        if isinstance(t, torch.Tensor):
            t = t.detach().cpu().numpy()
        t = np.asarray(t)
        shape = t.shape  # before ascontiguousarray, which promotes 0-d to 1-d
        arr = np.ascontiguousarray(t, dtype="<f4")
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<BI", _DTYPE_FLOAT32, len(shape))
        blob += struct.pack(f"<{len(shape)}I", *shape)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = 8

    def _need(n: int):
        if pos + n > len(data):
            raise FormatError("truncated checkpoint", offset=pos)

    _need(4)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    _need(hlen)
    header: dict[str, str] = {}
    for line in data[pos:pos + hlen].decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            header[k] = v
    pos += hlen

    tensors: dict[str, np.ndarray] = {}
    while pos < len(data):
        _need(4)
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        _need(nlen)
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        _need(5)
        dtype_tag, rank = struct.unpack_from("<BI", data, pos)
        pos += 5
        if dtype_tag != _DTYPE_FLOAT32:
            raise FormatError(f"unknown dtype tag {dtype_tag}", offset=pos - 5)
        _need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        _need(4 * count)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        tensors[name] = arr.copy()
    return header, tensors


def checkpoint_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values in {name}")
