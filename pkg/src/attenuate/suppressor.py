"""Target-conditioned suppression network.

Complex encoder-decoder over STFT frames with a complex LSTM bottleneck.
The fused target embedding modulates the bottleneck via FiLM, and the
decoder emits a bounded complex ratio mask that is applied to the input
spectrogram before inversion back to a waveform.

The DC bin is excluded from the learned path (256 of the 257 bins enter the
encoder so frequency halves cleanly per stage) and passes through with a
unit mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import ComplexSpectrogram, Waveform, istft_torch, sqrt_hann_window, stft_torch
from .embeddings import AttentiveStatsPooling
from .errors import ConfigError, NumericError, ShapeError
from .fusion import Fusion
from .nn import (
    ComplexConvBlock,
    ComplexLSTM,
    film,
    load_checkpoint,
    save_checkpoint,
)


@dataclass
class SuppressorConfig:
    sample_rate: int = 16_000
    window_size: int = 512
    hop_size: int = 128
    enc_channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel_freq: int = 5
    kernel_time: int = 2
    stride_freq: int = 2
    lstm_layers: int = 2
    lstm_hidden: int = 128          # complex width; the real LSTM is twice this
    embed_dim: int = 768
    fusion_hidden: int = 1024
    mask_bound: float = 2.0
    asp_attn_dim: int = 64

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        if not self.enc_channels or any(c <= 0 for c in self.enc_channels):
            raise ConfigError("enc_channels must be positive")
        if self.lstm_hidden <= 0 or self.lstm_layers <= 0:
            raise ConfigError("LSTM dims must be positive")
        f = self.window_size // 2
        for _ in self.enc_channels:
            if f % self.stride_freq:
                raise ConfigError("frequency axis does not divide by the stride stack")
            f //= self.stride_freq

    @property
    def freq_bins(self) -> int:
        """Bins entering the encoder (DC excluded)."""
        return self.window_size // 2

    @property
    def bottleneck_freq(self) -> int:
        return self.freq_bins // (self.stride_freq ** len(self.enc_channels))

    @property
    def bottleneck_dim(self) -> int:
        """Complex feature count per time step at the bottleneck."""
        return self.enc_channels[-1] * self.bottleneck_freq

    @property
    def feature_dim(self) -> int:
        """Real-valued per-frame feature width fed to the embedding pipeline."""
        return 2 * self.enc_channels[-1]

    def to_header(self) -> dict[str, str]:
        out = {}
        for f_ in fields(self):
            v = getattr(self, f_.name)
            out[f"config.{f_.name}"] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "SuppressorConfig":
        kwargs = {}
        for f_ in fields(cls):
            key = f"config.{f_.name}"
            if key not in header:
                continue
            raw = header[key]
            if f_.name == "enc_channels":
                kwargs[f_.name] = tuple(int(x) for x in raw.split(","))
            elif f_.type in ("int", int):
                kwargs[f_.name] = int(raw)
            else:
                kwargs[f_.name] = float(raw)
        return cls(**kwargs)


def toy_config() -> SuppressorConfig:
    """Small configuration for CPU training and the synthetic acceptance runs."""
    return SuppressorConfig(enc_channels=(6, 8, 12, 16), lstm_hidden=64, asp_attn_dim=32)


class SuppressorModel(nn.Module):
    """F(x, e_fused): all learned parameters plus the architecture config."""

    def __init__(self, config: SuppressorConfig):
        super().__init__()
        self.config = config
        ch = [1, *config.enc_channels]
        kern = (config.kernel_freq, config.kernel_time)
        fpad = config.kernel_freq // 2
        self.encoder = nn.ModuleList(
            ComplexConvBlock(ch[i], ch[i + 1], kern, stride=(config.stride_freq, 1),
                             padding=(fpad, 0))
            for i in range(len(config.enc_channels))
        )
        self.decoder = nn.ModuleList(
            ComplexConvBlock(2 * ch[i + 1], ch[i], kern, stride=(config.stride_freq, 1),
                             padding=(fpad, 0), transposed=True, output_padding=(1, 0),
                             activation=(i != 0))
            for i in reversed(range(len(config.enc_channels)))
        )
        self.lstm = ComplexLSTM(config.bottleneck_dim, config.lstm_hidden,
                                config.lstm_layers)
        width = 2 * config.lstm_hidden
        self.lstm_proj = nn.Linear(width, 2 * config.bottleneck_dim)
        self.film_gamma = nn.Linear(config.embed_dim, width)
        self.film_beta = nn.Linear(config.embed_dim, width)
        self.fusion = Fusion(config.embed_dim, config.fusion_hidden)
        self.embedder = AttentiveStatsPooling(config.feature_dim, config.asp_attn_dim,
                                              config.embed_dim)
        self.register_buffer("window", sqrt_hann_window(config.window_size),
                             persistent=False)

    # -- initialization ----------------------------------------------------

    def reset_parameters(self, seed: int) -> None:
        """Deterministic init: Kaiming-uniform convolutions, orthogonal LSTM
        recurrence, zero biases, zero-weight FiLM heads with gamma bias 1 so
        the initial modulation is the identity."""
        g = torch.Generator().manual_seed(seed)
        a = 5 ** 0.5
        for name, p in self.named_parameters():
            if name.startswith(("film_gamma.weight", "film_beta.weight")):
                nn.init.zeros_(p)
            elif name == "film_gamma.bias":
                nn.init.ones_(p)
            elif name == "film_beta.bias":
                nn.init.zeros_(p)
            elif "lstm.weight_hh" in name:
                nn.init.orthogonal_(p, generator=g)
            elif "lstm.weight_ih" in name:
                nn.init.kaiming_uniform_(p, a=a, generator=g)
            elif name.endswith(("bias_re", "bias_im")) or name.endswith(".bias") or "bias" in name.split(".")[-1]:
                nn.init.zeros_(p)
            elif "norm.gamma" in name or name.endswith("act.weight"):
                pass  # LN gain 1 / PReLU slope 0.25 defaults
            elif p.ndim >= 2:
                nn.init.kaiming_uniform_(p, a=a, generator=g)
            else:
                nn.init.zeros_(p)
        self.fusion.reset(g)
        self.embedder.reset(g)
        # near-identity warm start for the mask head: small weights plus a
        # real bias putting the initial mask at ~1+0i, so training starts from
        # passthrough instead of rediscovering it, while nonzero weights keep
        # gradient flowing to the conditioning path from the first step
        head = self.decoder[-1].conv
        with torch.no_grad():
            head.conv_re.weight.mul_(0.05)
            head.conv_im.weight.mul_(0.05)
            head.bias_im.zero_()
            head.bias_re.fill_(math.atanh(1.0 / self.config.mask_bound))

    # -- forward paths -------------------------------------------------------

    def _mask_from_spec(self, spec: torch.Tensor, cond: torch.Tensor, state=None):
        """spec: complex [B, T, F_full]; cond: [B, embed_dim] -> bounded
        complex mask [B, T, F_full] plus the LSTM carry."""
        if not torch.isfinite(cond).all():
            raise NumericError("conditioning vector contains non-finite values")
        if cond.shape[-1] != self.config.embed_dim:
            raise ShapeError(f"conditioning dim {cond.shape[-1]} != {self.config.embed_dim}")
        x = spec[:, :, 1:]  # drop DC
        re = x.real.permute(0, 2, 1).unsqueeze(1).contiguous()  # [B, 1, F, T]
        im = x.imag.permute(0, 2, 1).unsqueeze(1).contiguous()
        skips = []
        for block in self.encoder:
            re = F.pad(re, (1, 0))  # causal pad on the time axis (kernel_time 2)
            im = F.pad(im, (1, 0))
            re, im = block(re, im)
            skips.append((re, im))

        b, c, fb, t = re.shape
        lstm_re = re.permute(3, 0, 1, 2).reshape(t, b, c * fb)
        lstm_im = im.permute(3, 0, 1, 2).reshape(t, b, c * fb)
        y_re, y_im, state = self.lstm(lstm_re, lstm_im, state)
        y = torch.cat([y_re, y_im], dim=-1)  # [T, B, 2H]
        gamma = self.film_gamma(cond)
        beta = self.film_beta(cond)
        y = film(y.permute(1, 2, 0), gamma, beta).permute(2, 0, 1)
        y = self.lstm_proj(y)  # [T, B, 2*D_bot]
        re = y[..., :c * fb].reshape(t, b, c, fb).permute(1, 2, 3, 0)
        im = y[..., c * fb:].reshape(t, b, c, fb).permute(1, 2, 3, 0)

        for block, (s_re, s_im) in zip(self.decoder, reversed(skips)):
            re = torch.cat([re, s_re], dim=1)
            im = torch.cat([im, s_im], dim=1)
            re, im = block(re, im)
            re, im = re[..., :t], im[..., :t]

        raw_re = re.squeeze(1).permute(0, 2, 1)  # [B, T, F]
        raw_im = im.squeeze(1).permute(0, 2, 1)
        mag = torch.sqrt(raw_re * raw_re + raw_im * raw_im + 1e-12)
        scale = self.config.mask_bound * torch.tanh(mag) / mag
        m_re, m_im = raw_re * scale, raw_im * scale
        dc = torch.ones_like(m_re[:, :, :1])
        mask = torch.complex(torch.cat([dc, m_re], dim=2),
                             torch.cat([torch.zeros_like(dc), m_im], dim=2))
        if not torch.isfinite(mask.real).all() or not torch.isfinite(mask.imag).all():
            raise NumericError("non-finite activation in mask head")
        return mask, state

    def forward_waveform(self, x: torch.Tensor, cond: torch.Tensor, state=None,
                         mask_hook: str | None = None):
        """Differentiable suppression: x [B, L] float32 -> ([B, L], state)."""
        cfg = self.config
        spec = stft_torch(x, cfg.window_size, cfg.hop_size, self.window)
        if mask_hook is None:
            mask, state = self._mask_from_spec(spec, cond, state)
        elif mask_hook == "ones":
            mask = torch.ones_like(spec)
        elif mask_hook == "zeros":
            mask = torch.zeros_like(spec)
        else:
            raise ConfigError(f"unknown mask hook {mask_hook!r}")
        y = istft_torch(spec * mask, cfg.window_size, cfg.hop_size, x.shape[-1],
                        self.window)
        return y, state

    def encode_features(self, x: torch.Tensor) -> torch.Tensor:
        """Encoder activations at the bottleneck, frequency-collapsed:
        x [B, L] -> [B, T, 2*C_bot]. Feeds the embedding pipeline."""
        cfg = self.config
        spec = stft_torch(x, cfg.window_size, cfg.hop_size, self.window)
        sub = spec[:, :, 1:]
        re = sub.real.permute(0, 2, 1).unsqueeze(1).contiguous()
        im = sub.imag.permute(0, 2, 1).unsqueeze(1).contiguous()
        for block in self.encoder:
            re = F.pad(re, (1, 0))
            im = F.pad(im, (1, 0))
            re, im = block(re, im)
        feats = torch.cat([re.mean(dim=2), im.mean(dim=2)], dim=1)  # [B, 2C, T]
        return feats.permute(0, 2, 1)

    # -- parameter access ----------------------------------------------------

    def named_param_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def trainable_param_dict(self) -> dict[str, torch.Tensor]:
        """Everything on the loss path; the embedder is refreshed out-of-graph."""
        return {n: p for n, p in self.named_parameters() if not n.startswith("embedder.")}


def init_model(config: SuppressorConfig, seed: int) -> SuppressorModel:
    from .embeddings import calibrate_embedder

    model = SuppressorModel(config)
    model.reset_parameters(seed)
    model.eval()
    calibrate_embedder(model)
    return model


def predict_mask(model: SuppressorModel, spec: ComplexSpectrogram, e_fused: np.ndarray,
                 state=None) -> tuple[np.ndarray, object]:
    """Complex ratio mask with the same shape as ``spec.frames``."""
    if spec.window_size != model.config.window_size or spec.hop_size != model.config.hop_size:
        raise ShapeError("spectrogram window/hop does not match the model config")
    s = torch.from_numpy(spec.frames.astype(np.complex64)).unsqueeze(0)
    cond = torch.from_numpy(np.asarray(e_fused, dtype=np.float32)).reshape(1, -1)
    with torch.no_grad():
        mask, state = model._mask_from_spec(s, cond, state)
    return mask.squeeze(0).numpy(), state


def suppress(model: SuppressorModel, wave: Waveform, e_fused: np.ndarray,
             mask_hook: str | None = None) -> Waveform:
    """Apply the suppression network to a 16 kHz waveform; output length equals
    input length."""
    if wave.sample_rate != model.config.sample_rate:
        raise ConfigError(
            f"suppress expects {model.config.sample_rate} Hz input, got {wave.sample_rate}"
        )
    x = torch.from_numpy(wave.samples).unsqueeze(0)
    cond = torch.from_numpy(np.asarray(e_fused, dtype=np.float32)).reshape(1, -1)
    with torch.no_grad():
        y, _ = model.forward_waveform(x, cond, mask_hook=mask_hook)
    return Waveform(y.squeeze(0).numpy(), wave.sample_rate)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_model(model: SuppressorModel, path, extra_header: dict[str, str] | None = None) -> None:
    header = model.config.to_header()
    if extra_header:
        header.update(extra_header)
    save_checkpoint(path, model.named_param_dict(), header)


def load_model(path) -> SuppressorModel:
    header, tensors = load_checkpoint(path)
    config = SuppressorConfig.from_header(header)
    model = SuppressorModel(config)
    params = dict(model.named_parameters())
    missing = set(params) - set(tensors)
    if missing:
        raise ConfigError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
    with torch.no_grad():
        for name, arr in tensors.items():
            if name in params:
                params[name].copy_(torch.from_numpy(arr))
    model.eval()
    return model
