"""Band-split recurrent mask estimator (discriminative family).

stft -> per-band norm + projection -> dual-path recurrent blocks (time,
then bands, each residual) -> per-band mask decoder -> complex ratio mask
-> istft.  Sized for CPU training on fixture corpora; the experiments this
serves vary training data, not model capacity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .spectral import SpectrogramConfig, istft_torch, stft_torch

#: Mask components pass through tanh, so |mask| never exceeds sqrt(2).
K_MASK = float(np.sqrt(2.0))


class ModelError(ValueError):
    """Raised for invalid model configuration or corrupted parameters."""


def default_band_edges(fft_size: int = 512) -> tuple[int, ...]:
    """Eight non-uniform bands over [0, fft_size/2], finer low-frequency
    resolution (below ~1.5 kHz at 16 kHz sampling)."""
    if fft_size != 512:
        raise ModelError("default band layout is defined for fft_size=512")
    return (0, 8, 16, 28, 48, 80, 128, 192, 257)


@dataclass(frozen=True)
class BsrnnConfig:
    fft_size: int = 512
    hop: int = 128
    band_edges: tuple[int, ...] = field(default_factory=default_band_edges)
    feature_dim: int = 16
    num_blocks: int = 2

    def __post_init__(self):
        n_bins = self.fft_size // 2 + 1
        edges = self.band_edges
        if len(edges) < 2 or edges[0] != 0 or edges[-1] != n_bins:
            raise ModelError(
                f"band_edges must run from 0 to {n_bins}, got {edges}"
            )
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ModelError(f"band_edges must be strictly ascending: {edges}")
        if self.feature_dim < 1:
            raise ModelError("feature_dim must be >= 1")
        if self.num_blocks < 1:
            raise ModelError("num_blocks must be >= 1")

    @property
    def spectrogram(self) -> SpectrogramConfig:
        return SpectrogramConfig(fft_size=self.fft_size, hop=self.hop)

    @property
    def band_widths(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.band_edges, self.band_edges[1:]))

    def to_json(self) -> dict:
        return {
            "fft_size": self.fft_size,
            "hop": self.hop,
            "band_edges": list(self.band_edges),
            "feature_dim": self.feature_dim,
            "num_blocks": self.num_blocks,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BsrnnConfig":
        return cls(
            fft_size=obj["fft_size"],
            hop=obj["hop"],
            band_edges=tuple(obj["band_edges"]),
            feature_dim=obj["feature_dim"],
            num_blocks=obj["num_blocks"],
        )


class _PathRnn(nn.Module):
    """Norm -> bidirectional GRU -> projection, with residual add."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.rnn = nn.GRU(dim, dim, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [batch, seq, dim]
        out, _ = self.rnn(self.norm(x))
        return x + self.proj(out)


class Bsrnn(nn.Module):
    def __init__(self, cfg: BsrnnConfig | None = None):
        super().__init__()
        self.cfg = cfg or BsrnnConfig()
        dim = self.cfg.feature_dim
        self.band_norms = nn.ModuleList(
            nn.LayerNorm(2 * w) for w in self.cfg.band_widths
        )
        self.band_proj = nn.ModuleList(
            nn.Linear(2 * w, dim) for w in self.cfg.band_widths
        )
        self.time_paths = nn.ModuleList(
            _PathRnn(dim) for _ in range(self.cfg.num_blocks)
        )
        self.band_paths = nn.ModuleList(
            _PathRnn(dim) for _ in range(self.cfg.num_blocks)
        )
        self.decoders = nn.ModuleList(
            nn.Sequential(
                nn.LayerNorm(dim),
                nn.Linear(dim, 4 * dim),
                nn.Tanh(),
                nn.Linear(4 * dim, 2 * w),
            )
            for w in self.cfg.band_widths
        )

    def _check_params(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise ModelError(f"non-finite parameter {name}")

    def estimate_mask(self, spec: torch.Tensor) -> torch.Tensor:
        """Complex ratio mask for a complex spectrogram [B, n_bins, T]."""
        edges = self.cfg.band_edges
        batch, _, n_frames = spec.shape
        feats = []
        for b, (lo, hi) in enumerate(zip(edges, edges[1:])):
            sub = spec[:, lo:hi, :]  # [B, w, T]
            x = torch.cat([sub.real, sub.imag], dim=1)  # [B, 2w, T]
            x = x.permute(0, 2, 1)  # [B, T, 2w]
            feats.append(self.band_proj[b](self.band_norms[b](x)))
        h = torch.stack(feats, dim=2)  # [B, T, K, F]
        n_bands = h.shape[2]
        dim = h.shape[3]
        for t_path, b_path in zip(self.time_paths, self.band_paths):
            x = h.permute(0, 2, 1, 3).reshape(batch * n_bands, n_frames, dim)
            x = t_path(x)
            h = x.reshape(batch, n_bands, n_frames, dim).permute(0, 2, 1, 3)
            x = h.reshape(batch * n_frames, n_bands, dim)
            x = b_path(x)
            h = x.reshape(batch, n_frames, n_bands, dim)
        mask_parts = []
        for b, (lo, hi) in enumerate(zip(edges, edges[1:])):
            w = hi - lo
            out = torch.tanh(self.decoders[b](h[:, :, b, :]))  # [B, T, 2w]
            re, im = out[..., :w], out[..., w:]
            mask_parts.append(torch.complex(re, im).permute(0, 2, 1))
        return torch.cat(mask_parts, dim=1)  # [B, n_bins, T]

    def forward(
        self, wave: torch.Tensor, mask_override=None
    ) -> torch.Tensor:
        """Enhance a waveform [L] or [B, L]; output matches input shape.

        ``mask_override`` replaces the learned mask: "identity" applies a
        unit-real mask (output = istft round trip of the input), a callable
        receives the noisy spectrogram and returns a mask.
        """
        self._check_params()
        if not torch.isfinite(wave).all():
            raise ModelError("non-finite input waveform")
        squeeze = wave.dim() == 1
        if squeeze:
            wave = wave[None, :]
        length = wave.shape[-1]
        if length < self.cfg.fft_size:
            raise ModelError(
                f"input length {length} shorter than fft_size {self.cfg.fft_size}"
            )
        spec = stft_torch(wave, self.cfg.spectrogram)
        if mask_override is None:
            mask = self.estimate_mask(spec)
        elif mask_override == "identity":
            mask = torch.complex(torch.ones_like(spec.real), torch.zeros_like(spec.real))
        else:
            mask = mask_override(spec)
        out = istft_torch(spec * mask, self.cfg.spectrogram, length)
        return out[0] if squeeze else out


def bsrnn_from_checkpoint(ckpt) -> Bsrnn:
    from .checkpoint import load_state_from_numpy

    if ckpt.kind != "bsrnn":
        raise ModelError(f"checkpoint kind {ckpt.kind!r}, expected 'bsrnn'")
    model = Bsrnn(BsrnnConfig.from_json(ckpt.config["model"]))
    load_state_from_numpy(model, ckpt.tensors)
    model.eval()
    return model


def bsrnn_forward(
    wave: np.ndarray, model: Bsrnn, mask_override=None
) -> np.ndarray:
    """Numpy float64 in/out wrapper around :meth:`Bsrnn.forward`."""
    x = torch.from_numpy(np.asarray(wave, dtype=np.float32))
    with torch.no_grad():
        y = model(x, mask_override=mask_override)
    return y.numpy().astype(np.float64)


def waveform_mae(estimate: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    if estimate.shape != reference.shape:
        raise ModelError(
            f"length mismatch: {tuple(estimate.shape)} vs {tuple(reference.shape)}"
        )
    return torch.mean(torch.abs(estimate - reference))


def magnitude_mae(
    estimate: torch.Tensor,
    reference: torch.Tensor,
    cfg: SpectrogramConfig | None = None,
) -> torch.Tensor:
    if estimate.shape != reference.shape:
        raise ModelError(
            f"length mismatch: {tuple(estimate.shape)} vs {tuple(reference.shape)}"
        )
    cfg = cfg or SpectrogramConfig()
    est_mag = torch.abs(stft_torch(estimate, cfg))
    ref_mag = torch.abs(stft_torch(reference, cfg))
    return torch.mean(torch.abs(est_mag - ref_mag))


def bsrnn_loss(
    estimate: torch.Tensor,
    reference: torch.Tensor,
    cfg: SpectrogramConfig | None = None,
) -> torch.Tensor:
    """Waveform MAE + magnitude MAE, equal weights."""
    return waveform_mae(estimate, reference) + magnitude_mae(estimate, reference, cfg)
