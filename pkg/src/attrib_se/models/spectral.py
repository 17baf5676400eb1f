"""Shared spectral front end: STFT pair and magnitude compression.

Two routes over the same configuration: a float64 numpy pair used for
analysis and tests, and a torch pair used inside model graphs.  Both use
zero padding of half a window on each side, so their outputs agree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .. import SAMPLE_RATE


class SpectralConfigError(ValueError):
    """Raised for (window, hop) pairs without perfect reconstruction."""


@dataclass(frozen=True)
class SpectrogramConfig:
    fft_size: int = 512
    hop: int = 128
    window: str = "hann"
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.hop > self.fft_size:
            raise SpectralConfigError(
                f"hop {self.hop} exceeds fft_size {self.fft_size}"
            )
        if self.window != "hann":
            raise SpectralConfigError(f"unsupported window {self.window!r}")
        validate_cola(self)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


def window_array(cfg: SpectrogramConfig) -> np.ndarray:
    # Periodic Hann: the DFT-even variant that satisfies overlap-add
    # constancy at hop = fft_size / 2^k.
    n = np.arange(cfg.fft_size)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / cfg.fft_size))


def validate_cola(cfg: SpectrogramConfig) -> None:
    """Require the squared window to overlap-add to a constant.

    That constancy is what turns the normalized overlap-add inverse into an
    exact identity over the interior of the signal.
    """
    win = window_array(cfg)
    acc = np.zeros(cfg.fft_size)
    for shift in range(0, cfg.fft_size, cfg.hop):
        acc += np.roll(win, shift) ** 2
    if acc.min() <= 0 or (acc.max() - acc.min()) / acc.max() > 1e-10:
        raise SpectralConfigError(
            f"window {cfg.window!r} with hop {cfg.hop} / fft {cfg.fft_size} "
            "does not satisfy constant overlap-add of the squared window"
        )


def _pad_length(length: int, cfg: SpectrogramConfig) -> tuple[int, int]:
    """(left pad, total padded length) for centered framing.

    Frame count is 1 + length // hop — the same convention torch.stft uses
    with center=True, so the two routes produce identical shapes.  The half
    window of padding on each side always covers the tail: the last frame
    ends at least fft_size - hop past the final sample.
    """
    left = cfg.fft_size // 2
    n_frames = 1 + length // cfg.hop
    return left, cfg.fft_size + cfg.hop * (n_frames - 1)


def stft(wave: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Complex spectrogram [n_bins, n_frames] in float64 precision."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ValueError("stft expects a mono waveform")
    if len(wave) < cfg.fft_size:
        raise ValueError(
            f"waveform length {len(wave)} shorter than fft_size {cfg.fft_size}"
        )
    left, padded = _pad_length(len(wave), cfg)
    buf = np.zeros(padded)
    buf[left : left + len(wave)] = wave
    n_frames = 1 + (padded - cfg.fft_size) // cfg.hop
    win = window_array(cfg)
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = buf[idx] * win
    return np.fft.rfft(frames, axis=1).T


def istft(spec: np.ndarray, cfg: SpectrogramConfig, length: int) -> np.ndarray:
    """Normalized overlap-add inverse of :func:`stft`, cropped to length."""
    spec = np.asarray(spec)
    if spec.shape[0] != cfg.n_bins:
        raise ValueError(
            f"spectrogram has {spec.shape[0]} bins, config expects {cfg.n_bins}"
        )
    n_frames = spec.shape[1]
    win = window_array(cfg)
    frames = np.fft.irfft(spec.T, n=cfg.fft_size, axis=1) * win
    padded = cfg.fft_size + cfg.hop * (n_frames - 1)
    out = np.zeros(padded)
    norm = np.zeros(padded)
    for f in range(n_frames):
        start = f * cfg.hop
        out[start : start + cfg.fft_size] += frames[f]
        norm[start : start + cfg.fft_size] += win**2
    left, _ = _pad_length(length, cfg)
    valid = slice(left, left + length)
    return out[valid] / norm[valid]


def stft_torch(wave: torch.Tensor, cfg: SpectrogramConfig) -> torch.Tensor:
    """In-graph complex spectrogram [..., n_bins, n_frames]."""
    win = torch.from_numpy(window_array(cfg)).to(wave.dtype).to(wave.device)
    return torch.stft(
        wave,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop,
        window=win,
        center=True,
        pad_mode="constant",
        return_complex=True,
    )


def istft_torch(spec: torch.Tensor, cfg: SpectrogramConfig, length: int) -> torch.Tensor:
    win = torch.from_numpy(window_array(cfg)).to(torch.float32).to(spec.device)
    return torch.istft(
        spec,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop,
        window=win,
        center=True,
        length=length,
    )


#: Exponent for magnitude-compressed spectrograms fed to the score network.
COMPRESS_EXPONENT = 0.5


def compress(spec, exponent: float = COMPRESS_EXPONENT):
    """Phase-preserving magnitude compression |s|^e * exp(i arg s).

    Works on numpy arrays and torch tensors alike; zeros map to zeros.
    """
    mod = torch if isinstance(spec, torch.Tensor) else np
    mag = mod.abs(spec)
    safe = mod.where(mag > 0, mag, mod.ones_like(mag))
    return spec * safe ** (exponent - 1.0)


def decompress(spec, exponent: float = COMPRESS_EXPONENT):
    return compress(spec, 1.0 / exponent)
