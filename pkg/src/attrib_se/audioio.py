"""WAV audio I/O. PCM16, mono, canonical 16 kHz.

All waveforms in the framework are 1-D float64 numpy arrays in [-1, 1].
Conversion to and from PCM16 is deterministic (round-half-away-from-zero
via numpy rounding), so identical float input always produces identical
bytes on disk.
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

PCM16_SCALE = 32767.0


class AudioFormatError(ValueError):
    """Raised for unreadable or unsupported audio files."""


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a mono PCM16 WAV file. Returns (waveform float64 in [-1,1], sample_rate)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise AudioFormatError(f"{path}: compressed WAV not supported")
            if wf.getsampwidth() != 2:
                raise AudioFormatError(
                    f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit"
                )
            if wf.getnchannels() != 1:
                raise AudioFormatError(
                    f"{path}: expected mono, got {wf.getnchannels()} channels"
                )
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM16_SCALE
    return samples, rate


def write_wav(path: str | Path, wave_data: np.ndarray, sample_rate: int) -> None:
    """Write a mono PCM16 WAV file. Values outside [-1, 1] are clipped."""
    path = Path(path)
    data = np.asarray(wave_data, dtype=np.float64)
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: expected 1-D waveform, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise AudioFormatError(f"{path}: waveform contains NaN or Inf")
    pcm = np.clip(np.rint(data * PCM16_SCALE), -32768, 32767).astype("<i2")
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def probe_wav(path: str | Path) -> tuple[int, int]:
    """Read (num_samples, sample_rate) from a WAV header without decoding audio."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise AudioFormatError(
                    f"{path}: expected mono, got {wf.getnchannels()} channels"
                )
            return wf.getnframes(), wf.getframerate()
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file: {exc}") from exc
