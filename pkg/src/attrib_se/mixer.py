"""Reproducible noisy-clean pair construction at controlled SNRs.

Two modes: pre-simulated fixed datasets (speech-attribute experiments) and
deterministic on-the-fly streams (noise-attribute experiments).  Mixing is
power-based: the noise gain is computed on the prepared (tiled or cropped)
noise segment, so re-measuring the SNR of any produced pair recovers the
requested value exactly up to PCM quantization.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import SAMPLE_RATE
from .audioio import read_wav, write_wav
from .corpus import Manifest, NoiseRecord
from .sampler import NoiseSubset

log = logging.getLogger(__name__)

SILENCE_RMS = 1e-8
CLIP_PEAK = 0.9

#: Default training SNR range in dB, mirroring the evaluation range.
DEFAULT_SNR_RANGE = (-5.0, 10.0)


class MixError(ValueError):
    """Raised for undefined or unreproducible mixing requests."""


@dataclass(frozen=True)
class MixSpec:
    speech_id: str
    noise_id: str
    snr_db: float
    noise_offset: int
    noise_gain: float
    seed: int
    rescale: float = 1.0

    def __post_init__(self):
        if not self.noise_gain > 0:
            raise MixError(f"noise_gain must be > 0, got {self.noise_gain}")
        if not np.isfinite(self.snr_db):
            raise MixError(f"snr_db must be finite, got {self.snr_db}")

    def to_json(self) -> dict:
        return {
            "speech_id": self.speech_id,
            "noise_id": self.noise_id,
            "snr_db": self.snr_db,
            "noise_offset": self.noise_offset,
            "noise_gain": self.noise_gain,
            "seed": self.seed,
            "rescale": self.rescale,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MixSpec":
        return cls(**{k: obj[k] for k in (
            "speech_id", "noise_id", "snr_db", "noise_offset",
            "noise_gain", "seed", "rescale",
        )})


@dataclass
class PairedDataset:
    pairs: list[tuple[str, str, MixSpec]]  # (noisy_uri, clean_uri, spec)
    speech_manifest_id: str
    noise_record_ids: list[str]
    snr_range: tuple[float, float]
    seed: int
    root: str = ""

    def __len__(self) -> int:
        return len(self.pairs)


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def snr_gain(speech: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Linear gain g with speech + g*noise at the requested SNR.

    Powers are mean squared sample over the overlapped (min-length) region;
    silent inputs make the SNR undefined and raise.
    """
    length = min(len(speech), len(noise))
    if length == 0:
        raise MixError("empty waveform")
    p_speech = _power(speech[:length])
    p_noise = _power(noise[:length])
    if p_speech <= SILENCE_RMS**2:
        raise MixError("silent speech: SNR undefined")
    if p_noise <= SILENCE_RMS**2:
        raise MixError("silent noise: SNR undefined")
    return float(np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0))))


def prepare_noise(noise: np.ndarray, length: int, offset: int) -> np.ndarray:
    """Length-matched noise view: contiguous crop when the clip is long
    enough, circular tiling from the offset otherwise."""
    if len(noise) == 0:
        raise MixError("empty noise clip")
    idx = (offset + np.arange(length)) % len(noise)
    return noise[idx]


def draw_offset(rng: np.random.Generator, noise_len: int, speech_len: int) -> int:
    if noise_len >= speech_len:
        return int(rng.integers(0, noise_len - speech_len + 1))
    return int(rng.integers(0, noise_len))


def mix_pair(
    speech: np.ndarray,
    noise: np.ndarray,
    snr_db: float,
    seed: int,
    speech_id: str = "",
    noise_id: str = "",
) -> tuple[np.ndarray, np.ndarray, MixSpec]:
    """Build one (noisy, clean, MixSpec) triple.

    The offset into the noise clip is the only random choice and is drawn
    from the seed.  If the mixture would clip, noisy and clean are rescaled
    together to peak 0.9 — the common factor leaves the SNR untouched and
    is recorded in the spec.
    """
    rng = np.random.default_rng(seed)
    offset = draw_offset(rng, len(noise), len(speech))
    prepared = prepare_noise(noise, len(speech), offset)
    gain = snr_gain(speech, prepared, snr_db)
    noisy = speech + gain * prepared
    rescale = 1.0
    peak = float(np.max(np.abs(noisy)))
    if peak > 1.0:
        rescale = CLIP_PEAK / peak
    spec = MixSpec(
        speech_id=speech_id,
        noise_id=noise_id,
        snr_db=float(snr_db),
        noise_offset=offset,
        noise_gain=gain,
        seed=seed,
        rescale=rescale,
    )
    return noisy * rescale, speech * rescale, spec


def remix_from_spec(
    speech: np.ndarray, noise: np.ndarray, spec: MixSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Replay a MixSpec bit-exactly from the source waveforms."""
    prepared = prepare_noise(noise, len(speech), spec.noise_offset)
    noisy = speech + spec.noise_gain * prepared
    return noisy * spec.rescale, speech * spec.rescale


def measured_snr_db(noisy: np.ndarray, clean: np.ndarray) -> float:
    """SNR implied by a pair, treating (noisy - clean) as the noise."""
    residual = noisy - clean
    p_noise = _power(residual)
    if p_noise == 0.0:
        raise MixError("identical noisy and clean: SNR infinite")
    return 10.0 * float(np.log10(_power(clean) / p_noise))


def _load_noise_waves(
    subset: NoiseSubset, pool: list[NoiseRecord]
) -> list[tuple[str, np.ndarray]]:
    by_id = {r.id: r for r in pool}
    waves = []
    for rid in subset.record_ids:
        if rid not in by_id:
            raise MixError(f"noise record {rid!r} missing from pool")
        waves.append((rid, read_wav(by_id[rid].audio_uri)[0]))
    if not waves:
        raise MixError("empty noise subset")
    return waves


def _pair_specs_for_epoch(
    speech: Manifest,
    noise_waves: list[tuple[str, np.ndarray]],
    snr_range: tuple[float, float],
    seed: int,
    epoch: int,
):
    """Seeded (record, noise_wave, snr, pair_seed) draws for one epoch."""
    lo, hi = snr_range
    if lo > hi:
        raise MixError(f"snr_range lower bound {lo} exceeds upper {hi}")
    for i, rec in enumerate(speech.records):
        rng = np.random.default_rng([seed, epoch, i])
        pick = int(rng.integers(0, len(noise_waves)))
        snr_db = float(rng.uniform(lo, hi))
        pair_seed = int(rng.integers(0, 2**31 - 1))
        yield rec, noise_waves[pick], snr_db, pair_seed


def simulate_dataset(
    speech: Manifest,
    subset: NoiseSubset,
    pool: list[NoiseRecord],
    snr_range: tuple[float, float],
    seed: int,
    out_dir: str | Path,
) -> PairedDataset:
    """Pre-simulate one pair per speech record and persist everything.

    Output layout: noisy/<id>.wav, clean/<id>.wav, mixspecs.jsonl.  The
    directory is built under a temporary name and renamed into place, so a
    crash never leaves a half-written dataset at the published path.
    """
    if speech.m == 0:
        raise MixError("empty speech manifest")
    out_dir = Path(out_dir)
    if out_dir.exists():
        raise MixError(f"output dir exists: {out_dir}")
    noise_waves = _load_noise_waves(subset, pool)

    tmp = out_dir.parent / f".{out_dir.name}.building"
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "noisy").mkdir(parents=True)
    (tmp / "clean").mkdir()
    pairs: list[tuple[str, str, MixSpec]] = []
    try:
        with (tmp / "mixspecs.jsonl").open("w", encoding="utf-8") as ledger:
            header = {
                "kind": "paired_dataset",
                "speech_manifest_id": speech.manifest_id,
                "noise_record_ids": list(subset.record_ids),
                "snr_range": list(snr_range),
                "seed": seed,
            }
            ledger.write(json.dumps(header, sort_keys=True) + "\n")
            draws = _pair_specs_for_epoch(speech, noise_waves, snr_range, seed, 0)
            for rec, (noise_id, noise_wave), snr_db, pair_seed in draws:
                clean = read_wav(rec.audio_uri)[0]
                noisy, clean_out, spec = mix_pair(
                    clean, noise_wave, snr_db, pair_seed,
                    speech_id=rec.id, noise_id=noise_id,
                )
                noisy_rel = f"noisy/{rec.id}.wav"
                clean_rel = f"clean/{rec.id}.wav"
                write_wav(tmp / noisy_rel, noisy, SAMPLE_RATE)
                write_wav(tmp / clean_rel, clean_out, SAMPLE_RATE)
                row = spec.to_json()
                row["noisy"] = noisy_rel
                row["clean"] = clean_rel
                ledger.write(json.dumps(row, sort_keys=True) + "\n")
                pairs.append((noisy_rel, clean_rel, spec))
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    tmp.rename(out_dir)
    return PairedDataset(
        pairs=pairs,
        speech_manifest_id=speech.manifest_id,
        noise_record_ids=list(subset.record_ids),
        snr_range=tuple(snr_range),
        seed=seed,
        root=str(out_dir),
    )


def load_paired_dataset(root: str | Path) -> PairedDataset:
    root = Path(root)
    ledger = root / "mixspecs.jsonl"
    lines = [ln for ln in ledger.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise MixError(f"{ledger}: empty ledger")
    header = json.loads(lines[0])
    if header.get("kind") != "paired_dataset":
        raise MixError(f"{ledger}: not a paired-dataset ledger")
    pairs = []
    for ln in lines[1:]:
        row = json.loads(ln)
        pairs.append((row["noisy"], row["clean"], MixSpec.from_json(row)))
    return PairedDataset(
        pairs=pairs,
        speech_manifest_id=header["speech_manifest_id"],
        noise_record_ids=header["noise_record_ids"],
        snr_range=tuple(header["snr_range"]),
        seed=header["seed"],
        root=str(root),
    )


def pair_stream(
    speech: Manifest,
    subset: NoiseSubset,
    pool: list[NoiseRecord],
    snr_range: tuple[float, float],
    seed: int,
    epoch: int,
):
    """Yield (noisy, clean, MixSpec) covering every speech record once.

    A pure function of (inputs, seed, epoch): replaying an epoch gives the
    identical sequence, successive epochs redraw noise clips, offsets and
    SNRs while keeping the clean record order fixed.
    """
    if speech.m == 0:
        raise MixError("empty speech manifest")
    noise_waves = _load_noise_waves(subset, pool)
    draws = _pair_specs_for_epoch(speech, noise_waves, snr_range, seed, epoch)
    for rec, (noise_id, noise_wave), snr_db, pair_seed in draws:
        clean = read_wav(rec.audio_uri)[0]
        yield mix_pair(
            clean, noise_wave, snr_db, pair_seed,
            speech_id=rec.id, noise_id=noise_id,
        )
