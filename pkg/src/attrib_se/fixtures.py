"""Deterministic desk-scale fixture corpora.

Builds a small "recorded" speech corpus (mock-synthesized voices), foreign
text banks, and a four-type noise corpus, so the entire pipeline can run
and be tested without any external data.  Everything is a pure function of
its seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import SAMPLE_RATE
from .audioio import write_wav
from .corpus import (
    Manifest,
    NoiseRecord,
    UtteranceRecord,
    count_words,
    save_manifest,
    save_noise_records,
)
from .synth import mock_synthesize, salt_tilt_db

_EN_WORDS = (
    "river stone morning light garden bridge window autumn meadow candle "
    "harbor winter signal mountain valley copper lantern thunder orchard "
    "willow summer quiet market corner silver evening shadow branch"
).split()

_FOREIGN_WORDS = {
    "zh": "shan shui feng yue chun qiu ming liang hua shu lin yun tian hai lu qing".split(),
    "cs": "reka kamen rano svetlo zahrada most okno podzim louka svicka pristav zima".split(),
    "de": "fluss stein morgen licht garten brucke fenster herbst wiese kerze hafen winter".split(),
    "es": "rio piedra manana luz jardin puente ventana otono prado vela puerto invierno".split(),
    "fr": "riviere pierre matin lumiere jardin pont fenetre automne prairie bougie port hiver".split(),
    "it": "fiume pietra mattina luce giardino ponte finestra autunno prato candela porto inverno".split(),
    "pl": "rzeka kamien rano swiatlo ogrod most okno jesien laka swieca port zima".split(),
    "ru": "reka kamen utro svet sad most okno osen lug svecha gavan zima".split(),
    "ja": "kawa ishi asa hikari niwa hashi mado aki nohara rousoku minato fuyu".split(),
}


def _sentence_of(rng: np.random.Generator, words: list[str], length: int) -> str:
    return " ".join(words[int(i)] for i in rng.integers(0, len(words), size=length))


def _sentence(rng: np.random.Generator, words: list[str]) -> str:
    return _sentence_of(rng, words, int(rng.integers(4, 13)))


def fixture_texts(n: int = 100, seed: int = 7, mean_words: int = 8) -> list[str]:
    """n distinct English pseudo-sentences, word counts varied in [4, 12]
    but summing to exactly mean_words * n.

    The exact total keeps the corpus's per-utterance word budget integral,
    so single-text variants can match the corpus word count within
    tolerance.
    """
    rng = np.random.default_rng(seed)
    lengths = rng.integers(4, 13, size=n)
    diff = mean_words * n - int(lengths.sum())
    i = 0
    while diff != 0:
        step = 1 if diff > 0 else -1
        if 4 <= lengths[i % n] + step <= 12:
            lengths[i % n] += step
            diff -= step
        i += 1
    texts: list[str] = []
    seen = set()
    for length in lengths:
        t = _sentence_of(rng, _EN_WORDS, int(length))
        while t in seen:
            t = _sentence_of(rng, _EN_WORDS, int(length))
        seen.add(t)
        texts.append(t)
    return texts


def foreign_text_banks(per_lang: int = 20, seed: int = 11) -> dict[str, list[str]]:
    banks = {}
    for i, (lang, words) in enumerate(sorted(_FOREIGN_WORDS.items())):
        rng = np.random.default_rng([seed, i])
        bank: list[str] = []
        seen = set()
        while len(bank) < per_lang:
            t = _sentence(rng, words)
            if t not in seen:
                seen.add(t)
                bank.append(t)
        banks[lang] = bank
    return banks


def build_speech_fixture(
    root: str | Path,
    m: int = 100,
    n_speakers: int = 10,
    seed: int = 7,
    voice_salt: str = "studio",
    text_offset: int = 0,
) -> Manifest:
    """m utterances over n_speakers (m/n each), all texts distinct.

    The voice salt names the rendering configuration (same voices, slightly
    different harmonic balance), letting two fixture corpora play "real
    recordings" vs "a different synthesizer" in comparison experiments.
    ``text_offset`` skips ahead in the text sequence so a held-out
    evaluation corpus shares no texts with this one.
    """
    if m % n_speakers != 0:
        raise ValueError(f"m={m} must divide evenly over {n_speakers} speakers")
    root = Path(root)
    tilt = salt_tilt_db(voice_salt)
    texts = fixture_texts(m + text_offset, seed=seed)[text_offset:]
    per = m // n_speakers
    records = []
    for i, text in enumerate(texts):
        spk = f"spk{i // per:02d}"
        wave = mock_synthesize(text, spk, "en", tilt_adjust_db=tilt)
        utt_id = f"{spk}-{i:03d}"
        wav_path = root / spk / f"{utt_id}.wav"
        write_wav(wav_path, wave, SAMPLE_RATE)
        records.append(
            UtteranceRecord(
                id=utt_id,
                speaker_id=spk,
                language="en",
                text=text,
                word_count=count_words(text),
                audio_uri=str(wav_path),
                sample_rate=SAMPLE_RATE,
                duration=len(wave) / SAMPLE_RATE,
            )
        )
    manifest = Manifest(records)
    save_manifest(manifest, root / "manifest.jsonl")
    return manifest


def _noise_wave(kind: str, duration: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    if kind == "white":
        wave = rng.normal(0.0, 1.0, n)
    elif kind == "babble":
        # A handful of wandering voiced tones approximates crowd murmur.
        wave = np.zeros(n)
        for _ in range(8):
            f0 = rng.uniform(90.0, 280.0)
            drift = np.cumsum(rng.normal(0.0, 0.5, n)) / SAMPLE_RATE
            env = 0.5 + 0.5 * np.sin(
                2 * np.pi * rng.uniform(0.2, 1.5) * t + rng.uniform(0, 2 * np.pi)
            )
            wave += env * np.sin(2 * np.pi * (f0 * t + drift))
        wave += 0.2 * rng.normal(0.0, 1.0, n)
    elif kind == "traffic":
        # Low-passed noise with slow loudness swells.
        brown = np.cumsum(rng.normal(0.0, 1.0, n))
        brown -= brown.mean()
        swell = 0.6 + 0.4 * np.sin(2 * np.pi * 0.15 * t + rng.uniform(0, 2 * np.pi))
        wave = brown * swell
    elif kind == "hum":
        wave = sum(
            a * np.sin(2 * np.pi * 50.0 * (h + 1) * t)
            for h, a in enumerate((1.0, 0.4, 0.15, 0.05))
        )
        wave = wave + 0.05 * rng.normal(0.0, 1.0, n)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return 0.3 * wave / np.max(np.abs(wave))


NOISE_TYPES = ("white", "babble", "traffic", "hum")
_CLIP_SECONDS = (4.0, 7.0, 11.0)


def build_noise_fixture(root: str | Path, seed: int = 13) -> list[NoiseRecord]:
    """Four noise types, three clips each (4/7/11 s): 88 s in total."""
    root = Path(root)
    records = []
    for ti, kind in enumerate(NOISE_TYPES):
        for ci, dur in enumerate(_CLIP_SECONDS):
            rng = np.random.default_rng([seed, ti, ci])
            wave = _noise_wave(kind, dur, rng)
            rel = f"{kind}/{kind}{ci:02d}"
            wav_path = root / f"{rel}.wav"
            write_wav(wav_path, wave, SAMPLE_RATE)
            records.append(
                NoiseRecord(
                    id=rel,
                    type_label=kind,
                    duration=len(wave) / SAMPLE_RATE,
                    audio_uri=str(wav_path),
                )
            )
    save_noise_records(records, root / "records.jsonl")
    return records
