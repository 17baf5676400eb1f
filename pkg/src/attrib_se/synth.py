"""Zero-shot TTS interface, deterministic mock, and plan execution.

The framework never links a TTS model in-process.  A narrow adapter speaks
JSON to a subprocess or HTTP endpoint; a deterministic mock synthesizer
stands in at desk scale so counting and pipeline logic can be exercised
without any external model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import subprocess
import tempfile
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import SAMPLE_RATE
from .audioio import read_wav, write_wav
from .corpus import Manifest, UtteranceRecord, count_words
from .sampler import LANGUAGE_POOL, GenerationPlan, SynthesisRequest

log = logging.getLogger(__name__)

ENDPOINT_ENV_VAR = "ATTRIB_SE_TTS_ENDPOINT"

WORD_BASE_SEC = 0.30
CHAR_SEC = 0.02
GAP_SEC = 0.05
MOCK_PEAK = 0.5
N_HARMONICS = 4

# Spectral-tilt templates: template j rolls harmonics off at (3 + j) dB
# per harmonic step.  A request's language picks one of the ten.
TILT_TEMPLATES = tuple(
    tuple(10.0 ** (-(3.0 + j) * h / 20.0) for h in range(N_HARMONICS))
    for j in range(10)
)


class SynthesisError(RuntimeError):
    """Raised when a synthesis request cannot be fulfilled."""


def stable_hash(value: str) -> int:
    """Process-independent string hash (md5 low 8 bytes)."""
    digest = hashlib.md5(value.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class SynthCapabilities:
    languages: frozenset[str]
    max_text_len: int
    sample_rate: int


@dataclass
class SynthesisResult:
    index: int
    waveform: np.ndarray
    realized_duration: float
    synthesizer_id: str

    def __post_init__(self):
        if not np.all(np.isfinite(self.waveform)):
            raise SynthesisError(f"request {self.index}: non-finite samples")
        if self.waveform.size and float(np.max(np.abs(self.waveform))) > 1.0:
            raise SynthesisError(f"request {self.index}: peak amplitude > 1")
        expect = len(self.waveform) / SAMPLE_RATE
        if abs(self.realized_duration - expect) > 1e-9:
            raise SynthesisError(
                f"request {self.index}: duration {self.realized_duration} "
                f"!= samples/{SAMPLE_RATE} ({expect})"
            )


class Synthesizer:
    """Interface: a capability descriptor plus a synthesize method."""

    synthesizer_id: str = "base"

    @property
    def capabilities(self) -> SynthCapabilities:
        raise NotImplementedError

    def synthesize(
        self, request: SynthesisRequest, prompt_audio: np.ndarray
    ) -> SynthesisResult:
        raise NotImplementedError

    def _check_request(self, request: SynthesisRequest, prompt_audio: np.ndarray):
        caps = self.capabilities
        if request.language not in caps.languages:
            raise SynthesisError(
                f"request {request.index}: language {request.language!r} "
                f"not supported by {self.synthesizer_id}"
            )
        if not request.text.strip():
            raise SynthesisError(f"request {request.index}: empty text")
        if len(request.text) > caps.max_text_len:
            raise SynthesisError(
                f"request {request.index}: text length {len(request.text)} "
                f"exceeds limit {caps.max_text_len}"
            )
        rms = float(np.sqrt(np.mean(np.square(prompt_audio)))) if len(prompt_audio) else 0.0
        if rms <= 1e-5:
            raise SynthesisError(f"request {request.index}: silent prompt (rms={rms:.2e})")


def _mock_words(text: str) -> list[str]:
    # Same token filter as corpus word counting: punctuation-only tokens
    # contribute no burst.
    return [tok for tok in text.split() if any(ch.isalnum() for ch in tok)]


def salt_tilt_db(salt: str) -> tuple[float, ...]:
    """Per-harmonic rendering offsets (dB) for a named mock configuration.

    Two salts are two renderers of the *same* voices: speaker f0 is
    untouched, only the harmonic balance shifts by up to ±1.5 dB.  The
    empty salt is the neutral renderer (all zeros).
    """
    if not salt:
        return (0.0,) * N_HARMONICS
    rng = np.random.default_rng(stable_hash(f"tilt:{salt}") % 2**32)
    return tuple(float(x) for x in rng.uniform(-1.5, 1.5, N_HARMONICS))


def mock_synthesize(
    text: str,
    speaker_id: str,
    language: str,
    seed: int = 0,
    tilt_adjust_db: tuple[float, ...] | None = None,
) -> np.ndarray:
    """Pure deterministic stand-in waveform.

    f0 = 80 + (stable_hash(speaker_id) mod 160) Hz; each word is a burst of
    the first four harmonics under a raised-cosine envelope lasting
    0.30 s + 0.02 s per character, words separated by 50 ms of silence,
    peak normalized to 0.5.  The seed argument is accepted for interface
    parity and deliberately unused, as is any prompt audio: the mock keys
    its voice off speaker_id alone.  ``tilt_adjust_db`` (one value per
    harmonic) nudges the harmonic balance, modelling a second recording
    or rendering chain for the same voice.
    """
    words = _mock_words(text)
    if not words:
        raise SynthesisError("empty text")
    f0 = 80.0 + (stable_hash(speaker_id) % 160)
    if language in LANGUAGE_POOL:
        tilt = TILT_TEMPLATES[LANGUAGE_POOL.index(language)]
    else:
        tilt = TILT_TEMPLATES[stable_hash(language) % 10]
    if tilt_adjust_db is not None:
        if len(tilt_adjust_db) != N_HARMONICS:
            raise SynthesisError(
                f"tilt_adjust_db needs {N_HARMONICS} values, got {len(tilt_adjust_db)}"
            )
        tilt = tuple(
            a * 10.0 ** (db / 20.0) for a, db in zip(tilt, tilt_adjust_db)
        )

    gap = np.zeros(int(round(GAP_SEC * SAMPLE_RATE)))
    pieces = []
    for w, word in enumerate(words):
        n = int(round(WORD_BASE_SEC * SAMPLE_RATE)) + int(
            round(CHAR_SEC * SAMPLE_RATE)
        ) * len(word)
        t = np.arange(n) / SAMPLE_RATE
        envelope = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))
        burst = np.zeros(n)
        for h in range(N_HARMONICS):
            burst += tilt[h] * np.sin(2.0 * np.pi * f0 * (h + 1) * t)
        pieces.append(envelope * burst)
        if w < len(words) - 1:
            pieces.append(gap)
    wave = np.concatenate(pieces)
    peak = float(np.max(np.abs(wave)))
    if peak > 0:
        wave = wave * (MOCK_PEAK / peak)
    return wave


class MockSynthesizer(Synthesizer):
    """Deterministic synthesizer.

    ``voice_salt`` names a rendering configuration: speakers keep their
    f0 identity across salts, but the harmonic balance shifts slightly
    (see salt_tilt_db).  Two instances with different salts act as two
    recording chains over the same voices — e.g. 'real recordings' vs
    'a TTS clone of those voices' in comparison experiments.
    """

    def __init__(self, voice_salt: str = ""):
        self.voice_salt = voice_salt
        self.tilt_adjust_db = salt_tilt_db(voice_salt)
        self.synthesizer_id = f"mock:{voice_salt}" if voice_salt else "mock"

    @property
    def capabilities(self) -> SynthCapabilities:
        return SynthCapabilities(
            languages=frozenset(LANGUAGE_POOL),
            max_text_len=2000,
            sample_rate=SAMPLE_RATE,
        )

    def synthesize(self, request, prompt_audio):
        self._check_request(request, prompt_audio)
        wave = mock_synthesize(
            request.text,
            request.target_speaker_id,
            request.language,
            tilt_adjust_db=self.tilt_adjust_db,
        )
        return SynthesisResult(
            index=request.index,
            waveform=wave,
            realized_duration=len(wave) / SAMPLE_RATE,
            synthesizer_id=self.synthesizer_id,
        )


class ExternalSynthesizer(Synthesizer):
    """Adapter for an out-of-process TTS model.

    Each request is one JSON object {text, language, prompt_wav_path,
    out_wav_path}.  If the endpoint (argument or ATTRIB_SE_TTS_ENDPOINT)
    looks like a URL it is POSTed to; otherwise it is run as a command
    reading the object from stdin and writing {status, duration} to stdout.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        languages=LANGUAGE_POOL,
        max_text_len: int = 2000,
        timeout: float = 300.0,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV_VAR, "")
        if not self.endpoint:
            raise SynthesisError(
                f"no synthesizer endpoint: pass one or set {ENDPOINT_ENV_VAR}"
            )
        self._languages = frozenset(languages)
        self._max_text_len = max_text_len
        self.timeout = timeout
        self.synthesizer_id = f"external:{self.endpoint}"

    @property
    def capabilities(self) -> SynthCapabilities:
        return SynthCapabilities(
            languages=self._languages,
            max_text_len=self._max_text_len,
            sample_rate=SAMPLE_RATE,
        )

    def _call(self, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        if self.endpoint.startswith(("http://", "https://")):
            req = urllib.request.Request(
                self.endpoint, data=body,
                headers={"Content-Type": "application/json"},
            )
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        proc = subprocess.run(
            self.endpoint.split(), input=body, capture_output=True,
            timeout=self.timeout,
        )
        if proc.returncode != 0:
            raise SynthesisError(
                f"adapter exited {proc.returncode}: {proc.stderr.decode()[:500]}"
            )
        return json.loads(proc.stdout.decode("utf-8"))

    def synthesize(self, request, prompt_audio):
        self._check_request(request, prompt_audio)
        with tempfile.TemporaryDirectory(prefix="attrib_se_tts_") as tmp:
            prompt_path = Path(tmp) / "prompt.wav"
            out_path = Path(tmp) / "out.wav"
            write_wav(prompt_path, prompt_audio, SAMPLE_RATE)
            reply = self._call(
                {
                    "text": request.text,
                    "language": request.language,
                    "prompt_wav_path": str(prompt_path),
                    "out_wav_path": str(out_path),
                }
            )
            if reply.get("status") != "ok":
                raise SynthesisError(
                    f"request {request.index}: adapter status {reply.get('status')!r}"
                )
            wave, rate = read_wav(out_path)
            if rate != SAMPLE_RATE:
                raise SynthesisError(
                    f"request {request.index}: adapter returned {rate} Hz audio"
                )
        return SynthesisResult(
            index=request.index,
            waveform=wave,
            realized_duration=len(wave) / SAMPLE_RATE,
            synthesizer_id=self.synthesizer_id,
        )


def execute_plan(
    plan: GenerationPlan,
    source: Manifest,
    out_dir: str | Path,
    synthesizer: Synthesizer,
    workers: int = 1,
    skip_failures: bool = False,
) -> Manifest:
    """Run every request, write PCM16 mono WAVs, return the synthetic manifest.

    Requests may run concurrently; results are keyed by request index so
    completion order never changes the output.  A failure aborts the plan
    naming the failing index unless skip_failures is set, in which case the
    failed request is dropped and reported in the log.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {rec.id: rec for rec in source.records}

    prompt_cache: dict[str, np.ndarray] = {}

    def load_prompt(utt_id: str) -> np.ndarray:
        if utt_id not in prompt_cache:
            rec = by_id.get(utt_id)
            if rec is None:
                raise SynthesisError(f"prompt utterance {utt_id!r} not in source")
            prompt_cache[utt_id] = read_wav(rec.audio_uri)[0]
        return prompt_cache[utt_id]

    # Resolve prompts up front (serially) so worker threads only synthesize.
    for req in plan.requests:
        load_prompt(req.prompt_utterance_id)

    def run_one(req: SynthesisRequest) -> SynthesisResult:
        return synthesizer.synthesize(req, prompt_cache[req.prompt_utterance_id])

    results: dict[int, SynthesisResult] = {}
    failures: dict[int, Exception] = {}
    if workers <= 1:
        for req in plan.requests:
            try:
                results[req.index] = run_one(req)
            except Exception as exc:  # noqa: BLE001 - reported or re-raised below
                failures[req.index] = exc
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {req.index: pool.submit(run_one, req) for req in plan.requests}
            for index, fut in futures.items():
                try:
                    results[index] = fut.result()
                except Exception as exc:  # noqa: BLE001
                    failures[index] = exc

    if failures and not skip_failures:
        index = min(failures)
        raise SynthesisError(
            f"synthesis failed at request {index}: {failures[index]}"
        ) from failures[index]
    for index in sorted(failures):
        log.warning("skipping failed request %d: %s", index, failures[index])

    records = []
    digits = max(5, len(str(plan.m)))
    for req in plan.requests:
        if req.index not in results:
            continue
        res = results[req.index]
        utt_id = f"syn-{req.index:0{digits}d}"
        wav_path = out_dir / f"{utt_id}.wav"
        write_wav(wav_path, res.waveform, SAMPLE_RATE)
        records.append(
            UtteranceRecord(
                id=utt_id,
                speaker_id=req.target_speaker_id,
                language=req.language,
                text=req.text,
                word_count=count_words(req.text),
                audio_uri=str(wav_path),
                sample_rate=SAMPLE_RATE,
                duration=res.realized_duration,
                provenance="synthetic",
                prompt_utterance_id=req.prompt_utterance_id,
            )
        )
    return Manifest(records, attribute_tag=plan.attribute_tag)
