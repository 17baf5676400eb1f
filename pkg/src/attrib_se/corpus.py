"""Speech and noise corpus ingestion, manifests, and corpus statistics.

A manifest is the unit of dataset identity: a validated, canonically
ordered (by record id) list of utterance records plus cached statistics.
Manifests round-trip through a JSON Lines format with one record per line.
"""

from __future__ import annotations

import hashlib
import json
import string
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

from .audioio import AudioFormatError, probe_wav

SAMPLE_RATE = 16000

_PUNCT = set(string.punctuation)


class CorpusError(ValueError):
    """Raised for invalid corpora, records, or manifest files."""


def count_words(text: str) -> int:
    """Number of whitespace-delimited tokens, ignoring punctuation-only tokens."""
    return sum(1 for tok in text.split() if not all(c in _PUNCT for c in tok))


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    speaker_id: str
    language: str
    text: str
    word_count: int
    audio_uri: str
    sample_rate: int
    duration: float
    provenance: str = "real"  # "real" | "synthetic"
    prompt_utterance_id: str | None = None

    def __post_init__(self):
        if self.word_count != count_words(self.text):
            raise CorpusError(
                f"record {self.id}: word_count {self.word_count} does not match "
                f"text ({count_words(self.text)} tokens)"
            )
        if self.duration <= 0:
            raise CorpusError(f"record {self.id}: duration must be > 0")
        if self.provenance not in ("real", "synthetic"):
            raise CorpusError(f"record {self.id}: bad provenance {self.provenance!r}")
        if self.provenance == "synthetic" and not self.prompt_utterance_id:
            raise CorpusError(
                f"record {self.id}: synthetic record needs a prompt_utterance_id"
            )


@dataclass(frozen=True)
class ManifestStats:
    m: int
    total_words: int
    unique_texts: int
    unique_speakers: int
    languages: frozenset[str]
    total_duration: float


@dataclass
class Manifest:
    records: list[UtteranceRecord]
    attribute_tag: str = ""
    stats: ManifestStats = field(init=False)

    def __post_init__(self):
        if not self.records:
            raise CorpusError("manifest must contain at least one record")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CorpusError(f"duplicate record ids: {dupes[:5]}")
        rates = {r.sample_rate for r in self.records}
        if len(rates) != 1:
            raise CorpusError(f"records mix sample rates: {sorted(rates)}")
        self.records = sorted(self.records, key=lambda r: r.id)
        self.stats = manifest_stats(self)

    @property
    def m(self) -> int:
        return len(self.records)

    @property
    def manifest_id(self) -> str:
        """Content hash over canonical record serialization."""
        h = hashlib.sha256()
        for rec in self.records:
            h.update(json.dumps(_record_to_json(rec), sort_keys=True).encode())
        return h.hexdigest()[:16]

    def record_by_id(self, rec_id: str) -> UtteranceRecord:
        for rec in self.records:
            if rec.id == rec_id:
                return rec
        raise KeyError(rec_id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Manifest):
            return NotImplemented
        return (
            self.records == other.records and self.attribute_tag == other.attribute_tag
        )


@dataclass(frozen=True)
class NoiseRecord:
    id: str
    type_label: str
    duration: float
    audio_uri: str

    def __post_init__(self):
        if self.duration <= 0:
            raise CorpusError(f"noise record {self.id}: duration must be > 0")
        if not self.type_label:
            raise CorpusError(f"noise record {self.id}: empty type_label")


def manifest_stats(manifest: Manifest) -> ManifestStats:
    """Recompute statistics from the records. Permutation-invariant."""
    recs = manifest.records
    return ManifestStats(
        m=len(recs),
        total_words=sum(r.word_count for r in recs),
        unique_texts=len({r.text for r in recs}),
        unique_speakers=len({r.speaker_id for r in recs}),
        languages=frozenset(r.language for r in recs),
        total_duration=float(sum(r.duration for r in recs)),
    )


def _speaker_id_for(path: Path, root: Path) -> str:
    rel = path.relative_to(root)
    if len(rel.parts) > 1:
        return rel.parts[0]
    stem = path.stem
    return stem.split("-")[0] if "-" in stem else stem


def ingest_speech_corpus(
    root: str | Path,
    transcript_source: Mapping[str, str] | Callable[[Path], str],
    language: str = "en",
    sample_rate: int = SAMPLE_RATE,
) -> Manifest:
    """Scan a directory tree of WAV files into a validated Manifest.

    Record ids are file stems; speaker ids come from the first path component
    under ``root`` (nested layout) or the stem prefix before the first ``-``
    (flat layout). ``transcript_source`` maps record id -> text, or is a
    callable from the audio path to its text. Files at other sample rates are
    rejected rather than resampled.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"speech corpus root not found: {root}")
    wavs = sorted(root.rglob("*.wav"))
    if not wavs:
        raise CorpusError(f"empty speech corpus: no .wav files under {root}")

    records = []
    for path in wavs:
        rec_id = path.stem
        if callable(transcript_source):
            try:
                text = transcript_source(path)
            except KeyError as exc:
                raise CorpusError(f"missing transcript for {path}") from exc
        else:
            if rec_id not in transcript_source:
                raise CorpusError(f"missing transcript for {path}")
            text = transcript_source[rec_id]
        n_samples, rate = probe_wav(path)
        if rate != sample_rate:
            raise CorpusError(
                f"{path}: sample rate {rate} != required {sample_rate} "
                "(resampling is out of scope)"
            )
        if n_samples == 0:
            raise AudioFormatError(f"{path}: zero-length audio")
        records.append(
            UtteranceRecord(
                id=rec_id,
                speaker_id=_speaker_id_for(path, root),
                language=language,
                text=text,
                word_count=count_words(text),
                audio_uri=str(path),
                sample_rate=rate,
                duration=n_samples / rate,
            )
        )
    return Manifest(records=records)


def default_type_labeler(path: Path, root: Path) -> str:
    """Noise type = first-level subdirectory name; root name for flat trees."""
    rel = path.relative_to(root)
    return rel.parts[0] if len(rel.parts) > 1 else root.name


def ingest_noise_corpus(
    root: str | Path,
    type_labeler: Callable[[Path, Path], str] = default_type_labeler,
) -> list[NoiseRecord]:
    """Scan a directory tree of noise WAV files into NoiseRecords.

    Record ids are paths relative to ``root`` without extension, so the same
    file name may appear under several type subdirectories.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"noise corpus root not found: {root}")
    wavs = sorted(root.rglob("*.wav"))
    if not wavs:
        raise CorpusError(f"empty noise corpus: no .wav files under {root}")

    records = []
    seen: set[str] = set()
    for path in wavs:
        rec_id = str(path.relative_to(root).with_suffix(""))
        if rec_id in seen:
            raise CorpusError(f"duplicate noise record id: {rec_id}")
        seen.add(rec_id)
        n_samples, rate = probe_wav(path)
        records.append(
            NoiseRecord(
                id=rec_id,
                type_label=type_labeler(path, root),
                duration=n_samples / rate,
                audio_uri=str(path),
            )
        )
    return records


# --- JSON Lines serialization ------------------------------------------------

def _record_to_json(rec: UtteranceRecord) -> dict:
    obj = {
        "id": rec.id,
        "speaker_id": rec.speaker_id,
        "language": rec.language,
        "text": rec.text,
        "word_count": rec.word_count,
        "audio_uri": rec.audio_uri,
        "sample_rate": rec.sample_rate,
        "duration": rec.duration,
        "provenance": rec.provenance,
    }
    if rec.provenance == "synthetic":
        obj["prompt_utterance_id"] = rec.prompt_utterance_id
    return obj


def _record_from_json(obj: dict) -> UtteranceRecord:
    return UtteranceRecord(
        id=obj["id"],
        speaker_id=obj["speaker_id"],
        language=obj["language"],
        text=obj["text"],
        word_count=obj["word_count"],
        audio_uri=obj["audio_uri"],
        sample_rate=obj["sample_rate"],
        duration=obj["duration"],
        provenance=obj["provenance"],
        prompt_utterance_id=obj.get("prompt_utterance_id"),
    )


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write one JSON record per line. The attribute tag travels out of band."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(_record_to_json(rec), sort_keys=True) + "\n")


def load_manifest(path: str | Path, attribute_tag: str = "") -> Manifest:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(_record_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad manifest line: {exc}") from exc
    if not records:
        raise CorpusError(f"{path}: empty manifest file")
    return Manifest(records=records, attribute_tag=attribute_tag)


def save_noise_records(records: list[NoiseRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "type_label": rec.type_label,
                        "duration": rec.duration,
                        "audio_uri": rec.audio_uri,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_noise_records(path: str | Path) -> list[NoiseRecord]:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(
                    NoiseRecord(
                        id=obj["id"],
                        type_label=obj["type_label"],
                        duration=obj["duration"],
                        audio_uri=obj["audio_uri"],
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad noise line: {exc}") from exc
    return records


def as_synthetic(
    rec: UtteranceRecord, prompt_utterance_id: str, **overrides
) -> UtteranceRecord:
    """Copy of a record marked synthetic with the given prompt lineage."""
    return replace(
        rec,
        provenance="synthetic",
        prompt_utterance_id=prompt_utterance_id,
        **overrides,
    )
