"""Attribute-controlled generation plans and noise subsets.

Builders produce plans that vary exactly one dataset attribute while
holding the others fixed: full-synthetic mirrors of a source corpus,
reduced unique-text counts, multilingual compositions, reduced speaker
counts, and noise subsets constrained by total duration and type count.
Each builder is a deterministic function of (source, parameters, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Manifest, NoiseRecord, count_words

# First p entries of this pool define the p-language composition.
LANGUAGE_POOL = ("en", "zh", "cs", "de", "es", "fr", "it", "pl", "ru", "ja")

#: Relative word-budget mismatch above which plan construction fails.
DEFAULT_BUDGET_TOLERANCE = 0.01


class PlanningError(ValueError):
    """Raised when a generation plan cannot satisfy its constraints."""


@dataclass(frozen=True)
class SynthesisRequest:
    index: int
    text: str
    language: str
    prompt_utterance_id: str
    target_speaker_id: str

    def __post_init__(self):
        if not self.text.strip():
            raise PlanningError(f"request {self.index}: empty text")


@dataclass
class GenerationPlan:
    requests: list[SynthesisRequest]
    source_manifest_id: str
    attribute_tag: str
    w_target: int
    delta_w: int
    seed: int

    def __post_init__(self):
        realized = sum(count_words(r.text) for r in self.requests)
        if realized - self.w_target != self.delta_w:
            raise PlanningError(
                f"plan {self.attribute_tag}: recorded delta_w {self.delta_w} "
                f"inconsistent with requests ({realized - self.w_target})"
            )

    @property
    def m(self) -> int:
        return len(self.requests)


@dataclass
class NoiseSubset:
    record_ids: list[str]
    total_duration: float
    type_labels: frozenset[str]
    target_t: float
    target_k: int | str  # count or "all"
    seed: int

    def __post_init__(self):
        if self.target_k != "all" and len(self.type_labels) != self.target_k:
            raise PlanningError(
                f"noise subset has {len(self.type_labels)} types, "
                f"target_k={self.target_k}"
            )

    def records(self, pool: list[NoiseRecord]) -> list[NoiseRecord]:
        by_id = {r.id: r for r in pool}
        return [by_id[i] for i in self.record_ids]


def _validate_source_prompts(source: Manifest) -> None:
    if source.m == 0:
        raise PlanningError("empty source manifest")


def _speaker_utterances(source: Manifest) -> dict[str, list[str]]:
    """Speaker -> sorted utterance ids (records are already id-sorted)."""
    out: dict[str, list[str]] = {}
    for rec in source.records:
        out.setdefault(rec.speaker_id, []).append(rec.id)
    return out


def build_full_synthetic_plan(source: Manifest, seed: int = 0) -> GenerationPlan:
    """Mirror the source exactly: same texts, languages and speakers,
    each record prompting its own synthetic twin."""
    _validate_source_prompts(source)
    requests = [
        SynthesisRequest(
            index=i,
            text=rec.text,
            language=rec.language,
            prompt_utterance_id=rec.id,
            target_speaker_id=rec.speaker_id,
        )
        for i, rec in enumerate(source.records)
    ]
    return GenerationPlan(
        requests=requests,
        source_manifest_id=source.manifest_id,
        attribute_tag="full-synthetic",
        w_target=source.stats.total_words,
        delta_w=0,
        seed=seed,
    )


# --- word-budget matching ----------------------------------------------------

def _swap_search(
    word_counts: np.ndarray, reps: np.ndarray, budget: int, min_rep: int
) -> np.ndarray:
    """Steepest-descent local search over single-repetition moves.

    Moves one repetition from text i (reps[i] > min_rep) to text j until no
    move reduces |sum(reps * word_counts) - budget|. Deterministic: ties break
    toward the smallest (i, j).
    """
    reps = reps.copy()
    total = int(reps @ word_counts)
    n = len(word_counts)
    for _ in range(10 * int(reps.sum()) + 10):
        delta = total - budget
        best = (abs(delta), -1, -1)
        for i in range(n):
            if reps[i] <= min_rep:
                continue
            for j in range(n):
                if j == i:
                    continue
                cand = abs(delta - int(word_counts[i]) + int(word_counts[j]))
                if cand < best[0]:
                    best = (cand, i, j)
        if best[1] < 0:
            break
        _, i, j = best
        reps[i] -= 1
        reps[j] += 1
        total += int(word_counts[j]) - int(word_counts[i])
    return reps


def uniform_repetitions(n_texts: int, m: int, extra_order: np.ndarray) -> np.ndarray:
    """Base counts floor(m/n) with the remainder distributed round-robin
    in the given order."""
    reps = np.full(n_texts, m // n_texts, dtype=np.int64)
    for k in range(m % n_texts):
        reps[extra_order[k % n_texts]] += 1
    return reps


def build_text_variant(
    source: Manifest,
    n: int,
    seed: int = 0,
    tolerance: float = DEFAULT_BUDGET_TOLERANCE,
) -> GenerationPlan:
    """Plan with exactly n distinct texts reused to fill m requests, total
    word count held as close as possible to the source's."""
    _validate_source_prompts(source)
    m = source.m
    w_target = source.stats.total_words

    # Unique texts with deterministic representatives (smallest record id).
    rep_id: dict[str, str] = {}
    for rec in source.records:
        rep_id.setdefault(rec.text, rec.id)
    unique_texts = sorted(rep_id, key=lambda t: rep_id[t])
    if not 1 <= n <= len(unique_texts):
        raise PlanningError(
            f"n={n} outside [1, {len(unique_texts)}] unique texts in source"
        )

    rng = np.random.default_rng(seed)
    if n == 1:
        # Forced choice: word count nearest the per-utterance budget,
        # ties toward the lexicographically smallest representative id.
        per_utt = w_target / m
        chosen = [
            min(unique_texts, key=lambda t: (abs(count_words(t) - per_utt), rep_id[t]))
        ]
    else:
        idx = rng.choice(len(unique_texts), size=n, replace=False)
        chosen = [unique_texts[i] for i in idx]

    word_counts = np.array([count_words(t) for t in chosen], dtype=np.int64)
    reps = uniform_repetitions(n, m, np.arange(n))
    reps = _swap_search(word_counts, reps, w_target, min_rep=1)
    delta_w = int(reps @ word_counts) - w_target
    if abs(delta_w) / w_target > tolerance:
        raise PlanningError(
            f"text variant n={n}: |delta_w|={abs(delta_w)} exceeds "
            f"{tolerance:.1%} of W={w_target}; try a different seed or n"
        )

    texts: list[str] = []
    for text, count in zip(chosen, reps):
        texts.extend([text] * int(count))
    requests = [
        SynthesisRequest(
            index=i,
            text=texts[i],
            language=rec.language,
            prompt_utterance_id=rec.id,
            target_speaker_id=rec.speaker_id,
        )
        for i, rec in enumerate(source.records)
    ]
    return GenerationPlan(
        requests=requests,
        source_manifest_id=source.manifest_id,
        attribute_tag=f"text:n={n}",
        w_target=w_target,
        delta_w=delta_w,
        seed=seed,
    )


def select_texts_for_budget(
    bank: list[str], count: int, budget: float, rng: np.random.Generator
) -> list[str]:
    """Pick ``count`` texts from a bank (repeats allowed) whose total word
    count approaches ``budget``, by seeded start plus swap search."""
    if not bank:
        raise PlanningError("empty text bank")
    bank = sorted(bank)
    word_counts = np.array([count_words(t) for t in bank], dtype=np.int64)
    n_bank = len(bank)
    reps = np.zeros(n_bank, dtype=np.int64)
    if count <= n_bank:
        for i in rng.choice(n_bank, size=count, replace=False):
            reps[i] = 1
    else:
        reps = uniform_repetitions(n_bank, count, rng.permutation(n_bank))
    reps = _swap_search(word_counts, reps, int(round(budget)), min_rep=0)
    out: list[str] = []
    for text, c in zip(bank, reps):
        out.extend([text] * int(c))
    return out


def build_language_variant(
    source: Manifest,
    p: int,
    foreign_texts: dict[str, list[str]],
    pool: tuple[str, ...] = LANGUAGE_POOL,
    seed: int = 0,
) -> GenerationPlan:
    """Multilingual composition: m*(11-p)/10 requests in the pool's first
    language (English) and m/10 in each of the p-1 added languages."""
    _validate_source_prompts(source)
    m = source.m
    if m % 10 != 0:
        raise PlanningError(f"m={m} must be divisible by 10 for language variants")
    if not 1 <= p <= 10:
        raise PlanningError(f"p={p} outside [1, 10]")
    if pool[0] != "en":
        raise PlanningError("language pool must start with English")
    languages = list(pool[:p])
    for lang in languages[1:]:
        if not foreign_texts.get(lang):
            raise PlanningError(f"empty text bank for language {lang!r}")

    w_total = source.stats.total_words
    counts = {languages[0]: m * (11 - p) // 10}
    counts.update({lang: m // 10 for lang in languages[1:]})

    rng = np.random.default_rng(seed)
    english_bank = sorted({rec.text for rec in source.records})
    texts_by_lang: dict[str, list[str]] = {}
    for lang in languages:
        bank = english_bank if lang == languages[0] else foreign_texts[lang]
        budget = w_total * counts[lang] / m
        texts_by_lang[lang] = select_texts_for_budget(bank, counts[lang], budget, rng)

    speakers = sorted({rec.speaker_id for rec in source.records})
    speaker_order = [speakers[i] for i in rng.permutation(len(speakers))]
    utts = _speaker_utterances(source)
    prompt_cursor = {spk: 0 for spk in speakers}

    requests = []
    i = 0
    for lang in languages:
        for text in texts_by_lang[lang]:
            spk = speaker_order[i % len(speaker_order)]
            prompt = utts[spk][prompt_cursor[spk] % len(utts[spk])]
            prompt_cursor[spk] += 1
            requests.append(
                SynthesisRequest(
                    index=i,
                    text=text,
                    language=lang,
                    prompt_utterance_id=prompt,
                    target_speaker_id=spk,
                )
            )
            i += 1

    delta_w = sum(count_words(r.text) for r in requests) - w_total
    return GenerationPlan(
        requests=requests,
        source_manifest_id=source.manifest_id,
        attribute_tag=f"language:p={p}",
        w_target=w_total,
        delta_w=delta_w,
        seed=seed,
    )


def build_speaker_variant(
    source: Manifest,
    s: int,
    mode: str = "single",
    seed: int = 0,
) -> GenerationPlan:
    """Plan keeping all m source texts but restricting to s target speakers.

    ``single`` mode reuses one prompt utterance per speaker; ``multi`` mode
    gives each request its own prompt utterance, every prompt used once.
    """
    _validate_source_prompts(source)
    if mode not in ("single", "multi"):
        raise PlanningError(f"unknown prompt mode {mode!r}")
    m = source.m
    utts = _speaker_utterances(source)
    speakers = sorted(utts)
    if not 1 <= s <= len(speakers):
        raise PlanningError(f"s={s} outside [1, {len(speakers)}] available speakers")

    rng = np.random.default_rng(seed)
    chosen = [speakers[i] for i in rng.choice(len(speakers), size=s, replace=False)]

    # Round-robin assignment: earliest-chosen speakers absorb the remainder.
    assignment = [chosen[i % s] for i in range(m)]
    quota = {spk: assignment.count(spk) for spk in chosen}

    prompts_for: dict[str, list[str]] = {}
    if mode == "single":
        for spk in chosen:
            pick = utts[spk][int(rng.integers(len(utts[spk])))]
            prompts_for[spk] = [pick] * quota[spk]
    else:
        deficient = [spk for spk in chosen if len(utts[spk]) < quota[spk]]
        if deficient:
            raise PlanningError(
                "multi-prompt infeasible; speakers with fewer utterances than "
                f"their quota: {sorted(deficient)}"
            )
        for spk in chosen:
            perm = rng.permutation(len(utts[spk]))
            prompts_for[spk] = [utts[spk][j] for j in perm[: quota[spk]]]

    cursor = {spk: 0 for spk in chosen}
    requests = []
    for i, rec in enumerate(source.records):
        spk = assignment[i]
        prompt = prompts_for[spk][cursor[spk]]
        cursor[spk] += 1
        requests.append(
            SynthesisRequest(
                index=i,
                text=rec.text,
                language=rec.language,
                prompt_utterance_id=prompt,
                target_speaker_id=spk,
            )
        )
    return GenerationPlan(
        requests=requests,
        source_manifest_id=source.manifest_id,
        attribute_tag=f"speaker:s={s}:{mode}",
        w_target=source.stats.total_words,
        delta_w=0,
        seed=seed,
    )


# --- noise subsets -----------------------------------------------------------

def sample_noise_duration(
    noise_records: list[NoiseRecord], t: float, seed: int = 0
) -> NoiseSubset:
    """Greedy subset in seed-shuffled order until total duration reaches t.

    The final clip is kept whole, so the subset overshoots t by less than
    one clip duration; truncation happens at mix time.
    """
    total_available = sum(r.duration for r in noise_records)
    if t <= 0:
        raise PlanningError(f"target duration t={t} must be > 0")
    if t > total_available + 1e-9:
        raise PlanningError(
            f"target duration {t:.1f}s exceeds corpus total {total_available:.1f}s"
        )
    ordered = sorted(noise_records, key=lambda r: r.id)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    picked: list[NoiseRecord] = []
    total = 0.0
    for idx in perm:
        if total >= t - 1e-9:
            break
        picked.append(ordered[idx])
        total += ordered[idx].duration
    return NoiseSubset(
        record_ids=[r.id for r in picked],
        total_duration=total,
        type_labels=frozenset(r.type_label for r in picked),
        target_t=t,
        target_k="all",
        seed=seed,
    )


def sample_noise_typed(
    noise_records: list[NoiseRecord], t: float, k: int, seed: int = 0
) -> NoiseSubset:
    """k noise types chosen uniformly at random, each filled to t/k duration
    by the same greedy rule."""
    labels = sorted({r.type_label for r in noise_records})
    if not 1 <= k <= len(labels):
        raise PlanningError(f"k={k} outside [1, {len(labels)}] available types")
    if t <= 0:
        raise PlanningError(f"target duration t={t} must be > 0")
    rng = np.random.default_rng(seed)
    chosen = [labels[i] for i in rng.choice(len(labels), size=k, replace=False)]

    per_type = t / k
    picked: list[NoiseRecord] = []
    total = 0.0
    for label in chosen:
        members = sorted(
            (r for r in noise_records if r.type_label == label), key=lambda r: r.id
        )
        available = sum(r.duration for r in members)
        if available + 1e-9 < per_type:
            raise PlanningError(
                f"noise type {label!r} has only {available:.1f}s, "
                f"needs {per_type:.1f}s"
            )
        perm = rng.permutation(len(members))
        sub_total = 0.0
        for idx in perm:
            if sub_total >= per_type - 1e-9:
                break
            picked.append(members[idx])
            sub_total += members[idx].duration
        total += sub_total
    return NoiseSubset(
        record_ids=[r.id for r in picked],
        total_duration=total,
        type_labels=frozenset(chosen),
        target_t=t,
        target_k=k,
        seed=seed,
    )


# --- serialization -----------------------------------------------------------

def save_plan(plan: GenerationPlan, path: str | Path) -> None:
    """JSON header line, then one JSON request per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "generation_plan",
        "attribute_tag": plan.attribute_tag,
        "source_manifest_id": plan.source_manifest_id,
        "w_target": plan.w_target,
        "delta_w": plan.delta_w,
        "seed": plan.seed,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for req in plan.requests:
            fh.write(
                json.dumps(
                    {
                        "index": req.index,
                        "text": req.text,
                        "language": req.language,
                        "prompt_utterance_id": req.prompt_utterance_id,
                        "target_speaker_id": req.target_speaker_id,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_plan(path: str | Path) -> GenerationPlan:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise PlanningError(f"{path}: empty plan file")
    header = json.loads(lines[0])
    if header.get("kind") != "generation_plan":
        raise PlanningError(f"{path}: not a generation plan file")
    requests = [
        SynthesisRequest(
            index=obj["index"],
            text=obj["text"],
            language=obj["language"],
            prompt_utterance_id=obj["prompt_utterance_id"],
            target_speaker_id=obj["target_speaker_id"],
        )
        for obj in (json.loads(ln) for ln in lines[1:])
    ]
    return GenerationPlan(
        requests=requests,
        source_manifest_id=header["source_manifest_id"],
        attribute_tag=header["attribute_tag"],
        w_target=header["w_target"],
        delta_w=header["delta_w"],
        seed=header["seed"],
    )


def save_noise_subset(subset: NoiseSubset, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(
            {
                "kind": "noise_subset",
                "record_ids": subset.record_ids,
                "total_duration": subset.total_duration,
                "type_labels": sorted(subset.type_labels),
                "target_t": subset.target_t,
                "target_k": subset.target_k,
                "seed": subset.seed,
            },
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )


def load_noise_subset(path: str | Path) -> NoiseSubset:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if obj.get("kind") != "noise_subset":
        raise PlanningError(f"{path}: not a noise subset file")
    return NoiseSubset(
        record_ids=obj["record_ids"],
        total_duration=obj["total_duration"],
        type_labels=frozenset(obj["type_labels"]),
        target_t=obj["target_t"],
        target_k=obj["target_k"],
        seed=obj["seed"],
    )


def validate_plan_against_source(plan: GenerationPlan, source: Manifest) -> None:
    """Check the request/prompt invariants a plan must satisfy for a source."""
    if plan.m != source.m:
        raise PlanningError(
            f"plan has {plan.m} requests, source has {source.m} utterances"
        )
    by_id = {rec.id: rec for rec in source.records}
    for req in plan.requests:
        rec = by_id.get(req.prompt_utterance_id)
        if rec is None:
            raise PlanningError(
                f"request {req.index}: prompt {req.prompt_utterance_id!r} "
                "not in source manifest"
            )
        if rec.speaker_id != req.target_speaker_id:
            raise PlanningError(
                f"request {req.index}: prompt {req.prompt_utterance_id!r} belongs "
                f"to {rec.speaker_id!r}, not target {req.target_speaker_id!r}"
            )
