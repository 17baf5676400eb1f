"""Sweep orchestration: generation -> training -> evaluation, cached.

One sweep varies one attribute axis.  Speech axes (text, language, speaker,
prompt-mode, full-vs-real) synthesize a corpus per value and pre-simulate
fixed training pairs; noise axes (noise-duration, noise-type) reuse one
full-synthetic corpus and mix on the fly during training.  Every stage
artifact is cached under a content-addressed key, so re-running an
unchanged configuration does no training work.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .corpus import Manifest, NoiseRecord, load_manifest, save_manifest
from .evalsuite import (
    MetricReport,
    PluginRegistry,
    evaluate,
    load_report,
    save_report,
)
from .mixer import (
    DEFAULT_SNR_RANGE,
    PairedDataset,
    load_paired_dataset,
    simulate_dataset,
)
from .models.checkpoint import load_checkpoint
from .sampler import (
    GenerationPlan,
    NoiseSubset,
    build_full_synthetic_plan,
    build_language_variant,
    build_speaker_variant,
    build_text_variant,
    sample_noise_duration,
    sample_noise_typed,
    save_plan,
)
from .synth import Synthesizer, execute_plan
from .trainer import (
    StreamSource,
    TrainConfig,
    enhancer_from_checkpoint,
    identity_enhancer,
    train,
)

log = logging.getLogger(__name__)

SPEECH_AXES = ("text", "language", "speaker", "prompt-mode", "full-vs-real")
NOISE_AXES = ("noise-duration", "noise-type")
AXES = SPEECH_AXES + NOISE_AXES


class RunnerError(RuntimeError):
    """Raised for invalid experiment configurations."""


@dataclass(frozen=True)
class EvalSpec:
    name: str
    snr_range: tuple[float, float] = DEFAULT_SNR_RANGE
    noise_t: float | None = None  # None -> whole noise pool
    noise_k: int | str = "all"
    domain: str = "in"  # "in" | "out"

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "snr_range": list(self.snr_range),
            "noise_t": self.noise_t,
            "noise_k": self.noise_k,
            "domain": self.domain,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalSpec":
        return cls(
            name=obj["name"],
            snr_range=tuple(obj.get("snr_range", DEFAULT_SNR_RANGE)),
            noise_t=obj.get("noise_t"),
            noise_k=obj.get("noise_k", "all"),
            domain=obj.get("domain", "in"),
        )


@dataclass
class ExperimentConfig:
    axis: str
    sweep_values: list
    model_kind: str
    train: TrainConfig
    eval_specs: list[EvalSpec]
    metrics: tuple[str, ...] = ("si_sdr", "sdr", "stoi")
    master_seed: int = 0
    snr_range: tuple[float, float] = DEFAULT_SNR_RANGE
    prompt_mode: str = "single"
    speaker_s: int | None = None  # fixed s for the prompt-mode axis
    noise_t: float | None = None  # training noise budget for speech axes
    noise_k: int | str = "all"

    def __post_init__(self):
        if self.axis not in AXES:
            raise RunnerError(f"unknown axis {self.axis!r}; expected one of {AXES}")
        if not self.sweep_values:
            raise RunnerError("empty sweep")
        if self.train.kind != self.model_kind:
            raise RunnerError(
                f"train config kind {self.train.kind!r} != model {self.model_kind!r}"
            )

    def to_document(self) -> dict:
        return {
            "axis": self.axis,
            "sweep": list(self.sweep_values),
            "model": self.model_kind,
            "train": self.train.to_json(),
            "eval": [s.to_json() for s in self.eval_specs],
            "metrics": list(self.metrics),
            "seed": self.master_seed,
            "snr_range": list(self.snr_range),
            "prompt_mode": self.prompt_mode,
            "speaker_s": self.speaker_s,
            "noise_t": self.noise_t,
            "noise_k": self.noise_k,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "ExperimentConfig":
        """Parse the structured config document (the CLI consumes the
        sibling "corpora" section)."""
        train_doc = dict(doc.get("train") or {})
        train_doc.setdefault("kind", doc["model"])
        train = TrainConfig.from_json(train_doc)
        return cls(
            axis=doc["axis"],
            sweep_values=list(doc["sweep"]),
            model_kind=doc["model"],
            train=train,
            eval_specs=[EvalSpec.from_json(e) for e in doc.get("eval", [])],
            metrics=tuple(doc.get("metrics", ("si_sdr", "sdr", "stoi"))),
            master_seed=doc.get("seed", 0),
            snr_range=tuple(doc.get("snr_range", DEFAULT_SNR_RANGE)),
            prompt_mode=doc.get("prompt_mode", "single"),
            speaker_s=doc.get("speaker_s"),
            noise_t=doc.get("noise_t"),
            noise_k=doc.get("noise_k", "all"),
        )


@dataclass
class RunContext:
    source: Manifest
    noise_pool: list[NoiseRecord]
    synthesizer: Synthesizer
    cache_dir: Path
    eval_speech: Manifest | None = None
    foreign_texts: dict[str, list[str]] = field(default_factory=dict)
    registry: PluginRegistry | None = None
    workers: int = 1
    events: list[list[str]] = field(default_factory=list)

    def note(self, stage: str, key: str, outcome: str):
        self.events.append([stage, key, outcome])


@dataclass
class ResultsTable:
    axis: str
    rows: dict[str, dict[str, float]]  # value -> "eval/metric" -> mean
    baselines: dict[str, dict[str, float]]  # eval -> metric -> mean
    provenance: dict
    failures: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "axis": self.axis,
            "rows": self.rows,
            "baselines": self.baselines,
            "provenance": self.provenance,
            "failures": self.failures,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ResultsTable":
        return cls(
            axis=obj["axis"],
            rows=obj["rows"],
            baselines=obj["baselines"],
            provenance=obj["provenance"],
            failures=obj.get("failures", {}),
        )


# --- cache machinery ---------------------------------------------------------

def cache_key(stage: str, payload: dict) -> str:
    body = json.dumps(
        {"stage": stage, "version": __version__, "payload": payload},
        sort_keys=True, default=str,
    )
    return hashlib.sha256(body.encode("utf-8")).hexdigest()[:16]


def _plan_payload(plan: GenerationPlan) -> dict:
    return {
        "tag": plan.attribute_tag,
        "source": plan.source_manifest_id,
        "seed": plan.seed,
        "requests": [
            [r.text, r.language, r.prompt_utterance_id, r.target_speaker_id]
            for r in plan.requests
        ],
    }


def _subset_payload(subset: NoiseSubset) -> dict:
    return {
        "records": list(subset.record_ids),
        "t": subset.target_t,
        "k": subset.target_k,
        "seed": subset.seed,
    }


def _derive_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _synthesize_cached(ctx: RunContext, plan: GenerationPlan) -> Manifest:
    key = cache_key("synth", {
        "plan": _plan_payload(plan),
        "synthesizer": ctx.synthesizer.synthesizer_id,
    })
    out = ctx.cache_dir / "synth" / key
    sentinel = out / "manifest.jsonl"
    if sentinel.exists():
        ctx.note("synth", key, "hit")
        return load_manifest(sentinel, attribute_tag=plan.attribute_tag)
    ctx.note("synth", key, "miss")
    out.mkdir(parents=True, exist_ok=True)
    save_plan(plan, out / "plan.jsonl")
    manifest = execute_plan(plan, ctx.source, out, ctx.synthesizer,
                            workers=ctx.workers)
    tmp = out / ".manifest.tmp"
    save_manifest(manifest, tmp)
    os.replace(tmp, sentinel)
    return manifest


def _simulate_cached(
    ctx: RunContext,
    speech: Manifest,
    subset: NoiseSubset,
    snr_range: tuple[float, float],
    seed: int,
) -> PairedDataset:
    key = cache_key("pairs", {
        "speech": speech.manifest_id,
        "subset": _subset_payload(subset),
        "snr": list(snr_range),
        "seed": seed,
    })
    out = ctx.cache_dir / "pairs" / key
    if out.exists():
        ctx.note("pairs", key, "hit")
        return load_paired_dataset(out)
    ctx.note("pairs", key, "miss")
    return simulate_dataset(speech, subset, ctx.noise_pool, snr_range, seed, out)


def _train_cached(ctx: RunContext, cfg: TrainConfig, data, data_payload: dict,
                  model_init_seed: int):
    key = cache_key("train", {
        "config": cfg.to_json(),
        "data": data_payload,
        "init": model_init_seed,
    })
    out = ctx.cache_dir / "train" / key
    done = out / "done.json"
    if done.exists():
        ctx.note("train", key, "hit")
        return load_checkpoint(out / "checkpoint.ckpt"), out
    ctx.note("train", key, "miss")
    out.mkdir(parents=True, exist_ok=True)
    ckpt, _curve = train(cfg, data, model_init_seed=model_init_seed, out_dir=out)
    tmp = out / ".done.tmp"
    tmp.write_text(json.dumps({"completed": True, "epochs": cfg.epochs}) + "\n")
    os.replace(tmp, done)
    return ckpt, out


def _evaluate_cached(
    ctx: RunContext,
    paired: PairedDataset,
    pairs_key_payload: dict,
    enhancer,
    enhancer_id: str,
    metrics: tuple[str, ...],
) -> tuple[MetricReport, Path]:
    key = cache_key("report", {
        "pairs": pairs_key_payload,
        "enhancer": enhancer_id,
        "metrics": list(metrics),
    })
    out = ctx.cache_dir / "report" / key
    if (out / "aggregates.json").exists():
        ctx.note("report", key, "hit")
        return load_report(out), out
    ctx.note("report", key, "miss")
    report = evaluate(
        paired, enhancer, metrics=metrics, registry=ctx.registry,
        enhancer_id=enhancer_id,
    )
    save_report(report, out)
    return report, out


# --- sweep -------------------------------------------------------------------

def _validate_sweep(config: ExperimentConfig, ctx: RunContext):
    stats = ctx.source.stats
    pool_total = sum(r.duration for r in ctx.noise_pool)
    n_types = len({r.type_label for r in ctx.noise_pool})
    for value in config.sweep_values:
        ok = True
        if config.axis == "text":
            ok = 1 <= value <= stats.unique_texts
        elif config.axis == "speaker":
            ok = 1 <= value <= stats.unique_speakers
        elif config.axis == "language":
            ok = 1 <= value <= 10
        elif config.axis == "prompt-mode":
            ok = value in ("single", "multi")
        elif config.axis == "full-vs-real":
            ok = value in ("real", "synthetic")
        elif config.axis == "noise-duration":
            ok = 0 < value <= pool_total + 1e-9
        elif config.axis == "noise-type":
            ok = 1 <= value <= n_types
        if not ok:
            raise RunnerError(
                f"sweep value {value!r} outside the legal range for axis "
                f"{config.axis!r}"
            )


def _training_noise_subset(config: ExperimentConfig, ctx: RunContext) -> NoiseSubset:
    pool_total = sum(r.duration for r in ctx.noise_pool)
    t = config.noise_t if config.noise_t is not None else pool_total
    seed = _derive_seed(config.master_seed, "train-noise")
    if config.noise_k == "all":
        return sample_noise_duration(ctx.noise_pool, t, seed=seed)
    return sample_noise_typed(ctx.noise_pool, t, config.noise_k, seed=seed)


def _eval_noise_subset(spec: EvalSpec, ctx: RunContext, master_seed: int) -> NoiseSubset:
    pool_total = sum(r.duration for r in ctx.noise_pool)
    t = spec.noise_t if spec.noise_t is not None else pool_total
    seed = _derive_seed(master_seed, "eval-noise", spec.name)
    if spec.noise_k == "all":
        return sample_noise_duration(ctx.noise_pool, t, seed=seed)
    return sample_noise_typed(ctx.noise_pool, t, spec.noise_k, seed=seed)


def _speech_axis_plan(config: ExperimentConfig, ctx: RunContext, value):
    seed = _derive_seed(config.master_seed, "plan", config.axis, value)
    src = ctx.source
    if config.axis == "text":
        return build_text_variant(src, n=value, seed=seed)
    if config.axis == "language":
        return build_language_variant(
            src, p=value, foreign_texts=ctx.foreign_texts, seed=seed
        )
    if config.axis == "speaker":
        return build_speaker_variant(src, s=value, mode=config.prompt_mode, seed=seed)
    if config.axis == "prompt-mode":
        s = config.speaker_s or src.stats.unique_speakers
        return build_speaker_variant(src, s=s, mode=value, seed=seed)
    if config.axis == "full-vs-real":
        if value == "real":
            return None  # train directly on the source corpus
        return build_full_synthetic_plan(src, seed=seed)
    raise RunnerError(f"{config.axis} is not a speech axis")


def _train_cell(config: ExperimentConfig, ctx: RunContext, value):
    """Train one sweep cell; returns (checkpoint, train dir, provenance)."""
    init_seed = _derive_seed(config.master_seed, "init", config.axis, value)
    mix_seed = _derive_seed(config.master_seed, "mix", config.axis, value)
    prov: dict = {}

    if config.axis in SPEECH_AXES:
        plan = _speech_axis_plan(config, ctx, value)
        if plan is None:
            speech = ctx.source
            prov["speech"] = {"manifest": speech.manifest_id, "provenance": "real"}
        else:
            speech = _synthesize_cached(ctx, plan)
            prov["speech"] = {
                "manifest": speech.manifest_id,
                "attribute_tag": plan.attribute_tag,
                "delta_w": plan.delta_w,
            }
        subset = _training_noise_subset(config, ctx)
        pairs = _simulate_cached(ctx, speech, subset, config.snr_range, mix_seed)
        cfg = dataclasses.replace(config.train, data_mode="fixed")
        data = pairs
        data_payload = {
            "mode": "fixed",
            "speech": speech.manifest_id,
            "subset": _subset_payload(subset),
            "snr": list(config.snr_range),
            "mix_seed": mix_seed,
        }
        prov["train_pairs"] = pairs.root
        prov["mode"] = "fixed"
    else:
        full_plan = build_full_synthetic_plan(
            ctx.source, seed=_derive_seed(config.master_seed, "plan", "full")
        )
        speech = _synthesize_cached(ctx, full_plan)
        prov["speech"] = {"manifest": speech.manifest_id, "attribute_tag": "full-synthetic"}
        seed = _derive_seed(config.master_seed, "subset", config.axis, value)
        if config.axis == "noise-duration":
            subset = sample_noise_duration(ctx.noise_pool, value, seed=seed)
        else:
            t = config.noise_t
            if t is None:
                raise RunnerError("noise-type axis requires noise_t in the config")
            subset = sample_noise_typed(ctx.noise_pool, t, value, seed=seed)
        cfg = dataclasses.replace(config.train, data_mode="on-the-fly")
        data = StreamSource(speech, subset, ctx.noise_pool, config.snr_range, mix_seed)
        data_payload = {
            "mode": "on-the-fly",
            "speech": speech.manifest_id,
            "subset": _subset_payload(subset),
            "snr": list(config.snr_range),
            "mix_seed": mix_seed,
        }
        prov["subset"] = _subset_payload(subset)
        prov["mode"] = "on-the-fly"

    ckpt, train_dir = _train_cached(ctx, cfg, data, data_payload, init_seed)
    prov["train_dir"] = str(train_dir)
    prov["checkpoint"] = str(train_dir / "checkpoint.ckpt")
    return ckpt, prov


def _eval_datasets(config: ExperimentConfig, ctx: RunContext):
    """One shared paired dataset per eval spec (built once per sweep)."""
    speech = ctx.eval_speech or ctx.source
    out = {}
    for spec in config.eval_specs:
        subset = _eval_noise_subset(spec, ctx, config.master_seed)
        seed = _derive_seed(config.master_seed, "eval-mix", spec.name)
        payload = {
            "speech": speech.manifest_id,
            "subset": _subset_payload(subset),
            "snr": list(spec.snr_range),
            "seed": seed,
        }
        pairs = _simulate_cached(ctx, speech, subset, spec.snr_range, seed)
        out[spec.name] = (pairs, payload)
    return out


def run_sweep(config: ExperimentConfig, ctx: RunContext) -> ResultsTable:
    """Execute every sweep cell; failures mark their cell and continue."""
    if not config.eval_specs:
        raise RunnerError("config has no evaluation specs")
    _validate_sweep(config, ctx)
    eval_sets = _eval_datasets(config, ctx)

    baselines: dict[str, dict[str, float]] = {}
    provenance: dict = {
        "config_hash": cache_key("experiment", config.to_document()),
        "cells": {},
        "baseline_reports": {},
    }
    base_fn, base_id = identity_enhancer()
    for name, (pairs, payload) in eval_sets.items():
        report, rep_dir = _evaluate_cached(
            ctx, pairs, payload, base_fn, base_id, config.metrics
        )
        baselines[name] = dict(report.aggregates)
        provenance["baseline_reports"][name] = str(rep_dir)

    rows: dict[str, dict[str, float]] = {}
    failures: dict[str, str] = {}
    for value in config.sweep_values:
        try:
            ckpt, prov = _train_cell(config, ctx, value)
            enhancer, enh_id = enhancer_from_checkpoint(ckpt)
            cell_rows: dict[str, float] = {}
            prov["reports"] = {}
            for name, (pairs, payload) in eval_sets.items():
                report, rep_dir = _evaluate_cached(
                    ctx, pairs, payload, enhancer,
                    f"{enh_id}:{provenance['config_hash']}:{config.axis}={value}",
                    config.metrics,
                )
                prov["reports"][name] = str(rep_dir)
                for metric, mean in report.aggregates.items():
                    cell_rows[f"{name}/{metric}"] = mean
            rows[str(value)] = cell_rows
            provenance["cells"][str(value)] = prov
        except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
            log.warning("cell %s=%r failed: %s", config.axis, value, exc)
            failures[str(value)] = f"{type(exc).__name__}: {exc}"
    if failures:
        log.warning("sweep finished with failures: %s", sorted(failures))
    return ResultsTable(
        axis=config.axis,
        rows=rows,
        baselines=baselines,
        provenance=provenance,
        failures=failures,
    )


def compare_real_vs_synthetic(
    ctx: RunContext,
    kinds: tuple[str, ...],
    config: ExperimentConfig,
) -> ResultsTable:
    """Train each model kind on real and on full-synthetic pairs, evaluate
    all four cells on the same in-domain set."""
    rows: dict[str, dict[str, float]] = {"real": {}, "synthetic": {}}
    provenance: dict = {
        "config_hash": cache_key("compare", config.to_document()),
        "cells": {},
    }
    failures: dict[str, str] = {}
    eval_sets = _eval_datasets(config, ctx)
    base_fn, base_id = identity_enhancer()
    baselines = {}
    for name, (pairs, payload) in eval_sets.items():
        report, rep_dir = _evaluate_cached(
            ctx, pairs, payload, base_fn, base_id, config.metrics
        )
        baselines[name] = dict(report.aggregates)

    for source_label in ("real", "synthetic"):
        for kind in kinds:
            cell = f"{source_label}/{kind}"
            try:
                # lr 0 re-resolves to each kind's own default learning rate.
                cell_cfg = dataclasses.replace(
                    config,
                    axis="full-vs-real",
                    sweep_values=[source_label],
                    model_kind=kind,
                    train=dataclasses.replace(config.train, kind=kind, lr=0.0),
                )
                ckpt, prov = _train_cell(cell_cfg, ctx, source_label)
                enhancer, enh_id = enhancer_from_checkpoint(ckpt)
                prov["reports"] = {}
                for name, (pairs, payload) in eval_sets.items():
                    report, rep_dir = _evaluate_cached(
                        ctx, pairs, payload, enhancer,
                        f"{enh_id}:{provenance['config_hash']}:{cell}",
                        config.metrics,
                    )
                    prov["reports"][name] = str(rep_dir)
                    for metric, mean in report.aggregates.items():
                        rows[source_label][f"{kind}/{name}/{metric}"] = mean
                provenance["cells"][cell] = prov
            except Exception as exc:  # noqa: BLE001
                log.warning("compare cell %s failed: %s", cell, exc)
                failures[cell] = f"{type(exc).__name__}: {exc}"
    return ResultsTable(
        axis="full-vs-real",
        rows=rows,
        baselines=baselines,
        provenance=provenance,
        failures=failures,
    )


# --- report emission ---------------------------------------------------------

def save_results_table(table: ResultsTable, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(table.to_json(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def load_results_table(path: str | Path) -> ResultsTable:
    return ResultsTable.from_json(
        json.loads(Path(path).read_text(encoding="utf-8"))
    )


def report(table: ResultsTable, out_dir: str | Path) -> list[Path]:
    """Write results.csv, results.json and per-metric plot data with the
    unprocessed baseline as an explicit series."""
    if not table.rows and not table.baselines:
        raise RunnerError("empty results table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    json_path = out_dir / "results.json"
    save_results_table(table, json_path)
    written.append(json_path)

    csv_path = out_dir / "results.csv"
    lines = ["axis_value,eval_set,metric,series,value"]
    for value in table.rows:
        for key, mean in sorted(table.rows[value].items()):
            eval_set, metric = key.rsplit("/", 1)
            lines.append(f"{value},{eval_set},{metric},model,{mean:.6f}")
    for eval_set in sorted(table.baselines):
        for metric, mean in sorted(table.baselines[eval_set].items()):
            lines.append(f"baseline,{eval_set},{metric},baseline,{mean:.6f}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(csv_path)

    metrics = sorted(
        {key.rsplit("/", 1)[1] for row in table.rows.values() for key in row}
        | {m for b in table.baselines.values() for m in b}
    )
    for metric in metrics:
        plot_path = out_dir / f"plot_{metric}.csv"
        plines = ["axis_value,eval_set,series,value"]
        for value in table.rows:
            for key, mean in sorted(table.rows[value].items()):
                eval_set, m = key.rsplit("/", 1)
                if m == metric:
                    plines.append(f"{value},{eval_set},model,{mean:.6f}")
        for eval_set in sorted(table.baselines):
            if metric in table.baselines[eval_set]:
                for value in table.rows or {"-": None}:
                    plines.append(
                        f"{value},{eval_set},baseline,"
                        f"{table.baselines[eval_set][metric]:.6f}"
                    )
        plot_path.write_text("\n".join(plines) + "\n", encoding="utf-8")
        written.append(plot_path)
    return written
