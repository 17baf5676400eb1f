"""Command-line entry points for the pipeline stages.

Stage commands (ingest, plan, synth, mix, train, eval) operate on explicit
file arguments; sweep/compare/report consume a single JSON config document
with sections {corpora, axis, sweep, model, train, eval, metrics}.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .corpus import (
    ingest_noise_corpus,
    ingest_speech_corpus,
    load_manifest,
    load_noise_records,
    save_manifest,
    save_noise_records,
)
from .mixer import DEFAULT_SNR_RANGE, load_paired_dataset, simulate_dataset
from .models.checkpoint import load_checkpoint
from .runner import (
    ExperimentConfig,
    RunContext,
    compare_real_vs_synthetic,
    load_results_table,
    report,
    run_sweep,
    save_results_table,
)
from .sampler import (
    build_full_synthetic_plan,
    build_language_variant,
    build_speaker_variant,
    build_text_variant,
    load_plan,
    sample_noise_duration,
    sample_noise_typed,
    save_plan,
)
from .synth import ENDPOINT_ENV_VAR, ExternalSynthesizer, MockSynthesizer, execute_plan
from .trainer import (
    StreamSource,
    TrainConfig,
    enhancer_from_checkpoint,
    train as run_train,
)
from .evalsuite import evaluate, save_report

log = logging.getLogger("attrib_se")


def _add_global_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--cache-dir", default="cache")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attrib-se",
        description="Controlled-attribute synthetic-data experiments for "
        "speech enhancement",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a corpus into a manifest")
    _add_global_flags(p)
    p.add_argument("kind", choices=["speech", "noise"])
    p.add_argument("--root", required=True)
    p.add_argument("--transcripts", help="JSON {file stem: text} (speech only)")
    p.add_argument("--language", default="en")
    p.add_argument("--out", required=True)

    p = sub.add_parser("plan", help="build an attribute-variant generation plan")
    _add_global_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--axis", required=True,
        choices=["full", "text", "language", "speaker"],
    )
    p.add_argument("--value", help="n / p / s for the chosen axis")
    p.add_argument("--mode", default="single", choices=["single", "multi"])
    p.add_argument("--foreign-texts", help="JSON {language: [texts]}")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="execute a generation plan")
    _add_global_flags(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--manifest", required=True, help="source (prompt) manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--voice-salt", default="")
    p.add_argument(
        "--external", action="store_true",
        help=f"use the adapter at ${ENDPOINT_ENV_VAR} instead of the mock",
    )

    p = sub.add_parser("mix", help="pre-simulate noisy/clean pairs")
    _add_global_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--noise", required=True, help="noise records JSONL")
    p.add_argument("--t", type=float, help="noise duration budget, seconds")
    p.add_argument("--k", help="noise type count or 'all'", default="all")
    p.add_argument("--snr", type=float, nargs=2, default=list(DEFAULT_SNR_RANGE))
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on pre-simulated pairs")
    _add_global_flags(p)
    p.add_argument("--pairs", required=True)
    p.add_argument("--kind", required=True, choices=["bsrnn", "sgmse"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on paired data")
    _add_global_flags(p)
    p.add_argument("--pairs", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", nargs="+", default=["si_sdr", "sdr", "stoi"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="run a full attribute sweep from a config")
    _add_global_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="real-vs-synthetic comparison table")
    _add_global_flags(p)
    p.add_argument("--kinds", nargs="+", default=["bsrnn", "sgmse"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="emit CSV/plot data from a results table")
    _add_global_flags(p)
    p.add_argument("--table", required=True, help="results.json path")
    p.add_argument("--out", required=True)
    return parser


def _cmd_ingest(args) -> int:
    if args.kind == "speech":
        if not args.transcripts:
            raise SystemExit("ingest speech requires --transcripts")
        transcripts = json.loads(Path(args.transcripts).read_text(encoding="utf-8"))
        manifest = ingest_speech_corpus(args.root, transcripts, language=args.language)
        save_manifest(manifest, args.out)
        print(f"ingested {manifest.m} utterances -> {args.out}")
    else:
        records = ingest_noise_corpus(args.root)
        save_noise_records(records, args.out)
        print(f"ingested {len(records)} noise clips -> {args.out}")
    return 0


def _cmd_plan(args) -> int:
    source = load_manifest(args.manifest)
    if args.axis == "full":
        plan = build_full_synthetic_plan(source, seed=args.seed)
    elif args.axis == "text":
        plan = build_text_variant(source, n=int(args.value), seed=args.seed)
    elif args.axis == "language":
        banks = {}
        if args.foreign_texts:
            banks = json.loads(Path(args.foreign_texts).read_text(encoding="utf-8"))
        plan = build_language_variant(
            source, p=int(args.value), foreign_texts=banks, seed=args.seed
        )
    else:
        plan = build_speaker_variant(
            source, s=int(args.value), mode=args.mode, seed=args.seed
        )
    save_plan(plan, args.out)
    print(
        f"plan {plan.attribute_tag}: {plan.m} requests, "
        f"delta_w={plan.delta_w} -> {args.out}"
    )
    return 0


def _make_synthesizer(args):
    if args.external:
        return ExternalSynthesizer()  # endpoint from the environment
    return MockSynthesizer(voice_salt=args.voice_salt)


def _cmd_synth(args) -> int:
    plan = load_plan(args.plan)
    source = load_manifest(args.manifest)
    synthesizer = _make_synthesizer(args)
    manifest = execute_plan(plan, source, args.out, synthesizer, workers=args.workers)
    save_manifest(manifest, Path(args.out) / "manifest.jsonl")
    print(f"synthesized {manifest.m} utterances -> {args.out}")
    return 0


def _noise_subset(args, pool):
    total = sum(r.duration for r in pool)
    t = args.t if args.t is not None else total
    if args.k == "all":
        return sample_noise_duration(pool, t, seed=args.seed)
    return sample_noise_typed(pool, t, int(args.k), seed=args.seed)


def _cmd_mix(args) -> int:
    speech = load_manifest(args.manifest)
    pool = load_noise_records(args.noise)
    subset = _noise_subset(args, pool)
    paired = simulate_dataset(
        speech, subset, pool, tuple(args.snr), args.seed, args.out
    )
    print(f"simulated {len(paired)} pairs -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    paired = load_paired_dataset(args.pairs)
    overrides = {
        k: v
        for k, v in {
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "lr": args.lr,
        }.items()
        if v is not None
    }
    cfg = TrainConfig(kind=args.kind, seed=args.seed, **overrides)
    ckpt, _curve = run_train(cfg, paired, model_init_seed=args.seed, out_dir=args.out)
    print(
        f"trained {cfg.kind} for {cfg.epochs} epochs "
        f"({ckpt.step} steps) -> {args.out}"
    )
    return 0


def _cmd_eval(args) -> int:
    paired = load_paired_dataset(args.pairs)
    ckpt = load_checkpoint(args.checkpoint)
    enhancer, enh_id = enhancer_from_checkpoint(ckpt)
    rep = evaluate(
        paired, enhancer, metrics=tuple(args.metrics), enhancer_id=enh_id
    )
    save_report(rep, args.out)
    for metric, mean in sorted(rep.aggregates.items()):
        print(f"{metric}: {mean:.4f}")
    return 0


def _load_document(args) -> dict:
    if not args.config:
        raise SystemExit("this command requires --config <document.json>")
    return json.loads(Path(args.config).read_text(encoding="utf-8"))


def _context_from_document(doc: dict, args) -> RunContext:
    corpora = doc.get("corpora") or {}
    if "speech_manifest" not in corpora or "noise_records" not in corpora:
        raise SystemExit(
            "config corpora section needs speech_manifest and noise_records"
        )
    source = load_manifest(corpora["speech_manifest"])
    pool = load_noise_records(corpora["noise_records"])
    eval_speech = None
    if corpora.get("eval_manifest"):
        eval_speech = load_manifest(corpora["eval_manifest"])
    foreign = {}
    if corpora.get("foreign_texts"):
        foreign = json.loads(
            Path(corpora["foreign_texts"]).read_text(encoding="utf-8")
        )
    synth_doc = doc.get("synthesizer") or {}
    if synth_doc.get("type") == "external":
        synthesizer = ExternalSynthesizer()
    else:
        synthesizer = MockSynthesizer(voice_salt=synth_doc.get("voice_salt", ""))
    return RunContext(
        source=source,
        noise_pool=pool,
        synthesizer=synthesizer,
        cache_dir=Path(args.cache_dir),
        eval_speech=eval_speech,
        foreign_texts=foreign,
        workers=args.workers,
    )


def _cmd_sweep(args) -> int:
    doc = _load_document(args)
    config = ExperimentConfig.from_document(doc)
    ctx = _context_from_document(doc, args)
    table = run_sweep(config, ctx)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_results_table(table, out / "results.json")
    report(table, out)
    for value in table.rows:
        print(f"{config.axis}={value}: " + ", ".join(
            f"{k}={v:.3f}" for k, v in sorted(table.rows[value].items())
        ))
    if table.failures:
        print("failed cells:", ", ".join(sorted(table.failures)), file=sys.stderr)
        return 1
    return 0


def _cmd_compare(args) -> int:
    doc = _load_document(args)
    config = ExperimentConfig.from_document(doc)
    ctx = _context_from_document(doc, args)
    table = compare_real_vs_synthetic(ctx, tuple(args.kinds), config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_results_table(table, out / "results.json")
    report(table, out)
    for row in ("real", "synthetic"):
        print(f"{row}: " + ", ".join(
            f"{k}={v:.3f}" for k, v in sorted(table.rows.get(row, {}).items())
        ))
    return 1 if table.failures else 0


def _cmd_report(args) -> int:
    table = load_results_table(args.table)
    files = report(table, args.out)
    for f in files:
        print(f)
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "plan": _cmd_plan,
    "synth": _cmd_synth,
    "mix": _cmd_mix,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "compare": _cmd_compare,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
