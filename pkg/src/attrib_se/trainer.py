"""Training loop for both model families, fixed and on-the-fly data.

Determinism is the contract here: every random draw is scoped to
(seed, purpose, epoch) substreams, so a run resumed at an epoch boundary
is byte-identical to an uninterrupted one, and two runs with the same
seeds produce identical parameter blobs on one device.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import SAMPLE_RATE
from .audioio import read_wav
from .corpus import Manifest, NoiseRecord
from .mixer import MixSpec, PairedDataset, pair_stream
from .models.bsrnn import Bsrnn, BsrnnConfig, bsrnn_from_checkpoint, bsrnn_loss
from .models.checkpoint import Checkpoint, save_checkpoint, state_dict_to_numpy
from .models.sgmse import (
    DEFAULT_CORRECTOR_SNR,
    DEFAULT_CORRECTOR_STEPS,
    DEFAULT_N_STEPS,
    OuveParams,
    ScoreNet,
    scorenet_from_checkpoint,
    score_loss,
    sgmse_enhance_model,
    unit_draw_like,
)
from .models.spectral import SpectrogramConfig, compress, stft_torch
from .sampler import NoiseSubset

log = logging.getLogger(__name__)

MODEL_KINDS = ("bsrnn", "sgmse")
PAPER_EPOCHS = 40
PAPER_BATCH = 6
PAPER_LR = {"bsrnn": 1e-3, "sgmse": 1e-4}

# Substream labels: every rng is seeded [seed, label, epoch(, item)].
_S_ORDER, _S_CROP, _S_TIME, _S_TORCH = 0, 1, 2, 3


class TrainError(RuntimeError):
    """Raised when training cannot proceed (NaN loss, bad config...)."""


@dataclass(frozen=True)
class TrainConfig:
    kind: str
    epochs: int = PAPER_EPOCHS
    batch_size: int = PAPER_BATCH
    lr: float = 0.0  # 0 -> resolved to the kind's default
    seed: int = 0
    segment_seconds: float = 2.0
    data_mode: str = "fixed"  # "fixed" | "on-the-fly"
    grad_clip: float = 5.0
    checkpoint_interval: int = 0  # epochs between extra saves; 0 = final only
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise TrainError(f"unknown model kind {self.kind!r}")
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainError("batch size must be >= 1")
        if self.lr != 0.0 and not self.lr > 0:
            raise TrainError("lr must be > 0")
        if self.data_mode not in ("fixed", "on-the-fly"):
            raise TrainError(f"unknown data mode {self.data_mode!r}")
        if self.segment_seconds <= 0:
            raise TrainError("segment_seconds must be > 0")

    @property
    def effective_lr(self) -> float:
        return self.lr if self.lr > 0 else PAPER_LR[self.kind]

    @classmethod
    def paper_default(cls, kind: str) -> "TrainConfig":
        return cls(kind=kind)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.effective_lr,
            "seed": self.seed,
            "segment_seconds": self.segment_seconds,
            "data_mode": self.data_mode,
            "grad_clip": self.grad_clip,
            "checkpoint_interval": self.checkpoint_interval,
            "adam_betas": list(self.adam_betas),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["adam_betas"] = tuple(obj.get("adam_betas", (0.9, 0.999)))
        return cls(**obj)


@dataclass
class StreamSource:
    """Arguments for per-epoch pair_stream draws (on-the-fly mode)."""

    speech: Manifest
    subset: NoiseSubset
    pool: list[NoiseRecord]
    snr_range: tuple[float, float]
    mix_seed: int

    def epoch(self, k: int):
        return pair_stream(
            self.speech, self.subset, self.pool, self.snr_range,
            self.mix_seed, k,
        )


# --- model construction ------------------------------------------------------

DEFAULT_SCORENET_CHANNELS = 16


def build_model(kind: str, model_init_seed: int, model_cfg: dict | None = None):
    """Freshly initialized model plus its serializable config."""
    torch.manual_seed(model_init_seed)
    if kind == "bsrnn":
        cfg = BsrnnConfig.from_json(model_cfg) if model_cfg else BsrnnConfig()
        return Bsrnn(cfg), cfg.to_json()
    cfg = model_cfg or {
        "channels": DEFAULT_SCORENET_CHANNELS,
        "ouve": OuveParams().to_json(),
        "fft_size": 512,
        "hop": 128,
    }
    return ScoreNet(channels=cfg["channels"]), cfg


# --- data plumbing -----------------------------------------------------------

def _load_fixed_pairs(data: PairedDataset) -> list[tuple[np.ndarray, np.ndarray, MixSpec]]:
    root = Path(data.root)
    out = []
    for noisy_rel, clean_rel, spec in data.pairs:
        noisy, _ = read_wav(root / noisy_rel)
        clean, _ = read_wav(root / clean_rel)
        out.append((noisy, clean, spec))
    if not out:
        raise TrainError("empty paired dataset")
    return out


def _epoch_items(config, data, epoch, out_dir):
    """Materialize one epoch of (noisy, clean) pairs; log stream ledgers."""
    if config.data_mode == "fixed":
        return data
    items = []
    ledger_path = None
    if out_dir is not None:
        ledger_path = Path(out_dir) / f"mixspecs_epoch{epoch}.jsonl"
    rows = []
    for noisy, clean, spec in data.epoch(epoch):
        items.append((noisy, clean, spec))
        rows.append(spec.to_json())
    if ledger_path is not None:
        with ledger_path.open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"kind": "stream_epoch", "epoch": epoch}) + "\n")
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return items


def _crop(wave: np.ndarray, start: int, seg: int) -> np.ndarray:
    if len(wave) >= seg:
        return wave[start : start + seg]
    out = np.zeros(seg, dtype=wave.dtype)
    out[: len(wave)] = wave
    return out


def _batch_tensors(items, indices, crop_rng, seg):
    noisy_rows, clean_rows = [], []
    for i in indices:
        noisy, clean, _ = items[i]
        start = 0
        if len(noisy) > seg:
            start = int(crop_rng.integers(0, len(noisy) - seg + 1))
        noisy_rows.append(_crop(noisy, start, seg))
        clean_rows.append(_crop(clean, start, seg))
    to_t = lambda rows: torch.from_numpy(np.stack(rows).astype(np.float32))  # noqa: E731
    return to_t(noisy_rows), to_t(clean_rows)


# --- the loop ----------------------------------------------------------------

def _param_norm(model) -> float:
    with torch.no_grad():
        return math.sqrt(sum(float(p.norm() ** 2) for p in model.parameters()))


def _sgmse_batch_loss(model, noisy_b, clean_b, t, z_gen, spec_cfg, ouve):
    x0 = compress(stft_torch(clean_b, spec_cfg))
    y = compress(stft_torch(noisy_b, spec_cfg))
    z = unit_draw_like(x0, z_gen)
    return score_loss(model, x0, y, t, z, ouve)


def _serialize_optimizer(opt) -> tuple[dict, dict]:
    sd = opt.state_dict()
    tensors, steps = {}, {}
    # Numeric order keeps the payload canonical; the header JSON sorts keys
    # lexicographically, so insertion order must not be trusted on restore.
    for idx in sorted(sd["state"], key=int):
        st = sd["state"][idx]
        tensors[f"{idx}.exp_avg"] = st["exp_avg"].numpy().astype(np.float32)
        tensors[f"{idx}.exp_avg_sq"] = st["exp_avg_sq"].numpy().astype(np.float32)
        steps[str(idx)] = float(st["step"])
    return tensors, {"steps": steps, "param_groups": sd["param_groups"]}


def _restore_optimizer(opt, ckpt: Checkpoint):
    if not ckpt.optimizer_tensors:
        return
    meta = ckpt.optimizer_meta
    state = {}
    for key in sorted(meta["steps"], key=int):
        step_val = meta["steps"][key]
        idx = int(key)
        state[idx] = {
            "step": torch.tensor(float(step_val)),
            "exp_avg": torch.from_numpy(ckpt.optimizer_tensors[f"{idx}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(
                ckpt.optimizer_tensors[f"{idx}.exp_avg_sq"].copy()
            ),
        }
    groups = []
    for g in meta["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": groups})


def _make_checkpoint(config, model, model_cfg, opt, step, model_init_seed,
                     epochs_done) -> Checkpoint:
    opt_tensors, opt_meta = _serialize_optimizer(opt)
    return Checkpoint(
        kind=config.kind,
        config={"train": config.to_json(), "model": model_cfg},
        step=step,
        # [data seed, model init seed, epochs completed]
        seed_lineage=[config.seed, model_init_seed, epochs_done],
        tensors=state_dict_to_numpy(model),
        optimizer_tensors=opt_tensors,
        optimizer_meta=opt_meta,
    )


def _run_epochs(
    config: TrainConfig,
    data,
    model,
    model_cfg,
    opt,
    model_init_seed: int,
    start_epoch: int,
    start_step: int,
    out_dir: str | Path | None,
):
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    seg = int(round(config.segment_seconds * SAMPLE_RATE))
    spec_cfg = None
    ouve = None
    if config.kind == "sgmse":
        ouve = OuveParams.from_json(model_cfg["ouve"])
        spec_cfg = SpectrogramConfig(
            fft_size=model_cfg["fft_size"], hop=model_cfg["hop"]
        )

    fixed = _load_fixed_pairs(data) if config.data_mode == "fixed" else None
    curve: list[tuple[int, int, float]] = []
    step = start_step
    model.train()
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)  # bit-stable CPU math across runs
    try:
        for epoch in range(start_epoch, config.epochs):
            items = _epoch_items(config, fixed if fixed is not None else data,
                                 epoch, out_dir)
            n = len(items)
            if n == 0:
                raise TrainError("no training items")
            order = np.random.default_rng([config.seed, _S_ORDER, epoch]).permutation(n)
            crop_rng = np.random.default_rng([config.seed, _S_CROP, epoch])
            t_rng = np.random.default_rng([config.seed, _S_TIME, epoch])
            z_gen = torch.Generator().manual_seed(
                int(np.random.default_rng([config.seed, _S_TORCH, epoch]).integers(2**31))
            )
            for lo in range(0, n, config.batch_size):
                indices = order[lo : lo + config.batch_size]
                noisy_b, clean_b = _batch_tensors(items, indices, crop_rng, seg)
                if config.kind == "bsrnn":
                    est = model(noisy_b)
                    loss = bsrnn_loss(est, clean_b)
                else:
                    t = float(t_rng.uniform(ouve.t_eps, 1.0))
                    loss = _sgmse_batch_loss(
                        model, noisy_b, clean_b, t, z_gen, spec_cfg, ouve
                    )
                if not torch.isfinite(loss):
                    raise TrainError(
                        f"non-finite loss at epoch {epoch}, batch {lo // config.batch_size}"
                        f" (step {step}); parameter norm {_param_norm(model):.4g}"
                    )
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                step += 1
                curve.append((epoch, step, loss.item()))
            epochs_done = epoch + 1
            due = (
                config.checkpoint_interval
                and epochs_done % config.checkpoint_interval == 0
                and epochs_done < config.epochs
            )
            if out_dir is not None and due:
                ckpt = _make_checkpoint(
                    config, model, model_cfg, opt, step, model_init_seed, epochs_done
                )
                save_checkpoint(out_dir / "checkpoint.ckpt", ckpt)
            log.info(
                "epoch %d/%d mean loss %.5f",
                epochs_done, config.epochs,
                float(np.mean([l for e, _, l in curve if e == epoch])),
            )
    finally:
        torch.set_num_threads(prev_threads)
    model.eval()
    final = _make_checkpoint(
        config, model, model_cfg, opt, step, model_init_seed, config.epochs
    )
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.ckpt", final)
        save_loss_curve(out_dir / "loss_curve.csv", curve)
    return final, curve


def train(
    config: TrainConfig,
    data: PairedDataset | StreamSource,
    model_init_seed: int = 0,
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, list[tuple[int, int, float]]]:
    """Train from scratch; returns the final checkpoint and loss curve.

    ``data`` must match config.data_mode: a PairedDataset for "fixed", a
    StreamSource for "on-the-fly".  With an out_dir, checkpoints, the loss
    curve and (in stream mode) per-epoch mix ledgers are persisted there.
    """
    _check_data_mode(config, data)
    model, model_cfg = build_model(config.kind, model_init_seed)
    opt = torch.optim.Adam(
        model.parameters(), lr=config.effective_lr, betas=config.adam_betas
    )
    return _run_epochs(
        config, data, model, model_cfg, opt, model_init_seed,
        start_epoch=0, start_step=0, out_dir=out_dir,
    )


def resume(
    checkpoint: Checkpoint,
    config: TrainConfig,
    data: PairedDataset | StreamSource,
    out_dir: str | Path | None = None,
) -> tuple[Checkpoint, list[tuple[int, int, float]]]:
    """Continue a run from an epoch-boundary checkpoint.

    Identical to the uninterrupted run because all per-epoch randomness is
    derived from (seed, epoch), not from loop state.  Zero remaining epochs
    is a no-op returning an equal checkpoint.
    """
    if checkpoint.kind != config.kind:
        raise TrainError(
            f"checkpoint kind {checkpoint.kind!r} does not match config "
            f"kind {config.kind!r}"
        )
    _check_data_mode(config, data)
    _, model_init_seed, epochs_done = checkpoint.seed_lineage
    if epochs_done >= config.epochs:
        return checkpoint, []
    model, model_cfg = build_model(
        config.kind, model_init_seed, checkpoint.config["model"]
    )
    from .models.checkpoint import load_state_from_numpy

    load_state_from_numpy(model, checkpoint.tensors)
    opt = torch.optim.Adam(
        model.parameters(), lr=config.effective_lr, betas=config.adam_betas
    )
    _restore_optimizer(opt, checkpoint)
    return _run_epochs(
        config, data, model, model_cfg, opt, model_init_seed,
        start_epoch=epochs_done, start_step=checkpoint.step, out_dir=out_dir,
    )


def _check_data_mode(config: TrainConfig, data):
    if config.data_mode == "fixed" and not isinstance(data, PairedDataset):
        raise TrainError("fixed data mode requires a PairedDataset")
    if config.data_mode == "on-the-fly" and not isinstance(data, StreamSource):
        raise TrainError("on-the-fly data mode requires a StreamSource")


# --- loss curves and enhancers ----------------------------------------------

def save_loss_curve(path: str | Path, curve) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        for epoch, step, loss in curve:
            writer.writerow([epoch, step, f"{loss:.8f}"])


def load_loss_curve(path: str | Path) -> list[tuple[int, int, float]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            (int(r["epoch"]), int(r["step"]), float(r["loss"]))
            for r in csv.DictReader(fh)
        ]


def epoch_mean_losses(curve) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for epoch, _, loss in curve:
        by_epoch.setdefault(epoch, []).append(loss)
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def enhancer_from_checkpoint(
    ckpt: Checkpoint,
    n_steps: int = DEFAULT_N_STEPS,
    corrector_steps: int = DEFAULT_CORRECTOR_STEPS,
    corrector_snr: float = DEFAULT_CORRECTOR_SNR,
    sampler_seed: int = 0,
):
    """(wave -> wave callable, enhancer id) for evaluation."""
    if ckpt.kind == "bsrnn":
        model = bsrnn_from_checkpoint(ckpt)

        def enhance(noisy: np.ndarray) -> np.ndarray:
            x = torch.from_numpy(np.asarray(noisy, dtype=np.float32))
            with torch.no_grad():
                return model(x).numpy().astype(np.float64)

        return enhance, f"bsrnn@{ckpt.step}"
    model, params, cfg = scorenet_from_checkpoint(ckpt)

    def enhance(noisy: np.ndarray) -> np.ndarray:
        return sgmse_enhance_model(
            noisy, model, params, cfg,
            n_steps=n_steps,
            corrector_steps=corrector_steps,
            corrector_snr=corrector_snr,
            seed=sampler_seed,
        )

    return enhance, f"sgmse@{ckpt.step}"


def identity_enhancer():
    """The unprocessed baseline: output = input."""
    return (lambda wave: wave), "unprocessed"
