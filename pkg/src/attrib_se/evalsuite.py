"""Objective enhancement metrics and reporting.

SDR, SI-SDR and STOI are computed natively.  Metrics with licensed or
heavyweight dependencies (PESQ, DNSMOS) arrive through an external-plugin
wire protocol and degrade to explicit "unavailable" rows when no plugin is
registered — values are never fabricated.
"""

from __future__ import annotations

import csv
import json
import logging
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from . import SAMPLE_RATE
from .audioio import read_wav, write_wav
from .mixer import PairedDataset

log = logging.getLogger(__name__)

DB_CAP = 100.0
EPS = np.finfo(np.float64).eps

NATIVE_METRICS = ("sdr", "si_sdr", "stoi")


class MetricError(ValueError):
    """Raised when a metric is undefined for its inputs."""


class PluginError(RuntimeError):
    """Raised when a metric plugin misbehaves at the protocol level."""


def _check_pair(reference: np.ndarray, estimate: np.ndarray):
    if len(reference) != len(estimate):
        raise MetricError(
            f"length mismatch: {len(reference)} vs {len(estimate)}"
        )
    if len(reference) == 0:
        raise MetricError("empty signals")
    if float(np.sum(np.square(reference))) <= EPS:
        raise MetricError("silent reference: metric undefined")


def _capped_ratio_db(signal_power: float, residual_power: float) -> float:
    if residual_power <= 0.0:
        return DB_CAP
    if signal_power <= 0.0:
        return -DB_CAP
    value = 10.0 * np.log10(signal_power / residual_power)
    return float(np.clip(value, -DB_CAP, DB_CAP))


def sdr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Signal-to-distortion ratio, simple energy form, capped ±100 dB."""
    _check_pair(reference, estimate)
    signal = float(np.sum(np.square(reference, dtype=np.float64)))
    residual = float(np.sum(np.square(reference - estimate, dtype=np.float64)))
    return _capped_ratio_db(signal, residual)


def si_sdr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Scale-invariant SDR: project the estimate onto the reference, then
    measure the SDR of the estimate against the scaled reference."""
    _check_pair(reference, estimate)
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    alpha = float(np.dot(estimate, reference) / np.dot(reference, reference))
    target = alpha * reference
    signal = float(np.sum(np.square(target)))
    residual = float(np.sum(np.square(estimate - target)))
    return _capped_ratio_db(signal, residual)


# --- STOI --------------------------------------------------------------------

STOI_RATE = 10_000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_N_BANDS = 15
STOI_LOWEST_CF = 150.0
STOI_SEG_FRAMES = 30  # 384 ms at 10 kHz / hop 128
STOI_DYN_RANGE = 40.0  # silent-frame threshold below peak, dB
STOI_BETA_DB = -15.0  # SDR clipping bound


def _stoi_window() -> np.ndarray:
    # Symmetric Hann without its zero endpoints, as in the reference
    # algorithm: hanning(N + 2) trimmed to N samples.
    n = np.arange(1, STOI_FRAME + 1)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (STOI_FRAME + 1)))


def _frame(x: np.ndarray) -> np.ndarray:
    n_frames = (len(x) - STOI_FRAME) // STOI_HOP + 1
    idx = np.arange(STOI_FRAME)[None, :] + STOI_HOP * np.arange(n_frames)[:, None]
    return x[idx]


def _remove_silent_frames(
    ref: np.ndarray, est: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames more than 40 dB below the loudest reference frame and
    overlap-add the survivors back into time signals."""
    win = _stoi_window()
    ref_frames = _frame(ref) * win
    est_frames = _frame(est) * win
    energy_db = 20.0 * np.log10(np.linalg.norm(ref_frames, axis=1) + EPS)
    keep = energy_db > energy_db.max() - STOI_DYN_RANGE
    ref_frames = ref_frames[keep]
    est_frames = est_frames[keep]
    n = len(ref_frames)
    out_len = STOI_FRAME + STOI_HOP * (n - 1) if n else 0
    ref_out = np.zeros(out_len)
    est_out = np.zeros(out_len)
    for i in range(n):
        sl = slice(i * STOI_HOP, i * STOI_HOP + STOI_FRAME)
        ref_out[sl] += ref_frames[i]
        est_out[sl] += est_frames[i]
    return ref_out, est_out


def third_octave_band_matrix() -> np.ndarray:
    """[n_bands, n_bins] membership matrix for 512-point spectra at 10 kHz."""
    freqs = np.linspace(0.0, STOI_RATE / 2, STOI_NFFT // 2 + 1)
    centers = STOI_LOWEST_CF * 2.0 ** (np.arange(STOI_N_BANDS) / 3.0)
    obm = np.zeros((STOI_N_BANDS, len(freqs)))
    for k, cf in enumerate(centers):
        lo = np.argmin(np.abs(freqs - cf / 2.0 ** (1.0 / 6.0)))
        hi = np.argmin(np.abs(freqs - cf * 2.0 ** (1.0 / 6.0)))
        obm[k, lo:hi] = 1.0
    return obm


def _band_envelope(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    """[n_bands, n_frames] one-third-octave magnitudes of a silenced signal."""
    win = _stoi_window()
    frames = _frame(x) * win
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    power = np.abs(spec) ** 2
    return np.sqrt(power @ obm.T).T


def stoi(reference: np.ndarray, estimate: np.ndarray,
         sample_rate: int = SAMPLE_RATE) -> float:
    """Short-time objective intelligibility, standard (non-extended) form."""
    _check_pair(reference, estimate)
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if sample_rate != STOI_RATE:
        g = np.gcd(STOI_RATE, sample_rate)
        reference = resample_poly(reference, STOI_RATE // g, sample_rate // g)
        estimate = resample_poly(estimate, STOI_RATE // g, sample_rate // g)
    if len(reference) < STOI_FRAME:
        raise MetricError("input too short for STOI framing")
    reference, estimate = _remove_silent_frames(reference, estimate)
    if len(reference) < STOI_FRAME:
        raise MetricError("no speech-active frames for STOI")

    obm = third_octave_band_matrix()
    ref_bands = _band_envelope(reference, obm)
    est_bands = _band_envelope(estimate, obm)
    n_frames = ref_bands.shape[1]
    if n_frames < STOI_SEG_FRAMES:
        raise MetricError(
            f"need >= {STOI_SEG_FRAMES} active frames (384 ms), got {n_frames}"
        )

    clip_gain = 10.0 ** (-STOI_BETA_DB / 20.0)
    correlations = []
    for m in range(STOI_SEG_FRAMES, n_frames + 1):
        x = ref_bands[:, m - STOI_SEG_FRAMES : m]
        y = est_bands[:, m - STOI_SEG_FRAMES : m]
        alpha = np.sqrt(
            np.sum(x**2, axis=1, keepdims=True)
            / (np.sum(y**2, axis=1, keepdims=True) + EPS)
        )
        y = np.minimum(y * alpha, x * (1.0 + clip_gain))
        xc = x - x.mean(axis=1, keepdims=True)
        yc = y - y.mean(axis=1, keepdims=True)
        denom = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + EPS
        correlations.append(np.sum(xc * yc, axis=1) / denom)
    return float(np.mean(correlations))


# --- plugin protocol ---------------------------------------------------------

@dataclass
class PluginHandle:
    name: str
    command: list[str]
    version: str = ""
    concurrent: bool = False


class PluginRegistry:
    def __init__(self):
        self._plugins: dict[str, PluginHandle] = {}

    def register(self, name: str, command: list[str] | str) -> PluginHandle:
        """Register and handshake an executable metric plugin."""
        if isinstance(command, str):
            command = command.split()
        reply = _plugin_session(command, [])
        handle = PluginHandle(
            name=name,
            command=command,
            version=str(reply.get("version", "")),
            concurrent=bool(reply.get("concurrent", False)),
        )
        self._plugins[name] = handle
        return handle

    def get(self, name: str) -> PluginHandle | None:
        return self._plugins.get(name)

    def names(self) -> list[str]:
        return sorted(self._plugins)


def _plugin_session(
    command: list[str], rows: list[dict], timeout: float = 600.0
) -> dict | tuple[dict, list[dict]]:
    """One plugin process: HELLO handshake, then optional scoring rows."""
    payload = "HELLO\n" + "".join(json.dumps(r) + "\n" for r in rows)
    try:
        proc = subprocess.run(
            command, input=payload.encode("utf-8"),
            capture_output=True, timeout=timeout,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise PluginError(f"plugin {command[0]!r} failed to run: {exc}") from exc
    if proc.returncode != 0:
        raise PluginError(
            f"plugin exited {proc.returncode}: {proc.stderr.decode()[:500]}"
        )
    lines = [ln for ln in proc.stdout.decode("utf-8").splitlines() if ln.strip()]
    if not lines:
        raise PluginError("plugin produced no handshake")
    try:
        hello = json.loads(lines[0])
        assert isinstance(hello, dict) and "name" in hello
    except (json.JSONDecodeError, AssertionError) as exc:
        raise PluginError(f"bad handshake line: {lines[0][:200]}") from exc
    if not rows:
        return hello
    return hello, [_parse_plugin_row(ln) for ln in lines[1:]]


def _parse_plugin_row(line: str) -> dict:
    try:
        obj = json.loads(line)
        if not isinstance(obj, dict):
            raise ValueError("row is not an object")
        return obj
    except ValueError:
        return {"error": f"malformed plugin row: {line[:200]}"}


def run_plugin_metric(
    handle: PluginHandle, pairs: list[tuple[str, str, str]]
) -> dict[str, float | str]:
    """Score (utterance_id, ref_wav_path, est_wav_path) triples.

    Returns a value per utterance, or an error string; one bad row never
    poisons its neighbors.
    """
    rows = [
        {"utterance_id": uid, "ref_wav_path": ref, "est_wav_path": est}
        for uid, ref, est in pairs
    ]
    _, replies = _plugin_session(handle.command, rows)
    out: dict[str, float | str] = {}
    for obj in replies:
        uid = obj.get("utterance_id")
        if uid is None:
            log.warning("plugin %s: row without utterance_id: %s", handle.name, obj)
            continue
        if "value" in obj and isinstance(obj["value"], (int, float)):
            out[uid] = float(obj["value"])
        else:
            out[uid] = f"error: {obj.get('error', 'no value')}"
    for uid, _, _ in pairs:
        out.setdefault(uid, "error: no plugin response")
    return out


# --- reports -----------------------------------------------------------------

@dataclass
class MetricReport:
    dataset_id: str
    enhancer_id: str
    rows: dict[str, dict[str, float | str]]
    aggregates: dict[str, float] = field(default_factory=dict)
    metadata: dict[str, dict] = field(default_factory=dict)

    def recompute_aggregates(self) -> dict[str, float]:
        sums: dict[str, list[float]] = {}
        for row in self.rows.values():
            for metric, value in row.items():
                if isinstance(value, float):
                    sums.setdefault(metric, []).append(value)
        return {m: float(np.mean(v)) for m, v in sums.items()}

    def validate(self):
        recomputed = self.recompute_aggregates()
        if set(recomputed) != set(self.aggregates):
            raise MetricError(
                f"aggregate metrics {sorted(self.aggregates)} != "
                f"recomputed {sorted(recomputed)}"
            )
        for metric, mean in recomputed.items():
            if abs(mean - self.aggregates[metric]) > 1e-9:
                raise MetricError(f"aggregate {metric} inconsistent with rows")
        for row in self.rows.values():
            for metric, value in row.items():
                if not isinstance(value, float):
                    continue
                if metric == "stoi" and not 0.0 <= value <= 1.0:
                    raise MetricError(f"stoi value {value} outside [0, 1]")
                if metric in ("sdr", "si_sdr") and abs(value) > DB_CAP:
                    raise MetricError(f"{metric} value {value} beyond ±{DB_CAP}")


def save_report(report: MetricReport, out_dir: str | Path) -> None:
    """CSV of per-utterance rows plus a JSON aggregate block."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "rows.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utterance_id", "metric", "value", "status"])
        for uid in sorted(report.rows):
            for metric in sorted(report.rows[uid]):
                value = report.rows[uid][metric]
                if isinstance(value, float):
                    # repr round-trips exactly, so loading a report and
                    # recomputing aggregates reproduces aggregates.json.
                    writer.writerow([uid, metric, repr(value), "ok"])
                else:
                    writer.writerow([uid, metric, "", value])
    (out_dir / "aggregates.json").write_text(
        json.dumps(
            {
                "dataset_id": report.dataset_id,
                "enhancer_id": report.enhancer_id,
                "aggregates": report.aggregates,
                "metadata": report.metadata,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )


def load_report(out_dir: str | Path) -> MetricReport:
    out_dir = Path(out_dir)
    agg = json.loads((out_dir / "aggregates.json").read_text(encoding="utf-8"))
    rows: dict[str, dict[str, float | str]] = {}
    with (out_dir / "rows.csv").open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            cell = rows.setdefault(rec["utterance_id"], {})
            if rec["status"] == "ok":
                cell[rec["metric"]] = float(rec["value"])
            else:
                cell[rec["metric"]] = rec["status"]
    return MetricReport(
        dataset_id=agg["dataset_id"],
        enhancer_id=agg["enhancer_id"],
        rows=rows,
        aggregates=agg["aggregates"],
        metadata=agg["metadata"],
    )


def evaluate(
    paired: PairedDataset,
    enhancer,
    metrics: tuple[str, ...] = NATIVE_METRICS,
    registry: PluginRegistry | None = None,
    dataset_id: str | None = None,
    enhancer_id: str = "",
) -> MetricReport:
    """Run the enhancer over every pair and score the requested metrics.

    Native metrics compute in-process; other names route to the plugin
    registry or come back "unavailable".  An enhancer failure marks that
    utterance's rows errored and evaluation continues.
    """
    if len(paired.pairs) == 0:
        raise MetricError("empty paired dataset")
    root = Path(paired.root)
    native = [m for m in metrics if m in NATIVE_METRICS]
    external = [m for m in metrics if m not in NATIVE_METRICS]

    rows: dict[str, dict[str, float | str]] = {}
    estimates: dict[str, np.ndarray] = {}
    refs: dict[str, str] = {}
    for noisy_rel, clean_rel, spec in paired.pairs:
        uid = spec.speech_id
        refs[uid] = str(root / clean_rel)
        row: dict[str, float | str] = {}
        try:
            noisy, _ = read_wav(root / noisy_rel)
            clean, _ = read_wav(root / clean_rel)
            est = np.asarray(enhancer(noisy), dtype=np.float64)
            estimates[uid] = est
            for metric in native:
                try:
                    fn = {"sdr": sdr, "si_sdr": si_sdr, "stoi": stoi}[metric]
                    row[metric] = float(fn(clean, est))
                except MetricError as exc:
                    row[metric] = f"error: {exc}"
        except Exception as exc:  # noqa: BLE001 - isolate per-utterance failures
            log.warning("enhancer failed on %s: %s", uid, exc)
            for metric in native:
                row[metric] = f"error: enhancer failed: {exc}"
        rows[uid] = row

    metadata = {m: {"source": "native", "version": "1"} for m in native}
    if external:
        with tempfile.TemporaryDirectory(prefix="attrib_se_eval_") as tmp:
            est_paths = []
            for uid, est in estimates.items():
                p = Path(tmp) / f"{uid}.wav"
                write_wav(p, np.clip(est, -1.0, 1.0), SAMPLE_RATE)
                est_paths.append((uid, refs[uid], str(p)))
            for metric in external:
                handle = registry.get(metric) if registry else None
                if handle is None:
                    for uid in rows:
                        rows[uid][metric] = "unavailable"
                    metadata[metric] = {"source": "plugin", "version": "absent"}
                    continue
                metadata[metric] = {"source": "plugin", "version": handle.version}
                try:
                    values = run_plugin_metric(handle, est_paths)
                except PluginError as exc:
                    log.warning("plugin %s failed: %s", metric, exc)
                    values = {uid: f"error: {exc}" for uid, _, _ in est_paths}
                for uid in rows:
                    rows[uid][metric] = values.get(uid, "error: not scored")

    report = MetricReport(
        dataset_id=dataset_id or paired.speech_manifest_id,
        enhancer_id=enhancer_id,
        rows=rows,
        metadata=metadata,
    )
    report.aggregates = report.recompute_aggregates()
    report.validate()
    return report
