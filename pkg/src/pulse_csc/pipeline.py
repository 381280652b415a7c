"""End-to-end pipeline: dataset files, streaming denoising, evaluation, reports.

Datasets are JSON-lines files, one record per segment, carrying the clean
reference, the corrupted version, optionally the denoised version, and the
artifact provenance. Every CLI run writes a manifest (command, resolved
config, seed, input hashes, headline metrics) sufficient to replay the run.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import evalkit
from .errors import (
    ChecksumError,
    ConfigError,
    EmptyEvaluationError,
    FsMismatchError,
    SchemaError,
    UndefinedTestError,
)
from .evalkit import (
    BlandAltman,
    bland_altman,
    detect_peaks,
    duration_bin_label,
    hr_from_peaks,
    snr_db,
    wilcoxon_signed_rank,
)
from .model import UnfoldedModel, forward, init_ista, init_random, load_checkpoint, save_checkpoint
from .signals import (
    BandPassSpec,
    PreprocessConfig,
    Signal,
    design_cheby2_bandpass,
    filter_signal,
    normalize_01,
    resample,
)
from .synth import ArtifactSpec, SegmentRecord, make_dataset
from .train import TrainConfig, split_by_subject, train, history_to_csv
from .csc import Dictionary

MANIFEST_VERSION = 1
_WINDOW_BATCH = 128


# -- dataset records -----------------------------------------------------------


@dataclass
class DatasetRecord:
    """One serialized segment; arrays are float64, fs in Hz."""

    subject_id: str
    fs: float
    samples: np.ndarray
    samples_noisy: np.ndarray | None = None
    samples_denoised: np.ndarray | None = None
    artifact: ArtifactSpec | None = None
    activity: str | None = None
    ground_truth_hr: float | None = None


def from_segment_record(seg: SegmentRecord) -> DatasetRecord:
    return DatasetRecord(
        subject_id=seg.subject_id,
        fs=seg.clean.fs,
        samples=seg.clean.samples,
        samples_noisy=seg.noisy.samples,
        artifact=seg.artifact,
        activity=seg.activity,
        ground_truth_hr=seg.ground_truth_hr,
    )


def _artifact_to_json(a: ArtifactSpec) -> dict:
    return {
        "kind": a.kind,
        "amplitude": a.amplitude,
        "spectral_slope_db_per_hz": a.spectral_slope_db_per_hz,
        "duration_s": a.duration_s,
        "start_s": a.start_s,
    }


def _artifact_from_json(d: dict) -> ArtifactSpec:
    try:
        return ArtifactSpec(
            kind=d["kind"],
            amplitude=float(d["amplitude"]),
            spectral_slope_db_per_hz=float(d["spectral_slope_db_per_hz"]),
            duration_s=float(d["duration_s"]),
            start_s=float(d["start_s"]),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed artifact object: {exc}") from exc


def write_dataset(records, path) -> None:
    with open(path, "w") as f:
        for rec in records:
            obj = {
                "subject_id": rec.subject_id,
                "fs": rec.fs,
                "samples": np.asarray(rec.samples, dtype=np.float64).tolist(),
            }
            if rec.samples_noisy is not None:
                obj["samples_noisy"] = np.asarray(rec.samples_noisy).tolist()
            if rec.samples_denoised is not None:
                obj["samples_denoised"] = np.asarray(rec.samples_denoised).tolist()
            if rec.artifact is not None:
                obj["artifact"] = _artifact_to_json(rec.artifact)
            if rec.activity is not None:
                obj["activity"] = rec.activity
            if rec.ground_truth_hr is not None:
                obj["ground_truth_hr"] = rec.ground_truth_hr
            f.write(json.dumps(obj) + "\n")


def _require(obj: dict, key: str, line: int):
    if key not in obj:
        raise SchemaError(f"record on line {line} is missing required key {key!r}")
    return obj[key]


def _as_samples(value, line: int, key: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {line}: {key} is not a numeric array") from exc
    if arr.ndim != 1 or arr.size == 0:
        raise SchemaError(f"line {line}: {key} must be a non-empty 1-D array")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"line {line}: {key} contains non-finite values")
    return arr


def read_dataset(path) -> list:
    records = []
    with open(path) as f:
        for i, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {i}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise SchemaError(f"line {i}: record must be a JSON object")
            sid = _require(obj, "subject_id", i)
            if not isinstance(sid, str) or not sid:
                raise SchemaError(f"line {i}: subject_id must be a non-empty string")
            fs = _require(obj, "fs", i)
            if not isinstance(fs, (int, float)) or not fs > 0:
                raise SchemaError(f"line {i}: fs must be a positive number")
            samples = _as_samples(_require(obj, "samples", i), i, "samples")
            rec = DatasetRecord(subject_id=sid, fs=float(fs), samples=samples)
            if "samples_noisy" in obj:
                rec.samples_noisy = _as_samples(obj["samples_noisy"], i, "samples_noisy")
            if "samples_denoised" in obj:
                rec.samples_denoised = _as_samples(
                    obj["samples_denoised"], i, "samples_denoised"
                )
            if "artifact" in obj and obj["artifact"] is not None:
                rec.artifact = _artifact_from_json(obj["artifact"])
            if "activity" in obj and obj["activity"] is not None:
                rec.activity = str(obj["activity"])
            if "ground_truth_hr" in obj and obj["ground_truth_hr"] is not None:
                rec.ground_truth_hr = float(obj["ground_truth_hr"])
            records.append(rec)
    if not records:
        raise SchemaError(f"dataset {path} contains no records")
    return records


def records_to_arrays(records) -> tuple[np.ndarray, np.ndarray]:
    """Stack (noisy, clean) training pairs; lengths must agree."""
    lengths = {len(r.samples) for r in records}
    if len(lengths) != 1:
        raise SchemaError(f"records have differing lengths {sorted(lengths)}")
    for r in records:
        if r.samples_noisy is None:
            raise SchemaError(f"record for {r.subject_id} lacks samples_noisy")
        if len(r.samples_noisy) != len(r.samples):
            raise SchemaError(f"record for {r.subject_id} has mismatched pair lengths")
    noisy = np.stack([r.samples_noisy for r in records])
    clean = np.stack([r.samples for r in records])
    return noisy, clean


# -- streaming denoiser --------------------------------------------------------


@dataclass(frozen=True)
class DenoiseResult:
    signal: Signal
    padded: bool
    n_windows: int


def _normalize_window(seg: np.ndarray) -> tuple[np.ndarray, float, float]:
    lo = float(seg.min())
    hi = float(seg.max())
    if hi == lo:
        return np.full_like(seg, 0.5), lo, lo
    return (seg - lo) / (hi - lo), lo, hi


def _denoise_batch(model: UnfoldedModel, segs: np.ndarray) -> np.ndarray:
    """Normalize each row to [0,1], run the model, undo the affine map."""
    lows = segs.min(axis=1, keepdims=True)
    highs = segs.max(axis=1, keepdims=True)
    scale = highs - lows
    flat = scale[:, 0] == 0.0
    safe = np.where(scale == 0.0, 1.0, scale)
    normed = (segs - lows) / safe
    normed[flat] = 0.5
    out = forward(model, normed).y_hat
    return out * np.where(scale == 0.0, 0.0, scale) + np.where(
        flat[:, None], segs[:, :1], lows
    )


def denoise_stream(
    model: UnfoldedModel,
    x: Signal,
    window_s: float = 10.0,
    step_s: float = 2.5,
    threads: int = 1,
) -> DenoiseResult:
    """Denoise a stream with overlapped windows averaged where they overlap.

    Windows start every step_s; a final window is pinned to the end so every
    sample is covered. Each window is min-max normalized, denoised, mapped
    back through its own affine record, and accumulated; overlaps take the
    arithmetic mean. Inputs shorter than one window are reflect-padded on the
    right and flagged. Accumulation happens in window order regardless of
    thread count, so results do not depend on threads.
    """
    if window_s <= 0 or step_s <= 0:
        raise ConfigError("window_s and step_s must be positive")
    samples = x.samples
    n = len(samples)
    win_n = int(round(window_s * x.fs))
    step_n = max(1, int(round(step_s * x.fs)))
    if win_n < max(model.enc_len, model.kernel_len):
        raise ConfigError(
            f"window of {win_n} samples is shorter than the model's filter support"
        )
    padded = n < win_n
    if padded:
        if n < 2:
            raise ConfigError("signal too short to reflect-pad to one window")
        samples = np.pad(samples, (0, win_n - n), mode="reflect")
    total = len(samples)

    starts = list(range(0, total - win_n + 1, step_n))
    if starts[-1] != total - win_n:
        starts.append(total - win_n)

    segs = np.stack([samples[s : s + win_n] for s in starts])
    outs = np.empty_like(segs)
    chunks = [
        slice(lo, min(lo + _WINDOW_BATCH, len(starts)))
        for lo in range(0, len(starts), _WINDOW_BATCH)
    ]
    if threads > 1 and len(chunks) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(_denoise_batch, model, segs[c]): c for c in chunks}
            for fut in concurrent.futures.as_completed(futures):
                outs[futures[fut]] = fut.result()
    else:
        for c in chunks:
            outs[c] = _denoise_batch(model, segs[c])

    acc = np.zeros(total)
    cnt = np.zeros(total)
    for s, row in zip(starts, outs):
        acc[s : s + win_n] += row
        cnt[s : s + win_n] += 1.0
    merged = acc / cnt
    return DenoiseResult(
        signal=Signal(merged[:n], x.fs), padded=padded, n_windows=len(starts)
    )


# -- evaluation ----------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    window_mode: str = "segment"  # "segment" (one window) or "sliding"
    window_s: float = 8.0
    step_s: float = 2.0
    center_snr: bool = True  # remove each signal's mean before the energy ratio

    def __post_init__(self):
        if self.window_mode not in ("segment", "sliding"):
            raise ConfigError(
                f"window_mode must be 'segment' or 'sliding', got {self.window_mode!r}"
            )
        if self.window_s <= 0 or self.step_s <= 0:
            raise ConfigError("window_s and step_s must be positive")


def _snr(cfg: EvalConfig, ref: np.ndarray, est: np.ndarray) -> float:
    if cfg.center_snr:
        ref = ref - ref.mean()
        est = est - est.mean()
    return snr_db(ref, est)


def _hr_series(cfg: EvalConfig, samples: np.ndarray, fs: float):
    peaks = detect_peaks(Signal(samples, fs))
    window = None if cfg.window_mode == "segment" else cfg.window_s
    return hr_from_peaks(peaks, fs, len(samples), window_s=window, step_s=cfg.step_s)


def _mean_std(values) -> dict:
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if arr.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(np.mean(arr)), "std": std, "n": int(arr.size)}


def _wilcoxon_or_note(a, b, alternative) -> dict:
    try:
        res = wilcoxon_signed_rank(np.asarray(a), np.asarray(b), alternative)
        return {
            "p_value": res.p_value,
            "w_plus": res.w_plus,
            "n": res.n_effective,
            "method": res.method,
            "stars": res.stars,
        }
    except (UndefinedTestError, ValueError) as exc:
        return {"error": str(exc)}


@dataclass
class SegmentMetrics:
    subject_id: str
    index: int
    artifact_kind: str | None
    artifact_duration_s: float | None
    artifact_amplitude: float | None
    snr_before_db: float
    snr_after_db: float
    hr_ref_bpm: float
    hr_before_bpm: float
    hr_after_bpm: float


@dataclass
class EvalReport:
    metrics: dict
    segments: list  # SegmentMetrics
    bland_altman_after: BlandAltman | None


def evaluate_records(records, cfg: EvalConfig | None = None) -> EvalReport:
    """Score denoising quality segment by segment and aggregate per subject.

    Records need samples (clean reference), samples_noisy and
    samples_denoised. Heart-rate MAE pools aligned reliable windows per
    subject; SNR statistics run over segments. Paired tests compare
    per-subject means before vs after denoising, in both directions.
    """
    cfg = cfg or EvalConfig()
    for rec in records:
        if rec.samples_noisy is None or rec.samples_denoised is None:
            raise SchemaError(
                f"record for {rec.subject_id} lacks noisy/denoised samples"
            )

    segments = []
    subject_pairs_before: dict = {}
    subject_pairs_after: dict = {}
    subject_snr_before: dict = {}
    subject_snr_after: dict = {}
    unreliable = {"ref": 0, "before": 0, "after": 0}
    ba_ref, ba_after = [], []
    seg_counter: dict = {}

    for rec in records:
        fs = rec.fs
        idx = seg_counter.get(rec.subject_id, 0)
        seg_counter[rec.subject_id] = idx + 1
        snr_b = _snr(cfg, rec.samples, rec.samples_noisy)
        snr_a = _snr(cfg, rec.samples, rec.samples_denoised)
        ref_s = _hr_series(cfg, rec.samples, fs)
        bef_s = _hr_series(cfg, rec.samples_noisy, fs)
        aft_s = _hr_series(cfg, rec.samples_denoised, fs)
        unreliable["ref"] += int(np.sum(~ref_s.reliable))
        unreliable["before"] += int(np.sum(~bef_s.reliable))
        unreliable["after"] += int(np.sum(~aft_s.reliable))

        for w in range(len(ref_s.starts_s)):
            if ref_s.reliable[w] and bef_s.reliable[w]:
                subject_pairs_before.setdefault(rec.subject_id, []).append(
                    (ref_s.hr_bpm[w], bef_s.hr_bpm[w])
                )
            if ref_s.reliable[w] and aft_s.reliable[w]:
                subject_pairs_after.setdefault(rec.subject_id, []).append(
                    (ref_s.hr_bpm[w], aft_s.hr_bpm[w])
                )
                ba_ref.append(ref_s.hr_bpm[w])
                ba_after.append(aft_s.hr_bpm[w])
        subject_snr_before.setdefault(rec.subject_id, []).append(snr_b)
        subject_snr_after.setdefault(rec.subject_id, []).append(snr_a)

        def first_hr(series):
            good = series.hr_bpm[series.reliable]
            return float(good[0]) if good.size else float("nan")

        segments.append(
            SegmentMetrics(
                subject_id=rec.subject_id,
                index=idx,
                artifact_kind=rec.artifact.kind if rec.artifact else None,
                artifact_duration_s=rec.artifact.duration_s if rec.artifact else None,
                artifact_amplitude=rec.artifact.amplitude if rec.artifact else None,
                snr_before_db=snr_b,
                snr_after_db=snr_a,
                hr_ref_bpm=first_hr(ref_s),
                hr_before_bpm=first_hr(bef_s),
                hr_after_bpm=first_hr(aft_s),
            )
        )

    subjects = sorted(subject_snr_before)

    def subject_mae(pairs_by_subject):
        out = {}
        for sid, pairs in pairs_by_subject.items():
            arr = np.asarray(pairs)
            out[sid] = float(np.mean(np.abs(arr[:, 0] - arr[:, 1])))
        return out

    mae_before = subject_mae(subject_pairs_before)
    mae_after = subject_mae(subject_pairs_after)
    if not mae_after:
        raise EmptyEvaluationError("no subject has reliable aligned heart-rate pairs")

    snr_b_all = [s.snr_before_db for s in segments]
    snr_a_all = [s.snr_after_db for s in segments]

    # paired per-subject comparisons, both directions
    common_mae = sorted(set(mae_before) & set(mae_after))
    common_snr = subjects
    mean_snr_b = [float(np.mean(subject_snr_before[s])) for s in common_snr]
    mean_snr_a = [float(np.mean(subject_snr_after[s])) for s in common_snr]
    wilcoxon = {
        "snr_improved": _wilcoxon_or_note(mean_snr_b, mean_snr_a, "a_less"),
        "snr_worsened": _wilcoxon_or_note(mean_snr_b, mean_snr_a, "b_less"),
        "mae_improved": _wilcoxon_or_note(
            [mae_after[s] for s in common_mae], [mae_before[s] for s in common_mae],
            "a_less",
        ),
        "mae_worsened": _wilcoxon_or_note(
            [mae_after[s] for s in common_mae], [mae_before[s] for s in common_mae],
            "b_less",
        ),
    }

    try:
        ba = bland_altman(np.asarray(ba_ref), np.asarray(ba_after))
        ba_json = {
            "mean_diff": ba.mean_diff,
            "loa_low": ba.loa_low,
            "loa_high": ba.loa_high,
            "slope": ba.slope,
            "intercept": ba.intercept,
            "n": ba.n,
        }
    except Exception as exc:  # fewer than 3 pairs
        ba = None
        ba_json = {"error": str(exc)}

    def group_means(key_fn):
        groups: dict = {}
        for seg in segments:
            key = key_fn(seg)
            if key is None:
                continue
            groups.setdefault(key, []).append(seg)
        out = {}
        for key in sorted(groups):
            segs = groups[key]
            err_after = [
                abs(s.hr_after_bpm - s.hr_ref_bpm)
                for s in segs
                if np.isfinite(s.hr_after_bpm) and np.isfinite(s.hr_ref_bpm)
            ]
            out[key] = {
                "n": len(segs),
                "snr_before_db": _mean_std(s.snr_before_db for s in segs),
                "snr_after_db": _mean_std(s.snr_after_db for s in segs),
                "abs_hr_error_after_bpm": _mean_std(err_after),
            }
        return out

    by_kind = group_means(lambda s: s.artifact_kind)
    by_duration = group_means(
        lambda s: duration_bin_label(s.artifact_duration_s)
        if s.artifact_duration_s is not None
        else None
    )

    mae_b_stats = _mean_std(mae_before.values())
    mae_a_stats = _mean_std(mae_after.values())
    metrics = {
        "n_segments": len(segments),
        "n_subjects": len(subjects),
        "window_mode": cfg.window_mode,
        "snr_before_db": _mean_std(snr_b_all),
        "snr_after_db": _mean_std(snr_a_all),
        "snr_gain_db": float(np.mean(snr_a_all) - np.mean(snr_b_all)),
        "mae_hr_before_bpm": mae_b_stats,
        "mae_hr_after_bpm": mae_a_stats,
        "mae_ratio": (
            mae_a_stats["mean"] / mae_b_stats["mean"]
            if mae_b_stats["n"] and mae_b_stats["mean"] > 0
            else float("nan")
        ),
        "unreliable_windows": unreliable,
        "wilcoxon": wilcoxon,
        "bland_altman_after": ba_json,
        "by_artifact_kind": by_kind,
        "by_artifact_duration": by_duration,
    }
    return EvalReport(metrics=metrics, segments=segments, bland_altman_after=ba)


SEGMENTS_CSV_COLUMNS = [
    "subject_id",
    "segment",
    "artifact_kind",
    "artifact_duration_s",
    "artifact_amplitude",
    "duration_bin",
    "snr_before_db",
    "snr_after_db",
    "hr_ref_bpm",
    "hr_before_bpm",
    "hr_after_bpm",
]


def write_segments_csv(segments, path) -> None:
    # csv.writer quotes the duration-bin labels, which contain commas
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SEGMENTS_CSV_COLUMNS)
        for s in segments:
            dur_bin = (
                duration_bin_label(s.artifact_duration_s)
                if s.artifact_duration_s is not None
                else ""
            )
            writer.writerow(
                [
                    s.subject_id,
                    str(s.index),
                    s.artifact_kind or "",
                    repr(s.artifact_duration_s)
                    if s.artifact_duration_s is not None
                    else "",
                    repr(s.artifact_amplitude)
                    if s.artifact_amplitude is not None
                    else "",
                    dur_bin,
                    repr(s.snr_before_db),
                    repr(s.snr_after_db),
                    repr(s.hr_ref_bpm),
                    repr(s.hr_before_bpm),
                    repr(s.hr_after_bpm),
                ]
            )


def read_segments_csv(path) -> list:
    with open(path) as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != SEGMENTS_CSV_COLUMNS:
            raise SchemaError(
                f"unexpected segments CSV columns {reader.fieldnames}"
            )
        rows = []
        for raw in reader:
            row = dict(raw)
            for key in (
                "artifact_duration_s",
                "artifact_amplitude",
                "snr_before_db",
                "snr_after_db",
                "hr_ref_bpm",
                "hr_before_bpm",
                "hr_after_bpm",
            ):
                row[key] = float(raw[key]) if raw[key] else float("nan")
            rows.append(row)
    if not rows:
        raise SchemaError(f"segments file {path} is empty")
    return rows


# -- manifests -----------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def build_manifest(command: str, config: dict, inputs: list, metrics: dict) -> dict:
    return {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": [
            {"path": str(p), "sha256": sha256_file(p)} for p in inputs
        ],
        "metrics": metrics,
    }


def write_manifest(manifest: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path) -> dict:
    with open(path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"manifest {path}: invalid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "command" not in manifest:
        raise SchemaError(f"manifest {path} lacks a command")
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise SchemaError(
            f"manifest version {manifest.get('manifest_version')} unsupported"
        )
    return manifest


# keys in each command's config that point at outputs, for replay redirection
_OUTPUT_KEYS = {
    "synth": ["out"],
    "train": ["out", "history_out"],
    "denoise": ["out"],
    "eval": ["out_dir"],
    "report": ["out_dir"],
}


def run_from_manifest(manifest_path, out_dir) -> dict:
    """Re-execute a recorded run with outputs redirected to out_dir.

    Input files are re-hashed first; any drift from the recorded digests is an
    integrity error. Returns the replayed run's metrics.
    """
    manifest = read_manifest(manifest_path)
    command = manifest["command"]
    if command not in _OUTPUT_KEYS:
        raise SchemaError(f"manifest command {command!r} is not replayable")
    for entry in manifest.get("inputs", []):
        digest = sha256_file(entry["path"])
        if digest != entry["sha256"]:
            raise ChecksumError(
                f"input {entry['path']} has changed since the recorded run"
            )
    os.makedirs(out_dir, exist_ok=True)
    config = dict(manifest["config"])
    for key in _OUTPUT_KEYS[command]:
        if config.get(key):
            config[key] = os.path.join(out_dir, os.path.basename(config[key]))
    return run_command(command, config)


# -- command runners -------------------------------------------------------------


def _band_from_config(cfg: dict) -> BandPassSpec:
    return BandPassSpec(
        order=int(cfg.get("filter_order", 4)),
        low_hz=float(cfg.get("band_low_hz", 0.5)),
        high_hz=float(cfg.get("band_high_hz", 18.0)),
        stop_atten_db=float(cfg.get("stop_atten_db", 40.0)),
    )


def run_synth(cfg: dict) -> dict:
    out = cfg.get("out")
    if not out:
        raise ConfigError("synth needs an output path")
    pre = PreprocessConfig(
        band=_band_from_config(cfg),
        zero_phase=bool(cfg.get("zero_phase", False)),
        target_fs=float(cfg.get("fs", 125.0)),
    )
    records = make_dataset(
        n_subjects=int(cfg.get("n_subjects", 8)),
        segments_per_subject=int(cfg.get("segments_per_subject", 10)),
        seed=int(cfg.get("seed", 0)),
        fs=float(cfg.get("fs", 125.0)),
        duration_s=float(cfg.get("duration_s", 10.0)),
        preprocess_cfg=pre,
    )
    write_dataset([from_segment_record(r) for r in records], out)
    manifest = build_manifest("synth", cfg, inputs=[], metrics={
        "n_records": len(records),
        "n_subjects": int(cfg.get("n_subjects", 8)),
    })
    write_manifest(manifest, str(out) + ".manifest.json")
    return manifest["metrics"]


def run_train(cfg: dict) -> dict:
    data_path = cfg.get("data")
    out = cfg.get("out")
    if not data_path or not out:
        raise ConfigError("train needs data and out paths")
    records = read_dataset(data_path)
    tr, va, _ = split_by_subject(
        records,
        fractions=tuple(cfg.get("split_fractions", (0.70, 0.15, 0.15))),
        seed=int(cfg.get("split_seed", 0)),
    )
    if not tr or not va:
        raise ConfigError("subject split produced an empty train or val set")
    train_pair = records_to_arrays(tr)
    val_pair = records_to_arrays(va)

    m = int(cfg.get("n_kernels", 32))
    l = int(cfg.get("kernel_len", 50))
    k = int(cfg.get("n_folds", 10))
    lam = float(cfg.get("lam", 0.05))
    n = train_pair[0].shape[1]
    init = cfg.get("init", "ista")
    if init == "ista":
        rng = np.random.default_rng(int(cfg.get("seed", 0)))
        model, _ = init_ista(Dictionary.random(m, l, rng), lam, n, k)
    elif init == "random":
        model = init_random(m, l, k, seed=int(cfg.get("seed", 0)), n=n)
    else:
        raise ConfigError(f"unknown init {init!r}")

    tc = TrainConfig(
        lam=lam,
        l2_w=float(cfg.get("l2_w", 1e-3)),
        lr=float(cfg.get("lr", 1e-4)),
        batch_size=int(cfg.get("batch_size", 256)),
        patience=int(cfg.get("patience", 10)),
        max_epochs=int(cfg.get("max_epochs", 100)),
        seed=int(cfg.get("seed", 0)),
        smooth_beta=cfg.get("smooth_beta"),
    )
    result = train(model, train_pair, val_pair, tc)
    save_checkpoint(result.model, out)
    history_out = cfg.get("history_out") or (str(out) + ".history.csv")
    cfg = dict(cfg)
    cfg["history_out"] = history_out
    history_to_csv(result.history, history_out)
    metrics = {
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "epochs_run": len(result.history),
        "n_train_segments": train_pair[0].shape[0],
        "n_val_segments": val_pair[0].shape[0],
    }
    manifest = build_manifest("train", cfg, inputs=[data_path], metrics=metrics)
    write_manifest(manifest, str(out) + ".manifest.json")
    return metrics


def run_denoise(cfg: dict) -> dict:
    model_path = cfg.get("model")
    data_path = cfg.get("data")
    out = cfg.get("out")
    if not model_path or not data_path or not out:
        raise ConfigError("denoise needs model, data and out paths")
    model = load_checkpoint(model_path)
    records = read_dataset(data_path)
    target_fs = float(cfg.get("fs", 125.0))
    do_preprocess = bool(cfg.get("preprocess", False))
    do_resample = bool(cfg.get("resample", False))
    window_s = float(cfg.get("window_s", 10.0))
    step_s = float(cfg.get("step_s", 2.5))
    threads = int(cfg.get("threads", 1))

    cascade = None
    if do_preprocess:
        cascade = design_cheby2_bandpass(_band_from_config(cfg), target_fs)
    n_padded = 0
    for rec in records:
        src = rec.samples_noisy if rec.samples_noisy is not None else rec.samples
        sig = Signal(src, rec.fs)
        if abs(rec.fs - target_fs) > 1e-9 * target_fs:
            if not do_resample:
                raise FsMismatchError(
                    f"record for {rec.subject_id} has fs={rec.fs}, expected "
                    f"{target_fs}; pass resample=true to convert"
                )
            sig = resample(sig, target_fs)
        if do_preprocess:
            sig = filter_signal(sig, cascade, zero_phase=bool(cfg.get("zero_phase", False)))
        res = denoise_stream(
            model, sig, window_s=window_s, step_s=step_s, threads=threads
        )
        n_padded += int(res.padded)
        rec.samples_denoised = res.signal.samples
        if do_resample or do_preprocess:
            # output lives in the conditioned domain at the model rate
            rec.fs = target_fs
            if do_resample and rec.samples_noisy is not None:
                rec.samples_noisy = sig.samples
    write_dataset(records, out)
    metrics = {"n_records": len(records), "n_padded": n_padded}
    manifest = build_manifest(
        "denoise", cfg, inputs=[model_path, data_path], metrics=metrics
    )
    write_manifest(manifest, str(out) + ".manifest.json")
    return metrics


def run_eval(cfg: dict) -> dict:
    data_path = cfg.get("data")
    out_dir = cfg.get("out_dir")
    if not data_path or not out_dir:
        raise ConfigError("eval needs data and out_dir")
    os.makedirs(out_dir, exist_ok=True)
    records = read_dataset(data_path)
    ec = EvalConfig(
        window_mode=cfg.get("window_mode", "segment"),
        window_s=float(cfg.get("window_s", 8.0)),
        step_s=float(cfg.get("step_s", 2.0)),
        center_snr=bool(cfg.get("center_snr", True)),
    )
    report = evaluate_records(records, ec)
    metrics_path = os.path.join(out_dir, "metrics.json")
    with open(metrics_path, "w") as f:
        json.dump(report.metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    write_segments_csv(report.segments, os.path.join(out_dir, "segments.csv"))
    manifest = build_manifest("eval", cfg, inputs=[data_path], metrics=report.metrics)
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return report.metrics


def _box_stats(values: np.ndarray) -> dict:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    in_lo = values[values >= q1 - 1.5 * iqr]
    in_hi = values[values <= q3 + 1.5 * iqr]
    return {
        "n": int(values.size),
        "whisker_lo": float(in_lo.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "whisker_hi": float(in_hi.max()),
        "mean": float(values.mean()),
    }


def _write_box_csv(path, groups: dict) -> None:
    cols = ["grouping", "group", "n", "whisker_lo", "q1", "median", "q3", "whisker_hi", "mean"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for (grouping, group), stats in groups.items():
            writer.writerow(
                [
                    grouping,
                    group,
                    stats["n"],
                    repr(stats["whisker_lo"]),
                    repr(stats["q1"]),
                    repr(stats["median"]),
                    repr(stats["q3"]),
                    repr(stats["whisker_hi"]),
                    repr(stats["mean"]),
                ]
            )


def run_report(cfg: dict) -> dict:
    segments_path = cfg.get("segments")
    out_dir = cfg.get("out_dir")
    if not segments_path or not out_dir:
        raise ConfigError("report needs segments and out_dir")
    os.makedirs(out_dir, exist_ok=True)
    rows = read_segments_csv(segments_path)

    def collect(metric_fn, key_fn):
        groups: dict = {}
        for row in rows:
            key = key_fn(row)
            value = metric_fn(row)
            if key and np.isfinite(value):
                groups.setdefault(key, []).append(value)
        return {k: _box_stats(np.asarray(v)) for k, v in sorted(groups.items())}

    snr_groups = {}
    mae_groups = {}
    for grouping, key_fn in (
        ("artifact_kind", lambda r: r["artifact_kind"]),
        ("duration_bin", lambda r: r["duration_bin"]),
    ):
        for key, stats in collect(lambda r: r["snr_after_db"], key_fn).items():
            snr_groups[(grouping, key)] = stats
        for key, stats in collect(
            lambda r: abs(r["hr_after_bpm"] - r["hr_ref_bpm"]), key_fn
        ).items():
            mae_groups[(grouping, key)] = stats
    _write_box_csv(os.path.join(out_dir, "boxplot_snr.csv"), snr_groups)
    _write_box_csv(os.path.join(out_dir, "boxplot_mae_hr.csv"), mae_groups)

    ref = np.asarray([r["hr_ref_bpm"] for r in rows])
    est = np.asarray([r["hr_after_bpm"] for r in rows])
    ba = bland_altman(ref, est)
    with open(os.path.join(out_dir, "bland_altman_points.csv"), "w") as f:
        f.write("mean_bpm,diff_bpm\n")
        for m_, d_ in zip(ba.means, ba.diffs):
            f.write(f"{m_!r},{d_!r}\n")
    with open(os.path.join(out_dir, "bland_altman_lines.csv"), "w") as f:
        f.write("name,value\n")
        for name, value in (
            ("mean_diff", ba.mean_diff),
            ("loa_low", ba.loa_low),
            ("loa_high", ba.loa_high),
            ("slope", ba.slope),
            ("intercept", ba.intercept),
        ):
            f.write(f"{name},{value!r}\n")

    metrics = {
        "n_rows": len(rows),
        "bland_altman": {
            "mean_diff": ba.mean_diff,
            "loa_low": ba.loa_low,
            "loa_high": ba.loa_high,
            "slope": ba.slope,
            "intercept": ba.intercept,
            "n": ba.n,
        },
    }
    manifest = build_manifest("report", cfg, inputs=[segments_path], metrics=metrics)
    write_manifest(manifest, os.path.join(out_dir, "report_manifest.json"))
    return metrics


_RUNNERS = {
    "synth": run_synth,
    "train": run_train,
    "denoise": run_denoise,
    "eval": run_eval,
    "report": run_report,
}


def run_command(command: str, config: dict) -> dict:
    if command not in _RUNNERS:
        raise ConfigError(f"unknown command {command!r}")
    return _RUNNERS[command](config)
