"""Synthetic quasi-periodic pulse signals and motion-artifact corruption.

Clean segments are sums of per-beat Gaussian bumps (a systolic peak plus a
smaller, wider diastolic shoulder) on a slowly wandering beat interval.
Artifacts are white noise shaped by a frequency-sampled FIR whose in-band
gain tilts log-linearly with frequency, windowed to a random support with
raised-cosine tapers and scaled relative to the clean segment's RMS. Four
artifact kinds differ only in their amplitude/slope sampling distributions.

Corpus assembly corrupts each clean segment with one artifact, band-passes
and normalizes both versions identically, and tags every record with the
generating parameters so evaluation can group by kind and duration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, InvalidSpecError
from .signals import (
    BiquadCascade,
    PreprocessConfig,
    Signal,
    design_cheby2_bandpass,
    filter_signal,
)

ARTIFACT_KINDS = (
    "device_displacement",
    "forearm_motion",
    "hand_motion",
    "poor_contact",
)

SEGMENT_DURATION_S = 10.0
MIN_ARTIFACT_S = 1.0
TAPER_S = 0.1


@dataclass(frozen=True)
class ArtifactSpec:
    """A single rendered artifact's generating parameters."""

    kind: str
    amplitude: float  # target RMS relative to the clean segment RMS
    spectral_slope_db_per_hz: float
    duration_s: float
    start_s: float

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise InvalidSpecError(f"unknown artifact kind {self.kind!r}")
        if self.amplitude < 0:
            raise InvalidSpecError(f"amplitude must be >= 0, got {self.amplitude}")
        if not (
            MIN_ARTIFACT_S - 1e-9 <= self.duration_s <= SEGMENT_DURATION_S + 1e-9
        ):
            raise InvalidSpecError(
                f"duration_s must lie in [{MIN_ARTIFACT_S}, {SEGMENT_DURATION_S}], "
                f"got {self.duration_s}"
            )
        if not (
            -1e-9 <= self.start_s <= SEGMENT_DURATION_S - self.duration_s + 1e-9
        ):
            raise InvalidSpecError(
                f"start_s {self.start_s} leaves no room for duration {self.duration_s}"
            )


@dataclass(frozen=True)
class KindParams:
    """Sampling distribution for one artifact kind.

    Amplitude is lognormal (parameters of the underlying normal); spectral
    slope in dB/Hz is normal.
    """

    amp_log_mu: float
    amp_log_sigma: float
    slope_mu: float = -1.5
    slope_sigma: float = 0.5


@dataclass(frozen=True)
class ArtifactParamTable:
    kinds: dict

    def __post_init__(self):
        missing = [k for k in ARTIFACT_KINDS if k not in self.kinds]
        if missing:
            raise ConfigError(f"param table missing kinds: {missing}")

    @classmethod
    def default(cls) -> "ArtifactParamTable":
        return cls(
            kinds={
                # displacement events swamp the signal; contact loss is strong;
                # limb motion is milder. Amplitudes are relative to the raw
                # clean RMS, the ordering puts device displacement worst.
                "device_displacement": KindParams(0.8, 0.5),
                "forearm_motion": KindParams(0.3, 0.5),
                "hand_motion": KindParams(0.0, 0.5),
                "poor_contact": KindParams(0.5, 0.6),
            }
        )


def sample_artifact(kind: str, table: ArtifactParamTable, seed: int) -> ArtifactSpec:
    """Draw one artifact's parameters. Draw order is fixed: duration, start,
    amplitude, slope, so a seed pins the full spec."""
    if kind not in ARTIFACT_KINDS:
        raise InvalidSpecError(f"unknown artifact kind {kind!r}")
    params = table.kinds[kind]
    rng = np.random.default_rng(seed)
    duration = rng.uniform(MIN_ARTIFACT_S, SEGMENT_DURATION_S)
    start = rng.uniform(0.0, SEGMENT_DURATION_S - duration)
    amplitude = float(np.exp(rng.normal(params.amp_log_mu, params.amp_log_sigma)))
    slope = float(rng.normal(params.slope_mu, params.slope_sigma))
    return ArtifactSpec(
        kind=kind,
        amplitude=amplitude,
        spectral_slope_db_per_hz=slope,
        duration_s=float(duration),
        start_s=float(start),
    )


def synth_clean_ppg(
    duration_s: float, fs: float, hr_bpm: float, seed: int
) -> tuple[Signal, np.ndarray]:
    """Generate a clean pulse signal; returns (signal, systolic peak times).

    Beat k sits at time t_k with a Gaussian systolic bump (sigma 8% of the
    beat interval) plus a diastolic bump at t_k + 0.35 * interval with 0.35
    amplitude and double the width. Intervals follow a multiplicative random
    walk, +/-2% per beat, clamped to [60/190, 60/32] seconds.
    """
    if not (30.0 <= hr_bpm <= 200.0):
        raise ValueError(f"hr_bpm must lie in [30, 200], got {hr_bpm}")
    if duration_s <= 0 or fs <= 0:
        raise ValueError("duration_s and fs must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    t_grid = np.arange(n) / fs
    out = np.zeros(n)

    ibi = 60.0 / hr_bpm
    t = 0.5 * ibi
    beats = []
    ibis = []
    while t < duration_s:
        beats.append(t)
        ibis.append(ibi)
        t += ibi
        ibi = float(np.clip(ibi * (1.0 + rng.uniform(-0.02, 0.02)), 60.0 / 190.0, 60.0 / 32.0))

    for tk, p in zip(beats, ibis):
        sig_s = 0.08 * p
        sig_d = 0.16 * p
        td = tk + 0.35 * p
        # evaluate each bump only on a +/-5 sigma slice of the grid
        lo = max(0, int(math.floor((tk - 5 * sig_s) * fs)))
        hi = min(n, int(math.ceil((tk + 5 * sig_s) * fs)) + 1)
        out[lo:hi] += np.exp(-0.5 * ((t_grid[lo:hi] - tk) / sig_s) ** 2)
        lo = max(0, int(math.floor((td - 5 * sig_d) * fs)))
        hi = min(n, int(math.ceil((td + 5 * sig_d) * fs)) + 1)
        out[lo:hi] += 0.35 * np.exp(-0.5 * ((t_grid[lo:hi] - td) / sig_d) ** 2)

    return Signal(out, fs), np.asarray(beats)


def _shaping_fir(
    slope_db_per_hz: float,
    fs: float,
    band: tuple[float, float] = (0.5, 18.0),
    n_taps: int = 129,
) -> np.ndarray:
    """Frequency-sampled FIR: log-linear gain tilt inside the band, zero outside."""
    lo, hi = band
    nyq = fs / 2.0
    if hi >= nyq:
        raise InvalidSpecError(f"band edge {hi} Hz must lie below Nyquist {nyq} Hz")
    eps = min(0.05 * lo, 0.02 * (nyq - hi))
    band_f = np.linspace(lo, hi, 41)
    band_g = 10.0 ** (slope_db_per_hz * (band_f - lo) / 20.0)
    freqs = np.concatenate(([0.0, lo - eps], band_f, [hi + eps, nyq]))
    gains = np.concatenate(([0.0, 0.0], band_g, [0.0, 0.0]))
    return sps.firwin2(n_taps, freqs, gains, fs=fs)


def render_artifact(
    spec: ArtifactSpec, fs: float, n: int, seed: int, ref_rms: float = 1.0
) -> Signal:
    """Render the artifact as an n-sample signal at fs.

    Shaped noise is windowed to [start, start+duration] with raised-cosine
    tapers of 0.1 s at each end, then scaled so its RMS over the windowed
    support equals amplitude * ref_rms.
    """
    if n < 1:
        raise InvalidSpecError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(n)
    h = _shaping_fir(spec.spectral_slope_db_per_hz, fs)
    shaped = np.convolve(noise, h, mode="same")

    i0 = int(round(spec.start_s * fs))
    i1 = int(round((spec.start_s + spec.duration_s) * fs))
    i0 = max(0, min(i0, n))
    i1 = max(i0, min(i1, n))
    window = np.zeros(n)
    support = i1 - i0
    if support > 0:
        ramp = int(round(TAPER_S * fs))
        ramp = min(ramp, support // 2)
        window[i0:i1] = 1.0
        if ramp > 0:
            edge = 0.5 * (1.0 - np.cos(np.pi * (np.arange(ramp) + 1) / (ramp + 1)))
            window[i0 : i0 + ramp] = edge
            window[i1 - ramp : i1] = edge[::-1]
    art = shaped * window

    target = spec.amplitude * ref_rms
    if support > 0 and target > 0:
        rms = float(np.sqrt(np.mean(art[i0:i1] ** 2)))
        if rms > 0:
            art *= target / rms
        # rms can be zero only for degenerate inputs; leave silent in that case
    else:
        art[:] = 0.0
    return Signal(art, fs)


@dataclass
class SegmentRecord:
    """One corpus entry: preprocessed clean/noisy pair plus provenance."""

    subject_id: str
    clean: Signal
    noisy: Signal
    artifact: ArtifactSpec | None
    ground_truth_hr: float
    activity: str | None = None


def make_dataset(
    n_subjects: int,
    segments_per_subject: int,
    seed: int,
    fs: float = 125.0,
    duration_s: float = SEGMENT_DURATION_S,
    table: ArtifactParamTable | None = None,
    preprocess_cfg: PreprocessConfig | None = None,
) -> list:
    """Build a kind-balanced corrupted corpus of SegmentRecords.

    Each subject gets one artifact kind (round robin over the four kinds, so
    n_subjects must be divisible by 4) and a base heart rate; every segment
    is corrupted once (noisy = clean + artifact scaled to the clean RMS),
    then both versions are band-passed and min-max normalized by the joint
    range of the pair, so both land in [0, 1] on one shared amplitude scale.
    Per-segment randomness derives from (seed, subject index, segment index)
    so any record is reproducible in isolation.
    """
    if n_subjects < 4 or n_subjects % 4 != 0:
        raise ConfigError(
            f"n_subjects must be a positive multiple of 4, got {n_subjects}"
        )
    if segments_per_subject < 1:
        raise ConfigError(
            f"segments_per_subject must be >= 1, got {segments_per_subject}"
        )
    table = table or ArtifactParamTable.default()
    cfg = preprocess_cfg or PreprocessConfig()
    cascade = design_cheby2_bandpass(cfg.band, fs)

    records = []
    for s in range(n_subjects):
        kind = ARTIFACT_KINDS[s % 4]
        subject_id = f"synth-{s:04d}"
        subj_rng = np.random.default_rng(np.random.SeedSequence((seed, s)))
        base_hr = float(subj_rng.uniform(45.0, 160.0))
        for g in range(segments_per_subject):
            ss = np.random.SeedSequence((seed, s, g))
            seg_seeds = ss.generate_state(4)
            seg_rng = np.random.default_rng(int(seg_seeds[0]))
            hr = float(np.clip(base_hr + seg_rng.uniform(-5.0, 5.0), 40.0, 165.0))
            clean_raw, beat_times = synth_clean_ppg(
                duration_s, fs, hr, seed=int(seg_seeds[1])
            )
            if len(beat_times) >= 2:
                gt_hr = 60.0 / float(np.mean(np.diff(beat_times)))
            else:
                gt_hr = hr
            art_spec = sample_artifact(kind, table, seed=int(seg_seeds[2]))
            ref_rms = float(np.sqrt(np.mean(clean_raw.samples**2)))
            artifact = render_artifact(
                art_spec, fs, len(clean_raw), seed=int(seg_seeds[3]), ref_rms=ref_rms
            )
            noisy_raw = Signal(clean_raw.samples + artifact.samples, fs)

            clean_f = filter_signal(clean_raw, cascade, zero_phase=cfg.zero_phase)
            noisy_f = filter_signal(noisy_raw, cascade, zero_phase=cfg.zero_phase)
            # one affine map for the pair: noisy - clean stays proportional
            # to the rendered artifact, so SNR is well defined on the records
            lo = min(float(np.min(clean_f.samples)), float(np.min(noisy_f.samples)))
            hi = max(float(np.max(clean_f.samples)), float(np.max(noisy_f.samples)))
            span = hi - lo if hi > lo else 1.0
            clean_n = Signal((clean_f.samples - lo) / span, fs)
            noisy_n = Signal((noisy_f.samples - lo) / span, fs)
            records.append(
                SegmentRecord(
                    subject_id=subject_id,
                    clean=clean_n,
                    noisy=noisy_n,
                    artifact=art_spec,
                    ground_truth_hr=gt_hr,
                )
            )
    return records
