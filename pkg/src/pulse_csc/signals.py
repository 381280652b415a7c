"""Signal container plus the front-end conditioning chain.

Covers band-pass filtering (Chebyshev type II biquad cascade), rational-ratio
resampling, and min-max amplitude normalization with an invertible record of
the affine map. All downstream code assumes float64 1-D signals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .errors import (
    DesignFailureError,
    InvalidSpecError,
    UnsupportedRatioError,
)

# A ratio is representable when its reduced numerator and denominator both
# stay below this bound; beyond it the polyphase filter gets absurd.
MAX_RESAMPLE_TERM = 1_000_000


@dataclass(frozen=True)
class Signal:
    """Uniformly sampled real-valued signal."""

    samples: np.ndarray
    fs: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise ValueError("samples must be non-empty")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        fs = float(self.fs)
        if not (np.isfinite(fs) and fs > 0):
            raise ValueError(f"fs must be a positive finite number, got {self.fs}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "fs", fs)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.fs

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) / self.fs


@dataclass(frozen=True)
class BandPassSpec:
    """Chebyshev type II band-pass request.

    order is the analog prototype order (the digital band-pass has twice as
    many poles); low_hz/high_hz are the stopband edges where the response is
    stop_atten_db down.
    """

    order: int = 4
    low_hz: float = 0.5
    high_hz: float = 18.0
    stop_atten_db: float = 40.0

    def __post_init__(self):
        if self.order < 1 or self.order % 2 != 0:
            raise InvalidSpecError(
                f"order must be a positive even integer, got {self.order}"
            )
        if not (0.0 < self.low_hz < self.high_hz):
            raise InvalidSpecError(
                f"need 0 < low_hz < high_hz, got ({self.low_hz}, {self.high_hz})"
            )
        if self.stop_atten_db <= 0:
            raise InvalidSpecError(
                f"stop_atten_db must be positive, got {self.stop_atten_db}"
            )


@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections in scipy layout: rows [b0 b1 b2 1 a1 a2]."""

    sections: np.ndarray
    fs: float

    def __post_init__(self):
        sections = np.asarray(self.sections, dtype=np.float64)
        if sections.ndim != 2 or sections.shape[1] != 6:
            raise DesignFailureError(
                f"expected (n, 6) section array, got shape {sections.shape}"
            )
        if not np.all(np.isfinite(sections)):
            raise DesignFailureError("non-finite filter coefficients")
        if not np.allclose(sections[:, 3], 1.0):
            raise DesignFailureError("sections must be normalized to a0 = 1")
        for row in sections:
            poles = np.roots(row[3:])
            if np.any(np.abs(poles) >= 1.0):
                raise DesignFailureError(
                    f"unstable section, pole magnitudes {np.abs(poles)}"
                )
        object.__setattr__(self, "sections", sections)
        object.__setattr__(self, "fs", float(self.fs))

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    def response_db(self, freqs_hz) -> np.ndarray:
        """Magnitude response in dB at the given frequencies."""
        w = 2.0 * np.pi * np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64)) / self.fs
        z = np.exp(1j * w)
        h = np.ones_like(z)
        for b0, b1, b2, _, a1, a2 in self.sections:
            num = b0 + b1 / z + b2 / z**2
            den = 1.0 + a1 / z + a2 / z**2
            h = h * num / den
        mag = np.abs(h)
        return 20.0 * np.log10(np.maximum(mag, 1e-300))


def design_cheby2_bandpass(spec: BandPassSpec, fs: float) -> BiquadCascade:
    """Design the band-pass as cascaded biquads for the given sampling rate."""
    fs = float(fs)
    if fs <= 0:
        raise InvalidSpecError(f"fs must be positive, got {fs}")
    nyq = fs / 2.0
    if spec.high_hz >= nyq:
        raise InvalidSpecError(
            f"high edge {spec.high_hz} Hz must lie below Nyquist {nyq} Hz"
        )
    sos = sps.cheby2(
        spec.order,
        spec.stop_atten_db,
        [spec.low_hz, spec.high_hz],
        btype="bandpass",
        fs=fs,
        output="sos",
    )
    return BiquadCascade(sections=sos, fs=fs)


def filter_signal(x: Signal, cascade: BiquadCascade, zero_phase: bool = False) -> Signal:
    """Apply the cascade causally, or forward-backward when zero_phase."""
    if abs(x.fs - cascade.fs) > 1e-9 * cascade.fs:
        raise InvalidSpecError(
            f"cascade designed for fs={cascade.fs}, signal has fs={x.fs}"
        )
    if zero_phase:
        y = sps.sosfiltfilt(cascade.sections, x.samples)
    else:
        y = sps.sosfilt(cascade.sections, x.samples)
    return Signal(np.asarray(y, dtype=np.float64), x.fs)


def _as_fraction(value: float) -> Fraction:
    try:
        return Fraction(value).limit_denominator(10**9)
    except (ValueError, OverflowError) as exc:
        raise UnsupportedRatioError(f"cannot express {value} as a ratio") from exc


def resample(x: Signal, target_fs: float) -> Signal:
    """Polyphase resampling at the exact rational ratio target_fs / fs.

    Output length is round(n * ratio); scipy's polyphase output (ceil) is
    trimmed by at most one trailing sample to match.
    """
    target_fs = float(target_fs)
    if target_fs <= 0:
        raise InvalidSpecError(f"target_fs must be positive, got {target_fs}")
    if abs(target_fs - x.fs) <= 1e-12 * max(target_fs, x.fs):
        return Signal(x.samples.copy(), x.fs)
    ratio = _as_fraction(target_fs) / _as_fraction(x.fs)
    up, down = ratio.numerator, ratio.denominator
    if up > MAX_RESAMPLE_TERM or down > MAX_RESAMPLE_TERM:
        raise UnsupportedRatioError(
            f"ratio {target_fs}/{x.fs} reduces to {up}/{down}, too large to realize"
        )
    # 'mean' padding keeps constant signals exactly constant through the edges.
    y = sps.resample_poly(x.samples, up, down, padtype="mean")
    n_exact = Fraction(len(x)) * ratio
    n_out = int(n_exact + Fraction(1, 2))  # round half up, exact arithmetic
    if len(y) < n_out:
        raise DesignFailureError(
            f"resampler returned {len(y)} samples, expected at least {n_out}"
        )
    return Signal(y[:n_out], target_fs)


@dataclass(frozen=True)
class Normalization:
    """Affine record of a min-max normalization, invertible after the fact."""

    lo: float
    hi: float
    degenerate: bool = False

    def invert(self, y: Signal) -> Signal:
        return Signal(y.samples * (self.hi - self.lo) + self.lo, y.fs)

    def invert_array(self, y: np.ndarray) -> np.ndarray:
        return y * (self.hi - self.lo) + self.lo


def normalize_01(x: Signal) -> tuple[Signal, Normalization]:
    """Map the signal onto [0, 1]; constant input maps to all 0.5, flagged."""
    lo = float(np.min(x.samples))
    hi = float(np.max(x.samples))
    if hi == lo:
        out = np.full(len(x), 0.5)
        return Signal(out, x.fs), Normalization(lo=lo, hi=lo, degenerate=True)
    out = (x.samples - lo) / (hi - lo)
    return Signal(out, x.fs), Normalization(lo=lo, hi=hi, degenerate=False)


@dataclass(frozen=True)
class PreprocessConfig:
    """Front-end chain settings: resample -> band-pass -> normalize."""

    band: BandPassSpec = field(default_factory=BandPassSpec)
    zero_phase: bool = False
    target_fs: float = 125.0

    def __post_init__(self):
        if self.target_fs <= 0:
            raise InvalidSpecError(f"target_fs must be positive, got {self.target_fs}")


def preprocess(
    x: Signal,
    cfg: PreprocessConfig,
    cascade: BiquadCascade | None = None,
    do_resample: bool = True,
) -> tuple[Signal, Normalization]:
    """Run the conditioning chain, returning the normalized signal and its map.

    Pass a pre-designed cascade to amortize design cost over many segments.
    """
    if do_resample and abs(x.fs - cfg.target_fs) > 1e-9 * cfg.target_fs:
        x = resample(x, cfg.target_fs)
    if cascade is None:
        cascade = design_cheby2_bandpass(cfg.band, x.fs)
    y = filter_signal(x, cascade, zero_phase=cfg.zero_phase)
    return normalize_01(y)
