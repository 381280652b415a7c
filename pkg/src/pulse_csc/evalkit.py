"""Evaluation kit: peak detection, heart-rate series, and comparison stats.

The detector finds prominent local maxima with a refractory period. Heart
rate comes from mean inter-peak intervals over sliding windows (or the whole
segment). Signal quality is quantified by an energy-ratio SNR, and paired
comparisons use a hand-written Wilcoxon signed-rank test (exact tie-aware
null for small n) plus Bland-Altman agreement statistics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks, peak_prominences
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import (
    EmptyEvaluationError,
    InsufficientDataError,
    UndefinedReferenceError,
    UndefinedTestError,
)
from .signals import Signal

SNR_CAP_DB = 120.0
MIN_PEAK_SEPARATION_S = 0.3
PROMINENCE_FRACTION = 0.3
HR_PLAUSIBLE_BPM = (20.0, 250.0)


def detect_peaks(x: Signal) -> np.ndarray:
    """Indices of pulse peaks, sorted ascending.

    Candidates are local maxima (plateaus contribute their middle sample)
    whose prominence reaches 0.3 times the p90-p10 amplitude spread. They are
    accepted greedily from highest down, rejecting any candidate closer than
    0.3 s to an accepted peak; equal heights break toward the earlier sample.
    """
    s = x.samples
    if len(s) < 3:
        return np.empty(0, dtype=np.intp)
    cand, _ = find_peaks(s)
    if cand.size == 0:
        return np.empty(0, dtype=np.intp)
    prom = peak_prominences(s, cand)[0]
    spread = float(np.percentile(s, 90) - np.percentile(s, 10))
    cand = cand[prom >= PROMINENCE_FRACTION * spread]
    if cand.size == 0:
        return np.empty(0, dtype=np.intp)

    min_sep = MIN_PEAK_SEPARATION_S * x.fs
    order = sorted(range(cand.size), key=lambda i: (-s[cand[i]], cand[i]))
    accepted = []
    for i in order:
        p = cand[i]
        if all(abs(int(p) - int(q)) >= min_sep for q in accepted):
            accepted.append(p)
    return np.array(sorted(accepted), dtype=np.intp)


@dataclass(frozen=True)
class HrSeries:
    """Windowed heart-rate estimates; unreliable windows hold NaN."""

    starts_s: np.ndarray
    hr_bpm: np.ndarray
    reliable: np.ndarray
    window_s: float
    step_s: float


def hr_from_peaks(
    peaks: np.ndarray,
    fs: float,
    n_samples: int,
    window_s: float | None = None,
    step_s: float = 2.0,
) -> HrSeries:
    """Heart rate per window as 60 / mean inter-peak interval.

    window_s=None evaluates the whole segment as a single window. Windows
    containing fewer than two peaks, or yielding a rate outside (20, 250) bpm,
    are flagged unreliable and hold NaN.
    """
    peaks = np.asarray(peaks, dtype=np.float64)
    duration = n_samples / fs
    if window_s is None:
        starts = np.array([0.0])
        window_s = duration
    else:
        if window_s <= 0 or step_s <= 0:
            raise ValueError("window_s and step_s must be positive")
        if duration + 1e-9 < window_s:
            starts = np.array([0.0])
        else:
            n_win = int(np.floor((duration - window_s) / step_s + 1e-9)) + 1
            starts = np.arange(n_win) * step_s

    times = peaks / fs
    hr = np.full(len(starts), np.nan)
    reliable = np.zeros(len(starts), dtype=bool)
    for i, t0 in enumerate(starts):
        inside = times[(times >= t0) & (times < t0 + window_s)]
        if len(inside) < 2:
            continue
        rate = 60.0 / float(np.mean(np.diff(inside)))
        if HR_PLAUSIBLE_BPM[0] < rate < HR_PLAUSIBLE_BPM[1]:
            hr[i] = rate
            reliable[i] = True
    return HrSeries(
        starts_s=starts, hr_bpm=hr, reliable=reliable,
        window_s=float(window_s), step_s=float(step_s),
    )


def _aligned_reliable(est: HrSeries, ref: HrSeries) -> tuple[np.ndarray, np.ndarray]:
    if len(est.starts_s) != len(ref.starts_s) or not np.allclose(
        est.starts_s, ref.starts_s
    ):
        raise ValueError("heart-rate series are not window-aligned")
    mask = est.reliable & ref.reliable
    if not np.any(mask):
        raise EmptyEvaluationError("no window has reliable estimates on both sides")
    return est.hr_bpm[mask], ref.hr_bpm[mask]


def mae_hr(est: HrSeries, ref: HrSeries) -> float:
    """Mean absolute heart-rate error over windows reliable on both sides."""
    a, b = _aligned_reliable(est, ref)
    return float(np.mean(np.abs(a - b)))


def snr_db(y: np.ndarray, y_hat: np.ndarray) -> float:
    """10 log10 of reference energy over error energy, capped at +120 dB.

    The cap value is returned exactly when the error energy is zero (or tiny
    enough to exceed the cap); compare against SNR_CAP_DB to detect it. An
    all-zero reference is undefined.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    sig = float(np.sum(y**2))
    if sig == 0.0:
        raise UndefinedReferenceError("reference signal is identically zero")
    err = float(np.sum((y_hat - y) ** 2))
    if err == 0.0:
        return SNR_CAP_DB
    return float(min(10.0 * np.log10(sig / err), SNR_CAP_DB))


# -- Wilcoxon signed-rank ------------------------------------------------------

EXACT_MAX_N = 20


@dataclass(frozen=True)
class WilcoxonResult:
    p_value: float
    w_plus: float
    n_effective: int
    method: str  # "exact" or "normal"
    stars: str


def significance_stars(p: float) -> str:
    if p < 1e-3:
        return "***"
    if p < 1e-2:
        return "**"
    if p < 5e-2:
        return "*"
    return ""


def _exact_tail(ranks2: np.ndarray, w2: int, upper: bool) -> float:
    """Tail probability of the signed-rank null over doubled midranks.

    counts[s] is the number of sign assignments whose positive-rank sum
    equals s/2; built by subset-sum DP, exact for n <= ~50 (counts stay far
    below 2^53).
    """
    total = int(ranks2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in ranks2:
        r = int(r)
        nxt = counts.copy()
        nxt[r:] += counts[: total + 1 - r]
        counts = nxt
    denom = 2.0 ** len(ranks2)
    if upper:
        return float(counts[w2:].sum() / denom)
    return float(counts[: w2 + 1].sum() / denom)


def wilcoxon_signed_rank(
    a: np.ndarray, b: np.ndarray, alternative: str
) -> WilcoxonResult:
    """One-sided matched-pairs signed-rank test on differences d = a - b.

    alternative "a_less" tests the hypothesis a < b (small positive-rank sum
    is evidence); "b_less" tests b < a. Zero differences are dropped; ties
    among |d| get midranks. n <= 20 uses the exact tie-aware null via DP;
    larger n uses the normal approximation with tie-corrected variance and
    +/-0.5 continuity correction.
    """
    if alternative not in ("a_less", "b_less"):
        raise ValueError(f"alternative must be 'a_less' or 'b_less', got {alternative!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need matching 1-D arrays, got {a.shape} vs {b.shape}")
    d = a - b
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        raise UndefinedTestError("all paired differences are zero")
    ranks = rankdata(np.abs(d))  # midranks; multiples of 0.5, exact in float
    w_plus = float(np.sum(ranks[d > 0]))

    if n <= EXACT_MAX_N:
        ranks2 = np.rint(2.0 * ranks).astype(np.int64)
        w2 = int(np.rint(2.0 * w_plus))
        if alternative == "b_less":  # b < a means d > 0, so large w_plus
            p = _exact_tail(ranks2, w2, upper=True)
        else:
            p = _exact_tail(ranks2, w2, upper=False)
        method = "exact"
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var -= float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        if var <= 0:
            raise UndefinedTestError("zero variance under the null (all ranks tied)")
        sd = np.sqrt(var)
        if alternative == "b_less":
            z = (w_plus - mu - 0.5) / sd
            p = float(ndtr(-z))
        else:
            z = (w_plus - mu + 0.5) / sd
            p = float(ndtr(z))
        method = "normal"

    p = min(max(p, np.finfo(float).tiny), 1.0)
    return WilcoxonResult(
        p_value=p, w_plus=w_plus, n_effective=n, method=method,
        stars=significance_stars(p),
    )


# -- Bland-Altman --------------------------------------------------------------


@dataclass(frozen=True)
class BlandAltman:
    mean_diff: float
    loa_low: float
    loa_high: float
    slope: float
    intercept: float
    n: int
    means: np.ndarray
    diffs: np.ndarray


def bland_altman(ref: np.ndarray, est: np.ndarray) -> BlandAltman:
    """Agreement stats on paired values: differences are reference - estimate.

    Limits of agreement are mean +/- 1.96 sample standard deviations (ddof=1);
    the trend line is an ordinary least-squares fit of difference against
    pair mean, with slope 0 when the means are constant. NaN pairs are
    dropped; fewer than 3 surviving pairs is an error.
    """
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape or ref.ndim != 1:
        raise ValueError(f"need matching 1-D arrays, got {ref.shape} vs {est.shape}")
    keep = np.isfinite(ref) & np.isfinite(est)
    ref, est = ref[keep], est[keep]
    n = len(ref)
    if n < 3:
        raise InsufficientDataError(f"need at least 3 pairs, got {n}")
    diffs = ref - est
    means = 0.5 * (ref + est)
    mean_diff = float(np.mean(diffs))
    sd = float(np.std(diffs, ddof=1))
    var_means = float(np.sum((means - means.mean()) ** 2))
    if var_means == 0.0:
        slope = 0.0
        intercept = mean_diff
    else:
        slope = float(np.sum((means - means.mean()) * (diffs - mean_diff)) / var_means)
        intercept = mean_diff - slope * float(means.mean())
    return BlandAltman(
        mean_diff=mean_diff,
        loa_low=mean_diff - 1.96 * sd,
        loa_high=mean_diff + 1.96 * sd,
        slope=slope,
        intercept=intercept,
        n=n,
        means=means,
        diffs=diffs,
    )


# -- grouping helpers ----------------------------------------------------------

DURATION_BINS = ((0.0, 2.0), (2.0, 4.0), (4.0, 6.0), (6.0, 8.0), (8.0, 10.0))


def duration_bin_label(duration_s: float) -> str:
    """Half-open-left bins (0,2], (2,4], ... (8,10] over artifact duration."""
    for lo, hi in DURATION_BINS:
        if lo < duration_s <= hi:
            return f"({int(lo)},{int(hi)}]"
    raise ValueError(f"duration {duration_s} outside (0, 10]")


@dataclass(frozen=True)
class MaeSegment:
    """One scored segment feeding grouped heart-rate error statistics."""

    subject_id: str
    est: HrSeries
    ref: HrSeries
    artifact_kind: str | None = None
    artifact_duration_s: float | None = None
    activity: str | None = None


@dataclass(frozen=True)
class GroupedMae:
    grouping: str
    values: dict  # group label -> {subject_id: mae_bpm}


_GROUP_KEYS = {
    "artifact_kind": lambda s: s.artifact_kind,
    "duration_bin": lambda s: (
        duration_bin_label(s.artifact_duration_s)
        if s.artifact_duration_s is not None
        else None
    ),
    "activity": lambda s: s.activity,
}


def group_mae(segments, grouping: str) -> GroupedMae:
    """One mean-absolute-HR-error value per subject within each group.

    Windows reliable on both series are pooled over all of a subject's
    segments in the group before averaging. Segments lacking the grouping
    metadata, or contributing no usable window, are dropped with a warning;
    a group with nothing left is simply absent from the result.
    """
    if grouping not in _GROUP_KEYS:
        raise ValueError(
            f"grouping must be one of {sorted(_GROUP_KEYS)}, got {grouping!r}"
        )
    key_of = _GROUP_KEYS[grouping]
    pooled: dict = {}
    for seg in segments:
        key = key_of(seg)
        if key is None:
            warnings.warn(
                f"segment of {seg.subject_id} lacks {grouping} metadata; dropped",
                stacklevel=2,
            )
            continue
        try:
            a, b = _aligned_reliable(seg.est, seg.ref)
        except EmptyEvaluationError:
            warnings.warn(
                f"segment of {seg.subject_id} has no reliable window pair; dropped",
                stacklevel=2,
            )
            continue
        pooled.setdefault(key, {}).setdefault(seg.subject_id, []).append(
            np.abs(a - b)
        )
    values = {
        key: {
            sid: float(np.mean(np.concatenate(chunks)))
            for sid, chunks in sorted(subjects.items())
        }
        for key, subjects in sorted(pooled.items())
    }
    return GroupedMae(grouping=grouping, values=values)
