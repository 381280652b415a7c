"""Evaluation kit: SNR, peaks, heart rate, Wilcoxon, Bland-Altman, grouping."""

import itertools
import warnings

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from pulse_csc import (
    HrSeries,
    MaeSegment,
    bland_altman,
    detect_peaks,
    group_mae,
    hr_from_peaks,
    mae_hr,
    make_dataset,
    snr_db,
    synth_clean_ppg,
    wilcoxon_signed_rank,
)
from pulse_csc.errors import (
    EmptyEvaluationError,
    InsufficientDataError,
    UndefinedReferenceError,
    UndefinedTestError,
)
from pulse_csc.evalkit import SNR_CAP_DB, duration_bin_label
from pulse_csc.signals import Signal

FS = 125.0


def hr_series(starts, hrs, reliable=None, window=8.0, step=2.0):
    hrs = np.asarray(hrs, dtype=np.float64)
    rel = np.isfinite(hrs) if reliable is None else np.asarray(reliable, bool)
    return HrSeries(
        starts_s=np.asarray(starts, dtype=np.float64),
        hr_bpm=hrs,
        reliable=rel,
        window_s=window,
        step_s=step,
    )


class TestSnr:
    def test_double_signal_is_zero_db(self):
        y = np.sin(np.linspace(0, 7, 200))
        assert snr_db(y, 2 * y) == 0.0

    def test_twenty_db_example(self):
        y = np.ones(100)
        assert snr_db(y, y + 0.1) == pytest.approx(20.0, abs=1e-12)

    def test_matches_straight_line_reevaluation(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal(300)
        y_hat = y + 0.3 * rng.standard_normal(300)
        sig = err = 0.0
        for i in range(300):
            sig += y[i] * y[i]
            err += (y_hat[i] - y[i]) ** 2
        expect = 10.0 * np.log10(sig / err)
        assert snr_db(y, y_hat) == pytest.approx(expect, abs=1e-12)

    def test_perfect_match_hits_cap(self):
        y = np.ones(10)
        assert snr_db(y, y) == SNR_CAP_DB
        assert snr_db(y, y + 1e-9) == SNR_CAP_DB  # 180 dB true ratio, capped

    def test_zero_reference_rejected(self):
        with pytest.raises(UndefinedReferenceError):
            snr_db(np.zeros(5), np.ones(5))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            snr_db(np.ones(4), np.ones(5))

    @given(
        seed=st.integers(0, 10_000),
        n=st.integers(4, 64),
        alpha=st.floats(1e-3, 1e3),
    )
    @settings(max_examples=60, deadline=None)
    def test_common_scaling_invariance(self, seed, n, alpha):
        rng = np.random.default_rng(seed)
        y = rng.standard_normal(n)
        y_hat = y + rng.standard_normal(n)
        assert snr_db(alpha * y, alpha * y_hat) == pytest.approx(
            snr_db(y, y_hat), abs=1e-9
        )


class TestDetectPeaks:
    def test_clean_pulse_beats_recovered(self):
        sig, beat_times = synth_clean_ppg(10.0, FS, 60.0, seed=3)
        peaks = detect_peaks(sig)
        assert 9 <= len(peaks) <= 11
        for p in peaks:
            assert np.min(np.abs(beat_times - p / FS)) <= 0.040

    def test_constant_signal_has_no_peaks(self):
        assert len(detect_peaks(Signal(np.full(500, 0.7), FS))) == 0

    def test_refractory_keeps_higher_of_close_pair(self):
        t = np.arange(500) / FS
        x = np.exp(-0.5 * ((t - 1.2) / 0.03) ** 2)
        x += 0.8 * np.exp(-0.5 * ((t - 1.0) / 0.03) ** 2)  # 0.2 s earlier, lower
        peaks = detect_peaks(Signal(x, FS))
        assert len(peaks) == 1
        assert abs(peaks[0] / FS - 1.2) < 0.02

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_spacing_and_order(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(800)
        kernel = np.exp(-0.5 * (np.arange(-12, 13) / 4.0) ** 2)
        x = np.convolve(x, kernel / kernel.sum(), mode="same")
        peaks = detect_peaks(Signal(x, FS))
        if len(peaks) > 1:
            gaps = np.diff(peaks)
            assert np.all(gaps > 0)
            assert np.all(gaps >= 0.3 * FS)


class TestHrFromPeaks:
    def test_regular_one_second_spacing(self):
        peaks = np.arange(10) * FS  # 0..9 s
        series = hr_from_peaks(peaks, FS, 1250, window_s=8.0, step_s=2.0)
        assert np.array_equal(series.starts_s, [0.0, 2.0])
        assert np.all(series.reliable)
        assert series.hr_bpm == pytest.approx([60.0, 60.0], rel=1e-12)

    def test_half_second_spacing(self):
        peaks = np.arange(20) * 0.5 * FS
        series = hr_from_peaks(peaks, FS, 1250)
        assert len(series.starts_s) == 1
        assert series.hr_bpm[0] == pytest.approx(120.0, rel=1e-12)

    def test_mixed_intervals_use_mean(self):
        fs = 100.0
        peaks = np.array([0, 90, 190, 300])  # gaps 0.9, 1.0, 1.1 s
        series = hr_from_peaks(peaks, fs, 400)
        assert series.hr_bpm[0] == pytest.approx(60.0, rel=1e-12)

    def test_sparse_windows_flagged(self):
        peaks = np.array([0.0, 1.0, 2.0]) * FS  # nothing after 2 s
        series = hr_from_peaks(peaks, FS, 2500, window_s=8.0, step_s=2.0)
        assert series.reliable[0]
        assert not series.reliable[-1]
        assert np.isnan(series.hr_bpm[-1])

    def test_implausible_rate_flagged(self):
        peaks = np.arange(40) * 0.2 * FS  # 300 bpm
        series = hr_from_peaks(peaks, FS, 1250)
        assert not series.reliable[0]

    def test_whole_segment_mode(self):
        peaks = np.arange(10) * FS
        series = hr_from_peaks(peaks, FS, 1250, window_s=None)
        assert len(series.starts_s) == 1
        assert series.window_s == pytest.approx(10.0)

    def test_bad_window_rejected(self):
        with pytest.raises(ValueError):
            hr_from_peaks(np.arange(5) * FS, FS, 1250, window_s=0.0)


class TestMaeHr:
    def test_identical_series_zero(self):
        a = hr_series([0, 2], [60.0, 62.0])
        assert mae_hr(a, a) == 0.0

    def test_two_window_example(self):
        est = hr_series([0, 2], [60.0, 62.0])
        ref = hr_series([0, 2], [58.0, 64.0])
        assert mae_hr(est, ref) == pytest.approx(2.0, rel=1e-12)

    def test_matches_bruteforce_loop(self):
        rng = np.random.default_rng(7)
        starts = np.arange(12) * 2.0
        hr_a = rng.uniform(50, 150, 12)
        hr_b = rng.uniform(50, 150, 12)
        rel_a = rng.random(12) > 0.3
        rel_b = rng.random(12) > 0.3
        hr_a[~rel_a] = np.nan
        hr_b[~rel_b] = np.nan
        est = hr_series(starts, hr_a, rel_a)
        ref = hr_series(starts, hr_b, rel_b)
        total, count = 0.0, 0
        for i in range(12):
            if rel_a[i] and rel_b[i]:
                total += abs(hr_a[i] - hr_b[i])
                count += 1
        assert count > 0
        assert mae_hr(est, ref) == pytest.approx(total / count, rel=1e-12)

    def test_misaligned_windows_rejected(self):
        with pytest.raises(ValueError):
            mae_hr(hr_series([0, 2], [60, 60]), hr_series([0, 4], [60, 60]))

    def test_no_common_reliable_window(self):
        est = hr_series([0, 2], [60.0, np.nan])
        ref = hr_series([0, 2], [np.nan, 60.0])
        with pytest.raises(EmptyEvaluationError):
            mae_hr(est, ref)


def enumerate_signed_rank_p(a, b, alternative):
    """Full 2^n enumeration with hand-computed midranks (n <= 12)."""
    d = [float(x) - float(y) for x, y in zip(a, b) if x != y]
    mags = [abs(v) for v in d]
    ranks = []
    for v in d:
        below = sum(1 for m in mags if m < abs(v))
        equal = sum(1 for m in mags if m == abs(v))
        ranks.append(below + (equal + 1) / 2.0)
    w_obs = sum(r for r, v in zip(ranks, d) if v > 0)
    hits = 0
    for signs in itertools.product((False, True), repeat=len(d)):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if alternative == "b_less":
            hits += w >= w_obs - 1e-12
        else:
            hits += w <= w_obs + 1e-12
    return hits / 2.0 ** len(d)


class TestWilcoxon:
    def test_all_positive_n6(self):
        b = np.array([10.0, 11.0, 12.0, 13.0, 14.0, 15.0])
        a = b + 1.0
        res = wilcoxon_signed_rank(a, b, "b_less")
        assert res.method == "exact"
        assert res.w_plus == 21.0
        assert res.p_value == pytest.approx(1.0 / 64.0, rel=1e-15)
        assert res.p_value == pytest.approx(
            enumerate_signed_rank_p(a, b, "b_less"), rel=1e-12
        )

    def test_swapping_sides_flips_alternative(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=9)
        b = a + rng.normal(scale=0.5, size=9)
        left = wilcoxon_signed_rank(a, b, "b_less")
        right = wilcoxon_signed_rank(b, a, "a_less")
        assert left.p_value == pytest.approx(right.p_value, rel=1e-15)

    def test_exact_matches_enumeration_with_ties(self):
        rng = np.random.default_rng(2)
        for trial in range(8):
            n = int(rng.integers(4, 13))
            a = rng.integers(0, 5, size=n).astype(float)
            b = rng.integers(0, 5, size=n).astype(float)
            if np.all(a == b):
                continue
            for alternative in ("a_less", "b_less"):
                res = wilcoxon_signed_rank(a, b, alternative)
                assert res.method == "exact"
                assert res.p_value == pytest.approx(
                    enumerate_signed_rank_p(a, b, alternative), rel=1e-12
                )

    def test_exact_agrees_with_library_and_approximation(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=15)
        b = a + rng.normal(scale=0.8, size=15)
        res = wilcoxon_signed_rank(a, b, "b_less")
        exact = scipy.stats.wilcoxon(a, b, alternative="greater", method="exact")
        assert res.p_value == pytest.approx(float(exact.pvalue), rel=1e-12)
        approx = scipy.stats.wilcoxon(
            a, b, alternative="greater", method="approx", correction=True
        )
        assert abs(res.p_value - float(approx.pvalue)) <= 0.02

    def test_all_ties_undefined(self):
        x = np.array([1.0, 2.0, 3.0])
        with pytest.raises(UndefinedTestError):
            wilcoxon_signed_rank(x, x.copy(), "a_less")

    def test_bad_alternative(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank(np.ones(3), np.zeros(3), "two_sided")

    def test_p_monotone_in_rank_sum(self):
        base = np.zeros(8)
        mags = np.arange(1.0, 9.0)
        rows = []
        for k in range(9):
            signs = np.where(np.arange(8) < k, 1.0, -1.0)
            res = wilcoxon_signed_rank(base + signs * mags, base, "b_less")
            assert 0.0 < res.p_value <= 1.0
            rows.append((res.w_plus, res.p_value))
        rows.sort()
        ps = [p for _, p in rows]
        assert all(ps[i] >= ps[i + 1] for i in range(len(ps) - 1))


class TestBlandAltman:
    def test_perfect_agreement(self):
        ref = np.array([60.0, 70.0, 80.0])
        res = bland_altman(ref, ref.copy())
        assert res.mean_diff == 0.0
        assert res.loa_low == 0.0
        assert res.loa_high == 0.0
        assert res.slope == 0.0

    def test_three_pair_example(self):
        res = bland_altman(np.array([60.0, 70.0, 80.0]), np.array([62.0, 69.0, 84.0]))
        assert res.mean_diff == pytest.approx(-1.667, abs=1e-3)
        assert res.loa_low == pytest.approx(-6.599, abs=1e-3)
        assert res.loa_high == pytest.approx(3.266, abs=1e-3)
        sd = float(np.std([-2.0, 1.0, -4.0], ddof=1))
        assert sd == pytest.approx(2.517, abs=1e-3)

    def test_constant_offset(self):
        ref = np.array([60.0, 70.0, 80.0, 90.0])
        res = bland_altman(ref, ref + 5.0)
        assert res.mean_diff == pytest.approx(-5.0, rel=1e-12)
        assert res.slope == pytest.approx(0.0, abs=1e-12)
        assert res.loa_low == pytest.approx(-5.0, rel=1e-12)

    def test_recovers_linear_trend(self):
        means = np.array([60.0, 70.0, 80.0, 90.0, 100.0])
        diffs = 0.5 * means + 1.0
        ref = means + diffs / 2.0
        est = means - diffs / 2.0
        res = bland_altman(ref, est)
        assert res.slope == pytest.approx(0.5, rel=1e-9)
        assert res.intercept == pytest.approx(1.0, rel=1e-9)

    def test_nan_pairs_dropped(self):
        ref = np.array([60.0, np.nan, 70.0, 80.0])
        est = np.array([62.0, 70.0, 69.0, 84.0])
        full = bland_altman(np.array([60.0, 70.0, 80.0]), np.array([62.0, 69.0, 84.0]))
        res = bland_altman(ref, est)
        assert res.n == 3
        assert res.mean_diff == full.mean_diff

    def test_too_few_pairs(self):
        with pytest.raises(InsufficientDataError):
            bland_altman(np.array([60.0, 70.0]), np.array([61.0, 71.0]))
        with pytest.raises(InsufficientDataError):
            bland_altman(
                np.array([60.0, 70.0, np.nan, np.nan]),
                np.array([61.0, 71.0, 80.0, 90.0]),
            )

    @given(seed=st.integers(0, 10_000), n=st.integers(3, 20))
    @settings(max_examples=60, deadline=None)
    def test_limits_bracket_mean(self, seed, n):
        rng = np.random.default_rng(seed)
        ref = rng.uniform(40, 180, n)
        est = rng.uniform(40, 180, n)
        res = bland_altman(ref, est)
        assert res.loa_low <= res.mean_diff <= res.loa_high


class TestGrouping:
    def test_bin_labels(self):
        assert duration_bin_label(1.5) == "(0,2]"
        assert duration_bin_label(2.0) == "(0,2]"
        assert duration_bin_label(2.1) == "(2,4]"
        assert duration_bin_label(10.0) == "(8,10]"
        with pytest.raises(ValueError):
            duration_bin_label(0.0)
        with pytest.raises(ValueError):
            duration_bin_label(10.5)

    def test_single_subject_single_kind_pools_windows(self):
        segs = [
            MaeSegment(
                "s1",
                est=hr_series([0, 2], [62.0, 66.0]),
                ref=hr_series([0, 2], [60.0, 60.0]),
                artifact_kind="hand_motion",
            ),
            MaeSegment(
                "s1",
                est=hr_series([0, 2], [70.0, np.nan]),
                ref=hr_series([0, 2], [65.0, 60.0]),
                artifact_kind="hand_motion",
            ),
        ]
        out = group_mae(segs, "artifact_kind")
        assert set(out.values) == {"hand_motion"}
        assert out.values["hand_motion"]["s1"] == pytest.approx((2 + 6 + 5) / 3)

    def test_duration_bins_populated(self):
        segs = [
            MaeSegment(
                "s1",
                est=hr_series([0], [62.0]),
                ref=hr_series([0], [60.0]),
                artifact_duration_s=1.5,
            ),
            MaeSegment(
                "s1",
                est=hr_series([0], [64.0]),
                ref=hr_series([0], [60.0]),
                artifact_duration_s=3.0,
            ),
        ]
        out = group_mae(segs, "duration_bin")
        assert set(out.values) == {"(0,2]", "(2,4]"}
        assert out.values["(0,2]"]["s1"] == pytest.approx(2.0)
        assert out.values["(2,4]"]["s1"] == pytest.approx(4.0)

    def test_unusable_segments_warn_and_drop(self):
        segs = [
            MaeSegment(
                "s1",
                est=hr_series([0], [np.nan]),
                ref=hr_series([0], [60.0]),
                artifact_kind="hand_motion",
            ),
            MaeSegment(
                "s2",
                est=hr_series([0], [61.0]),
                ref=hr_series([0], [60.0]),
                artifact_kind=None,
            ),
        ]
        with pytest.warns(UserWarning):
            out = group_mae(segs, "artifact_kind")
        assert out.values == {}

    def test_unknown_grouping(self):
        with pytest.raises(ValueError):
            group_mae([], "posture")

    def test_corpus_error_grows_with_artifact_duration(self):
        # the gap between the top two bins is ~0.5 bpm, so resolving the
        # ordering needs a corpus in the several-hundred-subject range
        records = make_dataset(640, 5, seed=0)
        segs = []
        for rec in records:
            ref = hr_from_peaks(
                detect_peaks(rec.clean),
                rec.clean.fs,
                len(rec.clean),
                window_s=8.0,
                step_s=2.0,
            )
            est = hr_from_peaks(
                detect_peaks(rec.noisy),
                rec.noisy.fs,
                len(rec.noisy),
                window_s=8.0,
                step_s=2.0,
            )
            segs.append(
                MaeSegment(
                    rec.subject_id,
                    est=est,
                    ref=ref,
                    artifact_duration_s=rec.artifact.duration_s,
                )
            )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = group_mae(segs, "duration_bin")
        order = ["(0,2]", "(2,4]", "(4,6]", "(6,8]", "(8,10]"]
        assert set(out.values) == set(order)
        means = [float(np.mean(list(out.values[k].values()))) for k in order]
        assert all(means[i] <= means[i + 1] for i in range(4))
