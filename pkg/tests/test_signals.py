"""Front-end chain: band-pass design, filtering, resampling, normalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pulse_csc import (
    BandPassSpec,
    Signal,
    design_cheby2_bandpass,
    filter_signal,
    normalize_01,
    resample,
)
from pulse_csc.errors import (
    DesignFailureError,
    InvalidSpecError,
    UnsupportedRatioError,
)
from pulse_csc.signals import BiquadCascade

FS = 125.0


def default_cascade(fs=FS):
    return design_cheby2_bandpass(BandPassSpec(), fs)


class TestSignal:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Signal(np.array([0.0, np.nan]), FS)

    def test_rejects_nonpositive_fs(self):
        with pytest.raises(ValueError):
            Signal(np.zeros(4), 0.0)

    def test_rejects_2d(self):
        with pytest.raises(ValueError):
            Signal(np.zeros((4, 2)), FS)

    def test_duration(self):
        assert Signal(np.zeros(1250), FS).duration_s == pytest.approx(10.0)


class TestBandpassDesign:
    def test_stopband_attenuation_on_grid(self):
        # oracle: evaluate H(e^{jw}) from the returned coefficients on a grid
        casc = default_cascade()
        grid = np.linspace(0.01, FS / 2 - 0.01, 4096)
        db = casc.response_db(grid)
        assert casc.response_db(0.05)[0] <= -40.0
        assert casc.response_db(40.0)[0] <= -40.0
        # band center (geometric mean of 0.5 and 18 is 3 Hz)
        assert casc.response_db(3.0)[0] >= -3.0
        # the grid covers the stopbands as well
        assert np.all(db[grid <= 0.05] <= -40.0)
        assert np.all(db[grid >= 40.0] <= -40.0)

    def test_edge_at_or_above_nyquist_rejected(self):
        with pytest.raises(InvalidSpecError):
            design_cheby2_bandpass(BandPassSpec(low_hz=70.0, high_hz=80.0), FS)

    def test_bad_spec_fields_rejected(self):
        with pytest.raises(InvalidSpecError):
            BandPassSpec(order=3)  # odd order
        with pytest.raises(InvalidSpecError):
            BandPassSpec(low_hz=18.0, high_hz=0.5)
        with pytest.raises(InvalidSpecError):
            BandPassSpec(stop_atten_db=-1.0)

    def test_sections_report_stable_poles(self):
        casc = default_cascade()
        for row in casc.sections:
            poles = np.roots(row[3:])
            assert np.all(np.abs(poles) < 1.0)

    def test_unstable_cascade_rejected(self):
        with pytest.raises(DesignFailureError):
            BiquadCascade(np.array([[1.0, 0, 0, 1.0, -2.1, 1.1]]), FS)

    @settings(max_examples=30, deadline=None)
    @given(
        low=st.floats(min_value=0.05, max_value=20.0),
        width=st.floats(min_value=0.5, max_value=40.0),
    )
    def test_random_valid_specs_design_stable(self, low, width):
        high = min(low + width, FS / 2 - 0.5)
        if high <= low:
            return
        casc = design_cheby2_bandpass(
            BandPassSpec(low_hz=low, high_hz=high), FS
        )
        # constructor validates pole radii; also sanity-check DC rejection
        assert casc.n_sections >= 1
        assert casc.response_db(1e-3)[0] < 0.0


class TestFilterSignal:
    def test_zero_in_zero_out(self):
        out = filter_signal(Signal(np.zeros(500), FS), default_cascade())
        assert np.all(out.samples == 0.0)

    def test_identity_cascade_passes_impulse(self):
        ident = BiquadCascade(np.array([[1.0, 0, 0, 1.0, 0, 0]]), FS)
        x = np.zeros(64)
        x[10] = 1.0
        out = filter_signal(Signal(x, FS), ident)
        assert np.array_equal(out.samples, x)

    def test_length_and_fs_preserved(self):
        out = filter_signal(Signal(np.random.default_rng(0).standard_normal(777), FS), default_cascade())
        assert len(out) == 777
        assert out.fs == FS

    def test_sinusoid_steady_state_gain_matches_response(self):
        # drive with 10 Hz, discard 2 s of transient, demodulate over whole cycles
        casc = default_cascade()
        t = np.arange(int(6 * FS)) / FS
        x = np.sin(2 * np.pi * 10.0 * t)
        y = filter_signal(Signal(x, FS), casc).samples
        keep = slice(int(2 * FS), int(6 * FS))
        phasor = np.exp(-2j * np.pi * 10.0 * t[keep])
        amp = 2.0 * np.abs(np.mean(y[keep] * phasor))
        gain_db = 20.0 * np.log10(amp)
        assert gain_db == pytest.approx(casc.response_db(10.0)[0], abs=0.5)

    def test_fs_mismatch_rejected(self):
        with pytest.raises(InvalidSpecError):
            filter_signal(Signal(np.zeros(10), 64.0), default_cascade())

    def test_linearity(self):
        rng = np.random.default_rng(3)
        casc = default_cascade()
        x = rng.standard_normal(400)
        z = rng.standard_normal(400)
        a, b = 1.7, -0.4
        lhs = filter_signal(Signal(a * x + b * z, FS), casc).samples
        rhs = (
            a * filter_signal(Signal(x, FS), casc).samples
            + b * filter_signal(Signal(z, FS), casc).samples
        )
        scale = np.max(np.abs(rhs))
        assert np.max(np.abs(lhs - rhs)) <= 1e-10 * scale

    def test_zero_phase_flag_runs_both_directions(self):
        casc = default_cascade()
        t = np.arange(int(4 * FS)) / FS
        x = Signal(np.sin(2 * np.pi * 3.0 * t), FS)
        causal = filter_signal(x, casc).samples
        zp = filter_signal(x, casc, zero_phase=True).samples
        assert not np.allclose(causal, zp)


class TestResample:
    def test_same_fs_identity(self):
        x = Signal(np.random.default_rng(1).standard_normal(100), FS)
        out = resample(x, FS)
        assert np.array_equal(out.samples, x.samples)

    def test_sine_64_to_125(self):
        fs0 = 64.0
        t = np.arange(int(10 * fs0)) / fs0
        x = Signal(np.sin(2 * np.pi * 1.0 * t), fs0)
        out = resample(x, 125.0)
        assert out.fs == 125.0
        t2 = np.arange(len(out)) / 125.0
        keep = slice(int(1 * 125), int(9 * 125))
        phasor = np.exp(-2j * np.pi * 1.0 * t2[keep])
        amp = 2.0 * np.abs(np.mean(out.samples[keep] * phasor))
        assert abs(amp - 1.0) < 0.01

    def test_output_length_rounds(self):
        x = Signal(np.zeros(640), 64.0)
        assert len(resample(x, 125.0)) == 1250

    def test_constant_preserved(self):
        x = Signal(np.full(320, 3.25), 64.0)
        out = resample(x, 125.0)
        assert np.max(np.abs(out.samples - 3.25)) < 1e-6

    def test_irrational_ratio_rejected(self):
        x = Signal(np.zeros(100), 1.0)
        with pytest.raises(UnsupportedRatioError):
            resample(x, 1.0000001)

    def test_round_trip_band_limited(self):
        # content below 0.4 * min(fs) so both directions are transparent
        rng = np.random.default_rng(5)
        t = np.arange(int(8 * FS)) / FS
        x = np.zeros_like(t)
        for f in (3.0, 7.0, 11.0):
            x += rng.uniform(0.5, 1.5) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        down = resample(Signal(x, FS), 64.0)
        back = resample(down, FS)
        m = min(len(back), len(x))
        keep = slice(int(0.5 * FS), m - int(0.5 * FS))
        err = back.samples[:m][keep] - x[:m][keep]
        rel = np.sqrt(np.mean(err**2) / np.mean(x[keep] ** 2))
        assert rel < 1e-2


class TestNormalize:
    def test_three_point_example(self):
        out, norm = normalize_01(Signal(np.array([0.0, 5.0, 10.0]), FS))
        assert np.allclose(out.samples, [0.0, 0.5, 1.0])
        assert not norm.degenerate

    def test_two_point_example(self):
        out, _ = normalize_01(Signal(np.array([-1.0, 1.0]), FS))
        assert np.allclose(out.samples, [0.0, 1.0])

    def test_constant_flags_degenerate(self):
        out, norm = normalize_01(Signal(np.full(5, 3.0), FS))
        assert np.all(out.samples == 0.5)
        assert norm.degenerate

    def test_invert_round_trip(self):
        x = Signal(np.random.default_rng(2).standard_normal(50), FS)
        out, norm = normalize_01(x)
        back = norm.invert(out)
        assert np.max(np.abs(back.samples - x.samples)) < 1e-12

    def test_degenerate_invert_restores_constant(self):
        x = Signal(np.full(5, 3.0), FS)
        out, norm = normalize_01(x)
        assert np.all(norm.invert(out).samples == 3.0)

    @settings(max_examples=50, deadline=None)
    @given(
        data=st.lists(
            st.floats(min_value=-1e3, max_value=1e3, allow_nan=False),
            min_size=2,
            max_size=40,
        ),
        a=st.floats(min_value=1e-2, max_value=1e2),
        b=st.floats(min_value=-1e2, max_value=1e2),
    )
    def test_bounds_and_affine_invariance(self, data, a, b):
        x = np.asarray(data, dtype=np.float64)
        if np.ptp(x) < 0.1:  # below this the affine image can round to flat
            return
        out, _ = normalize_01(Signal(x, FS))
        assert np.all(out.samples >= 0.0) and np.all(out.samples <= 1.0)
        out2, _ = normalize_01(Signal(a * x + b, FS))
        assert np.max(np.abs(out2.samples - out.samples)) < 1e-9
