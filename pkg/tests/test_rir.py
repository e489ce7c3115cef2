import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rirfield.errors import (
    BandOutOfRange,
    InsufficientDecay,
    InvalidImpulseResponse,
    IoError,
    RateMismatch,
    ZeroEnergy,
)
from rirfield.rir import (
    BandSpec,
    ImpulseResponse,
    band_filter,
    broadband_rt60,
    drr,
    edf_error,
    exponential_rir,
    metric_errors,
    multiband_rt60,
    read_wav,
    rt60_single,
    schroeder_edc,
    write_metric_report,
    write_wav,
)

FS = 16000


def ir_of(x, fs=FS):
    return ImpulseResponse(np.asarray(x, dtype=float), fs)


def rt60_closed_form(tau):
    return 3.0 * tau * math.log(10.0)


# --- types -----------------------------------------------------------------


@pytest.mark.parametrize("samples", [[], [1.0, np.nan], [np.inf]])
def test_impulse_response_rejects_invalid_samples(samples):
    with pytest.raises(InvalidImpulseResponse):
        ImpulseResponse(np.array(samples, dtype=float), FS)


def test_impulse_response_rejects_bad_rate():
    with pytest.raises(InvalidImpulseResponse):
        ImpulseResponse(np.ones(4), 0)


def test_band_spec_default_and_parse():
    assert BandSpec().centers == (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0)
    assert BandSpec.parse("default") == BandSpec()
    assert BandSpec.parse("500,1000").centers == (500.0, 1000.0)
    lo, hi = BandSpec.edges(1000.0)
    assert lo == pytest.approx(1000 / math.sqrt(2)) and hi == pytest.approx(1000 * math.sqrt(2))


def test_band_spec_requires_increasing_centers():
    with pytest.raises(ValueError):
        BandSpec((1000.0, 500.0))
    with pytest.raises(ValueError):
        BandSpec(())


# --- schroeder_edc ----------------------------------------------------------


def test_edc_single_impulse_drops_to_floor():
    edc = schroeder_edc(ir_of([1.0] + [0.0] * 7))
    assert edc.values_db[0] == 0.0
    np.testing.assert_array_equal(edc.values_db[1:], -120.0)


def test_edc_two_equal_impulses():
    edc = schroeder_edc(ir_of([1.0, 1.0, 0.0, 0.0]))
    np.testing.assert_allclose(edc.values_db[:2], [0.0, -3.0103], atol=1e-4)
    np.testing.assert_array_equal(edc.values_db[2:], -120.0)


def test_edc_exponential_slope():
    tau = 0.1
    edc = schroeder_edc(exponential_rir(tau, FS, duration_s=1.0))
    t = edc.times
    sel = (t > 0.05) & (t < 0.3)
    slope = np.polyfit(t[sel], edc.values_db[sel], 1)[0]
    assert slope == pytest.approx(-(20 / math.log(10)) / tau, rel=1e-3)


def test_edc_zero_energy():
    with pytest.raises(ZeroEnergy):
        schroeder_edc(ir_of(np.zeros(16)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 400), elements=st.floats(-1e3, 1e3)))
def test_edc_non_increasing_property(x):
    if (x**2).sum() == 0.0:  # includes values whose squares underflow
        with pytest.raises(ZeroEnergy):
            schroeder_edc(ir_of(x))
        return
    edc = schroeder_edc(ir_of(x))
    assert edc.values_db[0] == 0.0
    assert np.all(np.diff(edc.values_db) <= 0.0)
    assert np.all(edc.values_db >= -120.0)


# --- band_filter ------------------------------------------------------------


def _sine(f, n=FS):
    return ir_of(np.sin(2 * np.pi * f * np.arange(n) / FS))


@pytest.mark.parametrize("center", BandSpec().centers)
def test_band_filter_passband_and_stopband(center):
    x = _sine(center)
    y = band_filter(x, center)
    assert y.samples.size == x.samples.size
    assert (y.samples**2).sum() >= 0.5 * (x.samples**2).sum()
    if 4 * center < FS / 2:
        x4 = _sine(4 * center)
        assert (band_filter(x4, center).samples ** 2).sum() <= 0.01 * (x4.samples**2).sum()


def test_band_filter_zero_in_zero_out():
    y = band_filter(ir_of(np.zeros(512)), 1000.0)
    np.testing.assert_array_equal(y.samples, 0.0)


def test_band_filter_above_nyquist():
    with pytest.raises(BandOutOfRange):
        band_filter(ir_of(np.ones(64), 8000), 4000.0)


# --- rt60 -------------------------------------------------------------------


@pytest.mark.parametrize("tau, expected", [(0.1, 0.6908), (0.05, 0.3454)])
def test_rt60_single_closed_form(tau, expected):
    rt = rt60_single(schroeder_edc(exponential_rir(tau, FS)))
    assert rt == pytest.approx(expected, rel=0.02)


@pytest.mark.parametrize("tau", [0.05, 0.1, 0.2, 0.5, 1.0])
def test_broadband_rt60_range(tau):
    assert broadband_rt60(exponential_rir(tau, FS)) == pytest.approx(rt60_closed_form(tau), rel=0.02)


def test_rt60_insufficient_decay():
    # 100 equal samples: the curve's last value is 10 log10(1/100) = -20 dB
    with pytest.raises(InsufficientDecay):
        rt60_single(schroeder_edc(ir_of(np.ones(100))))


def test_multiband_rt60_exponential():
    ir = exponential_rir(0.1, FS, duration_s=1.0, carrier="multisine")
    fp = multiband_rt60(ir, BandSpec())
    assert len(fp) == 6
    np.testing.assert_allclose(fp.rt60_s, rt60_closed_form(0.1), rtol=0.05)


def test_multiband_rt60_deterministic_and_single_band():
    ir = exponential_rir(0.2, FS, carrier="noise", seed=3)
    a = multiband_rt60(ir)
    b = multiband_rt60(ir)
    np.testing.assert_array_equal(a.rt60_s, b.rt60_s)
    assert len(multiband_rt60(ir, BandSpec((1000.0,)))) == 1


def test_multiband_rt60_falls_back_to_broadband():
    # energy only at 1 kHz: the 125 Hz band sees no decay to speak of
    t = np.arange(FS) / FS
    ir = ir_of(np.exp(-t / 0.1) * np.sin(2 * np.pi * 1000 * t))
    fp = multiband_rt60(ir, BandSpec((125.0, 1000.0)))
    assert np.all(np.isfinite(fp.rt60_s)) and np.all(fp.rt60_s > 0)


def test_multiband_rt60_band_out_of_range():
    with pytest.raises(BandOutOfRange):
        multiband_rt60(exponential_rir(0.1, 8000), BandSpec((4000.0,)))


# --- drr --------------------------------------------------------------------


def test_drr_ratio_examples():
    x = np.zeros(FS)
    x[1000] = 1.0
    x[5000] = 0.1  # 250 ms after the peak, energy 0.01
    assert drr(ir_of(x)) == pytest.approx(20.0)
    x[5000] = 1.0
    assert drr(ir_of(x)) == pytest.approx(0.0)


def test_drr_single_impulse_clamps():
    x = np.zeros(1000)
    x[10] = 1.0
    assert drr(ir_of(x)) == 60.0


def test_drr_window_edges():
    # a sample 2 ms after the peak is direct; one 3 ms after is late
    x = np.zeros(FS)
    x[1000] = 1.0
    x[1000 + 32] = 1.0
    assert drr(ir_of(x)) == 60.0
    x[1000 + 48] = 1.0
    assert drr(ir_of(x)) == pytest.approx(10 * math.log10(2.0))


# --- metric_errors ----------------------------------------------------------


def test_metric_errors_identity_and_scale():
    ref = exponential_rir(0.2, FS, carrier="noise", seed=1)
    assert metric_errors(ref, ref).as_tuple() == (0.0, 0.0, 0.0)
    half = ir_of(0.5 * ref.samples)
    np.testing.assert_allclose(metric_errors(half, ref).as_tuple(), 0.0, atol=1e-9)


def test_metric_errors_rt60_ratio():
    ref = exponential_rir(0.10, FS, duration_s=1.2, carrier="multisine")
    pred = exponential_rir(0.11, FS, duration_s=1.2, carrier="multisine")
    assert metric_errors(pred, ref).rt60_err_pct == pytest.approx(0.10, abs=0.01)


def test_metric_errors_rate_mismatch():
    with pytest.raises(RateMismatch):
        metric_errors(exponential_rir(0.1, 16000), exponential_rir(0.1, 8000, duration_s=0.8))


def test_edf_error_closed_form():
    # two exponentials: EDCs are lines of slope -8.686/tau dB/s until ref hits -30 dB
    ref = exponential_rir(0.1, FS, duration_s=2.0)
    pred = exponential_rir(0.2, FS, duration_s=2.0)
    k = 20 / math.log(10)
    t30 = 30 / (k / 0.1)
    expected = 0.5 * (k / 0.1 - k / 0.2) * t30
    assert edf_error(pred, ref) == pytest.approx(expected, rel=0.01)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.5), st.floats(1e-3, 1e3))
def test_metrics_scale_invariant_property(seed, tau, scale):
    ref = exponential_rir(tau, FS, duration_s=8 * tau, carrier="noise", seed=seed)
    scaled = ir_of(scale * ref.samples)
    np.testing.assert_allclose(metric_errors(scaled, ref).as_tuple(), 0.0, atol=1e-6)
    assert drr(scaled) == pytest.approx(drr(ref), abs=1e-9)


# --- files ------------------------------------------------------------------


def test_wav_round_trip(tmp_path):
    ir = exponential_rir(0.1, FS, carrier="noise")
    write_wav(tmp_path / "x.wav", ir)
    back = read_wav(tmp_path / "x.wav")
    assert back.sample_rate == FS
    np.testing.assert_allclose(back.samples, ir.samples, rtol=1e-6, atol=1e-7)


def test_wav_int16(tmp_path):
    from scipy.io import wavfile

    wavfile.write(tmp_path / "p.wav", 8000, np.array([0, 16384, -32768], dtype=np.int16))
    ir = read_wav(tmp_path / "p.wav")
    assert ir.sample_rate == 8000
    np.testing.assert_allclose(ir.samples, [0.0, 0.5, -1.0])


def test_read_wav_missing(tmp_path):
    with pytest.raises(IoError):
        read_wav(tmp_path / "nope.wav")


def test_metric_report_columns(tmp_path):
    ref = exponential_rir(0.1, FS)
    write_metric_report(tmp_path / "m.csv", [("r0", "p0", metric_errors(ref, ref))])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == ["room_id,pair_id,rt60_err_pct,edf_err_db,drr_err_db", "r0,p0,0.000000,0.000000,0.000000"]
