import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal as sps

import oracles
from oracles import brute_power, central_rms, hann_periodic
from sdband import dsp
from sdband.errors import ConfigError, DataError, NonFiniteSampleError


def analytic_bandpass_gain(f, band, fs, order=dsp.FILTER_ORDER):
    return oracles.analytic_bandpass_gain(f, band.lo_hz, band.hi_hz, fs, order)


def sine(freq, fs, seconds, amp=1.0):
    t = np.arange(int(seconds * fs)) / fs
    return dsp.Signal(amp * np.sin(2 * np.pi * freq * t), fs)


# -- types --------------------------------------------------------------------


def test_signal_rejects_non_finite():
    with pytest.raises(NonFiniteSampleError):
        dsp.Signal(np.array([0.0, np.nan]), 200)


def test_signal_rejects_bad_rate_and_empty():
    with pytest.raises(ConfigError):
        dsp.Signal(np.zeros(4), 0)
    with pytest.raises(DataError):
        dsp.Signal(np.zeros(0), 200)


def test_canonical_band_values():
    assert (dsp.BANDS["restricted_delta"].lo_hz, dsp.BANDS["restricted_delta"].hi_hz) == (0.5, 1.8)
    assert (dsp.BANDS["alpha"].lo_hz, dsp.BANDS["alpha"].hi_hz) == (8.0, 12.0)
    assert (dsp.BANDS["beta"].lo_hz, dsp.BANDS["beta"].hi_hz) == (12.0, 30.0)
    assert (dsp.BANDS["full_ac"].lo_hz, dsp.BANDS["full_ac"].hi_hz) == (0.5, 45.0)
    with pytest.raises(ConfigError):
        dsp.BandDef("bad", 3.0, 1.0)


def test_channel_order_ignores_request_order():
    assert dsp.canonical_bands(["beta", "alpha", "restricted_delta"]) == ("restricted_delta", "alpha", "beta")
    with pytest.raises(ConfigError):
        dsp.canonical_bands([])


# -- bandpass -----------------------------------------------------------------


def test_bandpass_keeps_10hz_rms():
    x = sine(10, 200, 120)
    y = dsp.bandpass(x, "full_ac")
    assert y.samples.shape == x.samples.shape and y.sample_rate_hz == 200
    assert abs(central_rms(y.samples) / central_rms(x.samples) - 1) < 0.05
    # measured gain agrees with the analytic forward-backward response
    expected = analytic_bandpass_gain(10, dsp.BANDS["full_ac"], 200)
    assert central_rms(y.samples) / central_rms(x.samples) == pytest.approx(expected, rel=1e-3)


def test_bandpass_zero_signal():
    y = dsp.bandpass(dsp.Signal(np.zeros(20000), 200))
    assert not np.any(y.samples)


@pytest.mark.parametrize("freq", [0.05, 90.0])
def test_bandpass_stopband_attenuation(freq):
    x = sine(freq, 200, 600)
    y = dsp.bandpass(x, "full_ac")
    att_db = 20 * np.log10(central_rms(x.samples) / max(central_rms(y.samples), 1e-300))
    assert att_db >= 20
    # analytic response squared for the two passes
    assert -10 * np.log10(analytic_bandpass_gain(freq, dsp.BANDS["full_ac"], 200)) >= 20


@pytest.mark.parametrize("band", ["restricted_delta", "alpha", "beta", "full_ac"])
def test_filter_matches_analytic_butterworth(band):
    band = dsp.BANDS[band]
    sos = dsp.design_bandpass(band, 200)
    f = np.linspace(0.1, 99, 500)
    _, h = sps.sosfreqz(sos, worN=f, fs=200)
    np.testing.assert_allclose(np.abs(h) ** 2, analytic_bandpass_gain(f, band, 200), rtol=1e-8, atol=1e-14)


@pytest.mark.parametrize("band", ["restricted_delta", "alpha", "beta", "full_ac"])
def test_filter_passband_center_within_1db(band):
    band = dsp.BANDS[band]
    centre = math.sqrt(band.lo_hz * band.hi_hz)
    x = sine(centre, 200, 300)
    y = dsp.bandpass(x, band)
    ratio_db = 20 * np.log10(central_rms(y.samples) / central_rms(x.samples))
    assert abs(ratio_db) <= 1.0


@pytest.mark.parametrize("band", ["restricted_delta", "alpha", "beta", "full_ac"])
@pytest.mark.parametrize("fs", [125, 200, 256])
def test_impulse_response_decays_within_transient(band, fs):
    sos = dsp.design_bandpass(dsp.BANDS[band], fs)
    n_tr = dsp.transient_length(sos)
    imp = np.zeros(n_tr + 2000)
    imp[0] = 1.0
    h = sps.sosfilt(sos, imp)
    assert np.max(np.abs(h[n_tr:])) < 1e-8 * np.max(np.abs(h))


def test_bandpass_is_zero_phase():
    fs = 200
    t = np.arange(120 * fs) / fs
    burst = np.exp(-((t - 60) ** 2) / 2) * np.sin(2 * np.pi * 10 * t)
    y = dsp.bandpass(dsp.Signal(burst, fs)).samples
    lag = np.argmax(np.correlate(y, burst, mode="full")) - (burst.size - 1)
    assert lag == 0


def test_bandpass_errors():
    with pytest.raises(ConfigError):
        dsp.bandpass(sine(10, 80, 120), "full_ac")  # 45 Hz above Nyquist
    with pytest.raises(DataError):
        dsp.bandpass(sine(10, 200, 5), "full_ac")


# -- STFT ---------------------------------------------------------------------


def test_stft_constant_signal_energy_at_dc():
    spec = dsp.stft(dsp.Signal(np.ones(120 * 200), 200))
    assert spec.n_frames == 2
    # zero padding spreads the DC line over the Hann main lobe (|f| < 2 / 60 s)
    lobe = spec.freq_axis_hz < 2 / dsp.FRAME_S
    frac = spec.power[lobe].sum(axis=0) / spec.power.sum(axis=0)
    assert np.all(frac >= 0.99)
    assert np.all(np.argmax(spec.power, axis=0) == 0)


def test_stft_sine_peak_and_brute_force_match():
    x = sine(10, 200, 60)
    spec = dsp.stft(x)
    df = spec.freq_axis_hz[1]
    assert spec.power.shape == (8193, 1)
    assert abs(spec.freq_axis_hz[np.argmax(spec.power[:, 0])] - 10) <= df
    frame = x.samples * hann_periodic(12000)
    ref = brute_power(frame, 16384)
    assert np.max(np.abs(spec.power[:, 0] - ref)) <= 1e-9 * np.max(ref)


def test_stft_frame_count():
    assert dsp.stft(dsp.Signal(np.zeros(3600 * 10), 10)).n_frames == 60
    assert dsp.stft(dsp.Signal(np.zeros(3600 * 10 + 599), 10)).n_frames == 60


def test_stft_rejects_short_signal():
    with pytest.raises(DataError):
        dsp.stft(dsp.Signal(np.zeros(59 * 200), 200))


def test_stft_axis_spans_dc_to_nyquist():
    spec = dsp.stft(dsp.Signal(np.zeros(60 * 200), 200))
    f = spec.freq_axis_hz
    assert f[0] == 0 and f[-1] == 100 and np.all(np.diff(f) > 0)


@pytest.mark.parametrize("seed", range(5))
def test_parseval(seed):
    rng = np.random.default_rng(seed)
    x = dsp.Signal(rng.standard_normal(3 * 60 * 20), 20)
    spec = dsp.stft(x)
    frames = dsp.frame_segments(x)
    energy = np.sum(frames ** 2, axis=0)
    np.testing.assert_allclose(spec.power.sum(axis=0), energy, rtol=1e-9)


# -- band images --------------------------------------------------------------


def test_extract_band_sine():
    spec = dsp.stft(sine(10, 200, 60))
    alpha = dsp.extract_band(spec, "alpha")
    beta = dsp.extract_band(spec, "beta")
    assert alpha.image.shape == (32, 1) and not alpha.normalized
    f = spec.freq_axis_hz[spec.band_mask(dsp.BANDS["alpha"])]
    edges = np.cumsum([0] + list(alpha.group_sizes))
    row_of_10hz = next(r for r in range(32) if f[edges[r]] <= 10 < f[edges[r + 1] - 1] + 1e-9)
    assert np.argmax(alpha.image[:, 0]) == row_of_10hz
    total = lambda b: np.sum(b.image[:, 0] * np.asarray(b.group_sizes))
    assert total(beta) < 0.01 * total(alpha)


def test_extract_band_flat_spectrum():
    spec = dsp.stft(dsp.Signal(np.zeros(60 * 200), 200))
    flat = dsp.Spectrogram(np.full_like(spec.power, 3.5), spec.freq_axis_hz)
    for name in ("restricted_delta", "alpha", "beta"):
        assert np.all(dsp.extract_band(flat, name).image == 3.5)


def test_partition_alpha_at_200hz():
    df = 200 / 16384
    f = np.arange(8193) * df
    n_bins = int(np.sum((f >= 8) & (f < 12)))
    assert n_bins in (327, 328)
    sizes = dsp.partition_sizes(n_bins)
    assert len(sizes) == 32 and sum(sizes) == n_bins and max(sizes) - min(sizes) <= 1


@settings(max_examples=50, deadline=None)
@given(n=st.integers(32, 5000))
def test_partition_property(n):
    sizes = dsp.partition_sizes(n)
    assert len(sizes) == 32 and sum(sizes) == n and max(sizes) - min(sizes) <= 1


@pytest.mark.parametrize("band", ["restricted_delta", "alpha", "beta"])
def test_extract_band_preserves_power(band):
    rng = np.random.default_rng(1)
    spec = dsp.stft(dsp.Signal(rng.standard_normal(3 * 60 * 200), 200))
    b = dsp.extract_band(spec, band)
    raw = spec.power[spec.band_mask(dsp.BANDS[band])].sum(axis=0)
    np.testing.assert_allclose((b.image * np.asarray(b.group_sizes)[:, None]).sum(axis=0), raw, rtol=1e-9)


def test_extract_band_needs_32_bins():
    spec = dsp.stft(dsp.Signal(np.zeros(60 * 10), 10))  # df = 10/1024
    with pytest.raises(ConfigError):
        dsp.extract_band(spec, dsp.BandDef("narrow", 1.0, 1.2))


def test_normalize_examples():
    b = dsp.BandSpectrogram(dsp.BANDS["alpha"], np.array([[1.0, 3.0], [2.0, 5.0]]))
    out = dsp.normalize_band(b)
    np.testing.assert_array_equal(out.image, [[0, 0.5], [0.25, 1]])
    assert out.normalized
    const = dsp.normalize_band(dsp.BandSpectrogram(dsp.BANDS["alpha"], np.full((32, 4), 7.0)))
    assert np.all(const.image == 0)


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(x=arrays(np.float64, (4, 5), elements=finite), a=st.floats(0.01, 100), b=st.floats(-100, 100))
def test_normalize_affine_invariant_and_idempotent(x, a, b):
    band = dsp.BANDS["alpha"]
    n1 = dsp.normalize_band(dsp.BandSpectrogram(band, x)).image
    n2 = dsp.normalize_band(dsp.BandSpectrogram(band, a * x + b)).image
    assert np.all((n1 >= 0) & (n1 <= 1))
    if np.ptp(x) > 1e-3 * max(1.0, np.max(np.abs(x))):
        np.testing.assert_allclose(n1, n2, atol=1e-6)
    again = dsp.normalize_band(dsp.BandSpectrogram(band, n1)).image
    np.testing.assert_allclose(again, n1, atol=1e-12)


# -- leaky integral -----------------------------------------------------------


def spectrogram_with_band_power(p):
    """Spectrogram whose full_ac in-band power per frame equals ``p``."""
    freqs = np.arange(0, 51, dtype=float)
    power = np.zeros((freqs.size, len(p)))
    power[10] = p
    power[0] = 99.0  # out of band, must be ignored
    return dsp.Spectrogram(power, freqs)


def recurrence_oracle(p, tau):
    lam = math.exp(-60 / tau)
    y = [p[0]]
    for v in p[1:]:
        y.append(lam * y[-1] + (1 - lam) * v)
    return np.array(y)


def test_leaky_constant_fixed_point():
    y = dsp.leaky_power_integral(spectrogram_with_band_power(np.full(20, 4.2)), "full_ac", 600).values
    np.testing.assert_allclose(y, 4.2, rtol=1e-15)


def test_leaky_impulse_decay():
    p = np.zeros(15)
    p[0] = 1.0
    y = dsp.leaky_power_integral(spectrogram_with_band_power(p), "full_ac", 300).values
    lam = math.exp(-60 / 300)
    np.testing.assert_allclose(y, lam ** np.arange(15), rtol=1e-12)


def test_leaky_matches_oracle():
    p = np.random.default_rng(7).random(30) * 10
    series = dsp.leaky_power_integral(spectrogram_with_band_power(p), "full_ac", 600)
    assert series.values.size == 30 and series.tau_s == 600
    np.testing.assert_allclose(series.values, recurrence_oracle(p, 600), rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(p=arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1e4)),
       tau=st.floats(1.0, 1e5))
def test_leaky_bounded(p, tau):
    y = dsp.leaky_power_integral(spectrogram_with_band_power(p), "full_ac", tau).values
    assert np.all(y >= p.min() - 1e-9 * (1 + p.max())) and np.all(y <= p.max() * (1 + 1e-12) + 1e-12)


def test_leaky_rejects_bad_tau():
    with pytest.raises(ConfigError):
        dsp.leaky_power_integral(spectrogram_with_band_power(np.ones(3)), "full_ac", 0)
