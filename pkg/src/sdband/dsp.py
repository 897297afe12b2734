"""Signal-processing kernel: AC bandpass, minute-resolution STFT, band images
and the leaky power integral.

All routines are pure functions over 64-bit arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, DataError, NonFiniteSampleError

FRAME_S = 60.0
BAND_ROWS = 32
FILTER_ORDER = 2  # per band edge; bandpass order is twice this (two biquads)
TRANSIENT_DECAY = 1e-8


@dataclass(frozen=True)
class BandDef:
    name: str
    lo_hz: float
    hi_hz: float

    def __post_init__(self):
        if not (0 < self.lo_hz < self.hi_hz):
            raise ConfigError(f"band {self.name}: need 0 < lo < hi, got [{self.lo_hz}, {self.hi_hz}]")


BANDS = {
    "restricted_delta": BandDef("restricted_delta", 0.5, 1.8),
    "delta": BandDef("delta", 0.5, 4.0),
    "alpha": BandDef("alpha", 8.0, 12.0),
    "beta": BandDef("beta", 12.0, 30.0),
    "full_ac": BandDef("full_ac", 0.5, 45.0),
}

# Channel order used whenever several bands are stacked.
CHANNEL_ORDER = ("restricted_delta", "delta", "alpha", "beta", "full_ac")


def get_band(band: str | BandDef) -> BandDef:
    if isinstance(band, BandDef):
        return band
    try:
        return BANDS[band]
    except KeyError:
        raise ConfigError(f"unknown band {band!r}; known: {', '.join(BANDS)}") from None


def canonical_bands(bands) -> tuple[str, ...]:
    """Deduplicate band names and sort them into the fixed channel order."""
    names = {get_band(b).name for b in bands}
    if not names:
        raise ConfigError("at least one band is required")
    unknown = names.difference(CHANNEL_ORDER)
    if unknown:
        raise ConfigError(f"bands {sorted(unknown)} cannot be stacked")
    return tuple(n for n in CHANNEL_ORDER if n in names)


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 1:
            raise DataError("signal must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(x)):
            raise NonFiniteSampleError("signal contains non-finite samples")
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class Spectrogram:
    """One-sided power per (frequency bin, minute frame).

    Interior bins are doubled so that each column sums to the energy of the
    windowed frame.
    """

    power: np.ndarray  # [n_freq, n_frames]
    freq_axis_hz: np.ndarray
    frame_duration_s: float = FRAME_S

    @property
    def n_frames(self) -> int:
        return self.power.shape[1]

    def band_mask(self, band: BandDef) -> np.ndarray:
        f = self.freq_axis_hz
        return (f >= band.lo_hz) & (f < band.hi_hz)


@dataclass(frozen=True)
class BandSpectrogram:
    band: BandDef
    image: np.ndarray  # [BAND_ROWS, n_frames]
    normalized: bool = False
    group_sizes: tuple[int, ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class PowerSeries:
    values: np.ndarray
    tau_s: float


# -- bandpass -----------------------------------------------------------------


def design_bandpass(band: BandDef, sample_rate_hz: float) -> np.ndarray:
    """Butterworth bandpass as second-order sections."""
    nyq = sample_rate_hz / 2
    if band.hi_hz >= nyq:
        raise ConfigError(f"band upper edge {band.hi_hz} Hz must be below Nyquist ({nyq} Hz)")
    return sps.butter(FILTER_ORDER, [band.lo_hz, band.hi_hz], btype="bandpass",
                      fs=sample_rate_hz, output="sos")


def transient_length(sos: np.ndarray) -> int:
    """Samples after which the impulse response has decayed below 1e-8 of peak.

    Bounded from the slowest pole; the factor 2 absorbs the polynomial growth
    from clustered poles.
    """
    _, poles, _ = sps.sos2zpk(sos)
    r = float(np.max(np.abs(poles)))
    return int(math.ceil(2 * math.log(TRANSIENT_DECAY) / math.log(r)))


def bandpass(sig: Signal, band: str | BandDef = "full_ac") -> Signal:
    """Zero-phase (forward-backward) Butterworth bandpass."""
    band = get_band(band)
    sos = design_bandpass(band, sig.sample_rate_hz)
    n_tr = transient_length(sos)
    if sig.samples.size < 3 * n_tr:
        raise DataError(f"signal of {sig.samples.size} samples is shorter than 3x the "
                        f"filter transient ({n_tr} samples)")
    if not np.any(sig.samples):
        return Signal(np.zeros_like(sig.samples), sig.sample_rate_hz)
    y = sps.sosfiltfilt(sos, sig.samples, padtype="odd", padlen=min(n_tr, sig.samples.size - 1))
    return Signal(y, sig.sample_rate_hz)


# -- STFT ---------------------------------------------------------------------


def frame_length(sample_rate_hz: float) -> int:
    return int(round(FRAME_S * sample_rate_hz))


def fft_length(n: int) -> int:
    return 1 << (n - 1).bit_length()


def fold_power(spectrum: np.ndarray, nfft: int) -> np.ndarray:
    """|X|^2 / nfft on the one-sided half spectrum (axis 0), interior bins doubled."""
    p = np.abs(spectrum) ** 2 / nfft
    p[1:nfft // 2] *= 2
    return p


def frame_segments(sig: Signal) -> np.ndarray:
    """Non-overlapping, Hann-windowed 60 s frames, one per column."""
    L = frame_length(sig.sample_rate_hz)
    n_frames = sig.samples.size // L
    if n_frames < 1:
        raise DataError(f"STFT needs at least {FRAME_S:g} s of signal, got {sig.duration_s:g} s")
    win = sps.windows.hann(L, sym=False)
    return sig.samples[: n_frames * L].reshape(n_frames, L).T * win[:, None]


def stft(sig: Signal) -> Spectrogram:
    frames = frame_segments(sig)
    nfft = fft_length(frames.shape[0])
    power = fold_power(np.fft.rfft(frames, n=nfft, axis=0), nfft)
    freqs = np.fft.rfftfreq(nfft, d=1.0 / sig.sample_rate_hz)
    return Spectrogram(power=power, freq_axis_hz=freqs)


# -- band images --------------------------------------------------------------


def partition_sizes(n_bins: int, n_groups: int = BAND_ROWS) -> list[int]:
    """Contiguous near-equal group sizes; larger groups come first."""
    q, r = divmod(n_bins, n_groups)
    return [q + 1] * r + [q] * (n_groups - r)


def extract_band(spec: Spectrogram, band: str | BandDef) -> BandSpectrogram:
    band = get_band(band)
    f = spec.freq_axis_hz
    if band.lo_hz < f[0] or band.hi_hz > f[-1]:
        raise ConfigError(f"band {band.name} lies outside the spectrogram frequency range")
    idx = np.flatnonzero(spec.band_mask(band))
    if idx.size < BAND_ROWS:
        raise ConfigError(f"band {band.name} has {idx.size} frequency bins; "
                          f"need at least {BAND_ROWS} (use a longer FFT)")
    sizes = partition_sizes(idx.size)
    edges = np.concatenate([[0], np.cumsum(sizes)])
    block = spec.power[idx]
    sums = np.add.reduceat(block, edges[:-1], axis=0)
    image = sums / np.asarray(sizes, dtype=np.float64)[:, None]
    return BandSpectrogram(band=band, image=image, normalized=False, group_sizes=tuple(sizes))


def minmax(x: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant input maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def normalize_band(bspec: BandSpectrogram) -> BandSpectrogram:
    if not np.all(np.isfinite(bspec.image)):
        raise DataError("band image contains non-finite values")
    return replace(bspec, image=minmax(bspec.image), normalized=True)


# -- leaky power integral -----------------------------------------------------


def leak_factor(tau_s: float, step_s: float = FRAME_S) -> float:
    return math.exp(-step_s / tau_s)


def band_power(spec: Spectrogram, band: str | BandDef) -> np.ndarray:
    """Total in-band power of each frame."""
    return spec.power[spec.band_mask(get_band(band))].sum(axis=0)


def leaky_power_integral(spec: Spectrogram, band: str | BandDef = "full_ac",
                         tau_s: float = 600.0) -> PowerSeries:
    """Exponentially leaky running average of per-minute band power.

    ``y[0] = p[0]`` and ``y[n] = lam * y[n-1] + (1 - lam) * p[n]`` with
    ``lam = exp(-60 / tau_s)``.
    """
    if not tau_s > 0:
        raise ConfigError(f"tau_s must be positive, got {tau_s}")
    p = band_power(spec, band)
    lam = leak_factor(tau_s, spec.frame_duration_s)
    y, _ = sps.lfilter([1.0 - lam], [1.0, -lam], p, zi=[lam * p[0]])
    return PowerSeries(values=y, tau_s=float(tau_s))
