"""Recordings, SD annotations, the synthetic ECoG generator and 30-minute
windowing.

Recording file layout (version 1)::

    version: 1
    id: <recording id>
    sample_rate_hz: <float repr>
    n_samples: <int>
    annotations: <onset_s>,<duration_s>;<onset_s>,<duration_s>;...
    <n_samples little-endian float64 values>

Each header line ends with a single ``\\n``; floats use Python ``repr`` so the
round trip is bit-exact.  The sample payload starts immediately after the
newline of the ``annotations`` line.

Window cache layout (version 1), all integers little-endian ``uint32``::

    magic b"SDWC", version, n_windows, C, H, W, n_ids
    n_ids x (length, utf-8 recording id)
    length, utf-8 comma-separated band names
    n_windows x record:
        label (uint8), recording id index, start minute,
        C*H*W float64 image values (row-major), W float64 vector values
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import dsp
from .errors import (
    AnnotationRangeError,
    ConfigError,
    DataError,
    FormatError,
    HeaderError,
    NonFiniteSampleError,
    PlacementError,
    TruncatedFileError,
    VersionError,
)

RECORDING_VERSION = 1
CACHE_MAGIC = b"SDWC"
CACHE_VERSION = 1
WINDOW_MIN = 30
LABEL_RULES = ("onset", "central_third")


@dataclass(frozen=True)
class SdAnnotation:
    onset_s: float
    duration_s: float

    def __post_init__(self):
        if not (math.isfinite(self.onset_s) and self.onset_s >= 0):
            raise AnnotationRangeError(f"annotation onset must be >= 0, got {self.onset_s}")
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise AnnotationRangeError(f"annotation duration must be > 0, got {self.duration_s}")

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s


@dataclass(frozen=True)
class EcogRecording:
    id: str
    signal: dsp.Signal
    annotations: tuple[SdAnnotation, ...] = ()

    def __post_init__(self):
        if not self.id or any(c in self.id for c in "\r\n"):
            raise DataError(f"invalid recording id {self.id!r}")
        anns = tuple(sorted(self.annotations, key=lambda a: a.onset_s))
        dur = self.signal.duration_s
        for prev, cur in zip(anns, anns[1:]):
            if cur.onset_s < prev.end_s:
                raise AnnotationRangeError(f"annotations overlap at {cur.onset_s} s")
        for a in anns:
            if a.end_s > dur:
                raise AnnotationRangeError(
                    f"annotation [{a.onset_s}, {a.end_s}] s exceeds recording duration {dur} s")
        object.__setattr__(self, "annotations", anns)

    @property
    def n_minutes(self) -> int:
        return int(self.signal.samples.size // dsp.frame_length(self.signal.sample_rate_hz))

    def __eq__(self, other):
        if not isinstance(other, EcogRecording):
            return NotImplemented
        return (self.id == other.id
                and self.signal.sample_rate_hz == other.signal.sample_rate_hz
                and self.annotations == other.annotations
                and self.signal.samples.tobytes() == other.signal.samples.tobytes())


# -- recording files ----------------------------------------------------------


def write_recording(rec: EcogRecording, path) -> None:
    anns = ";".join(f"{a.onset_s!r},{a.duration_s!r}" for a in rec.annotations)
    header = (f"version: {RECORDING_VERSION}\n"
              f"id: {rec.id}\n"
              f"sample_rate_hz: {rec.signal.sample_rate_hz!r}\n"
              f"n_samples: {rec.signal.samples.size}\n"
              f"annotations: {anns}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(rec.signal.samples.astype("<f8").tobytes())


def _header_field(fh, key: str) -> str:
    line = fh.readline(1 << 20)
    if not line.endswith(b"\n"):
        raise HeaderError(f"missing or unterminated header line {key!r}")
    try:
        text = line[:-1].decode("utf-8")
    except UnicodeDecodeError:
        raise HeaderError(f"header line {key!r} is not utf-8") from None
    name, sep, value = text.partition(": ")
    if not sep:
        name, sep, value = text.partition(":")
    if name != key or not sep:
        raise HeaderError(f"expected header field {key!r}, got {text[:40]!r}")
    return value.strip()


def ingest(path) -> EcogRecording:
    """Read a recording file, enforcing every recording invariant."""
    with open(path, "rb") as fh:
        version = _header_field(fh, "version")
        if version != str(RECORDING_VERSION):
            if not version.isdigit():
                raise HeaderError(f"malformed version {version!r}")
            raise VersionError(f"unsupported recording version {version}")
        rec_id = _header_field(fh, "id")
        try:
            fs = float(_header_field(fh, "sample_rate_hz"))
            n = int(_header_field(fh, "n_samples"))
        except ValueError as exc:
            raise HeaderError(f"malformed numeric header: {exc}") from None
        ann_text = _header_field(fh, "annotations")
        anns = []
        try:
            for item in filter(None, ann_text.split(";")):
                onset, dur = item.split(",")
                anns.append(SdAnnotation(float(onset), float(dur)))
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise HeaderError(f"malformed annotation list: {exc}") from None
        if n < 1:
            raise HeaderError(f"n_samples must be positive, got {n}")
        payload = fh.read()
    if len(payload) < 8 * n:
        raise TruncatedFileError(f"expected {8 * n} payload bytes, found {len(payload)}")
    if len(payload) > 8 * n:
        raise FormatError(f"{len(payload) - 8 * n} unexpected trailing bytes")
    samples = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(samples)):
        raise NonFiniteSampleError(f"{path}: non-finite sample values")
    return EcogRecording(rec_id, dsp.Signal(samples, fs), tuple(anns))


# -- synthetic generator ------------------------------------------------------

SYNTH_BANDS = {"delta": (0.5, 4.0), "alpha": (8.0, 12.0), "beta": (12.0, 30.0)}


def _default_base():
    return {"delta": 40.0, "alpha": 12.0, "beta": 2.5}


def _default_depth():
    return {"delta": 0.6, "alpha": 0.35, "beta": 0.5}


@dataclass
class SynthConfig:
    """Generative model of a brain-injury ECoG channel with SD depressions.

    Band amplitudes are RMS values in microvolts.  Each SD multiplies every
    band amplitude by its ``suppression_depth`` for ``suppression_duration_s``
    (cosine ramps of ``onset_ramp_s`` at both ends included).  A white noise
    floor (amplifier noise) is not suppressed, and a slow log-normal drift
    modulates all bands outside SDs too.
    """

    duration_s: float = 86400.0
    sample_rate_hz: float = 200.0
    n_events: int = 12
    band_base_power: dict = field(default_factory=_default_base)
    suppression_depth: dict = field(default_factory=_default_depth)
    suppression_duration_s: float = 900.0
    onset_ramp_s: float = 120.0
    min_gap_s: float = 1800.0
    noise_floor_uv: float = 4.0
    drift_sd: float = 0.25
    drift_tau_s: float = 1800.0
    noise_seed: int = 0

    def validate(self) -> None:
        if self.duration_s < dsp.FRAME_S or self.sample_rate_hz <= 0:
            raise ConfigError("duration must be >= 60 s and sample rate positive")
        if self.sample_rate_hz / 2 <= dsp.BANDS["full_ac"].hi_hz:
            raise ConfigError("sample rate must exceed twice the 45 Hz AC band edge")
        if set(self.band_base_power) != set(SYNTH_BANDS) or set(self.suppression_depth) != set(SYNTH_BANDS):
            raise ConfigError(f"per-band settings must cover exactly {sorted(SYNTH_BANDS)}")
        b = self.band_base_power
        if not b["delta"] > b["alpha"] > b["beta"] > 0:
            raise ConfigError("base power must satisfy delta > alpha > beta > 0")
        d = self.suppression_depth
        if not all(0 < v <= 1 for v in d.values()):
            raise ConfigError("suppression depths must lie in (0, 1]")
        if self.n_events > 0 and not any(v < 1 for v in d.values()):
            raise ConfigError("at least one band must be suppressed (depth < 1)")
        if self.n_events < 0:
            raise ConfigError("n_events must be >= 0")
        if self.suppression_duration_s < 2 * self.onset_ramp_s or self.onset_ramp_s < 0:
            raise ConfigError("suppression duration must cover both ramps")
        if self.noise_floor_uv < 0 or self.drift_sd < 0 or self.drift_tau_s <= 0 or self.min_gap_s < 0:
            raise ConfigError("noise floor, drift and gap settings must be non-negative")


def place_events(cfg: SynthConfig, rng: np.random.Generator) -> list[SdAnnotation]:
    """Random non-overlapping event onsets separated by at least ``min_gap_s``."""
    n = cfg.n_events
    if n == 0:
        return []
    dur = cfg.suppression_duration_s
    slack = cfg.duration_s - n * dur - (n - 1) * cfg.min_gap_s
    if slack < 0:
        raise PlacementError(f"{n} events of {dur} s with {cfg.min_gap_s} s gaps "
                             f"do not fit in {cfg.duration_s} s")
    # slack split into n+1 random gaps (uniform spacings)
    cuts = np.sort(rng.uniform(0.0, slack, size=n))
    onsets = cuts + np.arange(n) * (dur + cfg.min_gap_s)
    return [SdAnnotation(float(t), float(dur)) for t in onsets]


def suppression_envelope(t: np.ndarray, events: Sequence[SdAnnotation], depth: float,
                         ramp_s: float) -> np.ndarray:
    env = np.ones_like(t)
    if depth == 1.0:
        return env
    for ev in events:
        sel = slice(*np.searchsorted(t, [ev.onset_s, ev.end_s]))
        u = t[sel] - ev.onset_s
        # 0 outside the event, 1 on the plateau, raised cosine on the ramps
        w = np.ones_like(u)
        if ramp_s > 0:
            up = u < ramp_s
            w[up] = 0.5 - 0.5 * np.cos(np.pi * u[up] / ramp_s)
            down = u > ev.duration_s - ramp_s
            w[down] = 0.5 - 0.5 * np.cos(np.pi * (ev.duration_s - u[down]) / ramp_s)
        env[sel] *= 1.0 - (1.0 - depth) * w
    return env


def _drift(n_steps: int, step_s: float, tau_s: float, sd: float, rng) -> np.ndarray:
    """Stationary AR(1) log-amplitude process with unit-free std ``sd``."""
    a = math.exp(-step_s / tau_s)
    e = rng.standard_normal(n_steps) * sd * math.sqrt(1 - a * a)
    out = np.empty(n_steps)
    out[0] = rng.standard_normal() * sd
    for i in range(1, n_steps):
        out[i] = a * out[i - 1] + e[i]
    return out


def synthesize(cfg: SynthConfig | None = None, rec_id: str = "synth") -> EcogRecording:
    """Sum of band-limited noise components with injected SD depressions."""
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.noise_seed)
    fs = cfg.sample_rate_hz
    n = int(round(cfg.duration_s * fs))
    events = place_events(cfg, rng)

    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)

    step_s = 10.0
    n_steps = int(math.ceil(cfg.duration_s / step_s)) + 1
    coarse_t = np.arange(n_steps) * step_s
    common = _drift(n_steps, step_s, cfg.drift_tau_s, cfg.drift_sd, rng)

    t = np.arange(n) / fs
    x = np.zeros(n)
    for name, (lo, hi) in SYNTH_BANDS.items():
        mask = (freqs >= lo) & (freqs < hi)
        comp = np.fft.irfft(np.where(mask, spectrum, 0), n=n)
        comp *= cfg.band_base_power[name] / np.sqrt(np.mean(comp * comp))
        own = _drift(n_steps, step_s, cfg.drift_tau_s, cfg.drift_sd / 2, rng)
        gain = np.interp(t, coarse_t, np.exp(common + own))
        gain *= suppression_envelope(t, events, cfg.suppression_depth[name], cfg.onset_ramp_s)
        x += comp * gain
        del comp, gain
    if cfg.noise_floor_uv > 0:
        x += rng.standard_normal(n) * cfg.noise_floor_uv
    return EcogRecording(rec_id, dsp.Signal(x, fs), tuple(events))


# -- features and windows -----------------------------------------------------


@dataclass(frozen=True)
class RecordingFeatures:
    """Un-normalized per-minute band images and leaky power for one recording."""

    rec_id: str
    images: dict  # band name -> [32, n_frames]
    power: np.ndarray  # [n_frames]
    onsets_s: tuple[float, ...]

    @property
    def n_minutes(self) -> int:
        return self.power.size


def recording_features(rec: EcogRecording, bands=("restricted_delta", "alpha", "beta"),
                       power_band: str = "full_ac", tau_s: float = 600.0) -> RecordingFeatures:
    filtered = dsp.bandpass(rec.signal, "full_ac")
    spec = dsp.stft(filtered)
    images = {name: dsp.extract_band(spec, name).image for name in dsp.canonical_bands(bands)}
    power = dsp.leaky_power_integral(spec, power_band, tau_s).values
    return RecordingFeatures(rec.id, images, power, tuple(a.onset_s for a in rec.annotations))


@dataclass(frozen=True)
class WindowSample:
    images: np.ndarray  # [C, 32, 30]
    vector: np.ndarray  # [30]
    label: int
    origin: tuple[str, int]


@dataclass(frozen=True)
class WindowSet:
    """Columnar storage of many windows; indexing yields ``WindowSample``."""

    images: np.ndarray  # [N, C, 32, 30]
    vectors: np.ndarray  # [N, 30]
    labels: np.ndarray  # [N] int
    rec_ids: np.ndarray  # [N] str
    starts: np.ndarray  # [N] int, start minute
    bands: tuple[str, ...]

    def __len__(self):
        return self.labels.size

    def __getitem__(self, i: int) -> WindowSample:
        return WindowSample(self.images[i], self.vectors[i], int(self.labels[i]),
                            (str(self.rec_ids[i]), int(self.starts[i])))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def origins(self) -> list[tuple[str, int]]:
        return [(str(r), int(s)) for r, s in zip(self.rec_ids, self.starts)]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.images[idx], self.vectors[idx], self.labels[idx],
                         self.rec_ids[idx], self.starts[idx], self.bands)

    def select_bands(self, bands) -> "WindowSet":
        bands = dsp.canonical_bands(bands)
        missing = set(bands).difference(self.bands)
        if missing:
            raise ConfigError(f"window set lacks bands {sorted(missing)}")
        chans = [self.bands.index(b) for b in bands]
        return WindowSet(self.images[:, chans], self.vectors, self.labels, self.rec_ids,
                         self.starts, bands)

    @classmethod
    def concat(cls, parts: Sequence["WindowSet"]) -> "WindowSet":
        if not parts:
            raise DataError("nothing to concatenate")
        bands = parts[0].bands
        if any(p.bands != bands for p in parts):
            raise ConfigError("cannot concatenate window sets with different bands")
        return cls(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.vectors for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.rec_ids for p in parts]),
                   np.concatenate([p.starts for p in parts]), bands)


def _window_minmax(x: np.ndarray) -> np.ndarray:
    """Min-max normalize over the trailing two axes (or one), zeros if flat."""
    axes = tuple(range(1, x.ndim))
    lo = x.min(axis=axes, keepdims=True)
    span = x.max(axis=axes, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0)


def window_labels(onsets_s, starts: np.ndarray, rule: str = "onset",
                  window_min: int = WINDOW_MIN) -> np.ndarray:
    if rule not in LABEL_RULES:
        raise ConfigError(f"unknown label rule {rule!r}; choose from {LABEL_RULES}")
    if rule == "onset":
        lo, hi = starts, starts + window_min
    else:
        third = window_min / 3
        lo, hi = starts + third, starts + 2 * third
    onset_min = np.asarray(onsets_s, dtype=np.float64)[None, :] / dsp.FRAME_S
    hit = (onset_min >= lo[:, None]) & (onset_min < hi[:, None])
    return hit.any(axis=1).astype(np.int64)


def windows_from_features(feat: RecordingFeatures, bands, stride_min: int = 1,
                          label_rule: str = "onset", window_min: int = WINDOW_MIN) -> WindowSet:
    bands = dsp.canonical_bands(bands)
    if stride_min < 1:
        raise ConfigError("stride_min must be >= 1")
    if feat.n_minutes < window_min:
        raise DataError(f"recording {feat.rec_id} has {feat.n_minutes} min; "
                        f"need at least {window_min}")
    missing = set(bands).difference(feat.images)
    if missing:
        raise ConfigError(f"features lack bands {sorted(missing)}")
    starts = np.arange(0, feat.n_minutes - window_min + 1, stride_min)
    chans = []
    for b in bands:
        views = sliding_window_view(feat.images[b], window_min, axis=1)[:, starts]
        chans.append(_window_minmax(np.ascontiguousarray(views.transpose(1, 0, 2))))
    images = np.stack(chans, axis=1)
    vecs = _window_minmax(sliding_window_view(feat.power, window_min)[starts])
    labels = window_labels(feat.onsets_s, starts, label_rule, window_min)
    ids = np.full(starts.size, feat.rec_id, dtype=object)
    return WindowSet(images, vecs, labels, ids, starts.astype(np.int64), bands)


def make_windows(rec: EcogRecording, bands, stride_min: int = 1, label_rule: str = "onset",
                 power_band: str = "full_ac", tau_s: float = 600.0) -> WindowSet:
    """Overlapping 30-minute windows with per-window, per-band normalization.

    Windows start at minutes 0, stride, 2*stride, ...; the default label is 1
    iff an SD onset falls inside the window.
    """
    if rec.n_minutes < WINDOW_MIN:
        raise DataError(f"recording {rec.id} is shorter than {WINDOW_MIN} minutes")
    feat = recording_features(rec, bands, power_band, tau_s)
    return windows_from_features(feat, bands, stride_min, label_rule)


def split(samples: WindowSet, val_fraction: float = 1 / 3, seed: int = 0) -> tuple[WindowSet, WindowSet]:
    """Grouped train/validation split: every recording lands on one side."""
    ids = sorted(set(samples.rec_ids.tolist()))
    if len(ids) < 2:
        raise DataError("a grouped split needs at least 2 recordings")
    if not 0 < val_fraction < 1:
        raise ConfigError("val_fraction must lie in (0, 1)")
    n_val = min(max(1, int(round(val_fraction * len(ids)))), len(ids) - 1)
    perm = np.random.default_rng(seed).permutation(len(ids))
    val_ids = {ids[i] for i in perm[:n_val]}
    in_val = np.array([r in val_ids for r in samples.rec_ids], dtype=bool)
    return samples.subset(~in_val), samples.subset(in_val)


# -- window cache -------------------------------------------------------------

_U32 = struct.Struct("<I")


def write_window_cache(ws: WindowSet, path) -> None:
    n, C, H, W = ws.images.shape
    ids = sorted(set(ws.rec_ids.tolist()))
    index = {r: i for i, r in enumerate(ids)}
    out = bytearray(CACHE_MAGIC)
    out += struct.pack("<6I", CACHE_VERSION, n, C, H, W, len(ids))
    for r in ids:
        b = r.encode("utf-8")
        out += _U32.pack(len(b)) + b
    b = ",".join(ws.bands).encode("utf-8")
    out += _U32.pack(len(b)) + b
    for i in range(n):
        out += struct.pack("<BII", int(ws.labels[i]), index[ws.rec_ids[i]], int(ws.starts[i]))
        out += ws.images[i].astype("<f8").tobytes() + ws.vectors[i].astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def read_window_cache(path) -> WindowSet:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a window cache (bad magic)")
    pos = 4

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(data):
            raise TruncatedFileError(f"{path}: truncated window cache")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    version, n, C, H, W, n_ids = struct.unpack("<6I", take(24))
    if version != CACHE_VERSION:
        raise VersionError(f"unsupported window cache version {version}")
    ids = [take(_U32.unpack(take(4))[0]).decode("utf-8") for _ in range(n_ids)]
    bands = tuple(take(_U32.unpack(take(4))[0]).decode("utf-8").split(","))
    rec = struct.Struct("<BII")
    images = np.empty((n, C, H, W))
    vectors = np.empty((n, W))
    labels = np.empty(n, dtype=np.int64)
    starts = np.empty(n, dtype=np.int64)
    rec_ids = np.empty(n, dtype=object)
    for i in range(n):
        labels[i], idx, starts[i] = rec.unpack(take(rec.size))
        if idx >= n_ids:
            raise FormatError(f"{path}: recording index {idx} out of range")
        rec_ids[i] = ids[idx]
        images[i] = np.frombuffer(take(8 * C * H * W), dtype="<f8").reshape(C, H, W)
        vectors[i] = np.frombuffer(take(8 * W), dtype="<f8")
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes in window cache")
    return WindowSet(images, vectors, labels, rec_ids, starts, bands)


# -- cohorts ------------------------------------------------------------------

DEFAULT_COHORT = 6


def recording_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def cohort_specs(n_recordings: int = DEFAULT_COHORT, master_seed: int = 0,
                 base: SynthConfig | None = None) -> list[tuple[str, SynthConfig]]:
    """Recording ids and per-recording generator configs derived from one seed."""
    base = base or SynthConfig()
    out = []
    for i in range(n_recordings):
        cfg = SynthConfig(**{**base.__dict__, "noise_seed": recording_seed(master_seed, i)})
        out.append((f"rec_{i:02d}", cfg))
    return out


def synthetic_benchmark(n_recordings: int = DEFAULT_COHORT, master_seed: int = 0,
                        base: SynthConfig | None = None,
                        bands=("restricted_delta", "alpha", "beta"), stride_min: int = 1,
                        label_rule: str = "onset", power_band: str = "full_ac",
                        tau_s: float = 600.0) -> WindowSet:
    """Windows of a synthetic cohort, generated one recording at a time."""
    parts = []
    for rec_id, cfg in cohort_specs(n_recordings, master_seed, base):
        rec = synthesize(cfg, rec_id)
        feat = recording_features(rec, bands, power_band, tau_s)
        del rec
        parts.append(windows_from_features(feat, bands, stride_min, label_rule))
    return WindowSet.concat(parts)
