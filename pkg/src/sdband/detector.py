"""Two-path SD detector: model assembly, training, evaluation, confidence
scores and band-configuration experiments."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import dsp, nn
from .dataset import WINDOW_MIN, WindowSet, split
from .errors import BandMismatchError, ConfigError, DataError, PairingError, ShapeError

log = logging.getLogger(__name__)

IMAGE_ROWS = dsp.BAND_ROWS
METRICS = ("accuracy", "sensitivity", "specificity")
DEFAULT_GRID = (("restricted_delta",), ("alpha",), ("beta",), ("restricted_delta", "alpha"))


@dataclass
class DetectorConfig:
    bands: tuple = ("restricted_delta", "alpha")
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 32
    pos_weight: float = 1.0
    threshold: float = 0.5
    seed: int = 0
    hidden_units: int = 64

    def __post_init__(self):
        self.bands = dsp.canonical_bands(self.bands)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.lr <= 0 or self.hidden_units < 1:
            raise ConfigError("batch_size, lr and hidden_units must be positive")
        if self.pos_weight < 1:
            raise ConfigError("pos_weight must be >= 1")
        if not 0 <= self.threshold <= 1:
            raise ConfigError("threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bands"] = list(self.bands)
        return d


def _image_path(n_channels: int):
    return [nn.Conv2d(n_channels, 8, 3), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3), nn.ReLU(), nn.MaxPool2d(2), nn.Flatten()]


def _vector_path():
    return [nn.Conv1d(1, 8, 5), nn.ReLU(), nn.MaxPool1d(2),
            nn.Conv1d(8, 16, 5), nn.ReLU(), nn.Flatten()]


@dataclass
class TwoPathCache:
    image: nn.ForwardCache
    vector: nn.ForwardCache
    head: nn.ForwardCache
    split_at: int


class DetectorModel:
    """Image path (band spectrograms) and vector path (leaky power) joined by
    feature concatenation and a dense head ending in one sigmoid unit."""

    def __init__(self, config: DetectorConfig):
        self.config = config
        c = len(config.bands)
        # external layout is (C, 32, 30); the layers run channels-last
        self.image_shape = (c, IMAGE_ROWS, WINDOW_MIN)
        self._image_in = (IMAGE_ROWS, WINDOW_MIN, c)
        self._vector_in = (WINDOW_MIN, 1)
        self.image_layers = _image_path(c)
        self.vector_layers = _vector_path()
        self.image_features = nn.infer_shapes(self.image_layers, self._image_in)[-1][0]
        self.vector_features = nn.infer_shapes(self.vector_layers, self._vector_in)[-1][0]
        n_in = self.image_features + self.vector_features
        self.head_layers = [nn.Dense(n_in, config.hidden_units), nn.ReLU(),
                            nn.Dense(config.hidden_units, 1), nn.Sigmoid()]
        init_rng, _ = self._rngs()
        self.image_params = nn.init_params(self.image_layers, self._image_in, init_rng)
        self.vector_params = nn.init_params(self.vector_layers, self._vector_in, init_rng)
        self.head_params = nn.init_params(self.head_layers, (n_in,), init_rng)
        self.adam = nn.AdamState.for_params(self.parameters(), lr=config.lr)

    def _rngs(self):
        init_ss, shuffle_ss = np.random.SeedSequence(self.config.seed).spawn(2)
        return np.random.default_rng(init_ss), np.random.default_rng(shuffle_ss)

    @property
    def bands(self) -> tuple[str, ...]:
        return self.config.bands

    def _groups(self):
        return (self.image_params, self.vector_params, self.head_params)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in declaration order (image, vector, head)."""
        return [p[k] for group in self._groups() for p in group for k in sorted(p)]

    def set_parameters(self, flat: Sequence[np.ndarray]) -> None:
        flat = list(flat)
        expected = self.parameters()
        if len(flat) != len(expected):
            raise ShapeError(f"expected {len(expected)} parameter arrays, got {len(flat)}")
        for new, old in zip(flat, expected):
            if new.shape != old.shape:
                raise ShapeError(f"parameter shape {new.shape} does not match {old.shape}")
        it = iter(flat)
        for group in self._groups():
            for p in group:
                for k in sorted(p):
                    p[k] = np.array(next(it), dtype=np.float64)

    def architecture(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "image_path": [l.spec() for l in self.image_layers],
            "vector_path": [l.spec() for l in self.vector_layers],
            "head": [l.spec() for l in self.head_layers],
        }

    def architecture_text(self) -> str:
        return json.dumps(self.architecture(), sort_keys=True, separators=(",", ":"))

    def forward(self, images, vectors):
        images = np.asarray(images, dtype=np.float64)
        vectors = np.asarray(vectors, dtype=np.float64)
        if images.shape[1:] != self.image_shape:
            raise ShapeError(f"image batch {images.shape[1:]} does not match {self.image_shape}")
        if vectors.shape[1:] != (WINDOW_MIN,):
            raise ShapeError(f"vector batch {vectors.shape[1:]} does not match ({WINDOW_MIN},)")
        images = np.ascontiguousarray(images.transpose(0, 2, 3, 1))
        vectors = vectors[:, :, None]
        fi, ci = nn.forward(self.image_layers, self.image_params, images)
        fv, cv = nn.forward(self.vector_layers, self.vector_params, vectors)
        out, ch = nn.forward(self.head_layers, self.head_params, np.concatenate([fi, fv], axis=1))
        return out[:, 0], TwoPathCache(ci, cv, ch, fi.shape[1])

    def backward(self, cache: TwoPathCache, dprob) -> list[np.ndarray]:
        dprob = np.asarray(dprob, dtype=np.float64).reshape(-1, 1)
        dfeat, gh = nn.backward(self.head_layers, self.head_params, cache.head, dprob)
        _, gi = nn.backward(self.image_layers, self.image_params, cache.image,
                            dfeat[:, :cache.split_at], need_input_grad=False)
        _, gv = nn.backward(self.vector_layers, self.vector_params, cache.vector,
                            dfeat[:, cache.split_at:], need_input_grad=False)
        return [g[k] for group in (gi, gv, gh) for g in group for k in sorted(g)]

    def loss_and_grads(self, images, vectors, labels):
        p, cache = self.forward(images, vectors)
        w = self.config.pos_weight
        return nn.bce_loss(p, labels, w), self.backward(cache, nn.bce_grad(p, labels, w))

    def predict_proba(self, ws: WindowSet, batch_size: int = 512) -> np.ndarray:
        check_bands(self, ws)
        out = np.empty(len(ws))
        for i in range(0, len(ws), batch_size):
            out[i:i + batch_size] = self.forward(ws.images[i:i + batch_size],
                                                 ws.vectors[i:i + batch_size])[0]
        return out


def build(config: DetectorConfig) -> DetectorModel:
    return DetectorModel(config)


def check_bands(model: DetectorModel, ws: WindowSet) -> None:
    if tuple(ws.bands) != tuple(model.bands):
        raise BandMismatchError(f"model was built for bands {list(model.bands)}, "
                                f"data has {list(ws.bands)}")


def save_model(model: DetectorModel, path, with_optimizer: bool = True,
               run_config: Optional[dict] = None) -> None:
    """Write a checkpoint; ``run_config`` is stored verbatim next to the architecture."""
    text = model.architecture_text()
    if run_config is not None:
        text = json.dumps({**model.architecture(), "run_config": run_config},
                          sort_keys=True, separators=(",", ":"))
    nn.save_checkpoint(path, text, model.parameters(), model.adam if with_optimizer else None)


def load_model(path, expected: Optional[DetectorConfig] = None) -> DetectorModel:
    """Rebuild a model from a checkpoint.

    With ``expected`` the parameters are loaded into that architecture and a
    mismatch raises ``ShapeError``.
    """
    text, params, adam = nn.load_checkpoint(path)
    try:
        arch = json.loads(text)
        cfg = DetectorConfig(**{**arch["config"], "bands": tuple(arch["config"]["bands"])})
    except (ValueError, KeyError, TypeError) as exc:
        raise ShapeError(f"{path}: unreadable architecture description ({exc})") from None
    model = build(expected if expected is not None else cfg)
    model.set_parameters(params)
    if adam is not None:
        if [m.shape for m in adam.m] != [p.shape for p in params]:
            raise ShapeError(f"{path}: optimizer state does not match parameters")
        model.adam = adam
    return model


# -- training -----------------------------------------------------------------


def train(model: DetectorModel, train_set: WindowSet, val_set: WindowSet,
          config: Optional[DetectorConfig] = None, progress=None):
    """Run exactly ``config.epochs`` epochs of shuffled mini-batch Adam.

    Returns ``(model, val_loss_curve)`` with one validation BCE per epoch; the
    final-epoch model is kept (no early stopping).
    """
    config = config or model.config
    if config.epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation sets must be non-empty")
    check_bands(model, train_set)
    check_bands(model, val_set)
    if np.unique(train_set.labels).size < 2:
        raise DataError("training set contains a single class")

    _, shuffle_rng = model._rngs()
    params = model.parameters()
    adam = model.adam
    if adam.lr != config.lr:
        adam = nn.AdamState(config.lr, adam.beta1, adam.beta2, adam.eps, adam.step, adam.m, adam.v)
    curve = []
    n = len(train_set)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            _, grads = model.loss_and_grads(train_set.images[idx], train_set.vectors[idx],
                                            train_set.labels[idx])
            params, adam = nn.adam_step(params, grads, adam)
            model.set_parameters(params)
            params = model.parameters()
        model.adam = adam
        val_loss = nn.bce_loss(model.predict_proba(val_set), val_set.labels, config.pos_weight)
        curve.append(val_loss)
        if progress is not None:
            progress(epoch, val_loss)
        log.debug("epoch %d val_bce %.5f", epoch + 1, val_loss)
    return model, curve


# -- evaluation ---------------------------------------------------------------


def safe_ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> dict:
    return {
        "accuracy": safe_ratio(tp + tn, tp + fp + tn + fn),
        "sensitivity": safe_ratio(tp, tp + fn),
        "specificity": safe_ratio(tn, tn + fp),
    }


def confusion(probs, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    pred = np.asarray(probs) >= threshold
    lab = np.asarray(labels).astype(bool)
    return (int(np.sum(pred & lab)), int(np.sum(pred & ~lab)),
            int(np.sum(~pred & ~lab)), int(np.sum(~pred & lab)))


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    rec_ids: list
    starts: list
    probs: list
    labels: list
    threshold: float = 0.5
    bands: list = field(default_factory=list)
    val_loss_curve: list = field(default_factory=list)

    @classmethod
    def from_predictions(cls, rec_ids, starts, probs, labels, threshold=0.5, bands=(),
                         val_loss_curve=()) -> "EvalReport":
        tp, fp, tn, fn = confusion(probs, labels, threshold)
        return cls(tp, fp, tn, fn, **metrics_from_counts(tp, fp, tn, fn),
                   rec_ids=[str(r) for r in rec_ids], starts=[int(s) for s in starts],
                   probs=[float(p) for p in probs], labels=[int(l) for l in labels],
                   threshold=float(threshold), bands=list(bands),
                   val_loss_curve=[float(v) for v in val_loss_curve])

    @property
    def per_window(self) -> list[tuple[tuple[str, int], float, int]]:
        return [((r, s), p, l) for r, s, p, l in zip(self.rec_ids, self.starts, self.probs, self.labels)]

    @property
    def origins(self) -> list[tuple[str, int]]:
        return list(zip(self.rec_ids, self.starts))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"malformed evaluation report: {exc}") from None


def evaluate(model: DetectorModel, samples: WindowSet, threshold: Optional[float] = None,
             val_loss_curve=()) -> EvalReport:
    if len(samples) == 0:
        raise DataError("nothing to evaluate")
    threshold = model.config.threshold if threshold is None else threshold
    probs = model.predict_proba(samples)
    return EvalReport.from_predictions(samples.rec_ids, samples.starts, probs, samples.labels,
                                       threshold, model.bands, val_loss_curve)


# -- confidence score ---------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceSeries:
    """Per-minute score; minutes not covered by any window are omitted."""

    minutes: np.ndarray
    scores: np.ndarray

    def to_csv(self) -> str:
        return "".join(f"{m},{s!r}\n" for m, s in zip(self.minutes.tolist(), self.scores.tolist()))


def confidence(starts, probs, n_minutes: int, window_min: int = WINDOW_MIN,
               mode: str = "mean") -> ConfidenceSeries:
    """Aggregate window probabilities onto the minutes each window spans.

    ``mode="mean"`` divides the summed probabilities by the number of
    covering windows; ``mode="sum"`` keeps the raw 30-minute sum.
    """
    if mode not in ("mean", "sum"):
        raise ConfigError(f"unknown confidence mode {mode!r}")
    starts = np.asarray(starts, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if starts.shape != probs.shape:
        raise DataError("starts and probabilities differ in length")
    if starts.size and (starts.min() < 0 or starts.max() >= n_minutes):
        raise DataError("window start outside the recording")
    ends = np.minimum(starts + window_min, n_minutes)
    count = np.zeros(n_minutes + 1, dtype=np.int64)
    np.add.at(count, starts, 1)
    np.add.at(count, ends, -1)
    count = np.cumsum(count)[:n_minutes]
    covered = np.flatnonzero(count > 0)
    scores = np.empty(covered.size)
    order = np.argsort(starts, kind="stable")
    s_sorted, p_sorted = starts[order], probs[order]
    for k, t in enumerate(covered):
        lo = np.searchsorted(s_sorted, t - window_min + 1)
        hi = np.searchsorted(s_sorted, t, side="right")
        acc = math.fsum(p_sorted[lo:hi])
        scores[k] = acc / count[t] if mode == "mean" else acc
    return ConfidenceSeries(covered, scores)


# -- paired bootstrap ---------------------------------------------------------


def _metric_from_arrays(tp, fp, tn, fn, metric):
    with np.errstate(divide="ignore", invalid="ignore"):
        if metric == "accuracy":
            num, den = tp + tn, tp + fp + tn + fn
        elif metric == "sensitivity":
            num, den = tp, tp + fn
        elif metric == "specificity":
            num, den = tn, tn + fp
        else:
            raise ConfigError(f"unknown metric {metric!r}")
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan), den > 0


def _group_counts(report: EvalReport, groups: list[str]) -> np.ndarray:
    pred = np.asarray(report.probs) >= report.threshold
    lab = np.asarray(report.labels).astype(bool)
    ids = np.asarray(report.rec_ids)
    out = np.zeros((len(groups), 4), dtype=np.int64)
    for g, name in enumerate(groups):
        m = ids == name
        out[g] = [np.sum(pred[m] & lab[m]), np.sum(pred[m] & ~lab[m]),
                  np.sum(~pred[m] & ~lab[m]), np.sum(~pred[m] & lab[m])]
    return out


def compare(report_a: EvalReport, report_b: EvalReport, metric: str = "accuracy",
            n_boot: int = 2000, seed: int = 0) -> Optional[float]:
    """Paired bootstrap p-value for ``metric(A) > metric(B)``.

    Recordings are resampled with replacement (all windows of a drawn
    recording come along), and p is the fraction of resamples where
    ``metric(A) <= metric(B)``.  Resamples where the metric is undefined
    for either report are discarded; ``None`` if none remain.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    if sorted(report_a.origins) != sorted(report_b.origins) or len(report_a.origins) == 0:
        raise PairingError("reports do not cover the same windows")
    if n_boot < 1:
        raise ConfigError("n_boot must be >= 1")
    groups = sorted(set(report_a.rec_ids))
    ca, cb = _group_counts(report_a, groups), _group_counts(report_b, groups)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(groups), size=(n_boot, len(groups)))
    weights = np.stack([np.bincount(d, minlength=len(groups)) for d in draws])
    sa, sb = weights @ ca, weights @ cb
    ma, oka = _metric_from_arrays(*sa.T, metric)
    mb, okb = _metric_from_arrays(*sb.T, metric)
    ok = oka & okb
    if not ok.any():
        return None
    return float(np.mean(ma[ok] <= mb[ok]))


# -- experiments --------------------------------------------------------------


def band_key(bands) -> str:
    return "+".join(dsp.canonical_bands(bands))


def run_config(windows: WindowSet, base: DetectorConfig, bands, seed: int,
               val_fraction: float, split_seed: int, progress=None, model_sink=None) -> EvalReport:
    """Train one configuration on the grouped split and evaluate it on the held-out side.

    ``model_sink(model)``, if given, receives the trained model.
    """
    cfg = DetectorConfig(**{**base.to_dict(), "bands": tuple(bands), "seed": seed})
    ws = windows.select_bands(cfg.bands)
    train_set, val_set = split(ws, val_fraction, split_seed)
    model, curve = train(build(cfg), train_set, val_set, cfg, progress)
    if model_sink is not None:
        model_sink(model)
    return evaluate(model, val_set, cfg.threshold, curve)


def _mean_sd(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), sd


def run_experiment(windows: WindowSet, grid=DEFAULT_GRID, base: Optional[DetectorConfig] = None,
                   seeds: Sequence[int] = (0,), val_fraction: float = 1 / 3, split_seed: int = 0,
                   n_boot: int = 2000, progress=None, model_sink=None) -> dict:
    """Train and evaluate every band configuration on one shared grouped split.

    Returns a JSON-serializable report with one row per configuration and
    seed, mean/sd summaries, and paired bootstrap p-values for every ordered
    pair of configurations.  ``model_sink(key, seed, model)`` receives each
    trained model.
    """
    base = base or DetectorConfig()
    keys = [band_key(b) for b in grid]
    if len(set(keys)) != len(keys):
        raise ConfigError("duplicate configuration in the experiment grid")
    runs, comparisons = [], []
    for seed in seeds:
        reports = {}
        for bands, key in zip(grid, keys):
            log.info("training %s (seed %d)", key, seed)
            rep = run_config(windows, base, bands, seed, val_fraction, split_seed,
                             None if progress is None else (lambda e, l, k=key: progress(k, seed, e, l)),
                             None if model_sink is None else (lambda m, k=key: model_sink(k, seed, m)))
            reports[key] = rep
            runs.append({"bands": key, "seed": seed, "tp": rep.tp, "fp": rep.fp, "tn": rep.tn,
                         "fn": rep.fn, "accuracy": rep.accuracy, "sensitivity": rep.sensitivity,
                         "specificity": rep.specificity, "val_loss_curve": rep.val_loss_curve,
                         "per_window_probs": rep.probs})
        for a in keys:
            for b in keys:
                if a == b:
                    continue
                for metric in METRICS:
                    comparisons.append({"seed": seed, "a": a, "b": b, "metric": metric,
                                        "p_value": compare(reports[a], reports[b], metric,
                                                           n_boot, seed)})
    summary = []
    for key in keys:
        rows = [r for r in runs if r["bands"] == key]
        entry = {"bands": key, "n_seeds": len(rows)}
        for metric in METRICS:
            entry[f"{metric}_mean"], entry[f"{metric}_sd"] = _mean_sd([r[metric] for r in rows])
        summary.append(entry)
    any_report = next(iter(reports.values()))
    return {
        "config": {**base.to_dict(), "grid": keys, "seeds": list(seeds),
                   "val_fraction": val_fraction, "split_seed": split_seed, "n_boot": n_boot},
        "validation_windows": {"rec_ids": any_report.rec_ids, "starts": any_report.starts,
                               "labels": any_report.labels},
        "runs": runs,
        "summary": summary,
        "comparisons": comparisons,
    }


def format_table(report: dict) -> str:
    lines = [f"{'bands':<24}{'seeds':>6}{'accuracy':>18}{'sensitivity':>18}{'specificity':>18}"]
    for row in report["summary"]:
        cells = []
        for metric in METRICS:
            mean, sd = row[f"{metric}_mean"], row[f"{metric}_sd"]
            cells.append("n/a".rjust(18) if mean is None else f"{mean:.4f} +/- {sd:.4f}".rjust(18))
        lines.append(f"{row['bands']:<24}{row['n_seeds']:>6}" + "".join(cells))
    return "\n".join(lines)
