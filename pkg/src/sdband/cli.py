"""Command-line front end: ``sdband synth|train|eval|detect|experiment|compare``.

Settings come from built-in defaults, then an optional flat ``key = value``
config file (``--config``), then command-line flags.  Every output embeds the
resolved settings; wall-clock timestamps only go to the sidecar ``.log`` file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__, dataset, detector, dsp
from .errors import BandMismatchError, ConfigError, DataError, SdbandError, ShapeError

log = logging.getLogger("sdband")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 2, 3, 4
EXIT_CODES_HELP = """exit codes:
  0  success
  2  configuration error (bad flag, config file key or value)
  3  I/O error (missing or unwritable file)
  4  data error (malformed file, invariant violation, band or shape mismatch)
"""

RECORDING_SUFFIX = ".ecog"

_SYN = dataset.SynthConfig()
_DET = detector.DetectorConfig()


@dataclass(frozen=True)
class RunConfig:
    """Every tunable setting of the pipeline, with defaults."""

    # synthetic cohort
    n_recordings: int = dataset.DEFAULT_COHORT
    master_seed: int = 0
    duration_s: float = _SYN.duration_s
    sample_rate_hz: float = _SYN.sample_rate_hz
    n_events: int = _SYN.n_events
    min_gap_s: float = _SYN.min_gap_s
    suppression_duration_s: float = _SYN.suppression_duration_s
    onset_ramp_s: float = _SYN.onset_ramp_s
    noise_floor_uv: float = _SYN.noise_floor_uv
    drift_sd: float = _SYN.drift_sd
    drift_tau_s: float = _SYN.drift_tau_s
    base_delta_uv: float = _SYN.band_base_power["delta"]
    base_alpha_uv: float = _SYN.band_base_power["alpha"]
    base_beta_uv: float = _SYN.band_base_power["beta"]
    depth_delta: float = _SYN.suppression_depth["delta"]
    depth_alpha: float = _SYN.suppression_depth["alpha"]
    depth_beta: float = _SYN.suppression_depth["beta"]
    # windowing
    stride_min: int = 1
    label_rule: str = "onset"
    power_band: str = "full_ac"
    tau_s: float = 600.0
    # detector and training
    bands: tuple = _DET.bands
    epochs: int = _DET.epochs
    lr: float = _DET.lr
    batch_size: int = _DET.batch_size
    pos_weight: float = _DET.pos_weight
    threshold: float = _DET.threshold
    seed: int = _DET.seed
    hidden_units: int = _DET.hidden_units
    # split, experiment and scoring
    val_fraction: float = 1 / 3
    split_seed: int = 0
    seeds: tuple = (0, 1, 2)
    grid: tuple = tuple(detector.band_key(b) for b in detector.DEFAULT_GRID)
    n_boot: int = 2000
    confidence_mode: str = "mean"
    explicit: frozenset = field(default=frozenset(), compare=False, repr=False)

    def synth_config(self, noise_seed: int = 0) -> dataset.SynthConfig:
        return dataset.SynthConfig(
            duration_s=self.duration_s, sample_rate_hz=self.sample_rate_hz,
            n_events=self.n_events,
            band_base_power={"delta": self.base_delta_uv, "alpha": self.base_alpha_uv,
                             "beta": self.base_beta_uv},
            suppression_depth={"delta": self.depth_delta, "alpha": self.depth_alpha,
                               "beta": self.depth_beta},
            suppression_duration_s=self.suppression_duration_s, onset_ramp_s=self.onset_ramp_s,
            min_gap_s=self.min_gap_s, noise_floor_uv=self.noise_floor_uv,
            drift_sd=self.drift_sd, drift_tau_s=self.drift_tau_s, noise_seed=noise_seed)

    def detector_config(self, **overrides) -> detector.DetectorConfig:
        kw = dict(bands=self.bands, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                  pos_weight=self.pos_weight, threshold=self.threshold, seed=self.seed,
                  hidden_units=self.hidden_units)
        return detector.DetectorConfig(**{**kw, **overrides})

    def grid_bands(self) -> list[tuple[str, ...]]:
        return [dsp.canonical_bands(key.split("+")) for key in self.grid]

    def validate(self) -> None:
        self.synth_config().validate()
        self.detector_config()
        if self.n_recordings < 1:
            raise ConfigError("n_recordings must be >= 1")
        if self.stride_min < 1:
            raise ConfigError("stride_min must be >= 1")
        if self.label_rule not in dataset.LABEL_RULES:
            raise ConfigError(f"label_rule must be one of {dataset.LABEL_RULES}")
        dsp.get_band(self.power_band)
        if self.tau_s <= 0:
            raise ConfigError("tau_s must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        keys = [detector.band_key(b) for b in self.grid_bands()]
        if not keys or len(set(keys)) != len(keys):
            raise ConfigError("grid must list distinct band configurations")
        if self.n_boot < 1:
            raise ConfigError("n_boot must be >= 1")
        if self.confidence_mode not in ("mean", "sum"):
            raise ConfigError("confidence_mode must be 'mean' or 'sum'")

    def echo(self) -> dict:
        d = asdict(self)
        del d["explicit"]
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


CONFIG_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "explicit"}


def _parse_value(key: str, text: str):
    default = CONFIG_FIELDS[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            raise ConfigError(f"{key}: boolean settings are not supported")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(int(t) for t in items) if key == "seeds" else tuple(items)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in CONFIG_FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def resolve_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if config_path is not None:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except UnicodeDecodeError:
            raise ConfigError(f"{config_path}: config file is not utf-8 text") from None
        values.update(parse_config_text(text, str(config_path)))
    for key, text in (overrides or {}).items():
        values[key] = _parse_value(key, text)
    if "bands" in values:
        values["bands"] = dsp.canonical_bands(values["bands"])
    cfg = replace(RunConfig(), **values, explicit=frozenset(values))
    cfg.validate()
    return cfg


# -- helpers ------------------------------------------------------------------


def _json_dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _csv_header(command: str, echo: dict) -> str:
    lines = [f"# sdband {command}"]
    lines += [f"# {k} = {json.dumps(v)}" for k, v in sorted(echo.items())]
    return "\n".join(lines) + "\n"


def _attach_log(path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def recording_paths(data_dir) -> list[Path]:
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"{data_dir}: no such directory")
    paths = sorted(data_dir.glob("*" + RECORDING_SUFFIX))
    if not paths:
        raise DataError(f"{data_dir}: no {RECORDING_SUFFIX} recordings found")
    return paths


def windows_from_dir(data_dir, bands, cfg: RunConfig) -> dataset.WindowSet:
    parts = []
    for path in recording_paths(data_dir):
        rec = dataset.ingest(path)
        feat = dataset.recording_features(rec, bands, cfg.power_band, cfg.tau_s)
        parts.append(dataset.windows_from_features(feat, bands, cfg.stride_min, cfg.label_rule))
    return dataset.WindowSet.concat(parts)


def load_windows(args, cfg: RunConfig, bands) -> dataset.WindowSet:
    """Windows from ``--data``, optionally through the ``--cache`` file.

    An existing cache is reused as is; delete it after changing windowing
    settings.
    """
    bands = dsp.canonical_bands(bands)
    cache = getattr(args, "cache", None)
    if cache is not None and Path(cache).exists():
        ws = dataset.read_window_cache(cache)
        log.info("read window cache %s", cache)
    else:
        if args.data is None:
            raise ConfigError("--data is required (or an existing --cache)")
        ws = windows_from_dir(args.data, bands, cfg)
        if cache is not None:
            dataset.write_window_cache(ws, cache)
            log.info("wrote window cache %s", cache)
    missing = set(bands).difference(ws.bands)
    if missing:
        raise BandMismatchError(f"window data lacks bands {sorted(missing)}")
    return ws.select_bands(bands)


def _model_bands(model: detector.DetectorModel, cfg: RunConfig) -> tuple[str, ...]:
    if "bands" in cfg.explicit and tuple(cfg.bands) != tuple(model.bands):
        raise BandMismatchError(f"model was trained on {list(model.bands)}, "
                                f"requested bands are {list(cfg.bands)}")
    return model.bands


def _echo(cfg: RunConfig, command: str, **paths) -> dict:
    return {"command": command, "version": __version__, "settings": cfg.echo(),
            "paths": {k: None if v is None else str(v) for k, v in sorted(paths.items())}}


# -- commands -----------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(out / "synth.log")
    try:
        entries = []
        for rec_id, scfg in dataset.cohort_specs(cfg.n_recordings, cfg.master_seed,
                                                cfg.synth_config()):
            rec = dataset.synthesize(scfg, rec_id)
            name = rec_id + RECORDING_SUFFIX
            dataset.write_recording(rec, out / name)
            entries.append({"id": rec_id, "file": name, "noise_seed": scfg.noise_seed,
                            "onsets_s": [a.onset_s for a in rec.annotations]})
            log.info("wrote %s (%d events)", name, len(rec.annotations))
        _json_dump({"run_config": _echo(cfg, "synth", out=out), "recordings": entries},
                   out / "manifest.json")
        print(f"wrote {len(entries)} recordings to {out}")
    finally:
        log.removeHandler(handler)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    model_path = Path(args.model)
    handler = _attach_log(str(model_path) + ".log")
    try:
        dcfg = cfg.detector_config()
        ws = load_windows(args, cfg, dcfg.bands)
        train_set, val_set = dataset.split(ws, cfg.val_fraction, cfg.split_seed)
        log.info("training on %d windows, validating on %d", len(train_set), len(val_set))
        model, curve = detector.train(detector.build(dcfg), train_set, val_set, dcfg,
                                      lambda e, l: log.info("epoch %d val_bce %.6f", e + 1, l))
        echo = _echo(cfg, "train", data=args.data, cache=args.cache, model=model_path)
        detector.save_model(model, model_path, run_config=echo)
        with open(str(model_path) + ".loss.csv", "w", encoding="utf-8") as fh:
            fh.write(_csv_header("train", echo))
            fh.write("epoch,val_bce\n")
            fh.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(curve))
        print(f"final validation BCE {curve[-1]:.6f}; model written to {model_path}")
    finally:
        log.removeHandler(handler)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model = detector.load_model(args.model)
    bands = _model_bands(model, cfg)
    ws = load_windows(args, cfg, bands)
    if args.subset == "val":
        ws = dataset.split(ws, cfg.val_fraction, cfg.split_seed)[1]
    threshold = cfg.threshold if "threshold" in cfg.explicit else None
    rep = detector.evaluate(model, ws, threshold)
    summary = {"tp": rep.tp, "fp": rep.fp, "tn": rep.tn, "fn": rep.fn,
               "accuracy": rep.accuracy, "sensitivity": rep.sensitivity,
               "specificity": rep.specificity}
    print(json.dumps(summary, sort_keys=True))
    if args.out is not None:
        handler = _attach_log(str(args.out) + ".log")
        try:
            echo = _echo(cfg, "eval", model=args.model, data=args.data, cache=args.cache,
                         out=args.out)
            _json_dump({"run_config": echo, "subset": args.subset, "report": rep.to_dict()},
                       args.out)
            log.info("evaluated %d windows", len(ws))
        finally:
            log.removeHandler(handler)
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    model = detector.load_model(args.model)
    bands = _model_bands(model, cfg)
    rec = dataset.ingest(args.recording)
    feat = dataset.recording_features(rec, bands, cfg.power_band, cfg.tau_s)
    ws = dataset.windows_from_features(feat, bands, cfg.stride_min, cfg.label_rule)
    probs = model.predict_proba(ws)
    series = detector.confidence(ws.starts, probs, feat.n_minutes, mode=cfg.confidence_mode)
    echo = _echo(cfg, "detect", model=args.model, recording=args.recording, out=args.out)
    text = _csv_header("detect", echo) + "minute,score\n" + series.to_csv()
    if args.out is None:
        sys.stdout.write(text)
    else:
        handler = _attach_log(str(args.out) + ".log")
        try:
            Path(args.out).write_text(text, encoding="utf-8")
            log.info("scored %d windows of %s", len(ws), rec.id)
        finally:
            log.removeHandler(handler)
    return EXIT_OK


def cmd_experiment(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(out / "experiment.log")
    try:
        grid = cfg.grid_bands()
        all_bands = dsp.canonical_bands([b for g in grid for b in g])
        if args.data is None and args.cache is None:
            log.info("synthesizing %d recordings (master seed %d)", cfg.n_recordings,
                     cfg.master_seed)
            ws = dataset.synthetic_benchmark(cfg.n_recordings, cfg.master_seed,
                                             cfg.synth_config(), all_bands, cfg.stride_min,
                                             cfg.label_rule, cfg.power_band, cfg.tau_s)
        else:
            ws = load_windows(args, cfg, all_bands)
        echo = _echo(cfg, "experiment", data=args.data, cache=args.cache, out=out)
        sink = None
        if args.save_models:
            (out / "models").mkdir(exist_ok=True)
            sink = lambda k, s, m: detector.save_model(m, out / "models" / f"{k}_seed{s}.ck",
                                                       run_config=echo)
        report = detector.run_experiment(
            ws, grid, cfg.detector_config(), cfg.seeds, cfg.val_fraction, cfg.split_seed,
            cfg.n_boot, lambda k, s, e, l: log.info("%s seed %d epoch %d val_bce %.6f",
                                                    k, s, e + 1, l), sink)
        _json_dump({"run_config": echo, "report": report}, out / "report.json")
        with open(out / "loss_curves.csv", "w", encoding="utf-8") as fh:
            fh.write(_csv_header("experiment", echo))
            fh.write("bands,seed,epoch,val_bce\n")
            for run in report["runs"]:
                fh.writelines(f"{run['bands']},{run['seed']},{i + 1},{v!r}\n"
                              for i, v in enumerate(run["val_loss_curve"]))
        with open(out / "comparisons.csv", "w", encoding="utf-8") as fh:
            fh.write(_csv_header("experiment", echo))
            fh.write("seed,a,b,metric,p_value\n")
            fh.writelines(f"{c['seed']},{c['a']},{c['b']},{c['metric']},{c['p_value']!r}\n"
                          for c in report["comparisons"])
        table = detector.format_table(report)
        (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
        print(table)
    finally:
        log.removeHandler(handler)
    return EXIT_OK


def _read_eval_report(path) -> detector.EvalReport:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a JSON evaluation report ({exc})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("report"), dict):
        raise DataError(f"{path}: missing 'report' object")
    return detector.EvalReport.from_dict(doc["report"])


def cmd_compare(args, cfg: RunConfig) -> int:
    a, b = _read_eval_report(args.report_a), _read_eval_report(args.report_b)
    rows = [(m, detector.compare(a, b, m, cfg.n_boot, cfg.seed)) for m in detector.METRICS]
    body = "metric,p_value\n" + "".join(f"{m},{'' if p is None else repr(p)}\n" for m, p in rows)
    sys.stdout.write(body)
    if args.out is not None:
        echo = _echo(cfg, "compare", report_a=args.report_a, report_b=args.report_b, out=args.out)
        Path(args.out).write_text(_csv_header("compare", echo) + body, encoding="utf-8")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


def _settings_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("settings (override --config values)")
    g.add_argument("--config", metavar="FILE", help="flat 'key = value' settings file")
    for name, f in CONFIG_FIELDS.items():
        g.add_argument("--" + name.replace("_", "-"), dest="set_" + name, metavar="VALUE",
                       default=None, help=f"default: {_default_text(f.default)}")
    return p


def _default_text(value) -> str:
    return ",".join(map(str, value)) if isinstance(value, tuple) else str(value)


def build_parser() -> argparse.ArgumentParser:
    settings = _settings_parser()
    parser = argparse.ArgumentParser(
        prog="sdband", description="Spreading-depolarization detection from band spectrograms.",
        epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[settings], help=help_text, epilog=EXIT_CODES_HELP,
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("synth", "write a synthetic cohort of recordings plus manifest.json")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_synth)

    p = add("train", "train a detector on the training side of a grouped split")
    p.add_argument("--data", metavar="DIR", help=f"directory of *{RECORDING_SUFFIX} files")
    p.add_argument("--cache", metavar="FILE", help="window cache (written if missing)")
    p.add_argument("--model", required=True, metavar="FILE", help="checkpoint to write")
    p.set_defaults(func=cmd_train)

    p = add("eval", "evaluate a checkpoint: confusion counts and metrics")
    p.add_argument("--model", required=True, metavar="FILE")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--cache", metavar="FILE")
    p.add_argument("--subset", choices=("all", "val"), default="all",
                   help="evaluate every window or only the validation side of the split")
    p.add_argument("--out", metavar="FILE", help="JSON report (needed by 'compare')")
    p.set_defaults(func=cmd_eval)

    p = add("detect", "per-minute confidence series (minute,score CSV) for one recording")
    p.add_argument("--model", required=True, metavar="FILE")
    p.add_argument("--recording", required=True, metavar="FILE")
    p.add_argument("--out", metavar="FILE", help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_detect)

    p = add("experiment", "train and compare every band configuration in the grid")
    p.add_argument("--data", metavar="DIR", help="recordings (synthesized from settings if omitted)")
    p.add_argument("--cache", metavar="FILE")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--save-models", action="store_true",
                   help="also write every trained checkpoint to DIR/models/")
    p.set_defaults(func=cmd_experiment)

    p = add("compare", "paired bootstrap p-values for metric(A) > metric(B)")
    p.add_argument("report_a", metavar="REPORT_A")
    p.add_argument("report_b", metavar="REPORT_B")
    p.add_argument("--out", metavar="FILE", help="CSV path")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set_") and v is not None}
    try:
        cfg = resolve_config(args.config, overrides)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"sdband: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"sdband: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, ShapeError, SdbandError) as exc:
        print(f"sdband: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
