"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 5, 6, 7 and 9 share three full ``experiment`` runs (master seed 0,
training seeds 0, 1 and 2) on the default synthetic benchmark; expect the
whole module to take roughly 50 minutes on one CPU core.
"""

import json
import math
import shutil
import time
from fractions import Fraction

import numpy as np
import pytest

from acceptance_log import record
from gradcheck import fd_gradient, rel_error
from oracles import brute_confidence, brute_power, central_rms, hann_periodic
from sdband import cli, dataset, detector, dsp, nn
from sdband.errors import (FormatError, HeaderError, NonFiniteSampleError, TruncatedFileError,
                           VersionError)

SEEDS = (0, 1, 2)
STACKED = "restricted_delta+alpha"
SINGLES = ("restricted_delta", "alpha", "beta")


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# -- 1. STFT oracle -----------------------------------------------------------


def test_criterion_01_stft_matches_brute_force_dft():
    def run():
        rng = np.random.default_rng(2024)
        worst = 0.0
        for case in range(20):
            fs = int(rng.choice([10, 16, 20, 25, 40, 50, 64, 68]))
            frame = 60 * fs
            n = int(rng.integers(frame, 4097))
            t = np.arange(n) / fs
            x = (rng.standard_normal(n) * rng.uniform(0.1, 5)
                 + rng.uniform(-3, 3) * np.sin(2 * np.pi * rng.uniform(0, fs / 2) * t)
                 + rng.uniform(-2, 2))
            spec = dsp.stft(dsp.Signal(x, fs))
            nfft = 1 << (frame - 1).bit_length()
            assert spec.n_frames == n // frame
            assert np.array_equal(spec.freq_axis_hz, np.arange(nfft // 2 + 1) * fs / nfft)
            for k in range(spec.n_frames):
                ref = brute_power(x[k * frame:(k + 1) * frame] * hann_periodic(frame), nfft)
                err = np.max(np.abs(spec.power[:, k] - ref)) / np.max(ref)
                worst = max(worst, err)
        return worst

    worst, secs = timed(run)
    ok = worst <= 1e-9 and secs < 10
    record(1, "STFT vs brute-force DFT", ok,
           f"max relative error {worst:.2e} (<= 1e-9) over 20 signals, {secs:.1f} s (< 10 s)")
    assert ok


# -- 2. filter response -------------------------------------------------------


def test_criterion_02_filter_response():
    def run():
        fs = 200

        def gain_db(freq, seconds):
            t = np.arange(int(seconds * fs)) / fs
            x = np.sin(2 * np.pi * freq * t)
            y = dsp.bandpass(dsp.Signal(x, fs), "full_ac").samples
            return 20 * np.log10(central_rms(y) / central_rms(x))

        return -gain_db(0.05, 600), -gain_db(90.0, 120), abs(gain_db(10.0, 120))

    (low, high, ripple), secs = timed(run)
    ok = low >= 20 and high >= 20 and ripple <= 1 and secs < 5
    record(2, "bandpass response", ok,
           f"0.05 Hz attenuation {low:.1f} dB, 90 Hz attenuation {high:.1f} dB (each >= 20), "
           f"10 Hz deviation {ripple:.4f} dB (<= 1), {secs:.1f} s (< 5 s)")
    assert ok


# -- 3. gradient check --------------------------------------------------------


def _parameterized_layers(model):
    groups = (("image", model.image_layers, model.image_params),
              ("vector", model.vector_layers, model.vector_params),
              ("head", model.head_layers, model.head_params))
    for name, layers, params in groups:
        for i, (layer, p) in enumerate(zip(layers, params)):
            if p:
                yield f"{name}.{i}.{layer.kind}", [p[k] for k in sorted(p)]


def test_criterion_03_full_model_gradient_check():
    def run():
        rng = np.random.default_rng(7)
        model = detector.build(detector.DetectorConfig(seed=3))
        images = rng.random((4, *model.image_shape))
        vectors = rng.random((4, 30))
        labels = np.array([1, 0, 1, 0])
        _, flat_grads = model.loss_and_grads(images, vectors, labels)
        grads = iter(flat_grads)

        def loss():
            return nn.bce_loss(model.forward(images, vectors)[0], labels)

        rows = []
        for name, arrays in _parameterized_layers(model):
            layer_grads = [next(grads) for _ in arrays]
            sizes = [a.size for a in arrays]
            total = sum(sizes)
            order = rng.permutation(total)
            checked, kinks, worst, pos = 0, 0, 0.0, 0
            while checked < min(200, total) and pos < total:
                flat_idx = order[pos]
                pos += 1
                which = int(np.searchsorted(np.cumsum(sizes), flat_idx, side="right"))
                local = flat_idx - sum(sizes[:which])
                num, kink = fd_gradient(loss, arrays[which], [local], return_kinks=True)
                if kink[0]:
                    kinks += 1
                    continue
                ana = layer_grads[which].reshape(-1)[local]
                worst = max(worst, float(rel_error(ana, num[0])))
                checked += 1
            rows.append((name, total, checked, kinks, worst))
        return rows

    rows, secs = timed(run)
    enough = all(checked >= min(200, total) for _, total, checked, _, _ in rows)
    worst = max(r[4] for r in rows)
    ok = enough and worst <= 1e-4 and secs < 60
    detail = "; ".join(f"{n} {c}/{t} checked, max rel {w:.1e}" + (f", {k} kinks skipped" if k else "")
                       for n, t, c, k, w in rows)
    record(3, "two-path model gradients", ok, f"{detail}; {secs:.1f} s (< 60 s)")
    assert ok


# -- 4. metric identities -----------------------------------------------------


def _exact(num, den):
    return None if den == 0 else float(Fraction(num, den))


def test_criterion_04_metric_identities():
    def run():
        rng = np.random.default_rng(11)
        zero_cases, wrong = 0, 0
        for i in range(1000):
            tp, fp, tn, fn = (int(v) for v in rng.integers(0, 60, 4))
            if i % 4 == 1:
                tp = fn = 0
            elif i % 4 == 2:
                tn = fp = 0
            elif i % 50 == 3:
                tp = fp = tn = fn = 0
            zero_cases += (tp + fn == 0) or (tn + fp == 0)
            m = detector.metrics_from_counts(tp, fp, tn, fn)
            labels = np.array([1] * tp + [0] * fp + [0] * tn + [1] * fn)
            probs = np.array([0.9] * tp + [0.8] * fp + [0.2] * tn + [0.1] * fn)
            perm = rng.permutation(labels.size)
            wrong += not (m["accuracy"] == _exact(tp + tn, tp + fp + tn + fn)
                          and m["sensitivity"] == _exact(tp, tp + fn)
                          and m["specificity"] == _exact(tn, tn + fp)
                          and detector.confusion(probs[perm], labels[perm], 0.5) == (tp, fp, tn, fn))
        return zero_cases, wrong

    (zero_cases, wrong), secs = timed(run)
    ok = wrong == 0 and secs < 1
    record(4, "metric identities", ok,
           f"{1000 - wrong}/1000 random confusion matrices exact ({zero_cases} with a zero "
           f"denominator), {secs:.2f} s (< 1 s)")
    assert ok


# -- 8. confidence series -----------------------------------------------------


def test_criterion_08_confidence_matches_brute_force():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(50):
        n_minutes = int(rng.integers(30, 600))
        stride = int(rng.integers(1, 16))
        starts = np.arange(0, n_minutes - 30 + 1, stride)
        probs = rng.random(starts.size)
        series = detector.confidence(starts, probs, n_minutes)
        ref = brute_confidence(starts.tolist(), probs.tolist(), n_minutes)
        same = (series.minutes.tolist() == sorted(ref)
                and series.scores.tolist() == [ref[t] for t in sorted(ref)])
        mismatches += not same
    ok = mismatches == 0
    record(8, "confidence series oracle", ok, f"{50 - mismatches}/50 cases bit-identical")
    assert ok


# -- 10. round trips and corruption -------------------------------------------


def test_criterion_10_round_trips_and_error_codes(tmp_path):
    failures = []

    rec = dataset.synthesize(dataset.SynthConfig(duration_s=3600, n_events=1, noise_seed=3), "rt")
    dataset.write_recording(rec, tmp_path / "a.ecog")
    back = dataset.ingest(tmp_path / "a.ecog")
    dataset.write_recording(back, tmp_path / "b.ecog")
    if not (back == rec and (tmp_path / "a.ecog").read_bytes() == (tmp_path / "b.ecog").read_bytes()):
        failures.append("recording round trip")

    model = detector.build(detector.DetectorConfig(seed=1))
    imgs, vecs = np.random.default_rng(0).random((3, *model.image_shape)), np.random.default_rng(1).random((3, 30))
    _, grads = model.loss_and_grads(imgs, vecs, np.array([0, 1, 1]))
    params, model.adam = nn.adam_step(model.parameters(), grads, model.adam)
    model.set_parameters(params)
    detector.save_model(model, tmp_path / "m.ck")
    loaded = detector.load_model(tmp_path / "m.ck")
    detector.save_model(loaded, tmp_path / "n.ck")
    if (tmp_path / "m.ck").read_bytes() != (tmp_path / "n.ck").read_bytes():
        failures.append("checkpoint bytes")
    if model.forward(imgs, vecs)[0].tobytes() != loaded.forward(imgs, vecs)[0].tobytes():
        failures.append("checkpoint forward")
    if loaded.adam.step != 1:
        failures.append("optimizer state")

    good_rec = (tmp_path / "a.ecog").read_bytes()
    good_ck = (tmp_path / "m.ck").read_bytes()
    header_end = good_rec.index(b"annotations")
    header_end = good_rec.index(b"\n", header_end) + 1
    nan_rec = bytearray(good_rec)
    nan_rec[header_end:header_end + 8] = np.array([np.nan]).tobytes()
    cases = [
        ("truncated recording", "rec", good_rec[:-8], TruncatedFileError),
        ("recording trailing bytes", "rec", good_rec + b"\0" * 8, FormatError),
        ("recording version", "rec", good_rec.replace(b"version: 1", b"version: 9", 1), VersionError),
        ("recording header", "rec", good_rec.replace(b"sample_rate_hz", b"rate", 1), HeaderError),
        ("recording NaN sample", "rec", bytes(nan_rec), NonFiniteSampleError),
        ("checkpoint magic", "ck", b"X" + good_ck[1:], FormatError),
        ("truncated checkpoint", "ck", good_ck[:-3], TruncatedFileError),
        ("checkpoint version", "ck", good_ck[:8] + (7).to_bytes(4, "little") + good_ck[12:], VersionError),
    ]
    for label, kind, data, exc in cases:
        bad = tmp_path / f"bad_{kind}"
        bad.write_bytes(data)
        with pytest.raises(exc):
            (dataset.ingest if kind == "rec" else nn.load_checkpoint)(bad)
        args = (["detect", "--model", str(tmp_path / "m.ck"), "--recording", str(bad)] if kind == "rec"
                else ["detect", "--model", str(bad), "--recording", str(tmp_path / "a.ecog")])
        if cli.main(args) != cli.EXIT_DATA:
            failures.append(f"{label} exit code")
    if cli.main(["detect", "--model", str(tmp_path / "missing.ck"),
                 "--recording", str(tmp_path / "a.ecog")]) != cli.EXIT_IO:
        failures.append("missing file exit code")

    ok = not failures
    record(10, "round trips and corruption", ok,
           "recording and checkpoint bit-exact; 8 corruptions -> exit 4, missing file -> exit 3"
           if ok else "failed: " + ", ".join(failures))
    assert ok


# -- shared experiment runs ---------------------------------------------------


def _experiment_args(out, seed):
    return ["experiment", "--out", str(out), "--master-seed", "0", "--seeds", str(seed),
            "--save-models"]


@pytest.fixture(scope="session")
def experiments(tmp_path_factory):
    root = tmp_path_factory.mktemp("experiments")
    runs = {}
    for seed in SEEDS:
        out = root / f"seed{seed}"
        code, secs = timed(lambda: cli.main(_experiment_args(out, seed)))
        assert code == 0
        doc = json.loads((out / "report.json").read_text())
        runs[seed] = {"out": out, "secs": secs, "report": doc["report"],
                      "bytes": (out / "report.json").read_bytes(),
                      "rows": {r["bands"]: r for r in doc["report"]["runs"]}}
    return runs


def test_criterion_05_learnability(experiments):
    run = experiments[0]
    row = run["rows"][STACKED]
    per_config = run["secs"] / len(run["rows"])
    ok = row["accuracy"] >= 0.90 and row["sensitivity"] >= 0.80
    record(5, "end-to-end learnability", ok,
           f"delta+alpha seed 0: accuracy {row['accuracy']:.4f} (>= 0.90), sensitivity "
           f"{row['sensitivity']:.4f} (>= 0.80); about {per_config / 60:.1f} min per "
           f"configuration incl. data synthesis (target < 15 min)")
    assert ok


def test_criterion_06_stacking_accuracy(experiments):
    parts, ok = [], True
    for seed in SEEDS:
        rows = experiments[seed]["rows"]
        stacked = rows[STACKED]["accuracy"]
        best = max(rows[b]["accuracy"] for b in SINGLES)
        ok &= stacked >= best - 0.02
        parts.append(f"seed {seed}: stacked {stacked:.4f} vs best single {best:.4f}")
    record(6, "stacked delta+alpha accuracy >= single bands - 0.02", ok, "; ".join(parts))
    assert ok


def test_criterion_07_beta_sensitivity(experiments):
    parts, ok = [], True
    for seed in SEEDS:
        rows = experiments[seed]["rows"]
        beta, alpha = rows["beta"]["sensitivity"], rows["alpha"]["sensitivity"]
        ok &= beta <= alpha
        parts.append(f"seed {seed}: beta {beta:.4f} vs alpha {alpha:.4f}")
    record(7, "beta sensitivity <= alpha sensitivity", ok, "; ".join(parts))
    assert ok


def test_criterion_09_experiment_determinism(experiments, tmp_path):
    first = experiments[0]
    out = first["out"]
    saved = tmp_path / "first"
    shutil.copytree(out, saved)
    assert cli.main(_experiment_args(out, 0)) == 0
    names = ("report.json", "loss_curves.csv", "comparisons.csv", "summary.txt")
    same = [n for n in names if (out / n).read_bytes() == (saved / n).read_bytes()]
    ok = len(same) == len(names) and (out / "report.json").read_bytes() == first["bytes"]
    record(9, "experiment determinism", ok,
           f"{len(same)}/{len(names)} machine-readable outputs byte-identical across two runs")
    assert ok


def test_event_free_recording_stays_below_threshold(experiments, tmp_path):
    """A well-trained model should not flag a recording without SDs."""
    model = experiments[0]["out"] / "models" / f"{STACKED}_seed0.ck"
    assert cli.main(["synth", "--out", str(tmp_path), "--n-recordings", "1",
                     "--n-events", "0", "--master-seed", "99"]) == 0
    trace = tmp_path / "trace.csv"
    assert cli.main(["detect", "--model", str(model), "--recording",
                     str(tmp_path / "rec_00.ecog"), "--out", str(trace)]) == 0
    rows = [l for l in trace.read_text().splitlines() if not l.startswith("#")][1:]
    scores = [float(r.split(",")[1]) for r in rows]
    assert len(scores) == 1440
    print(f"event-free recording: max confidence {max(scores):.4f}")
    assert max(scores) < 0.5 and math.isfinite(sum(scores))


def test_training_lowers_validation_loss(experiments):
    """Final held-out BCE of delta+alpha (seed 0) is below the untrained model's."""
    ws = dataset.synthetic_benchmark(bands=("restricted_delta", "alpha"))
    _, val_set = dataset.split(ws, 1 / 3, 0)
    untrained = detector.build(detector.DetectorConfig(bands=("restricted_delta", "alpha"), seed=0))
    initial = nn.bce_loss(untrained.predict_proba(val_set), val_set.labels)
    row = experiments[0]["rows"][STACKED]
    assert experiments[0]["report"]["validation_windows"]["starts"] == val_set.starts.tolist()
    print(f"validation BCE untrained {initial:.4f}, after 60 epochs {row['val_loss_curve'][-1]:.4f}")
    assert row["val_loss_curve"][-1] < initial
