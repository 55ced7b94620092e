"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import filecmp
import math
import os
import time

import numpy as np

from cmdlife import aligner, ensemble_eval as ee, phrase_parser as pp, workload as wl
from cmdlife.neural.model import ModelConfig, forward, init_params, tiny_config, transformer_encode
from cmdlife.neural.train import CATEGORIES, Checkpoint, TrainConfig, gradient_check, predict_standardized
from cmdlife.scene_raster import RasterConfig
from cmdlife.synthgen import ScenarioConfig, generate_scenario

from conftest import SMALL_TOML, detect_scenario, run_stages, scenario_context


def loop_metrics(y, yh):
    n = len(y)
    a = s = 0.0
    for i in range(n):
        for k in range(2):
            e = yh[i][k] - y[i][k]
            a += abs(e)
            s += e * e
    m = [sum(r[k] for r in y) / n for k in range(2)]
    sst = sum((r[k] - m[k]) ** 2 for r in y for k in range(2))
    return a / (2 * n), math.sqrt(s / (2 * n)), 1.0 - s / sst


def test_metrics_oracle(criterion):
    rng = np.random.default_rng(2024)
    sets = []
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        scale = float(rng.uniform(0.1, 50.0))
        sets.append((scale * rng.normal(size=(n, 2)), scale * rng.normal(size=(n, 2))))
    t0 = time.perf_counter()
    reports = [ee.compute_metrics(ee.EvaluationSet(y, yh)) for y, yh in sets]
    elapsed = time.perf_counter() - t0
    worst = 0.0
    for (y, yh), r in zip(sets, reports):
        mae, rmse, r2 = loop_metrics(y.tolist(), yh.tolist())
        worst = max(worst, abs(r.mae_overall - mae), abs(r.rmse_overall - rmse), abs(r.r2_overall - r2))
    ex = ee.compute_metrics(ee.EvaluationSet.from_lists([10, 20], [12, 18], [3, 4], [3, 5]))
    example = ex.mae_overall == 1.25 and ex.rmse_overall == 1.5 and abs(ex.r2_overall - (1 - 9 / 50.5)) < 1e-15
    criterion("metrics oracle", worst <= 1e-9 and example and elapsed < 1.0,
              f"max |diff| {worst:.2e} over 1000 sets, example {example}, {elapsed:.3f} s")


def test_detection(criterion):
    sc = generate_scenario(ScenarioConfig(n_flights=50, seed=101))
    t0 = time.perf_counter()
    events = detect_scenario(sc)
    elapsed = time.perf_counter() - t0
    errs, missed = [], 0
    for c in sc.truth.commands:
        near = [abs(e.onset_t - c.onset_t) for e in events
                if e.callsign == c.callsign and e.channel is c.channel and abs(e.onset_t - c.onset_t) <= 10.0]
        if near:
            errs.append(min(near))
        else:
            missed += 1
    recall = 1.0 - missed / len(sc.truth.commands)
    mean_err = float(np.mean(errs))
    calm = generate_scenario(ScenarioConfig(n_flights=50, maneuvers_per_flight=(0, 0), seed=102))
    t0 = time.perf_counter()
    false_events = detect_scenario(calm)
    elapsed += time.perf_counter() - t0
    false_rate = len(false_events) / (3 * len(calm.trajectories))
    criterion("detection", recall >= 0.95 and mean_err <= 3.0 and false_rate <= 0.05 and elapsed < 10.0,
              f"recall {recall:.3f} of {len(sc.truth.commands)}, mean onset error {mean_err:.2f} s "
              f"(max {max(errs):.1f} s), false events per quiet track-channel {false_rate:.3f}, {elapsed:.2f} s")


def test_parser(criterion):
    table = pp.CallsignTable.default()

    def parse(text):
        return pp.parse_utterance(pp.TranscriptUtterance(0.0, 3.0, "atco", text), table)

    got = [parse("speedbird one two three descend to three thousand"),
           parse("qantas one reduce speed to two one zero"),
           parse("speedbird one two three turn left heading one eight zero")]
    want = [("BAW123", pp.CommandType.ALTITUDE, 3000, pp.Direction.NONE),
            ("QFA1", pp.CommandType.SPEED, 210, pp.Direction.NONE),
            ("BAW123", pp.CommandType.HEADING, 180, pp.Direction.LEFT)]
    forms = [(c.callsign, c.ctype, c.value, c.direction) for c in got] == want and not any(c.flags for c in got)
    callsign = pp.parse_callsign(pp.tokenize("speedbird one two three turn left"), table) == ("BAW123", ["turn", "left"])
    sc = generate_scenario(ScenarioConfig(n_flights=60, seed=103))
    cmds, _ = pp.parse_transcript(sc.transcript, sc.table)
    key = lambda c: (c.start_t, c.callsign)  # noqa: E731
    planted = sorted((c.cmd for c in sc.truth.commands), key=key)
    parsed = sorted(cmds, key=key)
    acc = sum(a == b for a, b in zip(parsed, planted)) / len(planted) if len(parsed) == len(planted) else 0.0
    cond = parse("speedbird one two three descend after passing waypoint x")
    excluded = "conditional" in cond.flags and pp.filter_commands([cond]) == ([], [cond])
    criterion("parser", forms and callsign and acc == 1.0 and excluded,
              f"forms {forms}, callsign {callsign}, round trip {acc:.3f} of {len(planted)}, conditional excluded {excluded}")


def test_alignment(criterion):
    sc = generate_scenario(ScenarioConfig(n_flights=60, seed=104))
    cmds, _ = pp.parse_transcript(sc.transcript, sc.table)
    kept, _ = pp.filter_commands(cmds)
    by_cmd = {(c.cmd.callsign, c.cmd.start_t): c for c in sc.truth.commands}
    events = detect_scenario(sc)
    res = aligner.align(kept, events)
    correct = 0
    for c, e in res.pairs:
        p = by_cmd[(c.callsign, c.start_t)]
        dets = [d for d in events if d.callsign == p.callsign and d.channel is p.channel]
        nearest = min(dets, key=lambda d: abs(d.onset_t - p.onset_t))
        correct += nearest is e and abs(e.onset_t - p.onset_t) <= 10.0
    rate = correct / len(sc.truth.commands)
    ds = aligner.build_dataset(res.pairs, sc.trajectories, scenario_context(sc), RasterConfig(width=32, height=32),
                               seed=1)
    book = max(abs(s.cmd.start_t + s.cmd.duration_s + s.time_offset_s - s.event.onset_t) for s in ds.samples)
    criterion("alignment", rate == 1.0 and book <= 1e-9 and len(ds) == len(res.pairs),
              f"{correct}/{len(sc.truth.commands)} pairings correct, bookkeeping max residual {book:.1e}, "
              f"{len(ds)} samples")


def test_gradient_check(criterion):
    t0 = time.perf_counter()
    errs = [gradient_check(tiny_config(), seed=s, variant=v) for s in (0, 1) for v in ("mixed", "uniform")]
    elapsed = time.perf_counter() - t0
    criterion("gradient check", max(errs) < 1e-4 and elapsed < 30.0,
              f"max relative error {max(errs):.2e} (4 runs, float64), {elapsed:.1f} s")


def _predictor(trained):
    run, cfg, stats = trained["run"], trained["model_config"], trained["dataset"].stats
    return lambda arrays: stats.destandardize_targets(predict_standardized(run.params, cfg, arrays))


def test_learning_sanity(criterion, trained_500):
    ds = trained_500["dataset"]
    val = ds.arrays("val")
    y_val = ds.arrays("val", standardized=False)["y"]
    y_train = ds.arrays("train", standardized=False)["y"]
    pred = _predictor(trained_500)(val)
    model = ee.compute_metrics(ee.EvaluationSet(y_val, pred))
    base = ee.compute_metrics(ee.EvaluationSet(y_val, np.tile(y_train.mean(axis=0), (len(y_val), 1))))
    ok = (model.mae_offset < base.mae_offset and model.mae_duration < base.mae_duration
          and model.r2_offset > 0 and model.r2_duration > 0 and trained_500["t_train"] < 300.0)
    criterion("learning sanity", ok,
              f"{len(ds)} samples ({len(y_val)} val), val MAE offset {model.mae_offset:.3f} vs mean "
              f"{base.mae_offset:.3f}, duration {model.mae_duration:.3f} vs {base.mae_duration:.3f}, "
              f"R2 {model.r2_offset:.3f}/{model.r2_duration:.3f}, train {trained_500['t_train']:.0f} s")


class _Fixed:
    def __init__(self, values):
        self.values = values

    def predict(self, arrays):
        return self.values


def test_ensemble(criterion):
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(200):
        members = [(_Fixed(rng.uniform(-30, 60, size=(5, 2))), c) for c in CATEGORIES for _ in range(4)]
        spec = ee.EnsembleSpec(members)
        out = ee.weighted_predict(spec, {"struct": np.zeros((5, 1))})
        for t_idx, target in enumerate(ee.TARGETS):
            w = ee.DEFAULT_WEIGHTS[target]
            for i in range(5):
                num = 0.0
                for c in CATEGORIES:
                    vals = [m.values[i, t_idx] for m, cat in members if cat == c]
                    num += w[c] * sum(vals) / len(vals)
                worst = max(worst, abs(out[i, t_idx] - num / sum(w.values())))
    cfg = tiny_config()
    arrays = {"struct": rng.normal(size=(6, cfg.d_struct_in)), "seq": rng.normal(size=(6, cfg.seq_len, 4)),
              "hist": rng.random((6, 8, 8, 3)), "snap": rng.random((6, 8, 8, 3))}
    cks = [Checkpoint(init_params(cfg, s), cfg, TrainConfig(), 0, CATEGORIES, {},
                      {"target_mean": [12.0, 3.5], "target_std": [5.0, 1.0]}) for s in range(3)]
    single = ee.CheckpointModel(cks[0])
    same = ee.EnsembleSpec([(ee.CheckpointModel(cks[0]), c) for _ in range(4) for c in CATEGORIES])
    identical = np.array_equal(ee.weighted_predict(same, arrays), single.predict(arrays))
    concentrated = True
    for k, cat in enumerate(CATEGORIES):
        w = {c: float(c == cat) for c in CATEGORIES}
        spec = ee.EnsembleSpec([(ee.CheckpointModel(ck), c) for ck, c in zip(cks, CATEGORIES)],
                               {"offset": w, "duration": dict(w)})
        concentrated &= np.array_equal(ee.weighted_predict(spec, arrays), ee.CheckpointModel(cks[k]).predict(arrays))
    criterion("ensemble", worst <= 1e-12 and identical and concentrated,
              f"max |diff| vs hand weighting {worst:.1e}, 12 identical members exact {identical}, "
              f"concentrated weights exact {concentrated}")


def test_attention(criterion, trained_500):
    ds, run, cfg = trained_500["dataset"], trained_500["run"], trained_500["model_config"]
    val = ds.arrays("val")
    maps = forward(run.params, cfg, {k: val[k][:32] for k in ("struct", "seq", "hist", "snap")}).attention
    dev = max(float(np.abs(m.sum(axis=-1) - 1.0).max()) for m in maps)
    nonneg = all(float(m.min()) >= 0.0 for m in maps)
    p = init_params(ModelConfig(), 0)
    d = ModelConfig().d_seq_hidden
    for l in range(ModelConfig().n_layers):
        p[f"seq.l{l}.qkv.w"][:, :2 * d] = 0.0
        p[f"seq.l{l}.qkv.b"][:2 * d] = 0.0
    _, flat = transformer_encode(p, np.random.default_rng(106).normal(size=(3, 60, 4)), ModelConfig())
    uni = max(float(np.abs(m - 1.0 / 60.0).max()) for m in flat)
    criterion("attention invariants", dev <= 1e-6 and nonneg and uni <= 1e-12,
              f"max |row sum - 1| {dev:.1e} on trained model, equal-logit max |a - 1/60| {uni:.1e}")


def test_workload(criterion):
    rng = np.random.default_rng(107)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(0, 25))
        starts = rng.integers(0, 280, size=n)
        ivs = [wl.CommandInterval("X", float(a), float(a + d)) for a, d in zip(starts, rng.integers(1, 20, size=n))]
        rep = wl.workload_report(ivs, (0.0, 300.0), 60.0)
        for w in rep.windows:
            occ = [sum(1 for v in ivs if v.issue_t <= t + 0.5 < v.end_t) for t in range(int(w.t_start), int(w.t_end))]
            issued = sum(1 for v in ivs if w.t_start <= v.issue_t < w.t_end)
            if (w.max_concurrency, w.cumulative_speech_s, w.command_count) != (max(occ), float(sum(occ)), issued):
                mismatches += 1
    (ex,) = wl.workload_report([wl.CommandInterval("X", 0.0, 5.0), wl.CommandInterval("X", 3.0, 8.0),
                                wl.CommandInterval("X", 10.0, 12.0)], (0.0, 60.0), 60.0).windows
    example = (ex.cumulative_speech_s, ex.max_concurrency, ex.command_count) == (12.0, 2, 3)
    criterion("workload", mismatches == 0 and example,
              f"{mismatches} window mismatches over 1000 random sets, example (12 s, 2, 3) {example}")


def _tree(root):
    out = []
    for d, _, names in os.walk(root):
        out += [os.path.relpath(os.path.join(d, n), root) for n in names]
    return sorted(out)


def test_determinism(criterion, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(SMALL_TOML)
    run_stages(tmp_path / "a", cfg, threads=1)
    run_stages(tmp_path / "b", cfg, threads=3)
    files = _tree(tmp_path / "a")
    compared = [f for f in files if not f.endswith("config.json")]
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", compared, shallow=False)
    kinds = {k: sum(1 for f in compared if k in f) for k in ("data/", "dataset/", "models/ckpt_", ".png", "metrics")}
    ok = files == _tree(tmp_path / "b") and not mismatch and not errors and all(kinds.values())
    criterion("determinism", ok,
              f"{len(compared)} files byte-identical across --threads 1 vs 3 ({kinds}); differing: {mismatch + errors}")


def test_permutation_importance(criterion, trained_500):
    ds = trained_500["dataset"]
    val = ds.arrays("val")
    y = ds.arrays("val", standardized=False)["y"]
    predict = _predictor(trained_500)
    names = ds.feature_names
    wins, deltas = 0, []
    for seed in range(20):
        dv = ee.permutation_importance(predict, val, y, "velocity", seed, names)
        dn = ee.permutation_importance(predict, val, y, "wind_speed", seed, names)
        wins += dv > dn
        deltas.append((dv, dn))
    mv, mn = np.mean(deltas, axis=0)
    criterion("permutation importance", wins >= 19,
              f"velocity beats wind_speed in {wins}/20 seeds (mean delta {mv:.3f} vs {mn:.3f})")
