import time

import numpy as np
import pytest

from cmdlife import aligner, phrase_parser as pp, trajectory_signal as ts
from cmdlife.context_features import FeatureContext, WeatherRecord, WeatherTable, Waypoint, wtc_lookup
from cmdlife.neural.model import ModelConfig
from cmdlife.neural.train import TrainConfig, train
from cmdlife.scene_raster import RasterConfig
from cmdlife.synthgen import AIRCRAFT_TYPES, ScenarioConfig, generate_scenario

SMALL_TOML = """
seed = 5

[synth]
n_flights = 12

[model]
d_mlp = 8
d_seq_hidden = 8
n_heads = 2
d_ffn = 8
d_img = 8
cnn_channels = [4, 4]
fusion_hidden = 8

[train]
lr = 1e-3
epochs = 3
batch = 16

[raster]
width = 32
height = 32
"""


def run_stages(base, config, threads=1):
    """Every CLI stage in order; returns the output directory."""
    from cmdlife.cli import main

    d, o = base / "data", base / "out"
    o.mkdir(parents=True)
    common = ["--config", str(config), "--threads", str(threads)]
    steps = [
        ["synth", "--out", str(d)],
        ["detect", "--tracks", str(d / "tracks.csv"), "--out", str(o / "events.jsonl")],
        ["parse", "--transcript", str(d / "transcript.tsv"), "--callsigns", str(d / "callsigns.csv"),
         "--out", str(o / "commands.jsonl")],
        ["align", "--tracks", str(d / "tracks.csv"), "--events", str(o / "events.jsonl"),
         "--commands", str(o / "commands.jsonl"), "--out", str(o / "dataset")],
        ["render", "--dataset", str(o / "dataset"), "--out", str(o / "images")],
        ["train", "--dataset", str(o / "dataset"), "--out", str(o / "models")],
        ["predict", "--dataset", str(o / "dataset"), "--models", str(o / "models"), "--plot", str(o / "plots"),
         "--out", str(o / "pred.csv")],
        ["evaluate", "--pred", str(o / "pred.csv"), "--out", str(o / "metrics.json")],
        ["workload", "--pred", str(o / "pred.csv"), "--window-s", "120", "--out", str(o / "workload")],
    ]
    for argv in steps:
        code = main(argv[:1] + common + argv[1:])
        assert code == 0, argv
    return base


def scenario_context(sc) -> FeatureContext:
    return FeatureContext(
        sc.config.airport,
        WeatherTable(WeatherRecord(*w) for w in sc.weather),
        [Waypoint(*w) for w in sc.waypoints],
        wtc_lookup(sc.flights, AIRCRAFT_TYPES),
    )


def detect_scenario(sc, cfg=None):
    cfg = cfg or ts.DetectorConfig()
    events = []
    for cs in sorted(sc.trajectories):
        events.extend(ts.detect_track(sc.trajectories[cs], cfg)[0])
    events.sort(key=lambda e: (e.onset_t, e.callsign))
    return events


def scenario_pairs(sc):
    cmds, _ = pp.parse_transcript(sc.transcript, sc.table)
    kept, _ = pp.filter_commands(cmds)
    return aligner.align(kept, detect_scenario(sc))


@pytest.fixture(scope="session")
def small_scenario():
    return generate_scenario(ScenarioConfig(n_flights=20, seed=11))


@pytest.fixture(scope="session")
def small_dataset(small_scenario):
    res = scenario_pairs(small_scenario)
    return aligner.build_dataset(res.pairs, small_scenario.trajectories, scenario_context(small_scenario),
                                 RasterConfig(width=32, height=32), seed=3)


@pytest.fixture(scope="session")
def trained_500():
    """500 aligned synthetic samples, default model, 50 epochs at the default lr.

    Shared by the learning-sanity and permutation-importance checks so the
    network is trained once per session.
    """
    t0 = time.perf_counter()
    sc = generate_scenario(ScenarioConfig(n_flights=250, seed=3))
    res = scenario_pairs(sc)
    ds = aligner.build_dataset(res.pairs[:500], sc.trajectories, scenario_context(sc), RasterConfig(), seed=7)
    t_data = time.perf_counter() - t0
    t0 = time.perf_counter()
    mcfg = ModelConfig()
    run = train(ds, mcfg, TrainConfig(epochs=50))
    t_train = time.perf_counter() - t0
    return {"dataset": ds, "run": run, "model_config": mcfg, "t_data": t_data, "t_train": t_train}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; fails the test when the criterion fails."""
    seen = []

    def record(name, ok, detail=""):
        seen.append(name)
        ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"{name}: {detail}"

    yield record
    if not seen:
        ACCEPTANCE.append((request.node.name, False, "errored before the criterion was evaluated"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
