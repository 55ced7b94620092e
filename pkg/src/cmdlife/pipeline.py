"""Stage functions shared by the CLI and the in-process end-to-end run."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import aligner, ensemble_eval as ee, phrase_parser as pp, trajectory_signal as ts
from .config import RunConfig
from .context_features import (
    FeatureContext,
    read_aircraft_types_csv,
    read_airport_json,
    read_flights_csv,
    read_waypoints_csv,
    read_weather_csv,
    wtc_lookup,
)
from .errors import NoData, SchemaMismatch
from .neural.model import ModelConfig
from .neural.train import train
from .synthgen import DEFAULT_AIRPORT

log = logging.getLogger(__name__)


def _map(fn, items, threads: int):
    """Ordered map; results never depend on the thread count."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def detect_all(trajs: dict, cfg: ts.DetectorConfig, threads: int = 1) -> tuple[list, list[str]]:
    names = sorted(trajs)
    results = _map(lambda cs: ts.detect_track(trajs[cs], cfg), names, threads)
    events, notes = [], []
    for evs, nts in results:
        events.extend(evs)
        notes.extend(nts)
    events.sort(key=lambda e: (e.onset_t, e.callsign, ts.CHANNELS.index(ts.Channel(e.channel))))
    return events, notes


def parse_all(utterances, table: pp.CallsignTable):
    """(kept commands, excluded commands, rejected (utterance, reason) pairs)."""
    cmds, rejects = pp.parse_transcript(utterances, table)
    kept, excluded = pp.filter_commands(cmds)
    return kept, excluded, rejects


def load_table(data_dir) -> pp.CallsignTable:
    path = os.path.join(data_dir, "callsigns.csv")
    return pp.CallsignTable.from_csv(path) if os.path.exists(path) else pp.CallsignTable.default()


def load_context(data_dir) -> FeatureContext:
    """Optional context files from a scenario/data directory; missing ones are skipped."""
    j = lambda name: os.path.join(data_dir, name)  # noqa: E731
    airport = read_airport_json(j("airport.json")) if os.path.exists(j("airport.json")) else DEFAULT_AIRPORT
    weather = read_weather_csv(j("weather.csv")) if os.path.exists(j("weather.csv")) else None
    wps = read_waypoints_csv(j("waypoints.csv")) if os.path.exists(j("waypoints.csv")) else []
    wtc = None
    if os.path.exists(j("flights.csv")) and os.path.exists(j("aircraft_types.csv")):
        wtc = wtc_lookup(read_flights_csv(j("flights.csv")), read_aircraft_types_csv(j("aircraft_types.csv")))
    return FeatureContext(airport, weather, wps, wtc)


def build_dataset(pairs, trajs, ctx: FeatureContext, rc: RunConfig) -> aligner.Dataset:
    return aligner.build_dataset(pairs, trajs, ctx, rc.raster, seed=rc.seed, threads=rc.threads,
                                 val_frac=rc.dataset.val_frac)


def model_config_for(ds: aligner.Dataset, cfg: ModelConfig) -> ModelConfig:
    """Input widths and image size follow the dataset; the rest comes from the config."""
    s = ds.samples[0]
    h, w, c = s.history_image.shape
    if h != w:
        raise SchemaMismatch(f"model expects square images, dataset has {h}x{w}")
    return replace(cfg, d_struct_in=len(ds.feature_names), seq_len=s.sequence.shape[0],
                   d_seq_in=s.sequence.shape[1], img_size=h, img_channels=c)


def train_runs(ds: aligner.Dataset, rc: RunConfig, out_dir=None) -> dict:
    """One training run per loss variant; returns variant -> TrainResult."""
    if len(ds) == 0:
        raise NoData("dataset is empty")
    mcfg = model_config_for(ds, rc.model)
    runs = {}
    for variant in rc.ensemble.variants:
        tcfg = replace(rc.train, loss_variant=variant)
        log.info("training variant %s (seed %d)", variant, tcfg.seed)
        runs[variant] = train(ds, mcfg, tcfg, out_dir)
    return runs


def ensemble_spec(runs: dict, rc: RunConfig) -> ee.EnsembleSpec:
    return ee.ensemble_from_runs(runs, rc.ensemble.top_k, rc.ensemble.weights())


@dataclass
class Predictions:
    callsign: list
    onset_t: np.ndarray
    y_pred: np.ndarray
    y_true: np.ndarray
    channel: list


def predict_split(spec: ee.EnsembleSpec, ds: aligner.Dataset, split: str | None = "val", threads: int = 1) -> Predictions:
    arrays = ds.arrays(split)
    idx = arrays["index"]
    y_pred = ee.weighted_predict(spec, arrays, threads)
    y_true = np.array([[ds.samples[i].time_offset_s, ds.samples[i].duration_s] for i in idx]).reshape(-1, 2)
    return Predictions(
        [ds.samples[i].callsign for i in idx],
        np.array([ds.samples[i].event.onset_t for i in idx]),
        y_pred,
        y_true,
        [str(ts.Channel(ds.samples[i].event.channel).value) for i in idx],
    )


def evaluate(pred: Predictions) -> ee.MetricsReport:
    return ee.compute_metrics(ee.EvaluationSet(pred.y_true, pred.y_pred))


def run_pipeline(data_dir, rc: RunConfig) -> dict:
    """detect -> parse -> align -> dataset -> train -> ensemble predict -> metrics, in memory."""
    trajs = ts.read_tracks_csv(os.path.join(data_dir, "tracks.csv"))
    events, _ = detect_all(trajs, rc.detect, rc.threads)
    table = load_table(data_dir)
    utts = pp.read_transcript_tsv(os.path.join(data_dir, "transcript.tsv"))
    kept, _, _ = parse_all(utts, table)
    res = aligner.align(kept, events, rc.align)
    ds = build_dataset(res.pairs, trajs, load_context(data_dir), rc)
    runs = train_runs(ds, rc)
    pred = predict_split(ensemble_spec(runs, rc), ds, "val", rc.threads)
    return {"metrics": evaluate(pred), "predictions": pred, "dataset": ds, "runs": runs, "alignment": res}
