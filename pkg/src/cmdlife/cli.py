"""``cmdlife`` command-line driver.

Exit codes: 0 success, 1 validation error (including bad arguments),
2 I/O error.  Outputs created by a failing run are removed.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import replace

from . import aligner, ensemble_eval as ee, phrase_parser as pp, pipeline, scene_raster as sr
from . import trajectory_signal as ts, workload as wl
from .config import RunConfig, load_config
from .context_features import states_at
from .errors import CmdlifeError, ValidationError
from .synthgen import area_bounds_for, generate_scenario, write_scenario

log = logging.getLogger("cmdlife")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmdlife", description="ATC command lifecycle toolkit")
    sub = parser.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scenario directory")
    _common(p)
    p.add_argument("--flights", type=int, help="overrides synth.n_flights")
    p.add_argument("--out", required=True)

    p = sub.add_parser("detect", help="detect maneuver onsets in tracks")
    _common(p)
    p.add_argument("--tracks", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("parse", help="parse a transcript into commands")
    _common(p)
    p.add_argument("--transcript", required=True)
    p.add_argument("--callsigns", help="alias,icao CSV (default: bundled table)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("align", help="pair commands with maneuvers and build a dataset")
    _common(p)
    p.add_argument("--tracks", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--commands", required=True)
    p.add_argument("--context", help="directory with airport.json, weather.csv, waypoints.csv, ...")
    p.add_argument("--out", required=True, help="dataset directory")

    p = sub.add_parser("render", help="write image modalities as PNG and raw buffers")
    _common(p)
    p.add_argument("--dataset", help="render every sample of a dataset")
    p.add_argument("--tracks", help="render one aircraft at one instant")
    p.add_argument("--callsign")
    p.add_argument("--t", type=float)
    p.add_argument("--context")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model per loss variant")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")

    p = sub.add_parser("predict", help="ensemble predictions for a dataset split")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--split", choices=["val", "train", "all"], default="val")
    p.add_argument("--plot", help="directory for per-flight SVG timelines")
    p.add_argument("--out", required=True, help="predictions CSV")

    p = sub.add_parser("evaluate", help="metrics for a predictions CSV")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", help="labels (predictions-format CSV or JSON lines); default: columns of --pred")
    p.add_argument("--out", help="also write the metrics JSON here")

    p = sub.add_parser("workload", help="timeline reconstruction and workload report")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--window-s", type=float)
    p.add_argument("--out", required=True, help="report directory")
    return parser


# ----------------------------------------------------------------------------
# subcommands


def _config_path(out: str) -> str:
    return os.path.join(out, "resolved_config.json") if os.path.isdir(out) else out + ".config.json"


def cmd_synth(a, rc: RunConfig):
    cfg = rc.synth
    if a.flights is not None:
        cfg = replace(cfg, n_flights=a.flights)
    sc = generate_scenario(cfg)
    write_scenario(sc, a.out)
    log.info("wrote %d flights, %d planted commands to %s", len(sc.trajectories), len(sc.truth.commands), a.out)


def cmd_detect(a, rc: RunConfig):
    trajs = ts.read_tracks_csv(a.tracks)
    events, notes = pipeline.detect_all(trajs, rc.detect, rc.threads)
    for n in notes:
        log.info("%s", n)
    ts.write_events_jsonl(a.out, events)
    log.info("%d events from %d tracks", len(events), len(trajs))


def cmd_parse(a, rc: RunConfig):
    table = pp.CallsignTable.from_csv(a.callsigns) if a.callsigns else pp.CallsignTable.default()
    kept, excluded, rejects = pipeline.parse_all(pp.read_transcript_tsv(a.transcript), table)
    pp.write_commands_jsonl(a.out, sorted(kept + excluded, key=lambda c: (c.start_t, c.callsign)))
    log.info("%d commands kept, %d excluded, %d utterances rejected", len(kept), len(excluded), len(rejects))


def cmd_align(a, rc: RunConfig):
    trajs = ts.read_tracks_csv(a.tracks)
    events = ts.read_events_jsonl(a.events)
    kept, _ = pp.filter_commands(pp.read_commands_jsonl(a.commands))
    res = aligner.align(kept, events, rc.align)
    ctx = pipeline.load_context(a.context or os.path.dirname(os.path.abspath(a.tracks)))
    ds = pipeline.build_dataset(res.pairs, trajs, ctx, rc)
    aligner.save_dataset(ds, a.out)
    aligner.write_pairs_jsonl(os.path.join(a.out, "pairs.jsonl"), res)
    log.info("%d pairs (%d commands, %d events unmatched); %d samples, %d dropped", len(res.pairs),
             len(res.unmatched_commands), len(res.unmatched_events), len(ds), ds.meta["n_dropped"])


def cmd_render(a, rc: RunConfig):
    os.makedirs(a.out, exist_ok=True)
    if a.dataset:
        ds = aligner.load_dataset(a.dataset)
        for i, s in enumerate(ds.samples):
            for kind, px in (("history", s.history_image), ("snapshot", s.snapshot_image)):
                img = sr.SceneImage(px, kind, s.event.onset_t, s.callsign)
                stem = os.path.join(a.out, f"{i:05d}_{s.callsign}_{kind}")
                sr.save_png(img, stem + ".png")
                sr.save_raw(img, stem)
        return
    if not (a.tracks and a.callsign and a.t is not None):
        raise UsageError("render needs --dataset, or --tracks with --callsign and --t")
    trajs = ts.read_tracks_csv(a.tracks)
    if a.callsign not in trajs:
        raise ValidationError(f"callsign {a.callsign} not in {a.tracks}")
    ctx = pipeline.load_context(a.context or os.path.dirname(os.path.abspath(a.tracks)))
    cfg = rc.raster
    if cfg.area_bounds is None:
        cfg = replace(cfg, area_bounds=area_bounds_for(ctx.airport))
    imgs = [sr.render_history(trajs[a.callsign], a.t, cfg), sr.render_snapshot(states_at(trajs, a.t), a.callsign, cfg, a.t)]
    for img in imgs:
        stem = os.path.join(a.out, f"{a.callsign}_{img.kind}")
        sr.save_png(img, stem + ".png")
        sr.save_raw(img, stem)


def cmd_train(a, rc: RunConfig):
    ds = aligner.load_dataset(a.dataset)
    runs = pipeline.train_runs(ds, rc, a.out)
    for v, r in runs.items():
        log.info("%s: train loss %.4f -> %.4f, %d checkpoints kept", v, r.initial_train_loss, r.final_train_loss,
                 len(r.checkpoints))


def _write_predictions(path, pred: pipeline.Predictions) -> None:
    ee.write_predictions_csv(path, pred.callsign, pred.onset_t, pred.y_pred, pred.y_true)


def cmd_predict(a, rc: RunConfig):
    ds = aligner.load_dataset(a.dataset)
    spec = ee.ensemble_from_checkpoints(ee.load_checkpoint_dir(a.models), rc.ensemble.top_k, rc.ensemble.weights())
    pred = pipeline.predict_split(spec, ds, None if a.split == "all" else a.split, rc.threads)
    _write_predictions(a.out, pred)
    if a.plot:
        os.makedirs(a.plot, exist_ok=True)
        for cs in sorted(set(pred.callsign)):
            rows = [i for i, c in enumerate(pred.callsign) if c == cs]
            ivs = [_interval(cs, pred.onset_t[i], pred.y_pred[i]) for i in rows]
            obs = [_observed(cs, pred.onset_t[i], pred.y_true[i]) for i in rows]
            svg = wl.timeline_svg([iv for iv in ivs + obs if iv is not None], [(cs, float(pred.onset_t[i])) for i in rows])
            with open(os.path.join(a.plot, f"{cs}.svg"), "w") as fh:
                fh.write(svg)
    log.info("%d predictions from %d ensemble members", len(pred.callsign), len(spec.members))


def _interval(cs, onset, y):
    try:
        return wl.reconstruct_timeline(ts.ManeuverEvent(cs, ts.Channel.ALTITUDE, float(onset), 0.0, 0.0),
                                       float(y[0]), float(y[1]))
    except ValidationError:
        log.warning("%s at %.1f: predicted duration %.3f not positive; skipped", cs, onset, y[1])
        return None


def _observed(cs, onset, y):
    end = float(onset) - float(y[0])
    return wl.CommandInterval(cs, end - float(y[1]), end, wl.Source.OBSERVED)


def cmd_evaluate(a, rc: RunConfig):
    d = ee.read_predictions_csv(a.pred)
    y_true = d["y_true"]
    if a.truth:
        y_true = ee.match_labels(ee.read_truth_labels(a.truth), d["callsign"], d["onset_t"])
    report = ee.compute_metrics(ee.EvaluationSet(y_true, d["y_pred"]))
    text = ee.metrics_json(report)
    print(text)
    if a.out:
        with open(a.out, "w") as fh:
            fh.write(text + "\n")


def cmd_workload(a, rc: RunConfig):
    d = ee.read_predictions_csv(a.pred)
    ivs = [iv for iv in (_interval(cs, t, y) for cs, t, y in zip(d["callsign"], d["onset_t"], d["y_pred"])) if iv]
    window = a.window_s if a.window_s is not None else rc.workload.window_s
    report = wl.workload_report(ivs, None, window)
    os.makedirs(a.out, exist_ok=True)
    wl.write_report_json(os.path.join(a.out, "workload.json"), report)
    wl.write_report_csv(os.path.join(a.out, "workload.csv"), report)
    wl.write_intervals_csv(os.path.join(a.out, "intervals.csv"), ivs)
    with open(os.path.join(a.out, "timeline.svg"), "w") as fh:
        fh.write(wl.timeline_svg(ivs, list(zip(d["callsign"], map(float, d["onset_t"])))))
    log.info("%d intervals over %d windows of %.0f s", len(ivs), len(report.windows), window)


COMMANDS = {
    "synth": cmd_synth,
    "detect": cmd_detect,
    "parse": cmd_parse,
    "align": cmd_align,
    "render": cmd_render,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "workload": cmd_workload,
}


def _remove(path):
    if os.path.isdir(path):
        shutil.rmtree(path, ignore_errors=True)
    elif os.path.exists(path):
        os.remove(path)


def _make_parents(path) -> list[str]:
    """Create missing parent directories; returns the topmost one created, if any."""
    parent = os.path.dirname(os.path.abspath(path))
    top = None
    while not os.path.exists(parent):
        top, parent = parent, os.path.dirname(parent)
    if top is None:
        return []
    os.makedirs(os.path.dirname(os.path.abspath(path)))
    return [top]


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    created: list[str] = []
    try:
        a = build_parser().parse_args(argv)
        if not a.verbose:
            logging.getLogger().setLevel(logging.WARNING)
            log.setLevel(logging.INFO)
        rc = load_config(a.config, a.seed, a.threads)
        log.info("%s: seed %d, config hash %s", a.cmd, rc.seed, rc.hash())
        outs = [getattr(a, k) for k in ("out", "plot") if getattr(a, k, None)]
        created = [o for o in outs if not os.path.exists(o)]
        for o in outs:
            created += _make_parents(o)
        COMMANDS[a.cmd](a, rc)
        if getattr(a, "out", None):
            rc.write(_config_path(a.out))
        return 0
    except ValidationError as exc:
        code, msg = 1, str(exc)
    except CmdlifeError as exc:
        code, msg = 1, str(exc)
    except OSError as exc:
        code, msg = 2, f"{type(exc).__name__}: {exc}"
    for path in created:
        _remove(path)
        _remove(path + ".config.json")
    print(f"cmdlife: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
