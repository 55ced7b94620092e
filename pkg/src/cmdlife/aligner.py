"""Command-to-maneuver alignment and lifecycle dataset materialisation.

Labels follow the command-end anchor: ``time_offset_s = onset - (start + duration)``,
so the command interval is recoverable from an onset and the two labels.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .context_features import (
    FEATURE_NAMES,
    FeatureContext,
    assemble_features,
    schema_hash,
    states_at,
)
from .errors import SampleDropped, ValidationError
from .phrase_parser import CommandType, ParsedCommand
from .scene_raster import RasterConfig, render_history, render_snapshot
from .synthgen import area_bounds_for
from .trajectory_signal import CHANNELS, Channel, ManeuverEvent, Trajectory

log = logging.getLogger(__name__)

SEQ_LEN = 60
SEQ_CHANNELS = ("alt", "gs", "hdg_sin", "hdg_cos")
DATASET_VERSION = 1


@dataclass(frozen=True)
class AlignmentConfig:
    window_before_s: float = 15.0
    window_after_s: float = 60.0
    require_type_match: bool = True

    def __post_init__(self):
        if self.window_before_s < 0 or self.window_after_s < 0:
            raise ValidationError("alignment windows must be non-negative")


@dataclass
class AlignmentResult:
    pairs: list[tuple[ParsedCommand, ManeuverEvent]]
    unmatched_commands: list[ParsedCommand]
    unmatched_events: list[ManeuverEvent]


def _type_ok(cmd: ParsedCommand, ev: ManeuverEvent) -> bool:
    return CommandType(cmd.ctype).value == Channel(ev.channel).value


def align(cmds: Sequence[ParsedCommand], events: Sequence[ManeuverEvent], cfg: AlignmentConfig = AlignmentConfig()) -> AlignmentResult:
    """Pair each command with its nearest admissible maneuver.

    Every command proposes its nearest candidate (same callsign, matching
    type when required, onset within the window around the command end).
    When several commands propose the same event the smallest gap wins and
    the others stay unmatched.
    """
    by_cs: dict[str, list[int]] = {}
    for j, e in enumerate(events):
        by_cs.setdefault(e.callsign, []).append(j)

    proposals = []  # (gap, cmd index, event index)
    for i, c in enumerate(cmds):
        end = c.start_t + c.duration_s
        best = None
        for j in by_cs.get(c.callsign, ()):
            e = events[j]
            if cfg.require_type_match and not _type_ok(c, e):
                continue
            if not (end - cfg.window_before_s <= e.onset_t <= end + cfg.window_after_s):
                continue
            key = (abs(e.onset_t - end), e.onset_t, CHANNELS.index(Channel(e.channel)), j)
            if best is None or key < best:
                best = key
        if best is not None:
            proposals.append((best[0], i, best[3]))

    proposals.sort()
    cmd_taken, ev_taken = set(), set()
    matched = []
    for _, i, j in proposals:
        if j in ev_taken:
            continue
        cmd_taken.add(i)
        ev_taken.add(j)
        matched.append((i, j))
    matched.sort()
    return AlignmentResult(
        pairs=[(cmds[i], events[j]) for i, j in matched],
        unmatched_commands=[c for i, c in enumerate(cmds) if i not in cmd_taken],
        unmatched_events=[e for j, e in enumerate(events) if j not in ev_taken],
    )


# ----------------------------------------------------------------------------
# samples and datasets


@dataclass
class LifecycleSample:
    callsign: str
    cmd: ParsedCommand
    event: ManeuverEvent
    features: np.ndarray
    sequence: np.ndarray
    history_image: np.ndarray
    snapshot_image: np.ndarray
    time_offset_s: float
    duration_s: float
    group: str = ""
    split: str = "train"


def time_offset(cmd: ParsedCommand, ev: ManeuverEvent) -> float:
    return ev.onset_t - (cmd.start_t + cmd.duration_s)


def sequence_window(traj: Trajectory, end_t: float, length: int = SEQ_LEN) -> np.ndarray:
    """(length, 4) matrix of alt, gs, sin/cos heading at 1 Hz ending at end_t."""
    ts = end_t - (length - 1) + np.arange(length, dtype=np.float64)
    t0, t1 = traj.span
    if ts[0] < t0 - 1e-9 or ts[-1] > t1 + 1e-9:
        raise SampleDropped(f"{traj.callsign}: sequence window [{ts[0]}, {ts[-1]}] outside track [{t0}, {t1}]")
    hdg = np.radians(np.interp(ts, traj.t, np.unwrap(traj.hdg, period=360.0)))
    return np.column_stack([
        np.interp(ts, traj.t, traj.alt),
        np.interp(ts, traj.t, traj.gs),
        np.sin(hdg),
        np.cos(hdg),
    ])


def make_sample(
    cmd: ParsedCommand,
    ev: ManeuverEvent,
    trajs: Mapping[str, Trajectory],
    ctx: FeatureContext,
    raster: RasterConfig,
) -> LifecycleSample:
    """Materialise one pair; inputs are taken at the maneuver onset."""
    traj = trajs.get(ev.callsign)
    if traj is None:
        raise SampleDropped(f"no trajectory for {ev.callsign}")
    t = ev.onset_t
    seq = sequence_window(traj, t)
    states = states_at(trajs, t)
    wx = ctx.weather.at(t) if ctx.weather is not None else None
    wtc = (ctx.wtc_by_callsign or {}).get(ev.callsign, "M")
    feats = assemble_features(cmd, traj, t, ctx.airport, states, wx, wtc=wtc,
                              waypoints=ctx.waypoints, density_radius_nm=ctx.density_radius_nm)
    hist = render_history(traj, t, raster)
    snap = render_snapshot(states, ev.callsign, raster, t)
    return LifecycleSample(
        callsign=ev.callsign,
        cmd=cmd,
        event=ev,
        features=feats,
        sequence=seq,
        history_image=hist.pixels,
        snapshot_image=snap.pixels,
        time_offset_s=time_offset(cmd, ev),
        duration_s=cmd.duration_s,
        group=f"{ev.callsign}-{int(ev.onset_t // 86400)}",
    )


def split_groups(groups: Sequence[str], seed: int, val_frac: float = 0.2) -> list[str]:
    """Assign 'train'/'val' per sample so that no group spans both splits."""
    n = len(groups)
    target = int(round(val_frac * n))
    sizes: dict[str, int] = {}
    for g in groups:
        sizes[g] = sizes.get(g, 0) + 1
    order = sorted(sizes)
    perm = np.random.default_rng(seed).permutation(len(order))
    val_groups = set()
    filled = 0
    for k in perm:
        g = order[k]
        if filled + sizes[g] <= target:
            val_groups.add(g)
            filled += sizes[g]
        if filled == target:
            break
    return ["val" if g in val_groups else "train" for g in groups]


@dataclass
class NormStats:
    feat_mean: np.ndarray
    feat_std: np.ndarray
    seq_mean: np.ndarray
    seq_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in
                ("feat_mean", "feat_std", "seq_mean", "seq_std", "target_mean", "target_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    def destandardize_targets(self, y: np.ndarray) -> np.ndarray:
        return y * self.target_std + self.target_mean

    def standardize_targets(self, y: np.ndarray) -> np.ndarray:
        return (y - self.target_mean) / self.target_std


def _moments(x: np.ndarray, axis) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=axis)
    std = x.std(axis=axis)
    # constant columns keep unit scale
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


@dataclass
class Dataset:
    samples: list[LifecycleSample]
    stats: NormStats
    meta: dict = field(default_factory=dict)
    feature_names: tuple = FEATURE_NAMES

    def __len__(self):
        return len(self.samples)

    def indices(self, split: str | None = None) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.samples) if split is None or s.split == split], dtype=np.int64)

    def arrays(self, split: str | None = None, standardized: bool = True) -> dict[str, np.ndarray]:
        """Model-ready arrays; images channel-last (N, H, W, 3)."""
        idx = self.indices(split)
        feats = np.array([self.samples[i].features for i in idx]).reshape(len(idx), len(self.feature_names))
        seq = np.array([self.samples[i].sequence for i in idx]).reshape(len(idx), SEQ_LEN, len(SEQ_CHANNELS))
        y = np.array([[self.samples[i].time_offset_s, self.samples[i].duration_s] for i in idx]).reshape(len(idx), 2)
        if standardized:
            feats = (feats - self.stats.feat_mean) / self.stats.feat_std
            seq = (seq - self.stats.seq_mean) / self.stats.seq_std
            y = self.stats.standardize_targets(y)
        hist = np.array([self.samples[i].history_image for i in idx])
        snap = np.array([self.samples[i].snapshot_image for i in idx])
        return {
            "struct": feats,
            "seq": seq,
            "hist": hist,
            "snap": snap,
            "y": y,
            "index": idx,
        }


def compute_stats(samples: Sequence[LifecycleSample]) -> NormStats:
    train = [s for s in samples if s.split == "train"]
    if not train:
        raise ValidationError("training split is empty")
    f = np.array([s.features for s in train])
    q = np.array([s.sequence for s in train]).reshape(-1, len(SEQ_CHANNELS))
    y = np.array([[s.time_offset_s, s.duration_s] for s in train])
    fm, fs = _moments(f, 0)
    qm, qs = _moments(q, 0)
    ym, ys = _moments(y, 0)
    return NormStats(fm, fs, qm, qs, ym, ys)


def build_dataset(
    pairs: Sequence[tuple[ParsedCommand, ManeuverEvent]],
    trajs: Mapping[str, Trajectory],
    ctx: FeatureContext,
    raster: RasterConfig,
    seed: int = 0,
    threads: int = 1,
    val_frac: float = 0.2,
) -> Dataset:
    """One sample per pair, seeded grouped split, training-split standardisation."""
    if raster.area_bounds is None:
        raster = RasterConfig(**{**raster.__dict__, "area_bounds": area_bounds_for(ctx.airport)})
    ordered = sorted(pairs, key=lambda p: (p[1].onset_t, p[1].callsign, CHANNELS.index(Channel(p[1].channel))))

    def build(pair):
        try:
            return make_sample(pair[0], pair[1], trajs, ctx, raster)
        except SampleDropped as exc:
            log.info("sample dropped: %s", exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = list(pool.map(build, ordered))
    else:
        built = [build(p) for p in ordered]
    samples = [s for s in built if s is not None]
    dropped = len(built) - len(samples)
    for s, split in zip(samples, split_groups([s.group for s in samples], seed, val_frac)):
        s.split = split
    stats = compute_stats(samples)
    meta = {
        "version": DATASET_VERSION,
        "seed": seed,
        "n_samples": len(samples),
        "n_dropped": dropped,
        "n_train": sum(s.split == "train" for s in samples),
        "n_val": sum(s.split == "val" for s in samples),
        "raster": {k: (list(v) if isinstance(v, tuple) else v) for k, v in raster.__dict__.items()},
        "airport": ctx.airport.__dict__,
        "density_radius_nm": ctx.density_radius_nm,
    }
    return Dataset(samples, stats, meta)


# ----------------------------------------------------------------------------
# on-disk layout: index.jsonl, sequences.bin, images/*.bin, schema.json


def _event_dict(e: ManeuverEvent) -> dict:
    return json.loads(e.to_json())


def save_dataset(ds: Dataset, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    with open(os.path.join(out_dir, "index.jsonl"), "w") as fh:
        for i, s in enumerate(ds.samples):
            fh.write(json.dumps({
                "i": i,
                "callsign": s.callsign,
                "split": s.split,
                "group": s.group,
                "cmd": s.cmd.to_dict(),
                "event": _event_dict(s.event),
                "features": [float(v) for v in s.features],
                "time_offset_s": s.time_offset_s,
                "duration_s": s.duration_s,
            }) + "\n")
    seq = np.array([s.sequence for s in ds.samples], dtype="<f8").reshape(len(ds), SEQ_LEN, len(SEQ_CHANNELS))
    seq.tofile(os.path.join(out_dir, "sequences.bin"))
    for kind in ("history", "snapshot"):
        imgs = [getattr(s, f"{kind}_image") for s in ds.samples]
        arr = np.array(imgs, dtype="<f4")
        arr.tofile(os.path.join(out_dir, "images", f"{kind}.bin"))
        with open(os.path.join(out_dir, "images", f"{kind}.json"), "w") as fh:
            json.dump({
                "kind": kind,
                "shape": list(arr.shape),
                "items": [{"t": s.event.onset_t, "callsign": s.callsign} for s in ds.samples],
            }, fh, sort_keys=True)
    with open(os.path.join(out_dir, "schema.json"), "w") as fh:
        json.dump({
            "feature_names": list(ds.feature_names),
            "schema_hash": schema_hash(ds.feature_names),
            "seq_channels": list(SEQ_CHANNELS),
            "seq_len": SEQ_LEN,
            "norm": ds.stats.to_dict(),
            "meta": ds.meta,
        }, fh, sort_keys=True, indent=1)


def load_dataset(in_dir) -> Dataset:
    with open(os.path.join(in_dir, "schema.json")) as fh:
        schema = json.load(fh)
    names = tuple(schema["feature_names"])
    if schema["schema_hash"] != schema_hash(names) or names != FEATURE_NAMES:
        raise ValidationError(f"{in_dir}: feature schema does not match this version")
    with open(os.path.join(in_dir, "index.jsonl")) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    n = len(rows)
    seq = np.fromfile(os.path.join(in_dir, "sequences.bin"), dtype="<f8").reshape(n, SEQ_LEN, len(SEQ_CHANNELS))
    imgs = {}
    for kind in ("history", "snapshot"):
        with open(os.path.join(in_dir, "images", f"{kind}.json")) as fh:
            shape = json.load(fh)["shape"]
        imgs[kind] = np.fromfile(os.path.join(in_dir, "images", f"{kind}.bin"), dtype="<f4").astype(np.float64).reshape(shape)
    samples = []
    for k, r in enumerate(rows):
        samples.append(LifecycleSample(
            callsign=r["callsign"],
            cmd=ParsedCommand.from_dict(r["cmd"]),
            event=ManeuverEvent.from_dict(r["event"]),
            features=np.asarray(r["features"], dtype=np.float64),
            sequence=seq[k],
            history_image=imgs["history"][k],
            snapshot_image=imgs["snapshot"][k],
            time_offset_s=float(r["time_offset_s"]),
            duration_s=float(r["duration_s"]),
            group=r["group"],
            split=r["split"],
        ))
    return Dataset(samples, NormStats.from_dict(schema["norm"]), schema["meta"], names)


def write_pairs_jsonl(path, result: AlignmentResult) -> None:
    with open(path, "w") as fh:
        for c, e in result.pairs:
            fh.write(json.dumps({"cmd": c.to_dict(), "event": _event_dict(e), "time_offset_s": time_offset(c, e)}) + "\n")


def read_pairs_jsonl(path) -> list[tuple[ParsedCommand, ManeuverEvent]]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [(ParsedCommand.from_dict(r["cmd"]), ManeuverEvent.from_dict(r["event"])) for r in rows]
