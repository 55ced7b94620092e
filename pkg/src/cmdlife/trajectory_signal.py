"""Trajectory segmentation into stable platforms and maneuver onsets.

Each kinematic channel (altitude, ground speed, heading) of a 1 Hz track is
smoothed with a Savitzky-Golay filter, scanned with a sliding window whose
densest-bin mass and spread decide whether the window is "stable", and the
merged stable runs become platforms.  A maneuver onset is the first sample
after a platform where the channel starts moving toward the next platform.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from . import kernels
from .errors import IrregularSampling, SignalTooShort, ValidationError


class Channel(str, Enum):
    ALTITUDE = "altitude"
    SPEED = "speed"
    HEADING = "heading"


CHANNELS = (Channel.ALTITUDE, Channel.SPEED, Channel.HEADING)
TRACK_HEADER = ["t", "callsign", "lat", "lon", "alt_ft", "gs_kt", "hdg_deg"]


@dataclass(frozen=True)
class TrackPoint:
    t: float
    lat: float
    lon: float
    alt: float
    gs: float
    hdg: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise ValidationError(f"coordinate out of range: {self.lat}, {self.lon}")
        if self.alt < -1000.0 or self.gs < 0.0 or not (0.0 <= self.hdg < 360.0):
            raise ValidationError(f"track point out of range at t={self.t}")


@dataclass
class Trajectory:
    """Column-oriented track for one callsign."""

    callsign: str
    t: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    alt: np.ndarray
    gs: np.ndarray
    hdg: np.ndarray

    def __post_init__(self):
        for name in ("t", "lat", "lon", "alt", "gs", "hdg"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.t.shape[0]
        if n < 2:
            raise ValidationError(f"{self.callsign}: trajectory needs at least 2 points")
        if any(getattr(self, k).shape != (n,) for k in ("lat", "lon", "alt", "gs", "hdg")):
            raise ValidationError(f"{self.callsign}: column length mismatch")
        if np.any(np.diff(self.t) <= 0):
            raise ValidationError(f"{self.callsign}: timestamps must be strictly increasing")

    @classmethod
    def from_points(cls, callsign: str, points: Iterable[TrackPoint]) -> "Trajectory":
        pts = list(points)
        cols = {k: [getattr(p, k) for p in pts] for k in ("t", "lat", "lon", "alt", "gs", "hdg")}
        return cls(callsign, **cols)

    @property
    def points(self) -> list[TrackPoint]:
        return [
            TrackPoint(*map(float, row))
            for row in zip(self.t, self.lat, self.lon, self.alt, self.gs, self.hdg)
        ]

    def __len__(self):
        return self.t.shape[0]

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[-1])

    def channel(self, ch: Channel) -> np.ndarray:
        ch = Channel(ch)
        if ch is Channel.ALTITUDE:
            return self.alt
        if ch is Channel.SPEED:
            return self.gs
        return self.hdg

    def is_regular(self) -> bool:
        return bool(np.all(np.abs(np.diff(self.t) - 1.0) < 1e-6))

    def shifted(self, dt: float) -> "Trajectory":
        return Trajectory(self.callsign, self.t + dt, self.lat, self.lon, self.alt, self.gs, self.hdg)

    def state_at(self, t: float) -> dict:
        """Linearly interpolated state at time ``t`` (heading on the circle)."""
        t0, t1 = self.span
        if not (t0 <= t <= t1):
            raise ValidationError(f"{self.callsign}: t={t} outside [{t0}, {t1}]")
        hdg = np.interp(t, self.t, unwrap_deg(self.hdg)) % 360.0
        return {
            "lat": float(np.interp(t, self.t, self.lat)),
            "lon": float(np.interp(t, self.t, self.lon)),
            "alt": float(np.interp(t, self.t, self.alt)),
            "gs": float(np.interp(t, self.t, self.gs)),
            "hdg": float(hdg),
        }


@dataclass(frozen=True)
class PlatformSegment:
    channel: Channel
    t_start: float
    t_end: float
    value: float


@dataclass(frozen=True)
class ManeuverEvent:
    callsign: str
    channel: Channel
    onset_t: float
    from_value: float
    to_value: float

    def to_json(self) -> str:
        d = asdict(self)
        d["channel"] = Channel(self.channel).value
        return json.dumps(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ManeuverEvent":
        return cls(
            callsign=d["callsign"],
            channel=Channel(d["channel"]),
            onset_t=float(d["onset_t"]),
            from_value=float(d["from_value"]),
            to_value=float(d["to_value"]),
        )


def _per_channel(alt, spd, hdg):
    return field(default_factory=lambda: {"altitude": alt, "speed": spd, "heading": hdg})


@dataclass
class DetectorConfig:
    sg_window: int = 11
    sg_order: int = 2
    win_s: int = 21
    bin_width: dict = _per_channel(100.0, 5.0, 4.0)
    stable_mass_frac: float = 0.7
    stable_std: dict = _per_channel(50.0, 2.5, 2.0)
    min_platform_s: float = 20.0
    change_threshold: dict = _per_channel(300.0, 8.0, 8.0)
    # per second: 200 fpm, 0.5 kt/s, 1 deg/s
    rate_threshold: dict = _per_channel(200.0 / 60.0, 0.5, 1.0)
    # SG derivative window applied to the smoothed series for the rate
    rate_window: int = 7
    # consecutive samples the rate must hold to count as an onset
    rate_persist: int = 3
    max_gap_s: float = 120.0
    resample_gap_s: float = 10.0

    def __post_init__(self):
        if self.sg_window % 2 != 1 or self.sg_window <= self.sg_order:
            raise ValidationError("sg_window must be odd and larger than sg_order")
        if not (0.0 < self.stable_mass_frac <= 1.0):
            raise ValidationError("stable_mass_frac must lie in (0, 1]")
        if self.rate_window % 2 != 1 or self.rate_window < 3:
            raise ValidationError("rate_window must be odd and >= 3")
        if self.win_s < 2 or self.rate_persist < 1:
            raise ValidationError("win_s must be >= 2 and rate_persist >= 1")

    def of(self, table: dict, ch: Channel) -> float:
        return float(table[Channel(ch).value])


# ----------------------------------------------------------------------------
# angles and resampling


def unwrap_deg(hdg: np.ndarray) -> np.ndarray:
    return np.unwrap(np.asarray(hdg, dtype=np.float64), period=360.0)


def wrap_diff(d: float) -> float:
    """Re-wrap an angular difference into (-180, 180]."""
    r = math.fmod(d, 360.0)
    if r <= -180.0:
        r += 360.0
    elif r > 180.0:
        r -= 360.0
    return r


def resample(traj: Trajectory, max_gap_s: float = 10.0) -> list[Trajectory]:
    """Split at gaps longer than ``max_gap_s`` and interpolate each piece to 1 Hz.

    The grid is the integer seconds inside each piece.  Pieces with fewer
    than two grid points are dropped.
    """
    t = traj.t
    breaks = np.nonzero(np.diff(t) > max_gap_s)[0] + 1
    pieces = []
    for lo, hi in zip(np.r_[0, breaks], np.r_[breaks, len(t)]):
        ts = t[lo:hi]
        grid = np.arange(math.ceil(ts[0]), math.floor(ts[-1]) + 1, dtype=np.float64)
        if grid.shape[0] < 2:
            continue
        hdg = np.interp(grid, ts, unwrap_deg(traj.hdg[lo:hi])) % 360.0
        pieces.append(
            Trajectory(
                traj.callsign,
                grid,
                np.interp(grid, ts, traj.lat[lo:hi]),
                np.interp(grid, ts, traj.lon[lo:hi]),
                np.interp(grid, ts, traj.alt[lo:hi]),
                np.interp(grid, ts, traj.gs[lo:hi]),
                hdg,
            )
        )
    return pieces


# ----------------------------------------------------------------------------
# Savitzky-Golay


def sg_coefficients(window: int, order: int, deriv: int = 0) -> np.ndarray:
    """Dot-product coefficients evaluating the local fit (or its derivative) at the centre."""
    half = window // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    vander = offsets[:, None] ** np.arange(order + 1)[None, :]
    return np.linalg.pinv(vander)[deriv] * math.factorial(deriv)


def _sg_filter(x: np.ndarray, window: int, order: int, deriv: int) -> np.ndarray:
    n = x.shape[0]
    half = window // 2
    out = np.empty(n)
    if n >= window:
        c = sg_coefficients(window, order, deriv)
        out[half:n - half] = np.convolve(x, c[::-1], mode="valid")
    # edges: symmetric windows shrinking toward the ends
    for i in list(range(min(half, n))) + list(range(max(n - half, half), n)):
        h = min(half, i, n - 1 - i)
        o = min(order, 2 * h)
        if deriv > o:
            if h == 0:
                # single sample: borrow the one-sided slope
                j = 1 if i == 0 else -1
                out[i] = (x[i + j] - x[i]) * j if n > 1 else 0.0
            else:
                out[i] = 0.0
            continue
        c = sg_coefficients(2 * h + 1, o, deriv)
        out[i] = float(np.dot(c, x[i - h:i + h + 1]))
    return out


def smooth_channel(samples, cfg: DetectorConfig, channel: Channel = Channel.ALTITUDE) -> np.ndarray:
    """Savitzky-Golay smoothing with shrinking-window fits at the edges.

    Heading must arrive unwrapped; ``channel`` is accepted for symmetry with
    the other per-channel stages and does not change the filter.
    """
    Channel(channel)
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < cfg.sg_window:
        raise SignalTooShort(f"need at least {cfg.sg_window} samples, got {x.shape[0]}")
    return _sg_filter(x, cfg.sg_window, cfg.sg_order, 0)


def channel_rate(smoothed: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    """Per-second derivative of an already smoothed 1 Hz series (local quadratic fit)."""
    return _sg_filter(smoothed, cfg.rate_window, min(2, cfg.rate_window - 1), 1)


def _channel_signal(traj: Trajectory, ch: Channel) -> np.ndarray:
    x = traj.channel(ch)
    return unwrap_deg(x) if Channel(ch) is Channel.HEADING else x


# ----------------------------------------------------------------------------
# platforms and maneuvers


def stable_mask(smoothed: np.ndarray, ch: Channel, cfg: DetectorConfig) -> np.ndarray:
    """Boolean stability flag per sliding window (window k covers samples k..k+win_s-1)."""
    frac, std = kernels.window_stats(smoothed, cfg.win_s, cfg.of(cfg.bin_width, ch))
    return (frac >= cfg.stable_mass_frac) & (std <= cfg.of(cfg.stable_std, ch))


def detect_platforms(traj: Trajectory, channel: Channel, cfg: DetectorConfig) -> list[PlatformSegment]:
    ch = Channel(channel)
    if not traj.is_regular():
        raise IrregularSampling(f"{traj.callsign}: resample to 1 Hz before detection")
    if len(traj) < max(cfg.sg_window, cfg.win_s):
        return []
    sm = smooth_channel(_channel_signal(traj, ch), cfg, ch)
    return _platforms_from_smoothed(traj.t, sm, ch, cfg)


def _platforms_from_smoothed(t, sm, ch, cfg):
    mask = stable_mask(sm, ch, cfg)
    win = cfg.win_s
    half = win // 2
    n = sm.shape[0]
    out = []
    k = 0
    nw = mask.shape[0]
    while k < nw:
        if not mask[k]:
            k += 1
            continue
        j = k
        while j + 1 < nw and mask[j + 1]:
            j += 1
        # a run of stable windows spans the centres of its windows; at the
        # track ends it extends to the first/last sample
        lo = 0 if k == 0 else k + half
        hi = n - 1 if j == nw - 1 else j + half
        if t[hi] - t[lo] >= cfg.min_platform_s:
            value = float(np.median(sm[lo:hi + 1]))
            if ch is Channel.HEADING:
                value %= 360.0
            out.append(PlatformSegment(ch, float(t[lo]), float(t[hi]), value))
        k = j + 1
    return out


def _value_gap(ch: Channel, a: float, b: float) -> float:
    d = b - a
    return wrap_diff(d) if ch is Channel.HEADING else d


def extract_maneuvers(traj: Trajectory, cfg: DetectorConfig) -> list[ManeuverEvent]:
    if not traj.is_regular():
        raise IrregularSampling(f"{traj.callsign}: resample to 1 Hz before detection")
    events = []
    if len(traj) < max(cfg.sg_window, cfg.win_s):
        return events
    for ch in CHANNELS:
        sm = smooth_channel(_channel_signal(traj, ch), cfg, ch)
        plats = _platforms_from_smoothed(traj.t, sm, ch, cfg)
        if len(plats) < 2:
            continue
        rate = channel_rate(sm, cfg)
        thr = cfg.of(cfg.rate_threshold, ch)
        t0 = traj.t[0]
        for p, q in zip(plats, plats[1:]):
            gap = _value_gap(ch, p.value, q.value)
            if abs(gap) < cfg.of(cfg.change_threshold, ch) or q.t_start - p.t_end > cfg.max_gap_s:
                continue
            i_lo = int(round(p.t_end - t0)) + 1
            i_hi = int(round(q.t_start - t0))
            onset = p.t_end
            # signed rate toward the next platform, held for rate_persist samples
            moving = np.sign(gap) * rate[i_lo:i_hi] >= thr
            run = 0
            for k, flag in enumerate(moving):
                run = run + 1 if flag else 0
                if run >= cfg.rate_persist:
                    onset = float(traj.t[i_lo + k - run + 1])
                    break
            events.append(ManeuverEvent(traj.callsign, ch, onset, p.value, q.value))
    events.sort(key=lambda e: (e.onset_t, CHANNELS.index(e.channel)))
    return events


def is_cdo_like(traj: Trajectory, cfg: DetectorConfig) -> bool:
    """True when the altitude channel has no platform at all."""
    return not detect_platforms(traj, Channel.ALTITUDE, cfg)


def detect_track(traj: Trajectory, cfg: DetectorConfig) -> tuple[list[ManeuverEvent], list[str]]:
    """Resample one raw track and detect events; also returns excluded piece notes."""
    events, notes = [], []
    for piece in resample(traj, cfg.resample_gap_s):
        if is_cdo_like(piece, cfg):
            notes.append(f"{traj.callsign}@{piece.t[0]:.0f}: cdo-like, excluded")
            continue
        events.extend(extract_maneuvers(piece, cfg))
    events.sort(key=lambda e: (e.onset_t, CHANNELS.index(e.channel)))
    return events, notes


# ----------------------------------------------------------------------------
# file formats


def read_tracks_csv(path) -> dict[str, Trajectory]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACK_HEADER:
            raise ValidationError(f"{path}: expected header {','.join(TRACK_HEADER)}")
        for r in reader:
            rows.setdefault(r["callsign"], []).append(
                (float(r["t"]), float(r["lat"]), float(r["lon"]), float(r["alt_ft"]),
                 float(r["gs_kt"]), float(r["hdg_deg"]))
            )
    out = {}
    for cs in sorted(rows):
        arr = np.array(sorted(rows[cs]), dtype=np.float64)
        out[cs] = Trajectory(cs, *arr.T)
    return out


def write_tracks_csv(path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_HEADER)
        for tr in trajs:
            for i in range(len(tr)):
                w.writerow([
                    repr(float(tr.t[i])), tr.callsign, f"{tr.lat[i]:.7f}", f"{tr.lon[i]:.7f}",
                    f"{tr.alt[i]:.2f}", f"{tr.gs[i]:.3f}", f"{round(float(tr.hdg[i]), 3) % 360.0:.3f}",
                ])


def write_events_jsonl(path, events: Iterable[ManeuverEvent]) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(e.to_json() + "\n")


def read_events_jsonl(path) -> list[ManeuverEvent]:
    with open(path) as fh:
        return [ManeuverEvent.from_dict(json.loads(line)) for line in fh if line.strip()]
