"""Deterministic synthetic scenarios with known command/maneuver ground truth.

A flight is a chain of platforms joined by constant-rate transitions on one
channel at a time.  For every transition a controller utterance is placed so
that ``onset = command end + offset``; both labels are recorded.  Output files
use the same formats the real pipeline ingests.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .context_features import AirportRef
from .errors import BadConfig
from .phrase_parser import (
    CallsignTable,
    CommandType,
    Direction,
    ParsedCommand,
    TranscriptUtterance,
    render_callsign,
    render_command,
    spell_digits,
    write_transcript_tsv,
)
from .trajectory_signal import Channel, Trajectory, write_tracks_csv

AIRCRAFT_TYPES = {"C172": "L", "A320": "M", "B738": "M", "A321": "M", "A333": "H", "B77W": "H", "B789": "H", "A388": "J"}
DEFAULT_AIRPORT = AirportRef("WSSS", 1.35917, 103.98944, 22.0)


@dataclass
class ScenarioConfig:
    n_flights: int = 20
    maneuvers_per_flight: tuple[int, int] = (1, 3)
    noise: dict = field(default_factory=lambda: {"altitude": 25.0, "speed": 1.5, "heading": 1.0})
    offset_mean: float = 12.0
    offset_sd: float = 5.0
    offset_min: float = -5.0
    # planted dependency: speed commands answered later
    speed_offset_shift: float = 4.0
    duration_mean: float = 3.5
    duration_sd: float = 1.0
    duration_clip: tuple[float, float] = (1.0, 8.0)
    # planted dependency: per-type shift of the spoken duration
    duration_shift: dict = field(default_factory=lambda: {"altitude": 0.6, "speed": -0.6, "heading": 0.0})
    # ft/s (1500 fpm), kt/s, deg/s
    rates: dict = field(default_factory=lambda: {"altitude": 25.0, "speed": 1.0, "heading": 3.0})
    platform_s: tuple[float, float] = (100.0, 160.0)
    start_t: float = 50000.0
    spread_s: float = 1800.0
    readback_prob: float = 0.3
    weather_step_s: float = 600.0
    airport: AirportRef = DEFAULT_AIRPORT
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.maneuvers_per_flight
        if self.n_flights < 0 or lo < 0 or hi < lo:
            raise BadConfig("maneuvers_per_flight must be a nonempty range of non-negative counts")
        if any(v < 0 for v in self.noise.values()) or self.offset_sd < 0 or self.duration_sd < 0:
            raise BadConfig("standard deviations must be non-negative")
        if self.platform_s[0] < 90.0 or self.platform_s[1] < self.platform_s[0]:
            # platforms must outlast the 60 s sequence window plus the detector's minimum
            raise BadConfig("platform_s must be a range starting at >= 90 s")
        if self.duration_clip[0] <= 0 or self.duration_clip[1] < self.duration_clip[0]:
            raise BadConfig("duration_clip must be a positive range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["airport"] = asdict(self.airport)
        return d


@dataclass(frozen=True)
class PlantedCommand:
    callsign: str
    channel: Channel
    onset_t: float
    from_value: float
    to_value: float
    cmd: ParsedCommand
    text: str

    @property
    def offset_s(self) -> float:
        return self.onset_t - (self.cmd.start_t + self.cmd.duration_s)

    def to_dict(self) -> dict:
        return {
            "kind": "maneuver",
            "callsign": self.callsign,
            "channel": self.channel.value,
            "onset_t": self.onset_t,
            "from_value": self.from_value,
            "to_value": self.to_value,
            "cmd_start_t": self.cmd.start_t,
            "cmd_duration_s": self.cmd.duration_s,
            "ctype": self.cmd.ctype.value,
            "value": self.cmd.value,
            "direction": self.cmd.direction.value,
            "time_offset_s": self.offset_s,
            "duration_s": self.cmd.duration_s,
            "text": self.text,
        }


@dataclass
class GroundTruth:
    commands: list[PlantedCommand] = field(default_factory=list)
    # (callsign, channel, t_start, t_end, value)
    platforms: list[tuple] = field(default_factory=list)

    @property
    def events(self) -> list[PlantedCommand]:
        return self.commands


@dataclass
class Scenario:
    config: ScenarioConfig
    trajectories: dict[str, Trajectory]
    transcript: list[TranscriptUtterance]
    truth: GroundTruth
    flights: dict[str, str]
    weather: list[tuple[float, float, float, float]]
    waypoints: list[tuple[str, float, float]]
    table: CallsignTable

    @property
    def area_bounds(self) -> tuple[float, float, float, float]:
        return area_bounds_for(self.config.airport)


def area_bounds_for(airport: AirportRef, half_nm: float = 60.0) -> tuple[float, float, float, float]:
    dlat = half_nm / 60.0
    dlon = half_nm / (60.0 * math.cos(math.radians(airport.lat)))
    return (airport.lat - dlat, airport.lon - dlon, airport.lat + dlat, airport.lon + dlon)


def _truncnorm(rng, mean, sd, lo):
    while True:
        v = rng.normal(mean, sd)
        if v >= lo:
            return float(v)


def _pick_target(rng, ch: Channel, cur: float):
    """New commanded value for channel and the heading turn direction."""
    if ch is Channel.ALTITUDE:
        choices = [cur + s * d for d in (1000, 2000) for s in (-1, 1) if 3000 <= cur + s * d <= 16000]
        return float(choices[rng.integers(len(choices))]), Direction.NONE
    if ch is Channel.SPEED:
        choices = [cur + s * d for d in (20, 30, 40) for s in (-1, 1) if 180 <= cur + s * d <= 300]
        return float(choices[rng.integers(len(choices))]), Direction.NONE
    turn = float(rng.choice([20, 30, 40, 60, 90]))
    sign = 1 if rng.random() < 0.5 else -1
    return (cur + sign * turn) % 360.0, (Direction.RIGHT if sign > 0 else Direction.LEFT)


def _callsigns(rng, table: CallsignTable, n: int) -> list[str]:
    codes = sorted(set(table.to_dict().values()))
    out: list[str] = []
    seen = set()
    while len(out) < n:
        code = codes[rng.integers(len(codes))]
        num = int(rng.integers(1, 1000))
        cs = f"{code}{num}"
        if cs not in seen:
            seen.add(cs)
            out.append(cs)
    return out


def _verb(ch: Channel, cur: float, target: float) -> str | None:
    if ch is Channel.ALTITUDE:
        return "climb" if target > cur else "descend"
    if ch is Channel.SPEED:
        return "increase" if target > cur else "reduce"
    return None


def generate_scenario(cfg: ScenarioConfig, table: CallsignTable | None = None) -> Scenario:
    """Build a full scenario; one RNG stream drives every random choice."""
    table = table or CallsignTable.default()
    rng = np.random.default_rng(cfg.seed)
    ap = cfg.airport
    trajs: dict[str, Trajectory] = {}
    utterances: list[TranscriptUtterance] = []
    truth = GroundTruth()
    type_names = sorted(AIRCRAFT_TYPES)
    flights: dict[str, str] = {}

    for cs in _callsigns(rng, table, cfg.n_flights):
        flights[cs] = type_names[rng.integers(len(type_names))]
        n_man = int(rng.integers(cfg.maneuvers_per_flight[0], cfg.maneuvers_per_flight[1] + 1))
        t0 = float(cfg.start_t + math.floor(rng.uniform(0, cfg.spread_s)))
        state = {
            Channel.ALTITUDE: float(rng.integers(5, 15) * 1000),
            Channel.SPEED: float(rng.integers(20, 29) * 10),
            Channel.HEADING: float(rng.integers(0, 36) * 10),
        }
        init = dict(state)
        plan = []
        for _ in range(n_man):
            plan.append(("platform", float(math.floor(rng.uniform(*cfg.platform_s)))))
            ch = (Channel.ALTITUDE, Channel.SPEED, Channel.HEADING)[rng.integers(3)]
            target, direction = _pick_target(rng, ch, state[ch])
            plan.append(("transition", ch, target, direction))
            state[ch] = target
        plan.append(("platform", float(math.floor(rng.uniform(*cfg.platform_s)))))

        cur = dict(init)
        alt, spd, hdg = [], [], []
        t = 0
        onsets = []
        plat_start = 0
        for step in plan:
            if step[0] == "platform":
                n = int(step[1])
                alt += [cur[Channel.ALTITUDE]] * n
                spd += [cur[Channel.SPEED]] * n
                hdg += [cur[Channel.HEADING]] * n
                t += n
                continue
            _, ch, target, direction = step
            for c in (Channel.ALTITUDE, Channel.SPEED, Channel.HEADING):
                truth.platforms.append((cs, c.value, t0 + plat_start, t0 + t - 1, cur[c]))
            start_val = cur[ch]
            delta = target - start_val
            if ch is Channel.HEADING:
                delta = ((delta + 180.0) % 360.0) - 180.0
            n = int(math.ceil(abs(delta) / cfg.rates[ch.value]))
            onsets.append((t0 + t - 1, ch, start_val, target, direction))
            for k in range(1, n + 1):
                frac = min(1.0, k * cfg.rates[ch.value] / abs(delta))
                v = start_val + frac * delta
                alt.append(v if ch is Channel.ALTITUDE else cur[Channel.ALTITUDE])
                spd.append(v if ch is Channel.SPEED else cur[Channel.SPEED])
                hdg.append(v % 360.0 if ch is Channel.HEADING else cur[Channel.HEADING])
            cur[ch] = target
            t += n
            plat_start = t
        for c in (Channel.ALTITUDE, Channel.SPEED, Channel.HEADING):
            truth.platforms.append((cs, c.value, t0 + plat_start, t0 + t - 1, cur[c]))

        alt_a, spd_a, hdg_a = np.array(alt), np.array(spd), np.array(hdg)
        n_pts = alt_a.shape[0]
        times = t0 + np.arange(n_pts, dtype=np.float64)

        # dead-reckoned position from the noise-free speed and heading
        rng_brg = math.radians(rng.uniform(0, 360))
        dist0 = rng.uniform(15.0, 45.0)
        lat = np.empty(n_pts)
        lon = np.empty(n_pts)
        lat[0] = ap.lat + dist0 * math.cos(rng_brg) / 60.0
        lon[0] = ap.lon + dist0 * math.sin(rng_brg) / (60.0 * math.cos(math.radians(ap.lat)))
        for i in range(1, n_pts):
            step_nm = spd_a[i - 1] / 3600.0
            h = math.radians(hdg_a[i - 1])
            lat[i] = lat[i - 1] + step_nm * math.cos(h) / 60.0
            lon[i] = lon[i - 1] + step_nm * math.sin(h) / (60.0 * math.cos(math.radians(lat[i - 1])))

        sig = cfg.noise
        alt_n = alt_a + rng.normal(0.0, sig["altitude"], n_pts)
        spd_n = np.maximum(0.0, spd_a + rng.normal(0.0, sig["speed"], n_pts))
        hdg_n = np.round(hdg_a + rng.normal(0.0, sig["heading"], n_pts), 3) % 360.0
        trajs[cs] = Trajectory(cs, times, lat, lon, np.round(alt_n, 2), np.round(spd_n, 3), hdg_n)

        prev_end = -math.inf
        for onset, ch, start_val, target, direction in onsets:
            ctype = CommandType(ch.value)
            off = _truncnorm(rng, cfg.offset_mean + (cfg.speed_offset_shift if ch is Channel.SPEED else 0.0),
                             cfg.offset_sd, cfg.offset_min)
            dur = float(np.clip(rng.normal(cfg.duration_mean + cfg.duration_shift[ch.value], cfg.duration_sd),
                                *cfg.duration_clip))
            dur = round(dur, 2)
            start = round(onset - off - dur, 2)
            if start < prev_end + 1.0:
                start = round(prev_end + 1.0, 2)
            value = int(round(target)) % 360 if ch is Channel.HEADING else int(round(target))
            cmd = ParsedCommand(cs, ctype, value, direction, start, dur, frozenset())
            text = render_command(cmd, table, _verb(ch, start_val, target))
            utterances.append(TranscriptUtterance(start, dur, "atco", text))
            truth.commands.append(PlantedCommand(cs, ch, float(onset), float(start_val), float(target), cmd, text))
            prev_end = start + dur
            if rng.random() < cfg.readback_prob:
                rb_dur = round(float(rng.uniform(1.5, 3.0)), 2)
                rb = " ".join(spell_digits(value) + render_callsign(cs, table))
                utterances.append(TranscriptUtterance(round(start + dur + 0.5, 2), rb_dur, "pilot", rb))

    utterances.sort(key=lambda u: (u.start_t, u.speaker, u.text))
    truth.commands.sort(key=lambda c: (c.cmd.start_t, c.callsign))

    weather = []
    if cfg.n_flights:
        t_end = max(tr.t[-1] for tr in trajs.values())
        wind, wdir, vis = 10.0, 200.0, 9000.0
        tw = cfg.start_t - cfg.weather_step_s
        while tw <= t_end:
            weather.append((tw, round(wind, 2), round(wdir % 360.0, 1), round(vis, 0)))
            wind = max(0.0, wind + rng.normal(0, 3))
            wdir += rng.normal(0, 15)
            vis = float(np.clip(vis + rng.normal(0, 800), 2000, 10000))
            tw += cfg.weather_step_s
    waypoints = []
    for i, brg in enumerate(range(0, 360, 45)):
        r = 25.0
        waypoints.append((
            f"WP{i:02d}",
            round(ap.lat + r * math.cos(math.radians(brg)) / 60.0, 6),
            round(ap.lon + r * math.sin(math.radians(brg)) / (60.0 * math.cos(math.radians(ap.lat))), 6),
        ))
    return Scenario(cfg, trajs, utterances, truth, flights, weather, waypoints, table)


def write_scenario(sc: Scenario, out_dir) -> dict[str, str]:
    """Write every scenario file into ``out_dir``; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    p = {k: os.path.join(out_dir, v) for k, v in {
        "tracks": "tracks.csv",
        "transcript": "transcript.tsv",
        "callsigns": "callsigns.csv",
        "truth": "truth.jsonl",
        "flights": "flights.csv",
        "aircraft_types": "aircraft_types.csv",
        "weather": "weather.csv",
        "waypoints": "waypoints.csv",
        "airport": "airport.json",
        "scenario": "scenario.json",
    }.items()}
    write_tracks_csv(p["tracks"], [sc.trajectories[cs] for cs in sorted(sc.trajectories)])
    write_transcript_tsv(p["transcript"], sc.transcript)
    with open(p["callsigns"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alias", "icao"])
        for alias, code in sc.table.to_dict().items():
            w.writerow([alias, code])
    with open(p["truth"], "w") as fh:
        for c in sc.truth.commands:
            fh.write(json.dumps(c.to_dict()) + "\n")
        for cs, ch, ts, te, v in sc.truth.platforms:
            fh.write(json.dumps({"kind": "platform", "callsign": cs, "channel": ch,
                                 "t_start": ts, "t_end": te, "value": v}) + "\n")
    with open(p["flights"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["callsign", "type"])
        for cs in sorted(sc.flights):
            w.writerow([cs, sc.flights[cs]])
    with open(p["aircraft_types"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["type", "wtc"])
        for tp in sorted(AIRCRAFT_TYPES):
            w.writerow([tp, AIRCRAFT_TYPES[tp]])
    with open(p["weather"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "wind_speed", "wind_dir", "visibility"])
        for row in sc.weather:
            w.writerow(row)
    with open(p["waypoints"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "lat", "lon"])
        for row in sc.waypoints:
            w.writerow(row)
    with open(p["airport"], "w") as fh:
        json.dump(asdict(sc.config.airport), fh, sort_keys=True)
    with open(p["scenario"], "w") as fh:
        json.dump(sc.config.to_dict(), fh, sort_keys=True, indent=1)
    return p


def read_truth_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [d for d in (json.loads(line) for line in fh if line.strip()) if d.get("kind") == "maneuver"]
