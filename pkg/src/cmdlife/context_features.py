"""Structured per-sample features: airport geometry, traffic, categorical codes, weather."""

from __future__ import annotations

import bisect
import csv
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BadCoordinate, OutOfRange, UndefinedBearing, ValidationError
from .phrase_parser import CommandType, ParsedCommand
from .trajectory_signal import Trajectory

EARTH_RADIUS_NM = 3440.065

FEATURE_NAMES = (
    "is_altitude_cmd",
    "velocity",
    "head",
    "cmd_value_norm",
    "wtc_L",
    "wtc_M",
    "wtc_H",
    "wtc_J",
    "cas",
    "cas_is_gs_proxy",
    "alt",
    "hdg_sin",
    "hdg_cos",
    "distance_to_airport",
    "bearing_to_airport",
    "traffic_density",
    "hour_sin",
    "hour_cos",
    "wind_speed",
    "visibility",
    "wx_present",
    "route_xtd",
    "nearest_wp_dist",
    "route_present",
)
WTC_CLASSES = ("L", "M", "H", "J")
_VALUE_SCALE = {CommandType.ALTITUDE: 40000.0, CommandType.SPEED: 350.0, CommandType.HEADING: 360.0}


def schema_hash(names: Sequence[str] = FEATURE_NAMES) -> str:
    return hashlib.sha256("\n".join(names).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AirportRef:
    icao: str
    lat: float
    lon: float
    elevation: float = 0.0

    def __post_init__(self):
        _check(self.lat, self.lon)


@dataclass(frozen=True)
class WeatherRecord:
    t: float
    wind_speed: float
    wind_dir: float
    visibility: float

    def __post_init__(self):
        if self.wind_speed < 0 or self.visibility < 0 or not (0 <= self.wind_dir < 360):
            raise ValidationError(f"weather record at t={self.t} out of range")


@dataclass(frozen=True)
class Waypoint:
    name: str
    lat: float
    lon: float


@dataclass(frozen=True)
class AircraftState:
    """Position and velocity of one aircraft at an instant."""

    callsign: str
    lat: float
    lon: float
    gs: float
    hdg: float


def _check(lat, lon):
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0) or not (math.isfinite(lat) and math.isfinite(lon)):
        raise BadCoordinate(f"invalid coordinate ({lat}, {lon})")


def haversine_distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in nautical miles on a sphere of radius 3440.065 nmi."""
    _check(*a)
    _check(*b)
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    s_dlat = math.sin((lat2 - lat1) / 2)
    s_dlon = math.sin((lon2 - lon1) / 2)
    h = s_dlat * s_dlat + math.cos(lat1) * math.cos(lat2) * s_dlon * s_dlon
    return 2 * EARTH_RADIUS_NM * math.asin(min(1.0, math.sqrt(h)))


def initial_bearing(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Forward azimuth from a to b in degrees, [0, 360)."""
    _check(*a)
    _check(*b)
    if a[0] == b[0] and a[1] == b[1]:
        raise UndefinedBearing("coincident points have no bearing")
    lat1, lat2 = math.radians(a[0]), math.radians(b[0])
    dlon = math.radians(b[1] - a[1])
    y = math.cos(lat2) * math.sin(dlon)
    x = math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon)
    brg = math.degrees(math.atan2(y, x)) % 360.0
    return 0.0 if brg == 360.0 else brg


def cross_track_nm(p, a, b) -> float:
    """Unsigned distance from p to the great circle through a and b."""
    d13 = haversine_distance(a, p) / EARTH_RADIUS_NM
    if d13 == 0.0 or a == b:
        return d13 * EARTH_RADIUS_NM
    t13 = math.radians(initial_bearing(a, p))
    t12 = math.radians(initial_bearing(a, b))
    return abs(math.asin(max(-1.0, min(1.0, math.sin(d13) * math.sin(t13 - t12))))) * EARTH_RADIUS_NM


def traffic_density(subject: tuple[float, float], others: Iterable[tuple[float, float]], radius_nm: float = 10.0) -> int:
    return sum(1 for o in others if haversine_distance(subject, o) <= radius_nm)


class WeatherTable:
    """Time-sorted weather records; lookup returns the latest record at or before t."""

    def __init__(self, records: Iterable[WeatherRecord]):
        self.records = sorted(records, key=lambda r: r.t)
        self._ts = [r.t for r in self.records]

    def at(self, t: float) -> WeatherRecord | None:
        i = bisect.bisect_right(self._ts, t) - 1
        return self.records[i] if i >= 0 else None


@dataclass
class FeatureContext:
    """Everything besides the command and track that feature assembly needs."""

    airport: AirportRef
    weather: WeatherTable | None = None
    waypoints: Sequence[Waypoint] = ()
    wtc_by_callsign: Mapping[str, str] | None = None
    density_radius_nm: float = 10.0


def assemble_features(
    cmd: ParsedCommand,
    traj: Trajectory,
    t: float,
    airport: AirportRef,
    all_states: Sequence[AircraftState],
    wx: WeatherRecord | None = None,
    *,
    wtc: str = "M",
    waypoints: Sequence[Waypoint] = (),
    density_radius_nm: float = 10.0,
) -> np.ndarray:
    """Fixed-order feature vector (see FEATURE_NAMES) for a command at time t."""
    t0, t1 = traj.span
    if not (t0 <= t <= t1):
        raise OutOfRange(f"{traj.callsign}: t={t} outside track span [{t0}, {t1}]")
    s = traj.state_at(t)
    pos = (s["lat"], s["lon"])
    f = dict.fromkeys(FEATURE_NAMES, 0.0)

    ctype = CommandType(cmd.ctype)
    f["is_altitude_cmd"] = float(ctype is CommandType.ALTITUDE)
    f["velocity"] = float(ctype is CommandType.SPEED)
    f["head"] = float(ctype is CommandType.HEADING)
    f["cmd_value_norm"] = (cmd.value or 0) / _VALUE_SCALE[ctype]

    f["wtc_" + (wtc if wtc in WTC_CLASSES else "M")] = 1.0
    # ground speed stands in for calibrated airspeed
    f["cas"] = s["gs"]
    f["cas_is_gs_proxy"] = 1.0
    f["alt"] = s["alt"]
    f["hdg_sin"] = math.sin(math.radians(s["hdg"]))
    f["hdg_cos"] = math.cos(math.radians(s["hdg"]))

    apt = (airport.lat, airport.lon)
    f["distance_to_airport"] = haversine_distance(pos, apt)
    f["bearing_to_airport"] = 0.0 if f["distance_to_airport"] == 0.0 else initial_bearing(pos, apt)
    others = [(a.lat, a.lon) for a in all_states if a.callsign != traj.callsign]
    f["traffic_density"] = float(traffic_density(pos, others, density_radius_nm))

    hour = (t % 86400.0) / 3600.0
    f["hour_sin"] = math.sin(2 * math.pi * hour / 24.0)
    f["hour_cos"] = math.cos(2 * math.pi * hour / 24.0)
    if wx is not None:
        f["wind_speed"] = wx.wind_speed
        f["visibility"] = wx.visibility
        f["wx_present"] = 1.0

    if len(waypoints) >= 2:
        dists = [haversine_distance(pos, (w.lat, w.lon)) for w in waypoints]
        order = np.argsort(dists, kind="stable")
        a, b = waypoints[order[0]], waypoints[order[1]]
        f["route_xtd"] = cross_track_nm(pos, (a.lat, a.lon), (b.lat, b.lon))
        f["nearest_wp_dist"] = dists[order[0]]
        f["route_present"] = 1.0
    return np.array([f[k] for k in FEATURE_NAMES], dtype=np.float64)


def states_at(trajs: Mapping[str, Trajectory], t: float) -> list[AircraftState]:
    """States of all aircraft whose track covers t, sorted by callsign."""
    out = []
    for cs in sorted(trajs):
        tr = trajs[cs]
        t0, t1 = tr.span
        if t0 <= t <= t1:
            s = tr.state_at(t)
            out.append(AircraftState(cs, s["lat"], s["lon"], s["gs"], s["hdg"]))
    return out


# ----------------------------------------------------------------------------
# optional context files


def read_weather_csv(path) -> WeatherTable:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["t", "wind_speed", "wind_dir", "visibility"]:
            raise ValidationError(f"{path}: expected header t,wind_speed,wind_dir,visibility")
        return WeatherTable(
            WeatherRecord(float(r["t"]), float(r["wind_speed"]), float(r["wind_dir"]), float(r["visibility"]))
            for r in reader
        )


def read_waypoints_csv(path) -> list[Waypoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["name", "lat", "lon"]:
            raise ValidationError(f"{path}: expected header name,lat,lon")
        return [Waypoint(r["name"], float(r["lat"]), float(r["lon"])) for r in reader]


def read_aircraft_types_csv(path) -> dict[str, str]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["type", "wtc"]:
            raise ValidationError(f"{path}: expected header type,wtc")
        return {r["type"]: r["wtc"] for r in reader}


def read_flights_csv(path) -> dict[str, str]:
    """callsign -> aircraft type."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["callsign", "type"]:
            raise ValidationError(f"{path}: expected header callsign,type")
        return {r["callsign"]: r["type"] for r in reader}


def wtc_lookup(flights: Mapping[str, str], types: Mapping[str, str]) -> dict[str, str]:
    """callsign -> WTC; unknown types fall back to M."""
    return {cs: types.get(tp, "M") for cs, tp in flights.items()}


def read_airport_json(path) -> AirportRef:
    with open(path) as fh:
        d = json.load(fh)
    return AirportRef(d["icao"], float(d["lat"]), float(d["lon"]), float(d.get("elevation", 0.0)))
