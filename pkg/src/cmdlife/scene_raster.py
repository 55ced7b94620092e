"""Rasterised image modalities: per-aircraft history track and airspace snapshot.

Lines are 1 px Bresenham without anti-aliasing so buffers are bit-exact across
platforms.  Pixels are RGB floats in [0, 1]; rows run north to south.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .context_features import AircraftState
from .errors import EmptyWindow, TargetMissing, ValidationError
from .trajectory_signal import Trajectory

WHITE = (1.0, 1.0, 1.0)
BLUE = (0.0, 0.0, 1.0)
RED = (1.0, 0.0, 0.0)
NM_PER_DEG = 60.0


@dataclass(frozen=True)
class RasterConfig:
    width: int = 64
    height: int = 64
    history_window_s: float = 120.0
    vector_horizon_s: float = 60.0
    # (lat_min, lon_min, lat_max, lon_max); required for snapshots
    area_bounds: tuple[float, float, float, float] | None = None
    margin_frac: float = 0.1
    # projection reference latitude for history images; defaults to the
    # centre of area_bounds, else the mean latitude of the window
    ref_lat: float | None = None

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ValidationError("raster must be at least 32x32")
        if not self.history_window_s > 0:
            raise ValidationError("history_window_s must be positive")


@dataclass
class SceneImage:
    pixels: np.ndarray
    kind: str
    t: float
    callsign: str

    def sidecar(self) -> dict:
        return {"kind": self.kind, "t": self.t, "callsign": self.callsign, "shape": list(self.pixels.shape)}


def _blank(cfg: RasterConfig) -> np.ndarray:
    return np.ones((cfg.height, cfg.width, 3), dtype=np.float64)


def _project(lat, lon, ref_lat, lat0, lon0):
    """Local equirectangular projection to nautical miles (x east, y north)."""
    k = math.cos(math.radians(ref_lat))
    return (np.asarray(lon) - lon0) * NM_PER_DEG * k, (np.asarray(lat) - lat0) * NM_PER_DEG


def _to_pixels(x, y, x_lo, y_lo, scale, off_x, off_y, cfg):
    col = np.floor((x - x_lo) * scale + off_x + 0.5).astype(np.int64)
    row = (cfg.height - 1) - np.floor((y - y_lo) * scale + off_y + 0.5).astype(np.int64)
    return row, col


def _polyline(canvas, rows, cols, color):
    for i in range(len(rows) - 1):
        kernels.draw_line(canvas, rows[i], cols[i], rows[i + 1], cols[i + 1], color)
    if len(rows) == 1:
        kernels.draw_line(canvas, rows[0], cols[0], rows[0], cols[0], color)


def render_history(traj: Trajectory, t: float, cfg: RasterConfig) -> SceneImage:
    """Blue polyline of the last ``history_window_s`` seconds, fitted to the frame."""
    sel = (traj.t >= t - cfg.history_window_s) & (traj.t <= t)
    if np.count_nonzero(sel) < 2:
        raise EmptyWindow(f"{traj.callsign}: fewer than 2 points in history window at t={t}")
    lat, lon = traj.lat[sel], traj.lon[sel]
    if cfg.ref_lat is not None:
        ref = cfg.ref_lat
    elif cfg.area_bounds is not None:
        ref = 0.5 * (cfg.area_bounds[0] + cfg.area_bounds[2])
    else:
        ref = float(lat.mean())
    lat0, lon0 = float(lat.min()), float(lon.min())
    x, y = _project(lat, lon, ref, lat0, lon0)
    span_x, span_y = float(x.max()), float(y.max())
    usable_w = (cfg.width - 1) * (1 - 2 * cfg.margin_frac)
    usable_h = (cfg.height - 1) * (1 - 2 * cfg.margin_frac)
    span = max(span_x / usable_w if usable_w else 0.0, span_y / usable_h if usable_h else 0.0)
    scale = 1.0 / span if span > 0 else 0.0
    off_x = 0.5 * ((cfg.width - 1) - span_x * scale)
    off_y = 0.5 * ((cfg.height - 1) - span_y * scale)
    rows, cols = _to_pixels(x, y, 0.0, 0.0, scale, off_x, off_y, cfg)
    canvas = _blank(cfg)
    _polyline(canvas, rows, cols, BLUE)
    return SceneImage(canvas, "history", float(t), traj.callsign)


def snapshot_frame(cfg: RasterConfig):
    """Projection parameters of the fixed snapshot frame: (ref_lat, lat0, lon0, scale, off_x, off_y)."""
    if cfg.area_bounds is None:
        raise ValidationError("snapshot rendering needs area_bounds")
    lat_min, lon_min, lat_max, lon_max = cfg.area_bounds
    ref = 0.5 * (lat_min + lat_max)
    x_hi, y_hi = _project(lat_max, lon_max, ref, lat_min, lon_min)
    scale = min((cfg.width - 1) / float(x_hi), (cfg.height - 1) / float(y_hi))
    off_x = 0.5 * ((cfg.width - 1) - float(x_hi) * scale)
    off_y = 0.5 * ((cfg.height - 1) - float(y_hi) * scale)
    return ref, lat_min, lon_min, scale, off_x, off_y


def render_snapshot(states: Sequence[AircraftState], target: str, cfg: RasterConfig, t: float = 0.0) -> SceneImage:
    """Every aircraft as a dead-reckoned velocity vector; target red, others blue."""
    tgt = [s for s in states if s.callsign == target]
    if not tgt:
        raise TargetMissing(f"{target} not among the supplied states")
    ref, lat0, lon0, scale, off_x, off_y = snapshot_frame(cfg)
    canvas = _blank(cfg)
    others = sorted((s for s in states if s.callsign != target), key=lambda s: (s.lat, s.lon, s.gs, s.hdg))
    # target drawn last so it stays visible where vectors cross
    for s, color in [(s, BLUE) for s in others] + [(tgt[0], RED)]:
        x, y = _project(s.lat, s.lon, ref, lat0, lon0)
        reach = s.gs * cfg.vector_horizon_s / 3600.0
        h = math.radians(s.hdg)
        x1, y1 = x + reach * math.sin(h), y + reach * math.cos(h)
        rows, cols = _to_pixels(np.array([x, x1]), np.array([y, y1]), 0.0, 0.0, scale, off_x, off_y, cfg)
        kernels.draw_line(canvas, rows[0], cols[0], rows[1], cols[1], color)
    return SceneImage(canvas, "snapshot", float(t), target)


def save_raw(img: SceneImage, stem) -> None:
    """Row-major float32 buffer ``<stem>.bin`` plus JSON sidecar ``<stem>.json``."""
    img.pixels.astype("<f4").tofile(f"{stem}.bin")
    with open(f"{stem}.json", "w") as fh:
        json.dump(img.sidecar(), fh, sort_keys=True)


def load_raw(stem) -> SceneImage:
    with open(f"{stem}.json") as fh:
        meta = json.load(fh)
    px = np.fromfile(f"{stem}.bin", dtype="<f4").astype(np.float64).reshape(meta["shape"])
    return SceneImage(px, meta["kind"], float(meta["t"]), meta["callsign"])


def save_png(img: SceneImage, path) -> None:
    from PIL import Image

    Image.fromarray(np.round(img.pixels * 255).astype(np.uint8), "RGB").save(path)
