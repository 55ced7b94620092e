"""Command timeline reconstruction and windowed controller-workload indicators."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import kernels
from .errors import BadDuration, BadWindow, ValidationError
from .trajectory_signal import ManeuverEvent


class Source(str, Enum):
    OBSERVED = "observed"
    PREDICTED = "predicted"


@dataclass(frozen=True)
class CommandInterval:
    callsign: str
    issue_t: float
    end_t: float
    source: Source = Source.PREDICTED

    def __post_init__(self):
        if not self.end_t > self.issue_t:
            raise BadDuration(f"{self.callsign}: interval end {self.end_t} not after issue {self.issue_t}")


def reconstruct_timeline(event: ManeuverEvent, offset_hat: float, duration_hat: float) -> CommandInterval:
    """Walk back from the maneuver onset: end = onset - offset, issue = end - duration."""
    if not duration_hat > 0:
        raise BadDuration(f"predicted duration must be positive, got {duration_hat}")
    end = event.onset_t - offset_hat
    return CommandInterval(event.callsign, end - duration_hat, end, Source.PREDICTED)


@dataclass
class WindowStats:
    t_start: float
    t_end: float
    cumulative_speech_s: float
    max_concurrency: int
    command_count: int
    mean_inter_command_gap_s: float | None


@dataclass
class WorkloadReport:
    window_s: float
    windows: list[WindowStats]

    def to_dict(self) -> dict:
        return {"window_s": self.window_s, "windows": [asdict(w) for w in self.windows]}

    @property
    def total_speech_s(self) -> float:
        return math.fsum(w.cumulative_speech_s for w in self.windows)


def workload_report(intervals: Sequence[CommandInterval], span: tuple[float, float] | None = None,
                    window_s: float = 300.0) -> WorkloadReport:
    """Tumbling half-open windows [a, a + window_s) covering the span.

    Intervals are half-open too, so a command starting exactly when another
    ends does not overlap it.
    """
    if not window_s > 0:
        raise BadWindow(f"window_s must be positive, got {window_s}")
    if span is None:
        if not intervals:
            return WorkloadReport(window_s, [])
        span = (min(iv.issue_t for iv in intervals), max(iv.end_t for iv in intervals))
    t0, t1 = span
    if t1 < t0:
        raise ValidationError("span end precedes its start")
    n_win = max(1, int(math.ceil((t1 - t0) / window_s)))
    issues = np.array([iv.issue_t for iv in intervals], dtype=np.float64)
    ends = np.array([iv.end_t for iv in intervals], dtype=np.float64)
    windows = []
    for k in range(n_win):
        a, b = t0 + k * window_s, t0 + (k + 1) * window_s
        lo = np.maximum(issues, a)
        hi = np.minimum(ends, b)
        live = hi > lo
        speech = math.fsum((hi[live] - lo[live]).tolist())
        conc = kernels.max_concurrency(lo[live], hi[live]) if live.any() else 0
        inside = np.sort(issues[(issues >= a) & (issues < b)])
        gap = float(np.diff(inside).mean()) if len(inside) >= 2 else None
        windows.append(WindowStats(a, b, speech, int(conc), int(len(inside)), gap))
    return WorkloadReport(window_s, windows)


# ----------------------------------------------------------------------------
# output


def write_report_json(path, report: WorkloadReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)


def write_report_csv(path, report: WorkloadReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_start", "t_end", "cumulative_speech_s", "max_concurrency", "command_count",
                    "mean_inter_command_gap_s"])
        for s in report.windows:
            gap = "" if s.mean_inter_command_gap_s is None else repr(s.mean_inter_command_gap_s)
            w.writerow([repr(s.t_start), repr(s.t_end), repr(s.cumulative_speech_s), s.max_concurrency,
                        s.command_count, gap])


def read_intervals_csv(path) -> list[CommandInterval]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["callsign", "issue_t", "end_t", "source"]:
            raise ValidationError(f"{path}: expected header callsign,issue_t,end_t,source")
        return [CommandInterval(r["callsign"], float(r["issue_t"]), float(r["end_t"]), Source(r["source"]))
                for r in reader]


def write_intervals_csv(path, intervals: Sequence[CommandInterval]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["callsign", "issue_t", "end_t", "source"])
        for iv in intervals:
            w.writerow([iv.callsign, repr(iv.issue_t), repr(iv.end_t), iv.source.value])


def timeline_svg(intervals: Sequence[CommandInterval], onsets: Sequence[tuple[str, float]] = (),
                 width: int = 900, row_h: int = 18) -> str:
    """Bars per command on one row per callsign; dashed links to maneuver onsets."""
    if not intervals:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{row_h}"></svg>\n'
    callsigns = sorted({iv.callsign for iv in intervals} | {cs for cs, _ in onsets})
    row = {cs: i for i, cs in enumerate(callsigns)}
    t_lo = min([iv.issue_t for iv in intervals] + [t for _, t in onsets])
    t_hi = max([iv.end_t for iv in intervals] + [t for _, t in onsets])
    left, right = 80, 10
    scale = (width - left - right) / max(t_hi - t_lo, 1e-9)
    height = row_h * (len(callsigns) + 1)

    def x(t):
        return left + (t - t_lo) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-size="11">']
    for cs, i in row.items():
        parts.append(f'<text x="2" y="{i * row_h + 13}">{cs}</text>')
    for iv in sorted(intervals, key=lambda v: (v.callsign, v.issue_t)):
        y = row[iv.callsign] * row_h + 3
        color = "#1f4e9c" if iv.source is Source.PREDICTED else "#888888"
        parts.append(f'<rect x="{x(iv.issue_t):.2f}" y="{y}" width="{max(x(iv.end_t) - x(iv.issue_t), 1):.2f}" '
                     f'height="{row_h - 6}" fill="{color}"/>')
    by_cs: dict[str, list[CommandInterval]] = {}
    for iv in intervals:
        by_cs.setdefault(iv.callsign, []).append(iv)
    for cs, t in onsets:
        y = row[cs] * row_h + row_h // 2
        parts.append(f'<circle cx="{x(t):.2f}" cy="{y}" r="3" fill="#c0392b"/>')
        prior = [iv for iv in by_cs.get(cs, []) if iv.end_t <= t + 60]
        if prior:
            iv = min(prior, key=lambda v: abs(t - v.end_t))
            parts.append(f'<line x1="{x(iv.end_t):.2f}" y1="{y}" x2="{x(t):.2f}" y2="{y}" stroke="#c0392b" '
                         f'stroke-dasharray="3,2"/>')
    parts.append("</svg>\n")
    return "\n".join(parts)
