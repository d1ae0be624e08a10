"""IPU, pause, gap and overlap statistics from stereo voice activity."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .alignment import ActivityTrack, Interval, merge_intervals
from .token_grid import FRAME_RATE_HZ, Channel, TokenGrid

MIN_SILENCE_S = 0.2
# absorbs float noise such as 1.2 - 1.0 < 0.2
_TOL = 1e-9

REPORT_KEYS = ("ipu_s_per_min", "pause_s_per_min", "gap_s_per_min", "overlap_s_per_min")


@dataclass(frozen=True)
class IpuSet:
    channel: Channel
    ipus: tuple[Interval, ...] = ()

    @property
    def total(self) -> float:
        return sum(iv.duration for iv in self.ipus)


@dataclass
class TurnTakingReport:
    duration_min: float
    ipu_s_per_min: float
    pause_s_per_min: float
    gap_s_per_min: float
    overlap_s_per_min: float
    n_ipus: int = 0
    n_pauses: int = 0
    n_gaps: int = 0
    n_overlaps: int = 0
    edge_silence_s: float = 0.0

    def format(self) -> str:
        return "\n".join(f"{k}\t{getattr(self, k):.1f}" for k in REPORT_KEYS)

    def to_dict(self) -> dict:
        return asdict(self)


def segments_to_ipus(activity: ActivityTrack, min_silence: float = MIN_SILENCE_S) -> IpuSet:
    """Bridge silences shorter than ``min_silence``; longer ones split IPUs."""
    out: list[list[float]] = []
    for iv in activity.intervals:
        if out and iv.start - out[-1][1] < min_silence - _TOL:
            out[-1][1] = max(out[-1][1], iv.end)
        else:
            out.append([iv.start, iv.end])
    return IpuSet(activity.channel, tuple(Interval(a, b) for a, b in out))


def _complement(intervals: Sequence[Interval], duration: float) -> list[tuple[float, float]]:
    out, t = [], 0.0
    for iv in intervals:
        if iv.start > t:
            out.append((t, iv.start))
        t = max(t, iv.end)
    if duration > t:
        out.append((t, duration))
    return out


def classify_silences(ipus_self: IpuSet, ipus_user: IpuSet, duration: float):
    """Split joint silences bounded by speech into pauses and gaps.

    A joint silence is a pause when the channel(s) whose IPUs end at its
    start are exactly the single channel whose IPU starts at its end;
    anything else, including simultaneous endings, is a gap. Leading and
    trailing joint silence is left unclassified.
    """
    union = merge_intervals(list(ipus_self.ipus) + list(ipus_user.ipus))
    ends = {Channel.SELF: {iv.end for iv in ipus_self.ipus},
            Channel.USER: {iv.end for iv in ipus_user.ipus}}
    starts = {Channel.SELF: {iv.start for iv in ipus_self.ipus},
              Channel.USER: {iv.start for iv in ipus_user.ipus}}
    pauses, gaps = [], []
    for a, b in _complement(union, duration):
        before = {ch for ch, e in ends.items() if a in e}
        after = {ch for ch, s in starts.items() if b in s}
        if not before or not after:
            continue
        if len(before) == 1 and before == after:
            pauses.append(Interval(a, b))
        else:
            gaps.append(Interval(a, b))
    return pauses, gaps


def _intersect(a: Sequence[Interval], b: Sequence[Interval]) -> list[Interval]:
    out, i, j = [], 0, 0
    while i < len(a) and j < len(b):
        lo, hi = max(a[i].start, b[j].start), min(a[i].end, b[j].end)
        if hi > lo:
            out.append(Interval(lo, hi))
        if a[i].end < b[j].end:
            i += 1
        else:
            j += 1
    return out


def overlap_intervals(ipus_self: IpuSet, ipus_user: IpuSet) -> list[Interval]:
    return merge_intervals(_intersect(ipus_self.ipus, ipus_user.ipus))


def overlap_total(ipus_self: IpuSet, ipus_user: IpuSet) -> float:
    return sum(iv.duration for iv in _intersect(ipus_self.ipus, ipus_user.ipus))


def report(ipus_self: IpuSet, ipus_user: IpuSet, duration_s: float) -> TurnTakingReport:
    if not duration_s > 0:
        raise ValueError("duration must be positive")
    scale = 60.0 / duration_s
    pauses, gaps = classify_silences(ipus_self, ipus_user, duration_s)
    overlaps = overlap_intervals(ipus_self, ipus_user)
    union = merge_intervals(list(ipus_self.ipus) + list(ipus_user.ipus))
    silent = sum(b - a for a, b in _complement(union, duration_s))
    classified = sum(iv.duration for iv in pauses) + sum(iv.duration for iv in gaps)
    return TurnTakingReport(
        duration_min=duration_s / 60.0,
        ipu_s_per_min=(ipus_self.total + ipus_user.total) * scale,
        pause_s_per_min=sum(iv.duration for iv in pauses) * scale,
        gap_s_per_min=sum(iv.duration for iv in gaps) * scale,
        overlap_s_per_min=sum(iv.duration for iv in overlaps) * scale,
        n_ipus=len(ipus_self.ipus) + len(ipus_user.ipus),
        n_pauses=len(pauses),
        n_gaps=len(gaps),
        n_overlaps=len(overlaps),
        edge_silence_s=max(silent - classified, 0.0),
    )


def analyze(self_track: ActivityTrack, user_track: ActivityTrack, duration_s: float) -> TurnTakingReport:
    return report(segments_to_ipus(self_track), segments_to_ipus(user_track), duration_s)


def mean_report(reports: Iterable[TurnTakingReport]) -> TurnTakingReport:
    """Duration-weighted merge of per-dialogue reports."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to merge")
    minutes = sum(r.duration_min for r in reports)
    if minutes <= 0:
        raise ValueError("reports cover zero duration")

    def w(key):
        return sum(getattr(r, key) * r.duration_min for r in reports) / minutes

    return TurnTakingReport(
        duration_min=minutes,
        ipu_s_per_min=w("ipu_s_per_min"),
        pause_s_per_min=w("pause_s_per_min"),
        gap_s_per_min=w("gap_s_per_min"),
        overlap_s_per_min=w("overlap_s_per_min"),
        n_ipus=sum(r.n_ipus for r in reports),
        n_pauses=sum(r.n_pauses for r in reports),
        n_gaps=sum(r.n_gaps for r in reports),
        n_overlaps=sum(r.n_overlaps for r in reports),
        edge_silence_s=sum(r.edge_silence_s for r in reports),
    )


def activity_from_grid(grid: TokenGrid, channel: Channel) -> ActivityTrack:
    """Frames with a non-zero semantic token are active (filler ids excluded)."""
    if grid.delayed:
        raise ValueError("remove delays before reading activity from a grid")
    idx = grid.schema.semantic_index(channel)
    spec = grid.schema.streams[idx]
    sem = grid.tokens[:, idx]
    active = (sem != 0) & (sem != spec.initial_id)
    return ActivityTrack(channel, tuple(frames_to_intervals(active)))


def frames_to_intervals(active: np.ndarray) -> list[Interval]:
    fps = float(FRAME_RATE_HZ)
    padded = np.concatenate([[False], np.asarray(active, dtype=bool), [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [Interval(int(a) / fps, int(b) / fps) for a, b in zip(edges[::2], edges[1::2])]
