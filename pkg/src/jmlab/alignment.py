"""Diarized transcripts and activity tracks to stereo training grids."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .token_grid import (
    FRAME_RATE_HZ,
    Channel,
    GridSchema,
    Role,
    TokenGrid,
    apply_delays,
    empty_grid,
)

log = logging.getLogger(__name__)

_FPS = float(FRAME_RATE_HZ)
_EPS = 1e-9


@dataclass(frozen=True, order=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not (self.start >= 0 and self.end > self.start):
            raise ValueError(f"invalid interval [{self.start}, {self.end})")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class DiarSegment:
    speaker: str
    interval: Interval


@dataclass(frozen=True)
class TimedToken:
    token_id: int
    start: float


@dataclass(frozen=True)
class TimedTranscript:
    channel: Channel
    tokens: tuple[TimedToken, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def ids(self) -> list[int]:
        return [t.token_id for t in self.tokens]


@dataclass(frozen=True)
class ActivityTrack:
    channel: Channel
    intervals: tuple[Interval, ...] = ()

    def __post_init__(self):
        ivs = tuple(self.intervals)
        for a, b in zip(ivs, ivs[1:]):
            if b.start < a.end:
                raise ValueError("activity intervals must be sorted and disjoint")
        object.__setattr__(self, "intervals", ivs)

    @property
    def total(self) -> float:
        return sum(iv.duration for iv in self.intervals)


def merge_intervals(intervals: Iterable[Interval]) -> list[Interval]:
    """Union of possibly overlapping intervals as a sorted disjoint list."""
    out: list[list[float]] = []
    for iv in sorted(intervals):
        if out and iv.start <= out[-1][1]:
            out[-1][1] = max(out[-1][1], iv.end)
        else:
            out.append([iv.start, iv.end])
    return [Interval(a, b) for a, b in out]


def assign_channels(segments: Sequence[DiarSegment], seed: int) -> dict[str, Channel]:
    """Pick one speaker uniformly at random for the self channel."""
    if not segments:
        raise ValueError("no diarization segments")
    speakers = sorted({seg.speaker for seg in segments})
    rng = np.random.default_rng(seed)
    chosen = speakers[int(rng.integers(len(speakers)))]
    return {sp: Channel.SELF if sp == chosen else Channel.USER for sp in speakers}


def text_stream_from_transcript(tr: TimedTranscript, T: int, pad_id: int) -> tuple[np.ndarray, int]:
    """Place tokens on frames, cascading collisions forward.

    Returns the length-``T`` stream and the number of tokens dropped because
    cascading pushed them past the last frame.
    """
    starts = [t.start for t in tr.tokens]
    if any(b < a for a, b in zip(starts, starts[1:])):
        raise ValueError("transcript tokens must be sorted by start time")
    stream = np.full(T, pad_id, dtype=np.int64)
    next_free = 0
    dropped = 0
    for tok in tr.tokens:
        if tok.token_id == pad_id:
            raise ValueError("transcript contains the PAD token id")
        frame = max(int(np.floor(tok.start * _FPS + _EPS)), next_free)
        if frame >= T:
            dropped += 1
            continue
        stream[frame] = tok.token_id
        next_free = frame + 1
    if dropped:
        log.warning("dropped %d token(s) past frame %d", dropped, T - 1)
    return stream, dropped


def activity_from_segments(segments: Sequence[DiarSegment], channel_map: Mapping[str, Channel],
                           channel: Channel, T: int) -> ActivityTrack:
    horizon = T / _FPS
    clipped = []
    for seg in segments:
        if channel_map.get(seg.speaker) != channel:
            continue
        a, b = max(seg.interval.start, 0.0), min(seg.interval.end, horizon)
        if b > a:
            clipped.append(Interval(a, b))
    return ActivityTrack(channel, tuple(merge_intervals(clipped)))


def activity_mask(activity: ActivityTrack, T: int) -> np.ndarray:
    """Frame t is active when its midpoint lies inside an interval."""
    mids = (np.arange(T) + 0.5) / _FPS
    mask = np.zeros(T, dtype=bool)
    for iv in activity.intervals:
        mask |= (mids >= iv.start) & (mids < iv.end)
    return mask


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        x = x ^ (x >> np.uint64(31))
    return x


def acoustic_hash(layer: int, frames: np.ndarray, semantic: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.uint64)
    semantic = np.asarray(semantic, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _mix64(np.full_like(frames, layer)) ^ (frames * _GOLDEN)
        key = _mix64(key) ^ semantic
    return _mix64(key)


def pseudo_encode(text_stream: np.ndarray, activity: ActivityTrack, schema: GridSchema,
                  channel: Channel = Channel.SELF) -> np.ndarray:
    """Deterministic stand-in codec: ``8 x T`` audio tokens for one channel.

    Semantic layer: 0 silent, 1 active with PAD text, ``2 + token`` active
    with text. Acoustic layers are hashed from (layer, frame, semantic) and
    never produce the stream's filler id.
    """
    text_spec = schema.streams[schema.text_index(Channel.SELF)]
    idx = schema.audio_indices_for(channel)
    sem_spec = schema.streams[idx[0]]
    if sem_spec.vocab_size < text_spec.vocab_size + 2:
        raise ValueError("semantic vocab must be at least text vocab + 2")
    text_stream = np.asarray(text_stream, dtype=np.int64)
    T = text_stream.shape[0]
    active = activity_mask(activity, T)
    has_text = (text_stream != text_spec.pad_id) & (text_stream != text_spec.initial_id)
    semantic = np.where(active, np.where(has_text, text_stream + 2, 1), 0).astype(np.int64)
    out = np.empty((len(idx), T), dtype=np.int64)
    out[0] = semantic
    frames = np.arange(T)
    for layer, s in enumerate(idx[1:], start=2):
        v = schema.streams[s].vocab_size
        if v < 2:
            raise ValueError("acoustic vocab too small")
        out[layer - 1] = (acoustic_hash(layer, frames, semantic) % np.uint64(v - 1)).astype(np.int64)
    return out


def pseudo_decode(semantic_tokens: Sequence[int]) -> list[int]:
    """Mock ASR: recover text ids from semantic tokens."""
    s = np.asarray(semantic_tokens, dtype=np.int64)
    return (s[s >= 2] - 2).tolist()


def build_training_grid(transcripts: Mapping[Channel, TimedTranscript],
                        activities: Mapping[Channel, ActivityTrack],
                        schema: GridSchema, T: int) -> tuple[TokenGrid, int]:
    """Assemble a delayed grid; returns it with the dropped-token count."""
    if T == 0:
        return apply_delays(empty_grid(schema)), 0
    text_spec = schema.streams[schema.text_index(Channel.SELF)]
    tokens = np.zeros((T, len(schema)), dtype=np.int64)
    dropped = 0
    for channel in (Channel.SELF, Channel.USER):
        tr = transcripts.get(channel, TimedTranscript(channel))
        text, n_drop = text_stream_from_transcript(tr, T, text_spec.pad_id)
        dropped += n_drop
        t_idx = schema.text_index(channel)
        if t_idx is not None:
            tokens[:, t_idx] = text
        act = activities.get(channel, ActivityTrack(channel))
        audio = pseudo_encode(text, act, schema, channel)
        tokens[:, schema.audio_indices_for(channel)] = audio.T
    return apply_delays(TokenGrid(schema, tokens)), dropped


def split_manifest(items: Sequence, ratios: Sequence[float] = (94, 3, 3), seed: int = 0):
    """Seeded shuffle, then floor-sized valid/test parts; remainder trains."""
    if not items:
        raise ValueError("cannot split an empty manifest")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("need three positive ratios")
    n = len(items)
    total = float(sum(ratios))
    n_valid = int(np.floor(n * ratios[1] / total + _EPS))
    n_test = int(np.floor(n * ratios[2] / total + _EPS))
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [items[i] for i in order]
    valid = shuffled[:n_valid]
    test = shuffled[n_valid:n_valid + n_test]
    train = shuffled[n_valid + n_test:]
    return train, valid, test


# --- file formats -----------------------------------------------------------

class InputFormatError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


def _rows(path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def read_diarization(path) -> list[DiarSegment]:
    """``speaker<TAB>start_seconds<TAB>end_seconds`` per line."""
    out = []
    for lineno, cols in _rows(path):
        if len(cols) != 3:
            raise InputFormatError(path, lineno, f"expected 3 fields, got {len(cols)}")
        try:
            out.append(DiarSegment(cols[0], Interval(float(cols[1]), float(cols[2]))))
        except ValueError as exc:
            raise InputFormatError(path, lineno, str(exc)) from None
    return out


def read_transcript(path) -> list[tuple[str, float, int]]:
    """``channel<TAB>start_seconds<TAB>token_id`` per line.

    The channel column holds either ``self``/``user`` or a diarization
    speaker label, resolved later through the channel map.
    """
    out = []
    for lineno, cols in _rows(path):
        if len(cols) != 3:
            raise InputFormatError(path, lineno, f"expected 3 fields, got {len(cols)}")
        try:
            start, tok = float(cols[1]), int(cols[2])
        except ValueError as exc:
            raise InputFormatError(path, lineno, str(exc)) from None
        if start < 0 or tok < 0:
            raise InputFormatError(path, lineno, "negative start or token id")
        out.append((cols[0], start, tok))
    return out


def transcripts_by_channel(rows, channel_map: Mapping[str, Channel]) -> dict[Channel, TimedTranscript]:
    per: dict[Channel, list[TimedToken]] = {Channel.SELF: [], Channel.USER: []}
    for label, start, tok in rows:
        if label in ("self", "user"):
            ch = Channel[label.upper()]
        elif label in channel_map:
            ch = channel_map[label]
        else:
            raise ValueError(f"transcript label {label!r} matches no diarized speaker")
        per[ch].append(TimedToken(tok, start))
    return {ch: TimedTranscript(ch, tuple(sorted(toks, key=lambda t: t.start)))
            for ch, toks in per.items()}


MANIFEST_FIELDS = ("id", "grid_path", "duration_s", "split")


@dataclass
class ManifestRow:
    id: str
    grid_path: str
    duration_s: float
    split: str = ""


def write_manifest(rows: Iterable[ManifestRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.id, r.grid_path, f"{r.duration_s:.2f}", r.split])


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f, delimiter="\t")
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise InputFormatError(path, 1, f"manifest header must be {MANIFEST_FIELDS}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.append(ManifestRow(rec["id"], rec["grid_path"], float(rec["duration_s"]),
                                        rec["split"] or ""))
            except (TypeError, ValueError) as exc:
                raise InputFormatError(path, lineno, str(exc)) from None
    return rows


def resolve_grid_path(row: ManifestRow, manifest_path) -> Path:
    p = Path(row.grid_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def prepare_dialogue(diar_path, transcript_path, schema: GridSchema, seed: int):
    """Files of one dialogue to a delayed grid.

    Returns ``(grid, dropped_tokens, duration_s)``; the duration is the end
    of the last diarized segment and the grid holds only complete frames.
    """
    segments = read_diarization(diar_path)
    rows = read_transcript(transcript_path)
    channel_map = assign_channels(segments, seed)
    duration = max(seg.interval.end for seg in segments)
    T = int(np.floor(duration * _FPS + _EPS))
    transcripts = transcripts_by_channel(rows, channel_map)
    activities = {ch: activity_from_segments(segments, channel_map, ch, T) for ch in Channel}
    grid, dropped = build_training_grid(transcripts, activities, schema, T)
    return grid, dropped, duration
