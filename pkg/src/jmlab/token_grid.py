"""Multi-stream token grid: schema, delay algebra, slicing and binary I/O.

A grid is a time-major ``T x S`` matrix of token ids, one column per stream.
Frames tick at 12.5 Hz (80 ms).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

FRAME_RATE_HZ = Fraction(25, 2)

MAGIC = b"JMGR"
VERSION = 1
NO_PAD = 0xFFFFFFFF

DIALOGUE_DELAYS = {"text": 0, "semantic_audio": 0, "acoustic_audio": 1}
TTS_DELAYS = {"text": 0, "semantic_audio": 25, "acoustic_audio": 27}
N_AUDIO_LAYERS = 8


class Role(enum.IntEnum):
    TEXT = 0
    SEMANTIC = 1
    ACOUSTIC = 2


class Channel(enum.IntEnum):
    SELF = 0
    USER = 1


class GridFormatError(ValueError):
    """Raised for malformed or inconsistent serialized grids."""


def seconds_to_frames(seconds: float) -> int:
    """Round half-up to the nearest frame."""
    return int(np.floor(float(seconds) * float(FRAME_RATE_HZ) + 0.5))


def frames_to_seconds(frames: int) -> float:
    return float(Fraction(frames) / FRAME_RATE_HZ)


@dataclass(frozen=True)
class StreamSpec:
    name: str
    role: Role
    channel: Channel
    vocab_size: int
    delay: int
    initial_id: int
    pad_id: Optional[int] = None

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError(f"{self.name}: vocab_size must be positive")
        if self.delay < 0:
            raise ValueError(f"{self.name}: delay must be non-negative")
        if not 0 <= self.initial_id < self.vocab_size:
            raise ValueError(f"{self.name}: initial_id out of vocabulary")
        if self.pad_id is not None:
            if self.role != Role.TEXT:
                raise ValueError(f"{self.name}: only text streams carry a pad_id")
            if not 0 <= self.pad_id < self.vocab_size:
                raise ValueError(f"{self.name}: pad_id out of vocabulary")
            if self.pad_id == self.initial_id:
                raise ValueError(f"{self.name}: pad_id and initial_id must differ")


@dataclass(frozen=True)
class GridSchema:
    streams: tuple[StreamSpec, ...]
    kind: str = "dialogue"
    frame_rate_hz: Fraction = FRAME_RATE_HZ

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(self.streams))
        if self.frame_rate_hz != FRAME_RATE_HZ:
            raise ValueError("only the 12.5 Hz frame rate is supported")
        if self.kind == "dialogue":
            texts = [s for s in self.streams if s.role == Role.TEXT]
            if len(texts) != 1 or texts[0].channel != Channel.SELF:
                raise ValueError("dialogue schema needs exactly one text stream on the self channel")

    def __len__(self) -> int:
        return len(self.streams)

    @property
    def delays(self) -> np.ndarray:
        return np.array([s.delay for s in self.streams], dtype=np.int64)

    @property
    def max_delay(self) -> int:
        return int(self.delays.max()) if self.streams else 0

    @property
    def text_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.streams) if s.role == Role.TEXT]

    @property
    def audio_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.streams) if s.role != Role.TEXT]

    def semantic_index(self, channel: Channel) -> int:
        for i, s in enumerate(self.streams):
            if s.role == Role.SEMANTIC and s.channel == channel:
                return i
        raise KeyError(channel)

    def text_index(self, channel: Channel = Channel.SELF) -> Optional[int]:
        for i, s in enumerate(self.streams):
            if s.role == Role.TEXT and s.channel == channel:
                return i
        return None

    def audio_indices_for(self, channel: Channel) -> list[int]:
        """Semantic stream first, then the seven acoustic streams."""
        return [i for i, s in enumerate(self.streams) if s.role != Role.TEXT and s.channel == channel]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "streams": [
                {
                    "name": s.name,
                    "role": s.role.name.lower(),
                    "channel": s.channel.name.lower(),
                    "vocab_size": s.vocab_size,
                    "delay": s.delay,
                    "initial_id": s.initial_id,
                    "pad_id": s.pad_id,
                }
                for s in self.streams
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSchema":
        streams = [
            StreamSpec(
                name=s["name"],
                role=Role[s["role"].upper()],
                channel=Channel[s["channel"].upper()],
                vocab_size=int(s["vocab_size"]),
                delay=int(s["delay"]),
                initial_id=int(s["initial_id"]),
                pad_id=None if s.get("pad_id") is None else int(s["pad_id"]),
            )
            for s in d["streams"]
        ]
        return cls(tuple(streams), kind=d.get("kind", "dialogue"))


def build_schema(kind: str, text_vocab: int, semantic_vocab: int, acoustic_vocab: int) -> GridSchema:
    """Build the dialogue (17 streams) or TTS (18 streams) schema.

    Text streams reserve ``vocab-2`` for PAD and ``vocab-1`` as the delay
    filler; audio streams reserve ``vocab-1`` as the filler. The TTS schema
    carries a second text stream for the user channel so both sides of a
    scripted dialogue can be teacher-forced.
    """
    if kind not in ("dialogue", "tts"):
        raise ValueError(f"unknown schema kind {kind!r}")
    for name, v in (("text", text_vocab), ("semantic", semantic_vocab), ("acoustic", acoustic_vocab)):
        if v < 4:
            raise ValueError(f"{name} vocab {v} cannot host PAD and INITIAL tokens (need >= 4)")
    delays = DIALOGUE_DELAYS if kind == "dialogue" else TTS_DELAYS

    def text(channel: Channel) -> StreamSpec:
        return StreamSpec(f"text_{channel.name.lower()}", Role.TEXT, channel, text_vocab,
                          delays["text"], initial_id=text_vocab - 1, pad_id=text_vocab - 2)

    def audio(channel: Channel) -> list[StreamSpec]:
        tag = channel.name.lower()
        out = [StreamSpec(f"semantic_{tag}", Role.SEMANTIC, channel, semantic_vocab,
                          delays["semantic_audio"], initial_id=semantic_vocab - 1)]
        for layer in range(2, N_AUDIO_LAYERS + 1):
            out.append(StreamSpec(f"acoustic{layer}_{tag}", Role.ACOUSTIC, channel, acoustic_vocab,
                                  delays["acoustic_audio"], initial_id=acoustic_vocab - 1))
        return out

    streams = [text(Channel.SELF)]
    if kind == "tts":
        streams.append(text(Channel.USER))
    streams += audio(Channel.SELF) + audio(Channel.USER)
    return GridSchema(tuple(streams), kind=kind)


@dataclass(frozen=True, eq=False)
class TokenGrid:
    schema: GridSchema
    tokens: np.ndarray
    delayed: bool = False

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        if tokens.ndim != 2 or tokens.shape[1] != len(self.schema):
            tokens = tokens.reshape(-1, len(self.schema)) if tokens.size == 0 else tokens
        if tokens.ndim != 2 or tokens.shape[1] != len(self.schema):
            raise ValueError(f"tokens must be T x {len(self.schema)}, got {tokens.shape}")
        tokens = tokens.astype(np.int64, copy=True)
        vocab = np.array([s.vocab_size for s in self.schema.streams])
        if tokens.size and ((tokens < 0).any() or (tokens >= vocab).any()):
            t, s = np.argwhere((tokens < 0) | (tokens >= vocab))[0]
            raise ValueError(f"token {tokens[t, s]} at frame {t} outside vocab of stream "
                             f"{self.schema.streams[s].name}")
        if self.delayed:
            for s, spec in enumerate(self.schema.streams):
                head = tokens[: spec.delay, s]
                if (head != spec.initial_id).any():
                    raise ValueError(f"delayed grid: stream {spec.name} must hold initial_id "
                                     f"in its first {spec.delay} frames")
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenGrid):
            return NotImplemented
        return (self.schema == other.schema and self.delayed == other.delayed
                and np.array_equal(self.tokens, other.tokens))

    def stream(self, index: int) -> np.ndarray:
        return self.tokens[:, index]

    def replace(self, tokens: np.ndarray, delayed: Optional[bool] = None) -> "TokenGrid":
        return TokenGrid(self.schema, tokens, self.delayed if delayed is None else delayed)


def empty_grid(schema: GridSchema, delayed: bool = False) -> TokenGrid:
    return TokenGrid(schema, np.zeros((0, len(schema)), dtype=np.int64), delayed)


def apply_delays(grid: TokenGrid) -> TokenGrid:
    if grid.delayed:
        raise ValueError("grid is already delayed")
    T = grid.length
    out = np.empty_like(grid.tokens)
    for s, spec in enumerate(grid.schema.streams):
        d = min(spec.delay, T)
        out[:d, s] = spec.initial_id
        out[d:, s] = grid.tokens[: T - d, s]
    return TokenGrid(grid.schema, out, delayed=True)


def remove_delays(grid: TokenGrid) -> TokenGrid:
    if not grid.delayed:
        raise ValueError("grid has no delays to remove")
    T = grid.length
    out = np.empty_like(grid.tokens)
    for s, spec in enumerate(grid.schema.streams):
        d = min(spec.delay, T)
        out[: T - d, s] = grid.tokens[d:, s]
        out[T - d:, s] = spec.initial_id
    return TokenGrid(grid.schema, out, delayed=False)


def pad_ratio(grid: TokenGrid, channel: Channel = Channel.SELF) -> float:
    idx = grid.schema.text_index(channel)
    if idx is None:
        raise ValueError("schema has no text stream")
    if grid.length == 0:
        return 0.0
    pad = grid.schema.streams[idx].pad_id
    return float(np.count_nonzero(grid.tokens[:, idx] == pad)) / grid.length


def slice_grid(grid: TokenGrid, start: int, end: int) -> TokenGrid:
    """Frames ``[start, end)``. Delayed grids can only be sliced from frame 0."""
    if not 0 <= start <= end <= grid.length:
        raise IndexError(f"slice [{start}, {end}) out of range for length {grid.length}")
    if grid.delayed and start > 0:
        raise ValueError("cannot slice a delayed grid past frame 0; remove delays first")
    return TokenGrid(grid.schema, grid.tokens[start:end], grid.delayed)


def concat(a: TokenGrid, b: TokenGrid) -> TokenGrid:
    if a.schema != b.schema:
        raise ValueError("cannot concatenate grids with different schemas")
    if a.delayed != b.delayed:
        raise ValueError("cannot concatenate delayed and undelayed grids")
    return TokenGrid(a.schema, np.concatenate([a.tokens, b.tokens], axis=0), a.delayed)


_HEADER = struct.Struct("<4sHH")
_STREAM = struct.Struct("<BBHIII")
_TRAILER = struct.Struct("<BQ")


def serialize(grid: TokenGrid) -> bytes:
    schema = grid.schema
    parts = [_HEADER.pack(MAGIC, VERSION, len(schema))]
    for spec in schema.streams:
        pad = NO_PAD if spec.pad_id is None else spec.pad_id
        parts.append(_STREAM.pack(int(spec.role), int(spec.channel), spec.delay,
                                  spec.vocab_size, pad, spec.initial_id))
    parts.append(_TRAILER.pack(int(grid.delayed), grid.length))
    parts.append(grid.tokens.astype("<u4").tobytes())
    return b"".join(parts)


def deserialize(data: bytes) -> TokenGrid:
    if len(data) < _HEADER.size:
        raise GridFormatError("truncated header")
    magic, version, n_streams = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise GridFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise GridFormatError(f"unsupported version {version}")
    off = _HEADER.size
    if len(data) < off + n_streams * _STREAM.size + _TRAILER.size:
        raise GridFormatError("truncated stream table")
    specs = []
    for _ in range(n_streams):
        role, channel, delay, vocab, pad, initial = _STREAM.unpack_from(data, off)
        off += _STREAM.size
        specs.append((role, channel, delay, vocab, pad, initial))
    delayed, T = _TRAILER.unpack_from(data, off)
    off += _TRAILER.size
    if delayed not in (0, 1):
        raise GridFormatError(f"bad delayed flag {delayed}")
    expected = off + T * n_streams * 4
    if len(data) != expected:
        raise GridFormatError(f"payload size {len(data)} != expected {expected}")
    try:
        streams = _restore_streams(specs)
        schema = _infer_schema(streams)
    except (ValueError, KeyError) as exc:
        raise GridFormatError(f"invalid stream table: {exc}") from exc
    tokens = np.frombuffer(data, dtype="<u4", offset=off).reshape(T, n_streams).astype(np.int64)
    try:
        return TokenGrid(schema, tokens, bool(delayed))
    except ValueError as exc:
        raise GridFormatError(str(exc)) from exc


def _restore_streams(specs) -> list[StreamSpec]:
    out = []
    counters: dict[tuple[int, int], int] = {}
    for role, channel, delay, vocab, pad, initial in specs:
        role, channel = Role(role), Channel(channel)
        tag = channel.name.lower()
        if role == Role.TEXT:
            name = f"text_{tag}"
        elif role == Role.SEMANTIC:
            name = f"semantic_{tag}"
        else:
            layer = counters.get((role, channel), 1) + 1
            counters[(role, channel)] = layer
            name = f"acoustic{layer}_{tag}"
        out.append(StreamSpec(name, role, channel, vocab, delay, initial,
                              None if pad == NO_PAD else pad))
    return out


def _infer_schema(streams: Sequence[StreamSpec]) -> GridSchema:
    n_text = sum(s.role == Role.TEXT for s in streams)
    kind = "tts" if n_text == 2 else "dialogue"
    try:
        return GridSchema(tuple(streams), kind=kind)
    except ValueError:
        return GridSchema(tuple(streams), kind="custom")


def save_grid(grid: TokenGrid, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(grid))


def load_grid(path) -> TokenGrid:
    with open(path, "rb") as f:
        return deserialize(f.read())
