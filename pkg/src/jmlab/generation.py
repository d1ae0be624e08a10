"""Temperature sampling, full-duplex continuation, multi-stream TTS and best-of-N."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .alignment import TimedTranscript, pseudo_decode, text_stream_from_transcript
from .rq_model import ModelState
from .token_grid import Channel, GridSchema, Role, TokenGrid, remove_delays

log = logging.getLogger(__name__)

ARGMAX_TAU = 1e-6
PROMPT_FRAMES = 125
NEW_FRAMES = 250


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.8
    seed: int = 0
    max_new_frames: int = NEW_FRAMES

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


LOG_DTYPE = np.dtype([("frame", "<i4"), ("stream", "<i2"), ("token", "<i4"), ("logit", "<f8")])


@dataclass
class GenerationResult:
    grid: TokenGrid
    log: np.ndarray
    seed: int
    tau: float
    prompt_frames: int = 0

    @property
    def new_frames(self) -> int:
        return self.grid.length - self.prompt_frames


def _softmax_cdf(logits: np.ndarray, tau: float) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64) / tau
    if np.isnan(x).any():
        raise ValueError("logits contain NaN")
    m = x.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("all logits are -inf")
    p = np.exp(x - m)
    return np.cumsum(p, axis=-1)


def sample_token(logits, tau: float, rng: np.random.Generator) -> int:
    """Draw from ``softmax(logits / tau)``; ``tau <= 1e-6`` means argmax."""
    if not tau > 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if tau <= ARGMAX_TAU:
        if np.isneginf(logits).all() or np.isnan(logits).any():
            raise ValueError("logits are not samplable")
        return int(np.argmax(logits))
    cdf = _softmax_cdf(logits, tau)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def sample_batch(logits: np.ndarray, tau: float, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Row-wise :func:`sample_token`, drawing one uniform from each row's generator."""
    if tau <= ARGMAX_TAU:
        return np.array([sample_token(row, tau, r) for row, r in zip(logits, rngs)], dtype=np.int64)
    cdf = _softmax_cdf(logits, tau)
    u = np.array([r.random() for r in rngs]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, cdf.shape[-1] - 1).astype(np.int64)


def _banned(schema: GridSchema) -> list[int]:
    return [s.initial_id for s in schema.streams]


def generate(state: ModelState, tokens: np.ndarray, forced: np.ndarray, tau: float,
             seeds: Sequence[int]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Batched frame-by-frame sampling with a temporal KV cache.

    ``tokens`` is ``(B, T, S)``; entries where ``forced`` (``(T, S)`` or
    ``(B, T, S)``) is true are kept as given and fed back as context, all
    others are sampled. Filler ids are never sampled. Returns the filled
    tokens and one sampling log per batch row.
    """
    model = state.model
    schema = state.config.schema
    tokens = np.array(tokens, dtype=np.int64, copy=True)
    B, T, S = tokens.shape
    if T > state.config.max_frames:
        raise ValueError(f"{T} frames exceed max_frames={state.config.max_frames}")
    forced = np.broadcast_to(np.asarray(forced, dtype=bool), tokens.shape)
    rngs = [np.random.default_rng(s) for s in seeds]
    if len(rngs) != B:
        raise ValueError("need one seed per batch row")
    banned = _banned(schema)
    text_streams, audio_streams = model.text_streams, model.audio_streams
    order = text_streams + audio_streams
    logs: list[list[tuple]] = [[] for _ in range(B)]

    def pick(logits: torch.Tensor, t: int, s: int):
        need = ~forced[:, t, s]
        if not need.any():
            return
        lg = logits.detach().to(torch.float64).numpy().copy()
        lg[:, banned[s]] = -np.inf
        rows = np.flatnonzero(need)
        chosen = sample_batch(lg[rows], tau, [rngs[i] for i in rows])
        for i, tok in zip(rows, chosen):
            tokens[i, t, s] = tok
            logs[i].append((t, s, tok, lg[i, tok]))

    model.eval()
    with torch.no_grad():
        cache = model.new_cache()
        z = model.temporal_step(cache, None, batch=B)
        for t in range(T):
            if t > 0:
                z = model.temporal_step(cache, torch.as_tensor(tokens[:, t - 1]))
            if forced[:, t].all():
                continue
            for j, s in enumerate(text_streams):
                pick(model.text_logits(z, j), t, s)
            for k, s in enumerate(audio_streams):
                if forced[:, t, s].all():
                    continue
                prefix = torch.as_tensor(tokens[:, t, order[: len(text_streams) + k]])
                pick(model.depth_logits(z, prefix), t, s)
    out_logs = [np.array(l, dtype=LOG_DTYPE) for l in logs]
    return tokens, out_logs


def generate_frame(state: ModelState, context: TokenGrid, sampler: SamplerConfig,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sample the next frame after ``context`` (full recompute, no cache)."""
    model = state.model
    schema = state.config.schema
    if context.schema != schema:
        raise ValueError("context schema does not match the model")
    T = context.length
    if T + 1 > state.config.max_frames:
        raise ValueError("context exceeds max_frames")
    rng = rng if rng is not None else np.random.default_rng(sampler.seed)
    banned = _banned(schema)
    frame = np.zeros(len(schema), dtype=np.int64)
    order = model.text_streams + model.audio_streams
    padded = np.concatenate([context.tokens, np.zeros((1, len(schema)), np.int64)])
    model.eval()
    with torch.no_grad():
        z = model.temporal_hidden(torch.as_tensor(padded[None]))[:, -1]

        def draw(logits, s):
            if T < schema.streams[s].delay:
                frame[s] = schema.streams[s].initial_id
                return
            lg = logits[0].to(torch.float64).numpy().copy()
            lg[banned[s]] = -np.inf
            frame[s] = sample_token(lg, sampler.temperature, rng)

        for j, s in enumerate(model.text_streams):
            draw(model.text_logits(z, j), s)
        for k, s in enumerate(model.audio_streams):
            prefix = torch.as_tensor(frame[order[: model.n_text + k]][None])
            draw(model.depth_logits(z, prefix), s)
    return frame


def continue_dialogue(state: ModelState, prompt: TokenGrid, sampler: SamplerConfig,
                      n_frames: int = NEW_FRAMES) -> GenerationResult:
    return continue_batch(state, [prompt], sampler.temperature, [sampler.seed], n_frames)[0]


def continue_batch(state: ModelState, prompts: Sequence[TokenGrid], tau: float, seeds: Sequence[int],
                   n_frames: int = NEW_FRAMES) -> list[GenerationResult]:
    """Prefill each prompt, then sample ``n_frames`` frames of all streams."""
    schema = state.config.schema
    for p in prompts:
        if p.schema != schema:
            raise ValueError("prompt schema does not match the model")
        if not p.delayed:
            raise ValueError("prompts must be delayed grids")
    lengths = {p.length for p in prompts}
    if len(lengths) != 1:
        raise ValueError("prompts in one batch must share their length")
    P = lengths.pop()
    T = P + n_frames
    tokens = np.zeros((len(prompts), T, len(schema)), dtype=np.int64)
    for i, p in enumerate(prompts):
        tokens[i, :P] = p.tokens
    forced = np.zeros((T, len(schema)), dtype=bool)
    forced[:P] = True
    # filler positions of a prompt shorter than the delays
    for s, spec in enumerate(schema.streams):
        forced[: spec.delay, s] = True
        tokens[:, P:spec.delay, s] = spec.initial_id
    filled, logs = generate(state, tokens, forced, tau, seeds)
    return [GenerationResult(TokenGrid(schema, filled[i], delayed=True), logs[i], seeds[i], tau, P)
            for i in range(len(prompts))]


def tts_inputs(schema: GridSchema, transcripts: Mapping[Channel, TimedTranscript],
               n_text_frames: int) -> tuple[np.ndarray, np.ndarray]:
    """Delayed token template and forced mask for multi-stream TTS.

    The grid spans the text frames plus the largest delay so every text
    frame's audio is generated.
    """
    if schema.kind != "tts":
        raise ValueError("TTS generation needs a model built on the tts schema")
    T = n_text_frames + schema.max_delay
    tokens = np.zeros((T, len(schema)), dtype=np.int64)
    forced = np.zeros((T, len(schema)), dtype=bool)
    for s, spec in enumerate(schema.streams):
        if spec.role == Role.TEXT:
            tr = transcripts.get(spec.channel, TimedTranscript(spec.channel))
            stream, _ = text_stream_from_transcript(tr, T, spec.pad_id)
            stream[n_text_frames:] = spec.pad_id
            tokens[:, s] = stream
            forced[:, s] = True
        else:
            tokens[: spec.delay, s] = spec.initial_id
            forced[: spec.delay, s] = True
    return tokens, forced


def tts_generate(state: ModelState, transcripts: Mapping[Channel, TimedTranscript], sampler: SamplerConfig,
                 n_text_frames: Optional[int] = None) -> GenerationResult:
    return tts_batch(state, transcripts, sampler.temperature, [sampler.seed], n_text_frames)[0]


def _text_frames(transcripts: Mapping[Channel, TimedTranscript]) -> int:
    """Frames needed to hold every text token after collision cascading."""
    n = 1
    for tr in transcripts.values():
        if not tr.tokens:
            continue
        horizon = int(np.floor(tr.tokens[-1].start * 12.5)) + len(tr.tokens) + 1
        stream, _ = text_stream_from_transcript(tr, horizon, -1)
        n = max(n, int(np.flatnonzero(stream != -1)[-1]) + 1)
    return n


def tts_batch(state: ModelState, transcripts: Mapping[Channel, TimedTranscript], tau: float,
              seeds: Sequence[int], n_text_frames: Optional[int] = None) -> list[GenerationResult]:
    schema = state.config.schema
    if n_text_frames is None:
        n_text_frames = _text_frames(transcripts)
    template, forced = tts_inputs(schema, transcripts, n_text_frames)
    tokens = np.broadcast_to(template, (len(seeds),) + template.shape)
    filled, logs = generate(state, tokens, forced, tau, seeds)
    return [GenerationResult(TokenGrid(schema, filled[i], delayed=True), logs[i], seeds[i], tau, 0)
            for i in range(len(seeds))]


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(hypothesis: Sequence, reference: Sequence) -> float:
    """Token edit distance over reference length."""
    if len(reference) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(hypothesis, reference) / len(reference)


AsrAdapter = Callable[[TokenGrid], Mapping[Channel, list[int]]]


def pseudo_asr(grid: TokenGrid) -> dict[Channel, list[int]]:
    """Default ASR adapter: pseudo-decode each channel's semantic stream.

    Frames whose audio was cut off by the delays are skipped.
    """
    g = remove_delays(grid) if grid.delayed else grid
    valid = g.length - (g.schema.max_delay if grid.delayed else 0)
    out = {}
    for ch in (Channel.SELF, Channel.USER):
        sem = g.tokens[: max(valid, 0), g.schema.semantic_index(ch)]
        out[ch] = pseudo_decode(sem)
    return out


@dataclass
class BestOfN:
    selected: GenerationResult
    index: int
    table: list[dict] = field(default_factory=list)

    @property
    def edits(self) -> int:
        return self.table[self.index]["edits"]

    @property
    def ref_len(self) -> int:
        return self.table[self.index]["ref_len"]

    @property
    def wer(self) -> float:
        return self.table[self.index]["wer"]


def dialogue_edits(hyp: Mapping[Channel, Sequence[int]], transcripts: Mapping[Channel, TimedTranscript]):
    edits = ref_len = 0
    for ch, tr in transcripts.items():
        ref = tr.ids
        edits += edit_distance(list(hyp.get(ch, [])), ref)
        ref_len += len(ref)
    return edits, ref_len


def best_of_n(state: ModelState, transcripts: Mapping[Channel, TimedTranscript], n: int = 10,
              seeds: Optional[Sequence[int]] = None, tau: float = 0.8,
              asr: AsrAdapter = pseudo_asr, candidates: Optional[Sequence[GenerationResult]] = None,
              n_text_frames: Optional[int] = None) -> BestOfN:
    """Generate ``n`` TTS candidates and keep the lowest-WER one.

    WER pools both channels: total edits over total reference tokens. Ties
    go to the earliest seed. ``candidates`` skips generation (used to score
    externally produced samples).
    """
    if candidates is None:
        seeds = list(range(n)) if seeds is None else list(seeds)
        if len(seeds) != n or n < 1:
            raise ValueError("need n >= 1 seeds")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        candidates = tts_batch(state, transcripts, tau, seeds, n_text_frames)
    if not candidates:
        raise ValueError("no candidates to choose from")
    table = []
    for i, cand in enumerate(candidates):
        try:
            hyp = asr(cand.grid)
        except Exception as exc:  # adapter failures only disqualify the candidate
            log.warning("ASR adapter failed on candidate %d: %s", i, exc)
            table.append({"index": i, "seed": cand.seed, "edits": None, "ref_len": None, "wer": float("inf")})
            continue
        edits, ref_len = dialogue_edits(hyp, transcripts)
        if ref_len == 0:
            raise ValueError("reference dialogue text is empty")
        table.append({"index": i, "seed": cand.seed, "edits": edits, "ref_len": ref_len,
                      "wer": edits / ref_len})
    if all(row["edits"] is None for row in table):
        raise RuntimeError("ASR adapter failed on every candidate")
    best = min(range(len(table)), key=lambda i: (table[i]["wer"], i))
    return BestOfN(candidates[best], best, table)


def corpus_wer(selections: Sequence[BestOfN]) -> float:
    """Reference-length weighted WER over selected samples."""
    edits = sum(s.edits for s in selections)
    ref_len = sum(s.ref_len for s in selections)
    if ref_len == 0:
        raise ValueError("empty reference corpus")
    return edits / ref_len
