"""Prompted dialogue continuation experiment with pluggable ASR and LM scorers.

Under the pseudo-codec the "ASR transcript" of a grid is its decoded
semantic stream, so perplexities here are a structural analog of
transcript perplexity rather than a measurement on real speech.
"""

from __future__ import annotations

import io
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .alignment import pseudo_decode, read_manifest, resolve_grid_path
from .generation import continue_batch
from .rq_model import ModelState
from .token_grid import (
    Channel,
    TokenGrid,
    apply_delays,
    load_grid,
    remove_delays,
    seconds_to_frames,
    slice_grid,
)
from .turn_taking import REPORT_KEYS, TurnTakingReport, activity_from_grid, analyze, mean_report

TEMPERATURES = (0.8, 0.9, 1.0)
REPORT_COLUMNS = ("tau", "n_samples", "mean_ppl") + REPORT_KEYS


@dataclass(frozen=True)
class EvalConfig:
    chunk_s: float = 30.0
    prompt_s: float = 10.0
    temperatures: tuple[float, ...] = TEMPERATURES
    seed: int = 0
    batch_size: int = 64
    asr: str = "pseudo"
    lm: str = "bigram"

    def __post_init__(self):
        object.__setattr__(self, "temperatures", tuple(float(t) for t in self.temperatures))
        if not 0 < self.prompt_s < self.chunk_s:
            raise ValueError("need 0 < prompt_s < chunk_s")
        if not self.temperatures or any(t <= 0 for t in self.temperatures):
            raise ValueError("temperatures must be positive")

    @property
    def chunk_frames(self) -> int:
        return seconds_to_frames(self.chunk_s)

    @property
    def prompt_frames(self) -> int:
        return seconds_to_frames(self.prompt_s)


@dataclass(frozen=True)
class Chunk:
    id: str
    prompt: TokenGrid      # delayed, prompt_frames long
    reference: TokenGrid   # undelayed, the frames the model must continue


def chunk_grid(grid: TokenGrid, chunk_frames: int = 375, prompt_frames: int = 125,
               id_prefix: str = "") -> list[Chunk]:
    """Non-overlapping windows from the start; a short remainder is dropped."""
    plain = remove_delays(grid) if grid.delayed else grid
    out = []
    for i in range(plain.length // chunk_frames):
        window = slice_grid(plain, i * chunk_frames, (i + 1) * chunk_frames)
        prompt = slice_grid(apply_delays(window), 0, prompt_frames)
        reference = slice_grid(window, prompt_frames, chunk_frames)
        out.append(Chunk(f"{id_prefix}{i:04d}", prompt, reference))
    return out


def chunk_dialogues(grids: Iterable[tuple[str, TokenGrid]], config: EvalConfig = EvalConfig()) -> list[Chunk]:
    chunks = []
    for gid, grid in grids:
        chunks += chunk_grid(grid, config.chunk_frames, config.prompt_frames, f"{gid}/")
    return chunks


def load_manifest_grids(manifest_path, split: Optional[str] = None) -> list[tuple[str, TokenGrid]]:
    rows = read_manifest(manifest_path)
    return [(r.id, load_grid(resolve_grid_path(r, manifest_path)))
            for r in rows if split is None or r.split == split]


def ppl(nll_total: float, token_count: int) -> float:
    if token_count < 1:
        raise ValueError("perplexity needs at least one token")
    return math.exp(nll_total / token_count)


class LmAdapter(Protocol):
    def score(self, tokens: Sequence[int]) -> tuple[float, int]:
        """Total negative log-likelihood (nats) and token count."""


BOS = -1


class BigramLM:
    """Add-one smoothed token bigram model; the first token is scored after BOS."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.pair: dict[int, Counter] = defaultdict(Counter)
        self.context: Counter = Counter()

    def fit(self, sequences: Iterable[Sequence[int]]) -> "BigramLM":
        for seq in sequences:
            prev = BOS
            for tok in seq:
                self.pair[prev][int(tok)] += 1
                self.context[prev] += 1
                prev = int(tok)
        return self

    def prob(self, prev: int, tok: int) -> float:
        return (self.pair[prev][tok] + 1) / (self.context[prev] + self.vocab_size)

    def score(self, tokens: Sequence[int]) -> tuple[float, int]:
        nll, prev = 0.0, BOS
        for tok in tokens:
            c = self.pair.get(prev)
            hits = c[int(tok)] if c else 0
            nll -= math.log((hits + 1) / (self.context.get(prev, 0) + self.vocab_size))
            prev = int(tok)
        return nll, len(tokens)


def mock_lm_train(sequences: Iterable[Sequence[int]], vocab_size: int) -> BigramLM:
    sequences = [list(s) for s in sequences]
    if not any(sequences):
        raise ValueError("cannot train a language model on an empty corpus")
    return BigramLM(vocab_size).fit(sequences)


def decode_channels(grid: TokenGrid) -> dict[Channel, list[int]]:
    """Pseudo-ASR of an undelayed grid, one token list per channel."""
    if grid.delayed:
        raise ValueError("decode expects an undelayed grid")
    return {ch: pseudo_decode(grid.tokens[:, grid.schema.semantic_index(ch)])
            for ch in (Channel.SELF, Channel.USER)}


def corpus_sequences(grids: Iterable[TokenGrid]) -> list[list[int]]:
    """Decoded token sequences of both channels, for LM training."""
    out = []
    for g in grids:
        g = remove_delays(g) if g.delayed else g
        out += list(decode_channels(g).values())
    return out


@dataclass
class ScoredSet:
    label: str
    n_samples: int
    nll: float
    n_tokens: int
    turn_taking: TurnTakingReport

    @property
    def mean_ppl(self) -> float:
        return ppl(self.nll, self.n_tokens) if self.n_tokens else float("nan")

    def row(self) -> list[str]:
        tt = self.turn_taking
        return [self.label, str(self.n_samples), f"{self.mean_ppl:.3f}"] + \
            [f"{getattr(tt, k):.1f}" for k in REPORT_KEYS]


def score_grids(label: str, grids: Sequence[TokenGrid], lm: LmAdapter,
                asr: Callable[[TokenGrid], Mapping[Channel, Sequence[int]]] = decode_channels) -> ScoredSet:
    """PPL over decoded channels and mean turn-taking of undelayed grids."""
    nll, n_tok, reports = 0.0, 0, []
    for g in grids:
        for seq in asr(g).values():
            a, b = lm.score(seq)
            nll += a
            n_tok += b
        duration = g.length / 12.5
        reports.append(analyze(activity_from_grid(g, Channel.SELF), activity_from_grid(g, Channel.USER),
                               duration))
    return ScoredSet(label, len(grids), nll, n_tok, mean_report(reports))


@dataclass
class ExperimentReport:
    rows: list[ScoredSet]
    generated: dict[float, list[TokenGrid]] = field(default_factory=dict, repr=False)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("\t".join(REPORT_COLUMNS) + "\n")
        for r in self.rows:
            buf.write("\t".join(r.row()) + "\n")
        return buf.getvalue()

    def row(self, label: str) -> ScoredSet:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def tau_label(tau: float) -> str:
    return f"{tau:g}"


def chunk_seed(base: int, index: int, tau: float) -> int:
    return int(np.random.SeedSequence([base, index, int(round(tau * 1000))]).generate_state(1)[0])


def run_experiment(state: ModelState, chunks: Sequence[Chunk], config: EvalConfig, lm: Optional[LmAdapter],
                   asr: Callable[[TokenGrid], Mapping[Channel, Sequence[int]]] = decode_channels,
                   keep_grids: bool = False) -> ExperimentReport:
    """Continue every chunk at every temperature and score the continuations.

    The generated region (frames after the prompt) is scored; the
    reference continuations are scored the same way under label ``ref``.
    """
    if lm is None:
        raise ValueError("an LM adapter is required")
    if not chunks:
        raise ValueError("no chunks to evaluate")
    rows, kept = [], {}
    for tau in config.temperatures:
        regions = []
        for lo in range(0, len(chunks), config.batch_size):
            batch = chunks[lo:lo + config.batch_size]
            seeds = [chunk_seed(config.seed, lo + i, tau) for i in range(len(batch))]
            n_new = batch[0].reference.length
            results = continue_batch(state, [c.prompt for c in batch], tau, seeds, n_new)
            for res in results:
                plain = remove_delays(res.grid)
                regions.append(slice_grid(plain, res.prompt_frames, plain.length))
        rows.append(score_grids(tau_label(tau), regions, lm, asr))
        if keep_grids:
            kept[tau] = regions
    rows.append(score_grids("ref", [c.reference for c in chunks], lm, asr))
    return ExperimentReport(rows, kept)


def shuffled_ppl(grids: Sequence[TokenGrid], lm: LmAdapter, seed: int) -> float:
    """PPL of the same decoded tokens after a seeded shuffle within each sequence."""
    rng = np.random.default_rng(seed)
    nll, n = 0.0, 0
    for g in grids:
        for seq in decode_channels(g).values():
            a, b = lm.score(list(rng.permutation(np.asarray(seq, dtype=np.int64))))
            nll += a
            n += b
    return ppl(nll, n)
