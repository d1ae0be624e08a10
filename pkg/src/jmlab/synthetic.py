"""Scripted two-speaker stochastic dialogues with known turn-taking behavior.

Each 80 ms frame, every speaker switches talk/silence with a probability
that depends on whether the other speaker is talking. While talking a
speaker utters words from a sparse bigram language. Expected per-minute
statistics are estimated by simulating the process and analyzing it with
the same turn-taking code used on model output.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .token_grid import FRAME_RATE_HZ
from .turn_taking import TurnTakingReport, analyze, frames_to_intervals, mean_report
from .alignment import ActivityTrack
from .token_grid import Channel

SPEAKERS = ("spk_a", "spk_b")


@dataclass(frozen=True)
class DialogueProcess:
    p_start_alone: float = 0.06
    p_start_over: float = 0.045
    p_stop_alone: float = 0.05
    p_stop_over: float = 0.11
    p_word: float = 0.4
    n_words: int = 24
    p_main_successor: float = 0.8

    def successors(self, word: int) -> tuple[int, int]:
        return (3 * word + 1) % self.n_words, (5 * word + 2) % self.n_words

    def simulate_activity(self, n_frames: int, rng: np.random.Generator,
                          burn_in: int = 200) -> np.ndarray:
        """``(n_frames, 2)`` boolean talk matrix after ``burn_in`` frames."""
        total = n_frames + burn_in
        act = np.zeros((total, 2), dtype=bool)
        u = rng.random((total, 2))
        cur = np.zeros(2, dtype=bool)
        for t in range(total):
            nxt = cur.copy()
            for i in range(2):
                other = cur[1 - i]
                if cur[i]:
                    p = self.p_stop_over if other else self.p_stop_alone
                    nxt[i] = u[t, i] >= p
                else:
                    p = self.p_start_over if other else self.p_start_alone
                    nxt[i] = u[t, i] < p
            cur = nxt
            act[t] = cur
        return act[burn_in:]

    def simulate_words(self, active: np.ndarray, rng: np.random.Generator) -> list[tuple[int, int]]:
        """(frame, word) pairs for one speaker's activity column."""
        out = []
        word = int(rng.integers(self.n_words))
        prev_active = False
        for t, a in enumerate(active):
            if a and (not prev_active or rng.random() < self.p_word):
                main, alt = self.successors(word)
                word = main if rng.random() < self.p_main_successor else alt
                out.append((t, word))
            prev_active = bool(a)
        return out

    def expected_turn_taking(self, window_s: float = 20.0, n_windows: int = 2000,
                             seed: int = 0) -> TurnTakingReport:
        """Monte Carlo mean of per-window reports over stationary windows."""
        rng = np.random.default_rng(seed)
        n = int(round(window_s * float(FRAME_RATE_HZ)))
        reports = []
        for _ in range(n_windows):
            act = self.simulate_activity(n, rng)
            reports.append(analyze(ActivityTrack(Channel.SELF, tuple(frames_to_intervals(act[:, 0]))),
                                   ActivityTrack(Channel.USER, tuple(frames_to_intervals(act[:, 1]))),
                                   window_s))
        return mean_report(reports)


def write_dialogue(process: DialogueProcess, duration_s: float, rng: np.random.Generator,
                   diar_path: Path, transcript_path: Path) -> None:
    """Write one dialogue as diarization and transcript files."""
    fps = float(FRAME_RATE_HZ)
    n = int(round(duration_s * fps))
    act = process.simulate_activity(n, rng)
    diar, trans = [], []
    for i, spk in enumerate(SPEAKERS):
        for iv in frames_to_intervals(act[:, i]):
            diar.append((iv.start, f"{spk}\t{iv.start:.4f}\t{iv.end:.4f}"))
        for frame, word in process.simulate_words(act[:, i], rng):
            start = (frame + 0.25) / fps
            trans.append((start, f"{spk}\t{start:.4f}\t{word}"))
    diar_path.write_text("".join(line + "\n" for _, line in sorted(diar)))
    transcript_path.write_text("".join(line + "\n" for _, line in sorted(trans)))


def write_corpus(out_dir, n_dialogues: int, duration_s: float, seed: int,
                 process: Optional[DialogueProcess] = None) -> tuple[Path, Path]:
    """Create ``diarization/`` and ``transcripts/`` directories of ``<id>.tsv`` files."""
    process = process or DialogueProcess()
    out = Path(out_dir)
    diar_dir, tr_dir = out / "diarization", out / "transcripts"
    diar_dir.mkdir(parents=True, exist_ok=True)
    tr_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_dialogues):
        name = f"dlg{i:04d}.tsv"
        write_dialogue(process, duration_s, rng, diar_dir / name, tr_dir / name)
    return diar_dir, tr_dir
