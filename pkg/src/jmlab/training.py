"""Single-process training loop with deterministic batching and resumable checkpoints."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .rq_model import ModelState, NumericError, TrainConfig, save_checkpoint, train_step
from .token_grid import TokenGrid, apply_delays, remove_delays, slice_grid

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "lr", "lr_depth", "loss", "text_ce", "semantic_ce", "acoustic_ce")


def make_windows(grids: Sequence[TokenGrid], window: int) -> list[TokenGrid]:
    """Cut grids into full, non-overlapping delayed windows of ``window`` frames."""
    out = []
    for g in grids:
        plain = remove_delays(g) if g.delayed else g
        for lo in range(0, plain.length - window + 1, window):
            out.append(apply_delays(slice_grid(plain, lo, lo + window)))
    return out


def batch_for_step(n_windows: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Window indices for a 0-based step; a pure function so resumes line up."""
    per_epoch = max(n_windows // batch_size, 1)
    epoch, k = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n_windows)
    return order[k * batch_size:(k + 1) * batch_size]


def total_steps(n_windows: int, tc: TrainConfig) -> int:
    if tc.steps is not None:
        return tc.steps
    return tc.epochs * max(n_windows // tc.batch_size, 1)


def train(state: ModelState, windows: Sequence[TokenGrid], tc: TrainConfig,
          out_dir: Optional[Path] = None, checkpoint_every: int = 0,
          on_step: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Run optimization steps from ``state.step`` up to the configured total.

    Writes ``loss.tsv`` (appending on resume), periodic ``ckpt_<step>.jmck``
    files and ``last.jmck``. A non-finite loss leaves ``last.jmck`` at the
    last good state and re-raises.
    """
    if not windows:
        raise ValueError("no training windows")
    n_total = total_steps(len(windows), tc)
    history = []
    loss_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "loss.tsv"
        fresh = state.step == 0 or not path.exists()
        loss_file = open(path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            loss_file.write("\t".join(LOSS_COLUMNS) + "\n")
    try:
        while state.step < n_total:
            idx = batch_for_step(len(windows), tc.batch_size, state.step, tc.seed)
            try:
                metrics = train_step(state, [windows[i] for i in idx], tc)
            except NumericError:
                if out_dir is not None:
                    save_checkpoint(state, out_dir / "last.jmck")
                raise
            history.append(metrics)
            if loss_file is not None:
                loss_file.write("\t".join(_fmt(metrics[c]) for c in LOSS_COLUMNS) + "\n")
            if on_step is not None:
                on_step(metrics)
            if out_dir is not None and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"ckpt_{state.step:06d}.jmck")
    finally:
        if loss_file is not None:
            loss_file.close()
    if out_dir is not None:
        save_checkpoint(state, out_dir / "last.jmck")
    return history


def _fmt(v) -> str:
    if isinstance(v, int):
        return str(v)
    return repr(float(v))
