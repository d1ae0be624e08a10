"""Command-line entry point: ``jmlab <command> [options]``.

Every command that writes files takes ``--out DIR`` and leaves the fully
resolved configuration in ``DIR/config.json`` plus a ``DIR/run.log`` echo.
Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import alignment, eval_harness, generation, rq_model, token_grid, turn_taking
from .alignment import InputFormatError, ManifestRow
from .rq_model import CheckpointError, ModelConfig, NumericError, TrainConfig
from .token_grid import Channel, GridFormatError

log = logging.getLogger("jmlab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- configuration -------------------------------------------------------------

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"schema"}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}

DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": {"seed": 0, "n_dialogues": 20, "duration_s": 120.0},
    "prep": {"seed": 0, "kind": "dialogue", "text_vocab": 32, "semantic_vocab": 40, "acoustic_vocab": 8},
    "split": {"seed": 0, "ratios": [94, 3, 3]},
    "train": {"seed": 0, "split": "train", "window_frames": 375, "checkpoint_every": 0,
              "model": {}, "train": {}},
    "continue": {"seed": 0, "tau": 0.8, "split": "test", "prompt_s": 10.0, "new_s": 20.0,
                 "chunk_s": 30.0, "limit": None},
    "tts": {"seed": 0, "tau": 0.8, "n": 10},
    "analyze": {"duration": None, "min_silence": turn_taking.MIN_SILENCE_S},
    "eval": {"seed": 0, "temperatures": list(eval_harness.TEMPERATURES), "split": "test",
             "lm_split": "train", "chunk_s": 30.0, "prompt_s": 10.0, "batch_size": 64, "limit": None},
    "inspect": {},
}


def resolve_config(command: str, config_path: Optional[str], overrides: dict) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {config_path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        # a run directory's config.json names its command
        if loaded.pop("command", command) != command:
            raise UsageError(f"config file was written for another command, not {command}")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        for key, allowed in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS)):
            if key in loaded and key in cfg:
                bad = set(loaded[key]) - allowed
                if bad:
                    raise UsageError(f"unknown {key} config keys: {sorted(bad)}")
        cfg.update(loaded)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    return cfg


def start_run(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")
    with open(out / "run.log", "w", encoding="utf-8") as f:
        f.write(f"command\t{command}\n")
        for k in sorted(cfg):
            f.write(f"{k}\t{json.dumps(cfg[k], sort_keys=True)}\n")


def _threads():
    n = os.environ.get("JMLAB_THREADS")
    if n:
        import torch
        torch.set_num_threads(max(int(n), 1))


# --- commands ------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    from .synthetic import write_corpus
    out = Path(args.out)
    start_run(out, "synth", cfg)
    write_corpus(out, int(cfg["n_dialogues"]), float(cfg["duration_s"]), int(cfg["seed"]))
    print(f"wrote {cfg['n_dialogues']} dialogues under {out}")
    return EXIT_OK


def cmd_prep(args, cfg) -> int:
    out = Path(args.out)
    start_run(out, "prep", cfg)
    schema = token_grid.build_schema(cfg["kind"], int(cfg["text_vocab"]), int(cfg["semantic_vocab"]),
                                     int(cfg["acoustic_vocab"]))
    tr_dir, diar_dir = Path(args.transcripts), Path(args.diarization)
    names = sorted(p.name for p in diar_dir.glob("*.tsv"))
    if not names:
        raise DataError(f"no diarization files in {diar_dir}")
    (out / "grids").mkdir(exist_ok=True)
    rows, pads, frames, dropped = [], 0, 0, 0
    base = np.random.SeedSequence(int(cfg["seed"]))
    for i, (name, child) in enumerate(zip(names, base.spawn(len(names)))):
        did = Path(name).stem
        tr_path = tr_dir / name
        if not tr_path.exists():
            raise DataError(f"missing transcript {tr_path}")
        seed = int(child.generate_state(1)[0])
        grid, n_drop, duration = alignment.prepare_dialogue(diar_dir / name, tr_path, schema, seed)
        rel = Path("grids") / f"{did}.jmgr"
        token_grid.save_grid(grid, out / rel)
        rows.append(ManifestRow(did, str(rel), duration, ""))
        idx = schema.text_index(Channel.SELF)
        pads += int(np.count_nonzero(grid.tokens[:, idx] == schema.streams[idx].pad_id))
        frames += grid.length
        dropped += n_drop
    alignment.write_manifest(rows, out / "manifest.tsv")
    summary = {"dialogues": len(rows), "frames": frames, "pad_tokens": pads,
               "pad_ratio": pads / frames if frames else 0.0, "dropped_tokens": dropped}
    (out / "pad_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{len(rows)} dialogues, PAD ratio {summary['pad_ratio']:.4f}, dropped {dropped}")
    return EXIT_OK


def cmd_split(args, cfg) -> int:
    out = Path(args.out)
    start_run(out, "split", cfg)
    manifest = Path(args.manifest)
    rows = alignment.read_manifest(manifest)
    train, valid, test = alignment.split_manifest(rows, tuple(cfg["ratios"]), int(cfg["seed"]))
    labeled = []
    for part, name in ((train, "train"), (valid, "valid"), (test, "test")):
        for r in part:
            path = alignment.resolve_grid_path(r, manifest).resolve()
            labeled.append(ManifestRow(r.id, str(path), r.duration_s, name))
    labeled.sort(key=lambda r: r.id)
    alignment.write_manifest(labeled, out / "manifest.tsv")
    print(f"train {len(train)} / valid {len(valid)} / test {len(test)}")
    return EXIT_OK


def _grids(manifest, split: Optional[str]):
    return eval_harness.load_manifest_grids(manifest, split)


def _model_config(cfg: dict, schema) -> ModelConfig:
    model = dict(cfg.get("model", {}))
    model.setdefault("seed", int(cfg["seed"]))
    model.setdefault("max_frames", max(int(cfg.get("window_frames", 375)), 375))
    return ModelConfig(schema=schema, **model)


def _train_config(cfg: dict) -> TrainConfig:
    tc = dict(cfg.get("train", {}))
    tc.setdefault("seed", int(cfg["seed"]))
    return TrainConfig(**tc)


def cmd_train(args, cfg) -> int:
    from .training import make_windows, train
    out = Path(args.out)
    start_run(out, "train", cfg)
    grids = [g for _, g in _grids(args.manifest, cfg["split"] or None)]
    if not grids:
        raise DataError("no training grids in manifest")
    try:
        mc = _model_config(cfg, grids[0].schema)
        tc = _train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model/train config: {exc}") from None
    windows = make_windows(grids, int(cfg["window_frames"]))
    if args.resume:
        state = rq_model.load_checkpoint(args.resume, mc)
    else:
        state = rq_model.init_model(mc)
    hist = train(state, windows, tc, out, int(cfg["checkpoint_every"]))
    if hist:
        print(f"steps {state.step}: loss {hist[0]['loss']:.4f} -> {hist[-1]['loss']:.4f}")
    return EXIT_OK


def _load_state(path):
    return rq_model.load_checkpoint(path)


def _write_generations(path: Path, rows: list[dict]) -> None:
    cols = ("id", "prompt_frames", "new_frames", "tau", "seed", "grid_path", "wer")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(cols) + "\n")
        for r in rows:
            f.write("\t".join("" if r.get(c) is None else str(r[c]) for c in cols) + "\n")


def cmd_continue(args, cfg) -> int:
    out = Path(args.out)
    start_run(out, "continue", cfg)
    state = _load_state(args.checkpoint)
    ec = eval_harness.EvalConfig(chunk_s=float(cfg["chunk_s"]), prompt_s=float(cfg["prompt_s"]),
                                 temperatures=(float(cfg["tau"]),), seed=int(cfg["seed"]))
    chunks = eval_harness.chunk_dialogues(_grids(args.manifest, cfg["split"] or None), ec)
    if cfg["limit"]:
        chunks = chunks[: int(cfg["limit"])]
    if not chunks:
        raise DataError("no 30 s chunks available")
    n_new = token_grid.seconds_to_frames(float(cfg["new_s"]))
    (out / "grids").mkdir(exist_ok=True)
    rows = []
    tau = float(cfg["tau"])
    for lo in range(0, len(chunks), ec.batch_size):
        batch = chunks[lo:lo + ec.batch_size]
        seeds = [eval_harness.chunk_seed(ec.seed, lo + i, tau) for i in range(len(batch))]
        for c, res in zip(batch, generation.continue_batch(state, [c.prompt for c in batch], tau, seeds, n_new)):
            rel = Path("grids") / (c.id.replace("/", "_") + ".jmgr")
            token_grid.save_grid(res.grid, out / rel)
            rows.append({"id": c.id, "prompt_frames": res.prompt_frames, "new_frames": res.new_frames,
                         "tau": tau, "seed": res.seed, "grid_path": str(rel)})
    _write_generations(out / "generations.tsv", rows)
    print(f"generated {len(rows)} continuations")
    return EXIT_OK


def _read_tts_text(path) -> dict:
    rows = alignment.read_transcript(path)
    for label, _, _ in rows:
        if label not in ("self", "user"):
            raise DataError(f"TTS text channel must be 'self' or 'user', got {label!r}")
    return alignment.transcripts_by_channel(rows, {})


def cmd_tts(args, cfg) -> int:
    out = Path(args.out)
    start_run(out, "tts", cfg)
    state = _load_state(args.checkpoint)
    transcripts = _read_tts_text(args.text)
    n = int(cfg["n"])
    base = int(cfg["seed"])
    seeds = [base + i for i in range(n)]
    result = generation.best_of_n(state, transcripts, n=n, seeds=seeds, tau=float(cfg["tau"]))
    token_grid.save_grid(result.selected.grid, out / "selected.jmgr")
    with open(out / "wer.tsv", "w", encoding="utf-8") as f:
        f.write("index\tseed\tedits\tref_len\twer\n")
        for r in result.table:
            f.write(f"{r['index']}\t{r['seed']}\t{r['edits']}\t{r['ref_len']}\t{r['wer']:.6f}\n")
    sel = result.selected
    _write_generations(out / "generations.tsv", [{
        "id": Path(args.text).stem, "prompt_frames": 0, "new_frames": sel.new_frames, "tau": sel.tau,
        "seed": sel.seed, "grid_path": "selected.jmgr", "wer": f"{result.wer:.6f}"}])
    print(f"selected seed {sel.seed} with WER {result.wer:.4f}")
    return EXIT_OK


def _read_intervals(path) -> dict:
    per = {Channel.SELF: [], Channel.USER: []}
    labels: dict[str, Channel] = {}
    for lineno, cols in alignment._rows(path):
        if len(cols) != 3:
            raise InputFormatError(path, lineno, f"expected 3 fields, got {len(cols)}")
        label = cols[0]
        if label in ("self", "user"):
            ch = Channel[label.upper()]
        else:
            if label not in labels:
                if len(labels) == 2:
                    raise InputFormatError(path, lineno, "more than two speakers")
                labels[label] = Channel(len(labels))
            ch = labels[label]
        try:
            per[ch].append(alignment.Interval(float(cols[1]), float(cols[2])))
        except ValueError as exc:
            raise InputFormatError(path, lineno, str(exc)) from None
    return {ch: alignment.ActivityTrack(ch, tuple(alignment.merge_intervals(v))) for ch, v in per.items()}


def cmd_analyze(args, cfg) -> int:
    if bool(args.intervals) == bool(args.grid):
        raise UsageError("analyze needs exactly one of --intervals or --grid")
    if args.grid:
        grid = token_grid.load_grid(args.grid)
        if grid.delayed:
            grid = token_grid.remove_delays(grid)
        tracks = {ch: turn_taking.activity_from_grid(grid, ch) for ch in Channel}
        duration = cfg["duration"] or grid.length / 12.5
    else:
        tracks = _read_intervals(args.intervals)
        ends = [iv.end for t in tracks.values() for iv in t.intervals]
        duration = cfg["duration"] or (max(ends) if ends else 0.0)
    if not duration or duration <= 0:
        raise DataError("duration must be positive (pass --duration)")
    ms = float(cfg["min_silence"])
    rep = turn_taking.report(turn_taking.segments_to_ipus(tracks[Channel.SELF], ms),
                             turn_taking.segments_to_ipus(tracks[Channel.USER], ms), float(duration))
    text = rep.format() + "\n"
    if args.out:
        out = Path(args.out)
        start_run(out, "analyze", cfg)
        (out / "report.tsv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    out = Path(args.out)
    start_run(out, "eval", cfg)
    state = _load_state(args.checkpoint)
    ec = eval_harness.EvalConfig(chunk_s=float(cfg["chunk_s"]), prompt_s=float(cfg["prompt_s"]),
                                 temperatures=tuple(cfg["temperatures"]), seed=int(cfg["seed"]),
                                 batch_size=int(cfg["batch_size"]))
    chunks = eval_harness.chunk_dialogues(_grids(args.manifest, cfg["split"] or None), ec)
    if cfg["limit"]:
        chunks = chunks[: int(cfg["limit"])]
    if not chunks:
        raise DataError("no 30 s chunks available")
    lm_manifest = args.lm_manifest or args.manifest
    lm_grids = [g for _, g in _grids(lm_manifest, cfg["lm_split"] or None)]
    text_vocab = state.config.schema.streams[state.config.schema.text_index(Channel.SELF)].vocab_size
    lm = eval_harness.mock_lm_train(eval_harness.corpus_sequences(lm_grids), text_vocab)
    report = eval_harness.run_experiment(state, chunks, ec, lm)
    tsv = report.to_tsv()
    (out / "report.tsv").write_text(tsv)
    sys.stdout.write(tsv)
    return EXIT_OK


def cmd_inspect(args, cfg) -> int:
    if args.frames is None and args.seconds is None and not args.grid:
        raise UsageError("inspect needs --grid, --frames or --seconds")
    if args.frames is not None:
        secs = token_grid.frames_to_seconds(args.frames)
        print(f"{args.frames} frames = {secs:g} s = {secs / 60:.1f} min")
    if args.seconds is not None:
        print(f"{args.seconds:g} s = {token_grid.seconds_to_frames(args.seconds)} frames")
    if args.grid:
        grid = token_grid.load_grid(args.grid)
        print(f"streams\t{len(grid.schema)}\nkind\t{grid.schema.kind}\nframes\t{grid.length}")
        print(f"seconds\t{token_grid.frames_to_seconds(grid.length):g}\ndelayed\t{int(grid.delayed)}")
        if grid.schema.text_indices:
            print(f"pad_ratio\t{token_grid.pad_ratio(grid):.4f}")
        for spec in grid.schema.streams:
            print(f"{spec.name}\tvocab={spec.vocab_size}\tdelay={spec.delay}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jmlab", description="full-duplex dialogue modeling toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help, out=True, out_required=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", required=out_required, help="run directory")
        return sp

    sp = add("synth", "write a synthetic two-speaker corpus")
    sp.add_argument("--n-dialogues", dest="n_dialogues", type=int)
    sp.add_argument("--duration", dest="duration_s", type=float)

    sp = add("prep", "diarized transcripts -> grids + manifest")
    sp.add_argument("--transcripts", required=True)
    sp.add_argument("--diarization", required=True)
    sp.add_argument("--kind", choices=("dialogue", "tts"))

    sp = add("split", "94:3:3 train/valid/test split of a manifest")
    sp.add_argument("--manifest", required=True)

    sp = add("train", "train the model on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--resume", help="checkpoint to resume from")

    sp = add("continue", "prompted dialogue continuation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--limit", type=int)

    sp = add("tts", "multi-stream TTS with best-of-N selection")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--tau", type=float)
    sp.add_argument("-n", type=int)

    sp = add("analyze", "turn-taking report", out_required=False)
    sp.add_argument("--intervals")
    sp.add_argument("--grid")
    sp.add_argument("--duration", type=float)

    sp = add("eval", "continuation experiment across temperatures")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--lm-manifest", dest="lm_manifest")
    sp.add_argument("--tau", type=float, action="append", dest="temperatures")
    sp.add_argument("--limit", type=int)

    sp = add("inspect", "grid and frame arithmetic summary", out=False)
    sp.add_argument("--grid")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--seconds", type=float)
    return p


_OVERRIDES = ("seed", "n_dialogues", "duration_s", "kind", "tau", "limit", "n", "duration", "temperatures")

COMMANDS = {
    "synth": cmd_synth, "prep": cmd_prep, "split": cmd_split, "train": cmd_train,
    "continue": cmd_continue, "tts": cmd_tts, "analyze": cmd_analyze, "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        overrides = {k: getattr(args, k) for k in _OVERRIDES if hasattr(args, k)}
        cfg = resolve_config(args.command, getattr(args, "config", None), overrides)
        _threads()
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, InputFormatError, GridFormatError, CheckpointError, FileNotFoundError,
            ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
