import math

import numpy as np
import pytest

from jmlab.alignment import ManifestRow, prepare_dialogue, write_manifest
from jmlab.eval_harness import (
    BigramLM, EvalConfig, chunk_dialogues, chunk_grid, corpus_sequences, decode_channels,
    load_manifest_grids, mock_lm_train, ppl, run_experiment, score_grids, shuffled_ppl,
)
from jmlab.rq_model import ModelConfig, init_model, random_grid
from jmlab.synthetic import write_corpus
from jmlab.token_grid import Channel, TokenGrid, apply_delays, remove_delays, save_grid, seconds_to_frames
from jmlab.turn_taking import activity_from_grid, analyze


def plain_grid(schema, seconds, rng):
    return random_grid(schema, int(seconds * 12.5), rng, delayed=False)


def test_chunk_counts(schema, rng):
    assert len(chunk_grid(plain_grid(schema, 95, rng))) == 3
    assert len(chunk_grid(plain_grid(schema, 29, rng))) == 0
    c = chunk_grid(apply_delays(plain_grid(schema, 31, rng)))[0]
    assert (c.prompt.length, c.reference.length) == (125, 250)
    assert c.prompt.delayed and not c.reference.delayed


def test_chunk_contents(schema, rng):
    g = plain_grid(schema, 61, rng)
    chunks = chunk_grid(apply_delays(g))
    # reference frames come from the undelayed dialogue
    assert np.array_equal(chunks[1].reference.tokens, g.tokens[375 + 125:750])
    # prompt is the window re-delayed from its own start
    window = TokenGrid(schema, g.tokens[375:500])
    assert np.array_equal(chunks[1].prompt.tokens, apply_delays(window).tokens)


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(prompt_s=30.0)
    with pytest.raises(ValueError):
        EvalConfig(temperatures=(0.8, -1.0))
    cfg = EvalConfig()
    assert (cfg.chunk_frames, cfg.prompt_frames) == (375, 125)


def test_chunker_accounting_on_manifest(tmp_path, schema):
    durations = [95.0, 29.0, 60.0, 59.99, 30.0, 120.04, 89.97]
    rows = []
    for i, d in enumerate(durations):
        diar, tr = tmp_path / f"d{i}.tsv", tmp_path / f"t{i}.tsv"
        diar.write_text(f"A\t0.0\t1.0\nB\t2.0\t{d}\n")
        tr.write_text("A\t0.1\t3\n")
        grid, _, duration = prepare_dialogue(diar, tr, schema, seed=i)
        assert duration == d
        save_grid(grid, tmp_path / f"g{i}.jmgr")
        rows.append(ManifestRow(f"g{i}", f"g{i}.jmgr", d, "test"))
    write_manifest(rows, tmp_path / "m.tsv")
    chunks = chunk_dialogues(load_manifest_grids(tmp_path / "m.tsv", "test"))
    assert len(chunks) == sum(math.floor(d / 30) for d in durations)
    assert all(c.prompt.length == 125 and c.reference.length == 250 for c in chunks)


# perplexity and the mock LM

def test_ppl_identities():
    assert ppl(0.0, 5) == 1.0
    assert ppl(10 * math.log(7), 10) == pytest.approx(7.0, rel=1e-12)
    with pytest.raises(ValueError):
        ppl(1.0, 0)


def test_bigram_hand_computed():
    lm = mock_lm_train([[0, 1], [0, 2], [1]], vocab_size=3)
    nll, n = lm.score([0, 1])
    # P(0|BOS) = 3/6, P(1|0) = 2/5
    assert abs(ppl(nll, n) - math.sqrt(5)) <= 1e-9
    nll, n = lm.score([2, 2, 0])
    expected = -(math.log(1 / 6) + math.log(1 / 3) + math.log(1 / 3))
    assert abs(nll - expected) <= 1e-12 and n == 3


def test_bigram_normalized(rng):
    lm = mock_lm_train([rng.integers(0, 6, size=30).tolist() for _ in range(5)], vocab_size=6)
    for prev in [-1] + list(range(6)):
        assert sum(lm.prob(prev, t) for t in range(6)) == pytest.approx(1.0, abs=1e-12)


def test_uniform_lm_ppl_is_vocab():
    lm = BigramLM(9)  # untrained add-one model is uniform
    nll, n = lm.score([1, 5, 2, 2, 8])
    assert ppl(nll, n) == pytest.approx(9.0, rel=1e-12)


def test_repeated_token_corpus():
    seq = [4] * 1000
    lm = mock_lm_train([seq], vocab_size=4)
    assert ppl(*lm.score(seq)) < 1.01
    with pytest.raises(ValueError):
        mock_lm_train([[], []], vocab_size=4)


def markov_corpus(rng, n_seq, length, V=8):
    P = rng.dirichlet(np.full(V, 0.3), size=V)
    return [list(_walk(rng, P, length)) for _ in range(n_seq)], P


def _walk(rng, P, length):
    x = int(rng.integers(len(P)))
    for _ in range(length):
        x = int(rng.choice(len(P), p=P[x]))
        yield x


def test_held_out_ppl_not_below_training():
    rng = np.random.default_rng(3)
    diffs = []
    for _ in range(30):
        P = rng.dirichlet(np.full(8, 0.3), size=8)
        train = [list(_walk(rng, P, 40)) for _ in range(5)]
        held = [list(_walk(rng, P, 40)) for _ in range(5)]
        lm = mock_lm_train(train, 8)
        score = lambda seqs: ppl(*map(sum, zip(*(lm.score(s) for s in seqs))))
        diffs.append(score(held) - score(train))
    diffs = np.array(diffs)
    assert diffs.mean() >= -3 * diffs.std(ddof=1) / math.sqrt(len(diffs))
    assert diffs.mean() > 0


def test_reference_text_beats_random_text():
    rng = np.random.default_rng(5)
    corpus, _ = markov_corpus(rng, 20, 60)
    lm = mock_lm_train(corpus, 8)
    ref = ppl(*map(sum, zip(*(lm.score(s) for s in corpus))))
    rand = [ppl(*lm.score(rng.integers(0, 8, size=60 * 20).tolist())) for _ in range(10)]
    assert ref <= np.mean(rand) - 3 * np.std(rand)


# experiment

@pytest.fixture(scope="module")
def corpus_grids(tmp_path_factory):
    from jmlab.token_grid import build_schema
    schema = build_schema("dialogue", 32, 40, 8)
    out = tmp_path_factory.mktemp("corpus")
    write_corpus(out, 3, 65.0, seed=2)
    grids = []
    for i in range(3):
        name = f"dlg{i:04d}.tsv"
        g, _, _ = prepare_dialogue(out / "diarization" / name, out / "transcripts" / name, schema, seed=i)
        grids.append((f"dlg{i:04d}", g))
    return schema, grids


@pytest.fixture(scope="module")
def tiny_state(corpus_grids):
    schema, _ = corpus_grids
    return init_model(ModelConfig(schema, d_model=8, n_heads=2, temporal_layers=1, depth_layers=1,
                                  max_frames=375, seed=4))


def test_run_experiment_rows_and_determinism(corpus_grids, tiny_state):
    schema, grids = corpus_grids
    chunks = chunk_dialogues(grids)
    lm = mock_lm_train(corpus_sequences(g for _, g in grids), 32)
    cfg = EvalConfig(seed=9, batch_size=4)
    a = run_experiment(tiny_state, chunks, cfg, lm, keep_grids=True)
    assert [r.label for r in a.rows] == ["0.8", "0.9", "1", "ref"]
    tsv = a.to_tsv()
    header = tsv.splitlines()[0].split("\t")
    assert header == ["tau", "n_samples", "mean_ppl", "ipu_s_per_min", "pause_s_per_min", "gap_s_per_min",
                      "overlap_s_per_min"]
    assert all(len(row.split("\t")) == 7 for row in tsv.splitlines())
    assert a.row("0.8").n_samples == len(chunks) == 6
    assert all(g.length == 250 and not g.delayed for g in a.generated[0.8])
    b = run_experiment(tiny_state, chunks, cfg, lm)
    assert b.to_tsv() == tsv
    # batch size does not change results
    c = run_experiment(tiny_state, chunks, EvalConfig(seed=9, batch_size=64), lm)
    assert c.to_tsv() == tsv


def test_reference_rows_match_direct_scoring(corpus_grids, tiny_state):
    _, grids = corpus_grids
    chunks = chunk_dialogues(grids)
    lm = mock_lm_train(corpus_sequences(g for _, g in grids), 32)
    rep = run_experiment(tiny_state, chunks, EvalConfig(temperatures=(1.0,)), lm)
    ref = rep.row("ref")
    assert math.isfinite(ref.mean_ppl)
    direct = [analyze(activity_from_grid(c.reference, Channel.SELF), activity_from_grid(c.reference, Channel.USER),
                      20.0) for c in chunks]
    assert ref.turn_taking.overlap_s_per_min == pytest.approx(np.mean([r.overlap_s_per_min for r in direct]))
    assert ref.turn_taking.pause_s_per_min == pytest.approx(np.mean([r.pause_s_per_min for r in direct]))


def test_experiment_errors(corpus_grids, tiny_state):
    _, grids = corpus_grids
    with pytest.raises(ValueError):
        run_experiment(tiny_state, [], EvalConfig(), BigramLM(32))
    with pytest.raises(ValueError):
        run_experiment(tiny_state, chunk_dialogues(grids), EvalConfig(), None)


def test_shuffled_noise_is_worse(corpus_grids):
    _, grids = corpus_grids
    plain = [remove_delays(g) for _, g in grids]
    lm = mock_lm_train(corpus_sequences(plain), 32)
    real = score_grids("ref", plain, lm)
    assert shuffled_ppl(plain, lm, seed=0) > real.mean_ppl
    assert shuffled_ppl(plain, lm, seed=0) == shuffled_ppl(plain, lm, seed=0)


def test_decode_channels_requires_plain(corpus_grids):
    _, grids = corpus_grids
    with pytest.raises(ValueError):
        decode_channels(grids[0][1])
