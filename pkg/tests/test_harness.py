"""Tests for evaluation, model selection, sweeps, and report output."""

from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from relfuse.backends import ModelBackend
from relfuse.errors import ArgumentError, ConfigError
from relfuse.fusion import EnsembleConfig
from relfuse.harness import (
    DEFAULT_ETA_GRID,
    REPORT_HEADER,
    EvalItem,
    ReportRow,
    ablate_normalization,
    build_setup,
    evaluate,
    load_dataset,
    run_report,
    save_dataset,
    select_main_model,
    sweep_anchor_count,
    sweep_eta,
    sweep_steps,
    write_report,
)
from relfuse.relspace import EmbeddingTable
from relfuse.vocab import Vocabulary


class ChainModel(ModelBackend):
    """Next distribution keyed on the last context token (test helper)."""

    def __init__(self, vocabulary, embeddings, by_last, default, name):
        self.name = name
        self.vocabulary = vocabulary
        self.embeddings = embeddings
        self._by_last = {
            k: np.asarray(v, dtype=np.float64) for k, v in by_last.items()
        }
        self._default = np.asarray(default, dtype=np.float64)

    def next_distribution(self, context_ids):
        from relfuse.fusion import AbsoluteDistribution

        key = context_ids[-1] if context_ids else None
        values = self._by_last.get(key, self._default)
        return AbsoluteDistribution(values.copy())


CHARS = "abcd"


def _vocab():
    return Vocabulary.from_raw(list(CHARS), "plain", name="chars")


def _embeddings(vocab, seed=5):
    rng = np.random.default_rng(seed)
    return EmbeddingTable(rng.normal(size=(vocab.size, vocab.size)))


def _peaked(size, hot, p=0.9):
    values = np.full(size, (1.0 - p) / (size - 1))
    values[hot] = p
    return values


def _successor_model(vocab, emb, name="succ", p=0.9):
    """After token t, put mass p on token (t + 1) mod V."""
    size = vocab.size
    by_last = {t: _peaked(size, (t + 1) % size, p) for t in range(size)}
    return ChainModel(vocab, emb, by_last, _peaked(size, 0, p), name)


def _uniform_model(vocab, emb, name="flat"):
    size = vocab.size
    return ChainModel(vocab, emb, {}, np.full(size, 1.0 / size), name)


def _setup(models, dev=None, **kw):
    kw.setdefault("config", EnsembleConfig(eta=0.1, steps=5))
    kw.setdefault("max_tokens", 4)
    return build_setup(models, dev_items=dev, **kw)


# ---------------------------------------------------------------- items


def test_eval_item_validation():
    with pytest.raises(ArgumentError):
        EvalItem(kind="em", prompt="p")  # no answer
    with pytest.raises(ArgumentError):
        EvalItem(kind="mc", prompt="p", options=("only",), gold=0)
    with pytest.raises(ArgumentError):
        EvalItem(kind="mc", prompt="p", options=("x", "y"), gold=2)
    with pytest.raises(ArgumentError):
        EvalItem(kind="mc", prompt="p", options=("x", ""), gold=0)
    with pytest.raises(ArgumentError):
        EvalItem(kind="zz", prompt="p", answer="a")
    EvalItem(kind="em", prompt="p", answer="a")
    EvalItem(kind="mc", prompt="p", options=("x", "y"), gold=1)


def test_dataset_round_trip(tmp_path):
    items = [
        EvalItem(kind="em", prompt="ab", answer="cd"),
        EvalItem(kind="mc", prompt="a", options=("b", "c", "d"), gold=2),
    ]
    path = tmp_path / "data.jsonl"
    save_dataset(items, path)
    loaded = load_dataset(path)
    assert loaded == items


def test_dataset_bad_record_reports_line(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text('{"kind": "em", "prompt": "x", "answer": "y"}\n{"kind": "em"}\n')
    with pytest.raises(ConfigError) as exc:
        load_dataset(path)
    assert "line 2" in str(exc.value)


def test_dataset_empty_is_fatal(tmp_path):
    path = tmp_path / "data.jsonl"
    path.write_text("\n")
    with pytest.raises(ConfigError):
        load_dataset(path)


# ------------------------------------------------------------- evaluate


def test_evaluate_em_trims_whitespace():
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [
        _successor_model(vocab, emb, "m0"),
        _successor_model(vocab, emb, "m1"),
    ]
    setup = _setup(models, config=EnsembleConfig(eta=0.1, steps=5, main=0),
                   max_tokens=2)
    # successor chain: "ab" continues "cd"
    items = [
        EvalItem(kind="em", prompt="ab", answer="  cd  "),
        EvalItem(kind="em", prompt="ab", answer="cd"),
    ]
    assert evaluate(setup, items) == 1.0


def test_evaluate_em_counts_misses():
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [_successor_model(vocab, emb, "m0")]
    setup = _setup(models, config=EnsembleConfig(main=0), max_tokens=2)
    items = [
        EvalItem(kind="em", prompt="ab", answer="cd"),
        EvalItem(kind="em", prompt="ab", answer="dd"),
    ]
    assert evaluate(setup, items) == 0.5


def test_evaluate_failure_counts_incorrect_and_logs(caplog):
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [_successor_model(vocab, emb, "m0")]
    setup = _setup(models, config=EnsembleConfig(main=0), max_tokens=2)
    items = [
        EvalItem(kind="em", prompt="zzz", answer="cd"),  # untokenizable
        EvalItem(kind="em", prompt="ab", answer="cd"),
    ]
    with caplog.at_level(logging.WARNING, logger="relfuse.harness"):
        accuracy = evaluate(setup, items)
    assert accuracy == 0.5
    assert any("counted incorrect" in r.message for r in caplog.records)


def test_evaluate_rejects_empty_items():
    vocab = _vocab()
    emb = _embeddings(vocab)
    setup = _setup([_successor_model(vocab, emb)], config=EnsembleConfig(main=0))
    with pytest.raises(ArgumentError):
        evaluate(setup, [])


def test_evaluate_mc_picks_likeliest_option():
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [_successor_model(vocab, emb, "m0", p=0.9)]
    setup = _setup(models, config=EnsembleConfig(main=0))
    # after "a" the successor model wants "b"
    good = EvalItem(kind="mc", prompt="a", options=("b", "d"), gold=0)
    bad = EvalItem(kind="mc", prompt="a", options=("b", "d"), gold=1)
    assert evaluate(setup, [good]) == 1.0
    assert evaluate(setup, [bad]) == 0.0


def test_evaluate_mc_length_normalization_flips_choice():
    # Option "b" has probability 0.4; option "cc" costs 0.5 per step.
    # Summed log-likelihoods prefer "b" (-0.916 vs -1.386); the mean
    # per-token score prefers "cc" (-0.916 vs -0.693).
    vocab = _vocab()
    emb = _embeddings(vocab)
    a, b, c, d = range(4)
    by_last = {
        a: np.array([0.05, 0.4, 0.5, 0.05]),
        c: np.array([0.2, 0.2, 0.5, 0.1]),
    }
    model = ChainModel(vocab, emb, by_last, np.full(4, 0.25), "m0")
    setup = _setup([model], config=EnsembleConfig(main=0))
    item = EvalItem(kind="mc", prompt="a", options=("b", "cc"), gold=1)
    assert evaluate(setup, [item]) == 1.0


def test_evaluate_mc_tie_goes_to_first_option():
    vocab = _vocab()
    emb = _embeddings(vocab)
    a = 0
    by_last = {a: np.array([0.1, 0.4, 0.4, 0.1])}
    model = ChainModel(vocab, emb, by_last, np.full(4, 0.25), "m0")
    setup = _setup([model], config=EnsembleConfig(main=0))
    item = EvalItem(kind="mc", prompt="a", options=("b", "c"), gold=0)
    assert evaluate(setup, [item]) == 1.0


def test_evaluate_solo_model_path():
    vocab = _vocab()
    emb = _embeddings(vocab)
    right = _successor_model(vocab, emb, "right")
    wrong = _uniform_model(vocab, emb, "wrong")
    setup = _setup([wrong, right], config=EnsembleConfig(main=0), max_tokens=2)
    items = [EvalItem(kind="em", prompt="ab", answer="cd")]
    assert evaluate(setup, items, model=1) == 1.0
    # the uniform model resolves ties toward id 0 ("a"), never "cd"
    assert evaluate(setup, items, model=0) == 0.0


# ----------------------------------------------------- main model choice


def test_select_main_model_prefers_better_dev_accuracy():
    vocab = _vocab()
    emb = _embeddings(vocab)
    dev = [EvalItem(kind="em", prompt="ab", answer="cd")]
    flat = _uniform_model(vocab, emb, "flat")
    succ = _successor_model(vocab, emb, "succ")
    setup = _setup([flat, succ], config=EnsembleConfig(main=0), max_tokens=2)
    assert select_main_model(setup, dev) == 1
    setup_rev = _setup([succ, flat], config=EnsembleConfig(main=0), max_tokens=2)
    assert select_main_model(setup_rev, dev) == 0


def test_select_main_model_tie_takes_lowest_index():
    vocab = _vocab()
    emb = _embeddings(vocab)
    dev = [EvalItem(kind="em", prompt="ab", answer="cd")]
    m0 = _successor_model(vocab, emb, "m0")
    m1 = _successor_model(vocab, emb, "m1")
    setup = _setup([m0, m1], config=EnsembleConfig(main=0), max_tokens=2)
    assert select_main_model(setup, dev) == 0


def test_build_setup_auto_main_uses_dev_items():
    vocab = _vocab()
    emb = _embeddings(vocab)
    dev = [EvalItem(kind="em", prompt="ab", answer="cd")]
    flat = _uniform_model(vocab, emb, "flat")
    succ = _successor_model(vocab, emb, "succ")
    setup = build_setup(
        [flat, succ],
        config=EnsembleConfig(main="auto"),
        dev_items=dev,
        max_tokens=2,
    )
    assert setup.main == 1


def test_build_setup_auto_main_without_dev_is_fatal():
    vocab = _vocab()
    emb = _embeddings(vocab)
    with pytest.raises(ArgumentError):
        build_setup([_successor_model(vocab, emb)], config=EnsembleConfig(main="auto"))


def test_build_setup_validation():
    vocab = _vocab()
    emb = _embeddings(vocab)
    with pytest.raises(ArgumentError):
        build_setup([])
    with pytest.raises(ArgumentError):
        build_setup(
            [_successor_model(vocab, emb)], config=EnsembleConfig(main=3)
        )
    bare = ChainModel(vocab, None, {}, np.full(4, 0.25), "bare")
    with pytest.raises(ArgumentError) as exc:
        build_setup([bare], config=EnsembleConfig(main=0))
    assert "embedding" in str(exc.value)


# ----------------------------------------------------------------- sweeps


def test_sweep_eta_rows_and_tie_breaking():
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [
        _successor_model(vocab, emb, "m0"),
        _successor_model(vocab, emb, "m1"),
    ]
    dev = [EvalItem(kind="em", prompt="ab", answer="cd")]
    setup = _setup(models, config=EnsembleConfig(main=0), max_tokens=2)
    rows, best = sweep_eta(setup, dev)
    assert [row.eta for row in rows] == list(DEFAULT_ETA_GRID)
    assert all(row.condition == "sweep-eta" for row in rows)
    # identical copies agree at every step size, so the tie resolves down
    assert best == 0.0
    with pytest.raises(ArgumentError):
        sweep_eta(setup, dev, grid=())
    with pytest.raises(ArgumentError):
        sweep_eta(setup, dev, grid=(-0.1,))


def test_sweep_eta_unordered_grid_tie_takes_smallest_value():
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [_successor_model(vocab, emb, "m0")]
    dev = [EvalItem(kind="em", prompt="ab", answer="cd")]
    setup = _setup(models, config=EnsembleConfig(main=0), max_tokens=2)
    _, best = sweep_eta(setup, dev, grid=(0.3, 0.1, 0.2))
    assert best == 0.1


def test_sweep_steps_rows():
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [_successor_model(vocab, emb, "m0")]
    dev = [EvalItem(kind="em", prompt="ab", answer="cd")]
    setup = _setup(models, config=EnsembleConfig(main=0), max_tokens=2)
    rows, best = sweep_steps(setup, dev, (5, 0, 2))
    assert [row.steps for row in rows] == [5, 0, 2]
    assert best == 0  # single model ties everywhere; smallest budget wins
    with pytest.raises(ArgumentError):
        sweep_steps(setup, dev, ())


def test_sweep_anchor_count_rebuilds_and_appends_full():
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [
        _successor_model(vocab, emb, "m0"),
        _successor_model(vocab, emb, "m1"),
    ]
    dev = [EvalItem(kind="em", prompt="ab", answer="cd")]
    setup = _setup(models, config=EnsembleConfig(main=0), max_tokens=2)
    rows = sweep_anchor_count(setup, dev, (2, 3))
    assert [row.anchors for row in rows] == ["sample:2", "sample:3", "full"]
    assert all(row.condition == "sweep-anchors" for row in rows)
    with pytest.raises(ArgumentError):
        sweep_anchor_count(setup, dev, (99,))


def test_with_anchors_actually_shrinks_matrices():
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [
        _successor_model(vocab, emb, "m0"),
        _successor_model(vocab, emb, "m1"),
    ]
    setup = _setup(models, config=EnsembleConfig(main=0))
    derived = setup.with_anchors("sample", 2, seed=0)
    assert len(derived.anchor_set.anchors) == 2
    assert derived.matrices[0].values.shape == (vocab.size, 2)
    assert derived.matrices[0].normalized
    assert derived.raw_matrices[0].normalized is False
    assert derived.anchors_label == "sample:2"
    # the original is untouched
    assert setup.matrices[0].values.shape == (vocab.size, vocab.size)


# --------------------------------------------------------------- ablation


def test_ablate_normalization_runs_both_arms():
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [
        _successor_model(vocab, emb, "m0"),
        _successor_model(vocab, emb, "m1"),
    ]
    dev = [EvalItem(kind="em", prompt="ab", answer="cd")]
    setup = _setup(models, config=EnsembleConfig(main=0), max_tokens=2)
    rows, normalized, raw = ablate_normalization(setup, dev)
    assert [row.condition for row in rows] == ["ablate-norm", "ablate-raw"]
    assert rows[0].accuracy == normalized
    assert rows[1].accuracy == raw
    assert 0.0 <= normalized <= 1.0
    assert 0.0 <= raw <= 1.0


# ---------------------------------------------------------------- reports


def test_run_report_rows_and_delta():
    vocab = _vocab()
    emb = _embeddings(vocab)
    succ0 = _successor_model(vocab, emb, "s0")
    succ1 = _successor_model(vocab, emb, "s1")
    dev = [EvalItem(kind="em", prompt="ab", answer="cd")]
    test = [EvalItem(kind="em", prompt="bc", answer="da")]
    setup = _setup([succ0, succ1], config=EnsembleConfig(main=0), max_tokens=2)
    rows = run_report(setup, dev, test)
    conditions = [(row.condition, row.split, row.model) for row in rows]
    assert conditions == [
        ("individual", "dev", "s0"),
        ("individual", "dev", "s1"),
        ("individual", "test", "s0"),
        ("individual", "test", "s1"),
        ("ensemble", "dev", "ensemble"),
        ("ensemble", "test", "ensemble"),
    ]
    for row in rows[:4]:
        assert row.delta is None
    dev_best = max(rows[0].accuracy, rows[1].accuracy)
    assert rows[4].delta == pytest.approx(rows[4].accuracy - dev_best)
    # identical copies: the ensemble matches the best individual exactly
    assert rows[4].delta == pytest.approx(0.0)


def test_run_report_is_deterministic():
    vocab = _vocab()
    emb = _embeddings(vocab)
    models = [
        _successor_model(vocab, emb, "m0"),
        _uniform_model(vocab, emb, "m1"),
    ]
    dev = [EvalItem(kind="em", prompt="ab", answer="cd")]
    test = dev
    setup = _setup(models, config=EnsembleConfig(main=0), max_tokens=2)
    assert run_report(setup, dev, test) == run_report(setup, dev, test)


def test_write_report_exact_bytes(tmp_path):
    rows = [
        ReportRow("individual", "dev", "m0", 0.5, None, 0.1, 5, "full", 7),
        ReportRow("ensemble", "dev", "ensemble", 0.75, 0.25, 0.05, 5, "sample:8", 7),
        ReportRow("sweep-eta", "dev", "ensemble", 1.0, None, 0.0, 5, "full", 7),
    ]
    path = tmp_path / "report.csv"
    write_report(rows, path)
    expected = (
        "condition,split,model,accuracy,delta,eta,steps,anchors,seed\n"
        "individual,dev,m0,0.500000,,0.1,5,full,7\n"
        "ensemble,dev,ensemble,0.750000,0.250000,0.05,5,sample:8,7\n"
        "sweep-eta,dev,ensemble,1.000000,,0,5,full,7\n"
    )
    assert path.read_text() == expected
    assert ",".join(REPORT_HEADER) == expected.split("\n")[0]


def test_mc_scores_match_hand_computation():
    # single model, peaked rows: scores are plain average log probabilities
    vocab = _vocab()
    emb = _embeddings(vocab)
    a = 0
    by_last = {a: np.array([0.1, 0.6, 0.3, 0.0])}
    # zero probability is floored at 1e-12 inside score_option
    model = ChainModel(vocab, emb, by_last, np.full(4, 0.25), "m0")
    setup = _setup([model], config=EnsembleConfig(main=0))
    from relfuse.harness import _score_mc_item

    session = setup.ensemble_session()
    item = EvalItem(kind="mc", prompt="a", options=("b", "c", "d"), gold=0)
    assert _score_mc_item(session, item) == 0
    session = setup.ensemble_session()
    scores = []
    for option, prob in (("b", 0.6), ("c", 0.3), ("d", 1e-12)):
        fresh = setup.ensemble_session()
        from relfuse.decode import score_option

        scores.append(score_option(fresh, "a", option))
    assert scores[0] == pytest.approx(math.log(0.6), abs=1e-9)
    assert scores[1] == pytest.approx(math.log(0.3), abs=1e-9)
    assert scores[2] == pytest.approx(math.log(1e-12), abs=1e-6)
