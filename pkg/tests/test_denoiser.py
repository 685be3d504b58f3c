from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psd.core import SPATIAL, SequenceState, Vocabulary, apply_commits, make_commits, masked_positions
from psd.denoiser import (
    CallCounter,
    CountModel,
    CountModelConfig,
    DenoiserError,
    FrontierOracle,
    FrontierOracleConfig,
    frontier_confidence,
    train_count_model,
)

from suites import count_model, frontier_oracle

V = Vocabulary(6, 5)


def oracle(ref, **kw):
    return FrontierOracle(FrontierOracleConfig(tuple(ref), **kw), V)


def fresh(prompt, n, block_len=None):
    return SequenceState.initial(prompt, n, block_len or n, V.mask_id)


def test_correct_oracle_predicts_reference():
    ref = [1, 2, 3, 4, 0, 1, 2]
    o = oracle(ref, noise=0.0, correctness=1.0)
    pred = o.predict(fresh(ref[:2], 5))
    assert [pred[i].token for i in pred.positions()] == ref[2:]


def test_flat_decay_gives_c_max_everywhere():
    o = oracle([0] * 8, decay=0.0, c_max=0.97)
    assert {p.confidence for p in o.predict(fresh([0], 7)).predictions.values()} == {0.97}


def test_frontier_confidence_arithmetic():
    cfg = FrontierOracleConfig(tuple([0] * 10), c_max=0.99, decay=0.05)
    s = fresh([0], 9)
    assert frontier_confidence(cfg, s, 1) == pytest.approx(0.94)
    assert frontier_confidence(cfg, s, 4) == pytest.approx(0.79)


def test_frontier_confidence_floor():
    cfg = FrontierOracleConfig(tuple([0] * 40), c_max=0.5, decay=0.1, floor=0.1)
    assert frontier_confidence(cfg, fresh([0], 39), 30) == 0.1


def test_frontier_distance_is_bidirectional():
    s = apply_commits(fresh([0], 9), make_commits({8: 1}, SPATIAL))
    cfg = FrontierOracleConfig(tuple([0] * 10), c_max=0.99, decay=0.05)
    assert frontier_confidence(cfg, s, 7) == pytest.approx(0.94)


def test_frontier_confidence_matches_predict_with_noise():
    cfg = FrontierOracleConfig(tuple([0] * 12), noise=0.1, seed=4)
    o = FrontierOracle(cfg, V)
    s = fresh([0, 1], 10)
    pred = o.predict(s)
    for i in pred.positions():
        assert pred[i].confidence == frontier_confidence(cfg, s, i)


def test_wrong_tokens_never_equal_reference():
    ref = [1] * 30
    o = oracle(ref, correctness=0.0)
    pred = o.predict(fresh([1], 29))
    assert all(pred[i].token != 1 for i in pred.positions())


def test_partial_correctness_rejects_some():
    ref = [2] * 200
    o = oracle(ref, correctness=0.7, seed=3)
    pred = o.predict(fresh([2], 199))
    share = np.mean([pred[i].token == 2 for i in pred.positions()])
    assert 0.55 < share < 0.85


def test_empty_query_is_an_error():
    o = oracle([0, 1])
    s = apply_commits(fresh([0], 1), make_commits({1: 1}, SPATIAL))
    with pytest.raises(DenoiserError):
        o.predict(s)


def test_batch_of_one_equals_predict_and_counts_once():
    o = CallCounter(oracle([0, 1, 2, 3], noise=0.05))
    s = fresh([0], 3)
    (b,) = o.predict_batch([s])
    assert b == o.inner.predict(s)
    dup = o.predict_batch([s, s, s, s])
    assert dup[0] == dup[3]
    assert o.calls == 2
    assert o.batch_sizes == [1, 4]


def test_count_model_hand_computed_bigram():
    # documents "a b a b" over ids a=0, b=1, eos=2; alpha=1, weights (.4, .4, .2)
    vocab = Vocabulary(3, 2)
    model = train_count_model(CountModelConfig(order=1, alpha=1.0, weights=(0.4, 0.4, 0.2)), [[0, 1, 0, 1]], vocab)
    state = SequenceState.initial([0], 1, 1, vocab.mask_id)
    pred = model.predict(state)[1]
    # left: P(b | a) = (2 + 1) / (2 + 3); unigram: P(b) = (2 + 1) / (4 + 3); no right context
    w_left, w_uni = Fraction(2, 5) / Fraction(3, 5), Fraction(1, 5) / Fraction(3, 5)
    expect = w_left * Fraction(3, 5) + w_uni * Fraction(3, 7)
    assert pred.token == 1
    assert pred.confidence == pytest.approx(float(expect), abs=1e-12)
    assert float(expect) == pytest.approx(0.5428571428571, abs=1e-12)


def test_count_model_single_symbol_corpus():
    vocab = Vocabulary(2, 1)
    model = train_count_model(CountModelConfig(order=2, alpha=0.001), [[0] * 200], vocab)
    pred = model.predict(SequenceState.initial([0, 0], 3, 3, vocab.mask_id))
    assert all(pred[i].token == 0 and pred[i].confidence > 0.99 for i in pred.positions())


def test_count_model_large_alpha_tends_to_uniform():
    rng = np.random.default_rng(0)
    vocab = Vocabulary(8, 7)
    corpus = [list(rng.integers(0, 7, size=50)) for _ in range(5)]
    model = train_count_model(CountModelConfig(order=2, alpha=1e6), corpus, vocab)
    pred = model.predict(SequenceState.initial([0, 1], 4, 4, vocab.mask_id))
    for i in pred.positions():
        assert pred[i].confidence == pytest.approx(1 / 8, abs=1e-4)


def test_count_model_rejects_mask_in_corpus():
    vocab = Vocabulary(3, 2)
    with pytest.raises(ValueError):
        train_count_model(CountModelConfig(), [[0, 3]], vocab)


def test_count_model_ignores_masks_outside_the_active_block():
    model = count_model()
    vocab = model.vocab
    s = SequenceState.initial([3, 4, 5], 8, 4, vocab.mask_id)
    # filling a later block must not change predictions for the active one
    later = apply_commits(s, make_commits({9: 2}, SPATIAL))
    assert model.predict(s).predictions == model.predict(later).predictions


def test_count_model_round_trip(tmp_path):
    model = count_model()
    model.save(tmp_path / "m.json")
    back = CountModel.load(tmp_path / "m.json")
    s = SequenceState.initial([1, 2, 3], 6, 6, model.vocab.mask_id)
    assert back.predict(s) == model.predict(s)
    assert np.array_equal(back.left, model.left)


def test_count_model_load_rejects_other_versions(tmp_path):
    model = count_model()
    p = tmp_path / "m.json"
    model.save(p)
    p.write_text(p.read_text().replace('"version":1', '"version":9'))
    with pytest.raises(ValueError, match="v9"):
        CountModel.load(p)


@st.composite
def oracle_states(draw):
    n = draw(st.integers(2, 20))
    ref = tuple(draw(st.lists(st.integers(0, 4), min_size=n, max_size=n)))
    cfg = FrontierOracleConfig(
        ref,
        decay=draw(st.floats(0.0, 0.3)),
        noise=draw(st.sampled_from([0.0, 0.05, 0.3])),
        correctness=draw(st.floats(0, 1)),
        seed=draw(st.integers(0, 1000)),
        drift=draw(st.booleans()),
    )
    prompt_len = draw(st.integers(1, n - 1))
    s = fresh(ref[:prompt_len], n - prompt_len)
    masked = masked_positions(s)
    keep = draw(st.lists(st.sampled_from(masked), unique=True, max_size=len(masked) - 1))
    s = apply_commits(s, make_commits({i: ref[i] for i in keep}, SPATIAL))
    return cfg, s


@given(oracle_states())
def test_oracle_is_deterministic_and_in_range(case):
    cfg, s = case
    a = FrontierOracle(cfg, V).predict(s)
    b = FrontierOracle(cfg, V).predict(s)
    assert a == b
    assert set(a.positions()) == set(masked_positions(s))
    for p in a.predictions.values():
        assert 0 < p.confidence <= 1
        assert p.token != V.mask_id


@given(oracle_states())
def test_frontier_ranking_stability(case):
    cfg, s = case
    cfg = FrontierOracleConfig(cfg.reference, decay=max(cfg.decay, 0.01), noise=0.0, floor=0.001)
    from psd.denoiser import frontier_distances

    pred = FrontierOracle(cfg, V).predict(s)
    pos = pred.positions()
    d = dict(zip(pos, frontier_distances(s, pos)))
    for i in pos:
        for j in pos:
            if d[i] < d[j] and pred[j].confidence > cfg.floor:
                assert pred[i].confidence > pred[j].confidence


@given(st.integers(0, 10_000))
def test_count_model_is_deterministic(seed):
    model = count_model()
    rng = np.random.default_rng(seed)
    prompt = [int(t) for t in rng.integers(0, model.vocab.size - 1, size=5)]
    s = SequenceState.initial(prompt, 8, 8, model.vocab.mask_id)
    a, b = model.predict(s), model.predict(s)
    assert a == b
    assert all(0 < p.confidence <= 1 for p in a.predictions.values())


def test_suite_helper_matches_reference():
    o, prompt = frontier_oracle(1, 3, 5)
    assert list(prompt) == list(o.config.reference[:3])
