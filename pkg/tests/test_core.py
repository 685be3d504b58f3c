import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from psd.core import (
    ACTIVE_BLOCK,
    SPATIAL,
    WHOLE_SEQUENCE,
    CommitError,
    SequenceState,
    Vocabulary,
    advance_block_if_complete,
    apply_commits,
    make_commits,
    masked_positions,
)

A, B, C = 0, 1, 2
M = 5  # mask id of a size-5 vocabulary


def state(tokens, prompt_len=0, block_len=None, active=0):
    return SequenceState(tuple(tokens), prompt_len, block_len or len(tokens) - prompt_len, M, active)


def test_vocabulary_mask_is_one_past_the_end():
    v = Vocabulary(5, 4)
    assert v.mask_id == 5


@pytest.mark.parametrize("size,eos", [(1, 0), (4, 4), (4, -1)])
def test_vocabulary_rejects_bad_shapes(size, eos):
    with pytest.raises(ValueError):
        Vocabulary(size, eos)


def test_masked_positions_active_block():
    s = state([A, B, M, M], prompt_len=2, block_len=2)
    assert masked_positions(s) == [2, 3]


def test_masked_positions_complete_block_is_empty():
    s = state([A, B, C, A], prompt_len=2, block_len=2)
    assert masked_positions(s) == []


def test_masked_positions_whole_sequence():
    s = state([A, M, B, M], prompt_len=1, block_len=3)
    assert masked_positions(s, WHOLE_SEQUENCE) == [1, 3]


def test_masked_positions_unknown_scope():
    with pytest.raises(ValueError):
        masked_positions(state([M]), "somewhere")


def test_apply_empty_is_identity():
    s = state([A, M, M])
    assert apply_commits(s, {}) == s


def test_apply_single_and_parallel():
    s = state([A, M, M], prompt_len=1)
    assert apply_commits(s, make_commits({1: B}, SPATIAL)).tokens == (A, B, M)
    s2 = state([M, M])
    assert apply_commits(s2, make_commits({0: A, 1: B}, SPATIAL)).tokens == (A, B)


def test_apply_does_not_touch_step():
    s = state([M, M])
    assert apply_commits(s, make_commits({0: A}, SPATIAL)).step == s.step


def test_apply_to_unmasked_position_is_an_error():
    with pytest.raises(CommitError):
        apply_commits(state([A, M]), make_commits({0: B}, SPATIAL))


def test_apply_mask_token_is_an_error():
    with pytest.raises(CommitError):
        apply_commits(state([M, M]), make_commits({0: M}, SPATIAL))


def test_advance_complete_block():
    s = SequenceState.initial([A], 4, 2, M)
    s = apply_commits(s, make_commits({1: A, 2: B}, SPATIAL))
    nxt = advance_block_if_complete(s)
    assert nxt.active_block == 1
    assert masked_positions(nxt) == [3, 4]


def test_advance_incomplete_block_unchanged():
    s = apply_commits(SequenceState.initial([A], 4, 2, M), make_commits({1: A}, SPATIAL))
    assert advance_block_if_complete(s) == s


def test_last_block_sets_finished():
    s = apply_commits(SequenceState.initial([A], 2, 2, M), make_commits({1: A, 2: B}, SPATIAL))
    done = advance_block_if_complete(s)
    assert done.finished
    assert masked_positions(done) == []


def test_block_grid_excludes_prompt_and_clips_tail():
    s = SequenceState.initial([A, B, C], 5, 2, M)
    assert s.num_blocks == 3
    assert [s.block_span(b) for b in range(3)] == [(3, 5), (5, 7), (7, 8)]
    assert s.block_of(6) == 1


def test_initial_rejects_mask_in_prompt():
    with pytest.raises(ValueError):
        SequenceState.initial([M], 2, 2, M)


@st.composite
def states_and_commits(draw):
    n = draw(st.integers(1, 12))
    toks = draw(st.lists(st.sampled_from([A, B, C, M]), min_size=n, max_size=n))
    s = SequenceState(tuple(toks), 0, n, M)
    masked = [i for i, t in enumerate(toks) if t == M]
    chosen = draw(st.lists(st.sampled_from(masked), unique=True)) if masked else []
    commits = {i: draw(st.sampled_from([A, B, C])) for i in chosen}
    return s, commits


@given(states_and_commits(), st.randoms())
def test_apply_is_order_independent(case, rnd):
    s, commits = case
    items = list(commits.items())
    rnd.shuffle(items)
    assert apply_commits(s, make_commits(dict(items), SPATIAL)) == apply_commits(s, make_commits(commits, SPATIAL))


@given(states_and_commits())
def test_committed_positions_are_never_masked(case):
    s, commits = case
    after = apply_commits(s, make_commits(commits, SPATIAL))
    assert not set(commits) & set(masked_positions(after, WHOLE_SEQUENCE))
    for i, t in enumerate(s.tokens):
        if i not in commits:
            assert after.tokens[i] == t


@given(st.integers(1, 5), st.integers(1, 20), st.integers(1, 6), st.integers(0, 2**16))
def test_advance_idempotent_when_incomplete(prompt_len, n_new, block_len, seed):
    rng = random.Random(seed)
    s = SequenceState.initial([A] * prompt_len, n_new, block_len, M)
    lo, hi = s.block_span()
    keep = rng.randrange(lo, hi)
    fill = {i: B for i in range(lo, hi) if i != keep and rng.random() < 0.7}
    s = apply_commits(s, make_commits(fill, SPATIAL))
    once = advance_block_if_complete(s)
    assert once == s
    assert advance_block_if_complete(once) == once


@given(st.integers(0, 4), st.integers(1, 20), st.integers(1, 6))
def test_block_invariants_through_a_full_decode(prompt_len, n_new, block_len):
    s = SequenceState.initial([A] * prompt_len, n_new, block_len, M)
    while not s.finished:
        lo, hi = s.block_span()
        assert all(t != M for t in s.tokens[:lo])
        assert all(t == M for t in s.tokens[hi:])
        s = advance_block_if_complete(apply_commits(s, make_commits({masked_positions(s, ACTIVE_BLOCK)[0]: C}, SPATIAL)))
    assert M not in s.tokens
