import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import exhaustive_calibration, expected_deepest, family
from psd.core import SPATIAL, SequenceState, apply_commits, make_commits
from psd.denoiser import DenoiserOutput, Prediction
from psd.draftgraph import (
    DraftGraph,
    GraphError,
    TopologyConfig,
    assemble_drafts,
    build_topology,
    calibrate_from_rates,
    calibrate_topology,
    expected_accepted_ranks,
    root_only,
    speculative_ordering,
)

A, B, C, D = 0, 1, 2, 3
M = 6


def cached(confs, tokens=None):
    tokens = tokens or {}
    return DenoiserOutput({p: Prediction(p, tokens.get(p, 0), c) for p, c in confs.items()}, "")


def test_ordering_sorts_by_confidence_leftmost_on_ties():
    s = SequenceState((A,) * 4 + (M, A, M, A, A, M), 4, 6, M)
    sig = speculative_ordering(s, cached({4: 0.6, 6: 0.8, 9: 0.6}))
    assert sig.sigma == (6, 4, 9)
    assert sig.m == 3


def test_ordering_singleton():
    s = SequenceState((A, M), 1, 1, M)
    assert speculative_ordering(s, cached({1: 0.3})).sigma == (1,)


def test_ordering_follows_frontier_distance_on_clean_oracle():
    from suites import frontier_oracle

    o, prompt = frontier_oracle(0, 3, 8, decay=0.05)
    s = SequenceState.initial(prompt, 8, 8, o.vocab.mask_id)
    s = apply_commits(s, make_commits({10: 1}, SPATIAL))
    sig = speculative_ordering(s, o.predict(s))
    dist = [min(i - 2, 10 - i) for i in sig.sigma]
    assert dist == sorted(dist)


def test_chain_topologies():
    g1 = build_topology(TopologyConfig(depth=1))
    assert g1.nodes == (frozenset(), frozenset({1}))
    assert g1.edges == ((0, 1),)
    g3 = build_topology(TopologyConfig(depth=3))
    assert g3.K == 4
    assert g3.edges == ((0, 1), (1, 2), (2, 3))


def test_depth_zero_is_root_only():
    assert build_topology(TopologyConfig(depth=0)) == root_only()


def test_skip_sibling_edges_match_strict_inclusion():
    g = build_topology(TopologyConfig(depth=2, branch=1))
    idx = {s: k for k, s in enumerate(g.nodes)}
    skip, c2 = frozenset({2}), frozenset({1, 2})
    assert skip in idx
    assert (idx[frozenset()], idx[skip]) in g.edges
    assert (idx[skip], idx[c2]) in g.edges
    # brute force: every edge of the family is a strict inclusion
    for p, k in g.edges:
        assert g.nodes[p] < g.nodes[k]


def test_budget_truncates_breadth_first():
    g = build_topology(TopologyConfig(depth=5, budget=3))
    assert g.nodes == (frozenset(), frozenset({1}), frozenset({1, 2}))


def test_graph_validation():
    with pytest.raises(GraphError):
        DraftGraph((frozenset({1}),), ())
    with pytest.raises(GraphError):
        DraftGraph((frozenset(), frozenset({1})), ())  # orphan
    with pytest.raises(GraphError):
        DraftGraph((frozenset(), frozenset({1}), frozenset({2})), ((0, 1), (1, 2)))  # not a superset


def test_text_round_trip_and_version_check():
    g = build_topology(TopologyConfig(depth=3, branch=2))
    assert DraftGraph.from_text(g.to_text()) == g
    assert DraftGraph.from_json(g.to_json()) == g
    with pytest.raises(GraphError, match="version"):
        DraftGraph.from_text(g.to_text().replace("psd-draft-graph 1", "psd-draft-graph 2"))


def test_assemble_root_is_post_state():
    post = SequenceState((A, M, M, B), 0, 4, M)
    (root,) = assemble_drafts(post, (1, 2), cached({1: 0.9, 2: 0.8}), root_only())
    assert root.tokens == post.tokens
    assert root.filled == {}


def test_assemble_single_rank():
    post = SequenceState((A, M, M, B), 0, 4, M)
    g = build_topology(TopologyConfig(depth=1))
    drafts = assemble_drafts(post, (1, 2), cached({1: 0.9, 2: 0.8}, {1: C, 2: D}), g)
    assert drafts[1].tokens == (A, C, M, B)


def test_assemble_drops_ranks_beyond_m():
    post = SequenceState((A, M), 0, 2, M)
    g = build_topology(TopologyConfig(depth=3))
    drafts = assemble_drafts(post, (1,), cached({1: 0.9}), g)
    assert [d.ranks for d in drafts] == [frozenset(), frozenset({1})]


def test_truncate_merges_and_keeps_a_valid_dag():
    g = build_topology(TopologyConfig(depth=4, branch=2))
    for m in range(0, 6):
        t = g.truncate(m)
        assert len(set(t.nodes)) == t.K
        assert all(r <= m for s in t.nodes for r in s)
        t.topological_order()


@given(st.integers(0, 6), st.integers(0, 3), st.one_of(st.none(), st.integers(1, 20)))
def test_built_graphs_are_dags_with_strict_edges(depth, branch, budget):
    g = build_topology(TopologyConfig(depth, branch, budget))
    order = g.topological_order()
    pos = {k: i for i, k in enumerate(order)}
    for p, k in g.edges:
        assert g.nodes[p] < g.nodes[k]
        assert pos[p] < pos[k]
    assert budget is None or g.K <= budget
    assert max(len(s) for s in g.nodes) <= depth


# ---------------------------------------------------------------------------
# calibration


def test_expected_ranks_match_independent_enumeration():
    p = (0.9, 0.5, 0.1)
    for depth, branch in [(1, 0), (3, 0), (3, 1), (2, 2)]:
        g = build_topology(TopologyConfig(depth, branch))
        nodes = set(g.nodes)
        edges = {(g.nodes[a], g.nodes[b]) for a, b in g.edges}
        assert expected_accepted_ranks(g, p) == pytest.approx(expected_deepest(nodes, edges, p))


def test_calibration_certain_acceptance_builds_the_chain():
    for budget in (1, 2, 4, 6, 9):
        g = calibrate_from_rates([1.0] * 6, budget)
        assert g == build_topology(TopologyConfig(depth=min(6, budget - 1)))


def test_calibration_zero_acceptance_is_root_only():
    assert calibrate_from_rates([0.0] * 5, 8) == root_only()


def test_calibration_matches_exhaustive_search_on_the_reference_rates():
    p = (0.9, 0.5, 0.1)
    g = calibrate_from_rates(p, 3)
    assert expected_accepted_ranks(g, p) == pytest.approx(exhaustive_calibration(p, 3))
    assert g.nodes == (frozenset(), frozenset({1}), frozenset({1, 2}))


@pytest.mark.parametrize("p", [(0.6, 0.6, 0.6), (0.3, 0.9, 0.9), (0.5, 0.95, 0.2, 0.8), (0.99, 0.2, 0.9)])
@pytest.mark.parametrize("budget", [2, 3, 4])
def test_calibration_never_beats_exhaustive(p, budget):
    g = calibrate_from_rates(p, budget)
    best = exhaustive_calibration(p, budget)
    value = expected_accepted_ranks(g, p)
    assert value <= best + 1e-12
    assert g.K <= budget


def test_family_oracle_agrees_with_library_family():
    for depth, branch in itertools.product(range(4), range(3)):
        g = build_topology(TopologyConfig(depth, branch))
        nodes, edges = family(depth, branch)
        assert set(g.nodes) == nodes
        assert {(g.nodes[a], g.nodes[b]) for a, b in g.edges} == edges


def test_calibrate_topology_needs_traces():
    with pytest.raises(ValueError):
        calibrate_topology([], 4)
