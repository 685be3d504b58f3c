"""Speculative ordering, draft-graph topologies and draft assembly.

Graph nodes are subsets of 1-based *ranks* into the speculative ordering, so
one graph serves every decoding step; ranks are resolved to positions only
when drafts are assembled.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import ACTIVE_BLOCK, SPECULATIVE, SequenceState, apply_commits, make_commits, masked_positions
from .denoiser import DenoiserOutput

GRAPH_FORMAT = "psd-draft-graph"
GRAPH_VERSION = 1


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SpeculativeOrdering:
    sigma: tuple[int, ...]
    confidences: tuple[float, ...]

    @property
    def m(self) -> int:
        return len(self.sigma)


def speculative_ordering(post_state: SequenceState, cached: DenoiserOutput) -> SpeculativeOrdering:
    remaining = masked_positions(post_state, ACTIVE_BLOCK)
    ranked = sorted(remaining, key=lambda i: (-cached[i].confidence, i))
    return SpeculativeOrdering(tuple(ranked), tuple(cached[i].confidence for i in ranked))


@dataclass(frozen=True)
class TopologyConfig:
    depth: int = 3
    branch: int = 0
    budget: int | None = None

    def __post_init__(self):
        if self.depth < 0 or self.branch < 0:
            raise ValueError("depth and branch must be >= 0")
        if self.budget is not None and self.budget < 1:
            raise ValueError("budget must be >= 1 (the root always exists)")


@dataclass(frozen=True)
class DraftGraph:
    nodes: tuple[frozenset[int], ...]
    edges: tuple[tuple[int, int], ...]
    _parents: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.nodes or self.nodes[0]:
            raise GraphError("node 0 must be the root with an empty subset")
        if len(set(self.nodes)) != len(self.nodes):
            raise GraphError("node subsets must be pairwise distinct")
        if any(r < 1 for s in self.nodes for r in s):
            raise GraphError("ranks are 1-based")
        parents: list[list[int]] = [[] for _ in self.nodes]
        for p, k in self.edges:
            if not (0 <= p < len(self.nodes) and 0 <= k < len(self.nodes)):
                raise GraphError(f"edge ({p}, {k}) references a missing node")
            if not self.nodes[p] < self.nodes[k]:
                raise GraphError(f"edge ({p}, {k}) is not a strict subset inclusion")
            parents[k].append(p)
        for k in range(1, len(self.nodes)):
            if not parents[k]:
                raise GraphError(f"node {k} has no parent")
        object.__setattr__(self, "_parents", tuple(tuple(sorted(set(ps))) for ps in parents))

    @property
    def K(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> int:
        return 0

    def parents(self, k: int) -> tuple[int, ...]:
        return self._parents[k]

    def depth(self) -> int:
        return max(len(s) for s in self.nodes)

    def topological_order(self) -> list[int]:
        indeg = [len(ps) for ps in self._parents]
        children: list[list[int]] = [[] for _ in self.nodes]
        for k, ps in enumerate(self._parents):
            for p in ps:
                children[p].append(k)
        ready = [k for k, d in enumerate(indeg) if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            k = heapq.heappop(ready)
            order.append(k)
            for c in children[k]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, c)
        if len(order) != len(self.nodes):
            raise GraphError("graph has a cycle")
        return order

    def truncate(self, m: int) -> DraftGraph:
        """Drop ranks beyond ``m`` and merge nodes whose subsets then coincide."""
        if all(r <= m for s in self.nodes for r in s):
            return self
        rep: dict[frozenset[int], int] = {}
        remap = []
        nodes = []
        for s in self.nodes:
            eff = frozenset(r for r in s if r <= m)
            if eff not in rep:
                rep[eff] = len(nodes)
                nodes.append(eff)
            remap.append(rep[eff])
        edges = sorted({(remap[p], remap[k]) for p, k in self.edges if remap[p] != remap[k]})
        return DraftGraph(tuple(nodes), tuple(edges))

    def to_text(self) -> str:
        lines = [f"{GRAPH_FORMAT} {GRAPH_VERSION}"]
        for k, s in enumerate(self.nodes):
            lines.append(" ".join(["node", str(k), *map(str, sorted(s))]))
        for p, k in self.edges:
            lines.append(f"edge {p} {k}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> DraftGraph:
        lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if not lines or lines[0][:1] != [GRAPH_FORMAT]:
            raise GraphError("not a draft graph document")
        if lines[0][1:] != [str(GRAPH_VERSION)]:
            raise GraphError(f"unsupported draft graph version {lines[0][1:]}, expected {GRAPH_VERSION}")
        nodes: dict[int, frozenset[int]] = {}
        edges = []
        for parts in lines[1:]:
            if parts[0] == "node":
                nodes[int(parts[1])] = frozenset(int(r) for r in parts[2:])
            elif parts[0] == "edge":
                edges.append((int(parts[1]), int(parts[2])))
            else:
                raise GraphError(f"unknown record {parts[0]!r}")
        if sorted(nodes) != list(range(len(nodes))):
            raise GraphError("node ids must be 0..K-1")
        return cls(tuple(nodes[k] for k in range(len(nodes))), tuple(edges))

    def to_json(self) -> dict:
        return {"nodes": [sorted(s) for s in self.nodes], "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_json(cls, doc: dict) -> DraftGraph:
        return cls(tuple(frozenset(s) for s in doc["nodes"]), tuple(tuple(e) for e in doc["edges"]))


def root_only() -> DraftGraph:
    return DraftGraph((frozenset(),), ())


def _family(depth: int, branch: int):
    """Chain nodes {1..j} plus skip nodes {1..j-1, j+q}; returns (nodes, edges) sorted breadth-first."""
    chain = [frozenset(range(1, j + 1)) for j in range(depth + 1)]
    entries = [(len(s), 0, tuple(sorted(s)), s) for s in chain]
    raw_edges = [(chain[j - 1], chain[j]) for j in range(1, depth + 1)]
    for j in range(1, depth + 1):
        for q in range(1, branch + 1):
            s = frozenset(range(1, j)) | {j + q}
            entries.append((len(s), 1, tuple(sorted(s)), s))
            raw_edges.append((chain[j - 1], s))
            if j + q <= depth:
                raw_edges.append((s, chain[j + q]))
    entries.sort()
    nodes = [e[3] for e in entries]
    index = {s: k for k, s in enumerate(nodes)}
    edges = sorted({(index[a], index[b]) for a, b in raw_edges})
    return nodes, edges


def _restrict(nodes, edges, keep: Iterable[int]) -> DraftGraph:
    keep = sorted(keep)
    new = {old: k for k, old in enumerate(keep)}
    kept_edges = sorted((new[p], new[k]) for p, k in edges if p in new and k in new)
    return DraftGraph(tuple(nodes[k] for k in keep), tuple(kept_edges))


def build_topology(cfg: TopologyConfig) -> DraftGraph:
    nodes, edges = _family(cfg.depth, cfg.branch)
    n = len(nodes) if cfg.budget is None else min(cfg.budget, len(nodes))
    return _restrict(nodes, edges, range(n))


@dataclass(frozen=True)
class DraftSequence:
    node_id: int
    ranks: frozenset[int]
    filled: dict[int, int]
    state: SequenceState

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.state.tokens


def assemble_drafts(
    post_state: SequenceState,
    sigma: SpeculativeOrdering | Sequence[int],
    cached: DenoiserOutput,
    graph: DraftGraph,
) -> list[DraftSequence]:
    """Materialize every node of ``graph.truncate(m)`` from cached predictions.

    ``node_id`` of each draft indexes the truncated graph.
    """
    order = sigma.sigma if isinstance(sigma, SpeculativeOrdering) else tuple(sigma)
    eff = graph.truncate(len(order))
    drafts = []
    for k, ranks in enumerate(eff.nodes):
        filled = {order[r - 1]: cached[order[r - 1]].token for r in sorted(ranks)}
        state = apply_commits(post_state, make_commits(filled, SPECULATIVE))
        drafts.append(DraftSequence(k, ranks, filled, state))
    return drafts


# ---------------------------------------------------------------------------
# offline calibration


def expected_accepted_ranks(graph: DraftGraph, p: Sequence[float]) -> float:
    """E[|S_k*|] when rank r passes independently with probability ``p[r-1]``.

    Ranks beyond ``len(p)`` never pass.
    """
    ranks = sorted(set().union(*graph.nodes))
    order = graph.topological_order()
    total = 0.0
    for pattern in itertools.product((False, True), repeat=len(ranks)):
        prob = 1.0
        passed = set()
        for r, ok in zip(ranks, pattern):
            pr = p[r - 1] if r <= len(p) else 0.0
            prob *= pr if ok else 1.0 - pr
            if ok:
                passed.add(r)
        if prob == 0.0:
            continue
        accepted = {graph.root}
        for k in order:
            if k == graph.root:
                continue
            if any(p_ in accepted and (graph.nodes[k] - graph.nodes[p_]) <= passed for p_ in graph.parents(k)):
                accepted.add(k)
        total += prob * max(len(graph.nodes[k]) for k in accepted)
    return total


def estimate_rank_acceptance(traces) -> list[float]:
    """Per-rank pass probability from chain-probe traces.

    Rank j counts as checked when ranks 1..j-1 were all accepted and at least
    j positions were left to speculate on; it passed when rank j was accepted
    too.
    """
    depth = 0
    checked: dict[int, int] = {}
    passed: dict[int, int] = {}
    for trace in traces:
        depth = max(depth, trace.graph.depth())
        for rec in trace.iterations:
            if not rec.nodes:
                continue
            acc_ranks = set().union(*(rec.nodes[k] for k in rec.accepted))
            prefix = 0
            while prefix + 1 in acc_ranks:
                prefix += 1
            offered = min(len(rec.sigma), trace.graph.depth())
            for j in range(1, min(offered, prefix + 1) + 1):
                checked[j] = checked.get(j, 0) + 1
                if j <= prefix:
                    passed[j] = passed.get(j, 0) + 1
    return [passed.get(j, 0) / checked[j] if checked.get(j) else 0.0 for j in range(1, depth + 1)]


def calibrate_from_rates(p: Sequence[float], budget: int, branch: int = 1) -> DraftGraph:
    """Greedy node-by-node growth maximizing expected accepted ranks."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    nodes, edges = _family(len(p), branch)
    parents: dict[int, set[int]] = {}
    for a, b in edges:
        parents.setdefault(b, set()).add(a)
    chosen = {0}
    current = 0.0
    while len(chosen) < budget:
        best, best_value = None, current + 1e-12
        for k in range(1, len(nodes)):
            if k in chosen or not parents.get(k, set()) & chosen:
                continue
            value = expected_accepted_ranks(_restrict(nodes, edges, chosen | {k}), p)
            if value > best_value:
                best, best_value = k, value
        if best is None:
            break
        chosen.add(best)
        current = best_value
    return _restrict(nodes, edges, chosen)


def calibrate_topology(traces, budget: int, branch: int = 1) -> DraftGraph:
    traces = list(traces)
    if not traces:
        raise ValueError("calibration needs at least one trace")
    return calibrate_from_rates(estimate_rank_acceptance(traces), budget, branch)
