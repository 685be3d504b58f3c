"""Trace-derived statistics and the commit-legality auditor.

Every function here is a pure function of one or more ``DecodeTrace``
objects. Commits at positions after the first committed EOS are ignored
throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

from .policies import GREEDY, LOCALLEAP, PolicyConfig
from .trace import DecodeTrace, Preds

HIT_RATE = "hit_rate"
WINDOW_COVERAGE = "window_coverage"
VARIANTS = (HIT_RATE, WINDOW_COVERAGE)


def _as_list(traces) -> list[DecodeTrace]:
    return [traces] if isinstance(traces, DecodeTrace) else list(traces)


def effective_commits(trace: DecodeTrace) -> list[list[tuple[str, dict[int, int]]]]:
    """Per iteration, the commit groups in application order, EOS-truncated."""
    cut = trace.eos_position
    out = []
    for rec in trace.iterations:
        groups = []
        for name, group in rec.commits_in_order():
            if cut is not None:
                group = {p: t for p, t in group.items() if p <= cut}
            groups.append((name, group))
        out.append(groups)
    return out


def tpf(trace: DecodeTrace) -> float:
    passes = trace.forward_passes
    if passes == 0:
        raise ValueError("trace has no forward passes")
    tokens = sum(len(g) for groups in effective_commits(trace) for _, g in groups)
    return tokens / passes


def committed_tokens(trace: DecodeTrace) -> int:
    return sum(len(g) for groups in effective_commits(trace) for _, g in groups)


def acceptance_rate_by_rank(traces, depth: int | None = None) -> list[float]:
    """Fraction of drafting iterations offering rank j in which rank j was accepted.

    Ranks that were never offered report 0.0.
    """
    traces = _as_list(traces)
    if depth is None:
        depth = max((t.graph.depth() for t in traces), default=0)
    offered = [0] * depth
    hits = [0] * depth
    for trace in traces:
        gdepth = trace.graph.depth()
        for rec in trace.iterations:
            if not rec.drafted:
                continue
            acc = set().union(*(rec.nodes[k] for k in rec.accepted))
            for j in range(1, min(depth, gdepth, len(rec.sigma)) + 1):
                offered[j - 1] += 1
                hits[j - 1] += j in acc
    return [h / o if o else 0.0 for h, o in zip(hits, offered)]


def _anchors(trace: DecodeTrace, K: int, h: int):
    commits = [set().union(*(g.keys() for _, g in groups)) for groups in effective_commits(trace)]
    n = len(trace.iterations)
    for t in range(n - 1):
        sigma = trace.iterations[t].sigma
        if not sigma:
            continue
        future = set().union(*commits[t + 1:t + 1 + h])
        yield set(sigma[:K]), future


def _check_kh(K: int, h: int):
    if K < 1 or h < 1:
        raise ValueError("K and h must be >= 1")


def precision_at_k(traces, K: int, h: int, variant: str = HIT_RATE) -> float:
    """Lookahead precision of the top-K speculative candidates; NaN without anchors."""
    _check_kh(K, h)
    vals = []
    for trace in _as_list(traces):
        for cand, future in _anchors(trace, K, h):
            hit = len(cand & future)
            vals.append(hit / K if variant == HIT_RATE else hit / max(1, len(future)))
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return sum(vals) / len(vals) if vals else math.nan


def precision_oracle_bound(traces, K: int, h: int, variant: str = HIT_RATE) -> float:
    _check_kh(K, h)
    vals = []
    for trace in _as_list(traces):
        for _, future in _anchors(trace, K, h):
            d = len(future)
            vals.append(min(1.0, d / K) if variant == HIT_RATE else min(K, d) / max(1, d))
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return sum(vals) / len(vals) if vals else math.nan


@dataclass
class ProfileBucket:
    lo: float
    hi: float
    tokens: int
    spatial_pct: float | None
    speculative_pct: float | None


def contribution_profile(traces, buckets: int = 10) -> list[ProfileBucket]:
    """Share of speculative vs spatial tokens over normalized within-block progress.

    Verifier commits count as spatial. Within an iteration tokens are ordered
    spatial, speculative, verifier; a token's progress is the number of
    tokens committed in its block before it divided by the block length.
    """
    if buckets < 1:
        raise ValueError("buckets must be >= 1")
    spec = [0] * buckets
    total = [0] * buckets
    for trace in _as_list(traces):
        done: dict[int, int] = {}
        for rec, groups in zip(trace.iterations, effective_commits(trace)):
            for name, group in groups:
                for pos in group:
                    block = (pos - trace.prompt_len) // trace.block_len
                    lo, hi = trace.block_span(block)
                    before = done.get(block, 0)
                    b = min(buckets - 1, before * buckets // (hi - lo))
                    total[b] += 1
                    spec[b] += name == "speculative"
                    done[block] = before + 1
    out = []
    for b in range(buckets):
        if total[b]:
            s = 100.0 * spec[b] / total[b]
            out.append(ProfileBucket(b / buckets, (b + 1) / buckets, total[b], 100.0 - s, s))
        else:
            out.append(ProfileBucket(b / buckets, (b + 1) / buckets, 0, None, None))
    return out


@dataclass
class MetricsReport:
    tpf: float
    mean_reveal_rate: float
    acceptance_rate_by_rank: list[float]
    precision_curves: dict[tuple[int, int, str], float] = field(default_factory=dict)
    oracle_curves: dict[tuple[int, int, str], float] = field(default_factory=dict)
    contribution_profile: list[ProfileBucket] = field(default_factory=list)


def pooled_tpf(traces) -> float:
    traces = _as_list(traces)
    return sum(committed_tokens(t) for t in traces) / sum(t.forward_passes for t in traces)


def build_report(traces, ks: Sequence[int] = (5, 7, 9), hs: Iterable[int] = range(1, 11), buckets: int = 10) -> MetricsReport:
    traces = _as_list(traces)
    hs = list(hs)
    prec, orc = {}, {}
    for K in ks:
        for h in hs:
            for v in VARIANTS:
                prec[(K, h, v)] = precision_at_k(traces, K, h, v)
                orc[(K, h, v)] = precision_oracle_bound(traces, K, h, v)
    steps = [len(r.spatial) for t in traces for r in t.iterations]
    return MetricsReport(
        tpf=pooled_tpf(traces),
        mean_reveal_rate=sum(steps) / len(steps) if steps else math.nan,
        acceptance_rate_by_rank=acceptance_rate_by_rank(traces),
        precision_curves=prec,
        oracle_curves=orc,
        contribution_profile=contribution_profile(traces, buckets),
    )


# ---------------------------------------------------------------------------
# commit-legality audit


def policy_from_trace(trace: DecodeTrace) -> PolicyConfig:
    names = {f.name for f in fields(PolicyConfig)}
    return PolicyConfig(**{k: v for k, v in trace.policy.items() if k in names})


def _leftmost_argmax(preds: Preds) -> int:
    return min(preds, key=lambda p: (-preds[p][1], p))


def _selection_violations(policy: PolicyConfig, preds: Preds, committed: dict[int, int], where: str) -> list[str]:
    """Check that every committed token is endorsed by the policy's selection rule."""
    bad = []
    for p, tok in committed.items():
        if p not in preds:
            bad.append(f"{where}: position {p} had no prediction")
        elif preds[p][0] != tok:
            bad.append(f"{where}: position {p} committed {tok}, predicted {preds[p][0]}")
    if bad or not committed:
        return bad
    argmax = _leftmost_argmax(preds)
    fallback_ok = list(committed) == [argmax]
    if policy.kind == GREEDY:
        if not fallback_ok:
            bad.append(f"{where}: greedy committed {sorted(committed)}, argmax is {argmax}")
        return bad
    tau = policy.threshold
    qualified = {p for p, (_, c) in preds.items() if c >= tau}
    if not qualified:
        if not fallback_ok:
            bad.append(f"{where}: nothing reached tau={tau} but commit is not the top-1 fallback")
        return bad
    allowed = set(qualified)
    if policy.kind == LOCALLEAP:
        masked = sorted(preds)
        for a in qualified:
            k = masked.index(a)
            allowed.update(masked[max(0, k - policy.window):k + 1 + policy.window])
    for p in committed:
        if p not in allowed:
            bad.append(f"{where}: position {p} committed with confidence {preds[p][1]} below tau={tau}")
    return bad


def _passes(policy: PolicyConfig, tok: int, pos: int, parent: Preds) -> bool:
    if pos not in parent or parent[pos][0] != tok:
        return False
    if policy.kind == GREEDY:
        return _leftmost_argmax(parent) == pos
    return parent[pos][1] >= policy.threshold


def audit_trace(trace: DecodeTrace) -> list[str]:
    """Return one message per illegal commit; an empty list means the trace is clean."""
    policy = policy_from_trace(trace)
    violations: list[str] = []
    tokens = list(trace.prompt) + [trace.mask_id] * trace.max_new_tokens
    for rec in trace.iterations:
        where = f"t={rec.step}"
        if rec.forward_passes not in (1, 2):
            violations.append(f"{where}: {rec.forward_passes} forward passes")
        violations += _selection_violations(policy, rec.spatial_preds, rec.spatial, where + " spatial")
        if rec.drafted:
            sigma = rec.sigma
            accepted = set(rec.accepted)
            if 0 not in accepted or rec.k_star not in accepted:
                violations.append(f"{where}: root or k* missing from the accepted set")
            parents: dict[int, list[int]] = {}
            for p, k in rec.node_edges:
                parents.setdefault(k, []).append(p)
            for k in accepted - {0}:
                ok = False
                for p in parents.get(k, []):
                    if p not in accepted:
                        continue
                    new = [sigma[r - 1] for r in rec.nodes[k] - rec.nodes[p]]
                    if all(_passes(policy, rec.spatial_preds[i][0], i, rec.verification[p]) for i in new):
                        ok = True
                        break
                if not ok:
                    violations.append(f"{where}: node {k} accepted without a consistent accepted parent")
            if max(len(rec.nodes[k]) for k in accepted) != len(rec.nodes[rec.k_star]):
                violations.append(f"{where}: k* is not the deepest accepted node")
            expect = {sigma[r - 1]: rec.spatial_preds[sigma[r - 1]][0] for r in rec.nodes[rec.k_star]}
            if expect != rec.speculative:
                violations.append(f"{where}: speculative commits differ from the fills of k*")
            violations += _selection_violations(
                policy, rec.verification[rec.k_star], rec.verifier, where + " verifier"
            )
        elif rec.speculative or rec.verifier:
            violations.append(f"{where}: speculative or verifier commits without drafting")
        for _, group in rec.commits_in_order():
            for p, tok in group.items():
                if tokens[p] != trace.mask_id:
                    violations.append(f"{where}: position {p} committed twice")
                tokens[p] = tok
    if trace.tokens and tokens != list(trace.tokens):
        violations.append("replayed commits do not reproduce the final tokens")
    return violations
