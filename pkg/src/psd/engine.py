"""Parallel speculative decoding loop and its single-axis baselines."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from .core import (
    SPATIAL,
    SPECULATIVE,
    VERIFIER_COMMIT,
    Commit,
    CommitSet,
    SequenceState,
    advance_block_if_complete,
    apply_commits,
    make_commits,
    masked_positions,
)
from .denoiser import Denoiser, DenoiserOutput
from .draftgraph import (
    DraftGraph,
    DraftSequence,
    TopologyConfig,
    assemble_drafts,
    build_topology,
    root_only,
    speculative_ordering,
)
from .policies import GREEDY, PolicyConfig, accepts, select
from .trace import DecodeTrace, IterationRecord

log = logging.getLogger(__name__)

PSD = "psd"
SPATIAL_ONLY = "spatial_only"
GREEDY_ONLY = "greedy_only"
MODES = (PSD, SPATIAL_ONLY, GREEDY_ONLY)


@dataclass(frozen=True)
class EngineConfig:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    block_len: int = 32
    max_new_tokens: int = 512
    seed: int = 0
    eos_stop: bool = True
    mode: str = PSD
    # explicit graph (e.g. a calibrated one); overrides ``topology``
    graph: DraftGraph | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.block_len < 1 or self.max_new_tokens < 1:
            raise ValueError("block_len and max_new_tokens must be >= 1")

    def draft_graph(self) -> DraftGraph:
        if self.mode != PSD:
            return root_only()
        return self.graph if self.graph is not None else build_topology(self.topology)

    def effective_policy(self) -> PolicyConfig:
        if self.mode == GREEDY_ONLY:
            return replace(self.policy, kind=GREEDY)
        return self.policy


@dataclass(frozen=True)
class AcceptanceOutcome:
    accepted: frozenset[int]
    deepest: int
    accepted_tokens: CommitSet
    verifier_commits: CommitSet = field(default_factory=dict)


def hierarchical_accept(
    graph: DraftGraph,
    drafts: Sequence[DraftSequence],
    verification: Sequence[DenoiserOutput],
    policy: PolicyConfig,
) -> AcceptanceOutcome:
    if len(drafts) != graph.K or len(verification) != graph.K:
        raise ValueError("need exactly one draft and one verifier output per node")
    accepted = {graph.root}
    for k in graph.topological_order():
        if k == graph.root:
            continue
        fills = drafts[k].filled
        for p in graph.parents(k):
            if p not in accepted:
                continue
            new = [i for i in fills if i not in drafts[p].filled]
            if all(accepts(policy, fills[i], i, verification[p]) for i in new):
                accepted.add(k)
                break
    deepest = min(accepted, key=lambda k: (-len(drafts[k].filled), k))
    return AcceptanceOutcome(
        frozenset(accepted), deepest, make_commits(drafts[deepest].filled, SPECULATIVE)
    )


def verifier_commits(output: DenoiserOutput, policy: PolicyConfig, state_after: SequenceState) -> CommitSet:
    """Stage-1 selection rule applied to the deepest accepted draft's verifier output."""
    remaining = masked_positions(state_after)
    if not remaining:
        return {}
    decision = select(policy, remaining, output, state_after.step)
    return {i: Commit(output[i].token, VERIFIER_COMMIT) for i in decision.selected}


def _preds(out: DenoiserOutput) -> dict[int, tuple[int, float]]:
    return {p: (pr.token, pr.confidence) for p, pr in out.predictions.items()}


def decode(config: EngineConfig, denoiser: Denoiser, prompt: Sequence[int]) -> tuple[list[int], DecodeTrace]:
    vocab = denoiser.vocab
    policy = config.effective_policy()
    graph = config.draft_graph()
    drafting = config.mode == PSD
    state = SequenceState.initial(prompt, config.max_new_tokens, config.block_len, vocab.mask_id)
    trace = DecodeTrace(
        mode=config.mode,
        policy={**asdict(policy), "label": policy.label},
        graph=graph,
        prompt=list(prompt),
        block_len=config.block_len,
        max_new_tokens=config.max_new_tokens,
        eos_id=vocab.eos_id,
        mask_id=vocab.mask_id,
        eos_stop=config.eos_stop,
        seed=config.seed,
    )
    t = 0
    while not state.finished:
        state = replace(state, step=t)
        # stage 1: spatial unmasking
        masked = masked_positions(state)
        out = denoiser.predict(state)
        decision = select(policy, masked, out, t)
        spatial = {i: out[i].token for i in decision.selected}
        post = apply_commits(state, make_commits(spatial, SPATIAL))
        sigma = speculative_ordering(post, out)
        rec = IterationRecord(
            step=t,
            block=state.active_block,
            forward_passes=1,
            batch_size=1,
            spatial_preds=_preds(out),
            spatial=spatial,
            sigma=list(sigma.sigma),
        )
        spatial_eos = config.eos_stop and vocab.eos_id in spatial.values()
        if drafting and sigma.m and not spatial_eos:
            # stage 2: drafts from cached predictions, no model call
            eff = graph.truncate(sigma.m)
            drafts = assemble_drafts(post, sigma, out, eff)
            # stage 3: one batched verification over drafts that still have masks
            live = [d for d in drafts if masked_positions(d.state)]
            outputs = iter(denoiser.predict_batch([d.state for d in live]))
            verification = [
                next(outputs) if masked_positions(d.state) else DenoiserOutput({}, "")
                for d in drafts
            ]
            outcome = hierarchical_accept(eff, drafts, verification, policy)
            after = apply_commits(post, outcome.accepted_tokens)
            vc = verifier_commits(verification[outcome.deepest], policy, after)
            post = apply_commits(after, vc)
            rec.forward_passes = 2
            rec.batch_size = len(live)
            rec.nodes = list(eff.nodes)
            rec.node_edges = list(eff.edges)
            rec.verification = [_preds(v) for v in verification]
            rec.accepted = sorted(outcome.accepted)
            rec.k_star = outcome.deepest
            rec.speculative = {i: c.token for i, c in outcome.accepted_tokens.items()}
            rec.verifier = {i: c.token for i, c in vc.items()}
        trace.iterations.append(rec)
        state = advance_block_if_complete(replace(post, step=t + 1))
        t += 1
        if config.eos_stop:
            eos_at = [
                p for _, group in rec.commits_in_order() for p, tok in group.items() if tok == vocab.eos_id
            ]
            if eos_at:
                trace.eos_position = min(eos_at)
                trace.eos_iteration = len(trace.iterations) - 1
                log.debug("eos committed at %d in iteration %d", trace.eos_position, t - 1)
                break
    trace.tokens = list(state.tokens)
    return list(state.tokens), trace


def decode_spatial_only(config: EngineConfig, denoiser: Denoiser, prompt: Sequence[int]):
    return decode(replace(config, mode=SPATIAL_ONLY), denoiser, prompt)


def decode_greedy_only(config: EngineConfig, denoiser: Denoiser, prompt: Sequence[int]):
    return decode(replace(config, mode=GREEDY_ONLY), denoiser, prompt)
