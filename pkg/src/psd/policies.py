"""Transfer policies: which masked positions to commit, and the paired acceptance test."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .denoiser import DenoiserOutput

GREEDY = "greedy"
CONFIDENCE = "confidence"
LOCALLEAP = "localleap"
KINDS = (GREEDY, CONFIDENCE, LOCALLEAP)


class StallError(RuntimeError):
    """No position qualified and the policy is configured not to fall back."""


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = CONFIDENCE
    tau: float = 0.9
    anchor_tau: float = 0.9
    window: int = 1
    fallback: str = "top1"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0 < self.anchor_tau < 1:
            raise ValueError(f"anchor_tau must lie in (0, 1), got {self.anchor_tau}")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.fallback not in ("top1", "stall_error"):
            raise ValueError(f"unknown fallback {self.fallback!r}")

    @property
    def threshold(self) -> float:
        return self.anchor_tau if self.kind == LOCALLEAP else self.tau

    @property
    def label(self) -> str:
        # the localleap variant is an anchor+window reconstruction, not the original method
        return "localleap-style" if self.kind == LOCALLEAP else self.kind


@dataclass(frozen=True)
class TransferDecision:
    selected: tuple[int, ...]
    policy_id: str
    step: int = 0


def argmax_position(masked: Sequence[int], preds: DenoiserOutput) -> int:
    best = None
    best_c = -1.0
    for i in sorted(masked):
        c = preds[i].confidence
        if c > best_c:
            best, best_c = i, c
    return best


def select(policy: PolicyConfig, masked: Sequence[int], preds: DenoiserOutput, step: int = 0) -> TransferDecision:
    if not masked:
        raise ValueError("select needs at least one masked position")
    masked = sorted(masked)
    if policy.kind == GREEDY:
        chosen = [argmax_position(masked, preds)]
    else:
        tau = policy.threshold
        chosen = [i for i in masked if preds[i].confidence >= tau]
        if policy.kind == LOCALLEAP and chosen and policy.window:
            chosen = _with_windows(masked, chosen, policy.window)
        if not chosen:
            if policy.fallback == "stall_error":
                raise StallError(f"no position reaches tau={tau} at step {step}")
            chosen = [argmax_position(masked, preds)]
    return TransferDecision(tuple(chosen), policy.label, step)


def _with_windows(masked: list[int], anchors: list[int], w: int) -> list[int]:
    index = {p: k for k, p in enumerate(masked)}
    picked = set(anchors)
    for a in anchors:
        k = index[a]
        picked.update(masked[max(0, k - w):k])
        picked.update(masked[k + 1:k + 1 + w])
    return sorted(picked)


def accepts(policy: PolicyConfig, token: int, position: int, parent: DenoiserOutput) -> bool:
    """Whether a speculated token passes against the parent draft's verifier output."""
    pred = parent.predictions.get(position)
    if pred is None or pred.token != token:
        return False
    if policy.kind == GREEDY:
        return argmax_position(parent.predictions.keys(), parent) == position
    return pred.confidence >= policy.threshold


def mean_reveal_rate(trace) -> float:
    sizes = [len(rec.spatial) for rec in trace.iterations if rec.spatial]
    if not sizes:
        raise ValueError("trace has no spatial steps")
    return sum(sizes) / len(sizes)
