"""Token, vocabulary and sequence-state primitives shared by every decoding stage."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, NamedTuple, Sequence

SPATIAL = "spatial"
SPECULATIVE = "speculative"
VERIFIER_COMMIT = "verifier_commit"
SOURCES = (SPATIAL, SPECULATIVE, VERIFIER_COMMIT)

ACTIVE_BLOCK = "active_block"
WHOLE_SEQUENCE = "whole_sequence"


class CommitError(RuntimeError):
    """A commit targeted a position that is not masked (an engine bug)."""


@dataclass(frozen=True)
class Vocabulary:
    size: int
    eos_id: int
    token_text: tuple[str, ...] | None = None
    tokenization: str = "char"
    unk_id: int | None = None

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.size}")
        if not 0 <= self.eos_id < self.size:
            raise ValueError(f"eos_id {self.eos_id} outside [0, {self.size})")
        if self.token_text is not None and len(self.token_text) != self.size:
            raise ValueError("token_text must have one entry per token id")

    @property
    def mask_id(self) -> int:
        return self.size

    def encode(self, text: str) -> list[int]:
        if self.token_text is None:
            raise ValueError("vocabulary has no token strings")
        index = {tok: i for i, tok in enumerate(self.token_text)}
        pieces = list(text) if self.tokenization == "char" else text.split()
        out = []
        for piece in pieces:
            if piece in index and index[piece] != self.eos_id:
                out.append(index[piece])
            elif self.unk_id is not None:
                out.append(self.unk_id)
            else:
                raise KeyError(f"token {piece!r} not in vocabulary")
        return out

    def decode(self, ids: Sequence[int], stop_at_eos: bool = True) -> str:
        if self.token_text is None:
            raise ValueError("vocabulary has no token strings")
        pieces = []
        for i in ids:
            if i == self.eos_id and stop_at_eos:
                break
            pieces.append("_" if i == self.mask_id else self.token_text[i])
        sep = "" if self.tokenization == "char" else " "
        return sep.join(pieces)


class Commit(NamedTuple):
    token: int
    source: str


# position -> Commit; plain dicts keep this cheap to build and compare
CommitSet = dict[int, Commit]


def make_commits(tokens: Mapping[int, int], source: str) -> CommitSet:
    return {pos: Commit(tok, source) for pos, tok in tokens.items()}


@dataclass(frozen=True)
class SequenceState:
    """Prompt followed by a block-partitioned generation region.

    Positions are absolute. Blocks tile only the generation region, so block
    ``b`` covers ``[prompt_len + b*block_len, prompt_len + (b+1)*block_len)``
    clipped to the sequence end.
    """

    tokens: tuple[int, ...]
    prompt_len: int
    block_len: int
    mask_id: int
    active_block: int = 0
    step: int = 0

    @classmethod
    def initial(cls, prompt: Sequence[int], max_new_tokens: int, block_len: int, mask_id: int) -> SequenceState:
        if block_len < 1:
            raise ValueError("block_len must be >= 1")
        if max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if any(t == mask_id for t in prompt):
            raise ValueError("prompt contains the mask token")
        tokens = tuple(int(t) for t in prompt) + (mask_id,) * max_new_tokens
        return cls(tokens, len(prompt), block_len, mask_id)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def gen_len(self) -> int:
        return len(self.tokens) - self.prompt_len

    @property
    def num_blocks(self) -> int:
        return -(-self.gen_len // self.block_len)

    @property
    def finished(self) -> bool:
        return self.active_block >= self.num_blocks

    def block_span(self, block: int | None = None) -> tuple[int, int]:
        b = self.active_block if block is None else block
        start = self.prompt_len + b * self.block_len
        return start, min(start + self.block_len, len(self.tokens))

    def block_of(self, position: int) -> int:
        return (position - self.prompt_len) // self.block_len

    def with_tokens(self, tokens: tuple[int, ...]) -> SequenceState:
        return replace(self, tokens=tokens)


def masked_positions(state: SequenceState, scope: str = ACTIVE_BLOCK) -> list[int]:
    if scope == ACTIVE_BLOCK:
        if state.finished:
            return []
        lo, hi = state.block_span()
    elif scope == WHOLE_SEQUENCE:
        lo, hi = 0, len(state.tokens)
    else:
        raise ValueError(f"unknown scope {scope!r}")
    m = state.mask_id
    return [i for i in range(lo, hi) if state.tokens[i] == m]


def apply_commits(state: SequenceState, commits: Mapping[int, Commit]) -> SequenceState:
    if not commits:
        return state
    tokens = list(state.tokens)
    for pos, commit in commits.items():
        if tokens[pos] != state.mask_id:
            raise CommitError(f"position {pos} already holds token {tokens[pos]}")
        if not 0 <= commit.token < state.mask_id:
            raise CommitError(f"token {commit.token} at {pos} is not a real token id")
        tokens[pos] = commit.token
    return state.with_tokens(tuple(tokens))


def advance_block_if_complete(state: SequenceState) -> SequenceState:
    if state.finished or masked_positions(state, ACTIVE_BLOCK):
        return state
    # later blocks are still all mask, so there is nothing to initialize
    return replace(state, active_block=state.active_block + 1)
