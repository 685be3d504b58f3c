"""Denoiser abstraction and two deterministic synthetic backends.

A denoiser maps a sequence state to an argmax token and its confidence for
every masked position in the active block. Both backends here are pure
functions of the token contents of the state, which is what makes
speculative verification against them reproducible.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .core import ACTIVE_BLOCK, SequenceState, Vocabulary, masked_positions

COUNT_MODEL_FORMAT = "psd-count-model"
COUNT_MODEL_VERSION = 1


class DenoiserError(RuntimeError):
    pass


class Prediction(NamedTuple):
    position: int
    token: int
    confidence: float


@dataclass(frozen=True)
class DenoiserOutput:
    predictions: dict[int, Prediction]
    query_fingerprint: str

    def __getitem__(self, position: int) -> Prediction:
        return self.predictions[position]

    def __contains__(self, position: int) -> bool:
        return position in self.predictions

    def __len__(self) -> int:
        return len(self.predictions)

    def positions(self) -> list[int]:
        return sorted(self.predictions)


def state_fingerprint(state: SequenceState) -> str:
    data = np.asarray(state.tokens, dtype="<i8").tobytes()
    return hashlib.blake2b(data, digest_size=8).hexdigest()


class Denoiser:
    """One forward pass: predictions for every masked position in scope."""

    vocab: Vocabulary

    def predict(self, state: SequenceState, scope: str = ACTIVE_BLOCK) -> DenoiserOutput:
        positions = masked_positions(state, scope)
        if not positions:
            raise DenoiserError("query has no masked positions in scope")
        tokens, confs = self._predict_positions(state, positions)
        preds = {
            p: Prediction(p, int(t), float(c)) for p, t, c in zip(positions, tokens, confs)
        }
        return DenoiserOutput(preds, state_fingerprint(state))

    def predict_batch(self, states: Sequence[SequenceState], scope: str = ACTIVE_BLOCK) -> list[DenoiserOutput]:
        if not states:
            raise DenoiserError("empty batch")
        return [self.predict(s, scope) for s in states]

    def _predict_positions(self, state: SequenceState, positions: list[int]):
        raise NotImplementedError


class CallCounter(Denoiser):
    """Wraps a denoiser and counts invocations; a batch counts once.

    Not thread-safe; intended for tests and accounting checks.
    """

    def __init__(self, inner: Denoiser):
        self.inner = inner
        self.vocab = inner.vocab
        self.calls = 0
        self.batch_sizes: list[int] = []

    def predict(self, state, scope=ACTIVE_BLOCK):
        self.calls += 1
        self.batch_sizes.append(1)
        return self.inner.predict(state, scope)

    def predict_batch(self, states, scope=ACTIVE_BLOCK):
        self.calls += 1
        self.batch_sizes.append(len(states))
        return self.inner.predict_batch(states, scope)


# ---------------------------------------------------------------------------
# frontier oracle


@dataclass(frozen=True)
class FrontierOracleConfig:
    """Synthetic denoiser whose confidence decays away from the unmasked frontier.

    ``reference`` is indexed by absolute position and must cover the whole
    sequence (prompt included).
    """

    reference: tuple[int, ...]
    c_max: float = 0.99
    decay: float = 0.02
    noise: float = 0.0
    correctness: float = 1.0
    floor: float = 0.05
    seed: int = 0
    drift: bool = False

    def __post_init__(self):
        if not 0 < self.floor <= self.c_max <= 1:
            raise ValueError("need 0 < floor <= c_max <= 1")
        if not 0 <= self.correctness <= 1:
            raise ValueError("correctness must lie in [0, 1]")
        if self.decay < 0 or self.noise < 0:
            raise ValueError("decay and noise must be >= 0")


def frontier_distances(state: SequenceState, positions: Iterable[int]) -> list[int]:
    """Distance to the nearest unmasked position on either side (prompt included)."""
    toks = state.tokens
    m = state.mask_id
    n = len(toks)
    out = []
    for i in positions:
        best = None
        j = i - 1
        while j >= 0:
            if toks[j] != m:
                best = i - j
                break
            j -= 1
        j = i + 1
        limit = n if best is None else min(n, i + best)
        while j < limit:
            if toks[j] != m:
                best = j - i
                break
            j += 1
        out.append(n if best is None else best)
    return out


def _position_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, *keys])


def _jitter(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=n) * scale


class FrontierOracle(Denoiser):
    def __init__(self, config: FrontierOracleConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        if any(not 0 <= t < vocab.size for t in config.reference):
            raise ValueError("reference contains ids outside the vocabulary")
        n = len(config.reference)
        self._reference = np.asarray(config.reference, dtype=np.int64)
        # per-position jitter frozen for the lifetime of the oracle
        self._frozen_noise = _jitter(_position_rng(config.seed, 0), n, config.noise)

    def _context_draws(self, state: SequenceState):
        cfg = self.config
        fp = int(state_fingerprint(state), 16)
        rng = _position_rng(cfg.seed, 1, fp & 0xFFFFFFFF, fp >> 32)
        n = len(self._reference)
        correct = rng.random(n) < cfg.correctness
        offsets = rng.integers(1, self.vocab.size, size=n)
        noise = _jitter(rng, n, cfg.noise) if cfg.drift else self._frozen_noise
        return correct, offsets, noise

    def _predict_positions(self, state, positions):
        cfg = self.config
        if len(self._reference) < len(state.tokens):
            raise DenoiserError("reference shorter than the sequence")
        dists = frontier_distances(state, positions)
        correct, offsets, noise = self._context_draws(state)
        tokens, confs = [], []
        for i, d in zip(positions, dists):
            y = int(self._reference[i])
            tokens.append(y if correct[i] else (y + int(offsets[i])) % self.vocab.size)
            confs.append(_clip(cfg.c_max - cfg.decay * d + float(noise[i]), cfg.floor, 1.0))
        return tokens, confs


def _clip(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def frontier_confidence(cfg: FrontierOracleConfig, state: SequenceState, i: int) -> float:
    if state.tokens[i] != state.mask_id:
        raise ValueError(f"position {i} is not masked")
    (d,) = frontier_distances(state, [i])
    eta = float(_jitter(_position_rng(cfg.seed, 0), len(cfg.reference), cfg.noise)[i])
    return _clip(cfg.c_max - cfg.decay * d + eta, cfg.floor, 1.0)


# ---------------------------------------------------------------------------
# count model


@dataclass(frozen=True)
class CountModelConfig:
    order: int = 4
    alpha: float = 0.1
    weights: tuple[float, float, float] = (0.45, 0.35, 0.2)  # left, right, unigram
    seed: int = 0

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if len(self.weights) != 3 or any(w < 0 for w in self.weights):
            raise ValueError("weights must be three nonnegative numbers")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")


@dataclass(frozen=True, eq=False)
class CountModel(Denoiser):
    """Distance-indexed skip-bigram counts in both directions plus a unigram.

    ``left[d, a, v]`` counts ``x[i-d] == a and x[i] == v``; ``right`` is the
    mirror image. A masked position is conditioned on its nearest unmasked
    neighbour on each side when that neighbour lies within ``order`` steps.
    """

    config: CountModelConfig
    vocab: Vocabulary
    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    unigram: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = self.config.alpha
        v = self.vocab.size
        def smooth(c):
            return (c + a) / (c.sum(axis=-1, keepdims=True) + a * v)
        object.__setattr__(self, "_p_left", smooth(self.left.astype(np.float64)))
        object.__setattr__(self, "_p_right", smooth(self.right.astype(np.float64)))
        object.__setattr__(self, "_p_uni", smooth(self.unigram.astype(np.float64)))

    def distribution(self, state: SequenceState, i: int) -> np.ndarray:
        return self._mixture(state, [i])[0]

    def _mixture(self, state, positions):
        toks = state.tokens
        m = state.mask_id
        lo, hi = state.block_span() if not state.finished else (0, len(toks))
        order = self.config.order
        w_left, w_right, w_uni = self.config.weights
        rows = []
        for i in positions:
            parts, weights = [self._p_uni], [w_uni]
            for d in range(1, order + 1):
                j = i - d
                if j < 0:
                    break
                if toks[j] != m:
                    parts.append(self._p_left[d - 1, toks[j]])
                    weights.append(w_left)
                    break
            for d in range(1, order + 1):
                j = i + d
                if j >= hi:
                    break
                if toks[j] != m:
                    parts.append(self._p_right[d - 1, toks[j]])
                    weights.append(w_right)
                    break
            total = sum(weights)
            if total == 0:
                rows.append(np.full(self.vocab.size, 1.0 / self.vocab.size))
                continue
            mix = np.zeros(self.vocab.size)
            for p, w in zip(parts, weights):
                mix += (w / total) * p
            rows.append(mix)
        return np.stack(rows)

    def _predict_positions(self, state, positions):
        probs = self._mixture(state, positions)
        tokens = probs.argmax(axis=1)  # first maximum, i.e. smallest id on ties
        confs = probs[np.arange(len(positions)), tokens]
        return tokens.tolist(), confs.tolist()

    def save(self, path: str | Path) -> None:
        doc = {
            "format": COUNT_MODEL_FORMAT,
            "version": COUNT_MODEL_VERSION,
            "config": {
                "order": self.config.order,
                "alpha": self.config.alpha,
                "weights": list(self.config.weights),
                "seed": self.config.seed,
            },
            "vocab": {
                "size": self.vocab.size,
                "eos_id": self.vocab.eos_id,
                "token_text": list(self.vocab.token_text) if self.vocab.token_text else None,
                "tokenization": self.vocab.tokenization,
                "unk_id": self.vocab.unk_id,
            },
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "unigram": self.unigram.tolist(),
        }
        Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> CountModel:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != COUNT_MODEL_FORMAT or doc.get("version") != COUNT_MODEL_VERSION:
            raise ValueError(
                f"unsupported count model artifact {doc.get('format')!r} v{doc.get('version')!r}, "
                f"expected {COUNT_MODEL_FORMAT!r} v{COUNT_MODEL_VERSION}"
            )
        c = doc["config"]
        v = doc["vocab"]
        vocab = Vocabulary(
            v["size"],
            v["eos_id"],
            tuple(v["token_text"]) if v["token_text"] is not None else None,
            v["tokenization"],
            v["unk_id"],
        )
        cfg = CountModelConfig(c["order"], c["alpha"], tuple(c["weights"]), c["seed"])
        return cls(
            cfg,
            vocab,
            np.asarray(doc["left"], dtype=np.int64),
            np.asarray(doc["right"], dtype=np.int64),
            np.asarray(doc["unigram"], dtype=np.int64),
        )


def train_count_model(cfg: CountModelConfig, corpus: Sequence[Sequence[int]], vocab: Vocabulary) -> CountModel:
    if not corpus:
        raise ValueError("empty corpus")
    v = vocab.size
    left = np.zeros((cfg.order, v, v), dtype=np.int64)
    right = np.zeros((cfg.order, v, v), dtype=np.int64)
    unigram = np.zeros(v, dtype=np.int64)
    for doc in corpus:
        arr = np.asarray(doc, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= v):
            if (arr == vocab.mask_id).any():
                raise ValueError("corpus contains the mask token")
            raise ValueError("corpus contains ids outside the vocabulary")
        np.add.at(unigram, arr, 1)
        for d in range(1, cfg.order + 1):
            if arr.size <= d:
                break
            np.add.at(left[d - 1], (arr[:-d], arr[d:]), 1)
            np.add.at(right[d - 1], (arr[d:], arr[:-d]), 1)
    return CountModel(cfg, vocab, left, right, unigram)
