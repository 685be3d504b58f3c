"""Text ingestion, vocabulary construction and prompt/reference suites."""
from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .core import Vocabulary

EOS_TEXT = "<eos>"
UNK_TEXT = "<unk>"
VOCAB_HEADER = "# psd-vocab v1"


def normalize(text: str, tokenization: str) -> str:
    text = text.rstrip("\r\n")
    if tokenization == "whitespace":
        return " ".join(text.split())
    return text


def _pieces(text: str, tokenization: str) -> list[str]:
    if tokenization == "char":
        return list(text)
    if tokenization == "whitespace":
        return text.split()
    raise ValueError(f"unknown tokenization {tokenization!r}")


def build_vocab(texts: Sequence[str], tokenization: str = "char", min_count: int = 1) -> Vocabulary:
    vocab, _ = build_vocab_with_counts(texts, tokenization, min_count)
    return vocab


def build_vocab_with_counts(texts, tokenization="char", min_count=1) -> tuple[Vocabulary, list[int]]:
    if not texts:
        raise ValueError("no texts to build a vocabulary from")
    counts = Counter()
    for text in texts:
        counts.update(_pieces(normalize(text, tokenization), tokenization))
    kept = sorted((tok for tok, c in counts.items() if c >= min_count), key=lambda tok: (-counts[tok], tok))
    if not kept:
        raise ValueError(f"no token reaches min_count={min_count}")
    dropped = sum(c for tok, c in counts.items() if c < min_count)
    token_text = list(kept)
    freq = [counts[t] for t in kept]
    unk_id = None
    if dropped:
        unk_id = len(token_text)
        token_text.append(UNK_TEXT)
        freq.append(dropped)
    eos_id = len(token_text)
    token_text.append(EOS_TEXT)
    freq.append(len(texts))
    vocab = Vocabulary(len(token_text), eos_id, tuple(token_text), tokenization, unk_id)
    return vocab, freq


def write_vocab(vocab: Vocabulary, counts: Sequence[int], path: str | Path) -> None:
    lines = [f"{VOCAB_HEADER} tokenization={vocab.tokenization}"]
    for i, (tok, c) in enumerate(zip(vocab.token_text, counts)):
        lines.append(f"{i}\t{json.dumps(tok)}\t{c}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_vocab(path: str | Path) -> tuple[Vocabulary, list[int]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(VOCAB_HEADER):
        raise ValueError(f"{path}: not a vocabulary table")
    tokenization = lines[0].split("tokenization=")[1].strip()
    toks, counts = [], []
    for ln in lines[1:]:
        i, tok, c = ln.split("\t")
        if int(i) != len(toks):
            raise ValueError(f"{path}: ids must be consecutive")
        toks.append(json.loads(tok))
        counts.append(int(c))
    eos_id = toks.index(EOS_TEXT)
    unk_id = toks.index(UNK_TEXT) if UNK_TEXT in toks else None
    return Vocabulary(len(toks), eos_id, tuple(toks), tokenization, unk_id), counts


@dataclass(frozen=True)
class Corpus:
    documents: tuple[tuple[int, ...], ...]
    vocab: Vocabulary
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for doc in self.documents:
            if any(not 0 <= t < self.vocab.size for t in doc):
                raise ValueError("document contains ids outside the vocabulary")

    def training_sequences(self, with_eos: bool = True) -> list[list[int]]:
        tail = [self.vocab.eos_id] if with_eos else []
        return [list(d) + tail for d in self.documents]


def corpus_from_texts(texts: Sequence[str], tokenization: str = "char", min_count: int = 1, source: str = "<memory>") -> Corpus:
    texts = [normalize(t, tokenization) for t in texts]
    texts = [t for t in texts if t]
    vocab = build_vocab(texts, tokenization, min_count)
    docs = tuple(tuple(vocab.encode(t)) for t in texts)
    return Corpus(docs, vocab, {"source": source, "tokenization": tokenization, "min_count": min_count})


def load_corpus(path: str | Path, tokenization: str = "char", min_count: int = 1) -> Corpus:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return corpus_from_texts(lines, tokenization, min_count, source=str(path))


def make_eval_suite(corpus: Corpus, n_prompts: int, prompt_len: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """Seeded (prompt, reference-continuation) pairs; the reference ends with EOS."""
    if n_prompts < 0:
        raise ValueError("n_prompts must be >= 0")
    if n_prompts == 0:
        return []
    eligible = [d for d in corpus.documents if len(d) > prompt_len]
    if not eligible:
        raise ValueError(f"no document is longer than prompt_len={prompt_len}")
    rng = random.Random(seed)
    suite = []
    for _ in range(n_prompts):
        doc = eligible[rng.randrange(len(eligible))]
        suite.append((list(doc[:prompt_len]), list(doc[prompt_len:]) + [corpus.vocab.eos_id]))
    return suite
