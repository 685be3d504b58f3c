"""Decode traces: one record per engine iteration, serialized as JSONL.

Line 1 is a header, then one ``iter`` line per iteration, then an ``end``
line with the final tokens. Token ids are integers; confidences are decimal
strings with nine fractional digits so files are byte-stable across
platforms.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .draftgraph import DraftGraph

TRACE_SCHEMA = "psd-trace"
TRACE_VERSION = 1

# pos -> (token, confidence)
Preds = dict[int, tuple[int, float]]


class TraceSchemaError(ValueError):
    pass


@dataclass
class IterationRecord:
    step: int
    block: int
    forward_passes: int
    batch_size: int
    spatial_preds: Preds
    spatial: dict[int, int]
    sigma: list[int] = field(default_factory=list)
    nodes: list[frozenset[int]] = field(default_factory=list)
    node_edges: list[tuple[int, int]] = field(default_factory=list)
    verification: list[Preds] = field(default_factory=list)
    accepted: list[int] = field(default_factory=list)
    k_star: int | None = None
    speculative: dict[int, int] = field(default_factory=dict)
    verifier: dict[int, int] = field(default_factory=dict)

    @property
    def drafted(self) -> bool:
        return bool(self.nodes)

    def commits_in_order(self):
        """(group, {pos: token}) in the order the engine applied them."""
        yield "spatial", self.spatial
        yield "speculative", self.speculative
        yield "verifier_commit", self.verifier

    @property
    def committed(self) -> int:
        return len(self.spatial) + len(self.speculative) + len(self.verifier)


@dataclass
class DecodeTrace:
    mode: str
    policy: dict
    graph: DraftGraph
    prompt: list[int]
    block_len: int
    max_new_tokens: int
    eos_id: int
    mask_id: int
    eos_stop: bool
    seed: int
    iterations: list[IterationRecord] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    eos_position: int | None = None
    eos_iteration: int | None = None

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    @property
    def forward_passes(self) -> int:
        return sum(r.forward_passes for r in self.iterations)

    def block_span(self, block: int) -> tuple[int, int]:
        start = self.prompt_len + block * self.block_len
        return start, min(start + self.block_len, self.prompt_len + self.max_new_tokens)

    def to_jsonl(self) -> str:
        lines = [_dump(self._header())]
        lines.extend(_dump(_encode_iteration(r)) for r in self.iterations)
        lines.append(_dump({
            "type": "end",
            "tokens": self.tokens,
            "eos_position": self.eos_position,
            "eos_iteration": self.eos_iteration,
        }))
        return "\n".join(lines) + "\n"

    def _header(self) -> dict:
        return {
            "type": "header",
            "schema": TRACE_SCHEMA,
            "version": TRACE_VERSION,
            "mode": self.mode,
            "policy": self.policy,
            "graph": self.graph.to_json(),
            "prompt": self.prompt,
            "block_len": self.block_len,
            "max_new_tokens": self.max_new_tokens,
            "eos_id": self.eos_id,
            "mask_id": self.mask_id,
            "eos_stop": self.eos_stop,
            "seed": self.seed,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str) -> DecodeTrace:
        lines = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].get("type") != "header":
            raise TraceSchemaError("trace does not start with a header record")
        head = lines[0]
        if head.get("schema") != TRACE_SCHEMA or head.get("version") != TRACE_VERSION:
            raise TraceSchemaError(
                f"trace schema {head.get('schema')!r} version {head.get('version')!r} is not supported; "
                f"reader expects {TRACE_SCHEMA!r} version {TRACE_VERSION}"
            )
        trace = cls(
            mode=head["mode"],
            policy=head["policy"],
            graph=DraftGraph.from_json(head["graph"]),
            prompt=head["prompt"],
            block_len=head["block_len"],
            max_new_tokens=head["max_new_tokens"],
            eos_id=head["eos_id"],
            mask_id=head["mask_id"],
            eos_stop=head["eos_stop"],
            seed=head["seed"],
        )
        for rec in lines[1:]:
            kind = rec.get("type")
            if kind == "iter":
                trace.iterations.append(_decode_iteration(rec))
            elif kind == "end":
                trace.tokens = rec["tokens"]
                trace.eos_position = rec["eos_position"]
                trace.eos_iteration = rec["eos_iteration"]
            else:
                raise TraceSchemaError(f"unknown record type {kind!r}")
        return trace

    @classmethod
    def read(cls, path: str | Path) -> DecodeTrace:
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False)


def fmt_conf(c: float) -> str:
    return f"{c:.9f}"


def _enc_preds(preds: Preds) -> list:
    return [[p, t, fmt_conf(c)] for p, (t, c) in sorted(preds.items())]


def _dec_preds(rows: Iterable) -> Preds:
    return {int(p): (int(t), float(c)) for p, t, c in rows}


def _enc_tokens(d: dict[int, int]) -> list:
    return [[p, t] for p, t in d.items()]


def _encode_iteration(r: IterationRecord) -> dict:
    return {
        "type": "iter",
        "t": r.step,
        "block": r.block,
        "forward_passes": r.forward_passes,
        "batch_size": r.batch_size,
        "spatial_preds": _enc_preds(r.spatial_preds),
        "spatial": _enc_tokens(r.spatial),
        "sigma": r.sigma,
        "nodes": [sorted(s) for s in r.nodes],
        "node_edges": [list(e) for e in r.node_edges],
        "verification": [_enc_preds(v) for v in r.verification],
        "accepted": r.accepted,
        "k_star": r.k_star,
        "speculative": _enc_tokens(r.speculative),
        "verifier": _enc_tokens(r.verifier),
    }


def _decode_iteration(d: dict) -> IterationRecord:
    return IterationRecord(
        step=d["t"],
        block=d["block"],
        forward_passes=d["forward_passes"],
        batch_size=d["batch_size"],
        spatial_preds=_dec_preds(d["spatial_preds"]),
        spatial={int(p): int(t) for p, t in d["spatial"]},
        sigma=list(d["sigma"]),
        nodes=[frozenset(s) for s in d["nodes"]],
        node_edges=[tuple(e) for e in d["node_edges"]],
        verification=[_dec_preds(v) for v in d["verification"]],
        accepted=list(d["accepted"]),
        k_star=d["k_star"],
        speculative={int(p): int(t) for p, t in d["speculative"]},
        verifier={int(p): int(t) for p, t in d["verifier"]},
    )
