"""Run configuration: a single JSON document validated into dataclasses.

Validation errors carry the dotted path of the offending field, e.g.
``engine.policy.tau: must lie in (0, 1), got 1.5``.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .corpus import Corpus, load_corpus, make_eval_suite
from .core import Vocabulary
from .denoiser import CountModel, CountModelConfig, Denoiser, FrontierOracle, FrontierOracleConfig, train_count_model
from .draftgraph import DraftGraph, TopologyConfig
from .engine import MODES, EngineConfig
from .policies import KINDS, PolicyConfig


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _field(section: dict, key: str, path: str, kind, default=Any, check=None, message=""):
    full = f"{path}.{key}" if path else key
    if key not in section:
        if default is Any:
            raise ConfigError(full, "required field is missing")
        return default
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and (not isinstance(value, kind) or (kind is int and isinstance(value, bool))):
        raise ConfigError(full, f"expected {getattr(kind, '__name__', kind)}, got {value!r}")
    if check is not None and not check(value):
        raise ConfigError(full, f"{message}, got {value!r}")
    return value


def _unknown(section: dict, allowed: set[str], path: str):
    extra = sorted(set(section) - allowed)
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown field")


@dataclass(frozen=True)
class DenoiserSpec:
    kind: str
    prompt_len: int
    vocab_size: int = 32
    c_max: float = 0.99
    decay: float = 0.02
    noise: float = 0.0
    correctness: float = 1.0
    floor: float = 0.05
    drift: bool = False
    corpus: Path | None = None
    tokenization: str = "char"
    min_count: int = 1
    order: int = 4
    alpha: float = 0.1
    weights: tuple[float, float, float] = (0.45, 0.35, 0.2)
    model: Path | None = None


@dataclass(frozen=True)
class MetricsSpec:
    k_values: tuple[int, ...] = (5, 7, 9)
    horizons: tuple[int, ...] = tuple(range(1, 11))
    buckets: int = 10


@dataclass(frozen=True)
class RunConfig:
    denoiser: DenoiserSpec
    engine: EngineConfig
    metrics: MetricsSpec = field(default_factory=MetricsSpec)
    replicates: int = 1
    seed: int = 0
    out: Path | None = None
    sweep: dict[str, list] = field(default_factory=dict)

    def replicate_seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.replicates)]


GRID_KEYS = {
    "depth": int,
    "branch": int,
    "tau": float,
    "policy": str,
    "noise": float,
    "correctness": float,
}


def _resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else (base / p)


def parse_denoiser(d: dict, base: Path) -> DenoiserSpec:
    path = "denoiser"
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    _unknown(d, set(DenoiserSpec.__dataclass_fields__), path)
    kind = _field(d, "kind", path, str, check=lambda v: v in ("frontier", "count"), message="must be 'frontier' or 'count'")
    spec = DenoiserSpec(
        kind=kind,
        prompt_len=_field(d, "prompt_len", path, int, 8, lambda v: v >= 0, "must be >= 0"),
        vocab_size=_field(d, "vocab_size", path, int, 32, lambda v: v >= 2, "must be >= 2"),
        c_max=_field(d, "c_max", path, float, 0.99, lambda v: 0 < v <= 1, "must lie in (0, 1]"),
        decay=_field(d, "decay", path, float, 0.02, lambda v: v >= 0, "must be >= 0"),
        noise=_field(d, "noise", path, float, 0.0, lambda v: v >= 0, "must be >= 0"),
        correctness=_field(d, "correctness", path, float, 1.0, lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
        floor=_field(d, "floor", path, float, 0.05, lambda v: 0 < v <= 1, "must lie in (0, 1]"),
        drift=_field(d, "drift", path, bool, False),
        corpus=_resolve(base, _field(d, "corpus", path, str, None)),
        tokenization=_field(d, "tokenization", path, str, "char", lambda v: v in ("char", "whitespace"), "must be 'char' or 'whitespace'"),
        min_count=_field(d, "min_count", path, int, 1, lambda v: v >= 1, "must be >= 1"),
        order=_field(d, "order", path, int, 4, lambda v: v >= 1, "must be >= 1"),
        alpha=_field(d, "alpha", path, float, 0.1, lambda v: v > 0, "must be > 0"),
        weights=tuple(_field(d, "weights", path, list, [0.45, 0.35, 0.2],
                             lambda v: len(v) == 3 and all(isinstance(x, (int, float)) and x >= 0 for x in v)
                             and abs(sum(v) - 1) < 1e-9, "must be three nonnegative numbers summing to 1")),
        model=_resolve(base, _field(d, "model", path, str, None)),
    )
    if spec.floor > spec.c_max:
        raise ConfigError(f"{path}.floor", f"must not exceed c_max={spec.c_max}, got {spec.floor}")
    if kind == "count" and spec.corpus is None and spec.model is None:
        raise ConfigError(f"{path}.corpus", "count denoiser needs a corpus or a saved model")
    for key in ("corpus", "model"):
        p = getattr(spec, key)
        if p is not None and not p.exists():
            raise ConfigError(f"{path}.{key}", f"file {str(p)!r} does not exist")
    return spec


def parse_policy(d: dict, path: str) -> PolicyConfig:
    _unknown(d, {"kind", "tau", "anchor_tau", "window", "fallback"}, path)
    return PolicyConfig(
        kind=_field(d, "kind", path, str, "confidence", lambda v: v in KINDS, f"must be one of {KINDS}"),
        tau=_field(d, "tau", path, float, 0.9, lambda v: 0 < v < 1, "must lie in (0, 1)"),
        anchor_tau=_field(d, "anchor_tau", path, float, 0.9, lambda v: 0 < v < 1, "must lie in (0, 1)"),
        window=_field(d, "window", path, int, 1, lambda v: v >= 0, "must be >= 0"),
        fallback=_field(d, "fallback", path, str, "top1", lambda v: v in ("top1", "stall_error"), "must be 'top1' or 'stall_error'"),
    )


def parse_engine(d: dict, base: Path) -> EngineConfig:
    path = "engine"
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    _unknown(d, {"mode", "block_len", "max_new_tokens", "eos_stop", "policy", "topology", "graph"}, path)
    topo = _field(d, "topology", path, dict, {})
    _unknown(topo, {"depth", "branch", "budget"}, f"{path}.topology")
    tpath = f"{path}.topology"
    topology = TopologyConfig(
        depth=_field(topo, "depth", tpath, int, 3, lambda v: v >= 0, "must be >= 0"),
        branch=_field(topo, "branch", tpath, int, 0, lambda v: v >= 0, "must be >= 0"),
        budget=_field(topo, "budget", tpath, (int, type(None)), None, lambda v: v is None or v >= 1, "must be >= 1"),
    )
    graph = None
    graph_path = _resolve(base, _field(d, "graph", path, str, None))
    if graph_path is not None:
        if not graph_path.exists():
            raise ConfigError(f"{path}.graph", f"file {str(graph_path)!r} does not exist")
        try:
            graph = DraftGraph.from_text(graph_path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"{path}.graph", str(exc)) from exc
    return EngineConfig(
        policy=parse_policy(_field(d, "policy", path, dict, {}), f"{path}.policy"),
        topology=topology,
        block_len=_field(d, "block_len", path, int, 32, lambda v: v >= 1, "must be >= 1"),
        max_new_tokens=_field(d, "max_new_tokens", path, int, 512, lambda v: v >= 1, "must be >= 1"),
        eos_stop=_field(d, "eos_stop", path, bool, True),
        mode=_field(d, "mode", path, str, "psd", lambda v: v in MODES, f"must be one of {MODES}"),
        graph=graph,
    )


def parse_metrics(d: dict) -> MetricsSpec:
    path = "metrics"
    _unknown(d, {"k_values", "horizons", "buckets"}, path)
    ks = _field(d, "k_values", path, list, [5, 7, 9], lambda v: v and all(isinstance(x, int) and x >= 1 for x in v), "must be a non-empty list of integers >= 1")
    hs = _field(d, "horizons", path, list, list(range(1, 11)), lambda v: v and all(isinstance(x, int) and x >= 1 for x in v), "must be a non-empty list of integers >= 1")
    buckets = _field(d, "buckets", path, int, 10, lambda v: v >= 1, "must be >= 1")
    return MetricsSpec(tuple(ks), tuple(hs), buckets)


def parse_grid_values(key: str, values: list, path: str) -> list:
    if key not in GRID_KEYS:
        raise ConfigError(path, f"unknown grid axis {key!r}; expected one of {sorted(GRID_KEYS)}")
    if not values:
        raise ConfigError(path, "grid axis has no values")
    kind = GRID_KEYS[key]
    out = []
    for v in values:
        try:
            out.append(kind(v))
        except (TypeError, ValueError):
            raise ConfigError(path, f"cannot read {v!r} as {kind.__name__}") from None
    return out


def parse_run_config(doc: dict, base: Path = Path(".")) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    _unknown(doc, {"denoiser", "engine", "metrics", "replicates", "seed", "out", "sweep"}, "")
    sweep = _field(doc, "sweep", "", dict, {})
    grid = {k: parse_grid_values(k, v if isinstance(v, list) else [v], f"sweep.{k}") for k, v in sweep.items()}
    return RunConfig(
        denoiser=parse_denoiser(_field(doc, "denoiser", "", dict), base),
        engine=parse_engine(_field(doc, "engine", "", dict, {}), base),
        metrics=parse_metrics(_field(doc, "metrics", "", dict, {})),
        replicates=_field(doc, "replicates", "", int, 1, lambda v: v >= 1, "must be >= 1"),
        seed=_field(doc, "seed", "", int, 0),
        out=_resolve(base, _field(doc, "out", "", str, None)),
        sweep=grid,
    )


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file {str(path)!r} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return parse_run_config(doc, path.parent)


def apply_grid_point(cfg: RunConfig, point: dict) -> RunConfig:
    """Return ``cfg`` with one sweep grid point substituted in."""
    engine, den = cfg.engine, cfg.denoiser
    if "depth" in point or "branch" in point:
        topo = replace(engine.topology, **{k: point[k] for k in ("depth", "branch") if k in point})
        engine = replace(engine, topology=topo, graph=None)
    if "tau" in point or "policy" in point:
        changes = {}
        if "tau" in point:
            changes["tau"] = changes["anchor_tau"] = point["tau"]
        if "policy" in point:
            if point["policy"] not in KINDS:
                raise ConfigError("sweep.policy", f"must be one of {KINDS}, got {point['policy']!r}")
            changes["kind"] = point["policy"]
        try:
            engine = replace(engine, policy=replace(engine.policy, **changes))
        except ValueError as exc:
            raise ConfigError("sweep", str(exc)) from exc
    for key in ("noise", "correctness"):
        if key in point:
            if den.kind != "frontier":
                raise ConfigError(f"sweep.{key}", "only applies to the frontier denoiser")
            den = replace(den, **{key: point[key]})
    return replace(cfg, engine=engine, denoiser=den)


# ---------------------------------------------------------------------------
# materializing denoisers and prompts


@dataclass
class Instance:
    denoiser: Denoiser
    prompt: list[int]
    seed: int


def _count_model(spec: DenoiserSpec) -> tuple[CountModel, Corpus | None]:
    corpus = load_corpus(spec.corpus, spec.tokenization, spec.min_count) if spec.corpus else None
    if spec.model is not None:
        return CountModel.load(spec.model), corpus
    cfg = CountModelConfig(spec.order, spec.alpha, spec.weights)
    return train_count_model(cfg, corpus.training_sequences(), corpus.vocab), corpus


def build_instances(cfg: RunConfig) -> list[Instance]:
    """One denoiser + prompt per replicate, seeded by ``seed + replicate``."""
    spec = cfg.denoiser
    n_total = spec.prompt_len + cfg.engine.max_new_tokens
    out = []
    if spec.kind == "count":
        model, corpus = _count_model(spec)
        if corpus is None:
            raise ConfigError("denoiser.corpus", "prompts are drawn from the corpus; it is required")
        for seed in cfg.replicate_seeds():
            (prompt, _), = make_eval_suite(corpus, 1, spec.prompt_len, seed)
            out.append(Instance(model, prompt, seed))
        return out
    corpus = load_corpus(spec.corpus, spec.tokenization, spec.min_count) if spec.corpus else None
    vocab = corpus.vocab if corpus else Vocabulary(spec.vocab_size, spec.vocab_size - 1)
    for seed in cfg.replicate_seeds():
        if corpus is not None:
            (prompt, cont), = make_eval_suite(corpus, 1, spec.prompt_len, seed)
            reference = (prompt + cont + [vocab.eos_id] * n_total)[:n_total]
        else:
            rng = random.Random(seed)
            # EOS-free reference so noise-free runs decode to full length
            reference = [rng.randrange(vocab.size - 1) for _ in range(n_total)]
        ocfg = FrontierOracleConfig(
            tuple(reference), spec.c_max, spec.decay, spec.noise, spec.correctness, spec.floor, seed, spec.drift
        )
        out.append(Instance(FrontierOracle(ocfg, vocab), reference[:spec.prompt_len], seed))
    return out
