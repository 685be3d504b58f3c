"""Parallel speculative decoding for masked-diffusion language models."""
from .core import SequenceState, Vocabulary, apply_commits, masked_positions
from .denoiser import (
    CountModel,
    CountModelConfig,
    FrontierOracle,
    FrontierOracleConfig,
    train_count_model,
)
from .draftgraph import DraftGraph, TopologyConfig, build_topology, calibrate_topology
from .engine import EngineConfig, decode, decode_greedy_only, decode_spatial_only
from .metrics import audit_trace, build_report, tpf
from .policies import PolicyConfig
from .trace import DecodeTrace

__all__ = [
    "CountModel",
    "CountModelConfig",
    "DecodeTrace",
    "DraftGraph",
    "EngineConfig",
    "FrontierOracle",
    "FrontierOracleConfig",
    "PolicyConfig",
    "SequenceState",
    "TopologyConfig",
    "Vocabulary",
    "apply_commits",
    "audit_trace",
    "build_report",
    "build_topology",
    "calibrate_topology",
    "decode",
    "decode_greedy_only",
    "decode_spatial_only",
    "masked_positions",
    "tpf",
    "train_count_model",
]
