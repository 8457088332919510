"""Hybrid dense + lexicon retrieval: encode, index, search and evaluate."""

import json

from ._unifier import (
    Engine,
    Model,
    evaluate,
    quantize,
    quantize_weight,
    set_thread_count,
)
from ._unifier import generate_synth as _generate_synth
from ._unifier import train_pipeline as _train_pipeline

__all__ = [
    "Engine",
    "Model",
    "evaluate",
    "generate_synth",
    "quantize",
    "quantize_weight",
    "set_thread_count",
    "train_pipeline",
]


def generate_synth(**config):
    """Synthetic corpus, queries and qrels; keyword names follow the synth config."""
    return _generate_synth(json.dumps(config))


def train_pipeline(config, corpus, queries, qrels, run_dir):
    """Runs warmup, dual mining and continual training; returns (warmup, final) models."""
    return _train_pipeline(json.dumps(config), corpus, queries, qrels, str(run_dir))
