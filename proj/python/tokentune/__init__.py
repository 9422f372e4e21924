"""Selective-token fine-tuning engine."""

from ._tokentune import (
    ConfigError,
    IoError,
    ShapeError,
    checkpoint_header,
    checkpoint_weights,
    default_config,
    dump_classification,
    gen_classification,
    generate_text_corpus,
    load_config,
    run,
    version,
)

__all__ = [
    "ConfigError",
    "IoError",
    "ShapeError",
    "checkpoint_header",
    "checkpoint_weights",
    "default_config",
    "dump_classification",
    "gen_classification",
    "generate_text_corpus",
    "load_config",
    "run",
    "version",
]
