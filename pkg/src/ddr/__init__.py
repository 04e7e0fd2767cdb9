"""Dense retrieval with a per-domain backbone and a shared, insertable relevance module."""

from .corpus import DomainSpec, Vocabulary, generate_synthetic_benchmark, tokenize
from .encoder import EncoderConfig, count_parameters, encode, init_backbone
from .rem import RemConfig, init_rem, insert_rem, merge_lora, partition_parameters

__all__ = [
    "DomainSpec",
    "EncoderConfig",
    "RemConfig",
    "Vocabulary",
    "count_parameters",
    "encode",
    "generate_synthetic_benchmark",
    "init_backbone",
    "init_rem",
    "insert_rem",
    "merge_lora",
    "partition_parameters",
    "tokenize",
]

__version__ = "0.1.0"
