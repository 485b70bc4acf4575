"""Graph-regularized embedding training at desk scale.

Trains a feed-forward embedding network with a sampled-softmax,
label-smoothed classification loss plus a weighted neighbor-distance
regularizer over a similarity graph built from click logs, and evaluates
the embeddings with kNN Top-k and triplet-margin protocols.
"""

from graphreg.errors import (
    DegenerateInputError,
    GraphRegError,
    InvalidArgumentError,
    ParseError,
    PreconditionError,
    SchemaError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateInputError",
    "GraphRegError",
    "InvalidArgumentError",
    "ParseError",
    "PreconditionError",
    "SchemaError",
    "TrainingDivergedError",
]
