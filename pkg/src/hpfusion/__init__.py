"""Trainable Hadamard-product fusion operators over a small architecture DSL.

The package couples three layers:

* a text DSL describing one member of the generalized fusion-operator
  family (dims, activation-pair branches, post-fusion MLPs, an ordered
  sum/prod reduction plan),
* an execution engine that compiles a spec into parameters plus
  hand-written forward/backward passes,
* brute-force oracles (explicit core-tensor contraction, finite
  differences, an independent reduction transcription) that verify the
  engine.

`FusionClassifier` exposes the whole stack behind a scikit-learn style
fit/predict interface.
"""

__version__ = "0.1.0"

from .dsl import (
    BranchSpec,
    DESK_DIMS,
    Dims,
    FULL_SCALE_DIMS,
    FusionSpec,
    ParseError,
    PostFusionConfig,
    ReductionPlan,
    ReductionStep,
    builtin_presets,
    parse_spec,
    preset_spec,
    serialize_spec,
    validate_spec,
)
from .engine import (
    ForwardTrace,
    backward,
    forward,
    init_params,
    loss_xent,
    reduce_branches,
)
from .estimator import FusionClassifier
from .search import SearchResult, SearchSpace, grid_nonlinearity_pairs, random_search, run_search
from .tensor_core import (
    ALL_ACTIVATIONS,
    ActivationKind,
    IDENTITY,
    LEAKY_RELU,
    SELU,
    SIGMOID,
    TANH,
)
from .training import (
    Dataset,
    Example,
    Metrics,
    TrainConfig,
    adam_step,
    evaluate,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
    train,
)

__all__ = [
    "ALL_ACTIVATIONS",
    "ActivationKind",
    "BranchSpec",
    "DESK_DIMS",
    "Dataset",
    "Dims",
    "Example",
    "FULL_SCALE_DIMS",
    "ForwardTrace",
    "FusionClassifier",
    "FusionSpec",
    "IDENTITY",
    "LEAKY_RELU",
    "Metrics",
    "ParseError",
    "PostFusionConfig",
    "ReductionPlan",
    "ReductionStep",
    "SELU",
    "SIGMOID",
    "SearchResult",
    "SearchSpace",
    "TANH",
    "TrainConfig",
    "adam_step",
    "backward",
    "builtin_presets",
    "evaluate",
    "forward",
    "generate_synthetic_dataset",
    "grid_nonlinearity_pairs",
    "init_params",
    "load_dataset",
    "loss_xent",
    "parse_spec",
    "preset_spec",
    "random_search",
    "reduce_branches",
    "run_search",
    "save_dataset",
    "serialize_spec",
    "train",
    "validate_spec",
]
