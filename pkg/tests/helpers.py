"""Shared generators and tolerance helpers for the test suite."""

from __future__ import annotations

import numpy as np

from hpfusion.dsl import (
    BranchSpec,
    Dims,
    FusionSpec,
    PostFusionConfig,
    ReductionPlan,
    ReductionStep,
)
from hpfusion.oracle import well_conditioned_instance  # noqa: F401  (re-export)
from hpfusion.tensor_core import ALL_ACTIVATIONS, SIGMOID, TANH


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def random_dims(rng: np.random.Generator, classes_max: int = 6) -> Dims:
    return Dims(
        d_q=int(rng.integers(2, 7)),
        d_v=int(rng.integers(2, 7)),
        t_q=int(rng.integers(2, 7)),
        t_v=int(rng.integers(2, 7)),
        t_o=int(rng.integers(2, 5)),
        n_classes=int(rng.integers(2, classes_max + 1)),
    )


def random_plan(rng: np.random.Generator, ids: tuple[str, ...], allow_squash: bool = True):
    """A random partition of ids into ordered sum/prod steps."""
    ids = list(ids)
    rng.shuffle(ids)
    steps = []
    while ids:
        take = int(rng.integers(1, len(ids) + 1))
        members, ids = tuple(ids[:take]), ids[take:]
        op = "sum" if rng.random() < 0.5 else "prod"
        squash = None
        if allow_squash and rng.random() < 0.4:
            squash = ALL_ACTIVATIONS[int(rng.integers(0, len(ALL_ACTIVATIONS)))]
        steps.append(ReductionStep(op=op, members=members, squash=squash))
    return ReductionPlan(steps=tuple(steps))


def random_spec(rng: np.random.Generator, max_rank: int = 4, with_post: bool = True) -> FusionSpec:
    """A random valid spec drawn from the full grammar."""
    rank = int(rng.integers(1, max_rank + 1))
    ids = tuple(f"b{i}" for i in range(1, rank + 1))
    branches = []
    for bid in ids:
        post = PostFusionConfig()
        if with_post and rng.random() < 0.3:
            post = PostFusionConfig(
                n_layers=int(rng.integers(1, 7)),
                hidden=int(rng.integers(1, 9)),
                skip_period=int(rng.integers(1, 4)),
                dropout=float(rng.choice([0.0, 0.0, 0.1, 0.5])),
            )
        branches.append(
            BranchSpec(
                id=bid,
                f_q=ALL_ACTIVATIONS[int(rng.integers(0, 5))],
                f_v=ALL_ACTIVATIONS[int(rng.integers(0, 5))],
                post=post,
            )
        )
    return FusionSpec(
        dims=random_dims(rng),
        branches=tuple(branches),
        plan=random_plan(rng, ids),
    )


def gated_plan(ids: tuple[str, ...], squash) -> ReductionPlan:
    return ReductionPlan(
        steps=(
            ReductionStep(op="sum", members=ids[:-1]),
            ReductionStep(op="prod", members=ids[-1:], squash=squash),
        )
    )


def sum_all_plan(ids: tuple[str, ...]) -> ReductionPlan:
    return ReductionPlan(steps=(ReductionStep(op="sum", members=ids),))


def desk_fg_spec(dims: Dims | None = None, rank: int = 3) -> FusionSpec:
    """Feature-gating preset resized to desk dims."""
    from hpfusion.dsl import DESK_DIMS, preset_spec

    return preset_spec("ne_fg", dims=dims or DESK_DIMS, rank=rank)


