"""Enumerate and rank fusion-operator instantiations.

Two candidate sources: the 5x5 activation-pair grid over one probe
branch, and a seeded random sampler over the wider design space. Both
feed run_search, which screens every candidate with a short training
budget and returns a ranked list.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsl import (
    BranchSpec,
    Dims,
    FusionSpec,
    ReductionPlan,
    ReductionStep,
    serialize_spec,
    validate_spec,
)
from .tensor_core import ALL_ACTIVATIONS, SIGMOID, TANH
from .training import Dataset, TrainConfig, train


@dataclass(frozen=True)
class SearchResult:
    spec_text: str
    val_accuracy: float | None  # None marks a failed (non-finite) candidate
    best_epoch: int | None
    rank: int


def grid_nonlinearity_pairs(base: FusionSpec) -> list[FusionSpec]:
    """All 25 activation pairs on the probe branch (the first branch).

    Emitted in a fixed order: question-side activation outer, visual-side
    inner, both iterating the canonical candidate set.
    """
    if not base.branches:
        raise ValueError("base spec has no branches")
    probe = base.branches[0]
    rest = base.branches[1:]
    out: list[FusionSpec] = []
    for f_q in ALL_ACTIVATIONS:
        for f_v in ALL_ACTIVATIONS:
            branches = (dataclasses.replace(probe, f_q=f_q, f_v=f_v),) + rest
            out.append(dataclasses.replace(base, branches=branches))
    return out


@dataclass(frozen=True)
class SearchSpace:
    """Bounds for the random sampler. d_q, d_v and n_classes stay fixed."""

    base_dims: Dims
    t_q: tuple[int, int] = (4, 8)
    t_v: tuple[int, int] = (4, 8)
    t_o: tuple[int, int] = (4, 8)
    rank: tuple[int, int] = (1, 5)
    plan_shapes: tuple[str, ...] = ("sum_all", "fg", "ps", "two_group")


def _sample_plan(shape: str, ids: tuple[str, ...]) -> ReductionPlan:
    if shape == "fg" and len(ids) >= 2:
        return ReductionPlan(
            steps=(
                ReductionStep(op="sum", members=ids[:-1]),
                ReductionStep(op="prod", members=ids[-1:], squash=SIGMOID),
            )
        )
    if shape == "ps" and len(ids) >= 2:
        return ReductionPlan(
            steps=(
                ReductionStep(op="sum", members=ids[:-1]),
                ReductionStep(op="prod", members=ids[-1:], squash=TANH),
            )
        )
    if shape == "two_group" and len(ids) >= 2:
        half = (len(ids) + 1) // 2
        return ReductionPlan(
            steps=(
                ReductionStep(op="sum", members=ids[:half]),
                ReductionStep(op="prod", members=ids[half:]),
            )
        )
    # sum_all, and the forced fallback whenever only one branch exists
    return ReductionPlan(steps=(ReductionStep(op="sum", members=ids),))


def random_search(space: SearchSpace, seed: int, budget: int) -> list[FusionSpec]:
    """Sample `budget` valid specs from the space, deterministically for a seed."""
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    rng = np.random.default_rng(seed)
    out: list[FusionSpec] = []
    base = space.base_dims
    acts = ALL_ACTIVATIONS
    for _ in range(budget):
        dims = Dims(
            d_q=base.d_q,
            d_v=base.d_v,
            t_q=int(rng.integers(space.t_q[0], space.t_q[1] + 1)),
            t_v=int(rng.integers(space.t_v[0], space.t_v[1] + 1)),
            t_o=int(rng.integers(space.t_o[0], space.t_o[1] + 1)),
            n_classes=base.n_classes,
        )
        r = int(rng.integers(space.rank[0], space.rank[1] + 1))
        ids = tuple(f"b{i}" for i in range(1, r + 1))
        branches = tuple(
            BranchSpec(
                id=bid,
                f_q=acts[int(rng.integers(0, len(acts)))],
                f_v=acts[int(rng.integers(0, len(acts)))],
            )
            for bid in ids
        )
        shape = space.plan_shapes[int(rng.integers(0, len(space.plan_shapes)))]
        spec = FusionSpec(dims=dims, branches=branches, plan=_sample_plan(shape, ids))
        assert not validate_spec(spec)
        out.append(spec)
    return out


def run_search(
    candidates: list[FusionSpec],
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
) -> list[SearchResult]:
    """Screen every candidate with cfg and rank by validation accuracy.

    Candidates are evaluated independently; a candidate that fails (an
    exception or a non-finite score) is kept with val_accuracy None and
    sorted after all scored candidates instead of aborting the sweep.
    """
    if not candidates:
        raise ValueError("no candidates to search")
    scored: list[tuple[str, float | None, int | None]] = []
    for spec in candidates:
        text = serialize_spec(spec)
        try:
            _, metrics = train(spec, train_set, val_set, cfg)
            acc: float | None = metrics.best_val_acc
            best_epoch: int | None = metrics.best_epoch
            blown_up = any(not math.isfinite(e.train_loss) for e in metrics.epochs)
            if not math.isfinite(acc) or blown_up:
                acc, best_epoch = None, None
        except (ValueError, FloatingPointError, OverflowError):
            acc, best_epoch = None, None
        scored.append((text, acc, best_epoch))
    order = sorted(
        scored, key=lambda item: (item[1] is None, -(item[1] or 0.0), item[0])
    )
    return [
        SearchResult(spec_text=text, val_accuracy=acc, best_epoch=best_epoch, rank=i)
        for i, (text, acc, best_epoch) in enumerate(order, start=1)
    ]


def results_to_jsonl(results: list[SearchResult]) -> str:
    lines = [
        json.dumps(
            {
                "rank": r.rank,
                "val_acc": r.val_accuracy,
                "best_epoch": r.best_epoch,
                "spec": r.spec_text,
            }
        )
        for r in results
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def write_results_jsonl(results: list[SearchResult], path: str | Path) -> None:
    Path(path).write_text(results_to_jsonl(results))
