"""Desk-scale training: synthetic teacher-labeled data, Adam, early stopping.

Datasets are stored in a small binary format (little-endian):
magic "FQVD", u32 version=1, u32 n, u32 d_q, u32 d_v, u32 n_classes,
then n records of (d_q float64, d_v float64, u32 label). Per-epoch
metrics are emitted as JSON lines {epoch, train_loss, train_acc, val_acc}.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsl import FusionSpec
from .engine import GradStore, ParamStore, backward, forward, init_params, loss_xent

_MAGIC = b"FQVD"
_VERSION = 1


@dataclass
class Example:
    q: np.ndarray
    v: np.ndarray
    label: int


@dataclass
class Dataset:
    """Examples plus the header every consumer validates against."""

    d_q: int
    d_v: int
    n_classes: int
    examples: list[Example]

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class Metrics:
    epochs: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    wall_time_s: float = 0.0

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "train_acc": e.train_acc,
                    "val_acc": e.val_acc,
                }
            )
            for e in self.epochs
        ]
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def generate_synthetic_dataset(
    teacher: FusionSpec,
    teacher_seed: int,
    n: int,
    input_scale: float,
    data_seed: int,
) -> Dataset:
    """Draw (q, v) pairs i.i.d. normal and label each by the teacher's argmax.

    The teacher is a fixed instance of the same operator family, so the
    labeling function is realizable by any student with matching dims.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    params = init_params(teacher, teacher_seed)
    rng = np.random.default_rng(data_seed)
    d = teacher.dims
    examples: list[Example] = []
    for _ in range(n):
        q = rng.normal(0.0, input_scale, size=d.d_q)
        v = rng.normal(0.0, input_scale, size=d.d_v)
        trace = forward(teacher, params, q, v, train_mode=False)
        examples.append(Example(q=q, v=v, label=int(np.argmax(trace.logits))))
    return Dataset(d_q=d.d_q, d_v=d.d_v, n_classes=d.n_classes, examples=examples)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<IIIII", _VERSION, len(dataset.examples), dataset.d_q, dataset.d_v,
                dataset.n_classes,
            )
        )
        for ex in dataset.examples:
            fh.write(np.ascontiguousarray(ex.q, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ex.v, dtype="<f8").tobytes())
            fh.write(struct.pack("<I", ex.label))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic {raw[:4]!r})")
    version, n, d_q, d_v, n_classes = struct.unpack("<IIIII", raw[4:24])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    offset = 24
    record = 8 * (d_q + d_v) + 4
    expected = offset + n * record
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated dataset ({len(raw)} bytes, expected {expected})")
    examples: list[Example] = []
    for _ in range(n):
        q = np.frombuffer(raw, dtype="<f8", count=d_q, offset=offset).astype(np.float64)
        offset += 8 * d_q
        v = np.frombuffer(raw, dtype="<f8", count=d_v, offset=offset).astype(np.float64)
        offset += 8 * d_v
        (label,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        examples.append(Example(q=q, v=v, label=int(label)))
    return Dataset(d_q=d_q, d_v=d_v, n_classes=n_classes, examples=examples)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ParamStore) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )


def adam_step(
    params: ParamStore,
    grads: GradStore,
    state: AdamState,
    cfg: TrainConfig,
    t: int,
) -> tuple[ParamStore, AdamState]:
    """One Adam update (bias-corrected moment EMAs); returns new params/state."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    new_params: ParamStore = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name in sorted(params):
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = params[name] - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _check_dims(dataset: Dataset, spec: FusionSpec, which: str) -> None:
    d = spec.dims
    if (dataset.d_q, dataset.d_v) != (d.d_q, d.d_v) or dataset.n_classes != d.n_classes:
        raise ValueError(
            f"{which} dataset header ({dataset.d_q}, {dataset.d_v}, "
            f"{dataset.n_classes} classes) does not match spec dims "
            f"({d.d_q}, {d.d_v}, {d.n_classes} classes)"
        )


def evaluate(spec: FusionSpec, params: ParamStore, dataset: Dataset) -> float:
    """Top-1 accuracy in evaluation mode; argmax ties go to the smallest class."""
    _check_dims(dataset, spec, "evaluation")
    hits = 0
    for ex in dataset.examples:
        trace = forward(spec, params, ex.q, ex.v, train_mode=False)
        if int(np.argmax(trace.logits)) == ex.label:
            hits += 1
    return hits / len(dataset.examples)


def train(
    spec: FusionSpec,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig,
) -> tuple[ParamStore, Metrics]:
    """Minibatch Adam over shuffled epochs; returns the best-validation params.

    Batch gradients are means over the batch (summed in example order, so
    the run is bitwise reproducible). Training never halts early: all
    epochs run and the parameters from the best validation epoch win.
    """
    if not train_set.examples or not val_set.examples:
        raise ValueError("train and validation sets must be nonempty")
    _check_dims(train_set, spec, "training")
    _check_dims(val_set, spec, "validation")

    start = time.perf_counter()
    params = init_params(spec, cfg.seed)
    state = AdamState.zeros_like(params)
    metrics = Metrics()
    best_params = {k: a.copy() for k, a in params.items()}
    best_acc = -1.0
    step = 0
    n = len(train_set.examples)
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum = 0.0
        hit_sum = 0
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            grad_sum: GradStore = {k: np.zeros_like(a) for k, a in params.items()}
            for drop_seed, idx in enumerate(batch):
                ex = train_set.examples[idx]
                trace = forward(
                    spec, params, ex.q, ex.v, train_mode=True,
                    seed=_fold_seed(cfg.seed, epoch, step, drop_seed),
                )
                loss_sum += loss_xent(trace, ex.label)
                if int(np.argmax(trace.logits)) == ex.label:
                    hit_sum += 1
                grads = backward(spec, params, trace, ex.label)
                for name in grad_sum:
                    grad_sum[name] += grads[name]
            scale = 1.0 / len(batch)
            for name in grad_sum:
                grad_sum[name] *= scale
            step += 1
            params, state = adam_step(params, grad_sum, state, cfg, step)
        val_acc = evaluate(spec, params, val_set)
        metrics.epochs.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=loss_sum / n,
                train_acc=hit_sum / n,
                val_acc=val_acc,
            )
        )
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = {k: a.copy() for k, a in params.items()}
            metrics.best_epoch = epoch
    metrics.best_val_acc = best_acc
    metrics.wall_time_s = time.perf_counter() - start
    return best_params, metrics


def _fold_seed(*parts: int) -> int:
    # Distinct dropout stream per (run seed, epoch, step, example).
    h = 0
    for p in parts:
        h = (h * 1000003 + int(p)) % (2**63)
    return h
