"""Brute-force reference implementations used only for verification.

Everything here is written with explicit index loops over Python floats
(plus ``math`` for transcendentals) and deliberately shares no kernel
code with the engine, so agreement between the two routes is evidence
of correctness rather than of shared bugs. These run at desk-scale
dimensions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dsl import Dims, FusionSpec, ReductionPlan
from .engine import GradStore, ParamStore, backward, forward, init_params, loss_xent
from .tensor_core import SELU_ALPHA, SELU_LAMBDA, ActivationKind

_KINKED_TAGS = ("leaky_relu", "selu")


@dataclass(frozen=True)
class CoreTensor:
    """Explicit (t_q, t_v, t_o) interaction tensor; every mode-3 slice has
    rank <= R by construction."""

    data: np.ndarray


def build_core_tensor(params: Mapping[str, np.ndarray], r_count: int, dims: Dims) -> CoreTensor:
    """Assemble the core tensor whose slice k sums the outer products of
    row k of each branch's factor pair."""
    t_q, t_v, t_o = dims.t_q, dims.t_v, dims.t_o
    ms = []
    ns = []
    for r in range(1, r_count + 1):
        m = params[f"M_{r}"]
        n = params[f"N_{r}"]
        if m.shape != (t_o, t_q) or n.shape != (t_o, t_v):
            raise ValueError(
                f"branch {r}: factor shapes {m.shape}/{n.shape} do not match "
                f"dims ({t_o}, {t_q})/({t_o}, {t_v})"
            )
        ms.append(m.tolist())
        ns.append(n.tolist())
    core = np.zeros((t_q, t_v, t_o))
    for k in range(t_o):
        for i in range(t_q):
            for j in range(t_v):
                acc = 0.0
                for r in range(r_count):
                    acc += ms[r][k][i] * ns[r][k][j]
                core[i, j, k] = acc
    return CoreTensor(data=core)


def tucker_forward(
    core: CoreTensor,
    params: Mapping[str, np.ndarray],
    q: np.ndarray,
    v: np.ndarray,
) -> np.ndarray:
    """Logits via the explicit three-contraction route: project q and v,
    contract the core tensor along modes 1 and 2, then apply the head."""
    c = core.data.tolist()
    wq = params["Wq"].tolist()
    wv = params["Wv"].tolist()
    wo = params["Wo"].tolist()
    bo = params["bo"].tolist()
    ql = q.tolist()
    vl = v.tolist()
    t_q, t_v, t_o = core.data.shape

    q_tilde = [sum(wq[i][a] * ql[a] for a in range(len(ql))) for i in range(t_q)]
    v_tilde = [sum(wv[j][a] * vl[a] for a in range(len(vl))) for j in range(t_v)]

    # mode-1 contraction with q_tilde: (t_q, t_v, t_o) -> (t_v, t_o)
    c_q = [[0.0] * t_o for _ in range(t_v)]
    for j in range(t_v):
        for k in range(t_o):
            acc = 0.0
            for i in range(t_q):
                acc += c[i][j][k] * q_tilde[i]
            c_q[j][k] = acc
    # mode-2 contraction with v_tilde: (t_v, t_o) -> (t_o,)
    c_qv = [0.0] * t_o
    for k in range(t_o):
        acc = 0.0
        for j in range(t_v):
            acc += c_q[j][k] * v_tilde[j]
        c_qv[k] = acc
    # mode-3 contraction with the head matrix, plus bias
    n_out = len(wo)
    y = [0.0] * n_out
    for out in range(n_out):
        acc = bo[out]
        for k in range(t_o):
            acc += wo[out][k] * c_qv[k]
        y[out] = acc
    return np.array(y)


def finite_diff_grad(
    spec: FusionSpec,
    params: ParamStore,
    q: np.ndarray,
    v: np.ndarray,
    label: int,
    step: float = 1e-5,
) -> GradStore:
    """Central-difference loss gradient, coordinate by coordinate.

    Per coordinate the step is step * max(1, |theta|). Dropout is disabled
    (evaluation-mode forward), so the result is comparable to backward()
    on an evaluation-mode trace.
    """
    if step <= 0.0:
        raise ValueError(f"step must be positive, got {step}")
    work = {name: arr.copy() for name, arr in params.items()}

    def loss_at() -> float:
        return loss_xent(forward(spec, work, q, v, train_mode=False), label)

    grads: GradStore = {}
    for name in sorted(work):
        arr = work[name]
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            loss_plus = loss_at()
            flat[i] = orig - h
            loss_minus = loss_at()
            flat[i] = orig
            gflat[i] = (loss_plus - loss_minus) / (2.0 * h)
        grads[name] = grad
    return grads


def _min_abs_kinked_preact(spec: FusionSpec, trace) -> float:
    """Smallest |pre-activation| feeding a kinked activation; inf if none."""
    worst = np.inf
    for branch in spec.branches:
        frag = trace.branches[branch.id]
        if branch.f_q.tag in _KINKED_TAGS:
            worst = min(worst, float(np.min(np.abs(frag["q_pre"]))))
        if branch.f_v.tag in _KINKED_TAGS:
            worst = min(worst, float(np.min(np.abs(frag["v_pre"]))))
        if frag["phi"] is not None and branch.f_q.tag in _KINKED_TAGS:
            for pre in frag["phi"]["pre"]:
                worst = min(worst, float(np.min(np.abs(pre))))
    for step in spec.plan.steps:
        if step.squash is not None and step.squash.tag in _KINKED_TAGS:
            for bid in step.members:
                worst = min(worst, float(np.min(np.abs(trace.branches[bid]["out"]))))
    return worst


def well_conditioned_instance(
    spec: FusionSpec,
    seed: int,
    kink_margin: float = 1e-3,
    grad_floor: float = 5e-7,
    attempts: int = 200,
) -> tuple[ParamStore, np.ndarray, np.ndarray, int]:
    """Draw (params, q, v, label) at which finite differences measure backward.

    Two kinds of draws are rejected: ones where a kinked activation
    (leaky_relu/selu) sees a pre-activation within kink_margin of zero
    (the subgradient there is a convention, so a central difference
    straddling the kink measures nothing), and ones where some gradient
    coordinate sits below grad_floor, where the f64 roundoff of a central
    difference (~1e-11 absolute at step 1e-5) dwarfs the signal.
    """
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        params = init_params(spec, int(rng.integers(0, 2**31)))
        q = rng.normal(size=spec.dims.d_q)
        v = rng.normal(size=spec.dims.d_v)
        label = int(rng.integers(0, spec.dims.n_classes))
        trace = forward(spec, params, q, v, train_mode=False)
        if _min_abs_kinked_preact(spec, trace) <= kink_margin:
            continue
        if grad_floor > 0.0:
            grads = backward(spec, params, trace, label)
            smallest = min(float(np.min(np.abs(g))) for g in grads.values())
            if smallest < grad_floor:
                continue
        return params, q, v, label
    raise ValueError(f"no well-conditioned draw found for seed {seed}")


def _squash_scalar(kind: ActivationKind, x: float) -> float:
    tag = kind.tag
    if tag == "identity":
        return x
    if tag == "sigmoid":
        return 1.0 / (1.0 + math.exp(-x))
    if tag == "tanh":
        return math.tanh(x)
    if tag == "leaky_relu":
        return x if x >= 0.0 else kind.leaky_slope * x
    if tag == "selu":
        return SELU_LAMBDA * x if x >= 0.0 else SELU_LAMBDA * SELU_ALPHA * math.expm1(x)
    raise ValueError(f"unknown activation tag {tag!r}")


def brute_reduce(plan: ReductionPlan, outputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Second, independent transcription of the ordered binary-operator fold.

    Works element by element on Python floats. Used for differential
    testing against engine.reduce_branches; not for production paths.
    """
    plan_ids = {m for step in plan.steps for m in step.members}
    if plan_ids != set(outputs):
        raise ValueError(
            f"plan members {sorted(plan_ids)} do not match outputs {sorted(outputs)}"
        )
    shapes = {arr.shape for arr in outputs.values()}
    if len(shapes) != 1:
        raise ValueError(f"branch outputs disagree on shape: {sorted(shapes)}")
    values = {bid: arr.tolist() for bid, arr in outputs.items()}
    n = len(next(iter(values.values())))

    def identity_of(op: str) -> list[float]:
        return [0.0] * n if op == "sum" else [1.0] * n

    v = identity_of(plan.steps[0].op)
    for step in plan.steps:
        v_b = identity_of(step.op)
        for bid in step.members:
            member = values[bid]
            if step.squash is not None:
                member = [_squash_scalar(step.squash, x) for x in member]
            if step.op == "sum":
                v_b = [a + b for a, b in zip(v_b, member)]
            else:
                v_b = [a * b for a, b in zip(v_b, member)]
        if step.op == "sum":
            v = [a + b for a, b in zip(v, v_b)]
        else:
            v = [a * b for a, b in zip(v, v_b)]
    return np.array(v)
