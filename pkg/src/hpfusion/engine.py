"""Executable forward/backward computation compiled from a FusionSpec.

Parameters live in a flat name -> float64 array store:

    Wq (t_q, d_q), Wv (t_v, d_v), Wo (n_classes, t_o), bo (n_classes,)
    per branch r (1-based declaration order):
        M_r (t_o, t_q), N_r (t_o, t_v)
        phi_r_l_W / phi_r_l_b       hidden layers l = 1..n_layers
        phi_r_out_W / phi_r_out_b   final linear projection back to t_o
        phi_r_skip_l_W              tap projection, only when hidden != t_o

The forward pass records every intermediate needed by the hand-written
reverse pass; both are pure functions and bitwise deterministic for
fixed (params, inputs, seed, train_mode).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dsl import BranchSpec, FusionSpec, PostFusionConfig, ReductionPlan
from .tensor_core import (
    ActivationKind,
    IDENTITY,
    activation_grad,
    apply_activation,
    hadamard,
    matvec,
    outer,
)

ParamStore = dict[str, np.ndarray]
GradStore = dict[str, np.ndarray]


@dataclass
class ForwardTrace:
    """All intermediates of one forward evaluation, consumed by backward."""

    q: np.ndarray
    v: np.ndarray
    q_tilde: np.ndarray
    v_tilde: np.ndarray
    branches: dict[str, dict]
    steps: list[dict]
    fused: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    train_mode: bool


# ---------------------------------------------------------------------------
# Parameter store
# ---------------------------------------------------------------------------


def phi_param_shapes(cfg: PostFusionConfig, t_o: int) -> dict[str, tuple[int, ...]]:
    """Local (unprefixed) name -> shape map for one post-fusion MLP."""
    if cfg.n_layers == 0:
        return {}
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in range(1, cfg.n_layers + 1):
        fan_in = t_o if layer == 1 else cfg.hidden
        shapes[f"{layer}_W"] = (cfg.hidden, fan_in)
        shapes[f"{layer}_b"] = (cfg.hidden,)
    shapes["out_W"] = (t_o, cfg.hidden)
    shapes["out_b"] = (t_o,)
    if cfg.hidden != t_o:
        for layer in range(cfg.skip_period, cfg.n_layers + 1, cfg.skip_period):
            shapes[f"skip_{layer}_W"] = (t_o, cfg.hidden)
    return shapes


def param_shapes(spec: FusionSpec) -> dict[str, tuple[int, ...]]:
    """Every parameter name with its exact shape, derived from the spec."""
    d = spec.dims
    shapes: dict[str, tuple[int, ...]] = {
        "Wq": (d.t_q, d.d_q),
        "Wv": (d.t_v, d.d_v),
        "Wo": (d.n_classes, d.t_o),
        "bo": (d.n_classes,),
    }
    for r, branch in enumerate(spec.branches, start=1):
        shapes[f"M_{r}"] = (d.t_o, d.t_q)
        shapes[f"N_{r}"] = (d.t_o, d.t_v)
        for local, shape in phi_param_shapes(branch.post, d.t_o).items():
            shapes[f"phi_{r}_{local}"] = shape
    return shapes


def init_params(spec: FusionSpec, seed: int) -> ParamStore:
    """Glorot-uniform weights, zero biases; deterministic given (spec, seed)."""
    rng = np.random.default_rng(seed)
    params: ParamStore = {}
    shapes = param_shapes(spec)
    for name in sorted(shapes):
        shape = shapes[name]
        if len(shape) == 1:  # biases
            params[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape)
    return params


def _branch_index(spec: FusionSpec, branch_id: str) -> int:
    for r, b in enumerate(spec.branches, start=1):
        if b.id == branch_id:
            return r
    raise KeyError(f"no branch {branch_id!r} in spec")


def _phi_weights(params: Mapping[str, np.ndarray], r: int, cfg: PostFusionConfig):
    prefix = f"phi_{r}_"
    return {name[len(prefix):]: arr for name, arr in params.items() if name.startswith(prefix)}


# ---------------------------------------------------------------------------
# Post-fusion MLP
# ---------------------------------------------------------------------------


def _phi_forward(
    cfg: PostFusionConfig,
    activation: ActivationKind,
    weights: Mapping[str, np.ndarray],
    x: np.ndarray,
    train_mode: bool,
    rng: np.random.Generator | None,
):
    """Returns (output, trace). trace is None when the MLP is the identity."""
    if cfg.n_layers == 0:
        return x, None
    keep = 1.0 - cfg.dropout
    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    masks: list[np.ndarray | None] = []
    h = x
    for layer in range(1, cfg.n_layers + 1):
        p = matvec(weights[f"{layer}_W"], h) + weights[f"{layer}_b"]
        a = apply_activation(activation, p)
        mask = None
        if train_mode and cfg.dropout > 0.0:
            mask = (rng.random(a.shape[0]) >= cfg.dropout).astype(np.float64)
            a = a * mask / keep
        pre.append(p)
        acts.append(a)
        masks.append(mask)
        h = a
    out = matvec(weights["out_W"], h) + weights["out_b"]
    out = out + x  # skip from the input; lengths match by construction
    for layer in range(cfg.skip_period, cfg.n_layers + 1, cfg.skip_period):
        proj = weights.get(f"skip_{layer}_W")
        out = out + (acts[layer - 1] if proj is None else matvec(proj, acts[layer - 1]))
    return out, {"x": x, "pre": pre, "acts": acts, "masks": masks}


def post_fusion_forward(
    cfg: PostFusionConfig,
    weights: Mapping[str, np.ndarray],
    x: np.ndarray,
    activation: ActivationKind = IDENTITY,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Apply one post-fusion MLP (n_layers == 0 returns x unchanged)."""
    out, _ = _phi_forward(cfg, activation, weights, x, train_mode, rng)
    return out


def _phi_backward(
    cfg: PostFusionConfig,
    activation: ActivationKind,
    weights: Mapping[str, np.ndarray],
    trace: dict | None,
    d_out: np.ndarray,
    grads: GradStore,
    prefix: str,
) -> np.ndarray:
    """Accumulate MLP parameter gradients into grads; return gradient w.r.t. x."""
    if cfg.n_layers == 0:
        return d_out
    keep = 1.0 - cfg.dropout
    pre, acts, masks, x = trace["pre"], trace["acts"], trace["masks"], trace["x"]
    d_acts = [np.zeros_like(a) for a in acts]
    last = cfg.n_layers - 1
    grads[f"{prefix}out_W"] = outer(d_out, acts[last])
    grads[f"{prefix}out_b"] = d_out.copy()
    d_acts[last] += weights["out_W"].T @ d_out
    dx = d_out.copy()  # input skip
    for layer in range(cfg.skip_period, cfg.n_layers + 1, cfg.skip_period):
        proj = weights.get(f"skip_{layer}_W")
        if proj is None:
            d_acts[layer - 1] += d_out
        else:
            grads[f"{prefix}skip_{layer}_W"] = outer(d_out, acts[layer - 1])
            d_acts[layer - 1] += proj.T @ d_out
    for layer in range(cfg.n_layers, 0, -1):
        da = d_acts[layer - 1]
        if masks[layer - 1] is not None:
            da = da * masks[layer - 1] / keep
        dp = activation_grad(activation, pre[layer - 1], da)
        inp = x if layer == 1 else acts[layer - 2]
        grads[f"{prefix}{layer}_W"] = outer(dp, inp)
        grads[f"{prefix}{layer}_b"] = dp
        if layer == 1:
            dx += weights["1_W"].T @ dp
        else:
            d_acts[layer - 2] += weights[f"{layer}_W"].T @ dp
    return dx


# ---------------------------------------------------------------------------
# Branches
# ---------------------------------------------------------------------------


def _branch_forward(
    params: Mapping[str, np.ndarray],
    r: int,
    branch: BranchSpec,
    q_tilde: np.ndarray,
    v_tilde: np.ndarray,
    train_mode: bool,
    rng: np.random.Generator | None,
):
    q_pre = matvec(params[f"M_{r}"], q_tilde)
    v_pre = matvec(params[f"N_{r}"], v_tilde)
    q_act = apply_activation(branch.f_q, q_pre)
    v_act = apply_activation(branch.f_v, v_pre)
    had = hadamard(q_act, v_act)
    phi_w = _phi_weights(params, r, branch.post) if branch.post.n_layers else {}
    out, phi_trace = _phi_forward(branch.post, branch.f_q, phi_w, had, train_mode, rng)
    frag = {
        "q_pre": q_pre,
        "v_pre": v_pre,
        "q_act": q_act,
        "v_act": v_act,
        "had": had,
        "phi": phi_trace,
        "out": out,
    }
    return out, frag


def branch_forward(
    spec: FusionSpec,
    params: Mapping[str, np.ndarray],
    branch_id: str,
    q_tilde: np.ndarray,
    v_tilde: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
):
    """One branch: activation pair, Hadamard product, post-fusion MLP."""
    r = _branch_index(spec, branch_id)
    return _branch_forward(
        params, r, spec.branches[r - 1], q_tilde, v_tilde, train_mode, rng
    )


# ---------------------------------------------------------------------------
# Reduction (ordered binary-operator fold over a branch partition)
# ---------------------------------------------------------------------------


def _identity_vec(op: str, n: int) -> np.ndarray:
    return np.zeros(n) if op == "sum" else np.ones(n)


def _reduce_forward(plan: ReductionPlan, outputs: Mapping[str, np.ndarray]):
    n = next(iter(outputs.values())).shape[0]
    steps_trace: list[dict] = []
    v = _identity_vec(plan.steps[0].op, n)
    for step in plan.steps:
        v_b = _identity_vec(step.op, n)
        members: list[tuple[str, np.ndarray]] = []
        for bid in step.members:
            val = outputs[bid]
            if step.squash is not None:
                val = apply_activation(step.squash, val)
            members.append((bid, val))
            v_b = v_b + val if step.op == "sum" else v_b * val
        steps_trace.append({"v_before": v, "members": members, "v_b": v_b})
        v = v + v_b if step.op == "sum" else v * v_b
    return v, steps_trace


def reduce_branches(plan: ReductionPlan, outputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Fold branch outputs into a single vector, step by step in plan order.

    Each step starts from its operator's identity (zeros for sum, ones for
    prod), folds its members in listed order (squash applied per member
    first), then folds the step value into the running vector with the
    same operator.
    """
    plan_ids = {m for step in plan.steps for m in step.members}
    if plan_ids != set(outputs):
        raise ValueError(
            f"plan members {sorted(plan_ids)} do not match outputs {sorted(outputs)}"
        )
    shapes = {arr.shape for arr in outputs.values()}
    if len(shapes) != 1:
        raise ValueError(f"branch outputs disagree on shape: {sorted(shapes)}")
    fused, _ = _reduce_forward(plan, outputs)
    return fused


def _reduce_backward(
    plan: ReductionPlan,
    steps_trace: list[dict],
    d_fused: np.ndarray,
    outputs: Mapping[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Gradient w.r.t. each (pre-squash) branch output."""
    d_outputs: dict[str, np.ndarray] = {}
    dv = d_fused
    for step, tr in zip(reversed(plan.steps), reversed(steps_trace)):
        if step.op == "sum":
            dv_b = dv
            dv_prev = dv
        else:
            dv_b = dv * tr["v_before"]
            dv_prev = dv * tr["v_b"]
        members = tr["members"]
        if step.op == "sum":
            d_members = [dv_b] * len(members)
        else:
            # product rule via prefix/suffix products (robust to zero factors)
            vals = [val for _, val in members]
            n = len(vals)
            prefix = [None] * (n + 1)
            prefix[0] = np.ones_like(dv_b)
            for i in range(n):
                prefix[i + 1] = prefix[i] * vals[i]
            suffix = [None] * (n + 1)
            suffix[n] = np.ones_like(dv_b)
            for i in range(n - 1, -1, -1):
                suffix[i] = suffix[i + 1] * vals[i]
            d_members = [dv_b * prefix[i] * suffix[i + 1] for i in range(n)]
        for (bid, _), ds in zip(members, d_members):
            if step.squash is not None:
                d_outputs[bid] = activation_grad(step.squash, outputs[bid], ds)
            else:
                d_outputs[bid] = ds
        dv = dv_prev
    return d_outputs


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


def forward(
    spec: FusionSpec,
    params: Mapping[str, np.ndarray],
    q: np.ndarray,
    v: np.ndarray,
    train_mode: bool = False,
    seed: int = 0,
) -> ForwardTrace:
    """Evaluate the fusion operator and predictive head on one (q, v) pair."""
    d = spec.dims
    if q.shape != (d.d_q,):
        raise ValueError(f"q has shape {q.shape}, expected ({d.d_q},)")
    if v.shape != (d.d_v,):
        raise ValueError(f"v has shape {v.shape}, expected ({d.d_v},)")
    rng = None
    if train_mode and any(
        b.post.n_layers > 0 and b.post.dropout > 0.0 for b in spec.branches
    ):
        rng = np.random.default_rng(seed)
    q_tilde = matvec(params["Wq"], q)
    v_tilde = matvec(params["Wv"], v)
    branches: dict[str, dict] = {}
    outputs: dict[str, np.ndarray] = {}
    for r, branch in enumerate(spec.branches, start=1):
        out, frag = _branch_forward(params, r, branch, q_tilde, v_tilde, train_mode, rng)
        branches[branch.id] = frag
        outputs[branch.id] = out
    fused, steps_trace = _reduce_forward(spec.plan, outputs)
    logits = matvec(params["Wo"], fused) + params["bo"]
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    probs = exp / exp.sum()
    return ForwardTrace(
        q=q,
        v=v,
        q_tilde=q_tilde,
        v_tilde=v_tilde,
        branches=branches,
        steps=steps_trace,
        fused=fused,
        logits=logits,
        probs=probs,
        train_mode=train_mode,
    )


def loss_xent(trace: ForwardTrace, label: int) -> float:
    """Cross-entropy -log p(label), computed via log-sum-exp."""
    logits = trace.logits
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[label])


def backward(
    spec: FusionSpec,
    params: Mapping[str, np.ndarray],
    trace: ForwardTrace,
    label: int,
) -> GradStore:
    """Gradient of loss_xent w.r.t. every parameter, mirroring forward exactly."""
    if not 0 <= label < trace.logits.shape[0]:
        raise ValueError(f"label {label} out of range for {trace.logits.shape[0]} classes")
    # Every parameter receives exactly one gradient write below (the plan is a
    # partition over branches), so the store is filled by assignment.
    grads: GradStore = {}

    d_logits = trace.probs.copy()
    d_logits[label] -= 1.0
    grads["Wo"] = outer(d_logits, trace.fused)
    grads["bo"] = d_logits
    d_fused = params["Wo"].T @ d_logits

    outputs = {bid: frag["out"] for bid, frag in trace.branches.items()}
    d_outputs = _reduce_backward(spec.plan, trace.steps, d_fused, outputs)

    d_q_tilde = np.zeros_like(trace.q_tilde)
    d_v_tilde = np.zeros_like(trace.v_tilde)
    for r, branch in enumerate(spec.branches, start=1):
        frag = trace.branches[branch.id]
        phi_w = _phi_weights(params, r, branch.post) if branch.post.n_layers else {}
        d_had = _phi_backward(
            branch.post,
            branch.f_q,
            phi_w,
            frag["phi"],
            d_outputs[branch.id],
            grads,
            f"phi_{r}_",
        )
        d_q_act = d_had * frag["v_act"]
        d_v_act = d_had * frag["q_act"]
        d_q_pre = activation_grad(branch.f_q, frag["q_pre"], d_q_act)
        d_v_pre = activation_grad(branch.f_v, frag["v_pre"], d_v_act)
        grads[f"M_{r}"] = outer(d_q_pre, trace.q_tilde)
        grads[f"N_{r}"] = outer(d_v_pre, trace.v_tilde)
        d_q_tilde += params[f"M_{r}"].T @ d_q_pre
        d_v_tilde += params[f"N_{r}"].T @ d_v_pre

    grads["Wq"] = outer(d_q_tilde, trace.q)
    grads["Wv"] = outer(d_v_tilde, trace.v)
    return grads
