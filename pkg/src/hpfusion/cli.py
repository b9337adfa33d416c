"""Command-line entry point.

Machine-readable results go to stdout (JSON lines); human diagnostics go
to stderr. Exit codes: 0 success, 1 validation or check failure, 2 usage
error, 3 I/O error. All randomness sits behind seed flags.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dsl import (
    Dims,
    FusionSpec,
    IDENTITY,
    IDENTITY_POST,
    ParseError,
    PRESET_NAMES,
    ReductionPlan,
    ReductionStep,
    builtin_presets,
    parse_spec,
    preset_spec,
    serialize_spec,
)
from .engine import backward, forward, init_params, loss_xent
from .oracle import (
    build_core_tensor,
    finite_diff_grad,
    tucker_forward,
    well_conditioned_instance,
)
from .search import SearchSpace, grid_nonlinearity_pairs, random_search, results_to_jsonl, run_search
from .training import (
    TrainConfig,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
    train,
)

OK, CHECK_FAILED, USAGE, IO_ERROR = 0, 1, 2, 3

ORACLE_TOL = 1e-10
GRAD_TOL = 1e-4


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def _parse_ints(text: str, count: int, what: str) -> tuple[int, ...]:
    parts = text.split(",")
    if len(parts) != count:
        raise _Fail(USAGE, f"{what}: expected {count} comma-separated integers, got {text!r}")
    try:
        values = tuple(int(p) for p in parts)
    except ValueError:
        raise _Fail(USAGE, f"{what}: expected integers, got {text!r}") from None
    if any(v < 1 for v in values):
        raise _Fail(USAGE, f"{what}: all values must be >= 1, got {text!r}")
    return values


def _load_spec(args) -> FusionSpec:
    dims = None
    if getattr(args, "dims", None):
        d = _parse_ints(args.dims, 6, "--dims")
        dims = Dims(d_q=d[0], d_v=d[1], t_q=d[2], t_v=d[3], t_o=d[4], n_classes=d[5])
    if getattr(args, "preset", None):
        if args.spec_path:
            raise _Fail(USAGE, "give either a spec file or --preset, not both")
        try:
            return preset_spec(args.preset, dims=dims, rank=getattr(args, "rank", None))
        except ValueError as e:
            raise _Fail(USAGE, str(e)) from None
    if not args.spec_path:
        raise _Fail(USAGE, "a spec file or --preset is required")
    try:
        text = Path(args.spec_path).read_text()
    except OSError as e:
        raise _Fail(IO_ERROR, f"cannot read {args.spec_path}: {e}") from None
    try:
        spec = parse_spec(text)
    except ParseError as e:
        raise _Fail(CHECK_FAILED, f"{args.spec_path}:{e}") from None
    if dims is not None:
        spec = dataclasses.replace(spec, dims=dims)
    return spec


def _load_dataset(path: str):
    try:
        return load_dataset(path)
    except OSError as e:
        raise _Fail(IO_ERROR, f"cannot read {path}: {e}") from None
    except ValueError as e:
        raise _Fail(CHECK_FAILED, str(e)) from None


def _write_text(path: str, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise _Fail(IO_ERROR, f"cannot write {path}: {e}") from None


def _add_spec_source(p: argparse.ArgumentParser, with_rank: bool = True) -> None:
    p.add_argument("spec_path", nargs="?", help="spec file (or use --preset)")
    p.add_argument("--preset", choices=PRESET_NAMES, help="built-in preset name")
    p.add_argument("--dims", help="override dims: dq,dv,tq,tv,to,classes")
    if with_rank:
        p.add_argument("--rank", type=int, help="override preset branch count")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        text = Path(args.spec_path).read_text()
    except OSError as e:
        print(f"cannot read {args.spec_path}: {e}", file=sys.stderr)
        return IO_ERROR
    try:
        parse_spec(text)
    except ParseError as e:
        print(f"{args.spec_path}:{e}", file=sys.stderr)
        return CHECK_FAILED
    return OK


def _identity_compatible(spec: FusionSpec) -> bool:
    plain = all(
        b.f_q.tag == "identity" and b.f_v.tag == "identity" and b.post.n_layers == 0
        for b in spec.branches
    )
    single_sum = (
        len(spec.plan.steps) == 1
        and spec.plan.steps[0].op == "sum"
        and spec.plan.steps[0].squash is None
    )
    return plain and single_sum


def _force_identity(spec: FusionSpec) -> FusionSpec:
    branches = tuple(
        dataclasses.replace(b, f_q=IDENTITY, f_v=IDENTITY, post=IDENTITY_POST)
        for b in spec.branches
    )
    plan = ReductionPlan(steps=(ReductionStep(op="sum", members=spec.branch_ids()),))
    return dataclasses.replace(spec, branches=branches, plan=plan)


def cmd_oracle_check(args) -> int:
    if args.seeds < 1:
        raise _Fail(USAGE, f"--seeds must be >= 1, got {args.seeds}")
    spec = _load_spec(args)
    if not _identity_compatible(spec):
        if not args.force_identity:
            raise _Fail(
                USAGE,
                "spec is not identity-compatible (identity activations, identity "
                "post-fusion, single sum step); pass --force-identity to check "
                "its rank structure anyway",
            )
        spec = _force_identity(spec)
    t_q, t_v, t_o = _parse_ints(args.check_dims, 3, "--check-dims")
    small = dataclasses.replace(
        spec,
        dims=Dims(d_q=t_q + 1, d_v=t_v + 1, t_q=t_q, t_v=t_v, t_o=t_o, n_classes=t_o + 1),
    )
    rank = len(small.branches)
    worst = 0.0
    for seed in range(args.seeds):
        params = init_params(small, seed)
        rng = np.random.default_rng([seed, 1])
        q = rng.normal(size=small.dims.d_q)
        v = rng.normal(size=small.dims.d_v)
        core = build_core_tensor(params, rank, small.dims)
        engine_params = params
        if args.corrupt:
            if args.corrupt not in params:
                raise _Fail(USAGE, f"--corrupt: no parameter named {args.corrupt!r}")
            engine_params = dict(params)
            engine_params[args.corrupt] = params[args.corrupt] + 0.5
        got = forward(small, engine_params, q, v, train_mode=False).logits
        want = tucker_forward(core, params, q, v)
        denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1e-12)
        worst = max(worst, float(np.max(np.abs(got - want) / denom)))
    print(json.dumps({"max_rel_err": worst, "seeds": args.seeds, "tol": ORACLE_TOL}))
    return OK if worst <= ORACLE_TOL else CHECK_FAILED


def cmd_grad_check(args) -> int:
    if args.seeds < 1:
        raise _Fail(USAGE, f"--seeds must be >= 1, got {args.seeds}")
    spec = _load_spec(args)
    d = _parse_ints(args.check_dims, 6, "--check-dims")
    small_dims = Dims(d_q=d[0], d_v=d[1], t_q=d[2], t_v=d[3], t_o=d[4], n_classes=d[5])
    # Cap MLP width so the coordinate-by-coordinate sweep stays desk-scale.
    branches = tuple(
        dataclasses.replace(b, post=dataclasses.replace(b.post, hidden=min(b.post.hidden, 6)))
        if b.post.n_layers > 0
        else b
        for b in spec.branches
    )
    small = dataclasses.replace(spec, dims=small_dims, branches=branches)
    step = 1e-5
    worst = 0.0
    worst_where = ("", 0)
    for seed in range(args.seeds):
        try:
            # Kink avoidance only: deep leaky_relu stacks legitimately produce
            # gradient coordinates below what central differences can resolve,
            # so those are absorbed by the noise-aware denominator below.
            params, q, v, label = well_conditioned_instance(small, seed, grad_floor=0.0)
        except ValueError as e:
            raise _Fail(CHECK_FAILED, str(e)) from None
        trace = forward(small, params, q, v, train_mode=False)
        got = backward(small, params, trace, label)
        if args.flip_sign:
            if args.flip_sign not in got:
                raise _Fail(USAGE, f"--flip-sign: no parameter named {args.flip_sign!r}")
            got[args.flip_sign] = -got[args.flip_sign]
        want = finite_diff_grad(small, params, q, v, label, step=step)
        # f64 roundoff of (L+ - L-) / 2h bounds what the oracle can measure.
        loss_scale = max(1.0, abs(loss_xent(trace, label)))
        noise = 64.0 * np.finfo(np.float64).eps * loss_scale / (2.0 * step)
        floor = max(1e-8, noise / GRAD_TOL)
        for name in sorted(params):
            a, b = got[name].reshape(-1), want[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
            rel = np.abs(a - b) / denom
            i = int(np.argmax(rel))
            if rel[i] > worst:
                worst = float(rel[i])
                worst_where = (name, i)
    print(json.dumps({"max_rel_err": worst, "seeds": args.seeds, "tol": GRAD_TOL}))
    if worst > GRAD_TOL:
        print(
            f"worst coordinate: {worst_where[0]}[{worst_where[1]}] rel_err={worst:.3e}",
            file=sys.stderr,
        )
        return CHECK_FAILED
    return OK


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise _Fail(USAGE, f"--n must be >= 1, got {args.n}")
    spec = _load_spec(args)
    dataset = generate_synthetic_dataset(
        spec, args.teacher_seed, args.n, args.input_scale, args.data_seed
    )
    try:
        save_dataset(dataset, args.out)
    except OSError as e:
        raise _Fail(IO_ERROR, f"cannot write {args.out}: {e}") from None
    print(json.dumps({"n": args.n, "classes": dataset.n_classes, "out": args.out}))
    return OK


def cmd_train(args) -> int:
    spec = _load_spec(args)
    train_set = _load_dataset(args.train)
    val_set = _load_dataset(args.val)
    cfg = TrainConfig(
        lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, seed=args.seed
    )
    try:
        _, metrics = train(spec, train_set, val_set, cfg)
    except ValueError as e:
        raise _Fail(CHECK_FAILED, str(e)) from None
    if args.out:
        _write_text(args.out, metrics.to_jsonl())
    else:
        sys.stdout.write(metrics.to_jsonl())
    print(json.dumps({"val_acc": metrics.best_val_acc, "best_epoch": metrics.best_epoch}))
    return OK


def cmd_search(args) -> int:
    spec = _load_spec(args)
    if args.random is not None and args.random < 1:
        raise _Fail(USAGE, f"--random must be >= 1, got {args.random}")
    if args.random is not None:
        space = SearchSpace(base_dims=spec.dims)
        candidates = random_search(space, seed=args.seed, budget=args.random)
    else:
        candidates = grid_nonlinearity_pairs(spec)
    train_set = _load_dataset(args.train)
    val_set = _load_dataset(args.val)
    cfg = TrainConfig(
        lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, seed=args.seed
    )
    try:
        results = run_search(candidates, train_set, val_set, cfg)
    except ValueError as e:
        raise _Fail(CHECK_FAILED, str(e)) from None
    text = results_to_jsonl(results)
    if args.out:
        _write_text(args.out, text)
        best = results[0]
        print(json.dumps({"candidates": len(results), "best_val_acc": best.val_accuracy}))
    else:
        sys.stdout.write(text)
    return OK


def cmd_presets(args) -> int:
    for name, spec in builtin_presets().items():
        print(json.dumps({"name": name, "spec": serialize_spec(spec)}))
    return OK


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hpfusion",
        description="Trainable Hadamard-product fusion operators with verification oracles.",
    )
    parser.add_argument("--version", action="version", version=f"hpfusion {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and validate a spec file")
    p.add_argument("spec_path")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser(
        "oracle-check",
        help="compare engine logits against the explicit core-tensor contraction",
    )
    _add_spec_source(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument(
        "--check-dims", default="4,4,3", help="tq,tv,to used for the check (small)"
    )
    p.add_argument(
        "--force-identity",
        action="store_true",
        help="strip activations/post-fusion/squash so the rank structure can be checked",
    )
    p.add_argument("--corrupt", metavar="PARAM", help=argparse.SUPPRESS)  # test hook
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser(
        "grad-check", help="compare backward against central finite differences"
    )
    _add_spec_source(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument(
        "--check-dims",
        default="5,4,4,3,3,3",
        help="dq,dv,tq,tv,to,classes used for the check (small)",
    )
    p.add_argument("--flip-sign", metavar="PARAM", help=argparse.SUPPRESS)  # test hook
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("gen-data", help="generate a teacher-labeled synthetic dataset")
    _add_spec_source(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--teacher-seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--input-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a spec on dataset files")
    _add_spec_source(p)
    p.add_argument("--train", required=True, help="training dataset path")
    p.add_argument("--val", required=True, help="validation dataset path")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="metrics JSONL path (default: stdout)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="screen candidate specs and rank them")
    _add_spec_source(p)
    p.add_argument("--train", required=True, help="training dataset path")
    p.add_argument("--val", required=True, help="validation dataset path")
    p.add_argument(
        "--random", type=int, metavar="BUDGET", help="sample BUDGET random specs instead of the activation grid"
    )
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="results JSONL path (default: stdout)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("presets", help="list built-in presets with canonical text")
    p.set_defaults(func=cmd_presets)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Fail as fail:
        print(fail.message, file=sys.stderr)
        return fail.code


if __name__ == "__main__":
    sys.exit(main())
