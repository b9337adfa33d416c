"""Oracle self-tests plus engine/oracle differential checks."""

import numpy as np
import pytest

from hpfusion.dsl import BranchSpec, Dims, FusionSpec, preset_spec
from hpfusion.engine import forward, init_params, reduce_branches
from hpfusion.oracle import (
    CoreTensor,
    brute_reduce,
    build_core_tensor,
    finite_diff_grad,
    tucker_forward,
)
from hpfusion.tensor_core import IDENTITY, n_mode_product

from helpers import (
    max_rel_err,
    random_plan,
    sum_all_plan,
    well_conditioned_instance,
)


def identity_spec(dims: Dims, rank: int) -> FusionSpec:
    ids = tuple(f"b{i}" for i in range(1, rank + 1))
    return FusionSpec(
        dims=dims,
        branches=tuple(BranchSpec(id=i, f_q=IDENTITY, f_v=IDENTITY) for i in ids),
        plan=sum_all_plan(ids),
    )


class TestBuildCoreTensor:
    def test_single_outer_product(self):
        dims = Dims(d_q=2, d_v=2, t_q=2, t_v=2, t_o=1, n_classes=2)
        params = {"M_1": np.array([[1.0, 2.0]]), "N_1": np.array([[3.0, 4.0]])}
        core = build_core_tensor(params, 1, dims)
        assert np.array_equal(core.data[:, :, 0], [[3.0, 4.0], [6.0, 8.0]])

    def test_zero_factor_changes_nothing(self):
        dims = Dims(d_q=2, d_v=2, t_q=3, t_v=4, t_o=2, n_classes=2)
        rng = np.random.default_rng(0)
        params = {
            "M_1": rng.normal(size=(2, 3)),
            "N_1": rng.normal(size=(2, 4)),
            "M_2": np.zeros((2, 3)),
            "N_2": np.zeros((2, 4)),
        }
        one = build_core_tensor({k: params[k] for k in ("M_1", "N_1")}, 1, dims)
        two = build_core_tensor(params, 2, dims)
        assert np.array_equal(one.data, two.data)

    def test_slice_rank_bounded_by_span_projection(self):
        # Residual of each slice after projection onto the span of its R
        # outer products must vanish (Gram-Schmidt, no SVD).
        dims = Dims(d_q=2, d_v=2, t_q=4, t_v=5, t_o=3, n_classes=2)
        rng = np.random.default_rng(1)
        params = {}
        for r in (1, 2, 3):
            params[f"M_{r}"] = rng.normal(size=(3, 4))
            params[f"N_{r}"] = rng.normal(size=(3, 5))
        core = build_core_tensor(params, 3, dims)
        for k in range(3):
            basis = [
                np.outer(params[f"M_{r}"][k], params[f"N_{r}"][k]).ravel()
                for r in (1, 2, 3)
            ]
            ortho = []
            for vec in basis:
                w = vec.copy()
                for u in ortho:
                    w -= (w @ u) * u
                norm = np.linalg.norm(w)
                if norm > 1e-12:
                    ortho.append(w / norm)
            s = core.data[:, :, k].ravel()
            resid = s.copy()
            for u in ortho:
                resid -= (resid @ u) * u
            assert np.linalg.norm(resid) <= 1e-10 * max(1.0, np.linalg.norm(s))

    def test_shape_mismatch(self):
        dims = Dims(d_q=2, d_v=2, t_q=3, t_v=3, t_o=2, n_classes=2)
        params = {"M_1": np.zeros((2, 4)), "N_1": np.zeros((2, 3))}
        with pytest.raises(ValueError, match="do not match"):
            build_core_tensor(params, 1, dims)


class TestTuckerForward:
    def test_zero_core_returns_bias(self):
        dims = Dims(d_q=3, d_v=3, t_q=2, t_v=2, t_o=2, n_classes=4)
        spec = identity_spec(dims, 1)
        params = init_params(spec, 0)
        params["bo"] = np.array([1.0, -2.0, 3.0, 0.5])
        core = CoreTensor(data=np.zeros((2, 2, 2)))
        rng = np.random.default_rng(2)
        got = tucker_forward(core, params, rng.normal(size=3), rng.normal(size=3))
        assert np.array_equal(got, params["bo"])

    def test_scalar_collapse(self):
        dims = Dims(d_q=1, d_v=1, t_q=1, t_v=1, t_o=1, n_classes=1)
        params = {
            "Wq": np.array([[2.0]]),
            "Wv": np.array([[3.0]]),
            "Wo": np.array([[4.0]]),
            "bo": np.array([0.25]),
            "M_1": np.array([[5.0]]),
            "N_1": np.array([[6.0]]),
        }
        core = build_core_tensor(params, 1, dims)
        q, v = np.array([7.0]), np.array([8.0])
        # y = Wo * (m*q_tilde * n*v_tilde) + bo with q_tilde=2*7, v_tilde=3*8
        want = 4.0 * (5.0 * 14.0) * (6.0 * 24.0) + 0.25
        got = tucker_forward(core, params, q, v)
        assert got.shape == (1,)
        assert got[0] == want

    def test_matches_engine_identity_specs(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            dims = Dims(
                d_q=int(rng.integers(2, 7)),
                d_v=int(rng.integers(2, 7)),
                t_q=int(rng.integers(2, 7)),
                t_v=int(rng.integers(2, 7)),
                t_o=int(rng.integers(2, 5)),
                n_classes=int(rng.integers(2, 5)),
            )
            rank = int(rng.integers(1, 4))
            spec = identity_spec(dims, rank)
            params = init_params(spec, seed)
            q = rng.normal(size=dims.d_q)
            v = rng.normal(size=dims.d_v)
            core = build_core_tensor(params, rank, dims)
            got = forward(spec, params, q, v).logits
            want = tucker_forward(core, params, q, v)
            assert max_rel_err(got, want) <= 1e-10

    def test_contraction_order_commutes(self):
        rng = np.random.default_rng(3)
        core = rng.normal(size=(4, 5, 3))
        q_t = rng.normal(size=4)
        v_t = rng.normal(size=5)
        first = n_mode_product(n_mode_product(core, q_t, 1), v_t, 1)
        second = n_mode_product(n_mode_product(core, v_t, 2), q_t, 1)
        assert max_rel_err(first, second) <= 1e-12


class TestFiniteDiff:
    def test_onehot_probs_give_vanishing_gradient(self):
        dims = Dims(d_q=2, d_v=2, t_q=2, t_v=2, t_o=2, n_classes=2)
        spec = identity_spec(dims, 1)
        params = init_params(spec, 1)
        # saturate the head so probs are exactly one-hot
        params["bo"] = np.array([800.0, -800.0])
        params["Wo"] = np.zeros_like(params["Wo"])
        params["Wq"] = np.zeros_like(params["Wq"])
        grads = finite_diff_grad(spec, params, np.ones(2), np.ones(2), 0)
        for arr in grads.values():
            assert np.max(np.abs(arr)) <= 1e-9

    def test_linear_head_matches_analytic(self):
        dims = Dims(d_q=3, d_v=3, t_q=3, t_v=3, t_o=3, n_classes=3)
        spec = identity_spec(dims, 2)
        params = init_params(spec, 2)
        rng = np.random.default_rng(4)
        q, v = rng.normal(size=3), rng.normal(size=3)
        label = 1
        trace = forward(spec, params, q, v)
        d_logits = trace.probs.copy()
        d_logits[label] -= 1.0
        want = np.outer(d_logits, trace.fused)
        got = finite_diff_grad(spec, params, q, v, label)["Wo"]
        assert np.max(np.abs(got - want)) <= 1e-6

    def test_step_stability(self):
        dims = Dims(d_q=3, d_v=3, t_q=3, t_v=3, t_o=2, n_classes=3)
        spec = identity_spec(dims, 2)
        params, q, v, label = well_conditioned_instance(spec, seed=5)
        coarse = finite_diff_grad(spec, params, q, v, label, step=1e-5)
        fine = finite_diff_grad(spec, params, q, v, label, step=5e-6)
        for name in coarse:
            a, b = coarse[name].ravel(), fine[name].ravel()
            mask = np.abs(a) >= 1e-3
            if mask.any():
                rel = np.abs(a[mask] - b[mask]) / np.abs(a[mask])
                assert rel.max() < 1e-6

    def test_rejects_nonpositive_step(self):
        dims = Dims(d_q=2, d_v=2, t_q=2, t_v=2, t_o=2, n_classes=2)
        spec = identity_spec(dims, 1)
        params = init_params(spec, 0)
        with pytest.raises(ValueError, match="step"):
            finite_diff_grad(spec, params, np.ones(2), np.ones(2), 0, step=0.0)


class TestBruteReduce:
    def test_sum_only_equals_vector_sum(self):
        rng = np.random.default_rng(6)
        outputs = {f"b{i}": rng.normal(size=5) for i in range(1, 5)}
        plan = sum_all_plan(tuple(outputs))
        want = sum(outputs.values())
        assert max_rel_err(brute_reduce(plan, outputs), want) <= 1e-15

    def test_prod_only_equals_elementwise_product(self):
        from hpfusion.dsl import ReductionPlan, ReductionStep

        rng = np.random.default_rng(7)
        outputs = {f"b{i}": rng.normal(size=5) for i in range(1, 4)}
        plan = ReductionPlan((ReductionStep("prod", tuple(outputs)),))
        want = outputs["b1"] * outputs["b2"] * outputs["b3"]
        assert max_rel_err(brute_reduce(plan, outputs), want) <= 1e-15

    def test_differential_against_engine_exact(self):
        # 1000 random squash-free cases must agree bitwise; the fold order
        # and identities are what is under test.
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            n_branches = int(rng.integers(1, 6))
            ids = tuple(f"b{i}" for i in range(1, n_branches + 1))
            outputs = {bid: rng.normal(size=int(rng.integers(1, 6))) for bid in ids}
            length = len(next(iter(outputs.values())))
            outputs = {bid: rng.normal(size=length) for bid in ids}
            plan = random_plan(rng, ids, allow_squash=False)
            got = reduce_branches(plan, outputs)
            want = brute_reduce(plan, outputs)
            assert np.array_equal(got, want), seed

    def test_differential_with_squash_near_exact(self):
        # numpy's vectorized transcendentals and libm may differ in the last
        # ulp, so squashed members are compared at 1e-14 relative.
        for seed in range(200):
            rng = np.random.default_rng(10_000 + seed)
            ids = tuple(f"b{i}" for i in range(1, int(rng.integers(2, 6)) + 1))
            length = int(rng.integers(1, 6))
            outputs = {bid: rng.normal(size=length) for bid in ids}
            plan = random_plan(rng, ids, allow_squash=True)
            got = reduce_branches(plan, outputs)
            want = brute_reduce(plan, outputs)
            assert max_rel_err(got, want) <= 1e-14, seed

    def test_validates_like_reduce_branches(self):
        plan = sum_all_plan(("a", "b"))
        with pytest.raises(ValueError, match="do not match"):
            brute_reduce(plan, {"a": np.zeros(2)})


def test_full_scale_identity_preset_equivalence_small_dims():
    # The mutan preset structure checked at reduced dims (the full-scale
    # core tensor would have ~49M entries; the loop oracle is desk-scale).
    spec = preset_spec(
        "mutan_r5", dims=Dims(d_q=5, d_v=5, t_q=4, t_v=4, t_o=3, n_classes=4)
    )
    params = init_params(spec, 9)
    rng = np.random.default_rng(9)
    q, v = rng.normal(size=5), rng.normal(size=5)
    core = build_core_tensor(params, 5, spec.dims)
    assert max_rel_err(
        forward(spec, params, q, v).logits, tucker_forward(core, params, q, v)
    ) <= 1e-10
