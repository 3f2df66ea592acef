import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcorrect.client_opt import ClientOptKind, run_local
from fedcorrect.correction import (
    CorrectionAccumulator,
    CorrectionError,
    accumulate,
    aggregate_global_norm,
    apply_global,
    apply_local,
    joint_aggregate,
)
from fedcorrect.problems import QuadraticFamily, client_oracle, quad_grad
from fedcorrect.server_opt import aggregate


def test_accumulate_plain_sum():
    acc = CorrectionAccumulator.empty(1)
    acc = accumulate(acc, np.array([2.0]), 0.0)
    assert acc.M == pytest.approx([2.0])
    acc = accumulate(acc, np.array([3.0]), 0.0)
    assert acc.M == pytest.approx([3.0])
    assert acc.N == pytest.approx([5.0])


def test_accumulate_momentum_weighted():
    acc = accumulate(CorrectionAccumulator.empty(1), np.array([1.0]), 0.5)
    assert acc.M == pytest.approx([0.5])
    acc = accumulate(acc, np.array([1.0]), 0.5)
    assert acc.M == pytest.approx([0.75])
    assert acc.N == pytest.approx([1.25])


def test_empty_accumulator_is_zero():
    assert np.array_equal(CorrectionAccumulator.empty(3).N, np.zeros(3))


def test_apply_local_examples():
    assert apply_local(np.array([0.19]), np.array([0.2])) == pytest.approx([0.95], abs=1e-15)
    assert np.array_equal(apply_local(np.zeros(2), np.ones(2)), np.zeros(2))
    d = np.array([0.3, -2.0])
    assert np.array_equal(apply_local(d, np.ones(2)), d)


@pytest.mark.parametrize("n", [[0.0], [-1.0], [1e-13], [np.nan]])
def test_apply_local_rejects_degenerate_n(n):
    with pytest.raises(CorrectionError):
        apply_local(np.array([1.0]), np.array(n))


def test_global_norm_examples():
    assert aggregate_global_norm([np.array([2.0]), np.array([4.0])], [0.5, 0.5]) == pytest.approx([0.375])
    n = np.array([0.5, 4.0])
    assert aggregate_global_norm([n, n, n], [0.2, 0.3, 0.5]) == pytest.approx(1 / n)
    assert aggregate_global_norm([np.array([8.0])], [1.0]) == pytest.approx([0.125])
    with pytest.raises(CorrectionError):
        aggregate_global_norm([], [])


def test_apply_global_continues_example():
    d = 0.7
    n_list = [np.array([2.0]), np.array([4.0])]
    n_s = aggregate_global_norm(n_list, [0.5, 0.5])
    corrected = aggregate([apply_local(np.array([d]), n) for n in n_list], [0.5, 0.5])
    assert apply_global(corrected, n_s) == pytest.approx([d], abs=1e-15)
    assert joint_aggregate([np.array([d])] * 2, n_list, [0.5, 0.5]) == pytest.approx([d], abs=1e-15)
    assert np.array_equal(apply_global(np.zeros(1), n_s), np.zeros(1))


def test_joint_matches_direct_formula():
    rng = np.random.default_rng(1)
    deltas = list(rng.normal(size=(4, 3)))
    ns = list(rng.uniform(0.1, 2.0, size=(4, 3)))
    w = [0.1, 0.2, 0.3, 0.4]
    direct = apply_global(aggregate([apply_local(d, n) for d, n in zip(deltas, ns)], w), aggregate_global_norm(ns, w))
    assert np.allclose(joint_aggregate(deltas, ns, w), direct, rtol=1e-13, atol=0)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 6).flatmap(
        lambda m: st.tuples(
            st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=m, max_size=m),
            st.lists(st.floats(1e-3, 1e3), min_size=3, max_size=3),
            st.lists(st.floats(0.01, 1.0), min_size=m, max_size=m),
        )
    )
)
def test_joint_on_homogeneous_n_is_bitwise_uncorrected(args):
    deltas, n, raw_w = args
    w = list(np.asarray(raw_w) / np.sum(raw_w))
    deltas = [np.asarray(d) for d in deltas]
    ns = [np.asarray(n)] * len(deltas)
    assert np.array_equal(joint_aggregate(deltas, ns, w), aggregate(deltas, w))


def test_sgd_local_correction_is_mean_local_gradient():
    fam = QuadraticFamily.from_minimizers([np.array([1.0, 3.0])], [np.array([2.0, -1.0])])
    kind = ClientOptKind("sgd", lr=0.05, local_steps=7)
    res = run_local(kind, client_oracle(fam, 0), np.zeros(2), record=True)
    mean_grad = np.mean([quad_grad(fam, 0, x) for x in res.iterates[:-1]], axis=0)
    assert np.allclose(apply_local(res.delta, res.n_matrix), mean_grad, atol=1e-14)
    assert np.allclose(res.n_matrix, 0.05 * 7)


def test_single_step_correction_is_exact_gradient():
    h = np.array([[2.0, 0.5], [0.5, 1.0]])
    fam = QuadraticFamily(H=h[None], e=np.array([[1.0, -1.0]]))
    kind = ClientOptKind("precond_gd", lr=0.3, preconditioner=np.array([0.2, 1.5]))
    x = np.array([0.4, 2.0])
    res = run_local(kind, client_oracle(fam, 0), x)
    assert np.allclose(apply_local(res.delta, res.n_matrix), quad_grad(fam, 0, x), atol=1e-14)


def test_correction_converges_as_lr_shrinks():
    fam = QuadraticFamily.from_minimizers([np.array([1.0, 5.0])], [np.array([1.0, 1.0])])
    x = np.zeros(2)
    outs = []
    for lr in (1e-2, 1e-3, 1e-4):
        res = run_local(ClientOptKind("sgd", lr=lr, local_steps=4), client_oracle(fam, 0), x)
        outs.append(apply_local(res.delta, res.n_matrix))
    limit = quad_grad(fam, 0, x)
    errs = [np.linalg.norm(o - limit) for o in outs]
    # first-order bias: each tenfold lr cut shrinks the error about tenfold
    assert errs[0] / errs[1] > 9 and errs[1] / errs[2] > 9
