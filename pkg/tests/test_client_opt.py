import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcorrect.client_opt import ClientOptKind, ClientOptState, reset_state, run_local, step
from fedcorrect.problems import NoiseModel, QuadraticFamily, client_oracle, local_min


def half_square(x, rng):
    return x.copy()


def test_reset_adagrad_eps_one():
    st_ = reset_state(ClientOptKind("adagrad", lr=0.1, eps=1.0), 3)
    assert np.array_equal(st_.v, np.ones(3))
    assert np.array_equal(st_.m, np.zeros(3))
    assert st_.step_count == 0


def test_reset_adam_any_beta():
    st_ = reset_state(ClientOptKind("adam", lr=0.1, beta1=0.7, beta2=0.3, eps=0.5), 2)
    assert np.array_equal(st_.m, np.zeros(2))
    assert np.array_equal(st_.v, np.full(2, 0.25))


def test_reset_sgd_identity_preconditioner():
    kind = ClientOptKind("sgd", lr=0.1)
    _, _, b = step(kind, reset_state(kind, 2), np.zeros(2), np.ones(2))
    assert np.array_equal(b, np.ones(2))


def test_sgd_step():
    kind = ClientOptKind("sgd", lr=0.1)
    x, st_, b = step(kind, reset_state(kind, 1), np.array([1.0]), np.array([2.0]))
    assert x == pytest.approx([0.8], abs=1e-15)
    assert b == pytest.approx([1.0])
    assert st_.step_count == 1


def test_adagrad_step():
    kind = ClientOptKind("adagrad", lr=0.1, eps=1.0)
    x, st_, b = step(kind, reset_state(kind, 1), np.array([1.0]), np.array([3.0]))
    assert st_.v == pytest.approx([10.0])
    assert b == pytest.approx([10**-0.5])
    assert x[0] == pytest.approx(1 - 0.1 * 3 / np.sqrt(10), abs=1e-15)
    assert x[0] == pytest.approx(0.905132, abs=1e-6)


def test_adam_step_root_accumulator_convention():
    # v0 = eps^2 = 1 -> v = 0.5*1 + 0.5*1 = 1, m = 0.5, x' = 1 - 0.1*0.5
    kind = ClientOptKind("adam", lr=0.1, beta1=0.5, beta2=0.5, eps=1.0)
    x, st_, b = step(kind, reset_state(kind, 1), np.array([1.0]), np.array([1.0]))
    assert st_.m == pytest.approx([0.5])
    assert st_.v == pytest.approx([1.0])
    assert b == pytest.approx([1.0])
    assert x == pytest.approx([0.95], abs=1e-15)


def test_yogi_update_from_zero_accumulator():
    kind = ClientOptKind("yogi", lr=0.1, beta2=0.5)
    state = ClientOptState(m=np.zeros(1), v=np.zeros(1))
    _, st_, _ = step(kind, state, np.array([0.0]), np.array([2.0]))
    assert st_.v == pytest.approx([2.0])


def test_step_does_not_mutate_state():
    kind = ClientOptKind("adam", lr=0.1, beta1=0.9)
    state = reset_state(kind, 2)
    m0, v0 = state.m.copy(), state.v.copy()
    step(kind, state, np.ones(2), np.ones(2))
    assert np.array_equal(state.m, m0) and np.array_equal(state.v, v0)


@pytest.mark.parametrize(
    "x,g,err",
    [
        (np.ones(2), np.ones(3), ValueError),
        (np.ones(2), np.array([1.0, np.nan]), FloatingPointError),
        (np.array([np.inf, 0.0]), np.ones(2), FloatingPointError),
    ],
)
def test_step_rejects_bad_input(x, g, err):
    kind = ClientOptKind("sgd", lr=0.1)
    with pytest.raises(err):
        step(kind, reset_state(kind, 2), x, g)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"name": "sgd", "lr": 0.0},
        {"name": "sgd", "lr": 0.1, "local_steps": 0},
        {"name": "sgd", "lr": 0.1, "beta1": 0.5},
        {"name": "adam", "lr": 0.1, "eps": 0.0},
        {"name": "adam", "lr": 0.1, "beta2": 1.0},
        {"name": "precond_gd", "lr": 0.1},
        {"name": "precond_gd", "lr": 0.1, "preconditioner": np.array([1.0, -1.0])},
        {"name": "rmsprop", "lr": 0.1},
    ],
)
def test_invalid_kinds(kwargs):
    with pytest.raises(ValueError):
        ClientOptKind(**kwargs)


def test_sgd_forces_zero_betas():
    kind = ClientOptKind("sgd", lr=0.1, beta2=0.9)
    assert kind.beta1 == 0.0 and kind.beta2 == 0.0


def test_run_local_sgd_half_square():
    res = run_local(ClientOptKind("sgd", lr=0.1, local_steps=2), half_square, np.array([1.0]), record=True)
    assert [float(v[0]) for v in res.iterates] == pytest.approx([1.0, 0.9, 0.81], abs=1e-15)
    assert res.delta == pytest.approx([0.19], abs=1e-15)
    assert res.n_matrix == pytest.approx([0.2], abs=1e-15)
    assert len(res.preconditioner_trace) == 2


@pytest.mark.parametrize("name", ["sgd", "adagrad", "adam", "yogi"])
def test_zero_gradients_do_not_move(name):
    kind = ClientOptKind(name, lr=0.3, local_steps=5, beta1=0.0 if name == "sgd" else 0.9)
    res = run_local(kind, lambda x, rng: np.zeros_like(x), np.array([1.0, -2.0]))
    assert np.array_equal(res.delta, np.zeros(2))
    assert np.all(res.n_matrix > 0)


def test_newton_step_hits_local_minimum():
    h = np.array([[3.0, 0.0], [0.0, 0.5]])
    fam = QuadraticFamily(H=h[None], e=np.array([[1.0, 2.0]]))
    kind = ClientOptKind("precond_gd", lr=1.0, preconditioner=1.0 / np.diag(h))
    res = run_local(kind, client_oracle(fam, 0), np.array([5.0, -5.0]))
    assert np.allclose(np.array([5.0, -5.0]) - res.delta, local_min(fam, 0), atol=1e-14)


def test_sgd_equals_identity_precond_bitwise():
    x = np.array([0.3, -1.7, 2.2])
    g = np.array([1.1, 0.4, -0.9])
    sgd = ClientOptKind("sgd", lr=0.07)
    pgd = ClientOptKind("precond_gd", lr=0.07, preconditioner=np.ones(3))
    a, _, _ = step(sgd, reset_state(sgd, 3), x, g)
    b, _, _ = step(pgd, reset_state(pgd, 3), x, g)
    assert np.array_equal(a, b)


def test_restart_independence():
    fam = QuadraticFamily.from_minimizers([np.array([1.0, 4.0])], [np.array([1.0, -1.0])])
    kind = ClientOptKind("adam", lr=0.05, local_steps=6, beta1=0.9, beta2=0.99)
    oracle = client_oracle(fam, 0, NoiseModel(sigma=0.3))
    a = run_local(kind, oracle, np.zeros(2), np.random.default_rng([4, 1, 1]))
    b = run_local(kind, oracle, np.zeros(2), np.random.default_rng([4, 1, 1]))
    assert np.array_equal(a.delta, b.delta) and np.array_equal(a.n_matrix, b.n_matrix)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_adagrad_preconditioner_never_grows(grads):
    kind = ClientOptKind("adagrad", lr=0.01, local_steps=len(grads))
    seq = iter(grads)
    res = run_local(kind, lambda x, rng: np.array([next(seq)]), np.zeros(1), record=True)
    trace = np.array(res.preconditioner_trace).ravel()
    assert np.all(np.diff(trace) <= 0)
    assert np.all(trace > 0)


def test_gd_contraction_isotropic_quadratic():
    mu, lr, k = 1.0, 0.1, 5
    fam = QuadraticFamily(H=np.array([mu * np.eye(2)]), e=np.array([[0.5, -0.5]]))
    kind = ClientOptKind("sgd", lr=lr, local_steps=k)
    oracle = client_oracle(fam, 0)
    x, y = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    ax = x - run_local(kind, oracle, x).delta
    ay = y - run_local(kind, oracle, y).delta
    ratio = np.sum((ax - ay) ** 2) / np.sum((x - y) ** 2)
    assert ratio == pytest.approx((1 - lr * mu) ** (2 * k), abs=1e-12)
