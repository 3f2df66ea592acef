import json

import numpy as np
import pytest

from fedcorrect.analysis import (
    BoundInputs,
    decaying_server_lr,
    decaying_server_lr_beta_cap,
    error_bound,
    estimate_h,
    estimate_q,
    local_correction_lrs,
    rate_factor,
    residual_landscape,
    sgd_h,
    sgd_q,
)
from fedcorrect.client_opt import ClientOptKind
from fedcorrect.problems import NoiseModel, QuadraticFamily, fixed_point_closed_form, hetero_2d, skew_residual, global_min
from fedcorrect.sim import make_round_operator, prepare, load_config


def isotropic(mu, dim=2):
    return QuadraticFamily(H=np.array([mu * np.eye(dim)]), e=np.array([np.linspace(-1, 1, dim)]))


def test_sgd_closed_forms():
    assert sgd_h(0.1, 1.0, 3) == pytest.approx(0.531441, abs=1e-15)
    assert sgd_h(0.1, 1.0, 0) == 1.0
    assert sgd_q(0.1, 0) == 0.0
    assert sgd_q(0.1, 10) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        sgd_h(2.0, 1.0, 1)


def test_estimate_h_isotropic_gd():
    kind = ClientOptKind("sgd", lr=0.1)
    rep = estimate_h(kind, isotropic(1.0), 0, 5, np.zeros(2), np.array([1.0, -2.0]))
    assert rep.h_hat == pytest.approx(0.9**10, abs=1e-10)
    assert rep.h_hat == pytest.approx(0.348678, abs=1e-6)
    assert estimate_h(kind, isotropic(1.0), 0, 0, np.zeros(2), np.ones(2)).h_hat == 1.0
    with pytest.raises(ValueError):
        estimate_h(kind, isotropic(1.0), 0, 1, np.ones(2), np.ones(2))


def test_estimate_h_scale_invariant_on_quadratics():
    fam = hetero_2d()
    kind = ClientOptKind("sgd", lr=0.05)
    base = np.array([0.2, 0.4])
    off = np.array([0.3, -0.1])
    noise = NoiseModel(sigma=0.5)
    a = estimate_h(kind, fam, 1, 4, base, base + off, trials=20, rng=np.random.default_rng(1), noise=noise)
    b = estimate_h(kind, fam, 1, 4, base, base + 2 * off, trials=20, rng=np.random.default_rng(1), noise=noise)
    assert a.h_hat == pytest.approx(b.h_hat, rel=1e-9)


def test_estimate_h_common_random_numbers():
    # paired noise cancels exactly on a linear operator, so every trial sees the same ratio
    kind = ClientOptKind("sgd", lr=0.1)
    rep = estimate_h(kind, isotropic(1.0), 0, 3, np.zeros(2), np.ones(2), trials=5, noise=NoiseModel(sigma=2.0))
    assert np.allclose(rep.ratios, 0.9**6, atol=1e-12)


def test_estimate_q_single_step_and_bound():
    kind = ClientOptKind("sgd", lr=0.1)
    fam = isotropic(1.0, dim=1)
    noise = NoiseModel(sigma=1.0)
    one = estimate_q(kind, fam, 0, 1, np.zeros(1), noise, trials=4000, rng=np.random.default_rng(2))
    assert abs(one.q_hat - 0.01) < 3 * one.std_error
    ten = estimate_q(kind, fam, 0, 10, np.zeros(1), noise, trials=4000, rng=np.random.default_rng(3))
    assert ten.q_hat <= 1.05 * ten.q_bound
    assert estimate_q(kind, fam, 0, 10, np.zeros(1), NoiseModel(), trials=10).q_hat == 0.0


def test_report_json_records():
    rep = estimate_h(ClientOptKind("sgd", lr=0.1), isotropic(1.0), 0, 1, np.zeros(2), np.ones(2))
    assert json.loads(json.dumps(rep.to_dict()))["type"] == "contraction"


def test_error_bound_examples():
    inputs = BoundInputs(h=[0.25], q=[0.0], w=[1.0], sigma=0.0, x0_err=1.0, T=4)
    assert error_bound(inputs) == pytest.approx(32 / 0.75 * 0.25**2, abs=1e-14)
    assert error_bound(inputs) == pytest.approx(2.6666666666666665)
    values = [error_bound(BoundInputs([0.25], [0.0], [1.0], 0.0, 1.0, t)) for t in (1, 10, 100, 1000)]
    assert all(a > b for a, b in zip(values, values[1:])) and values[-1] < 1e-100
    lo = error_bound(BoundInputs([0.3, 0.5], [0.01, 0.01], [0.5, 0.5], 1.0, 1.0, 10))
    hi = error_bound(BoundInputs([0.3, 0.6], [0.01, 0.01], [0.5, 0.5], 1.0, 1.0, 10))
    assert hi > lo


@pytest.mark.parametrize("h", [[0.0], [1.0], [1.2]])
def test_bound_inputs_need_contraction(h):
    with pytest.raises(ValueError):
        BoundInputs(h=h, q=[0.0], w=[1.0], sigma=0.0, x0_err=1.0, T=1)


def test_local_correction_lrs_branches():
    # D/(L^2 Lambda G^2) = 1: the T branch wins once T > 1
    eta, alpha = local_correction_lrs(1, 1.0, 1.0, 1.0, 1.0, 10**6)
    assert eta == pytest.approx(1e-2) and alpha == pytest.approx(1e-2)
    eta, alpha = local_correction_lrs(2, 1.0, 1.0, 1.0, 1e6, 8)
    assert eta == pytest.approx(0.5) and alpha == pytest.approx(1.0)
    for args in [(1, 2.0, 1.0, 1.0, 1.0, 1000), (1, 2.0, 1.0, 1.0, 1e5, 2)]:
        e1, a1 = local_correction_lrs(*args)
        e2, _ = local_correction_lrs(2 * args[0], *args[1:])
        assert e2 >= e1 / 2 - 1e-15 and a1 <= 1 / args[1] + 1e-15


def test_decaying_server_lr():
    vals = [decaying_server_lr(t, 0.1, 1.0, 2, 3.0) for t in range(5)]
    assert vals[0] == pytest.approx(2 / ((1 - 0.9**4) * 3.0))
    for t in range(4):
        assert vals[t] == pytest.approx(vals[t + 1] * (t + 1 + 3.0) / (t + 3.0), rel=1e-14)
    assert decaying_server_lr(10**9, 0.1, 1.0, 2, 3.0) < 1e-8
    assert decaying_server_lr_beta_cap(1.0, 0.1, 1.0, 1, 1.0) == pytest.approx(4 * 0.01 / 0.19**2)


@pytest.mark.parametrize("tau", [2, 10, 100])
def test_rate_factor_below_three(tau):
    assert rate_factor(1.0 / tau, tau) < 3.0


def _landscape_config():
    return {
        "schema_version": 1,
        "problem": {"type": "quadratic", "preset": "hetero_2d"},
        "client_opt": {"kind": "precond_gd", "lr": 0.1, "local_steps": 4,
                       "preconditioner": [[1.0, 0.125], [0.25, 1.0]]},
        "rounds": 1,
    }


def test_landscape_zero_at_fixed_point_and_matches_skew_residual():
    exp = prepare(load_config(_landscape_config()))
    p = [k.preconditioner for k in exp.kinds]
    fixed = fixed_point_closed_form(exp.problem, 0.1, 4, p)
    x_star = global_min(exp.problem)
    (_, r_fixed), (_, r_star) = residual_landscape(make_round_operator(exp), [fixed, x_star])
    assert r_fixed < 1e-10
    assert r_star == pytest.approx(np.linalg.norm(skew_residual(exp.problem, 0.1, 4, p, x_star)), abs=1e-10)


def test_landscape_single_client_minimum():
    cfg = {
        "schema_version": 1,
        "problem": {"type": "quadratic", "clients": [{"H": [2.0], "x_star": [0.75]}]},
        "client_opt": {"kind": "sgd", "lr": 0.1, "local_steps": 3},
        "rounds": 1,
    }
    grid = [np.array([v]) for v in np.linspace(0.0, 1.5, 7)]
    out = residual_landscape(make_round_operator(prepare(load_config(cfg))), grid)
    res = [r for _, r in out]
    assert res[3] == 0.0 and min(res) == res[3]
