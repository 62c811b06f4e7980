import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgradnorm.bilevel import BilevelProblem, ItdConfig, fedgradnorm_as_bilevel, itd_solve
from fedgradnorm.client import DivergenceError
from fedgradnorm.harness import ExperimentConfig, build_simulation, simulate
from fedgradnorm.taskgen import TaskSpec


def decoupled(dim_u=3, dim_l=2):
    return BilevelProblem(
        upper_fn=lambda u, l: float(u @ u),
        lower_fn=lambda u, l: float(l @ l),
        upper_dim=dim_u,
        lower_dim=dim_l,
        upper_grad_u=lambda u, l: 2 * u,
        lower_grad_l=lambda u, l: 2 * l,
        upper_grad_l=lambda u, l: np.zeros_like(l),
        lower_grad_u=lambda u, l: np.zeros_like(u),
    )


def coupled(c=1.0):
    return BilevelProblem(
        upper_fn=lambda u, l: float(np.sum((u - l) ** 2)),
        lower_fn=lambda u, l: float(np.sum((l - c) ** 2)),
        upper_dim=1,
        lower_dim=1,
        upper_grad_u=lambda u, l: 2 * (u - l),
        lower_grad_l=lambda u, l: 2 * (l - c),
        upper_grad_l=lambda u, l: -2 * (u - l),
        lower_grad_u=lambda u, l: np.zeros_like(u),
    )


@settings(max_examples=25, deadline=None)
@given(
    beta=st.floats(0.01, 0.45),
    K=st.integers(1, 60),
    seed=st.integers(0, 2**16),
)
def test_decoupled_quadratic_decays_geometrically(beta, K, seed):
    x0 = np.random.default_rng(seed).uniform(-3, 3, 3)
    res = itd_solve(decoupled(), ItdConfig(K, 2, 0.1, beta, x0, np.ones(2)))
    expected = (1 - 2 * beta) ** K * x0
    err = np.linalg.norm(res.x_u - expected)
    assert err <= 1e-10 * np.linalg.norm(expected) + 1e-300
    assert len(res.trace) == K


def test_coupled_quadratic_converges():
    res = itd_solve(coupled(1.0), ItdConfig(200, 20, 0.1, 0.1, [5.0], [-2.0]))
    assert abs(res.x_l[0] - 1.0) <= 1e-4
    assert abs(res.x_u[0] - 1.0) <= 1e-4


def test_large_inner_budget_reaches_lower_argmin():
    # g(u, l) = ||l - A u||^2 + 0.5 ||l||^2 has argmin l* = (2/3) A u
    a = np.array([[1.0, -2.0], [0.5, 1.0], [3.0, 0.0]])
    problem = BilevelProblem(
        upper_fn=lambda u, l: float(np.sum(l**2) + np.sum(u**2)),
        lower_fn=lambda u, l: float(np.sum((l - a @ u) ** 2) + 0.5 * np.sum(l**2)),
        upper_dim=2,
        lower_dim=3,
        upper_grad_u=lambda u, l: 2 * u,
        lower_grad_l=lambda u, l: 2 * (l - a @ u) + l,
        lower_grad_u=lambda u, l: -2 * a.T @ (l - a @ u),
    )
    res = itd_solve(problem, ItdConfig(5, 200, 0.2, 0.1, [1.0, -1.0], np.zeros(3)))
    for step in res.trace:
        direct = np.linalg.solve(3 * np.eye(3), 2 * a @ step.x_u)
        assert np.max(np.abs(step.x_l - direct)) <= 1e-6


def test_inner_loop_is_warm_started():
    res = itd_solve(coupled(2.0), ItdConfig(6, 3, 0.05, 0.1, [0.0], [7.0]))
    assert res.trace[0].x_l_start.tolist() == [7.0]
    for prev, cur in zip(res.trace, res.trace[1:]):
        assert np.array_equal(cur.x_l_start, prev.x_l)


def test_outer_step_uses_direct_partial():
    res = itd_solve(coupled(1.0), ItdConfig(1, 1, 0.1, 0.25, [3.0], [0.0]))
    # inner: l = 0 - 0.1 * 2 * (0 - 1) = 0.2 ; outer: u = 3 - 0.25 * 2 * (3 - 0.2)
    assert res.x_l[0] == pytest.approx(0.2, abs=1e-15)
    assert res.x_u[0] == pytest.approx(3 - 0.5 * 2.8, abs=1e-15)


def test_wrong_oracle_rejected():
    with pytest.raises(ValueError, match="upper_grad_u"):
        BilevelProblem(
            upper_fn=lambda u, l: float(u @ u),
            lower_fn=lambda u, l: float(l @ l),
            upper_dim=2,
            lower_dim=2,
            upper_grad_u=lambda u, l: u,
            lower_grad_l=lambda u, l: 2 * l,
        )


def test_config_and_dimension_checks():
    with pytest.raises(ValueError):
        ItdConfig(0, 1, 0.1, 0.1, [0.0], [0.0])
    with pytest.raises(ValueError):
        ItdConfig(1, 1, 0.0, 0.1, [0.0], [0.0])
    with pytest.raises(ValueError):
        itd_solve(decoupled(), ItdConfig(1, 1, 0.1, 0.1, [0.0], [0.0, 0.0]))
    with pytest.raises(ValueError):
        BilevelProblem(lambda u, l: 0.0, lambda u, l: 0.0, 0, 1, None, None)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    with pytest.raises(DivergenceError):
        itd_solve(decoupled(1, 1), ItdConfig(2000, 1, 0.1, 5.0, [1.0], [1.0]))


def small_config(seed, scales=(3.0, 1.0), **kw):
    tasks = [TaskSpec(i, difficulty_scale=s, samples=100) for i, s in enumerate(scales)]
    kw.setdefault("beta", 1e-2)
    kw.setdefault("alpha", 0.05)
    return ExperimentConfig(tasks, rounds=kw.pop("rounds", 5), seed=seed, **kw)


def test_adapter_symmetric_tasks_keep_unit_weights():
    cfg = small_config(0, (1.0, 1.0), rounds=6)
    cfg.tasks = [TaskSpec(0, samples=100, stream=0), TaskSpec(1, samples=100, stream=0)]
    problem, itd = fedgradnorm_as_bilevel(build_simulation(cfg))
    res = itd_solve(problem, itd)
    assert all(np.array_equal(s.x_l, np.ones(2)) for s in res.trace)
    direct = simulate(build_simulation(cfg))
    assert all(m.weight == (1.0, 1.0) for m in direct.metrics)


@pytest.mark.parametrize("seed", range(10))
def test_adapter_matches_server_rounds(seed):
    cfg = small_config(seed)
    direct = simulate(build_simulation(cfg))
    problem, itd = fedgradnorm_as_bilevel(build_simulation(cfg))
    res = itd_solve(problem, itd)
    p_direct = np.array([m.weight for m in direct.metrics])
    p_itd = np.array([s.x_l for s in res.trace])
    np.testing.assert_allclose(p_itd, p_direct, rtol=0, atol=1e-9)
    np.testing.assert_allclose(res.x_u, direct.final_shared.values, rtol=0, atol=1e-9)
    objective = [m.objective for m in direct.metrics]
    np.testing.assert_allclose([s.upper for s in res.trace], objective, rtol=1e-12)


def test_adapter_with_several_weight_steps():
    cfg = small_config(3, weight_steps=3)
    direct = simulate(build_simulation(cfg))
    problem, itd = fedgradnorm_as_bilevel(build_simulation(cfg))
    assert itd.D == 3
    res = itd_solve(problem, itd)
    np.testing.assert_allclose(res.x_l, direct.metrics[-1].weight, rtol=0, atol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_zero_gamma_fixed_point_balances_weighted_norms(seed):
    scales = (3.0, 1.0, 2.0)
    for norm in ("sq", "l1"):
        cfg = small_config(seed, scales, gamma=0.0, norm=norm, rounds=1)
        problem, itd = fedgradnorm_as_bilevel(build_simulation(cfg))
        itd.D, itd.alpha = 4000, 1e-3
        res = itd_solve(problem, itd)
        norms = np.array([r.tail_norm for r in problem.oracle.reports(itd.x_u0)])
        # balance p_i n_i = mean_j p_j n_j with sum p = N, solved directly
        exact = len(norms) * (1 / norms) / np.sum(1 / norms)
        if norm == "sq":
            np.testing.assert_allclose(res.x_l, exact, rtol=0, atol=1e-10)
        else:
            # sign steps chatter around the balance point within one step
            assert np.max(np.abs(res.x_l - exact)) <= itd.alpha * norms.max()


def test_adapter_rejects_unsupported_settings():
    with pytest.raises(ValueError):
        fedgradnorm_as_bilevel(build_simulation(small_config(0, weight_optimizer="adam")))
    with pytest.raises(ValueError):
        fedgradnorm_as_bilevel(build_simulation(small_config(0, strategy="equal")))
