import numpy as np
import pytest

from eqlearn import tensor as T
from eqlearn import solver as S
from eqlearn.models import ModelSpec, Model, init_params
from eqlearn.problems import Problem, build_min_norm_problem
from eqlearn.qp_oracle import solve_box_qp, solve_eq_qp


def tiny_qp():
    return build_min_norm_problem(np.eye(2), np.array([2.0, -1.0]))


def test_empirical_lagrangian_zero_duals_is_objective():
    obj = T.const(1.25)
    expr = S.empirical_lagrangian(obj, [T.const(0.4)], [T.const(-0.2)])
    val = T.evaluate(expr, {"lam": np.zeros(1), "mu": np.zeros(1)})
    assert val == 1.25


def test_empirical_lagrangian_weighted_slack():
    expr = S.empirical_lagrangian(T.const(0.0), [], [T.const(0.2)])
    assert T.evaluate(expr, {"mu": np.array([3.0])}) == pytest.approx(0.6, abs=1e-15)


def test_empirical_lagrangian_gradient_fd():
    spec = ModelSpec("linear", (2, 1))
    m = Model(spec, np.array([0.4, -0.3, 0.1]))
    x = np.random.default_rng(0).normal(size=(6, 2))
    from eqlearn.models import forward_expr, l2_penalty

    pred = forward_expr(spec, T.const(x))
    slack = T.mean(T.square(pred)) - 0.3
    expr = S.empirical_lagrangian(l2_penalty(spec, 0.5), [slack], [slack * 2.0])
    binds = dict(m.param_bindings())
    binds["lam"] = np.array([0.7])
    binds["mu"] = np.array([-1.3])
    assert T.finite_diff_check(expr, binds, h=1e-5) < 1e-6


def test_dual_step_projection_and_arithmetic():
    d = S.DualState(lam=np.array([0.5]), mu=np.array([0.3]))
    out = S.dual_step(d, np.array([-0.7]), np.array([0.2]), eta=1.0)
    assert out.lam[0] == 0.0
    out = S.dual_step(d, np.array([0.0]), np.array([0.2]), eta=0.1)
    assert out.mu[0] == pytest.approx(0.32, abs=1e-15)


def test_dual_step_zero_slack_is_fixed_point():
    d = S.DualState(lam=np.array([0.5, 0.0]), mu=np.array([-1.0]))
    out = S.dual_step(d, np.zeros(2), np.zeros(1), eta=0.7)
    np.testing.assert_array_equal(out.lam, d.lam)
    np.testing.assert_array_equal(out.mu, d.mu)


def test_dual_step_rejects_nan():
    d = S.DualState(lam=np.array([0.5]), mu=np.zeros(0))
    with pytest.raises(ValueError):
        S.dual_step(d, np.array([np.nan]), np.zeros(0), eta=0.1)


def test_lambda_stays_nonnegative_under_random_steps():
    rng = np.random.default_rng(1)
    d = S.DualState(lam=np.zeros(3), mu=np.zeros(2))
    for _ in range(200):
        d = S.dual_step(d, rng.normal(size=3), rng.normal(size=2), eta=0.3)
        assert np.all(d.lam >= 0)


def test_run_qp_exact_oracle_converges_to_closed_form():
    problem = tiny_qp()
    cfg = S.SolverConfig(eta=0.5, primal_oracle=S.ExactQPOracle(), t_max=200,
                         slack_tol=1e-12)
    model, duals, traj = S.run_primal_dual(problem, cfg)
    np.testing.assert_allclose(duals.mu, [-2.0, 1.0], atol=1e-10)
    w = model.theta[:2]
    np.testing.assert_allclose(w, [2.0, -1.0], atol=1e-10)
    assert len(traj) < 200  # slack_tol stopped it early


def test_run_without_constraints_minimizes_objective():
    spec = ModelSpec("linear", (2, 1))
    target = np.array([1.0, -2.0, 0.5])
    from eqlearn.models import forward_expr

    th = [T.param(n, s) for n, s in spec.param_shapes()]
    obj = T.sum_(T.square(T.reshape(th[0], (2,)) - T.const(target[:2]))) + T.square(
        T.reshape(th[1], ()) - target[2]
    )
    problem = Problem(
        name="plain",
        objective=obj,
        eq_constraints=(),
        ineq_constraints=(),
        init_model=init_params(spec, 0),
    )
    cfg = S.SolverConfig(
        eta=1.0,
        primal_oracle=S.GradientOracle(k=5, optimizer="sgd", lr=0.2),
        t_max=100,
    )
    model, duals, traj = S.run_primal_dual(problem, cfg)
    assert duals.lam.size == 0 and duals.mu.size == 0
    np.testing.assert_allclose(model.theta, target, atol=1e-6)


def test_zero_gradient_steps_leave_model_unchanged():
    problem = tiny_qp()
    cfg = S.SolverConfig(
        eta=0.1, primal_oracle=S.GradientOracle(k=0, lr=0.1), t_max=3
    )
    model, _, _ = S.run_primal_dual(problem, cfg)
    np.testing.assert_array_equal(model.theta, problem.init_model.theta)


def test_gradient_oracle_approaches_exact_minimum():
    problem = tiny_qp()
    mu = np.array([0.7, -0.4])
    qhat = problem.qhat(np.zeros(0), mu)
    gaps = []
    for k in (1, 5, 50):
        cfg = S.SolverConfig(
            eta=1e-9,  # effectively freeze the duals at the first iterate
            primal_oracle=S.GradientOracle(k=k, optimizer="sgd", lr=0.4),
            t_max=1,
            init_mu=mu,
        )
        _, _, traj = S.run_primal_dual(problem, cfg)
        gaps.append(traj.lagrangian[0] - qhat)
    assert gaps[0] > gaps[1] > gaps[2] >= -1e-12
    assert gaps[2] < 1e-6


def test_exact_oracle_requires_closed_form():
    spec = ModelSpec("linear", (1, 1))
    problem = Problem(
        name="no_closed_form",
        objective=T.sum_(T.square(T.param("w0", (1, 1)))),
        eq_constraints=(),
        ineq_constraints=(),
        init_model=init_params(spec, 0),
    )
    cfg = S.SolverConfig(eta=0.1, primal_oracle=S.ExactQPOracle(), t_max=2)
    with pytest.raises(ValueError):
        S.run_primal_dual(problem, cfg)


def test_divergence_guard_trips():
    problem = tiny_qp()
    cfg = S.SolverConfig(eta=1e9, primal_oracle=S.ExactQPOracle(), t_max=500)
    with pytest.raises(S.DivergenceError):
        S.run_primal_dual(problem, cfg)


def test_determinism_bitwise():
    problem = build_min_norm_problem(
        np.array([[1.3, 0.2], [-0.1, 0.8]]), np.array([0.5, 1.5])
    )
    cfg = S.SolverConfig(eta=0.4, primal_oracle=S.ExactQPOracle(), t_max=50)
    _, d1, t1 = S.run_primal_dual(problem, cfg)
    _, d2, t2 = S.run_primal_dual(problem, cfg)
    np.testing.assert_array_equal(d1.mu, d2.mu)
    np.testing.assert_array_equal(t1.lagrangian, t2.lagrangian)


def test_terminated_rule():
    assert S.terminated([1.0] * 10, window=5, delta=1e-9)
    assert not S.terminated([1.0] * 9, window=5, delta=1e-9)
    ramp = list(np.linspace(0, 10, 40))
    assert not S.terminated(ramp, window=10, delta=1e-3)
    with pytest.raises(ValueError):
        S.terminated([1.0, 2.0], window=0, delta=0.1)


def test_trajectory_csv_roundtrip(tmp_path):
    problem = tiny_qp()
    cfg = S.SolverConfig(eta=0.5, primal_oracle=S.ExactQPOracle(), t_max=7)
    _, _, traj = S.run_primal_dual(problem, cfg)
    path = tmp_path / "trajectory.csv"
    traj.to_csv(path)
    text = path.read_text().splitlines()
    assert text[0] == (
        "step,lagrangian,objective,slack_h0,slack_h1,mu_h0,mu_h1,avg_lagrangian"
    )
    assert len(text) == 8
    row1 = text[1].split(",")
    assert float(row1[1]) == traj.lagrangian[0]  # 17 digits round-trips exactly


def test_theorem2_report_limit_behaviour():
    problem = tiny_qp()
    cfg = S.SolverConfig(eta=0.2, primal_oracle=S.ExactQPOracle(), t_max=400)
    _, _, traj = S.run_primal_dual(problem, cfg)
    d_star = problem.meta["d_star"]
    rho = max(traj.rho_hat)
    assert rho <= 1e-10
    B = max(np.max(np.abs(s)) for s in traj.slacks)
    U0 = traj.dist_sq[0]
    rep = S.theorem2_report(traj, d_star, rho, cfg.eta, B, U0)
    assert rep["all_hold"]
    # the T -> inf limit of the bound is the step-size floor
    floor = 0.5 * 2 * cfg.eta * B * B + rho
    t_last = len(traj)
    assert rep["rhs"][-1] - U0 / (2 * cfg.eta * t_last) == pytest.approx(floor, rel=1e-12)


def test_effective_duals():
    np.testing.assert_array_equal(
        S.effective_duals([3.0, 0.0], [1.0, 2.0]), [2.0, -2.0]
    )
    np.testing.assert_array_equal(S.effective_duals([1.0], [1.0]), [0.0])
    mu = np.array([1.5, -2.5, 0.0])
    back = S.effective_duals(np.maximum(mu, 0), np.maximum(-mu, 0))
    np.testing.assert_array_equal(back, mu)
    with pytest.raises(ValueError):
        S.effective_duals([-1.0], [0.0])


def test_to_double_sided_structure():
    problem = tiny_qp()
    ds = S.to_double_sided(problem, eps=0.0)
    assert len(ds.eq_constraints) == 0
    assert len(ds.ineq_constraints) == 4
    labels = [l for l, _ in ds.ineq_constraints]
    assert labels == ["h0+", "h1+", "h0-", "h1-"]
    # opposite-sign slacks at eps=0
    m = problem.init_model
    binds = m.param_bindings()
    vals = [T.evaluate(s, binds) for _, s in ds.ineq_constraints]
    assert vals[0] == pytest.approx(-vals[2], abs=1e-15)
    assert vals[1] == pytest.approx(-vals[3], abs=1e-15)


def test_double_sided_dual_value_matches_box_oracle():
    X = np.array([[1.2, 0.3], [-0.2, 0.9]])
    y = np.array([1.0, -0.5])
    eps = 0.2
    problem = S.to_double_sided(build_min_norm_problem(X, y), eps)
    cfg = S.SolverConfig(eta=0.3, primal_oracle=S.ExactQPOracle(), t_max=4000)
    _, duals, traj = S.run_primal_dual(problem, cfg)
    box = solve_box_qp(X, y, eps)
    # strong duality: the dual ascent value approaches the box optimum
    assert traj.lagrangian[-1] == pytest.approx(box.objective, abs=1e-6)
    mu_eff = S.effective_duals(duals.lam[:2], duals.lam[2:])
    np.testing.assert_allclose(mu_eff, box.duals[0] - box.duals[1], atol=1e-5)


def test_double_sided_trajectory_equivalence_on_qp():
    # equality updates move the dual by eta*h; the +/- pair moves the
    # effective dual by 2*eta*h, so the matched comparison runs the equality
    # problem at twice the double-sided step
    X = np.array([[1.1, -0.4], [0.3, 0.8]])
    y = np.array([0.7, -1.2])
    eta = 0.15
    steps = 400
    base = build_min_norm_problem(X, y)
    eq_cfg = S.SolverConfig(eta=2 * eta, primal_oracle=S.ExactQPOracle(), t_max=steps)
    _, _, eq_traj = S.run_primal_dual(base, eq_cfg)

    B = max(np.max(np.abs(s)) for s in eq_traj.slacks)
    b_prime = 10 * eta * B * steps
    ds = S.to_double_sided(base, eps=0.0)
    ds_cfg = S.SolverConfig(
        eta=eta,
        primal_oracle=S.ExactQPOracle(),
        t_max=steps,
        init_lam=np.full(4, b_prime),
    )
    _, _, ds_traj = S.run_primal_dual(ds, ds_cfg)
    worst = 0.0
    for t in range(steps):
        mu_eq = eq_traj.mu[t]
        lam = ds_traj.lam[t]
        mu_eff = S.effective_duals(lam[:2], lam[2:])
        worst = max(worst, float(np.max(np.abs(mu_eq - mu_eff))))
    assert worst <= 1e-10


def test_double_sided_same_eta_doubles_increments():
    # sanity check of the factor-two relationship itself
    X = np.eye(1)
    y = np.array([1.0])
    base = build_min_norm_problem(X, y)
    eta = 0.1
    eq_cfg = S.SolverConfig(eta=eta, primal_oracle=S.ExactQPOracle(), t_max=1)
    _, d_eq, _ = S.run_primal_dual(base, eq_cfg)
    ds = S.to_double_sided(base, eps=0.0)
    ds_cfg = S.SolverConfig(
        eta=eta, primal_oracle=S.ExactQPOracle(), t_max=1, init_lam=np.full(2, 5.0)
    )
    _, d_ds, _ = S.run_primal_dual(ds, ds_cfg)
    mu_eff = S.effective_duals(d_ds.lam[:1], d_ds.lam[1:])
    assert mu_eff[0] == pytest.approx(2 * d_eq.mu[0], abs=1e-15)
