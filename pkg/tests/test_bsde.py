"""Backward solvers: driver-known oracles, Picard iteration, planning."""

import numpy as np
import pytest

import mrbsde as M
from mrbsde.bsde import evaluate_drivers, zero_solution
from mrbsde.errors import AssumptionError, ConfigError, ConvergenceError

from oracles import se_band


@pytest.fixture(scope="module")
def brownian_bundle():
    grid = M.build_grid(1.0, 50)
    return M.simulate_bundle(M.CompensatorSpec.constant(1.0),
                             M.MarkSpace.single(), grid, paths=4000,
                             dims=1, seed=101)


@pytest.fixture(scope="module")
def basis_w():
    return M.RegressionBasisSpec(("const", "w", "w^2"))


@pytest.fixture(scope="module")
def basis_n():
    return M.RegressionBasisSpec(("const", "n"))


def _zero_drivers(bundle):
    shape = (bundle.paths, bundle.grid.steps)
    return np.zeros(shape), np.zeros(shape)


# ---------------------------------------------------------------------------
# driver-known oracles


def test_brownian_terminal(brownian_bundle, basis_w):
    f0, g0 = _zero_drivers(brownian_bundle)
    xi = brownian_bundle.brownian[:, -1, 0]
    sol = M.solve_driver_known(f0, g0, xi, brownian_bundle, basis_w)
    j = brownian_bundle.paths
    assert abs(sol.y[:, 0].mean()) <= 3.0 / np.sqrt(j)
    assert abs(sol.z.mean(axis=0).mean() - 1.0) <= 0.05
    assert abs(sol.u.mean(axis=0).mean()) <= 0.1
    # martingale consistency: zero mean residuals, exactly (intercept in basis)
    for i in range(brownian_bundle.grid.steps):
        resid = sol.y[:, i + 1] - sol.y[:, i]
        assert abs(resid.mean()) <= 1e-10


def test_counting_terminal(basis_n):
    grid = M.build_grid(1.0, 50)
    bundle = M.simulate_bundle(M.CompensatorSpec.constant(1.0),
                               M.MarkSpace.single(), grid, paths=4000,
                               dims=1, seed=103)
    f0, g0 = _zero_drivers(bundle)
    xi = bundle.total_counts()[:, -1].astype(float)
    sol = M.solve_driver_known(f0, g0, xi, bundle, basis_n)
    assert abs(sol.y[:, 0].mean() - 1.0) <= se_band(xi)
    assert abs(sol.u.mean(axis=0).mean() - 1.0) <= 0.1
    assert abs(sol.z.mean()) <= 0.05
    # conditional-mean oracle on count bins at a middle node
    i = 25
    target = xi
    lam = 1.0
    t = bundle.grid.nodes[i]
    for level in (0, 1):
        mask = bundle.total_counts()[:, i] == level
        if mask.sum() < 100:
            continue
        bin_mean = target[mask].mean()
        expected = level + lam * (1.0 - t)
        assert abs(bin_mean - expected) <= se_band(target[mask])
        assert abs(sol.y[mask, i].mean() - expected) <= se_band(target[mask])


def test_constant_terminal(brownian_bundle, basis_w):
    f0, g0 = _zero_drivers(brownian_bundle)
    xi = np.full(brownian_bundle.paths, 5.0)
    sol = M.solve_driver_known(f0, g0, xi, brownian_bundle, basis_w)
    assert np.allclose(sol.y, 5.0, atol=1e-9)
    # per-path z and u carry pure projection noise scaled by xi; the
    # node-averaged mean vanishes within 3 standard errors
    j, m = brownian_bundle.paths, brownian_bundle.grid.steps
    band = 3.0 * 5.0 / np.sqrt(j * 0.02) / np.sqrt(m)
    assert abs(sol.z.mean()) <= band
    assert abs(sol.u.mean()) <= band


def test_terminal_condition_bitwise(brownian_bundle, basis_w):
    f0, g0 = _zero_drivers(brownian_bundle)
    xi = brownian_bundle.brownian[:, -1, 0] ** 2
    sol = M.solve_driver_known(f0, g0, xi, brownian_bundle, basis_w)
    assert np.array_equal(sol.y[:, -1], xi)


def test_driver_accumulation(brownian_bundle, basis_w):
    # constant drivers shift the value by the clock and time integrals
    j, m = brownian_bundle.paths, brownian_bundle.grid.steps
    f_d = np.full((j, m), 0.5)
    g_d = np.full((j, m), -0.25)
    xi = np.zeros(j)
    sol = M.solve_driver_known(f_d, g_d, xi, brownian_bundle, basis_w)
    assert sol.y[:, 0].mean() == pytest.approx(0.5 * 1.0 - 0.25 * 1.0,
                                               abs=1e-9)


def test_zero_mass_interval_sets_u_zero(basis_w):
    grid = M.build_grid(1.0, 10)
    marks = M.MarkSpace.single()
    spec = M.CompensatorSpec.time_varying(
        lambda t: np.array([0.0 if t < 0.5 else 2.0]))
    bundle = M.simulate_bundle(spec, marks, grid, paths=500, dims=1, seed=7)
    f0, g0 = _zero_drivers(bundle)
    xi = bundle.total_counts()[:, -1].astype(float)
    sol = M.solve_driver_known(f0, g0, xi, bundle,
                               M.RegressionBasisSpec(("const", "n")))
    assert np.all(sol.u[:, :4, :] == 0.0)


# ---------------------------------------------------------------------------
# Lipschitz generators


def test_zero_generator_single_iteration(brownian_bundle, basis_w):
    gen = M.GeneratorSpec(terminal=lambda s: s.w[:, 0])
    sol = M.solve_lipschitz(gen, brownian_bundle, basis_w)
    assert sol.meta["iterations"] == 1
    f0, g0 = _zero_drivers(brownian_bundle)
    direct = M.solve_driver_known(f0, g0, brownian_bundle.brownian[:, -1, 0],
                                  brownian_bundle, basis_w)
    assert np.array_equal(sol.y, direct.y)


def test_linear_discounting(brownian_bundle, basis_w):
    r = 0.1
    gen = M.GeneratorSpec(
        g=lambda t, y, z, u, state: -r * y,
        terminal=lambda s: np.ones(s.w.shape[0]),
        lipschitz=(0.0, 0.0, r, 0.0))
    sol = M.solve_lipschitz(gen, brownian_bundle, basis_w, tol=1e-14)
    assert sol.y[:, 0].mean() == pytest.approx(np.exp(-0.1), abs=2e-3)


def test_drift_shift(brownian_bundle, basis_w):
    theta = 0.4
    gen = M.GeneratorSpec(
        g=lambda t, y, z, u, state: theta * z[:, 0],
        terminal=lambda s: s.w[:, 0],
        lipschitz=(0.0, 0.0, 0.0, theta))
    sol = M.solve_lipschitz(gen, brownian_bundle, basis_w, tol=1e-12)
    # value process is the Brownian value plus theta times remaining time;
    # the dominant noise is the terminal sample mean, sd ~ 1/sqrt(J)
    band = 3.5 / np.sqrt(brownian_bundle.paths)
    for i in (0, 25, 40):
        t = brownian_bundle.grid.nodes[i]
        target = brownian_bundle.brownian[:, i, 0] + theta * (1.0 - t)
        gap = sol.y[:, i] - target
        assert abs(gap.mean()) <= band
    assert abs(sol.z.mean() - 1.0) <= 0.05


def test_jump_driver_fixed_point():
    grid = M.build_grid(1.0, 40)
    bundle = M.simulate_bundle(M.CompensatorSpec.constant(1.0),
                               M.MarkSpace.single(), grid, paths=8000,
                               dims=1, seed=104)
    c = 0.3
    gen = M.GeneratorSpec(
        f=lambda t, y, u, phi, state: c * (u * phi).sum(axis=1),
        terminal=lambda s: s.counts_total.astype(float),
        lipschitz=(0.0, c, 0.0, 0.0))
    sol = M.solve_lipschitz(gen, bundle, M.RegressionBasisSpec(("const", "n")),
                            tol=1e-12)
    # u is 1 for the counting terminal, so the driver adds c per unit of
    # clock on top of the terminal sample mean
    xi_mean = bundle.total_counts()[:, -1].mean()
    assert sol.y[:, 0].mean() - xi_mean == pytest.approx(c, abs=0.03)


def test_divergence_error_carries_ratios(brownian_bundle, basis_w):
    gen = M.GeneratorSpec(
        g=lambda t, y, z, u, state: -5.0 * y,
        terminal=lambda s: np.ones(s.w.shape[0]),
        lipschitz=(0.0, 0.0, 5.0, 0.0))
    with pytest.raises(ConvergenceError) as err:
        M.solve_lipschitz(gen, brownian_bundle, basis_w, tol=1e-30,
                          max_iters=3)
    assert isinstance(err.value.ratios, list)


# ---------------------------------------------------------------------------
# weighted distance


def test_distance_zero_for_identical(brownian_bundle, basis_w):
    f0, g0 = _zero_drivers(brownian_bundle)
    xi = brownian_bundle.brownian[:, -1, 0]
    sol = M.solve_driver_known(f0, g0, xi, brownian_bundle, basis_w)
    assert M.weighted_distance(sol, sol, 1.0, 1.0, 1.0, 1.0) == 0.0


def test_distance_zero_constants_reduce_to_ju(brownian_bundle):
    a = zero_solution(brownian_bundle, 0, brownian_bundle.grid.steps)
    b = zero_solution(brownian_bundle, 0, brownian_bundle.grid.steps)
    b.y = b.y + 10.0  # y ignored when both Lipschitz constants vanish
    b.z = b.z + 1.0
    assert M.weighted_distance(a, b, 0.0, 1.0, 0.0, 0.0) == pytest.approx(
        M.weighted_norm(np.ones((1, 51)) * 0.0 + 1.0, brownian_bundle, 0.0,
                        "dt") * 1.0, rel=1e-9)


def test_distance_constant_offset_arithmetic(brownian_bundle):
    m = brownian_bundle.grid.steps
    a = zero_solution(brownian_bundle, 0, m)
    b = zero_solution(brownian_bundle, 0, m)
    c, lf, lg, alpha, beta = 2.0, 0.4, 0.7, 0.25, 0.8
    b.y = b.y + c
    ones = np.ones((1, m + 1))
    norm_a = M.weighted_norm(ones, brownian_bundle, beta, "dA",
                             include_time=True)
    norm_t = M.weighted_norm(ones, brownian_bundle, beta, "dt",
                             include_time=True)
    expected = c ** 2 * (lf / np.sqrt(alpha) * norm_a
                         + lg / np.sqrt(alpha) * norm_t)
    assert M.weighted_distance(a, b, beta, alpha, lf, lg) == pytest.approx(
        expected, rel=1e-12)


# ---------------------------------------------------------------------------
# contraction planning


def test_plan_zero_constants_single_interval(brownian_bundle):
    gen = M.GeneratorSpec(terminal=lambda s: s.w[:, 0])
    plan = M.plan_contraction(gen, 2.0, 1.0, brownian_bundle)
    assert plan.n_intervals == 1
    assert plan.threshold == 0.0
    assert 0 < plan.alphas[0] < 1


def test_threshold_arithmetic():
    lip = (0.0, 0.0, 0.1, 0.1)
    assert M.contraction_threshold(2.0, lip) == pytest.approx(1310.72)
    gen = M.GeneratorSpec(g=lambda t, y, z, u, state: 0.1 * y + 0.1 * z[:, 0],
                          terminal=lambda s: s.w[:, 0], lipschitz=lip)
    grid = M.build_grid(1.0, 10)
    bundle = M.simulate_bundle(M.CompensatorSpec.constant(1.0),
                               M.MarkSpace.single(), grid, paths=200,
                               dims=1, seed=3)
    with pytest.raises(AssumptionError) as err:
        M.plan_contraction(gen, 2.0, 1000.0, bundle)
    assert "1310.72" in str(err.value)


def test_weight_integral_closed_form():
    # unit-rate clock: integral of e^{2 beta s} * 2 ds has a closed form
    grid = M.build_grid(1.0, 400)
    bundle = M.simulate_bundle(M.CompensatorSpec.constant(1.0),
                               M.MarkSpace.single(), grid, paths=5,
                               dims=1, seed=3)
    beta = 1.5
    from mrbsde.scenario import exp_clock_time_integral

    est = exp_clock_time_integral(bundle, beta)
    closed = (np.exp(2 * beta) - 1.0) / beta
    assert est == pytest.approx(closed, rel=0.01)


def test_plan_alpha_inequality_holds(brownian_bundle):
    lip = (0.001, 0.002, 0.002, 0.002)
    gen = M.GeneratorSpec(
        f=lambda t, y, u, phi, state: 0.001 * y,
        g=lambda t, y, z, u, state: 0.002 * y + 0.002 * z[:, 0],
        terminal=lambda s: s.w[:, 0], lipschitz=lip)
    kappa = 1.02
    thr = M.contraction_threshold(kappa, lip)
    beta = 3.0
    assert beta > thr
    plan = M.plan_contraction(gen, kappa, beta, brownian_bundle)
    for alpha in plan.alphas:
        lf, lp, lg, lw = lip
        rhs = (2 * lp ** 2 / alpha + 3 * lf / np.sqrt(alpha)
               + 2 * lw ** 2 / alpha + 3 * lg / np.sqrt(alpha))
        assert beta > rhs
        assert 0 < alpha < 1


def test_plan_infeasible_beta():
    gen = M.GeneratorSpec(g=lambda t, y, z, u, state: 0.1 * y,
                          terminal=lambda s: s.w[:, 0],
                          lipschitz=(0.0, 0.0, 0.1, 0.0))
    grid = M.build_grid(1.0, 10)
    bundle = M.simulate_bundle(M.CompensatorSpec.constant(1.0),
                               M.MarkSpace.single(), grid, paths=100,
                               dims=1, seed=3)
    with pytest.raises(AssumptionError):
        M.plan_contraction(gen, 2.0, 10.0, bundle)  # threshold = 131.072


# ---------------------------------------------------------------------------
# a priori diagnostic


def test_apriori_zero_solution(brownian_bundle):
    sol = zero_solution(brownian_bundle, 0, brownian_bundle.grid.steps)
    assert M.apriori_diagnostic(sol, 1.0)["value"] == 0.0


def test_apriori_unit_deterministic_clock():
    grid = M.build_grid(1.0, 100)
    bundle = M.simulate_bundle(M.CompensatorSpec.constant(1.0),
                               M.MarkSpace.single(), grid, paths=50,
                               dims=1, seed=5)
    sol = zero_solution(bundle, 0, grid.steps)
    sol.y = sol.y + 1.0
    report = M.apriori_diagnostic(sol, 1.0)
    assert report["value"] == pytest.approx(np.e, rel=1e-9)
    assert not report["flagged"]


def test_apriori_stability_across_path_counts(basis_w):
    values = {}
    for j in (1000, 4000):
        grid = M.build_grid(1.0, 25)
        bundle = M.simulate_bundle(M.CompensatorSpec.constant(1.0),
                                   M.MarkSpace.single(), grid, paths=j,
                                   dims=1, seed=500)
        f0 = np.zeros((j, 25))
        sol = M.solve_driver_known(f0, f0, bundle.brownian[:, -1, 0],
                                   bundle, basis_w)
        values[j] = M.apriori_diagnostic(sol, 1.0)["value"]
    assert abs(values[4000] - values[1000]) <= 0.2 * values[1000]


# ---------------------------------------------------------------------------
# basis and regression behaviour


def test_basis_requires_constant():
    with pytest.raises(ConfigError):
        M.RegressionBasisSpec(("w",))


def test_basis_too_rich_rejected(brownian_bundle):
    grid = M.build_grid(1.0, 4)
    bundle = M.simulate_bundle(M.CompensatorSpec.constant(1.0),
                               M.MarkSpace.single(), grid, paths=30,
                               dims=1, seed=5)
    basis = M.RegressionBasisSpec(("const", "w", "w^2", "w^3"))
    f0 = np.zeros((30, 4))
    with pytest.raises(ConfigError):
        M.solve_driver_known(f0, f0, np.zeros(30), bundle, basis)


def test_rank_deficient_design_falls_back_to_ridge(brownian_bundle):
    # node 0 features are degenerate (all paths share the state); the
    # minimal-norm/ridge fallback must keep the fit finite and mean-true
    f0, g0 = _zero_drivers(brownian_bundle)
    xi = brownian_bundle.brownian[:, -1, 0]
    basis = M.RegressionBasisSpec(("const", "w", "n"))
    sol = M.solve_driver_known(f0, g0, xi, brownian_bundle, basis)
    sol.validate()
    assert np.isfinite(sol.y[:, 0]).all()


def test_unknown_feature_rejected(brownian_bundle):
    basis = M.RegressionBasisSpec(("const", "volatility_smile"))
    f0, g0 = _zero_drivers(brownian_bundle)
    with pytest.raises(ConfigError):
        M.solve_driver_known(f0, g0, np.zeros(brownian_bundle.paths),
                             brownian_bundle, basis)


def test_generator_validate(brownian_bundle):
    gen = M.GeneratorSpec(
        g=lambda t, y, z, u, state: -0.1 * y + 0.2 * z[:, 0],
        terminal=lambda s: s.w[:, 0],
        lipschitz=(0.0, 0.0, 0.1, 0.2))
    report = gen.validate(brownian_bundle, beta=1.0)
    assert np.isfinite(report["terminal_weighted_moment"])
    lying = M.GeneratorSpec(
        g=lambda t, y, z, u, state: -0.5 * y,
        terminal=lambda s: s.w[:, 0],
        lipschitz=(0.0, 0.0, 0.1, 0.0))
    with pytest.raises(AssumptionError):
        lying.validate(brownian_bundle, beta=1.0)


def test_solution_export(tmp_path, brownian_bundle, basis_w):
    f0, g0 = _zero_drivers(brownian_bundle)
    xi = brownian_bundle.brownian[:, -1, 0]
    sol = M.solve_driver_known(f0, g0, xi, brownian_bundle, basis_w)
    from mrbsde.bsde import save_solution

    files = save_solution(sol, str(tmp_path / "sol"))
    with open(files["csv"]) as fh:
        header = fh.readline().strip().split(",")
    assert header[:4] == ["path", "node", "t", "y"]
    import json

    meta = json.loads(open(files["meta"]).read())
    assert meta["basis"] == ["const", "w", "w^2"]
