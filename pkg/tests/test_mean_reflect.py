"""Mean reflection: running-sup construction, fixed point, flatness."""

import numpy as np
import pytest

import mrbsde as M
from mrbsde.bsde import zero_solution
from mrbsde.errors import ConfigError

from oracles import running_sup_reflection, se_band


@pytest.fixture(scope="module")
def bundle():
    grid = M.build_grid(1.0, 50)
    return M.simulate_bundle(M.CompensatorSpec.constant(1.0),
                             M.MarkSpace.single(), grid, paths=4000,
                             dims=1, seed=301)


@pytest.fixture(scope="module")
def basis():
    return M.RegressionBasisSpec(("const", "w"))


def _loss(slope=1.0, intercept=0.0, horizon_coeff=0.0, horizon=1.0):
    def fn(t, y):
        return slope * np.asarray(y) + intercept + horizon_coeff * (horizon - t)

    growth = max(slope, abs(intercept) + abs(horizon_coeff) * horizon)
    return M.LossSpec(loss=fn, kappa_lower=slope, kappa_upper=slope,
                      growth=growth)


def _zero_drivers(bundle):
    shape = (bundle.paths, bundle.grid.steps)
    return np.zeros(shape), np.zeros(shape)


def _manual_plan(bundle, gen, beta=1.0, alpha=0.5, n=1):
    """Plan bypassing the feasibility gate, for fixed-point tests whose
    showcase constants would need an astronomically weighted norm."""
    m = bundle.grid.steps
    bounds = np.linspace(0, m, n + 1).astype(int)
    return M.ContractionPlan(
        beta=beta, kappa=1.0, h=bundle.grid.horizon / n, n_intervals=n,
        boundaries=bounds, alphas=np.full(n, alpha),
        weight_integrals=np.zeros(n), threshold=0.0,
        lf=gen.lipschitz[0], lg=gen.lipschitz[2])


# ---------------------------------------------------------------------------
# fixed-driver reflection


def test_constant_gap_loss_zero_compensator(bundle, basis):
    # loss y - 0.5 with a centred terminal: constant shift, no compensation
    f0, g0 = _zero_drivers(bundle)
    xi = bundle.brownian[:, -1, 0]
    reflector = M.LossReflector(_loss(intercept=-0.5))
    sol = M.reflect_fixed_generator(f0, g0, xi, reflector, bundle, basis)
    # compensator vanishes up to the root-finding tolerance
    assert np.allclose(sol.compensator, 0.0, atol=reflector.shift_tol(xi))
    band = 1e-7 + se_band(xi)
    assert np.all(np.abs(sol.shifts - 0.5) <= band)
    assert np.allclose(sol.backward.y, sol.y_raw + 0.5, atol=band + 1e-12)


def test_time_gap_loss_reproduces_time_compensator(bundle, basis):
    # loss y - (T - t): shifts decay linearly, compensator grows linearly
    f0, g0 = _zero_drivers(bundle)
    xi = bundle.brownian[:, -1, 0]
    reflector = M.LossReflector(_loss(horizon_coeff=-1.0))
    sol = M.reflect_fixed_generator(f0, g0, xi, reflector, bundle, basis)
    nodes = bundle.grid.nodes
    band = 0.02
    assert np.all(np.abs(sol.compensator - nodes) <= band)
    # brute-force running-sup oracle on the measured shifts
    sup, deficit = running_sup_reflection(sol.shifts)
    assert np.allclose(sol.running_max, sup, atol=1e-12)
    assert np.allclose(sol.compensator, deficit, atol=1e-12)


def test_slack_constraint_identity(bundle, basis):
    # positive-mean terminal with the identity loss: nothing to do
    f0, g0 = _zero_drivers(bundle)
    xi = bundle.brownian[:, -1, 0] + 3.0
    reflector = M.LossReflector(_loss())
    sol = M.reflect_fixed_generator(f0, g0, xi, reflector, bundle, basis)
    assert np.all(sol.shifts == 0.0)
    assert np.all(sol.compensator == 0.0)
    assert np.array_equal(sol.backward.y, sol.y_raw)


def test_representation_identity_exact(bundle, basis):
    f0, g0 = _zero_drivers(bundle)
    xi = bundle.brownian[:, -1, 0]
    reflector = M.LossReflector(_loss(horizon_coeff=-1.0))
    sol = M.reflect_fixed_generator(f0, g0, xi, reflector, bundle, basis)
    m = bundle.grid.steps
    # stored-data identities, exact
    assert np.array_equal(sol.backward.y, sol.y_raw + sol.running_max[None, :])
    assert np.array_equal(sol.compensator, sol.running_max[0] - sol.running_max)
    for i in range(m):
        assert sol.running_max[i] == max(sol.shifts[i], sol.running_max[i + 1])
    assert sol.running_max[m] == sol.shifts[m]
    assert sol.compensator[0] == 0.0
    assert np.all(np.diff(sol.compensator) >= 0.0)


# ---------------------------------------------------------------------------
# reflected map


def test_gamma_constant_generator_ignores_input(bundle, basis):
    gen = M.GeneratorSpec(terminal=lambda s: s.w[:, 0])
    reflector = M.LossReflector(_loss(intercept=-0.5))
    xi = gen.terminal_values(bundle)
    rng = np.random.default_rng(1)
    m = bundle.grid.steps
    images = []
    for _ in range(2):
        prev = zero_solution(bundle, 0, m)
        prev.y = rng.standard_normal(prev.y.shape)
        prev.z = rng.standard_normal(prev.z.shape)
        images.append(M.gamma_map(prev, gen, reflector, basis, xi))
    assert np.array_equal(images[0].backward.y, images[1].backward.y)
    assert np.array_equal(images[0].compensator, images[1].compensator)


def test_gamma_fixed_point_residual(bundle, basis):
    r = 0.05
    gen = M.GeneratorSpec(g=lambda t, y, z, u, state: -r * y,
                          terminal=lambda s: np.ones(s.w.shape[0]),
                          lipschitz=(0.0, 0.0, r, 0.0))
    reflector = M.LossReflector(_loss(intercept=-0.5))
    plan = _manual_plan(bundle, gen)
    sol = M.solve_mean_reflected(gen, reflector, bundle, basis, plan,
                                 tol=1e-14, max_iters=25)
    image = M.gamma_map(sol.backward, gen, reflector, basis,
                        sol.y_raw[:, -1])
    dist = M.weighted_distance(image.backward, sol.backward, 1.0, 1.0, 0.0, r)
    assert dist <= 1e-13


def test_gamma_contraction_measured(bundle, basis):
    gen = M.GeneratorSpec(g=lambda t, y, z, u, state: -0.05 * y + 0.05 * z[:, 0],
                          terminal=lambda s: s.w[:, 0],
                          lipschitz=(0.0, 0.0, 0.05, 0.05))
    reflector = M.LossReflector(_loss(intercept=-0.3))
    xi = gen.terminal_values(bundle)
    m = bundle.grid.steps
    rng = np.random.default_rng(5)
    a = zero_solution(bundle, 0, m)
    b = zero_solution(bundle, 0, m)
    b.y = rng.standard_normal(b.y.shape) * 0.1
    b.z = rng.standard_normal(b.z.shape) * 0.1
    ga = M.gamma_map(a, gen, reflector, basis, xi)
    gb = M.gamma_map(b, gen, reflector, basis, xi)
    beta, alpha = 2.0, 0.5
    d_in = M.weighted_distance(a, b, beta, alpha, 0.05, 0.05)
    d_out = M.weighted_distance(ga.backward, gb.backward, beta, alpha,
                                0.05, 0.05)
    assert d_out < d_in


# ---------------------------------------------------------------------------
# global solve


def test_constant_generator_matches_fixed_driver(bundle, basis):
    gen = M.GeneratorSpec(terminal=lambda s: s.w[:, 0])
    reflector = M.LossReflector(_loss(horizon_coeff=-1.0))
    plan = M.plan_contraction(gen, 1.0, 1.0, bundle)
    sol = M.solve_mean_reflected(gen, reflector, bundle, basis, plan)
    f0, g0 = _zero_drivers(bundle)
    direct = M.reflect_fixed_generator(f0, g0, bundle.brownian[:, -1, 0],
                                       reflector, bundle, basis)
    assert np.array_equal(sol.backward.y, direct.backward.y)
    assert np.array_equal(sol.compensator, direct.compensator)
    assert sol.info["iterations"] == [1]


def test_discounted_slack_benchmark(bundle, basis):
    r = 0.1
    gen = M.GeneratorSpec(g=lambda t, y, z, u, state: -r * y,
                          terminal=lambda s: np.ones(s.w.shape[0]),
                          lipschitz=(0.0, 0.0, r, 0.0))
    reflector = M.LossReflector(_loss(intercept=-0.5))  # 0.5 < e^{-rT}
    plan = _manual_plan(bundle, gen)
    sol = M.solve_mean_reflected(gen, reflector, bundle, basis, plan,
                                 tol=1e-13, max_iters=25)
    assert np.allclose(sol.compensator, 0.0, atol=1e-10)
    assert sol.backward.y[:, 0].mean() == pytest.approx(np.exp(-r), abs=2e-3)


def test_discounted_binding_benchmark(bundle, basis):
    # floor at 0.95 while discounting dips to e^{-0.1}: the compensator
    # lifts the value to max(discount curve, floor)
    r, floor = 0.1, 0.95
    gen = M.GeneratorSpec(g=lambda t, y, z, u, state: -r * y,
                          terminal=lambda s: np.ones(s.w.shape[0]),
                          lipschitz=(0.0, 0.0, r, 0.0))
    reflector = M.LossReflector(_loss(intercept=-floor))
    plan = _manual_plan(bundle, gen)
    sol = M.solve_mean_reflected(gen, reflector, bundle, basis, plan,
                                 tol=1e-13, max_iters=25)
    nodes = bundle.grid.nodes
    target = np.maximum(np.exp(-r * (1.0 - nodes)), floor)
    means = sol.backward.y.mean(axis=0)
    assert np.abs(means - target).max() <= 5e-3
    assert sol.compensator[-1] > 0.01
    # compensator stops growing once the discount curve clears the floor
    crossing = 1.0 + np.log(floor) / r
    after = nodes >= crossing + 0.05
    assert np.abs(np.diff(sol.compensator)[after[1:]]).max() <= 1e-6


def test_stitching_matches_single_interval(bundle, basis):
    # a feasible multi-interval plan must agree with the single-interval
    # solve for a constant generator (both are exact fixed points)
    gen = M.GeneratorSpec(terminal=lambda s: s.w[:, 0])
    reflector = M.LossReflector(_loss(horizon_coeff=-1.0))
    plan1 = M.plan_contraction(gen, 1.0, 1.0, bundle)
    sol1 = M.solve_mean_reflected(gen, reflector, bundle, basis, plan1)
    plan5 = M.plan_contraction(gen, 1.0, 1.0, bundle)
    plan5.n_intervals = 5
    plan5.boundaries = np.array([0, 10, 20, 30, 40, 50])
    plan5.alphas = np.full(5, plan5.alphas[0])
    plan5.h = 0.2
    sol5 = M.solve_mean_reflected(gen, reflector, bundle, basis, plan5)
    assert np.allclose(sol5.compensator, sol1.compensator, atol=1e-7)
    assert np.allclose(sol5.backward.y, sol1.backward.y, atol=1e-7)
    # compensator additivity at the boundaries, exact by the gluing rule
    assert sol5.compensator[0] == 0.0
    assert np.all(np.diff(sol5.compensator) >= -1e-15)


def test_solver_iteration_diagnostics(bundle, basis):
    gen = M.GeneratorSpec(
        g=lambda t, y, z, u, state: -0.001 * y + 0.002 * z[:, 0],
        terminal=lambda s: s.w[:, 0],
        lipschitz=(0.0, 0.0, 0.001, 0.002))
    loss = M.LossSpec(loss=lambda t, y: 1.02 * np.asarray(y) + 0.01 * np.sin(y)
                      - 0.2, kappa_lower=1.01, kappa_upper=1.03, growth=2.0)
    reflector = M.LossReflector(loss)
    kappa = M.lipschitz_ratio(loss)
    thr = M.contraction_threshold(kappa, gen.lipschitz)
    assert thr < 1.0
    plan = M.plan_contraction(gen, kappa, 1.0, bundle)
    sol = M.solve_mean_reflected(gen, reflector, bundle, basis, plan,
                                 tol=1e-11, max_iters=15)
    for iters in sol.info["iterations"]:
        assert iters <= 15
    for ratios in sol.info["ratios"]:
        assert all(r < 1.0 for r in ratios)


def test_uniqueness_two_initial_guesses(bundle, basis):
    gen = M.GeneratorSpec(
        g=lambda t, y, z, u, state: -0.001 * y + 0.002 * z[:, 0],
        terminal=lambda s: s.w[:, 0],
        lipschitz=(0.0, 0.0, 0.001, 0.002))
    reflector = M.LossReflector(_loss(intercept=-0.3))
    tol = 1e-11
    plan = M.plan_contraction(gen, 1.0, 1.0, bundle)
    sol_zero = M.solve_mean_reflected(gen, reflector, bundle, basis, plan,
                                      tol=tol, init="zero")
    sol_lip = M.solve_mean_reflected(gen, reflector, bundle, basis, plan,
                                     tol=tol, init="lipschitz")
    gap = M.weighted_distance(sol_zero.backward, sol_lip.backward,
                              plan.beta, float(plan.alphas[0]), 0.001, 0.002)
    assert gap <= 2.0 * tol


# ---------------------------------------------------------------------------
# flatness diagnostics


def test_flatness_zero_compensator_zero_defect(bundle, basis):
    f0, g0 = _zero_drivers(bundle)
    xi = bundle.brownian[:, -1, 0] + 3.0
    reflector = M.LossReflector(_loss())
    sol = M.reflect_fixed_generator(f0, g0, xi, reflector, bundle, basis)
    report = M.flatness_report(sol, reflector)
    assert report.skorokhod_defect == 0.0
    assert report.k_total == 0.0
    assert report.passes()


def test_flatness_time_gap_example(bundle, basis):
    f0, g0 = _zero_drivers(bundle)
    xi = bundle.brownian[:, -1, 0]
    reflector = M.LossReflector(_loss(horizon_coeff=-1.0))
    sol = M.reflect_fixed_generator(f0, g0, xi, reflector, bundle, basis)
    report = M.flatness_report(sol, reflector)
    delta_l = reflector.shift_tol(xi)
    band = delta_l + 3.0 * report.constraint_se.max()
    assert abs(report.skorokhod_defect) <= band * report.k_total
    assert report.constraint_min >= -band
    assert report.passes()
    rows = list(report.rows())
    assert len(rows) == bundle.grid.steps + 1
    assert set(rows[0]) >= {"t", "constraint_mean", "delta_k", "shift"}


def test_representation_check_fixed_driver(bundle, basis):
    gen = M.GeneratorSpec(terminal=lambda s: s.w[:, 0])
    reflector = M.LossReflector(_loss(horizon_coeff=-1.0))
    plan = M.plan_contraction(gen, 1.0, 1.0, bundle)
    sol = M.solve_mean_reflected(gen, reflector, bundle, basis, plan)
    report = M.representation_check(sol, gen, reflector, basis,
                                    beta=1.0, alpha=1.0, tol=1e-12)
    assert report["distance"] <= 1e-12
    assert report["k_max_gap"] <= 1e-9
    assert report["passed"]


def test_representation_check_general_case(bundle, basis):
    gen = M.GeneratorSpec(
        g=lambda t, y, z, u, state: -0.001 * y + 0.002 * z[:, 0],
        terminal=lambda s: s.w[:, 0],
        lipschitz=(0.0, 0.0, 0.001, 0.002))
    reflector = M.LossReflector(_loss(intercept=-0.3))
    tol = 1e-11
    plan = M.plan_contraction(gen, 1.0, 1.0, bundle)
    sol = M.solve_mean_reflected(gen, reflector, bundle, basis, plan, tol=tol)
    report = M.representation_check(sol, gen, reflector, basis,
                                    beta=plan.beta,
                                    alpha=float(plan.alphas[0]), tol=tol)
    assert report["passed"]


def test_representation_check_detects_perturbed_compensator(bundle, basis):
    gen = M.GeneratorSpec(terminal=lambda s: s.w[:, 0])
    reflector = M.LossReflector(_loss(horizon_coeff=-1.0))
    plan = M.plan_contraction(gen, 1.0, 1.0, bundle)
    sol = M.solve_mean_reflected(gen, reflector, bundle, basis, plan)
    sol.compensator = sol.compensator.copy()
    sol.compensator[25:] += 0.1
    sol.backward.y = sol.backward.y.copy()
    sol.backward.y[:, 25:] += 0.1  # keep the shifted-solution identity
    report = M.representation_check(sol, gen, reflector, basis,
                                    beta=1.0, alpha=1.0, tol=1e-10)
    assert not report["passed"]
    assert report["k_max_gap"] >= 0.05
    flat = M.flatness_report(sol, reflector)
    assert abs(flat.skorokhod_defect) > 1e-4


def test_oscillation_flag():
    report = M.FlatnessReport(
        times=np.linspace(0, 1, 5),
        constraint_mean=np.zeros(5), constraint_se=np.zeros(5),
        delta_k=np.zeros(5), shifts=np.array([1.0, 0.2, 0.9, 0.1, 0.8]),
        running_max=np.ones(5), constraint_min=0.0, skorokhod_defect=0.0,
        skorokhod_defect_left=0.0, k_total=0.0,
        shift_oscillation=0.8, oscillation_flagged=True)
    assert report.oscillation_flagged


def test_reflected_solution_export(tmp_path, bundle, basis):
    f0, g0 = _zero_drivers(bundle)
    xi = bundle.brownian[:, -1, 0]
    reflector = M.LossReflector(_loss(horizon_coeff=-1.0))
    sol = M.reflect_fixed_generator(f0, g0, xi, reflector, bundle, basis)
    report = M.flatness_report(sol, reflector)
    from mrbsde.mean_reflect import save_reflected

    files = save_reflected(sol, report, str(tmp_path / "refl"))
    import json

    summary = json.loads(open(files["summary"]).read())
    assert {"y0_mean", "k_total", "skorokhod_defect"} <= set(summary)
    with open(files["reflected"]) as fh:
        header = fh.readline().strip().split(",")
    assert header == ["t", "K", "mean_Y", "constraint_mean", "shift",
                      "running_max"]
