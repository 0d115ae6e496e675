import math
import time

import numpy as np
import pytest

from qpot.laws import Exponential, Gamma, Lognormal, Uniform
from qpot.limit_solver import (ControlPair, GridFunction, GridMismatchError, NonConvergenceError,
                               control_cost, forward_trajectory, solve_nonlinear_renewal)

EXP = Exponential(1.0)


@pytest.mark.parametrize("dt", [0.1, 0.013, 0.5])
@pytest.mark.parametrize("alpha", [1.0, 0.3])
def test_negative_constant_is_fixed(dt, alpha):
    f = GridFunction(dt, np.full(400, -alpha))
    g = solve_nonlinear_renewal(f, EXP)
    assert np.max(np.abs(g.values + alpha)) <= 1e-12


def test_indicator_forcing_relaxes():
    f = GridFunction.from_callable(lambda t: 2.0 * (t <= 1.0) - 1.0, 20.0, 0.025)
    g = solve_nonlinear_renewal(f, EXP)
    assert abs(g.at_end() + 1.0) < 1e-2


def test_unit_forcing_refined_grid():
    coarse = solve_nonlinear_renewal(GridFunction.from_callable(lambda t: np.ones_like(t), 2.0, 2.0 / 800), EXP)
    fine = solve_nonlinear_renewal(GridFunction.from_callable(lambda t: np.ones_like(t), 2.0, 2.0 / 8000), EXP)
    assert abs(coarse.at_end() - fine.at_end()) < 1e-3
    # g stays positive, so g = 1 + g*F and g(t) = 1 + t for exponential(1) F
    assert fine.at_end() == pytest.approx(3.0, abs=1e-4)


def test_picard_agrees_with_march_and_is_unique():
    f = GridFunction.from_callable(lambda t: np.cos(2 * t) * np.exp(-0.2 * t), 10.0, 0.05)
    a = solve_nonlinear_renewal(f, Gamma(2.0, 0.5), method="picard", initial=np.full(201, 5.0))
    b = solve_nonlinear_renewal(f, Gamma(2.0, 0.5), method="picard", initial=np.full(201, -5.0))
    m = solve_nonlinear_renewal(f, Gamma(2.0, 0.5))
    assert np.max(np.abs(a.values - b.values)) < 1e-9
    assert np.max(np.abs(a.values - m.values)) < 1e-9


def test_picard_nonconvergence_reports_residual():
    f = GridFunction.from_callable(lambda t: np.ones_like(t), 20.0, 0.05)
    with pytest.raises(NonConvergenceError) as info:
        solve_nonlinear_renewal(f, EXP, method="picard", max_iter=3)
    assert info.value.residual > 0 and info.value.iterate.values.size == f.values.size


def test_monotone_in_forcing_200_pairs():
    rng = np.random.default_rng(7)
    laws = [EXP, Gamma(0.5, 2.0), Lognormal.with_mean(1.0, 0.8), Uniform(0.0, 2.0)]
    t0 = time.perf_counter()
    violations = 0
    for i in range(200):
        n = 200
        f1 = np.cumsum(rng.normal(0, 0.3, n + 1))
        f2 = f1 + np.abs(rng.normal(0, 1, n + 1)) * (rng.uniform(size=n + 1) < 0.5)
        law = laws[i % len(laws)]
        g1 = solve_nonlinear_renewal(GridFunction(0.05, f1), law).values
        g2 = solve_nonlinear_renewal(GridFunction(0.05, f2), law).values
        violations += int(np.sum(g1 > g2 + 1e-12))
    assert violations == 0
    assert time.perf_counter() - t0 < 10.0


def test_grid_convergence_order():
    def end(dt):
        c = ControlPair(np.full(int(round(4 / dt)), 0.7), np.zeros((0, int(round(4 / dt)))), dt)
        return forward_trajectory(c, Gamma(2.0, 0.5), 1.0, 1.0, x0=0.4).at_end()

    q1, q2, q3 = end(0.04), end(0.02), end(0.01)
    order = math.log2(abs(q1 - q2) / abs(q2 - q3))
    assert order >= 0.9


def test_equilibrium_fixed_point():
    c = ControlPair.zeros(400, 16, 0.05)
    q = forward_trajectory(c, Lognormal.with_mean(1.0, 0.5), 1.0, 1.3)
    assert np.max(np.abs(q.values + 1.3)) < 1e-12


def test_fluid_relaxation_from_positive_start():
    c = ControlPair.zeros(800, 8, 20.0 / 800)
    q = forward_trajectory(c, EXP, 1.0, 1.0, x0=1.0)
    assert abs(q.at_end() + 1.0) < 1e-2


def test_constant_w_refined_grid():
    def run(steps):
        dt = 5.0 / steps
        return forward_trajectory(ControlPair(np.full(steps, 0.8), np.zeros((4, steps)), dt), EXP, 1.0, 1.0)

    a, b = run(500), run(5000)
    assert np.max(np.abs(a.values - b.values[::10])) < 1e-3


def test_superposition_with_frozen_positive():
    rng = np.random.default_rng(3)
    steps, cells, dt = 200, 8, 0.05
    ref = forward_trajectory(ControlPair(rng.normal(0, 2, steps), rng.normal(0, 1, (cells, steps)), dt), EXP, 1.0, 1.0)
    c1 = ControlPair(rng.normal(0, 1, steps), rng.normal(0, 1, (cells, steps)), dt)
    c2 = ControlPair(rng.normal(0, 1, steps), rng.normal(0, 1, (cells, steps)), dt)
    both = ControlPair(c1.w_dot + c2.w_dot, c1.k_dot + c2.k_dot, dt)
    zero = ControlPair.zeros(steps, cells, dt)
    fp = ref.values
    q = lambda c: forward_trajectory(c, EXP, 1.0, 1.0, frozen_positive=fp).values
    assert np.max(np.abs(q(both) - q(c1) - q(c2) + q(zero))) < 1e-10


def test_k_control_moves_trajectory():
    steps, cells, dt = 100, 8, 0.05
    k = np.zeros((cells, steps))
    k[0] = 1.0
    q = forward_trajectory(ControlPair(np.zeros(steps), k, dt), EXP, 1.0, 1.0)
    assert np.max(np.abs(q.values + 1.0)) > 1e-3


def test_cost_examples():
    assert control_cost(ControlPair.zeros(10, 4, 0.1)) == 0.0
    assert control_cost(ControlPair(np.ones(200), np.zeros((4, 200)), 0.01)) == pytest.approx(1.0, abs=1e-12)


def test_cost_matches_duplicate_accumulation():
    rng = np.random.default_rng(11)
    for _ in range(20):
        steps, cells = rng.integers(1, 60), rng.integers(1, 12)
        dt = float(rng.uniform(0.01, 0.5))
        c = ControlPair(rng.normal(size=steps), rng.normal(size=(cells, steps)), dt, 1.7 * dt)
        total = 0.0
        for j in range(steps):
            total += c.w_dot[j] ** 2 * dt
            for m in range(cells):
                total += c.k_dot[m, j] ** 2 * (1.0 / cells) * (1.7 * dt)
        assert control_cost(c) == pytest.approx(0.5 * total, rel=1e-12, abs=1e-12)
        assert control_cost(c) >= 0


def test_k_columns_projected_to_zero_sum():
    c = ControlPair(np.zeros(5), np.arange(20.0).reshape(4, 5), 0.1)
    assert np.allclose(c.k_dot.sum(axis=0), 0.0, atol=1e-12)


def test_grid_function_csv_round_trip(tmp_path):
    g = GridFunction.from_callable(np.sin, 3.0, 0.1)
    g.to_csv(tmp_path / "g.csv", header_comment="config_hash=abc")
    back = GridFunction.from_csv(tmp_path / "g.csv")
    assert back.dt == pytest.approx(g.dt) and np.array_equal(back.values, g.values)


def test_control_pair_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    c = ControlPair(rng.normal(size=12), rng.normal(size=(3, 12)), 0.25)
    c.save(tmp_path / "ctl")
    back = ControlPair.load(tmp_path / "ctl")
    assert np.array_equal(back.w_dot, c.w_dot) and np.array_equal(back.k_dot, c.k_dot)
    assert back.dt == pytest.approx(c.dt) and back.dr == pytest.approx(c.dr)


def test_nan_controls_rejected():
    c = ControlPair(np.array([0.0, np.nan, 1.0]), np.zeros((2, 3)), 0.1)
    with pytest.raises(ValueError):
        forward_trajectory(c, EXP, 1.0, 1.0)


def test_grid_mismatch_rejected():
    c = ControlPair.zeros(10, 2, 0.1)
    with pytest.raises(GridMismatchError):
        forward_trajectory(c, EXP, 1.0, 1.0, T=2.0)
    with pytest.raises(GridMismatchError):
        forward_trajectory(c, EXP, 1.0, 1.0, dt=0.2)
    with pytest.raises(GridMismatchError):
        forward_trajectory(ControlPair(np.zeros(10), np.zeros((2, 10)), 0.1, dr=0.3), EXP, 1.0, 1.0)
    with pytest.raises(GridMismatchError):
        GridFunction.from_callable(np.sin, 1.0, 0.3)
    with pytest.raises(GridMismatchError):
        ControlPair(np.zeros(4), np.zeros((2, 5)), 0.1)
    with pytest.raises(ValueError):
        GridFunction(0.1, [0.0, np.inf])
