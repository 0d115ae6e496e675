import math

import numpy as np
import pytest
from scipy import optimize

from qpot.laws import Exponential, Gamma, Lognormal
from qpot.limit_solver import ControlPair, control_cost, forward_trajectory
from qpot.quasipotential import (CURVE_FIELDS, ContinuationFailure, VariationalProblem, minimize_finite_horizon,
                                 penalized_objective, quasipotential_curve, relax_then_hold_initializer,
                                 terminal_value, write_curve_csv)

EXP = Exponential(1.0)


def coarse(x=0.5, **kw):
    kw.setdefault("dt", 0.25)
    kw.setdefault("cells", 4)
    return VariationalProblem(x=x, T=kw.pop("T", 2.0), service=kw.pop("service", EXP), sigma=1.0, beta=1.0, **kw)


@pytest.mark.parametrize("T", [2.0, 8.0])
def test_equilibrium_target_costs_nothing(T):
    r = minimize_finite_horizon(coarse(-1.0, T=T))
    assert r.J == 0.0
    assert not np.any(r.controls.w_dot) and not np.any(r.controls.k_dot)


def test_curve_at_equilibrium_is_zero():
    res = quasipotential_curve([-1.0], [1.0, 2.0], service=EXP, sigma=1.0, beta=1.0, dt=0.05, cells=4)
    assert res[0].I_s == 0.0 and np.all(res[0].J == 0.0)


@pytest.mark.parametrize("eps", [1e-2, None])
def test_adjoint_gradient_vs_central_differences(eps):
    prob = VariationalProblem(x=0.7, T=3.0, service=Gamma(2.0, 0.5), sigma=1.0, beta=1.0, dt=0.1, cells=6)
    rng = np.random.default_rng(8)
    c = ControlPair(rng.normal(0, 1, prob.steps), rng.normal(0, 1, (prob.cells, prob.steps)), prob.dt,
                    prob.mu * prob.dt)
    _, g = penalized_objective(c, prob, 100.0, eps)
    h = 1e-6
    errs = []
    for _ in range(50):
        if rng.uniform() < 0.4:
            j = rng.integers(prob.steps)
            plus, minus = c.copy(), c.copy()
            plus.w_dot[j] += h
            minus.w_dot[j] -= h
            analytic = g.w_dot[j]
        else:
            # k directions stay in the zero-sum subspace
            m1, m2 = rng.choice(prob.cells, 2, replace=False)
            j = rng.integers(prob.steps)
            plus, minus = c.copy(), c.copy()
            plus.k_dot[m1, j] += h
            plus.k_dot[m2, j] -= h
            minus.k_dot[m1, j] -= h
            minus.k_dot[m2, j] += h
            analytic = g.k_dot[m1, j] - g.k_dot[m2, j]
        fd = (penalized_objective(plus, prob, 100.0, eps)[0] - penalized_objective(minus, prob, 100.0, eps)[0]) / (2 * h)
        errs.append(abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8))
    assert max(errs) < 1e-4


def test_coarse_instance_matches_multistart_oracle():
    prob = coarse(0.5)
    ours = minimize_finite_horizon(prob).J
    N, M = prob.steps, prob.cells

    def unpack(z):
        w = z[:N]
        kf = z[N:].reshape(M - 1, N)
        return ControlPair(w, np.vstack([kf, -kf.sum(0)]), prob.dt, prob.dt, project=False)

    rng = np.random.default_rng(5)
    best = math.inf
    for _ in range(64):
        o = optimize.minimize(lambda z: control_cost(unpack(z)), rng.normal(size=N + (M - 1) * N), method="SLSQP",
                              constraints=[{"type": "eq",
                                            "fun": lambda z: forward_trajectory(unpack(z), EXP, 1.0, 1.0).at_end() - 0.5}],
                              options={"maxiter": 500, "ftol": 1e-12})
        if o.success:
            best = min(best, o.fun)
    assert math.isfinite(best)
    assert abs(ours - best) <= 0.01 * best


def test_reported_controls_are_feasible():
    prob = VariationalProblem(x=1.0, T=4.0, service=Lognormal.with_mean(1.0, 0.5), sigma=1.0, beta=1.0,
                              dt=0.05, cells=8)
    r = minimize_finite_horizon(prob)
    assert abs(terminal_value(r.controls, prob) - 1.0) < 1e-4
    assert r.J == pytest.approx(control_cost(r.controls), rel=1e-12)
    best = [s["best_feasible_cost"] for s in r.diagnostics["stages"]]
    assert all(b <= a for a, b in zip(best, best[1:]))


def test_initializer_linear_and_dominated():
    prob = coarse(0.0, T=4.0, dt=0.05)
    a = relax_then_hold_initializer(0.0, 4.0, prob)
    b = relax_then_hold_initializer(1.0, 4.0, prob)
    ramp = a.w_dot != 0
    assert ramp.sum() == 20 and np.all(a.w_dot[~ramp] == 0)
    assert np.allclose(b.w_dot, 2.0 * a.w_dot, rtol=1e-14)
    assert not np.any(relax_then_hold_initializer(-1.0, 4.0, prob).w_dot)
    for x in (0.0, 1.0):
        px = coarse(x, T=4.0, dt=0.05)
        assert control_cost(relax_then_hold_initializer(x, 4.0, px)) >= minimize_finite_horizon(px).J


def test_zero_noise_reports_failure():
    prob = VariationalProblem(x=0.5, T=2.0, service=EXP, sigma=0.0, beta=1.0, dt=0.05, cells=0)
    with pytest.raises(ContinuationFailure):
        minimize_finite_horizon(prob)
    res = quasipotential_curve([0.5], [1.0, 2.0], service=EXP, sigma=0.0, beta=1.0, dt=0.05, cells=0)
    assert res[0].I_s == math.inf and res[0].error


def test_problem_validation():
    with pytest.raises(ValueError):
        coarse(penalties=(10.0, 5.0), smoothing=(0.1, 0.01))
    with pytest.raises(ValueError):
        coarse(penalties=(10.0, 100.0), smoothing=(0.1, 0.1))
    with pytest.raises(ValueError):
        coarse(x=math.nan)
    with pytest.raises(ValueError):
        coarse(T=0.3)


def test_sweep_monotone_and_csv(tmp_path):
    res = quasipotential_curve([0.0, 0.5], [1.0, 2.0, 4.0], service=EXP, sigma=1.0, beta=1.0, dt=0.05, cells=4)
    for r in res:
        assert r.monotone(1e-6)
        assert r.I_s == pytest.approx(r.J[-1])
        assert r.I_s > 0
    assert res[1].I_s > res[0].I_s
    dest = tmp_path / "curve.csv"
    write_curve_csv(res, dest, header_comment="config_hash=0")
    lines = dest.read_text().splitlines()
    assert lines[0].startswith("#") and lines[1] == ",".join(CURVE_FIELDS)
    assert len(lines) == 2 + 6


def test_exponential_value_near_closed_form():
    # with exponential service the rate is beta^2/2 + beta*x for x >= 0
    res = quasipotential_curve([1.0], [4.0, 8.0, 16.0, 32.0], service=EXP, sigma=1.0, beta=1.0, dt=0.04)
    assert res[0].I_s == pytest.approx(1.5, rel=0.05)
