import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qpot.laws import ArrivalLaw, Exponential, Gamma, Lognormal, ScalingRegime, Uniform
from qpot.ldp_lab import birth_death_stationary
from qpot.queue_sim import (ARRIVAL, DEPARTURE, ENTER, CalendarOverflow, QueueModel, fcfs_schedule,
                            gg_increments, gg_supremum_tail, occupancy_histogram, simulate,
                            simulate_infinite_server_bound, stationary_sample)
from qpot._seeding import rng_for


def mm(n, rho, **kw):
    return QueueModel.build(ScalingRegime.from_load(n, rho), Exponential(1.0), Exponential(1.0), **kw)


def test_model_validates_residual_count():
    reg = ScalingRegime.from_load(5, 0.9)
    with pytest.raises(ValueError):
        QueueModel(reg, None, Exponential(1.0), q0=3, initial_residuals=[1.0, 2.0])
    with pytest.raises(ValueError):
        QueueModel(reg, None, Exponential(1.0), q0=-1)


def test_closed_system_drains_initial_customers():
    reg = ScalingRegime.from_load(10, 0.9)
    res = np.array([0.3, 1.2, 2.5, 0.7])
    tr = simulate(QueueModel(reg, None, Exponential(1.0), q0=4, initial_residuals=res), 5.0, seed=0)
    t = np.linspace(0, 5, 101)
    assert np.array_equal(tr.Q(t), (res[None, :] > t[:, None]).sum(axis=1))


@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(0, 20))
def test_flow_balance_every_event(seed, n, q0):
    model = QueueModel.build(ScalingRegime.from_load(n, 0.95), Gamma(0.5, 2.0), Uniform(0.0, 2.0), q0=q0)
    tr = simulate(model, 30.0, seed=seed)
    assert np.all(tr.flow_residuals() == 0)


@given(st.integers(0, 2**31 - 1))
def test_balance_equation_reconstruction(seed):
    model = QueueModel.build(ScalingRegime.from_load(4, 0.9), Exponential(1.0), Lognormal.with_mean(1.0, 0.5), q0=7)
    tr = simulate(model, 25.0, seed=seed)
    t = np.linspace(0, 25, 301)
    assert np.array_equal(tr.Q_balance(t), tr.Q(t))
    assert np.array_equal(tr.path_from_log(t), tr.Q(t))


def test_fcfs_order_and_unit_jumps():
    tr = simulate(mm(3, 0.95, q0=6), 200.0, seed=9)
    assert np.all(np.diff(tr.start_times) >= 0)
    # customer j (arrival order) never enters before its arrival
    waiting0 = tr.waiting0
    assert np.all(tr.start_times[waiting0:] >= tr.arrival_times[: tr.start_times.size - waiting0])
    log = tr.event_log()
    enters = log[log["kind"] == ENTER]
    assert np.all(np.diff(enters["id"].astype(np.int64)) == 1)


def test_event_log_tie_rule():
    # deterministic collision: departure at t=1 and arrival at t=1 coincide
    reg = ScalingRegime.from_load(1, 0.5)
    res = np.array([1.0])
    start, dep = fcfs_schedule(1, 1, res, np.array([1.0]), np.array([1.0]))
    assert start[0] == 1.0 and dep[0] == 2.0
    tr = simulate(QueueModel(reg, ArrivalLaw(Exponential(1.0), 0.5), Exponential(1.0), q0=1, initial_residuals=res),
                  5.0, seed=1)
    log = tr.event_log()
    same = log[:-1]["time"] == log[1:]["time"]
    assert np.all(log[:-1]["kind"][same] <= log[1:]["kind"][same])
    assert DEPARTURE < ARRIVAL < ENTER


def test_reproducible_event_log():
    a = simulate(mm(5, 0.9), 100.0, seed=42).event_log()
    b = simulate(mm(5, 0.9), 100.0, seed=42).event_log()
    assert a.tobytes() == b.tobytes()


def test_departures_double_integral():
    # D(t) = initial departures + sum_i 1{tau_i + eta_i <= t} over entered customers
    tr = simulate(mm(4, 0.9, q0=4), 60.0, seed=2)
    t = np.linspace(0, 60, 121)
    rebuilt = (tr.initial_residuals[None, :] <= t[:, None]).sum(1) + \
        ((tr.start_times + tr.service_times)[None, :] <= t[:, None]).sum(1)
    assert np.array_equal(tr.D(t), rebuilt)


def test_calendar_overflow_partial_trace():
    with pytest.raises(CalendarOverflow) as info:
        simulate(mm(5, 0.9), 1000.0, seed=1, max_events=500)
    part = info.value.trace
    assert part.horizon < 1000.0 and part.event_log().size <= 500
    assert np.all(part.flow_residuals() == 0)


def test_residual_snapshot_matches_entry_representation():
    tr = simulate(mm(10, 0.9, q0=10), 80.0, seed=4)
    x = np.linspace(0, 5, 51)
    for t in (0.0, 3.0, 50.0, 79.0):
        snap = tr.residual_snapshot(t)
        assert snap.S(0.0) == min(int(tr.Q(t)), 10) / 10
        assert np.all(np.diff(snap.S(x)) <= 0)
        if t > tr.initial_residuals.max():
            assert np.array_equal(snap.S(x), tr.residual_S_from_entries(t, x))


def test_load_monotone_under_thinning_coupling():
    rng = np.random.default_rng(12)
    n, lam_hi, lam_lo = 3, 2.7, 2.0
    arr = np.cumsum(rng.exponential(1 / lam_hi, 5000))
    keep = rng.uniform(size=arr.size) < lam_lo / lam_hi
    svc = rng.exponential(1.0, arr.size)

    def q_path(a, s, grid):
        start, dep = fcfs_schedule(n, 0, np.empty(0), a, s)
        return np.searchsorted(a, grid, side="right") - np.searchsorted(np.sort(dep), grid, side="right")

    grid = np.linspace(0, arr[-1], 20001)
    assert np.all(q_path(arr, svc, grid) >= q_path(arr[keep], svc[keep], grid))


def test_stationary_mean_mm20():
    model = mm(20, 0.9)
    st_ = stationary_sample(model, count=3000, spacing=5.0, seed=3)
    law = birth_death_stationary(20, model.regime.lam, 1.0)
    exact = float(np.dot(np.arange(law.K + 1), law.pi))
    se = st_.Q.std() / math.sqrt(st_.diagnostics["ess"])
    assert abs(st_.Q.mean() - exact) < 3 * se
    tail = st_.tail(np.linspace(-2, 3, 21))
    assert np.all(np.diff(tail) <= 0)


def test_stationary_rejects_unstable():
    with pytest.raises(ValueError):
        stationary_sample(QueueModel.build(ScalingRegime(10, 1.5, -0.1), Exponential(1.0), Exponential(1.0)))


def test_occupancy_histogram_sums_to_one():
    tr = simulate(mm(2, 0.8), 500.0, seed=5)
    h = occupancy_histogram(tr, 50.0)
    assert h.sum() == pytest.approx(1.0, abs=1e-12)


def test_infinite_server_below_coupled_queue():
    reg = ScalingRegime.from_power(30, 1.0)
    model = QueueModel.gg_setup(reg, Exponential(1.0), Exponential(1.0))
    for seed in range(5):
        path = simulate_infinite_server_bound(model, 40.0, seed=seed)
        assert path.violations == 0
        assert path.breve_Q[0] == 30


def test_infinite_server_zero_horizon_and_mode():
    reg = ScalingRegime.from_power(30, 1.0)
    model = QueueModel.gg_setup(reg, Exponential(1.0), Exponential(1.0))
    path = simulate_infinite_server_bound(model, 0.0, seed=1)
    assert path.breve_Q[0] == 30
    with pytest.raises(ValueError):
        simulate_infinite_server_bound(QueueModel.build(reg, Exponential(1.0), Exponential(1.0), q0=30), 1.0)


def test_infinite_server_poisson_mean():
    reg = ScalingRegime.from_power(30, 1.0)
    model = QueueModel.gg_setup(reg, Exponential(1.0), Exponential(1.0))
    vals = []
    for seed in range(200):
        path = simulate_infinite_server_bound(model, 30.0, seed=seed)
        vals.append(path.breve_Q[np.searchsorted(path.times, 30.0, side="right") - 1])
    vals = np.asarray(vals, dtype=float)
    assert abs(vals.mean() - reg.lam) < 3 * math.sqrt(reg.lam / vals.size)


def test_gg_identity_and_monotone_estimates():
    reg = ScalingRegime.from_power(50, 1.0)
    model = QueueModel.gg_setup(reg, Exponential(1.0), Exponential(1.0))
    D, xp, yp, drift = gg_increments(model, 500, rng_for(0, 0, 3))
    assert np.allclose(D / reg.scale, xp + yp - drift, atol=1e-12)
    est = gg_supremum_tail(model, np.linspace(0, 1.5, 7), replications=300, seed=1)
    vals = [e.estimate for e in est]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert all(e.ci_low <= e.estimate <= e.ci_high for e in est)


def test_gg_doubling_beta_paired():
    r = np.linspace(0, 1.0, 5)
    lo = gg_supremum_tail(QueueModel.gg_setup(ScalingRegime.from_power(50, 1.0), Exponential(1.0), Exponential(1.0)),
                          r, replications=300, seed=5)
    hi = gg_supremum_tail(QueueModel.gg_setup(ScalingRegime.from_power(50, 2.0), Exponential(1.0), Exponential(1.0)),
                          r, replications=300, seed=5, i_max=lo[0].i_max)
    assert all(h.estimate <= l.ci_high for h, l in zip(hi, lo))
