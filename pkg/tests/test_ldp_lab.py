import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qpot.laws import Exponential, Gamma
from qpot.ldp_lab import (PANEL_FIELDS, birth_death_stationary, convergence_panel, erlang_c, rate_from_counts,
                          rate_from_tail)

# numerical quasipotential for exponential service, beta = sigma = 1, dt = 0.04,
# horizons {2,...,32}; closed form beta^2/2 + beta x gives 1.0 / 1.5 / 2.5
I_NUMERIC = {0.5: 1.028, 1.0: 1.536, 2.0: 2.554}


def test_mm1_geometric():
    bd = birth_death_stationary(1, 0.5, 1.0, K=50)
    assert np.max(np.abs(bd.pi - 0.5 * 0.5 ** np.arange(51))) < 1e-15


def test_normalization_and_detailed_balance():
    bd = birth_death_stationary(100, 95.0, 1.0, K=1000)
    assert bd.normalization_error() <= 1e-12
    assert bd.detailed_balance_error() <= 1e-12


@given(st.integers(1, 300), st.floats(0.05, 0.99))
def test_birth_death_invariants(n, rho):
    bd = birth_death_stationary(n, n * rho, 1.0)
    assert bd.normalization_error() <= 1e-12
    assert bd.detailed_balance_error() <= 1e-12


def test_delay_probability_matches_erlang_c():
    bd = birth_death_stationary(20, 18.0, 1.0)
    assert abs(bd.delay_probability() - erlang_c(20, 18.0)) < 1e-10
    a, n = 18.0, 20
    head = sum(a ** k / math.factorial(k) for k in range(n))
    last = a ** n / math.factorial(n) * n / (n - a)
    assert erlang_c(n, a) == pytest.approx(last / (head + last), rel=1e-12)


def test_unstable_rejected():
    with pytest.raises(ValueError):
        birth_death_stationary(10, 10.0, 1.0)


def test_rate_from_tail_algebra():
    b = 2.3
    r = rate_from_tail([1.0, math.exp(-b * b)], b, [0.0, 1.0])
    assert r[0].rate == 0.0 and r[1].rate == pytest.approx(1.0, rel=1e-14)
    for bad in ([0.0], [1.5], [math.nan]):
        with pytest.raises(ValueError):
            rate_from_tail(bad, b, [0.0])
    with pytest.raises(ValueError):
        rate_from_tail([0.5], 0.0, [0.0])


@given(st.lists(st.floats(1e-300, 1.0), min_size=2, max_size=20))
def test_rate_monotone_for_monotone_tail(ps):
    p = np.sort(ps)[::-1]
    rates = [r.rate for r in rate_from_tail(p, 1.7, np.arange(p.size, dtype=float))]
    assert all(b >= a for a, b in zip(rates, rates[1:]))
    assert all(r >= 0 for r in rates)


def test_exact_rates_n100():
    b = 100 ** 0.1
    bd = birth_death_stationary(100, 100 * (1 - b / 10), 1.0)
    x = [0.5, 1.0, 2.0]
    rates = [r.rate for r in rate_from_tail(bd.x_tail(x, b), b, x)]
    assert all(math.isfinite(r) and r > 0 for r in rates)
    assert rates == sorted(rates)
    assert rates == pytest.approx([1.664, 2.213, 3.312], abs=2e-3)


def test_zero_count_is_lower_bound_only():
    r = rate_from_counts([50, 0], 1000, 1.5, [0.0, 1.0])
    assert r[0].is_estimate and r[0].band_low <= r[0].rate <= r[0].band_high
    assert math.isnan(r[1].rate) and r[1].flag == "lower-bound" and not r[1].is_estimate
    assert r[1].band_low > 0


@pytest.fixture(scope="module")
def panel():
    x = [-1.0, 0.5, 1.0, 2.0]
    I = {**I_NUMERIC, -1.0: 0.0}
    return convergence_panel([25, 100, 400], x, quasipotential=I, gg_replications=200, gg_seed=3)


def test_panel_shape_and_sources(panel):
    assert {r.source for r in panel.rows} >= {"birth-death", "quasipotential", "gg-bound", "infinite-server"}
    assert len(panel.rows) == 3 * 4 * 4
    text = panel.to_csv(header_comment="config_hash=x")
    assert text.splitlines()[1] == ",".join(PANEL_FIELDS)


def test_panel_trend_toward_quasipotential(panel):
    for x in (0.5, 1.0, 2.0):
        assert panel.verdict["per_x"][repr(x)]["toward_quasipotential"] is True
    assert panel.verdict["trend"] == "toward"


def test_panel_equilibrium_column(panel):
    # P(X >= -beta) tends to 1; at finite n the exact rate is about ln 2 / b_n^2 and shrinks with n
    rates = [panel.lookup(n, -1.0, "birth-death").rate for n in (25, 100, 400)]
    assert rates[0] > rates[1] > rates[2] >= 0
    for n, r in zip((25, 100, 400), rates):
        assert r <= math.log(2) / n ** 0.2 + 0.05


def test_panel_bounds_bracket_exact(panel):
    for r in panel.rows:
        if r.source != "birth-death":
            continue
        gg = panel.lookup(r.n, r.x, "gg-bound")
        if gg.is_estimate or gg.flag.startswith("rate-lower-bound"):
            assert gg.rate <= r.rate + 1e-12
        inf = panel.lookup(r.n, r.x, "infinite-server")
        if r.x >= 0:
            assert inf.rate >= r.rate - 1e-12


def test_panel_gaps_are_explicit(panel):
    gaps = [r for r in panel.rows if r.flag.startswith("gap")]
    assert all(math.isnan(r.rate) for r in gaps)
    assert all(r.source == "gg-bound" for r in gaps)
    assert any(r.x == -1.0 for r in gaps)


def test_panel_non_exponential_uses_simulation():
    rep = convergence_panel([16], [0.5], service=Gamma(2.0, 0.5), gg_replications=50, sim_count=200)
    srcs = {r.source: r for r in rep.rows}
    assert srcs["birth-death"].flag == "gap:non-exponential"
    assert srcs["quasipotential"].flag == "gap:not-computed"
    assert "simulation" in srcs


def test_exact_rate_agrees_with_quasipotential_within_15_percent():
    # the largest n of the sweep is the best finite-n estimate (no extrapolation in n)
    n = 400
    b = n ** 0.1
    bd = birth_death_stationary(n, n * (1 - b / math.sqrt(n)), 1.0)
    xs = sorted(I_NUMERIC)
    rates = [r.rate for r in rate_from_tail(bd.x_tail(xs, b), b, xs)]
    for x, r in zip(xs, rates):
        assert abs(r - I_NUMERIC[x]) <= 0.15 * I_NUMERIC[x]
