"""Lower and upper bound systems for the number in system.

* the infinite-server queue fed by the same arrivals and service times, a
  pathwise lower bound for the n-server queue started full;
* a Monte Carlo estimate of the supremum-tail bound built from an ordinary
  arrival process and n equilibrium renewal processes of service epochs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .._seeding import rng_for, stream
from ..laws import equilibrium_sample
from .core import QueueModel, _arrival_times, _initial_residuals, fcfs_schedule

__all__ = [
    "InfiniteServerPath",
    "simulate_infinite_server_bound",
    "GGTailEstimate",
    "gg_supremum_tail",
    "gg_increments",
    "wilson_interval",
    "TRUNCATION_FLAG_RATIO",
]

TRUNCATION_FLAG_RATIO = 0.10
I_MAX_FACTOR = 20.0


@dataclass
class InfiniteServerPath:
    """Paths of the infinite-server count and the coupled n-server count,
    both right-continuous and evaluated at every event time in ``times``."""

    times: np.ndarray
    breve_Q: np.ndarray
    Q_coupled: np.ndarray
    n: int
    scale: float

    @property
    def breve_X(self) -> np.ndarray:
        return (self.breve_Q - self.n) / self.scale

    @property
    def violations(self) -> int:
        return int(np.count_nonzero(self.breve_Q > self.Q_coupled))


def _count_present(start_sorted, end_sorted, t):
    return np.searchsorted(start_sorted, t, side="right") - np.searchsorted(end_sorted, t, side="right")


def simulate_infinite_server_bound(model: QueueModel, horizon: float, seed: int = 0) -> InfiniteServerPath:
    """Infinite-server count driven by the model's arrival and service streams.

    Every arrival starts service at once. The n-server queue with the same
    seeds (hence the same arrivals, initial residuals and i-th service time
    for the i-th arrival) is run alongside for the pathwise comparison.
    """
    if model.arrival_mode != "equilibrium":
        raise ValueError("the infinite-server bound is defined for equilibrium arrivals")
    if not horizon >= 0:
        raise ValueError("horizon must be nonnegative")
    n = model.n
    rng_a = stream(seed, "arrivals")
    rng_s = stream(seed, "services")
    rng_0 = stream(seed, "initial")
    residuals = np.sort(_initial_residuals(model, rng_0))
    arrivals = _arrival_times(model, horizon, rng_a)
    waiting = max(model.q0 - n, 0)
    services = np.asarray(model.service.sample(rng_s, waiting + arrivals.size), dtype=float)
    start, dep = fcfs_schedule(n, model.q0, residuals, arrivals, services)

    # infinite server: waiting customers (if any) also start at 0
    inf_start = np.concatenate([np.zeros(waiting), arrivals])
    inf_end = np.sort(inf_start + services)
    dep_sorted = np.sort(dep)
    times = np.unique(np.concatenate([[0.0], arrivals, inf_end[inf_end <= horizon],
                                      dep_sorted[dep_sorted <= horizon], residuals[residuals <= horizon]]))
    init_left = residuals.size - np.searchsorted(residuals, times, side="right")
    breve = init_left + _count_present(inf_start, inf_end, times)
    q_arr = np.concatenate([np.zeros(waiting), arrivals])
    q = init_left + np.searchsorted(q_arr, times, side="right") - np.searchsorted(dep_sorted, times, side="right")
    return InfiniteServerPath(times, breve.astype(np.int64), q.astype(np.int64), n, model.regime.scale)


# ---------------------------------------------------------------------------
# supremum tail


def wilson_interval(k: int, m: int, level: float = 0.95):
    if m == 0:
        return 0.0, 1.0
    z = float(stats.norm.ppf(0.5 + level / 2))
    p = k / m
    den = 1 + z * z / m
    centre = (p + z * z / (2 * m)) / den
    half = z * math.sqrt(p * (1 - p) / m + z * z / (4 * m * m)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class GGTailEstimate:
    r: float
    estimate: float
    ci_low: float
    ci_high: float
    truncation_bound: float
    i_max: int
    replications: int

    @property
    def flagged(self) -> bool:
        if self.estimate == 0:
            return self.truncation_bound > 0
        return self.truncation_bound > TRUNCATION_FLAG_RATIO * self.estimate


def _superposed_epochs(service, n: int, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted epochs of n independent equilibrium renewal processes up to ``horizon``."""
    mu = 1.0 / service.mean
    first = equilibrium_sample(service, rng, n)
    width = int(mu * horizon + 6.0 * math.sqrt(mu * horizon * (service.scv + 1.0)) + 8)
    total = first.copy()
    pieces = [first[first <= horizon]]
    active = np.nonzero(total <= horizon)[0]
    while active.size:
        inc = np.asarray(service.sample(rng, (active.size, width)), dtype=float)
        path = total[active, None] + np.cumsum(inc, axis=1)
        pieces.append(path[path <= horizon])
        total[active] = path[:, -1]
        active = active[path[:, -1] <= horizon]
    return np.sort(np.concatenate(pieces))


def gg_increments(model: QueueModel, i_max: int, rng: np.random.Generator):
    """One replication of the index walk.

    Returns ``(D, X_part, Y_part, drift)`` where ``D[i-1] = i - sum_k N'_k(tau_i)``
    and ``X_part + Y_part - drift`` equals ``D / (b_n sqrt(n))`` index by index.
    """
    reg = model.regime
    n, lam, mu = reg.n, reg.lam, reg.mu
    shape = model.arrival.shape
    tau = np.cumsum(np.asarray(shape.sample(rng, i_max), dtype=float)) / lam
    epochs = _superposed_epochs(model.service, n, float(tau[-1]), rng)
    counts = np.searchsorted(epochs, tau, side="right")
    i = np.arange(1, i_max + 1)
    D = i - counts
    scale = reg.scale
    x_part = -(counts - n * mu * tau) / scale
    y_part = -n * mu * (tau - i / lam) / scale
    beta_n = math.sqrt(n) / reg.b_n * (1.0 - reg.rho)
    drift = i / n * beta_n / reg.rho
    return D, x_part, y_part, drift


def default_i_max(model: QueueModel, r_max: float, factor: float = I_MAX_FACTOR) -> int:
    reg = model.regime
    beta_n = math.sqrt(reg.n) / reg.b_n * (1.0 - reg.rho)
    return int(math.ceil(factor * reg.n * max(r_max, 1.0 / reg.n) * reg.rho / beta_n))


def gg_supremum_tail(model: QueueModel, r_grid: Sequence[float], replications: int = 2000,
                     seed: int = 0, i_max: Optional[int] = None, level: float = 0.95) -> list:
    """Monte Carlo ``P(sup_i (X_{n,i} + Y_{n,i} - (i/n) beta_n/rho_n) > r)``.

    ``r`` is on the scaled axis (queue excess divided by ``b_n sqrt(n)``).
    The supremum is taken over ``i <= i_max``. The part beyond ``i_max`` is
    bounded by doubling blocks ``(2^l I, 2^(l+1) I]``, each controlled by the
    reflection-principle maximal bound ``2 P(N(0, v 2^(l+1) I) > r + 2^l I d)``
    with the per-index variance ``v`` measured at ``I``. This is a diffusion
    approximation, recorded alongside the estimate rather than added to it.
    """
    reg = model.regime
    if not reg.rho < 1:
        raise ValueError("need beta_n > 0 (rho_n < 1)")
    if model.arrival is None:
        raise ValueError("model needs an arrival law")
    r_grid = np.asarray(r_grid, dtype=float)
    if i_max is None:
        i_max = default_i_max(model, float(r_grid.max()))
    sups = np.empty(replications)
    s_end = np.empty(replications)
    for k in range(replications):
        D, xp, yp, drift = gg_increments(model, i_max, rng_for(seed, k, 3))
        z = D / reg.scale
        sups[k] = z.max()
        s_end[k] = xp[-1] + yp[-1]
    v = s_end.var(ddof=1) / i_max if replications > 1 else math.inf
    d = math.sqrt(reg.n) / reg.b_n * (1.0 - reg.rho) / (reg.n * reg.rho)
    out = []
    for r in r_grid:
        hits = int(np.count_nonzero(sups > r))
        lo, hi = wilson_interval(hits, replications, level)
        tb = sum(2.0 * stats.norm.sf((max(r, 0.0) + 2.0 ** l * i_max * d) / math.sqrt(v * 2.0 ** (l + 1) * i_max))
                 for l in range(64))
        out.append(GGTailEstimate(float(r), hits / replications, lo, hi, min(tb, 1.0), int(i_max), replications))
    return out
