"""FCFS G/G/n simulation and the event trace it produces."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .._seeding import stream
from ..laws import ArrivalLaw, Law, ScalingRegime, equilibrium_sample

__all__ = [
    "QueueModel",
    "EventTrace",
    "ResidualSnapshot",
    "CalendarOverflow",
    "simulate",
    "fcfs_schedule",
    "DEPARTURE",
    "ARRIVAL",
    "ENTER",
    "EVENT_DTYPE",
]

# tie order at equal timestamps: departures, then arrivals, then entries
DEPARTURE, ARRIVAL, ENTER = 0, 1, 2
EVENT_DTYPE = np.dtype([("kind", "u1"), ("time", "<f8"), ("id", "<u8")])


class CalendarOverflow(RuntimeError):
    """Raised when a run exceeds ``max_events``; ``trace`` holds the partial run."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class QueueModel:
    """A G/G/n queue with its initial condition.

    ``arrival`` may be ``None`` for a closed system that only drains its
    initial customers. ``initial_residuals`` defaults to draws from the
    stationary-excess law of ``service`` when ``q0 > 0``.
    """

    regime: ScalingRegime
    arrival: Optional[ArrivalLaw]
    service: Law
    q0: int = 0
    initial_residuals: Optional[np.ndarray] = None
    arrival_mode: str = "ordinary"

    def __post_init__(self):
        if self.q0 < 0 or int(self.q0) != self.q0:
            raise ValueError("q0 must be a nonnegative integer")
        if self.arrival_mode not in ("ordinary", "equilibrium"):
            raise ValueError("arrival_mode must be 'ordinary' or 'equilibrium'")
        if self.initial_residuals is not None:
            res = np.asarray(self.initial_residuals, dtype=float)
            if res.shape != (min(self.q0, self.n),):
                raise ValueError("need exactly min(q0, n) initial residual times")
            if np.any(res <= 0):
                raise ValueError("initial residual times must be positive")
            object.__setattr__(self, "initial_residuals", res)

    @property
    def n(self) -> int:
        return self.regime.n

    @classmethod
    def build(cls, regime: ScalingRegime, arrival_shape: Law, service: Law, **kw) -> "QueueModel":
        """Model with arrivals at the regime's rate ``lambda_n``."""
        if abs(service.mean * regime.mu - 1.0) > 1e-9:
            raise ValueError("service mean must equal 1/mu of the regime")
        return cls(regime, ArrivalLaw(arrival_shape, regime.lam), service, **kw)

    @classmethod
    def gg_setup(cls, regime: ScalingRegime, arrival_shape: Law, service: Law) -> "QueueModel":
        """Full occupancy at time 0 with stationary-excess residuals and
        equilibrium arrivals."""
        return cls.build(regime, arrival_shape, service, q0=regime.n, arrival_mode="equilibrium")


@dataclass
class ResidualSnapshot:
    """Residual service times of the customers in service at time ``t``."""

    t: float
    residuals: np.ndarray  # sorted ascending
    n: int

    def S(self, x):
        """Complementary empirical cdf ``(1/n) #{i: chi_i > x}``."""
        x = np.asarray(x, dtype=float)
        above = self.residuals.size - np.searchsorted(self.residuals, x, side="right")
        return above / self.n


def fcfs_schedule(n: int, q0: int, residuals: np.ndarray, arrivals: np.ndarray,
                  services: np.ndarray):
    """Entering-service and departure times under FCFS.

    Customers initially waiting (``(q0 - n)^+`` of them) are served first,
    then exogenous arrivals in order; ``services[i]`` belongs to the i-th
    customer to enter service. Returns ``(start, depart)``.
    """
    waiting = max(q0 - n, 0)
    heap = [float(r) for r in residuals] + [0.0] * (n - len(residuals))
    heapq.heapify(heap)
    arr = [0.0] * waiting + arrivals.tolist()
    svc = services.tolist()
    start = [0.0] * len(arr)
    dep = [0.0] * len(arr)
    replace = heapq.heapreplace
    for i, a in enumerate(arr):
        free = heap[0]
        s = a if a >= free else free
        d = s + svc[i]
        replace(heap, d)
        start[i] = s
        dep[i] = d
    return np.array(start), np.array(dep)


def _arrival_times(model: QueueModel, horizon: float, rng: np.random.Generator) -> np.ndarray:
    arrival = model.arrival
    if arrival is None or horizon <= 0:
        return np.empty(0)
    rate = arrival.rate
    if model.arrival_mode == "equilibrium":
        first = float(equilibrium_sample(arrival.interarrival, rng, 1)[0])
    else:
        first = float(arrival.sample_normalized(rng, 1)[0]) / rate
    chunk = int(1.2 * horizon * rate) + 64
    pieces = [np.array([first])]
    last = first
    while last <= horizon:
        block = last + np.cumsum(np.asarray(arrival.sample_normalized(rng, chunk), dtype=float)) / rate
        pieces.append(block)
        last = float(block[-1])
    times = np.concatenate(pieces)
    return times[times <= horizon]


@dataclass
class EventTrace:
    """Immutable record of one simulated path up to ``horizon``.

    Scheduled departure times after ``horizon`` are kept so residual service
    times at any ``t <= horizon`` can be read off.
    """

    regime: ScalingRegime
    q0: int
    horizon: float
    initial_residuals: np.ndarray
    arrival_times: np.ndarray
    start_times: np.ndarray  # customers entering after time 0, FCFS order
    service_times: np.ndarray
    sample_grid: Optional[np.ndarray] = None
    _sorted_dep: np.ndarray = field(init=False, repr=False)
    _sorted_res: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.departure_times = self.start_times + self.service_times
        self._sorted_dep = np.sort(self.departure_times)
        self._sorted_res = np.sort(self.initial_residuals)
        self._max_service = float(self.service_times.max()) if self.service_times.size else 0.0
        for arr in (self.initial_residuals, self.arrival_times, self.start_times, self.service_times):
            arr.setflags(write=False)

    # -- counting processes -------------------------------------------------
    @property
    def n(self) -> int:
        return self.regime.n

    @property
    def waiting0(self) -> int:
        return max(self.q0 - self.n, 0)

    def A(self, t):
        """Exogenous arrivals in ``(0, t]``."""
        return np.searchsorted(self.arrival_times, t, side="right")

    def A_hat(self, t):
        """Customers entering service in ``(0, t]``; waiting customers that
        start at time 0 count at ``t = 0``."""
        return np.searchsorted(self.start_times, t, side="right")

    def D(self, t):
        return (np.searchsorted(self._sorted_res, t, side="right")
                + np.searchsorted(self._sorted_dep, t, side="right"))

    def Q(self, t):
        return self.q0 + self.A(t) - self.D(t)

    def Q_initial(self, t):
        """Customers still present out of those initially in service."""
        return self._sorted_res.size - np.searchsorted(self._sorted_res, t, side="right")

    def Q_balance(self, t):
        """Number in system rebuilt from the balance equation.

        Departures are counted only among the first ``A_hat(t)`` customers
        to enter service, as written; cost is O(len(t) * customers).
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        ahat = self.A_hat(t)
        eta, tau = self.service_times, self.start_times
        gone = np.array([np.count_nonzero(eta[:k] + tau[:k] <= s) for k, s in zip(ahat, t)])
        return self.Q_initial(t) + self.waiting0 + self.A(t) - gone

    # -- scaled observables ---------------------------------------------------
    def X(self, t):
        return self.regime.x_of(self.Q(t))

    def Y(self, t):
        """Centred, scaled arrival process ``(sqrt(n)/b_n)(A(t)/n - mu t)``."""
        r = self.regime
        t = np.asarray(t, dtype=float)
        return math.sqrt(r.n) / r.b_n * (self.A(t) / r.n - r.mu * t)

    def Phi(self, t, service: Law):
        """Centred count of initially-in-service customers still present."""
        t = np.asarray(t, dtype=float)
        k0 = self._sorted_res.size
        return (self.Q_initial(t) - k0 * (1.0 - service.equilibrium_cdf_exact(t))) / self.regime.scale

    # -- event log ----------------------------------------------------------
    def event_log(self) -> np.ndarray:
        """All events with ``time <= horizon``, sorted by (time, kind, id)."""
        k0 = self._sorted_res.size
        h = self.horizon
        ids_arr = np.arange(self.arrival_times.size, dtype=np.uint64) + self.q0
        ids_entered = np.arange(self.start_times.size, dtype=np.uint64) + k0
        parts = []

        def add(kind, times, ids):
            keep = times <= h
            rec = np.empty(int(keep.sum()), dtype=EVENT_DTYPE)
            rec["kind"] = kind
            rec["time"] = times[keep]
            rec["id"] = ids[keep]
            parts.append(rec)

        add(ARRIVAL, self.arrival_times, ids_arr)
        add(ENTER, self.start_times, ids_entered)
        add(DEPARTURE, self.departure_times, ids_entered)
        add(DEPARTURE, self.initial_residuals, np.arange(k0, dtype=np.uint64))
        log = np.concatenate(parts)
        order = np.lexsort((log["id"], log["kind"], log["time"]))
        return log[order]

    def flow_residuals(self, log: Optional[np.ndarray] = None) -> np.ndarray:
        """``(Q(0)-n)^+ + A(t) - (Q(t)-n)^+ - A_hat(t)`` after each event time.

        Integer arithmetic over the event log; all zeros when FCFS
        bookkeeping is consistent.
        """
        if log is None:
            log = self.event_log()
        n = self.n
        kind = log["kind"]
        a = np.cumsum(kind == ARRIVAL, dtype=np.int64)
        d = np.cumsum(kind == DEPARTURE, dtype=np.int64)
        # waiting customers that start at 0 are entries but not arrivals
        e = np.cumsum(kind == ENTER, dtype=np.int64)
        q = self.q0 + a - d
        last = np.ones(log.size, dtype=bool)
        if log.size:
            last[:-1] = log["time"][1:] != log["time"][:-1]
        lhs = self.waiting0 + a
        rhs = np.maximum(q - n, 0) + e
        return (lhs - rhs)[last]

    def path_from_log(self, t, log: Optional[np.ndarray] = None) -> np.ndarray:
        """Right-continuous Q(t) obtained by walking the event log."""
        if log is None:
            log = self.event_log()
        step = np.where(log["kind"] == ARRIVAL, 1, np.where(log["kind"] == DEPARTURE, -1, 0))
        level = self.q0 + np.concatenate([[0], np.cumsum(step)])
        idx = np.searchsorted(log["time"], t, side="right")
        return level[idx]

    # -- residual service times -------------------------------------------------
    def residual_snapshot(self, t: float) -> ResidualSnapshot:
        if not 0 <= t <= self.horizon:
            raise ValueError("snapshot time outside the simulated window")
        res0 = self._sorted_res[self._sorted_res > t] - t
        hi = int(np.searchsorted(self.start_times, t, side="right"))
        lo = int(np.searchsorted(self.start_times, t - self._max_service, side="left"))
        dep = self.departure_times[lo:hi]
        busy = dep[dep > t] - t
        return ResidualSnapshot(float(t), np.sort(np.concatenate([res0, busy])), self.n)

    def residual_S_from_entries(self, t: float, x):
        """``(1/n) sum_{i <= A_hat(t)} 1{eta_i + tau_i - t > x}`` from service-entry records.

        Ignores customers in service at time 0; equals ``residual_snapshot(t).S``
        once those have left.
        """
        k = int(self.A_hat(t))
        rem = self.service_times[:k] + self.start_times[:k] - t
        rem = np.sort(rem[rem > 0])
        x = np.asarray(x, dtype=float)
        return (rem.size - np.searchsorted(rem, x, side="right")) / self.n

    def sampled_paths(self, grid=None):
        """Dict of Q, X, A_hat, Y on the sample grid."""
        grid = self.sample_grid if grid is None else np.asarray(grid, dtype=float)
        if grid is None:
            raise ValueError("no sample grid")
        return {"t": grid, "Q": self.Q(grid), "X": self.X(grid), "A_hat": self.A_hat(grid), "Y": self.Y(grid)}


def _initial_residuals(model: QueueModel, rng: np.random.Generator) -> np.ndarray:
    k0 = min(model.q0, model.n)
    if model.initial_residuals is not None:
        return np.asarray(model.initial_residuals, dtype=float)
    if k0 == 0:
        return np.empty(0)
    return equilibrium_sample(model.service, rng, k0)


def simulate(model: QueueModel, horizon: float, sample_grid=None, seed: int = 0,
             max_events: Optional[int] = None) -> EventTrace:
    """Simulate the queue on ``[0, horizon]``.

    Arrivals, service times and initial residuals use separate seed streams,
    so the i-th customer to enter service gets the same service time in any
    run with the same seed. ``max_events`` caps arrivals + entries +
    departures; exceeding it raises :class:`CalendarOverflow` carrying the
    trace truncated at the cap.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    rng_a = stream(seed, "arrivals")
    rng_s = stream(seed, "services")
    rng_0 = stream(seed, "initial")
    residuals = _initial_residuals(model, rng_0)
    arrivals = _arrival_times(model, horizon, rng_a)
    waiting = max(model.q0 - model.n, 0)
    services = np.asarray(model.service.sample(rng_s, waiting + arrivals.size), dtype=float)
    start, _ = fcfs_schedule(model.n, model.q0, residuals, arrivals, services)
    grid = None if sample_grid is None else np.asarray(sample_grid, dtype=float)
    trace = EventTrace(model.regime, model.q0, float(horizon), residuals, arrivals, start, services, grid)
    if max_events is not None:
        log = trace.event_log()
        if log.size > max_events:
            cut = float(log["time"][max_events - 1])
            partial = _truncate(trace, cut)
            raise CalendarOverflow(f"event calendar exceeded {max_events} events before t={horizon}", partial)
    return trace


def _truncate(trace: EventTrace, cut: float) -> EventTrace:
    keep_a = trace.arrival_times <= cut
    k = int(np.count_nonzero(keep_a)) + trace.waiting0
    return EventTrace(trace.regime, trace.q0, cut, trace.initial_residuals.copy(),
                      trace.arrival_times[keep_a].copy(), trace.start_times[:k].copy(),
                      trace.service_times[:k].copy(), trace.sample_grid)
