"""Long-run sampling of the number in system and residual service times."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core import ARRIVAL, DEPARTURE, EventTrace, QueueModel, ResidualSnapshot, simulate

__all__ = [
    "StationarySample",
    "InstabilityError",
    "stationary_sample",
    "default_burn_in",
    "occupancy_histogram",
    "batch_means_ess",
    "geweke_z",
]

GEWEKE_THRESHOLD = 6.0


class InstabilityError(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def default_burn_in(model: QueueModel) -> float:
    return 50.0 * model.n / model.regime.mu


def batch_means_ess(x: np.ndarray, batches: int = 20) -> Dict[str, float]:
    """Effective sample size from batch means, plus lag-1 autocorrelation."""
    x = np.asarray(x, dtype=float)
    n = x.size
    out = {"n": float(n), "ess": float(n), "lag1": 0.0}
    if n < 4:
        return out
    var = x.var(ddof=1)
    if var == 0:
        return out
    xc = x - x.mean()
    out["lag1"] = float(np.dot(xc[1:], xc[:-1]) / np.dot(xc, xc))
    k = min(batches, n // 2)
    size = n // k
    means = x[: k * size].reshape(k, size).mean(axis=1)
    sigma2 = size * means.var(ddof=1)
    out["ess"] = float(min(n, n * var / sigma2)) if sigma2 > 0 else float(n)
    return out


def geweke_z(x: np.ndarray, first: float = 0.1, last: float = 0.5) -> float:
    """Difference of early and late means in batch-means standard errors."""
    x = np.asarray(x, dtype=float)
    a = x[: max(2, int(first * x.size))]
    b = x[int((1 - last) * x.size):]

    def se2(v):
        if v.size < 4:
            return v.var() / max(v.size, 1)
        d = batch_means_ess(v, batches=min(10, v.size // 2))
        return v.var(ddof=1) / max(d["ess"], 1.0)

    denom = math.sqrt(se2(a) + se2(b))
    if denom == 0:
        return 0.0
    return float((a.mean() - b.mean()) / denom)


@dataclass
class StationarySample:
    times: np.ndarray
    Q: np.ndarray
    X: np.ndarray
    snapshots: List[ResidualSnapshot]
    diagnostics: Dict[str, float] = field(default_factory=dict)
    trace: Optional[EventTrace] = field(default=None, repr=False)
    n: int = 0

    def tail(self, x) -> np.ndarray:
        """Empirical ``P(X >= x)`` for each x."""
        srt = np.sort(self.X)
        x = np.asarray(x, dtype=float)
        return (srt.size - np.searchsorted(srt, x, side="left")) / srt.size

    def queue_tail(self, r) -> np.ndarray:
        """Empirical ``P((Q - n)^+ > r)``."""
        srt = np.sort(np.maximum(self.Q - self.n, 0))
        r = np.asarray(r, dtype=float)
        return (srt.size - np.searchsorted(srt, r, side="right")) / srt.size

    def mean_S(self, x_grid) -> np.ndarray:
        return np.mean([s.S(x_grid) for s in self.snapshots], axis=0)


def stationary_sample(model: QueueModel, burn_in: Optional[float] = None, count: int = 500,
                      spacing: float = 1.0, seed: int = 0, keep_trace: bool = True) -> StationarySample:
    """Sample ``X_n(t)`` and residual snapshots at ``burn_in + j * spacing``.

    Stationarity is approximated by burn-in. A Geweke-type comparison of the
    first 10% and last 50% of the samples flags upward drift; a drift beyond
    ``GEWEKE_THRESHOLD`` standard errors aborts with :class:`InstabilityError`.
    """
    if not model.regime.rho < 1:
        raise ValueError("stationary sampling needs rho_n < 1")
    burn_in = default_burn_in(model) if burn_in is None else burn_in
    if not (burn_in > 0 and spacing > 0 and count >= 1):
        raise ValueError("need burn_in > 0, spacing > 0 and count >= 1")
    times = burn_in + spacing * np.arange(count)
    trace = simulate(model, float(times[-1]), sample_grid=times, seed=seed)
    Q = trace.Q(times)
    X = trace.X(times)
    diag = batch_means_ess(X)
    diag["geweke_z"] = geweke_z(Q)
    diag["burn_in"] = float(burn_in)
    diag["mean_Q"] = float(Q.mean())
    if diag["geweke_z"] < -GEWEKE_THRESHOLD:
        raise InstabilityError("queue drifts upward after burn-in", diag)
    snaps = [trace.residual_snapshot(float(t)) for t in times]
    return StationarySample(times, Q, X, snaps, diag, trace if keep_trace else None, model.n)


def occupancy_histogram(trace: EventTrace, t0: float, t1: Optional[float] = None,
                        kmax: Optional[int] = None) -> np.ndarray:
    """Fraction of time in ``[t0, t1]`` spent with Q = k, k = 0..kmax."""
    t1 = trace.horizon if t1 is None else t1
    log = trace.event_log()
    step = np.where(log["kind"] == ARRIVAL, 1, np.where(log["kind"] == DEPARTURE, -1, 0))
    level = trace.q0 + np.concatenate([[0], np.cumsum(step)])
    edges = np.concatenate([[0.0], log["time"], [np.inf]])
    lo = np.clip(edges[:-1], t0, t1)
    hi = np.clip(edges[1:], t0, t1)
    dur = hi - lo
    kmax = int(level.max()) if kmax is None else kmax
    hist = np.bincount(np.minimum(level, kmax), weights=dur, minlength=kmax + 1)
    return hist / (t1 - t0)
