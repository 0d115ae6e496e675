"""Counting renewal processes and explicit bounds on their moments.

Bounds take the normalized second moment ``E(lambda xi)^2`` and are
evaluated in log domain; the ``log_*`` variants return the logarithm
directly for orders where the bound overflows a double.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence, TextIO, Union

import numpy as np
from scipy import special, stats

from ._seeding import rng_for
from .laws import Law, equilibrium_sample

__all__ = [
    "RenewalProcess",
    "simulate_renewal",
    "sample_counts",
    "convolution_power_bound",
    "moment_bound_ordinary",
    "moment_bound_equilibrium",
    "central_moment_bound",
    "equilibrium_variance_bound",
    "lorden_mean_bound",
    "MomentBoundReport",
    "moment_bound_reports",
    "equilibrium_variance_report",
    "batch_means_ci",
    "write_reports_csv",
    "DEFAULT_C_PRIME",
    "DEFAULT_C_TILDE",
]

DEFAULT_C_PRIME = 2.0
DEFAULT_C_TILDE = 12.0
MODES = ("ordinary", "equilibrium")


@dataclass(frozen=True)
class RenewalProcess:
    interarrival: Law
    mode: str = "ordinary"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def rate(self) -> float:
        return 1.0 / self.interarrival.mean

    def first_epochs(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.mode == "equilibrium":
            return equilibrium_sample(self.interarrival, rng, size)
        return np.asarray(self.interarrival.sample(rng, size), dtype=float)


def simulate_renewal(process: RenewalProcess, horizon: float, seed: int) -> np.ndarray:
    """All jump times in ``(0, horizon]``; identical output for identical seeds."""
    if not horizon >= 0:
        raise ValueError("horizon must be nonnegative")
    if horizon == 0:
        return np.empty(0)
    rng = rng_for(seed, 0)
    chunk = max(16, int(1.5 * horizon * process.rate) + 16)
    first = process.first_epochs(rng, 1)
    times = [first]
    last = float(first[-1])
    while last <= horizon:
        block = last + np.cumsum(np.asarray(process.interarrival.sample(rng, chunk), dtype=float))
        times.append(block)
        last = float(block[-1])
    out = np.concatenate(times)
    return out[out <= horizon]


def sample_counts(process: RenewalProcess, t: float, reps: int, rng: np.random.Generator) -> np.ndarray:
    """Independent draws of ``A(t)`` for ``reps`` replications (vectorized)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    lam = process.rate
    scv = max(process.interarrival.scv, 0.0)
    width = int(lam * t + 8.0 * math.sqrt(lam * t * (scv + 1.0)) + 16)
    first = process.first_epochs(rng, reps)
    total = first.copy()
    counts = (total <= t).astype(np.int64)
    active = np.nonzero(total <= t)[0]
    while active.size:
        inc = np.asarray(process.interarrival.sample(rng, (active.size, width)), dtype=float)
        path = total[active, None] + np.cumsum(inc, axis=1)
        counts[active] += (path <= t).sum(axis=1)
        total[active] = path[:, -1]
        active = active[path[:, -1] <= t]
    return counts


# ---------------------------------------------------------------------------
# bounds


def _check_order(m) -> int:
    if int(m) != m or m < 1:
        raise ValueError("moment order m must be an integer >= 1")
    return int(m)


def log_convolution_power_bound(m: int, t: float, lam: float, second_moment: float) -> float:
    m = _check_order(m)
    return (m * math.log1p(lam * t) - special.gammaln(m + 1)
            + m * math.log1p(m * second_moment))


def convolution_power_bound(m: int, t: float, lam: float, second_moment: float) -> float:
    """``(1 + lam t)^m / m! * (1 + m E(lam xi)^2)^m``."""
    return math.exp(log_convolution_power_bound(m, t, lam, second_moment))


def _log_bracket(m: int, t: float, lam: float, second_moment: float) -> float:
    # ln[(1+lam t)^m (1 + m s)^m + m^m]
    a = m * math.log1p(lam * t) + m * math.log1p(m * second_moment)
    b = m * math.log(m)
    return float(np.logaddexp(a, b))


def log_moment_bound_ordinary(m, t, lam, second_moment) -> float:
    m = _check_order(m)
    return (m - 1) * math.log(2.0) + _log_bracket(m, t, lam, second_moment)


def moment_bound_ordinary(m: int, t: float, lam: float, second_moment: float) -> float:
    """``2^(m-1) ((1+lam t)^m (1+m E(lam xi)^2)^m + m^m)`` bounding ``E A(t)^m``."""
    return math.exp(log_moment_bound_ordinary(m, t, lam, second_moment))


def log_moment_bound_equilibrium(m, t, lam, second_moment, c_prime=DEFAULT_C_PRIME) -> float:
    m = _check_order(m)
    if not c_prime > 1:
        raise ValueError("C' must exceed 1")
    return m * math.log(c_prime) + _log_bracket(m, t, lam, second_moment)


def moment_bound_equilibrium(m: int, t: float, lam: float, second_moment: float,
                             c_prime: float = DEFAULT_C_PRIME) -> float:
    """Same bracket as the ordinary bound with prefactor ``C'^m``."""
    return math.exp(log_moment_bound_equilibrium(m, t, lam, second_moment, c_prime))


def log_central_moment_bound(p, t, lam, log_moment, c_tilde=DEFAULT_C_TILDE) -> float:
    if not p >= 2:
        raise ValueError("p must be >= 2")
    # log E(lam xi)^q = log E xi^q + q ln lam
    lm_p1 = log_moment(p + 1.0) + (p + 1.0) * math.log(lam)
    lm_2 = log_moment(2.0) + 2.0 * math.log(lam)
    first = math.log1p(lam * t) + lm_p1
    second = (p / 2.0 + 1.0) * (math.log1p(lam * t) + math.log(p)) + 1.5 * p * lm_2
    return p * math.log(c_tilde) + float(np.logaddexp(first, second))


def central_moment_bound(p: float, t: float, lam: float, log_moment,
                         c_tilde: float = DEFAULT_C_TILDE) -> float:
    """Bound on ``E|A(t) - lam t|^p`` for ``p >= 2``.

    ``log_moment`` maps ``q`` to ``ln E xi^q`` (e.g. ``law.log_moment``).
    """
    return math.exp(log_central_moment_bound(p, t, lam, log_moment, c_tilde))


def equilibrium_variance_bound(t: float, lam: float, xi_second_moment: float) -> float:
    """``2 lam t (lam^2 E xi^2 + 1/2)`` bounding ``E(A'(t) - lam t)^2``."""
    return 2.0 * lam * t * (lam * lam * xi_second_moment + 0.5)


def lorden_mean_bound(t: float, lam: float, second_moment: float) -> float:
    """``lam t + E(lam xi)^2``, an upper bound on ``E A(t)``."""
    return lam * t + second_moment


# ---------------------------------------------------------------------------
# Monte Carlo verification


def batch_means_ci(values: np.ndarray, batches: int = 100, level: float = 0.99):
    """Batch-means mean and one-sided upper / lower confidence limits.

    Replications are assigned to batches by index, so the result does not
    depend on how replications were scheduled.
    """
    values = np.asarray(values, dtype=float)
    k = min(batches, values.size)
    means = np.array([b.mean() for b in np.array_split(values, k)])
    est = float(values.mean())
    if k < 2:
        return est, -math.inf, math.inf
    se = float(means.std(ddof=1) / math.sqrt(k))
    q = float(stats.t.ppf(level, k - 1))
    return est, est - q * se, est + q * se


@dataclass
class MomentBoundReport:
    family: str
    mode: str
    m: int
    t: float
    bound: float
    estimate: float
    ci_low: float
    ci_high: float

    @property
    def passed(self) -> bool:
        return self.bound >= self.ci_high

    def row(self):
        d = asdict(self)
        d["pass"] = self.passed
        return d


def moment_bound_reports(process: RenewalProcess, m_values: Sequence[int], t_values: Sequence[float],
                         reps: int = 100_000, seed: int = 0, batches: int = 100,
                         level: float = 0.99, c_prime: float = DEFAULT_C_PRIME) -> List[MomentBoundReport]:
    """Monte Carlo ``E A(t)^m`` against the explicit bound for each ``(m, t)``."""
    lam = process.rate
    second = process.interarrival.moment(2.0) * lam * lam
    out = []
    for j, t in enumerate(t_values):
        counts = sample_counts(process, t, reps, rng_for(seed, j)).astype(float)
        for m in m_values:
            if process.mode == "ordinary":
                bound = moment_bound_ordinary(m, t, lam, second)
            else:
                bound = moment_bound_equilibrium(m, t, lam, second, c_prime)
            est, lo, hi = batch_means_ci(counts**m, batches, level)
            out.append(MomentBoundReport(process.interarrival.family, process.mode, int(m), float(t),
                                         bound, est, lo, hi))
    return out


def equilibrium_variance_report(interarrival: Law, t_values: Sequence[float], reps: int = 100_000,
                                seed: int = 0, batches: int = 100, level: float = 0.99) -> List[MomentBoundReport]:
    """Empirical ``E(A'(t) - lam t)^2`` against the equilibrium variance bound (reported with m=2)."""
    process = RenewalProcess(interarrival, "equilibrium")
    lam = process.rate
    out = []
    for j, t in enumerate(t_values):
        counts = sample_counts(process, t, reps, rng_for(seed, 1000 + j)).astype(float)
        est, lo, hi = batch_means_ci((counts - lam * t) ** 2, batches, level)
        bound = equilibrium_variance_bound(t, lam, interarrival.moment(2.0))
        out.append(MomentBoundReport(interarrival.family, "equilibrium-variance", 2, float(t), bound, est, lo, hi))
    return out


CSV_FIELDS = ("family", "mode", "m", "t", "bound", "estimate", "ci_low", "ci_high", "pass")


def write_reports_csv(reports: Iterable[MomentBoundReport], dest: Union[str, TextIO, None] = None,
                      header_comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in reports:
        row = r.row()
        writer.writerow([_fmt(row[k]) for k in CSV_FIELDS])
    text = buf.getvalue()
    if isinstance(dest, str):
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    elif dest is not None:
        dest.write(text)
    return text


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
