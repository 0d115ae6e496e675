"""Exact M/M/n oracle, tail-to-rate conversion and the convergence panel."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import special, stats

from .laws import Exponential, Law, ScalingRegime
from .queue_sim import QueueModel, gg_supremum_tail, stationary_sample, wilson_interval

__all__ = [
    "BirthDeathLaw",
    "birth_death_stationary",
    "erlang_c",
    "RateEstimate",
    "rate_from_tail",
    "rate_from_counts",
    "PanelReport",
    "convergence_panel",
    "default_b_rule",
    "PANEL_FIELDS",
]

PANEL_FIELDS = ("n", "b_n", "x", "source", "rate", "band_low", "band_high", "flag")
SOURCES = ("birth-death", "simulation", "quasipotential", "gg-bound", "infinite-server")


def default_b_rule(n: int) -> float:
    return float(n) ** 0.1


@dataclass
class BirthDeathLaw:
    """Stationary law of the M/M/n queue length, truncated at ``K`` with a
    geometric remainder ``tail_bound = P(Q > K)``."""

    n: int
    lam: float
    mu: float
    K: int
    log_pi: np.ndarray
    tail_bound: float

    @property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)

    @property
    def rho_tail(self) -> float:
        return self.lam / (self.n * self.mu)

    def pmf(self, k) -> np.ndarray:
        k = np.asarray(k)
        out = np.zeros(k.shape)
        inside = (k >= 0) & (k <= self.K)
        out[inside] = np.exp(self.log_pi[k[inside].astype(int)])
        beyond = k > self.K
        out[beyond] = np.exp(self.log_pi[-1] + (k[beyond] - self.K) * math.log(self.rho_tail))
        return out

    def log_tail(self, k: int) -> float:
        """``ln P(Q >= k)`` for integer ``k``."""
        k = int(k)
        if k <= 0:
            return 0.0
        r = self.rho_tail
        if k > self.K:
            return float(self.log_pi[-1] + (k - self.K) * math.log(r) - math.log1p(-r))
        rest = float(self.log_pi[-1] + math.log(r) - math.log1p(-r))
        return float(np.logaddexp(special.logsumexp(self.log_pi[k:]), rest))

    def tail(self, k: int) -> float:
        return math.exp(self.log_tail(k))

    def x_tail(self, x, b_n: float) -> np.ndarray:
        """``P(X >= x)`` with ``X = (Q - n)/(b_n sqrt(n))``."""
        s = b_n * math.sqrt(self.n)
        return np.array([math.exp(self.log_tail(math.ceil(self.n + xi * s - 1e-9))) for xi in np.atleast_1d(x)])

    def delay_probability(self) -> float:
        return self.tail(self.n)

    def normalization_error(self) -> float:
        return abs(math.fsum(self.pi) + self.tail_bound - 1.0)

    def detailed_balance_error(self) -> float:
        k = np.arange(self.K)
        lhs = math.log(self.lam) + self.log_pi[:-1]
        rhs = np.log(self.mu * np.minimum(k + 1, self.n)) + self.log_pi[1:]
        return float(np.max(np.abs(np.expm1(lhs - rhs)))) if self.K else 0.0


def birth_death_stationary(n: int, lam: float, mu: float = 1.0, K: Optional[int] = None) -> BirthDeathLaw:
    """Log-domain product formula for the M/M/n stationary law.

    Beyond ``K >= n`` the law is geometric with ratio ``lam/(n mu)``; that
    remainder enters the normalization in closed form.
    """
    if not (n >= 1 and lam > 0 and mu > 0):
        raise ValueError("need n >= 1, lam > 0, mu > 0")
    if not lam < n * mu:
        raise ValueError("unstable: lam >= n mu")
    K = 10 * n if K is None else int(K)
    if K < n:
        raise ValueError("truncation K must be at least n")
    k = np.arange(1, K + 1)
    steps = math.log(lam) - np.log(mu * np.minimum(k, n))
    logw = np.concatenate([[0.0], np.cumsum(steps)])
    r = lam / (n * mu)
    log_rest = logw[-1] + math.log(r) - math.log1p(-r)
    logz = float(np.logaddexp(special.logsumexp(logw), log_rest))
    log_pi = logw - logz
    return BirthDeathLaw(int(n), float(lam), float(mu), K, log_pi, math.exp(log_rest - logz))


def erlang_c(n: int, offered: float) -> float:
    """Probability of waiting in M/M/n with offered load ``lam/mu``, via Poisson terms."""
    if not 0 < offered < n:
        raise ValueError("need 0 < offered load < n")
    top = stats.poisson.pmf(n, offered) * n / (n - offered)
    return float(top / (stats.poisson.cdf(n - 1, offered) + top))


# ---------------------------------------------------------------------------
# rates


@dataclass
class RateEstimate:
    x: float
    rate: float
    source: str
    band_low: float = math.nan
    band_high: float = math.nan
    flag: str = ""
    n: Optional[int] = None
    b_n: Optional[float] = None

    @property
    def is_estimate(self) -> bool:
        return math.isfinite(self.rate) and not self.flag.startswith(("gap", "lower-bound"))


def rate_from_tail(tail_probabilities, b_n: float, x_grid, source: str = "birth-death",
                   flag: str = "", n: Optional[int] = None) -> List[RateEstimate]:
    """``-ln P(X >= x) / b_n^2`` for exact (deterministic) tail probabilities."""
    if not b_n > 0:
        raise ValueError("b_n must be positive")
    p = np.asarray(tail_probabilities, dtype=float)
    x = np.asarray(x_grid, dtype=float)
    if p.shape != x.shape:
        raise ValueError("one probability per x")
    if np.any(~(p > 0)) or np.any(p > 1):
        raise ValueError("probabilities must lie in (0, 1]")
    b2 = b_n * b_n
    return [RateEstimate(float(xi), max(0.0, -math.log(pi)) / b2, source, flag=flag, n=n, b_n=b_n)
            for xi, pi in zip(x, p)]


def rate_from_counts(hits, total: int, b_n: float, x_grid, source: str = "simulation",
                     level: float = 0.95, n: Optional[int] = None) -> List[RateEstimate]:
    """Rates from empirical exceedance counts with a Wilson band mapped through ``-ln(.)/b_n^2``.

    A zero count yields only a lower bound (``flag='lower-bound'``, rate NaN).
    """
    if not b_n > 0:
        raise ValueError("b_n must be positive")
    b2 = b_n * b_n
    out = []
    for xi, k in zip(np.asarray(x_grid, dtype=float), np.asarray(hits)):
        lo, hi = wilson_interval(int(k), int(total), level)
        band_low = -math.log(hi) / b2 if hi > 0 else math.inf
        if k == 0:
            out.append(RateEstimate(float(xi), math.nan, source, band_low, math.inf, "lower-bound", n, b_n))
            continue
        band_high = -math.log(lo) / b2 if lo > 0 else math.inf
        out.append(RateEstimate(float(xi), -math.log(k / total) / b2, source, band_low, band_high, "", n, b_n))
    return out


# ---------------------------------------------------------------------------
# panel


@dataclass
class PanelReport:
    rows: List[RateEstimate]
    verdict: Dict[str, object]

    def to_csv(self, dest=None, header_comment: Optional[str] = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PANEL_FIELDS)
        for r in self.rows:
            w.writerow((str(r.n), _num(r.b_n), _num(r.x), r.source, _num(r.rate), _num(r.band_low),
                        _num(r.band_high), r.flag))
        text = buf.getvalue()
        if hasattr(dest, "write"):
            dest.write(text)
        elif dest is not None:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return text

    def verdict_json(self) -> str:
        return json.dumps(self.verdict, indent=2, sort_keys=True)

    def lookup(self, n: int, x: float, source: str) -> RateEstimate:
        for r in self.rows:
            if r.n == n and r.source == source and abs(r.x - x) < 1e-12:
                return r
        raise KeyError((n, x, source))


def _num(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _gap(n, b, x, source, reason):
    return RateEstimate(float(x), math.nan, source, math.nan, math.nan, f"gap:{reason}", n, b)


def _trend(values: Sequence[float], target: float) -> Optional[bool]:
    gaps = [abs(v - target) for v in values]
    if len(gaps) < 2 or not all(math.isfinite(g) for g in gaps):
        return None
    steps = len(gaps) - 1
    good = sum(1 for a, b in zip(gaps, gaps[1:]) if b <= a)
    return good >= math.ceil(2 * steps / 3)


def convergence_panel(n_list: Sequence[int], x_grid: Sequence[float], beta: float = 1.0,
                      b_rule: Callable[[int], float] = default_b_rule, service: Optional[Law] = None,
                      arrival_shape: Optional[Law] = None, quasipotential: Optional[Dict[float, float]] = None,
                      gg_replications: int = 400, gg_seed: int = 0, simulate: bool = False,
                      sim_count: int = 2000, sim_seed: int = 0, threads: int = 1) -> PanelReport:
    """Rates per ``(n, x)`` from every available source.

    ``quasipotential`` maps x to a precomputed ``I(x)`` (missing keys become gap
    rows). Birth-death rows need exponential service and Poisson arrivals;
    otherwise, or when ``simulate`` is set, simulated rates are added.
    Missing sources are written as explicit gap rows, never interpolated.
    """
    service = Exponential(1.0) if service is None else service
    arrival_shape = Exponential(1.0) if arrival_shape is None else arrival_shape
    mu = 1.0 / service.mean
    markovian = service.family == "exponential" and arrival_shape.family == "exponential"
    x_grid = [float(x) for x in x_grid]
    n_list = sorted(int(n) for n in n_list)
    quasipotential = quasipotential or {}

    def cell(n):
        b = float(b_rule(n))
        reg = ScalingRegime(n, b, beta, mu)
        if not reg.stable():
            raise ValueError(f"n={n}: regime is not stable")
        s = reg.scale
        rows: List[RateEstimate] = []
        if markovian:
            bd = birth_death_stationary(n, reg.lam, mu)
            rows += rate_from_tail(bd.x_tail(x_grid, b), b, x_grid, "birth-death",
                                   flag=f"truncation<={bd.tail_bound:.1e}", n=n)
        else:
            rows += [_gap(n, b, x, "birth-death", "non-exponential") for x in x_grid]
        if simulate or not markovian:
            model = QueueModel.build(reg, arrival_shape, service)
            st = stationary_sample(model, count=sim_count, spacing=2.0 / mu, seed=sim_seed, keep_trace=False)
            hits = [int(np.count_nonzero(st.X >= x - 1e-12)) for x in x_grid]
            rows += rate_from_counts(hits, st.X.size, b, x_grid, "simulation", n=n)
        for x in x_grid:
            if x in quasipotential and math.isfinite(quasipotential[x]):
                rows.append(RateEstimate(x, float(quasipotential[x]), "quasipotential", flag="discretized", n=n, b_n=b))
            else:
                rows.append(_gap(n, b, x, "quasipotential", "not-computed"))
        # P(X >= x) <= P((Q-n)^+ > r s + 1) with r = x - 2/s
        r_of = {x: x - 2.0 / s for x in x_grid}
        r_vals = sorted({r for r in r_of.values() if r >= 0})
        gg = {}
        if r_vals:
            model = QueueModel.gg_setup(reg, arrival_shape, service)
            for est in gg_supremum_tail(model, r_vals, replications=gg_replications, seed=gg_seed):
                gg[est.r] = est
        for x in x_grid:
            r = r_of[x]
            if r < 0:
                rows.append(_gap(n, b, x, "gg-bound", "below-range"))
                continue
            est = gg[float(r)]
            rate = -math.log(est.ci_high) / (b * b) if est.ci_high > 0 else math.inf
            flag = "rate-lower-bound" + (";truncation" if est.flagged else "")
            low = -math.log(est.ci_high) / (b * b) if est.ci_high > 0 else math.inf
            high = -math.log(est.ci_low) / (b * b) if est.ci_low > 0 else math.inf
            rows.append(RateEstimate(x, rate, "gg-bound", low, high, flag, n, b))
        if arrival_shape.family == "exponential":
            offered = reg.lam / mu
            for x in x_grid:
                k = math.ceil(n + x * s - 1e-9)
                p = float(stats.poisson.sf(k - 1, offered))
                rows.append(RateEstimate(x, max(0.0, -math.log(p)) / (b * b), "infinite-server",
                                         flag="rate-upper-bound", n=n, b_n=b) if p > 0 else
                            _gap(n, b, x, "infinite-server", "underflow"))
        else:
            rows += [_gap(n, b, x, "infinite-server", "non-poisson-arrivals") for x in x_grid]
        return rows

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(cell, n_list))
    else:
        parts = [cell(n) for n in n_list]
    rows = [r for part in parts for r in part]
    order = {s: i for i, s in enumerate(SOURCES)}
    rows.sort(key=lambda r: (r.n, r.x, order.get(r.source, 99)))

    primary = "birth-death" if markovian else "simulation"
    verdict: Dict[str, object] = {"primary_source": primary, "per_x": {}}
    for x in x_grid:
        I = quasipotential.get(x)
        vals = []
        for n in n_list:
            try:
                vals.append(next(r.rate for r in rows if r.n == n and r.x == x and r.source == primary))
            except StopIteration:
                vals.append(math.nan)
        toward = _trend(vals, I) if I is not None and math.isfinite(I) else None
        verdict["per_x"][repr(x)] = {"rates": vals, "I_s": I, "toward_quasipotential": toward}
    flags = [v["toward_quasipotential"] for v in verdict["per_x"].values() if v["toward_quasipotential"] is not None]
    verdict["trend"] = "toward" if flags and all(flags) else ("mixed" if flags else "undetermined")
    return PanelReport(rows, verdict)
