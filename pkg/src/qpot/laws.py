"""Service and interarrival laws, the equilibrium (stationary-excess) cdf and
the scaling regime with its moment-condition checks.

Every law family carries closed-form log-moments so that moments of order
b_n**2 can be evaluated without overflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import integrate, special, stats

__all__ = [
    "Law",
    "Exponential",
    "Gamma",
    "Uniform",
    "Deterministic",
    "Lognormal",
    "make_law",
    "ArrivalLaw",
    "ScalingRegime",
    "equilibrium_cdf",
    "equilibrium_sample",
    "check_regime_conditions",
    "DEFAULT_CEILING",
]

DEFAULT_CEILING = 1e3
_SF_TRUNCATION = 1e-12
_QUAD_ABS_TOL = 1e-10
_INVERSION_TOL = 1e-10


class Law:
    """Base class of a positive random variable with analytic moments.

    Subclasses implement ``cdf``, ``sample``, ``mean``, ``log_moment`` and
    ``partial_expectation`` (``E[eta; eta <= x]``).
    """

    family: str = "abstract"
    continuous: bool = True

    # -- distribution ---------------------------------------------------
    def cdf(self, x):
        raise NotImplementedError

    def sf(self, x):
        return 1.0 - self.cdf(x)

    def sample(self, rng: np.random.Generator, size=None):
        raise NotImplementedError

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def rate(self) -> float:
        return 1.0 / self.mean

    def log_moment(self, p: float) -> float:
        """Return ``ln E eta**p`` for real ``p > 0``."""
        raise NotImplementedError

    def moment(self, p: float) -> float:
        return math.exp(self.log_moment(p))

    @property
    def scv(self) -> float:
        """Squared coefficient of variation."""
        return self.moment(2) / self.mean**2 - 1.0

    def partial_expectation(self, x):
        raise NotImplementedError

    def quantile_upper(self, tail: float = _SF_TRUNCATION) -> float:
        """Point beyond which the survival function is below ``tail``."""
        raise NotImplementedError

    def scaled(self, c: float) -> "Law":
        """Law of ``c * eta``."""
        raise NotImplementedError

    # -- equilibrium law ------------------------------------------------
    def equilibrium_cdf_exact(self, x):
        """Closed form of mu * int_0^x (1 - F(y)) dy.

        Uses ``int_0^x sf = x sf(x) + E[eta; eta <= x]``.
        """
        x = np.asarray(x, dtype=float)
        val = (np.maximum(x, 0.0) * self.sf(np.maximum(x, 0.0)) + self.partial_expectation(np.maximum(x, 0.0))) / self.mean
        return np.clip(val, 0.0, 1.0)

    def to_dict(self) -> Dict[str, object]:
        d = {"family": self.family}
        d.update({k: float(v) for k, v in self.__dict__.items()})
        return d


@dataclass(frozen=True)
class Exponential(Law):
    rate: float = 1.0
    family = "exponential"

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("exponential rate must be positive")

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, -np.expm1(-self.rate * np.maximum(x, 0.0)), 0.0)

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x > 0, np.exp(-self.rate * np.maximum(x, 0.0)), 1.0)

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)

    @property
    def mean(self):
        return 1.0 / self.rate

    def log_moment(self, p):
        return special.gammaln(p + 1.0) - p * math.log(self.rate)

    def partial_expectation(self, x):
        x = np.asarray(x, dtype=float)
        r = self.rate
        return (1.0 - np.exp(-r * x) * (1.0 + r * x)) / r

    def quantile_upper(self, tail=_SF_TRUNCATION):
        return -math.log(tail) / self.rate

    def scaled(self, c):
        return Exponential(self.rate / c)

    def to_dict(self):
        return {"family": self.family, "rate": self.rate}


@dataclass(frozen=True)
class Gamma(Law):
    shape: float = 1.0
    scale: float = 1.0
    family = "gamma"

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("gamma shape and scale must be positive")

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return special.gammainc(self.shape, np.maximum(x, 0.0) / self.scale)

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        return special.gammaincc(self.shape, np.maximum(x, 0.0) / self.scale)

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, self.scale, size)

    @property
    def mean(self):
        return self.shape * self.scale

    def log_moment(self, p):
        return (special.gammaln(self.shape + p) - special.gammaln(self.shape)
                + p * math.log(self.scale))

    def partial_expectation(self, x):
        x = np.asarray(x, dtype=float)
        return self.mean * special.gammainc(self.shape + 1.0, np.maximum(x, 0.0) / self.scale)

    def quantile_upper(self, tail=_SF_TRUNCATION):
        return float(stats.gamma.isf(tail, self.shape, scale=self.scale))

    def scaled(self, c):
        return Gamma(self.shape, self.scale * c)


@dataclass(frozen=True)
class Uniform(Law):
    low: float = 0.0
    high: float = 1.0
    family = "uniform"

    def __post_init__(self):
        if not (0.0 <= self.low < self.high):
            raise ValueError("uniform needs 0 <= low < high")

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip((x - self.low) / (self.high - self.low), 0.0, 1.0)

    def sample(self, rng, size=None):
        return rng.uniform(self.low, self.high, size)

    @property
    def mean(self):
        return 0.5 * (self.low + self.high)

    def log_moment(self, p):
        a, b = self.low, self.high
        # ln[(b^{p+1} - a^{p+1}) / ((p+1)(b-a))] without overflow
        head = (p + 1.0) * math.log(b)
        if a > 0:
            head += math.log1p(-math.exp((p + 1.0) * (math.log(a) - math.log(b))))
        return head - math.log(p + 1.0) - math.log(b - a)

    def partial_expectation(self, x):
        x = np.clip(np.asarray(x, dtype=float), self.low, self.high)
        return (x**2 - self.low**2) / (2.0 * (self.high - self.low))

    def quantile_upper(self, tail=_SF_TRUNCATION):
        return self.high

    def scaled(self, c):
        return Uniform(self.low * c, self.high * c)


@dataclass(frozen=True)
class Deterministic(Law):
    value: float = 1.0
    family = "deterministic"
    continuous = False

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError("deterministic value must be positive")

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= self.value, 1.0, 0.0)

    def sample(self, rng, size=None):
        if size is None:
            return float(self.value)
        return np.full(size, float(self.value))

    @property
    def mean(self):
        return self.value

    def log_moment(self, p):
        return p * math.log(self.value)

    def partial_expectation(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= self.value, self.value, 0.0)

    def quantile_upper(self, tail=_SF_TRUNCATION):
        return self.value

    def scaled(self, c):
        return Deterministic(self.value * c)


@dataclass(frozen=True)
class Lognormal(Law):
    mu_log: float = 0.0
    sigma_log: float = 1.0
    family = "lognormal"

    def __post_init__(self):
        if not self.sigma_log > 0:
            raise ValueError("lognormal sigma_log must be positive")

    @classmethod
    def with_mean(cls, mean: float, sigma_log: float) -> "Lognormal":
        return cls(math.log(mean) - 0.5 * sigma_log**2, sigma_log)

    def _z(self, x):
        with np.errstate(divide="ignore"):
            return (np.log(np.maximum(x, 0.0)) - self.mu_log) / self.sigma_log

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return special.ndtr(self._z(x))

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        return special.ndtr(-self._z(x))

    def sample(self, rng, size=None):
        return rng.lognormal(self.mu_log, self.sigma_log, size)

    @property
    def mean(self):
        return math.exp(self.mu_log + 0.5 * self.sigma_log**2)

    def log_moment(self, p):
        return p * self.mu_log + 0.5 * p * p * self.sigma_log**2

    def partial_expectation(self, x):
        x = np.asarray(x, dtype=float)
        return self.mean * special.ndtr(self._z(x) - self.sigma_log)

    def quantile_upper(self, tail=_SF_TRUNCATION):
        return float(math.exp(self.mu_log + self.sigma_log * special.ndtri(1.0 - tail)))

    def scaled(self, c):
        return Lognormal(self.mu_log + math.log(c), self.sigma_log)


_FAMILIES = {
    "exponential": lambda p: Exponential(p.get("rate", 1.0 / p["mean"] if "mean" in p else 1.0)),
    "gamma": lambda p: Gamma(p["shape"], p.get("scale", p.get("mean", p["shape"]) / p["shape"])),
    "uniform": lambda p: Uniform(p["low"], p["high"]),
    "deterministic": lambda p: Deterministic(p.get("value", p.get("mean", 1.0))),
    "lognormal": lambda p: (Lognormal.with_mean(p["mean"], p["sigma_log"]) if "mean" in p
                            else Lognormal(p["mu_log"], p["sigma_log"])),
}

_ALLOWED_KEYS = {
    "exponential": {"rate", "mean"},
    "gamma": {"shape", "scale", "mean"},
    "uniform": {"low", "high"},
    "deterministic": {"value", "mean"},
    "lognormal": {"mu_log", "sigma_log", "mean"},
}


def make_law(family: str, **params) -> Law:
    """Build a law from a ``{family, parameters}`` declaration."""
    if family not in _FAMILIES:
        raise ValueError(f"unknown law family {family!r}; choose from {sorted(_FAMILIES)}")
    extra = set(params) - _ALLOWED_KEYS[family]
    if extra:
        raise ValueError(f"unknown parameters for {family}: {sorted(extra)}")
    try:
        return _FAMILIES[family](params)
    except KeyError as exc:
        raise ValueError(f"missing parameter {exc.args[0]!r} for {family}") from None


@dataclass(frozen=True)
class ArrivalLaw:
    """Renewal arrivals at ``rate`` whose interarrival shape has mean one.

    ``shape`` is rescaled to unit mean on construction, so the actual
    interarrival time is ``shape_sample / rate``.
    """

    shape: Law
    rate: float
    spread_out: bool = True

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("arrival rate must be positive")
        if abs(self.shape.mean - 1.0) > 1e-12:
            object.__setattr__(self, "shape", self.shape.scaled(1.0 / self.shape.mean))

    @property
    def interarrival(self) -> Law:
        return self.shape.scaled(1.0 / self.rate)

    def sigma(self, mu: float) -> float:
        """Diffusion scale of the arrival LDP, ``sqrt(mu * scv)``."""
        return math.sqrt(mu * self.shape.scv)

    def sample_normalized(self, rng, size=None):
        return self.shape.sample(rng, size)


@dataclass(frozen=True)
class ScalingRegime:
    """Server count ``n`` with moderate-deviation scale ``b_n`` and drift ``beta``.

    The load is fixed at construction by ``(sqrt(n)/b_n)(1 - rho_n) = beta``.
    """

    n: int
    b_n: float
    beta: float
    mu: float = 1.0
    rho: float = field(init=False)
    lam: float = field(init=False)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if not self.b_n > 0:
            raise ValueError("b_n must be positive")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        rho = 1.0 - self.beta * self.b_n / math.sqrt(self.n)
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "lam", self.n * self.mu * rho)

    @classmethod
    def from_load(cls, n: int, rho: float, mu: float = 1.0, b_n: Optional[float] = None) -> "ScalingRegime":
        """Regime with a given traffic intensity; ``b_n`` defaults to ``n**0.1``."""
        b = float(n) ** 0.1 if b_n is None else b_n
        return cls(n, b, math.sqrt(n) * (1.0 - rho) / b, mu)

    @classmethod
    def from_power(cls, n: int, beta: float, mu: float = 1.0, eps: float = 0.1) -> "ScalingRegime":
        return cls(n, float(n) ** eps, beta, mu)

    @property
    def scale(self) -> float:
        """``b_n * sqrt(n)``, the count-to-X conversion factor."""
        return self.b_n * math.sqrt(self.n)

    def x_of(self, q):
        return (np.asarray(q, dtype=float) - self.n) / self.scale

    def q_of(self, x):
        return self.n + np.asarray(x, dtype=float) * self.scale

    def stable(self) -> bool:
        return 0.0 < self.rho < 1.0


# ---------------------------------------------------------------------------
# equilibrium cdf


def equilibrium_cdf(service: Law, x):
    """Stationary-excess cdf ``mu * int_0^x (1 - F(y)) dy`` by adaptive quadrature.

    Accepts a scalar or an array; the array is integrated piecewise between
    sorted abscissae so each interval is visited once.
    """
    xa = np.asarray(x, dtype=float)
    if np.any(xa < 0) or np.any(np.isnan(xa)):
        raise ValueError("equilibrium_cdf needs x >= 0")
    flat = xa.ravel()
    order = np.argsort(flat, kind="stable")
    upper = service.quantile_upper(_SF_TRUNCATION)
    kinks = [service.value] if isinstance(service, Deterministic) else None

    def sf(y):
        return float(service.sf(y))

    out = np.empty_like(flat)
    acc = 0.0
    prev = 0.0
    for idx in order:
        xi = min(flat[idx], upper)
        if xi > prev:
            pts = [k for k in kinks if prev < k < xi] if kinks else None
            val, _ = integrate.quad(sf, prev, xi, epsabs=_QUAD_ABS_TOL, epsrel=0.0,
                                    limit=200, points=pts or None)
            acc += val
            prev = xi
        out[idx] = acc
    res = np.clip(out / service.mean, 0.0, 1.0).reshape(xa.shape)
    # enforce monotonicity against quadrature noise
    if res.ndim and res.size > 1:
        srt = np.maximum.accumulate(res.ravel()[order])
        tmp = np.empty_like(srt)
        tmp[order] = srt
        res = tmp.reshape(xa.shape)
    return float(res) if np.ndim(x) == 0 else res


def equilibrium_sample(service: Law, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draws from the stationary-excess law by bisection on its cdf."""
    u = rng.random(size)
    lo = np.zeros(size)
    hi = np.full(size, service.quantile_upper(_SF_TRUNCATION))
    # the excess law has support inside [0, upper]; grow upper for safety
    while np.any(service.equilibrium_cdf_exact(hi) < u):
        hi = hi * 2.0
    while True:
        mid = 0.5 * (lo + hi)
        below = service.equilibrium_cdf_exact(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) < _INVERSION_TOL:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# regime conditions


@dataclass
class ConditionReport:
    name: str
    log_value: Optional[float]
    ceiling: float
    verdict: str  # "pass" | "warn" | "fail" | "cannot evaluate"
    note: str = ""

    @property
    def value(self) -> Optional[float]:
        if self.log_value is None:
            return None
        return math.exp(self.log_value) if self.log_value < 700 else math.inf

    def to_dict(self):
        return {"name": self.name, "value": self.value, "log_value": self.log_value,
                "ceiling": self.ceiling, "verdict": self.verdict, "note": self.note}


def _verdict(log_value: float, ceiling: float) -> str:
    return "pass" if log_value <= math.log(ceiling) else "warn"


def check_regime_conditions(regime: ScalingRegime, arrival: ArrivalLaw, service: Law,
                            ceilings: Optional[Dict[str, float]] = None) -> List[ConditionReport]:
    """Finite-n surrogates of the moment and growth conditions, evaluated in logs.

    Returns one :class:`ConditionReport` per condition. Ceilings default to
    ``DEFAULT_CEILING`` and can be overridden per name. Verdicts are advisory:
    the asymptotic conditions are statements about ``sup_n``.
    """
    ceilings = dict(ceilings or {})
    n, b = regime.n, regime.b_n
    b2 = b * b
    ln_n, ln_b = math.log(n), math.log(b)
    ln_lam = math.log(regime.lam) if regime.lam > 0 else None
    out: List[ConditionReport] = []

    def ceil(name):
        return float(ceilings.get(name, DEFAULT_CEILING))

    # structural requirements: hard pass/fail
    for name, ok, lv in (
        ("beta > 0", regime.beta > 0, None),
        ("rho_n < 1", 0.0 < regime.rho < 1.0, None),
        ("b_n > 1", b > 1.0, ln_b),
        ("b_n / sqrt(n) < 1", b / math.sqrt(n) < 1.0, ln_b - 0.5 * ln_n),
    ):
        out.append(ConditionReport(name, lv, math.nan, "pass" if ok else "fail"))

    def xi_log_moment(p):
        # xi_n = xi_hat / lam_n
        if ln_lam is None:
            raise ValueError("arrival rate is zero")
        return arrival.shape.log_moment(p) - p * ln_lam

    moment_terms = (
        ("E (n xi_n)^2", lambda: xi_log_moment(2.0) + 2.0 * ln_n),
        ("sqrt(n)/b_n (E xi_n^(b^2+1))^(1/b^2)", lambda: 0.5 * ln_n - ln_b + xi_log_moment(b2 + 1.0) / b2),
        ("b_n sqrt(n) (E xi_n^(b^2))^(1/b^2)", lambda: ln_b + 0.5 * ln_n + xi_log_moment(b2) / b2),
        ("b_n/sqrt(n) (E eta^(b^2+1))^(1/b^2)", lambda: ln_b - 0.5 * ln_n + service.log_moment(b2 + 1.0) / b2),
    )
    for name, fn in moment_terms:
        try:
            lv = float(fn())
        except (NotImplementedError, ValueError) as exc:
            out.append(ConditionReport(name, None, ceil(name), "cannot evaluate", str(exc) or type(exc).__name__))
            continue
        if not math.isfinite(lv):
            out.append(ConditionReport(name, None, ceil(name), "cannot evaluate", "non-finite moment"))
            continue
        out.append(ConditionReport(name, lv, ceil(name), _verdict(lv, ceil(name))))

    for name, lv in (("n^(1/b^2)", ln_n / b2), ("b_n^6 / n", 6.0 * ln_b - ln_n)):
        out.append(ConditionReport(name, lv, ceil(name), _verdict(lv, ceil(name))))
    return out


def normalized_arrival_condition(n: int, b_n: float, shape: Law) -> float:
    """``(1/(b_n sqrt(n))) (E xi_hat^(b^2+1))^(1/b^2)`` for the unit-mean shape."""
    b2 = b_n * b_n
    return math.exp(-math.log(b_n) - 0.5 * math.log(n) + shape.log_moment(b2 + 1.0) / b2)


def law_from_config(decl: Dict[str, object]) -> Law:
    decl = dict(decl)
    family = decl.pop("family", None)
    if family is None:
        raise ValueError("law declaration needs a 'family'")
    return make_law(str(family), **decl)


def grid_sf(law: Law, grid: Sequence[float]) -> np.ndarray:
    return np.asarray(law.sf(np.asarray(grid, dtype=float)), dtype=float)
