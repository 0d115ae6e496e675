"""Grid solvers for the nonlinear renewal equation and the controlled limit trajectory.

Time grid ``t_i = i dt``, ``i = 0..N``. Controls are piecewise constant on
cells ``[t_j, t_{j+1})``; the Kiefer-type control ``k_dot`` is stored in the
transformed coordinate ``u = F(x)`` on ``M`` equal cells of ``[0, 1]`` and on
time cells of width ``dr = mu dt`` (its time argument is ``mu s``).

The convolution ``int_0^t g(t-s)^+ dF(s)`` is a product trapezoid rule: the
mass ``F(j dt) - F((j-1) dt)`` of each cell is split evenly between its two
endpoints. Only the current point enters implicitly (weight ``p_1/2``), and
that scalar equation is solved exactly, so the scheme still marches forward.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Union

import numpy as np
from scipy.signal import fftconvolve

from .laws import Law, equilibrium_cdf

__all__ = [
    "GridFunction",
    "ControlPair",
    "NonConvergenceError",
    "GridMismatchError",
    "solve_nonlinear_renewal",
    "forward_trajectory",
    "control_cost",
    "start_term",
    "Kernels",
    "build_kernels",
    "DEFAULT_STEPS",
    "DEFAULT_CELLS",
]

DEFAULT_STEPS = 800
DEFAULT_CELLS = 32
_GL_NODES = 16


class NonConvergenceError(RuntimeError):
    def __init__(self, message, residual, iterate=None):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual
        self.iterate = iterate


class GridMismatchError(ValueError):
    pass


@dataclass
class GridFunction:
    """Values on the uniform grid ``0, dt, ..., T``."""

    dt: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError("values must be a nonempty 1-d array")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @classmethod
    def from_callable(cls, fn: Callable, T: float, dt: float) -> "GridFunction":
        n = _steps(T, dt)
        t = dt * np.arange(n + 1)
        return cls(dt, np.asarray(np.broadcast_to(fn(t), t.shape), dtype=float))

    @property
    def steps(self) -> int:
        return self.values.size - 1

    @property
    def T(self) -> float:
        return self.dt * self.steps

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.values.size)

    def at_end(self) -> float:
        return float(self.values[-1])

    def to_csv(self, dest: str, header_comment: Optional[str] = None) -> None:
        with open(dest, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "value"))
            for t, v in zip(self.t, self.values):
                w.writerow((repr(float(t)), repr(float(v))))

    @classmethod
    def from_csv(cls, src: str) -> "GridFunction":
        t, v = _read_columns(src, ("t", "value"))
        if t.size < 2:
            raise ValueError("need at least two grid points")
        dt = float(t[1] - t[0])
        if not np.allclose(np.diff(t), dt, rtol=1e-9, atol=0):
            raise ValueError("grid is not uniform")
        return cls(dt, v)


def _steps(T: float, dt: float) -> int:
    if not (T > 0 and dt > 0):
        raise ValueError("need T > 0 and dt > 0")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise GridMismatchError(f"T={T} is not a multiple of dt={dt}")
    return n


def _read_columns(src, names):
    with open(src, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    head = rows[0]
    if tuple(head[: len(names)]) != tuple(names) and tuple(head) != tuple(names):
        raise ValueError(f"expected columns {names}, found {head}")
    idx = [head.index(n) for n in names]
    data = np.array([[float(r[i]) for i in idx] for r in rows[1:]], dtype=float).reshape(-1, len(names))
    return tuple(data[:, i] for i in range(len(names)))


@dataclass
class ControlPair:
    """Piecewise-constant controls ``w_dot`` (N cells) and ``k_dot`` (M x N cells).

    Each time column of ``k_dot`` is projected onto zero sum over the u-cells
    on construction, the grid form of ``k(0, t) = k(1, t) = 0``.
    """

    w_dot: np.ndarray
    k_dot: np.ndarray
    dt: float
    dr: Optional[float] = None
    project: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.w_dot = np.array(self.w_dot, dtype=float).reshape(-1)
        self.k_dot = np.array(self.k_dot, dtype=float)
        if self.k_dot.ndim == 1 and self.k_dot.size == 0:
            self.k_dot = np.zeros((0, self.w_dot.size))
        if self.k_dot.ndim != 2 or self.k_dot.shape[1] != self.w_dot.size:
            raise GridMismatchError("k_dot must have shape (M, N) with N = len(w_dot)")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.dr is None:
            self.dr = self.dt
        if self.project and self.k_dot.shape[0]:
            self.k_dot = self.k_dot - self.k_dot.mean(axis=0, keepdims=True)

    @classmethod
    def zeros(cls, steps: int, cells: int, dt: float, mu: float = 1.0) -> "ControlPair":
        return cls(np.zeros(steps), np.zeros((cells, steps)), dt, mu * dt)

    @property
    def steps(self) -> int:
        return self.w_dot.size

    @property
    def cells(self) -> int:
        return self.k_dot.shape[0]

    @property
    def du(self) -> float:
        return 1.0 / self.cells if self.cells else 0.0

    @property
    def T(self) -> float:
        return self.dt * self.steps

    def copy(self) -> "ControlPair":
        return ControlPair(self.w_dot.copy(), self.k_dot.copy(), self.dt, self.dr, project=False)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.w_dot)) and np.all(np.isfinite(self.k_dot)))

    def save(self, directory: str, header_comment: Optional[str] = None) -> None:
        os.makedirs(directory, exist_ok=True)
        lead = f"# {header_comment}\n" if header_comment else ""
        with open(os.path.join(directory, "w.csv"), "w", newline="") as fh:
            fh.write(lead)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "value"))
            for j, v in enumerate(self.w_dot):
                w.writerow((repr(j * self.dt), repr(float(v))))
        with open(os.path.join(directory, "k.csv"), "w", newline="") as fh:
            fh.write(lead)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("u", "r", "value"))
            for m in range(self.cells):
                for j in range(self.steps):
                    w.writerow((repr(m * self.du), repr(j * self.dr), repr(float(self.k_dot[m, j]))))

    @classmethod
    def load(cls, directory: str) -> "ControlPair":
        t, w = _read_columns(os.path.join(directory, "w.csv"), ("t", "value"))
        u, r, k = _read_columns(os.path.join(directory, "k.csv"), ("u", "r", "value"))
        n = w.size
        dt = float(t[1] - t[0]) if n > 1 else 1.0
        m = k.size // n if n else 0
        if m * n != k.size:
            raise GridMismatchError("k.csv does not match the w.csv time grid")
        dr = float(r[1] - r[0]) if n > 1 else dt
        return cls(w, k.reshape(m, n), dt, dr, project=False)


def control_cost(controls: ControlPair) -> float:
    """``1/2 (sum w_dot^2 dt + sum k_dot^2 du dr)``; exact for piecewise-constant fields."""
    w = controls.w_dot
    k = controls.k_dot
    return 0.5 * (float(np.dot(w, w)) * controls.dt + float(np.sum(k * k)) * controls.du * controls.dr)


# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True)
class Kernels:
    """Discretization weights for one (law, dt, N, M, sigma, mu) combination.

    ``p[j]``: mass of dF on ``((j-1) dt, j dt]``, j = 0..N+1 (p[0] = 0).
    ``a[d]``: response of the trajectory at ``t_i`` to a unit ``w_dot`` on cell ``i-d``.
    ``B[d, m]``: response to a unit ``k_dot`` on (u-cell m, time cell ``i-d``).
    ``F``, ``F0``: cdf and equilibrium cdf on the grid.
    """

    dt: float
    steps: int
    cells: int
    sigma: float
    mu: float
    p: np.ndarray
    a: np.ndarray
    B: np.ndarray
    F: np.ndarray
    F0: np.ndarray


def _cell_masses(service: Law, dt: float, steps: int) -> np.ndarray:
    F = np.asarray(service.cdf(dt * np.arange(steps + 2)), dtype=float)
    F[0] = 0.0
    p = np.zeros(steps + 2)
    p[1:] = np.diff(F)
    return p


@lru_cache(maxsize=32)
def _kernels_cached(service: Law, dt: float, steps: int, cells: int, sigma: float, mu: float) -> Kernels:
    t = dt * np.arange(steps + 1)
    p = _cell_masses(service, dt, steps)
    F = np.cumsum(p)[: steps + 1]
    F0 = equilibrium_cdf(service, t)
    G = F0 / mu
    a = np.zeros(steps + 1)
    a[1:] = sigma * np.diff(G)
    B = np.zeros((steps + 1, cells))
    if cells:
        du = 1.0 / cells
        lo = du * np.arange(cells)
        x, wq = np.polynomial.legendre.leggauss(_GL_NODES)
        s = t[:-1, None] + 0.5 * dt * (x[None, :] + 1.0)  # (steps, nodes)
        Fs = np.asarray(service.cdf(s), dtype=float)
        cover = np.clip(Fs[:, :, None] - lo[None, None, :], 0.0, du)  # (steps, nodes, cells)
        B[1:] = mu * 0.5 * dt * np.einsum("snm,n->sm", cover, wq)
    for arr in (p, a, B, F, F0):
        arr.setflags(write=False)
    return Kernels(dt, steps, cells, float(sigma), float(mu), p, a, B, F, F0)


def build_kernels(service: Law, dt: float, steps: int, cells: int = DEFAULT_CELLS,
                  sigma: float = 1.0, mu: Optional[float] = None) -> Kernels:
    mu = 1.0 / service.mean if mu is None else float(mu)
    return _kernels_cached(service, float(dt), int(steps), int(cells), float(sigma), mu)


def start_term(kern: Kernels, beta: float, x: float = None, phi=None) -> np.ndarray:
    """``(1-F)x^+ - (1-F0)x^- + phi - beta F0`` on the grid; ``x`` defaults to ``-beta``."""
    x = -beta if x is None else float(x)
    h = (1.0 - kern.F) * max(x, 0.0) - (1.0 - kern.F0) * max(-x, 0.0) - beta * kern.F0
    if phi is not None:
        phi = phi.values if isinstance(phi, GridFunction) else np.asarray(phi, dtype=float)
        if phi.shape != h.shape:
            raise GridMismatchError("phi does not live on the trajectory grid")
        h = h + phi
    return h


def forcing(controls: ControlPair, kern: Kernels) -> np.ndarray:
    """Control-driven part of the trajectory at every grid point (zero at t=0)."""
    n = kern.steps
    out = np.zeros(n + 1)
    if kern.sigma != 0.0 and np.any(controls.w_dot):
        out[1:] += fftconvolve(kern.a[1:], controls.w_dot)[:n]
    if kern.cells and np.any(controls.k_dot):
        conv = fftconvolve(kern.B[1:], controls.k_dot.T, axes=0)[:n]
        out[1:] += conv.sum(axis=1)
    return out


def trapezoid_weights(p: np.ndarray):
    """Split each cell mass ``p_j`` evenly between its two endpoints.

    Returns ``(w0, wt)`` with ``w0 = p_1/2`` (weight of the current point) and
    ``wt[l] = (p_l + p_{l+1})/2`` for lags ``l >= 1``; the oldest point of a sum
    over ``i`` lags carries ``p_i/2`` instead, handled by the caller.
    """
    wt = np.zeros(p.size - 1)
    wt[1:] = 0.5 * (p[1:-1] + p[2:])
    return 0.5 * p[1], wt


def _scalar_solve(c: float, w0: float, pos, dpos):
    # q = c + w0 pos(q), w0 < 1
    if pos is None:
        return c / (1.0 - w0) if c > 0 else c
    q = c + w0 * pos(c)
    for _ in range(50):
        r = q - c - w0 * pos(q)
        step = r / (1.0 - w0 * dpos(q))
        q -= step
        if abs(step) <= 1e-15 * max(1.0, abs(q)):
            break
    return q


def march(base: np.ndarray, p: np.ndarray, positive: Callable = None,
          dpositive: Callable = None) -> np.ndarray:
    """Solve ``q_i = base_i + sum_{j=1..i} p_j (pos(q_{i-j+1}) + pos(q_{i-j}))/2`` forward.

    ``p`` holds the cell masses ``p_0 = 0, p_1, ..., p_{N+1}``. The current
    point enters with weight ``p_1/2`` and is solved for exactly (max) or by
    scalar Newton (smooth ``positive`` with derivative ``dpositive``).
    """
    pos = positive or (lambda v: v if v > 0 else 0.0)
    n = base.size - 1
    if p.size < n + 2:
        raise GridMismatchError("need cell masses up to lag N+1")
    w0, wt = trapezoid_weights(p[: n + 2])
    wr = wt[1: n + 1][::-1]  # wr[n-1-k] = wt[k+1]
    q = np.empty(n + 1)
    qp = np.empty(n + 1)
    q[0] = base[0]
    qp[0] = pos(q[0])
    for i in range(1, n + 1):
        c = base[i] + float(np.dot(qp[:i], wr[n - i:])) - 0.5 * p[i + 1] * qp[0]
        qi = _scalar_solve(c, w0, positive, dpositive)
        q[i] = qi
        qp[i] = pos(qi)
    return q


def convolve_positive(v: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Trapezoid ``int_0^t v(t-s) dF(s)`` on the grid for a given path ``v``."""
    n = v.size - 1
    w0, wt = trapezoid_weights(p[: n + 2])
    out = w0 * v
    out[0] = 0.0
    if n:
        out[1:] += np.convolve(v, wt[1: n + 1])[:n] - 0.5 * p[2: n + 2] * v[0]
    return out


# ---------------------------------------------------------------------------
# public solvers


def solve_nonlinear_renewal(f: GridFunction, service: Law, T: Optional[float] = None,
                            dt: Optional[float] = None, method: str = "march",
                            initial: Optional[np.ndarray] = None, tol: float = 1e-10,
                            max_iter: int = 10_000) -> GridFunction:
    """Solve ``g(t) = f(t) + int_0^t g(t-s)^+ dF(s)`` on the grid of ``f``.

    ``method="march"`` exploits causality and is exact for the discrete
    equation in one sweep; ``method="picard"`` iterates the full map from
    ``initial`` (default ``f``) until successive iterates differ by less than
    ``tol`` in sup norm.
    """
    if dt is not None and abs(dt - f.dt) > 1e-12 * f.dt:
        raise GridMismatchError("dt does not match the grid of f")
    if T is not None and abs(T - f.T) > 1e-9 * max(T, 1.0):
        raise GridMismatchError("T does not match the grid of f")
    p = _cell_masses(service, f.dt, f.steps)
    if method == "march":
        return GridFunction(f.dt, march(f.values, p))
    if method != "picard":
        raise ValueError("method must be 'march' or 'picard'")
    g = f.values.copy() if initial is None else np.asarray(initial, dtype=float).copy()
    if g.shape != f.values.shape:
        raise GridMismatchError("initial guess has the wrong length")
    resid = math.inf
    for _ in range(max_iter):
        nxt = f.values + convolve_positive(np.maximum(g, 0.0), p)
        resid = float(np.max(np.abs(nxt - g)))
        g = nxt
        if resid < tol:
            return GridFunction(f.dt, g)
    raise NonConvergenceError("Picard iteration did not converge", resid, GridFunction(f.dt, g))


def forward_trajectory(controls: ControlPair, service: Law, sigma: float, beta: float,
                       mu: Optional[float] = None, x0: Optional[float] = None,
                       phi: Union[GridFunction, np.ndarray, None] = None,
                       T: Optional[float] = None, dt: Optional[float] = None,
                       frozen_positive: Optional[np.ndarray] = None,
                       kernels: Optional[Kernels] = None) -> GridFunction:
    """Trajectory driven by ``controls`` from the start ``x0`` (default ``-beta``).

    With ``frozen_positive`` the convolution uses that path's positive part
    instead of the solution's own, so the map becomes affine in the controls.
    """
    if not controls.is_finite():
        raise ValueError("controls contain non-finite values")
    mu = 1.0 / service.mean if mu is None else float(mu)
    if dt is not None and abs(dt - controls.dt) > 1e-12 * controls.dt:
        raise GridMismatchError("dt does not match the control grid")
    if T is not None and abs(T - controls.T) > 1e-9 * max(T, 1.0):
        raise GridMismatchError("T does not match the control grid")
    if abs(controls.dr - mu * controls.dt) > 1e-12 * controls.dr:
        raise GridMismatchError("k_dot time cells must have width mu*dt")
    kern = kernels or build_kernels(service, controls.dt, controls.steps, controls.cells, sigma, mu)
    if kern.steps != controls.steps or kern.cells != controls.cells:
        raise GridMismatchError("kernels and controls disagree on the grid")
    base = start_term(kern, beta, x0, phi) + forcing(controls, kern)
    if frozen_positive is not None:
        fp = np.asarray(frozen_positive, dtype=float)
        if fp.shape != base.shape:
            raise GridMismatchError("frozen path has the wrong length")
        return GridFunction(controls.dt, base + convolve_positive(np.maximum(fp, 0.0), kern.p))
    return GridFunction(controls.dt, march(base, kern.p))
