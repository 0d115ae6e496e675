"""Stationary deviation function by finite-horizon optimal control.

``I(x)`` is approximated by the smallest quadratic control cost that steers
the limit trajectory from the equilibrium ``-beta`` to ``x`` at time ``T``,
minimized over a sweep of horizons. Each finite-horizon problem is solved by
a penalty method: the terminal miss ``rho (q(T) - x)^2`` is added to the cost,
``q^+`` is replaced by a softplus surrogate, and ``rho`` grows while the
softplus width shrinks. The last iterate is projected back onto the exact
constraint with the unsmoothed ``q^+`` before its cost is reported.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.signal import fftconvolve

from .laws import Law
from .limit_solver import (DEFAULT_CELLS, DEFAULT_STEPS, ControlPair, GridMismatchError, Kernels,
                           build_kernels, control_cost, forcing, march, start_term, trapezoid_weights)

__all__ = [
    "VariationalProblem",
    "FiniteHorizonResult",
    "QuasipotentialResult",
    "ContinuationFailure",
    "minimize_finite_horizon",
    "quasipotential_curve",
    "relax_then_hold_initializer",
    "penalized_objective",
    "terminal_value",
    "write_curve_csv",
    "curve_summary",
    "DEFAULT_T_GRID",
]

DEFAULT_PENALTIES = tuple(10.0 ** k for k in range(1, 7))
DEFAULT_SMOOTHING = tuple(float(v) for v in np.geomspace(1e-1, 1e-4, 6))
DEFAULT_T_GRID = (2.0, 4.0, 8.0, 16.0, 32.0)
FEASIBILITY_TOL = 1e-4


class ContinuationFailure(RuntimeError):
    """Terminal residual could not be driven below tolerance."""

    def __init__(self, message, residual, best=None):
        super().__init__(f"{message} (terminal residual {residual:.3e})")
        self.residual = residual
        self.best = best


@dataclass(frozen=True)
class VariationalProblem:
    x: float
    T: float
    service: Law
    sigma: float
    beta: float
    mu: Optional[float] = None
    dt: Optional[float] = None
    cells: int = DEFAULT_CELLS
    penalties: Sequence[float] = DEFAULT_PENALTIES
    smoothing: Sequence[float] = DEFAULT_SMOOTHING
    max_iter: int = 500
    gtol: float = 1e-8

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError("T must be positive")
        if not math.isfinite(self.x):
            raise ValueError("x must be finite")
        if not (self.beta > 0 and self.sigma >= 0):
            raise ValueError("need beta > 0 and sigma >= 0")
        if self.cells < 0:
            raise ValueError("cells must be nonnegative")
        pen = tuple(float(v) for v in self.penalties)
        sm = tuple(float(v) for v in self.smoothing)
        if not pen or any(b <= a for a, b in zip(pen, pen[1:])) or pen[0] <= 0:
            raise ValueError("penalty weights must be positive and strictly increasing")
        if len(sm) != len(pen) or any(b >= a for a, b in zip(sm, sm[1:])) or sm[-1] <= 0:
            raise ValueError("smoothing schedule must match the penalties and decrease strictly to a positive floor")
        object.__setattr__(self, "penalties", pen)
        object.__setattr__(self, "smoothing", sm)
        if self.mu is None:
            object.__setattr__(self, "mu", 1.0 / self.service.mean)
        if self.dt is None:
            object.__setattr__(self, "dt", self.T / DEFAULT_STEPS)
        n = int(round(self.T / self.dt))
        if n < 1 or abs(n * self.dt - self.T) > 1e-9 * self.T:
            raise GridMismatchError("T must be a multiple of dt")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    def kernels(self) -> Kernels:
        return build_kernels(self.service, self.dt, self.steps, self.cells, self.sigma, self.mu)

    def zero_controls(self) -> ControlPair:
        return ControlPair.zeros(self.steps, self.cells, self.dt, self.mu)


@dataclass
class FiniteHorizonResult:
    J: float
    controls: ControlPair
    diagnostics: Dict = field(default_factory=dict)


@dataclass
class QuasipotentialResult:
    x: float
    T_grid: np.ndarray
    J: np.ndarray
    controls: List[Optional[ControlPair]]
    diagnostics: List[Dict]
    error: Optional[str] = None

    @property
    def I_s(self) -> float:
        finite = self.J[np.isfinite(self.J)]
        return float(finite.min()) if finite.size else math.inf

    @property
    def argmin_T(self) -> Optional[float]:
        if not np.any(np.isfinite(self.J)):
            return None
        return float(self.T_grid[int(np.nanargmin(np.where(np.isfinite(self.J), self.J, np.nan)))])

    def monotone(self, slack: float = 1e-6) -> bool:
        J = self.J[np.isfinite(self.J)]
        return bool(np.all(np.diff(J) <= slack))


# ---------------------------------------------------------------------------
# smoothed forward map and its adjoint


def _softplus(eps):
    def s(v):
        if v > 0:
            return v + eps * math.log1p(math.exp(-v / eps))
        return eps * math.log1p(math.exp(v / eps))

    def ds(v):
        if v >= 0:
            return 1.0 / (1.0 + math.exp(-v / eps))
        e = math.exp(v / eps)
        return e / (1.0 + e)

    return s, ds


def _exact_pos():
    return (lambda v: v if v > 0 else 0.0), (lambda v: 1.0 if v > 0 else 0.0)


def _trajectory(controls: ControlPair, prob: VariationalProblem, kern: Kernels, eps: Optional[float]):
    base = start_term(kern, prob.beta) + forcing(controls, kern)
    if eps is None:
        return march(base, kern.p), _exact_pos()
    s, ds = _softplus(eps)
    return march(base, kern.p, s, ds), (s, ds)


def _terminal_adjoint(q: np.ndarray, kern: Kernels, ds, seed: float = 1.0) -> np.ndarray:
    """Sensitivity of ``q_N`` (times ``seed``) to each ``base_i``, i >= 1."""
    n = q.size - 1
    w0, wt = trapezoid_weights(kern.p[: n + 2])
    lam = np.zeros(n + 1)
    for i in range(n, 0, -1):
        d = ds(q[i])
        rhs = seed if i == n else 0.0
        if i < n:
            rhs += d * float(np.dot(lam[i + 1:], wt[1: n - i + 1]))
        lam[i] = rhs / (1.0 - w0 * d)
    return lam


def _base_to_controls(lam: np.ndarray, kern: Kernels):
    n = lam.size - 1
    lr = lam[1:][::-1]
    gw = np.zeros(n)
    if kern.sigma != 0.0:
        gw = fftconvolve(lr, kern.a[1:])[:n][::-1]
    gk = np.zeros((kern.cells, n))
    if kern.cells:
        gk = fftconvolve(lr[:, None], kern.B[1:], axes=0)[:n][::-1].T
    return gw, gk


def terminal_value(controls: ControlPair, prob: VariationalProblem, eps: Optional[float] = None) -> float:
    q, _ = _trajectory(controls, prob, prob.kernels(), eps)
    return float(q[-1])


def penalized_objective(controls: ControlPair, prob: VariationalProblem, rho: float,
                        eps: Optional[float]):
    """Value and gradient of ``cost + rho (q(T) - x)^2`` with softplus width ``eps``.

    The gradient is returned as a :class:`ControlPair` in the native
    (unscaled) coordinates, projected onto the zero-sum subspace for ``k_dot``.
    ``eps=None`` uses the exact positive part (a subgradient at kinks).
    """
    kern = prob.kernels()
    q, (_, ds) = _trajectory(controls, prob, kern, eps)
    miss = q[-1] - prob.x
    val = control_cost(controls) + rho * miss * miss
    lam = _terminal_adjoint(q, kern, ds, 2.0 * rho * miss)
    gw, gk = _base_to_controls(lam, kern)
    gw = gw + controls.w_dot * controls.dt
    gk = gk + controls.k_dot * controls.du * controls.dr
    if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gk)) and math.isfinite(val)):
        raise FloatingPointError("non-finite objective or gradient")
    return val, ControlPair(gw, gk, controls.dt, controls.dr)


# ---------------------------------------------------------------------------
# optimizer


class _Whitened:
    """Coordinates in which the control cost is ``|z|^2 / 2``."""

    def __init__(self, prob: VariationalProblem):
        self.prob = prob
        self.n = prob.steps
        self.m = prob.cells
        self.sw = math.sqrt(prob.dt)
        self.dr = prob.mu * prob.dt
        self.sk = math.sqrt(self.dr / self.m) if self.m else 1.0

    def to_z(self, c: ControlPair) -> np.ndarray:
        return np.concatenate([c.w_dot * self.sw, (c.k_dot * self.sk).ravel()])

    def to_controls(self, z: np.ndarray) -> ControlPair:
        w = z[: self.n] / self.sw
        k = z[self.n:].reshape(self.m, self.n) / self.sk
        return ControlPair(w, k, self.prob.dt, self.dr)

    def grad_to_z(self, g: ControlPair) -> np.ndarray:
        return np.concatenate([g.w_dot / self.sw, (g.k_dot / self.sk).ravel()])


def _project(controls: ControlPair, prob: VariationalProblem, tol: float = 1e-12, max_iter: int = 60):
    """Minimum-cost-norm Newton steps onto ``q(T) = x`` with the exact ``q^+``."""
    kern = prob.kernels()
    wh = _Whitened(prob)
    z = wh.to_z(controls)
    best = (math.inf, controls)
    for _ in range(max_iter):
        c = wh.to_controls(z)
        q, (_, ds) = _trajectory(c, prob, kern, None)
        miss = float(q[-1] - prob.x)
        if abs(miss) < best[0]:
            best = (abs(miss), c)
        if abs(miss) <= tol:
            break
        lam = _terminal_adjoint(q, kern, ds)
        gw, gk = _base_to_controls(lam, kern)
        g = wh.grad_to_z(ControlPair(gw, gk, prob.dt, wh.dr))
        gg = float(np.dot(g, g))
        if gg == 0.0:
            break
        step = -miss / gg
        # damp when the kink structure changes under a full step
        for _ls in range(30):
            trial = wh.to_controls(z + step * g)
            if abs(terminal_value(trial, prob) - prob.x) < abs(miss):
                break
            step *= 0.5
        z = z + step * g
    return best[1], best[0]


def relax_then_hold_initializer(x: float, T: float, prob: VariationalProblem) -> ControlPair:
    """Zero control until ``T - 1``, then a constant ``w_dot`` on the last unit of time.

    The ramp height is chosen so that the trajectory with the ``q^+`` feedback
    switched off ends at ``x``; it is therefore linear in ``x + beta``.
    """
    n = int(round(T / prob.dt))
    cells = prob.cells
    c = ControlPair.zeros(n, cells, prob.dt, prob.mu)
    if x == -prob.beta or prob.sigma == 0.0:
        return c
    kern = build_kernels(prob.service, prob.dt, n, cells, prob.sigma, prob.mu)
    first = max(0, n - int(round(1.0 / prob.dt)))
    gain = float(kern.a[1: n - first + 1].sum())
    c.w_dot[first:] = (x + prob.beta) / gain
    return c


def minimize_finite_horizon(problem: VariationalProblem, initial: Optional[ControlPair] = None) -> FiniteHorizonResult:
    """Penalty continuation with L-BFGS inner solves, then exact projection.

    Returns the cost of the projected (feasible) controls. Raises
    :class:`ContinuationFailure` when the terminal residual cannot be brought
    under the feasibility tolerance.
    """
    prob = problem
    wh = _Whitened(prob)
    c0 = initial if initial is not None else relax_then_hold_initializer(prob.x, prob.T, prob)
    if c0.steps != prob.steps or c0.cells != prob.cells:
        raise GridMismatchError("initial controls do not match the problem grid")
    diag: Dict = {"stages": [], "iterations": 0}
    # already feasible at zero cost: nothing to optimize
    if control_cost(c0) == 0.0 and abs(terminal_value(c0, prob) - prob.x) < FEASIBILITY_TOL:
        diag.update(terminal_residual=abs(terminal_value(c0, prob) - prob.x), grad_norm=0.0)
        return FiniteHorizonResult(0.0, c0, diag)

    best_cost, best_c, best_res = math.inf, None, math.inf
    init_res = abs(terminal_value(c0, prob) - prob.x)
    if init_res < FEASIBILITY_TOL:
        best_cost, best_c, best_res = control_cost(c0), c0, init_res

    z = wh.to_z(c0)
    grad_norm = math.nan
    for rho, eps in zip(prob.penalties, prob.smoothing):
        def fun(zz, rho=rho, eps=eps):
            val, g = penalized_objective(wh.to_controls(zz), prob, rho, eps)
            return val, wh.grad_to_z(g)
        res = optimize.minimize(fun, z, jac=True, method="L-BFGS-B",
                                options={"maxiter": prob.max_iter, "gtol": prob.gtol, "ftol": 1e-15,
                                         "maxcor": 20})
        z = res.x
        grad_norm = float(np.linalg.norm(res.jac))
        diag["iterations"] += int(res.nit)
        cand, cand_res = _project(wh.to_controls(z), prob)
        cand_cost = control_cost(cand)
        if cand_res < FEASIBILITY_TOL and cand_cost < best_cost:
            best_cost, best_c, best_res = cand_cost, cand, cand_res
        diag["stages"].append({"rho": rho, "eps": eps, "nit": int(res.nit), "objective": float(res.fun),
                               "projected_cost": cand_cost, "projected_residual": cand_res,
                               "best_feasible_cost": best_cost})
    diag["grad_norm"] = grad_norm
    if best_c is None:
        raise ContinuationFailure("penalty continuation did not reach the target", cand_res,
                                  FiniteHorizonResult(math.inf, cand, diag))
    diag["terminal_residual"] = best_res
    return FiniteHorizonResult(best_cost, best_c, diag)


def _delay(c: ControlPair, steps: int) -> ControlPair:
    """Prepend zero control so the same path runs ``steps`` cells later."""
    pad = steps - c.steps
    if pad < 0:
        raise ValueError("cannot shorten by delaying")
    w = np.concatenate([np.zeros(pad), c.w_dot])
    k = np.concatenate([np.zeros((c.cells, pad)), c.k_dot], axis=1)
    return ControlPair(w, k, c.dt, c.dr, project=False)


def quasipotential_curve(x_grid: Sequence[float], T_grid: Sequence[float] = DEFAULT_T_GRID,
                         template: Optional[VariationalProblem] = None, keep_controls: bool = True,
                         **problem_kw) -> List[QuasipotentialResult]:
    """``J_T(x)`` over an increasing horizon sweep and ``I(x) = min_T J_T(x)``.

    All horizons share one time step (``T_max / 800`` unless ``dt`` is given)
    so that the optimum for one horizon, delayed, is an admissible start for
    the next; ``J_T`` is the smaller of the optimized and the delayed cost.
    """
    T_grid = np.asarray(T_grid, dtype=float)
    if T_grid.size == 0 or np.any(np.diff(T_grid) <= 0):
        raise ValueError("T_grid must be increasing")
    if template is None:
        kw = dict(problem_kw)
        kw.setdefault("dt", float(T_grid[-1]) / DEFAULT_STEPS)
        template = VariationalProblem(x=0.0, T=float(T_grid[-1]), **kw)
    elif problem_kw:
        template = replace(template, **problem_kw)
    out = []
    for x in x_grid:
        J, ctrls, diags = [], [], []
        prev: Optional[FiniteHorizonResult] = None
        error = None
        for T in T_grid:
            prob = replace(template, x=float(x), T=float(T))
            start = None
            warm_cost = math.inf
            if prev is not None:
                start = _delay(prev.controls, prob.steps)
                if abs(terminal_value(start, prob) - prob.x) < FEASIBILITY_TOL:
                    warm_cost = control_cost(start)
            try:
                r = minimize_finite_horizon(prob, start)
            except ContinuationFailure as exc:
                if math.isfinite(warm_cost):
                    r = FiniteHorizonResult(warm_cost, start, {"warm_start_only": True, "terminal_residual": 0.0})
                else:
                    error = str(exc)
                    J.append(math.inf)
                    ctrls.append(None)
                    diags.append({"error": str(exc), "terminal_residual": exc.residual})
                    prev = None
                    continue
            if warm_cost < r.J:
                r = FiniteHorizonResult(warm_cost, start, dict(r.diagnostics, warm_start_kept=True,
                                        terminal_residual=abs(terminal_value(start, prob) - prob.x)))
            prev = r
            J.append(r.J)
            ctrls.append(r.controls if keep_controls else None)
            diags.append(r.diagnostics)
        out.append(QuasipotentialResult(float(x), T_grid.copy(), np.array(J), ctrls, diags, error))
    return out


# ---------------------------------------------------------------------------
# output


CURVE_FIELDS = ("x", "T", "J_T", "terminal_residual", "iterations")


def write_curve_csv(results: Sequence[QuasipotentialResult], dest=None, header_comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for r in results:
        for T, J, d in zip(r.T_grid, r.J, r.diagnostics):
            w.writerow((repr(r.x), repr(float(T)), repr(float(J)),
                        repr(float(d.get("terminal_residual", math.nan))), str(int(d.get("iterations", 0)))))
    text = buf.getvalue()
    if hasattr(dest, "write"):
        dest.write(text)
    elif dest is not None:
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    return text


def curve_summary(results: Sequence[QuasipotentialResult]) -> str:
    rows = [{"x": r.x, "I_s": r.I_s if math.isfinite(r.I_s) else None, "argmin_T": r.argmin_T,
             "monotone": r.monotone(), "error": r.error} for r in results]
    return json.dumps(rows, indent=2)
