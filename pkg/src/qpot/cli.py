"""``qpot run --config FILE`` and the plot-data reshaper.

Exit status: 0 when every internal check passed, 1 on compute failure or a
failed check (diagnostics written), 2 on an invalid configuration.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from . import __version__
from ._seeding import SPLIT_RULE
from .config import RunConfig, load_config
from .laws import ArrivalLaw, equilibrium_cdf

__all__ = ["main", "run", "emit_plot_data", "unreshape_plot_data", "SchemaError", "PLOT_FIELDS"]

PLOT_FIELDS = ("series", "x", "y", "band_low", "band_high")
PANEL_COLUMNS = ("n", "b_n", "x", "source", "rate", "band_low", "band_high", "flag")
CURVE_COLUMNS = ("x", "T", "J_T", "terminal_residual", "iterations")


class SchemaError(ValueError):
    pass


class _Outcome:
    def __init__(self):
        self.files: Dict[str, str] = {}
        self.summary: Dict[str, object] = {}
        self.checks: Dict[str, bool] = {}


def _r(v) -> str:
    return repr(float(v))


def _table(header: Sequence[str], rows, tag: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={tag}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# experiments


def _regime_and_laws(cfg: RunConfig):
    reg = cfg.regime.build()
    return reg, cfg.arrival.build(), cfg.service.build()


def _exp_simulate(cfg: RunConfig, tag: str, threads: int) -> _Outcome:
    from .queue_sim import QueueModel, simulate

    reg, shape, service = _regime_and_laws(cfg)
    sc = cfg.simulate
    model = QueueModel.build(reg, shape, service, q0=sc.q0, arrival_mode=sc.arrival_mode)
    grid = np.linspace(0.0, sc.horizon, sc.samples)
    trace = simulate(model, sc.horizon, sample_grid=grid, seed=cfg.seed)
    p = trace.sampled_paths()
    out = _Outcome()
    out.files["path.csv"] = _table(("t", "Q", "X", "A_hat", "Y"),
                                   ((_r(t), str(int(q)), _r(x), str(int(a)), _r(y))
                                    for t, q, x, a, y in zip(p["t"], p["Q"], p["X"], p["A_hat"], p["Y"])), tag)
    log = trace.event_log()
    resid = trace.flow_residuals(log)
    out.checks["flow_balance_exact"] = bool(np.all(resid == 0))
    out.checks["log_path_matches"] = bool(np.array_equal(trace.path_from_log(grid, log), trace.Q(grid)))
    out.summary.update(events=int(log.size), mean_Q=float(np.mean(p["Q"])))
    return out


def _exp_stationary(cfg: RunConfig, tag: str, threads: int) -> _Outcome:
    from .queue_sim import QueueModel, stationary_sample

    reg, shape, service = _regime_and_laws(cfg)
    sc = cfg.stationary
    model = QueueModel.build(reg, shape, service)
    st = stationary_sample(model, burn_in=sc.burn_in, count=sc.count, spacing=sc.spacing, seed=cfg.seed,
                           keep_trace=False)
    out = _Outcome()
    out.files["samples.csv"] = _table(("t", "Q", "X"), ((_r(t), str(int(q)), _r(x))
                                                         for t, q, x in zip(st.times, st.Q, st.X)), tag)
    xg = np.linspace(0.0, float(service.quantile_upper(1e-6)), 201)
    S = st.mean_S(xg)
    ref = 1.0 - equilibrium_cdf(service, xg)
    out.files["residual_cdf.csv"] = _table(("x", "mean_S", "one_minus_F0"),
                                           ((_r(a), _r(b), _r(c)) for a, b, c in zip(xg, S, ref)), tag)
    tails = st.tail(sc.x_grid)
    out.files["tail.csv"] = _table(("x", "P_X_ge_x"), ((_r(a), _r(b)) for a, b in zip(sc.x_grid, tails)), tag)
    out.summary.update({k: float(v) for k, v in st.diagnostics.items()})
    out.summary["sup_residual_gap"] = float(np.max(np.abs(S - ref)))
    out.checks["no_upward_drift"] = True
    return out


def _exp_bounds(cfg: RunConfig, tag: str, threads: int) -> _Outcome:
    from .queue_sim import QueueModel, gg_supremum_tail, simulate_infinite_server_bound, stationary_sample

    reg, shape, service = _regime_and_laws(cfg)
    bc = cfg.bounds
    gg_model = QueueModel.gg_setup(reg, shape, service)
    est = gg_supremum_tail(gg_model, bc.r_grid, replications=bc.replications, seed=cfg.seed, i_max=bc.i_max)
    st = stationary_sample(QueueModel.build(reg, shape, service), count=bc.stationary_count,
                           spacing=bc.stationary_spacing, seed=cfg.seed, keep_trace=True)
    stat_tail = st.queue_tail(np.asarray(bc.r_grid) * reg.scale + 1.0)
    path = simulate_infinite_server_bound(gg_model, bc.horizon, seed=cfg.seed)
    out = _Outcome()
    out.files["gg_bound.csv"] = _table(
        ("r", "estimate", "ci_low", "ci_high", "truncation_bound", "flagged", "stationary_tail"),
        ((_r(e.r), _r(e.estimate), _r(e.ci_low), _r(e.ci_high), _r(e.truncation_bound),
          "true" if e.flagged else "false", _r(s)) for e, s in zip(est, stat_tail)), tag)
    out.files["infinite_server.csv"] = _table(("t", "breve_Q", "Q"), ((_r(t), str(int(a)), str(int(b)))
                                              for t, a, b in zip(path.times, path.breve_Q, path.Q_coupled)), tag)
    out.checks["sandwich"] = bool(all(s <= e.ci_high for e, s in zip(est, stat_tail)))
    out.checks["infinite_server_below"] = path.violations == 0
    out.summary.update(i_max=est[0].i_max if est else 0, violations=path.violations)
    return out


def _exp_renewal(cfg: RunConfig, tag: str, threads: int) -> _Outcome:
    from .renewal import CSV_FIELDS, RenewalProcess, equilibrium_variance_report, moment_bound_reports

    rc = cfg.renewal_bounds
    reports = []
    jobs = []
    for li, decl in enumerate(rc.laws):
        law = decl.build()
        for mi, mode in enumerate(rc.modes):
            jobs.append(lambda law=law, mode=mode, s=cfg.seed * 1000 + 10 * li + mi:
                        moment_bound_reports(RenewalProcess(law, mode), rc.m_values, rc.t_values, rc.reps, s,
                                             rc.batches, rc.level))
        if rc.equilibrium_variance:
            jobs.append(lambda law=law, s=cfg.seed * 1000 + 10 * li + 9:
                        equilibrium_variance_report(law, rc.t_values, rc.reps, s, rc.batches, rc.level))
    for part in _map(jobs, threads):
        reports.extend(part)
    out = _Outcome()
    out.files["renewal_bounds.csv"] = _table(CSV_FIELDS, (_report_row(r) for r in reports), tag)
    out.checks["all_bounds_hold"] = all(r.passed for r in reports)
    out.summary["rows"] = len(reports)
    out.summary["failures"] = sum(not r.passed for r in reports)
    return out


def _report_row(r):
    row = r.row()
    return [("true" if row[k] else "false") if isinstance(row[k], bool)
            else (_r(row[k]) if isinstance(row[k], float) else str(row[k])) for k in row]


def _exp_limit(cfg: RunConfig, tag: str, threads: int) -> _Outcome:
    from .limit_solver import ControlPair, GridFunction, forward_trajectory, solve_nonlinear_renewal

    lc = cfg.limit_solve
    service = cfg.service.build()
    dt = lc.dt or lc.T / 800
    out = _Outcome()
    if lc.kind == "renewal":
        levels = np.asarray(lc.levels)
        breaks = np.asarray(lc.breaks)
        f = GridFunction.from_callable(lambda t: levels[np.searchsorted(breaks, t, side="left")], lc.T, dt)
        g = solve_nonlinear_renewal(f, service, method=lc.method)
        out.summary["g_T"] = g.at_end()
        out.checks["finite"] = bool(np.all(np.isfinite(g.values)))
    else:
        mu = 1.0 / service.mean
        sigma = lc.sigma if lc.sigma is not None else ArrivalLaw(cfg.arrival.build(), 1.0).sigma(mu)
        n = int(round(lc.T / dt))
        c = ControlPair(np.full(n, lc.w_dot), np.zeros((lc.cells, n)), dt, mu * dt)
        g = forward_trajectory(c, service, sigma, lc.beta, mu=mu, x0=lc.x0)
        out.summary["q_T"] = g.at_end()
        out.checks["finite"] = bool(np.all(np.isfinite(g.values)))
    out.files["solution.csv"] = _table(("t", "value"), ((_r(t), _r(v)) for t, v in zip(g.t, g.values)), tag)
    return out


def _qp_curve(x_grid, T_grid, kw, threads):
    from .quasipotential import quasipotential_curve

    jobs = [lambda x=x: quasipotential_curve([x], T_grid, **kw)[0] for x in x_grid]
    return list(_map(jobs, threads))


def _exp_quasipotential(cfg: RunConfig, tag: str, threads: int) -> _Outcome:
    from .quasipotential import CURVE_FIELDS

    qc = cfg.quasipotential
    service = cfg.service.build()
    mu = 1.0 / service.mean
    sigma = qc.sigma if qc.sigma is not None else ArrivalLaw(cfg.arrival.build(), 1.0).sigma(mu)
    kw = dict(service=service, sigma=sigma, beta=qc.beta, cells=qc.cells, keep_controls=qc.dump_controls)
    if qc.dt is not None:
        kw["dt"] = qc.dt
    results = _qp_curve(qc.x_grid, qc.T_grid, kw, threads)
    rows = []
    for r in results:
        for T, J, d in zip(r.T_grid, r.J, r.diagnostics):
            rows.append((_r(r.x), _r(T), _r(J), _r(d.get("terminal_residual", math.nan)),
                         str(int(d.get("iterations", 0)))))
    out = _Outcome()
    out.files["curve.csv"] = _table(CURVE_FIELDS, rows, tag)
    summary = [{"x": r.x, "I_s": r.I_s if math.isfinite(r.I_s) else None, "argmin_T": r.argmin_T,
                "error": r.error} for r in results]
    out.files["quasipotential.json"] = json.dumps({"config_hash": tag, "results": summary}, indent=2, sort_keys=True) + "\n"
    if qc.dump_controls:
        for r in results:
            for T, c in zip(r.T_grid, r.controls):
                if c is not None:
                    out.files[f"controls_x{r.x!r}_T{T!r}"] = c
    out.summary["I_s"] = {repr(r.x): (r.I_s if math.isfinite(r.I_s) else None) for r in results}
    out.checks["J_T_nonincreasing"] = all(r.monotone() for r in results)
    out.checks["I_s_nonnegative"] = all(r.I_s >= 0 for r in results)
    out.checks["equilibrium_zero"] = all(r.I_s == 0.0 for r in results if r.x == -qc.beta)
    return out


def _exp_panel(cfg: RunConfig, tag: str, threads: int) -> _Outcome:
    from .ldp_lab import convergence_panel

    pc = cfg.panel
    service = cfg.service.build()
    shape = cfg.arrival.build()
    mu = 1.0 / service.mean
    qp = {}
    if pc.quasipotential:
        kw = dict(service=service, sigma=ArrivalLaw(shape, 1.0).sigma(mu), beta=pc.beta, cells=pc.cells,
                  keep_controls=False)
        if pc.dt is not None:
            kw["dt"] = pc.dt
        for r in _qp_curve(pc.x_grid, pc.T_grid, kw, threads):
            qp[r.x] = r.I_s
    rep = convergence_panel(pc.n_list, pc.x_grid, beta=pc.beta, b_rule=lambda n: float(n) ** pc.b_exponent,
                            service=service, arrival_shape=shape, quasipotential=qp,
                            gg_replications=pc.gg_replications, gg_seed=cfg.seed, simulate=pc.simulate,
                            sim_count=pc.sim_count, sim_seed=cfg.seed, threads=threads)
    out = _Outcome()
    out.files["panel.csv"] = rep.to_csv(header_comment=f"config_hash={tag}")
    out.files["verdict.json"] = rep.verdict_json() + "\n"
    out.summary["trend"] = rep.verdict["trend"]
    out.checks["panel_complete"] = len(rep.rows) >= 3 * len(pc.n_list) * len(pc.x_grid)
    return out


EXPERIMENTS: Dict[str, Callable] = {
    "simulate": _exp_simulate,
    "stationary": _exp_stationary,
    "bounds": _exp_bounds,
    "renewal-bounds": _exp_renewal,
    "limit-solve": _exp_limit,
    "quasipotential": _exp_quasipotential,
    "panel": _exp_panel,
}


def _map(jobs: List[Callable], threads: int):
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda f: f(), jobs))
    return [f() for f in jobs]


# ---------------------------------------------------------------------------
# orchestration


def _write(out_dir: str, name: str, content) -> str:
    path = os.path.join(out_dir, name)
    if not isinstance(content, str):  # ControlPair bundle
        content.save(path)
        return path
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(content)
    return path


def run(cfg: RunConfig, out_dir: Optional[str] = None, threads: int = 1) -> int:
    out_dir = out_dir or cfg.output
    os.makedirs(out_dir, exist_ok=True)
    tag = cfg.config_hash()
    manifest = {
        "artifact": "qpot",
        "version": __version__,
        "config": cfg.resolved(),
        "config_hash": tag,
        "seed_rule": SPLIT_RULE,
        "threads": threads,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    t0 = time.perf_counter()
    try:
        outcome = EXPERIMENTS[cfg.experiment](cfg, tag, threads)
    except Exception as exc:  # compute failure
        diag = {"error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc(), "config_hash": tag}
        if hasattr(exc, "diagnostics"):
            diag["diagnostics"] = exc.diagnostics
        _write(out_dir, "diagnostics.json", json.dumps(diag, indent=2, default=str) + "\n")
        manifest.update(status=1, error=diag["error"])
        _write(out_dir, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        print(f"compute failure: {diag['error']}", file=sys.stderr)
        return 1
    written = [os.path.relpath(_write(out_dir, name, content), out_dir) for name, content in sorted(outcome.files.items(), key=lambda kv: kv[0])]
    status = 0 if all(outcome.checks.values()) else 1
    manifest.update(status=status, artifacts=written, checks=outcome.checks,
                    elapsed_seconds=round(time.perf_counter() - t0, 3))
    _write(out_dir, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    lines = [f"experiment: {cfg.experiment}", f"config_hash: {tag}", f"status: {status}"]
    lines += [f"check {k}: {'pass' if v else 'FAIL'}" for k, v in outcome.checks.items()]
    lines += [f"{k}: {v}" for k, v in outcome.summary.items()]
    _write(out_dir, "summary.txt", "\n".join(lines) + "\n")
    _write(out_dir, "summary.json", json.dumps({"status": status, "checks": outcome.checks,
                                                "summary": outcome.summary}, indent=2, sort_keys=True, default=str) + "\n")
    print("\n".join(lines))
    if status:
        _write(out_dir, "diagnostics.json", json.dumps({"failed_checks": [k for k, v in outcome.checks.items() if not v],
                                                        "summary": outcome.summary}, indent=2, default=str) + "\n")
    return status


# ---------------------------------------------------------------------------
# plot data


def _read_csv(path: str) -> Tuple[List[str], List[str], List[List[str]]]:
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    comments = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    if not body:
        return comments, [], []
    rows = list(csv.reader(body))
    return comments, rows[0], rows[1:]


def _series_key(fields: Dict[str, str]) -> str:
    return ";".join(f"{k}={v}" for k, v in fields.items())


def _parse_key(key: str) -> Dict[str, str]:
    out = {}
    for part in key.split(";"):
        k, _, v = part.partition("=")
        out[k] = v
    return out


def emit_plot_data(paths: Sequence[str], dest: Optional[str] = None) -> str:
    """Long-format ``(series, x, y, band_low, band_high)`` rows from panel or curve CSVs.

    Panel rows map one-to-one (n, b_n, source and flag go into the series key)
    so :func:`unreshape_plot_data` restores them exactly. Curve files give one
    series per horizon plus the lower envelope over horizons.
    """
    buf = io.StringIO()
    comments: List[str] = []
    rows: List[Tuple[str, ...]] = []
    for path in paths:
        com, head, body = _read_csv(path)
        comments += [c for c in com if c not in comments]
        if not head:
            continue
        if tuple(head) == PANEL_COLUMNS:
            for n, b, x, src, rate, lo, hi, flag in body:
                rows.append((_series_key({"source": src, "n": n, "b_n": b, "flag": flag}), x, rate, lo, hi))
        elif tuple(head) == CURVE_COLUMNS:
            env: Dict[str, float] = {}
            for x, T, J, _res, _it in body:
                rows.append((f"T={T}", x, J, "", ""))
                if math.isfinite(float(J)):
                    env[x] = min(env.get(x, math.inf), float(J))
            for x in sorted(env, key=float):
                rows.append(("envelope", x, repr(env[x]), "", ""))
        else:
            raise SchemaError(f"{path}: unrecognized columns {head}")
    for c in comments:
        buf.write(c + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_FIELDS)
    w.writerows(rows)
    text = buf.getvalue()
    if dest:
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    return text


def unreshape_plot_data(path: str, dest: Optional[str] = None) -> str:
    """Inverse of :func:`emit_plot_data` for panel-derived rows."""
    com, head, body = _read_csv(path)
    if head and tuple(head) != PLOT_FIELDS:
        raise SchemaError(f"{path}: not plot data")
    buf = io.StringIO()
    for c in com:
        buf.write(c + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PANEL_COLUMNS)
    for series, x, y, lo, hi in body:
        k = _parse_key(series)
        if set(k) != {"source", "n", "b_n", "flag"}:
            raise SchemaError(f"series {series!r} does not come from a panel")
        w.writerow((k["n"], k["b_n"], x, k["source"], y, lo, hi, k["flag"]))
    text = buf.getvalue()
    if dest:
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# entry point


def _error_report(out_dir: Optional[str], message: str) -> None:
    print(f"config error: {message}", file=sys.stderr)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config_error.txt"), "w") as fh:
            fh.write(message + "\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="qpot")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one configured experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out")
    p_run.add_argument("--seed-override", type=int)
    p_run.add_argument("--threads", type=int, default=1)
    p_plot = sub.add_parser("plot-data", help="reshape panel/curve CSVs to long plot format")
    p_plot.add_argument("inputs", nargs="*")
    p_plot.add_argument("--out")
    p_plot.add_argument("--inverse", action="store_true", help="restore panel rows from plot data")
    args = parser.parse_args(argv)

    if args.command == "plot-data":
        try:
            if args.inverse:
                if len(args.inputs) != 1:
                    raise SchemaError("--inverse takes exactly one input")
                text = unreshape_plot_data(args.inputs[0], args.out)
            else:
                text = emit_plot_data(args.inputs, args.out)
        except (SchemaError, OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        if not args.out:
            sys.stdout.write(text)
        return 0

    if args.threads < 1:
        _error_report(args.out, "--threads must be >= 1")
        return 2
    try:
        cfg = load_config(args.config)
        if args.seed_override is not None:
            cfg = cfg.model_copy(update={"seed": args.seed_override})
            if cfg.seed < 0:
                raise ValueError("seed must be nonnegative")
    except ValidationError as exc:
        _error_report(args.out, str(exc))
        return 2
    except Exception as exc:  # unreadable / malformed file
        _error_report(args.out, f"{type(exc).__name__}: {exc}")
        return 2
    return run(cfg, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
