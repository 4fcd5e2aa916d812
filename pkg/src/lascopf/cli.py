"""Command-line driver: run one solver mode on a case and write a summary.

Exit codes: 0 converged, 2 stopped unconverged, 3 infeasible or diverged,
64 bad invocation or unreadable case.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .app import (
    LASCOPF_SCHEDULE,
    SCOPF_SCHEDULE,
    AppParams,
    ScopfInfeasible,
    lascopf_solve,
    mpc_roll,
)
from .grid import CaseError, CaseSpec, build_network, generate_scenarios, generator_order, load_case
from .oracle import solve_centralized
from .pmp import PmpDivergence, PmpParams, opf_subproblem, run_pmp
from .prox import GeneratorInfeasible

log = logging.getLogger("lascopf")

MODES = ("opf", "scopf-pmp", "scopf-apmp", "lascopf", "roll", "oracle", "compare")
SCHEMA = "lascopf-summary/1"
TRACE_FIELDS = ("layer", "outer", "interval", "round", "iter", "residual", "r", "s", "rho", "objective")

EXIT_OK, EXIT_UNCONVERGED, EXIT_INFEASIBLE, EXIT_USAGE = 0, 2, 3, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    case: str
    mode: str = "lascopf"
    horizon: int | None = None
    contingencies: tuple[int, ...] | None = None  # None: the case's own list
    rho0: float = 1.0
    eps_pri: float = 0.06
    eps_dual: float = 0.6
    eps_app_scopf: float = 0.7
    eps_app_lascopf: float = 0.6
    alpha_scopf: tuple = SCOPF_SCHEDULE
    alpha_lascopf: tuple = LASCOPF_SCHEDULE
    beta: float = 200.0
    gamma: float = 100.0
    max_iter: int = 20000
    max_outer: int = 2000
    jobs: int = 1
    seed: int = 0
    rolls: int = 1
    timing: bool = False

    def pmp_params(self) -> PmpParams:
        return PmpParams(rho=self.rho0, eps_pri=self.eps_pri, eps_dual=self.eps_dual, max_iter=self.max_iter)

    def scopf_params(self) -> AppParams:
        return AppParams(self.alpha_scopf, self.beta, self.gamma, self.eps_app_scopf, self.max_outer)

    def lascopf_params(self) -> AppParams:
        return AppParams(self.alpha_lascopf, self.beta, self.gamma, self.eps_app_lascopf, self.max_outer)


@dataclass
class RunReport:
    """Uniform result of any mode, generators in id order, nets in bus order."""

    mode: str
    case: str
    status: str  # converged | unconverged | infeasible
    converged: bool
    objective: float | None
    generators: list
    buses: list
    dispatch_mw: np.ndarray | None  # (G, T)
    lmp: np.ndarray | None  # (T, n_bus, S) $/MWh
    iterations: dict = field(default_factory=dict)  # layer -> iteration count
    residuals: dict = field(default_factory=dict)  # layer -> final residual
    wall_time: dict = field(default_factory=dict)  # sequential / parallel seconds
    message: str = ""
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# argument handling

def parse_schedule(text: str) -> tuple:
    """``"5:5,10:3,inf:0.5"`` -> ((5, 5.0), (10, 3.0), (inf, 0.5)); a bare number is constant."""
    text = text.strip()
    try:
        if ":" not in text:
            return ((math.inf, float(text)),)
        out = []
        for part in text.split(","):
            upto, val = part.split(":")
            upto = math.inf if upto.strip().lower() in ("inf", "*") else int(upto)
            out.append((upto, float(val)))
    except ValueError:
        raise UsageError(f"bad step-size schedule {text!r}") from None
    if out[-1][0] != math.inf:
        out.append((math.inf, out[-1][1]))
    return tuple(out)


def parse_contingencies(text: str):
    if text in ("case", ""):
        return None
    if text == "none":
        return ()
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"bad contingency list {text!r}") from None


def resolve_case(name: str) -> CaseSpec:
    p = Path(name)
    if not p.exists():
        bundled = resources.files("lascopf") / "cases" / f"{name}.json"
        if not bundled.is_file():
            raise UsageError(f"no case file {name!r} and no bundled case of that name")
        p = Path(str(bundled))
    return load_case(p)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lascopf", description="Distributed look-ahead security-constrained OPF")
    ap.add_argument("--case", required=True, help="case file, or a bundled name (case5, case14)")
    ap.add_argument("--mode", choices=MODES, default="lascopf")
    ap.add_argument("--horizon", type=int)
    ap.add_argument("--contingencies", default="case", help="'case', 'none' or comma-separated line ids")
    ap.add_argument("--rho0", type=float, default=1.0, help="initial penalty, $/h per MW^2")
    ap.add_argument("--eps-pri", type=float, default=0.06)
    ap.add_argument("--eps-dual", type=float, default=0.6)
    ap.add_argument("--eps-app-scopf", type=float, default=0.7)
    ap.add_argument("--eps-app-lascopf", type=float, default=0.6)
    ap.add_argument("--alpha-schedule", action="append", default=[], metavar="LAYER=SCHED",
                    help="e.g. scopf=5:5,10:3,inf:0.5 (layer is scopf or lascopf; steps in $/h per pu^2)")
    ap.add_argument("--beta", type=float, default=200.0, help="proximity weight, $/h per pu^2")
    ap.add_argument("--gamma", type=float, default=100.0, help="consensus weight, $/h per pu^2")
    ap.add_argument("--max-iter", type=int, default=20000)
    ap.add_argument("--max-outer", type=int, default=2000)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rolls", type=int, default=1, help="solves to run in roll mode")
    ap.add_argument("--timing", action="store_true", help="include wall times in the JSON summary")
    ap.add_argument("--out-json")
    ap.add_argument("--out-trace")
    return ap


def config_from_args(ns) -> RunConfig:
    sched = {"scopf": SCOPF_SCHEDULE, "lascopf": LASCOPF_SCHEDULE}
    for item in ns.alpha_schedule:
        layer, sep, text = item.partition("=")
        if not sep or layer not in sched:
            raise UsageError(f"--alpha-schedule expects scopf=... or lascopf=..., got {item!r}")
        sched[layer] = parse_schedule(text)
    for name in ("rho0", "eps_pri", "eps_dual", "eps_app_scopf", "eps_app_lascopf"):
        if not getattr(ns, name) > 0:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    if ns.beta < 0 or ns.gamma < 0:
        raise UsageError("--beta and --gamma must be non-negative")
    if ns.max_iter < 1 or ns.max_outer < 1 or ns.jobs < 1 or ns.rolls < 1:
        raise UsageError("iteration limits, --jobs and --rolls must be at least 1")
    if ns.horizon is not None and ns.horizon < 1:
        raise UsageError("--horizon must be at least 1")
    return RunConfig(
        case=ns.case, mode=ns.mode, horizon=ns.horizon, contingencies=parse_contingencies(ns.contingencies),
        rho0=ns.rho0, eps_pri=ns.eps_pri, eps_dual=ns.eps_dual, eps_app_scopf=ns.eps_app_scopf,
        eps_app_lascopf=ns.eps_app_lascopf, alpha_scopf=sched["scopf"], alpha_lascopf=sched["lascopf"],
        beta=ns.beta, gamma=ns.gamma, max_iter=ns.max_iter, max_outer=ns.max_outer, jobs=ns.jobs,
        seed=ns.seed, rolls=ns.rolls, timing=ns.timing,
    )


# ---------------------------------------------------------------------------
# modes

def _prepare(cfg: RunConfig, case: CaseSpec) -> CaseSpec:
    if cfg.horizon is not None and cfg.horizon != case.horizon:
        if cfg.horizon > len(case.forecast):
            raise UsageError(f"--horizon {cfg.horizon} exceeds the {len(case.forecast)} forecast rows")
        case = replace(case, horizon=cfg.horizon)
    return case


def _gen_ids(case):
    return [g.id for g in generator_order(build_network(case))]


def _run_pmp_mode(cfg, case, sink, contingencies):
    net = build_network(case)
    scen = generate_scenarios(net, contingencies)
    labels = [0] if cfg.mode == "opf" else list(scen.labels)
    sub = opf_subproblem(net, scen, 1, labels=labels)
    _, _, rep = run_pmp(sub, params=cfg.pmp_params(), sink=sink)
    lmp = np.asarray(rep.lmp)[None]
    return RunReport(
        mode=cfg.mode, case=case.name, status="converged" if rep.converged else "unconverged",
        converged=rep.converged, objective=float(rep.objective), generators=_gen_ids(case),
        buses=list(case.buses), dispatch_mw=np.asarray(rep.dispatch_mw)[:, None], lmp=lmp,
        iterations={"pmp": rep.iterations}, residuals={"pmp_r": rep.r_norm, "pmp_s": rep.s_norm},
        wall_time={"sequential": rep.wall_time, "parallel": rep.wall_time},
    )


def _lascopf_report(cfg, case, rep, mode):
    return RunReport(
        mode=mode, case=case.name, status="converged" if rep.converged else "unconverged",
        converged=rep.converged, objective=float(rep.objective), generators=_gen_ids(case),
        buses=list(case.buses), dispatch_mw=rep.dispatch_mw, lmp=rep.lmp,
        iterations={"lascopf": len(rep.outer_trace), "scopf": len(rep.inner_trace),
                    "pmp": int(rep.pmp_iterations)},
        residuals={"lascopf": rep.residual},
        wall_time={"sequential": rep.wall_time, "parallel": rep.parallel_time},
        extra={"scopf_iterations": list(rep.scopf_iterations)},
    )


def _run_oracle(cfg, case, contingencies):
    sol = solve_centralized(case, contingencies)
    if not sol.feasible:
        return RunReport(
            mode="oracle", case=case.name, status="infeasible", converged=False, objective=None,
            generators=_gen_ids(case), buses=list(case.buses), dispatch_mw=None, lmp=None,
            message=sol.message, extra={"phase1_violation": sol.phase1_objective,
                                        "worst_rows": [[list(map(str, r)), v] for r, v in sol.worst_rows]},
        )
    ids = _gen_ids(case)
    pos = {g.id: i for i, g in enumerate(case.generators)}
    disp = sol.dispatch[[pos[i] for i in ids]]
    bus_pos = {b: i for i, b in enumerate(sorted(case.buses))}
    lmp = sol.lmp[:, :, [bus_pos[b] for b in case.buses]].transpose(0, 2, 1)
    return RunReport(
        mode="oracle", case=case.name, status="converged", converged=True, objective=float(sol.objective),
        generators=ids, buses=list(case.buses), dispatch_mw=disp, lmp=lmp,
        residuals={"kkt": sol.kkt_residual}, extra={"active_set_iterations": sol.iterations},
        wall_time={"sequential": sol.wall_time, "parallel": sol.wall_time},
    )


def _run_roll(cfg, case, sink, contingencies):
    T = case.horizon
    future = list(case.forecast[T:])
    warm = None
    p0 = None
    committed, objectives = [], []
    iters = {"lascopf": 0, "scopf": 0, "pmp": 0}
    seq = par = 0.0
    ok = True
    rep = None
    for k in range(cfg.rolls):
        rep = lascopf_solve(case, cfg.pmp_params(), cfg.scopf_params(), cfg.lascopf_params(), contingencies,
                            p0_mw=p0, warm=warm, sink=sink, jobs=cfg.jobs, trace_pmp=sink is not None)
        ok &= rep.converged
        committed.append(rep.dispatch_mw[:, 0].copy())
        objectives.append(float(rep.objective))
        iters["lascopf"] += len(rep.outer_trace)
        iters["scopf"] += len(rep.inner_trace)
        iters["pmp"] += int(rep.pmp_iterations)
        seq += rep.wall_time
        par += rep.parallel_time
        row = future.pop(0) if future else dict(case.forecast[T - 1])
        case, warm = mpc_roll(case, rep, row)
        p0 = None  # mpc_roll moves the committed dispatch into sched_mw
        log.info("roll %d committed %s", k + 1, np.round(committed[-1], 4).tolist())
    return RunReport(
        mode="roll", case=case.name, status="converged" if ok else "unconverged", converged=ok,
        objective=float(sum(objectives)), generators=_gen_ids(case), buses=list(case.buses),
        dispatch_mw=np.array(committed).T, lmp=rep.lmp[:1],
        iterations=iters, residuals={"lascopf": rep.residual},
        wall_time={"sequential": seq, "parallel": par},
        extra={"solve_objectives": objectives},
    )


def nodal_price(lmp) -> np.ndarray:
    """(T, n_bus) $/MWh: balance prices summed over scenarios."""
    return np.asarray(lmp).sum(axis=-1)


def compare(a: RunReport, b: RunReport) -> dict:
    """Percentage objective gap of ``a`` against ``b`` plus dispatch and LMP deviations."""
    if a.dispatch_mw is None or b.dispatch_mw is None:
        raise ValueError("both reports need a dispatch to compare")
    if a.generators != b.generators or a.dispatch_mw.shape != b.dispatch_mw.shape:
        raise ValueError("reports cover different generators or horizons")
    if a.buses != b.buses:
        raise ValueError("reports cover different buses")
    d = np.abs(a.dispatch_mw - b.dispatch_mw)
    out = {
        "percentage_difference": 100.0 * (a.objective - b.objective) / abs(b.objective),
        "max_dispatch_deviation_mw": {str(g): float(d[i].max()) for i, g in enumerate(a.generators)},
    }
    if a.lmp is not None and b.lmp is not None:
        # the scenarios share one load, so only the sum of their balance prices is unique
        la, lb = nodal_price(a.lmp), nodal_price(b.lmp)
        dl = np.abs(la - lb)
        out["max_lmp_deviation"] = {str(bus): float(dl[:, i].max()) for i, bus in enumerate(a.buses)}
    return out


def run(cfg: RunConfig, sink=None) -> RunReport:
    """Execute one configured run. Raises UsageError, CaseError or solver errors."""
    case = _prepare(cfg, resolve_case(cfg.case))
    cont = case.contingency_lines if cfg.contingencies is None else cfg.contingencies
    np.random.seed(cfg.seed)
    try:
        if cfg.mode in ("opf", "scopf-pmp"):
            return _run_pmp_mode(cfg, case, sink, () if cfg.mode == "opf" else cont)
        if cfg.mode == "oracle":
            return _run_oracle(cfg, case, cont)
        if cfg.mode == "roll":
            return _run_roll(cfg, case, sink, cont)
        if cfg.mode == "scopf-apmp":
            one = replace(case, horizon=1)
            rep = lascopf_solve(one, cfg.pmp_params(), cfg.scopf_params(), cfg.lascopf_params(), cont,
                                sink=sink, jobs=cfg.jobs, trace_pmp=sink is not None)
            return _lascopf_report(cfg, one, rep, cfg.mode)
        rep = lascopf_solve(case, cfg.pmp_params(), cfg.scopf_params(), cfg.lascopf_params(), cont,
                            sink=sink, jobs=cfg.jobs, trace_pmp=sink is not None)
        out = _lascopf_report(cfg, case, rep, cfg.mode)
        if cfg.mode == "compare":
            ref = _run_oracle(cfg, case, cont)
            if ref.status == "infeasible":
                out.extra["oracle"] = {"status": "infeasible", "message": ref.message}
            else:
                out.extra["oracle"] = {"objective": ref.objective, "dispatch_mw": ref.dispatch_mw.tolist()}
                out.extra["comparison"] = compare(out, ref)
        return out
    except (ScopfInfeasible, PmpDivergence, GeneratorInfeasible) as exc:
        return RunReport(
            mode=cfg.mode, case=case.name, status="infeasible", converged=False, objective=None,
            generators=_gen_ids(case), buses=list(case.buses), dispatch_mw=None, lmp=None, message=str(exc),
        )


def summary(cfg: RunConfig, rep: RunReport) -> dict:
    doc = {
        "schema": SCHEMA,
        "case": rep.case,
        "mode": rep.mode,
        "seed": cfg.seed,
        "status": rep.status,
        "converged": rep.converged,
        "objective": rep.objective,
        "generators": rep.generators,
        "buses": rep.buses,
        "dispatch_mw": None if rep.dispatch_mw is None else np.asarray(rep.dispatch_mw).tolist(),
        "lmp": None if rep.lmp is None else nodal_price(rep.lmp).tolist(),
        "iterations": rep.iterations,
        "residuals": rep.residuals,
        "message": rep.message,
        **rep.extra,
    }
    if cfg.timing:
        doc["wall_time"] = rep.wall_time
    return doc


class TraceWriter:
    """CSV sink: one row per iteration of each layer."""

    def __init__(self, path):
        self.fh = open(path, "w", newline="")
        self.w = csv.DictWriter(self.fh, fieldnames=TRACE_FIELDS, extrasaction="ignore")
        self.w.writeheader()
        self.rows = 0

    def __call__(self, rec):
        self.w.writerow({k: rec.get(k, "") for k in TRACE_FIELDS})
        self.rows += 1

    def close(self):
        self.fh.close()


def _exit_code(rep: RunReport) -> int:
    return {"converged": EXIT_OK, "unconverged": EXIT_UNCONVERGED}.get(rep.status, EXIT_INFEASIBLE)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LASCOPF_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    ns = ap.parse_args(argv)
    trace = None
    try:
        cfg = config_from_args(ns)
        trace = TraceWriter(ns.out_trace) if ns.out_trace else None
        t0 = time.perf_counter()
        rep = run(cfg, sink=trace)
    except (UsageError, CaseError) as exc:
        print(f"lascopf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if trace is not None:
            trace.close()
    doc = summary(cfg, rep)
    text = json.dumps(doc, indent=2, sort_keys=True)
    if ns.out_json:
        Path(ns.out_json).write_text(text + "\n")
    line = f"{rep.mode} {rep.case}: {rep.status}"
    if rep.objective is not None:
        line += f", objective {rep.objective:.4f} $/h"
    if "comparison" in rep.extra:
        line += f", {rep.extra['comparison']['percentage_difference']:+.4f}% vs centralized"
    if rep.message:
        line += f" ({rep.message})"
    print(line)
    log.info("finished in %.2f s", time.perf_counter() - t0)
    return _exit_code(rep)


if __name__ == "__main__":
    sys.exit(main())
