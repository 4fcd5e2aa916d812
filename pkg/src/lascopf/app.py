"""Auxiliary problem principle layers around the message-passing engine.

Two consensus layers share one mechanism. Each coarse grain (a dispatch
interval, or a contingency scenario inside one interval) keeps private
beliefs about generator outputs it shares with neighbour grains; the
auxiliary subproblem adds a proximity term, a consensus term built from
the previous iterates, and a multiplier term, and after every round the
multipliers move along the disagreement.

The weights alpha, beta and gamma are per-unit ($/h per pu^2, like every
generator problem); beliefs and multipliers are carried in MW and $/MWh,
so the weights are divided by base^2 where they meet MW quantities.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .grid import CaseSpec, DtnNetwork, ScenarioSet, build_network, generate_scenarios, generator_order
from .pmp import (
    DualState,
    OpfSubproblem,
    PlanState,
    PmpDivergence,
    PmpEngine,
    PmpParams,
    generator_problem,
    run_pmp,
)
from .prox import BeliefVar, GenLocalProblem

log = logging.getLogger(__name__)

SCOPF_SCHEDULE = ((5, 5.0), (10, 3.0), (15, 2.5), (20, 1.25), (math.inf, 0.5))
LASCOPF_SCHEDULE = ((5, 10.0), (10, 5.0), (15, 2.5), (20, 1.25), (math.inf, 0.5))


class ScopfInfeasible(RuntimeError):
    def __init__(self, message, interval=None, scenario=None):
        super().__init__(message)
        self.interval = interval
        self.scenario = scenario


@dataclass(frozen=True)
class AppParams:
    alpha: tuple = LASCOPF_SCHEDULE
    beta: float = 200.0
    gamma: float = 100.0
    eps: float = 0.6
    max_outer: int = 2000

    def __post_init__(self):
        thr = [t for t, _ in self.alpha]
        if any(a <= 0 for _, a in self.alpha) or any(b <= a for a, b in zip(thr, thr[1:])):
            raise ValueError("alpha schedule needs positive steps and increasing thresholds")
        if self.beta < 0 or self.gamma < 0 or self.eps <= 0:
            raise ValueError("beta, gamma must be >= 0 and eps > 0")


def scopf_defaults(**kw) -> AppParams:
    return AppParams(**{"alpha": SCOPF_SCHEDULE, "eps": 0.7, **kw})


def lascopf_defaults(**kw) -> AppParams:
    return AppParams(**{"alpha": LASCOPF_SCHEDULE, "eps": 0.6, **kw})


def alpha_at(schedule, mu: int) -> float:
    """Piecewise-constant step length: the first entry whose threshold covers ``mu``."""
    for thr, a in schedule:
        if mu <= thr:
            return float(a)
    return float(schedule[-1][1])


# ---------------------------------------------------------------------------
# interval layer bookkeeping

@dataclass
class BeliefSet:
    """Generator-output beliefs in MW, indexed ``[g, t]`` with 0-based intervals.

    ``own[:, t]`` is interval t's dispatch of itself, ``prev[:, t]`` its
    belief about interval t-1 and ``nxt[:, t]`` about interval t+1 (NaN
    where the neighbour does not exist).
    """

    own: np.ndarray
    prev: np.ndarray
    nxt: np.ndarray

    @classmethod
    def initial(cls, sched_mw, horizon: int):
        s = np.asarray(sched_mw, dtype=float)[:, None]
        own = np.repeat(s, horizon, axis=1)
        prev, nxt = own.copy(), own.copy()
        prev[:, 0] = np.nan
        nxt[:, -1] = np.nan
        return cls(own, prev, nxt)

    @property
    def horizon(self) -> int:
        return self.own.shape[1]

    def copy(self):
        return BeliefSet(self.own.copy(), self.prev.copy(), self.nxt.copy())

    def disagreement(self) -> np.ndarray:
        """Per (g, slot) belief gaps, slot 2k for interval k's output and 2k+1 for k+1's."""
        T = self.horizon
        d = np.zeros((self.own.shape[0], max(2 * T - 2, 0)))
        for k in range(T - 1):
            d[:, 2 * k] = self.own[:, k] - self.prev[:, k + 1]
            d[:, 2 * k + 1] = self.nxt[:, k] - self.own[:, k + 1]
        return d

    def residual(self) -> float:
        return float(np.linalg.norm(self.disagreement()))


@dataclass
class LambdaState:
    lam: np.ndarray  # (G, 2T-2) $/MWh

    @classmethod
    def zeros(cls, n_gens, horizon):
        return cls(np.zeros((n_gens, max(2 * horizon - 2, 0))))

    def copy(self):
        return LambdaState(self.lam.copy())


def update_interval_duals(lam: LambdaState, beliefs_new: BeliefSet, alpha: float) -> LambdaState:
    """``lambda += alpha * (lower-grain belief - upper-grain belief)`` for every slot (alpha in MW form)."""
    return LambdaState(lam.lam + alpha * beliefs_new.disagreement())


def _pu_belief(weight_mw, anchor_mw, lin_mw_coef, base):
    # weight/2 (x - a)^2 + c x in MW  ->  per-unit coefficients
    return BeliefVar(weight=weight_mw * base * base, anchor=anchor_mw / base, lin=lin_mw_coef * base)


@dataclass
class IntervalSubproblem:
    interval: int  # 1-based
    hub_gens: list  # GenLocalProblem per generator (base case of the interval)
    load_mw: np.ndarray  # per load device
    p0_window: list  # per generator: fixed previous-interval output (MW) or None


def build_interval_subproblem(t: int, beliefs: BeliefSet, lam: LambdaState, params: AppParams,
                              net: DtnNetwork, p0_mw) -> IntervalSubproblem:
    """Generator problems of interval ``t`` (1-based) for one outer iteration.

    Proximity on every belief, consensus terms ``gamma * x (x^mu - other^mu)``
    and multiplier terms (+lambda for the earlier interval of a pair,
    -lambda for the later). Ramps couple the own output to the neighbour
    beliefs; interval 1 ramps against the running dispatch ``p0_mw`` and
    the last interval against its own previous iterate.
    """
    T = beliefs.horizon
    if not 1 <= t <= T:
        raise ValueError(f"interval {t} outside 1..{T}")
    k = t - 1
    base = net.base_mva
    gens = generator_order(net)
    beta, gamma = params.beta / base**2, params.gamma / base**2
    look = T > 1 and beta > 0
    out = []
    fixed = []
    for g, gen in enumerate(gens):
        own = beliefs.own[g, k]
        kw = {}
        lin = 0.0
        prox_w = 0.0
        if T > 1:
            prox_w = beta
            if k < T - 1:
                other = beliefs.prev[g, k + 1]
                if np.isnan(other):
                    raise ValueError(f"missing belief of interval {t + 1} about interval {t}")
                lin += gamma * (own - other) + lam.lam[g, 2 * k]
            if k > 0:
                other = beliefs.nxt[g, k - 1]
                if np.isnan(other):
                    raise ValueError(f"missing belief of interval {t - 1} about interval {t}")
                lin += gamma * (own - other) - lam.lam[g, 2 * k - 1]
        if k == 0:
            kw["prev_fixed"] = p0_mw[g] / base
            fixed.append(p0_mw[g])
        else:
            fixed.append(None)
            if look:
                y = beliefs.prev[g, k]
                c = gamma * (y - beliefs.own[g, k - 1]) - lam.lam[g, 2 * k - 2]
                kw["prev"] = _pu_belief(beta, y, c, base)
        if T > 1 and k == T - 1 and look:
            kw["next_fixed"] = own / base
        elif k < T - 1 and look:
            w = beliefs.nxt[g, k]
            c = gamma * (w - beliefs.own[g, k + 1]) + lam.lam[g, 2 * k + 1]
            kw["next"] = _pu_belief(beta, w, c, base)
        prob = generator_problem(gen, base, prox_weight=prox_w * base * base, prox_anchor=own / base,
                                 lin=lin * base, **kw)
        out.append(prob)
    return IntervalSubproblem(t, out, net.load_vector(t), fixed)


def add_terms(prob: GenLocalProblem, weight_mw=0.0, anchor_mw=0.0, lin_mw=0.0, base=100.0) -> GenLocalProblem:
    """Add ``weight/2 (p - anchor)^2 + lin * p`` (MW units) to the own-output terms."""
    w_new = weight_mw * base * base
    w = prob.prox_weight + w_new
    if w > 0:
        anchor = (prob.prox_weight * prob.prox_anchor + w_new * anchor_mw / base) / w
    else:
        anchor = prob.prox_anchor
    return replace(prob, prox_weight=w, prox_anchor=anchor, lin=prob.lin + lin_mw * base)


# ---------------------------------------------------------------------------
# scenario layer

def column_rho(cols, base, rho0):
    """Initial penalty per OPF column: ``rho0`` times the mean generator curvature.

    Curvature is ``2A`` plus every proximity weight, in $/h per MW^2, floored
    at 1 so that plain OPF columns keep ``rho0``. The auxiliary proximity
    terms make generators stiff; a penalty far below that stiffness makes
    prices crawl.
    """
    h = np.array([[p.A * 2.0 + p.prox_weight for p in row] for row in cols]) / (base * base)
    return rho0 * np.maximum(1.0, h.mean(axis=0))


@dataclass
class ScenarioState:
    """Warm-start state of one interval's scenario consensus."""

    x0: np.ndarray  # (G,) hub dispatch MW
    xc: np.ndarray  # (G, n) leaf beliefs MW
    lam: np.ndarray  # (G, n) $/MWh
    plan: PlanState | None = None
    dual: DualState | None = None


@dataclass
class ScopfResult:
    dispatch_mw: np.ndarray  # (G,) consensus base-case dispatch (hub)
    private: dict  # generator index -> full hub minimizer (MW): own, [prev], [next]
    converged: bool
    outer_iterations: int
    pmp_iterations: int
    residual: float
    residual_trace: list
    lmp: np.ndarray  # (n_nets, n_scenarios) $/MWh
    angles: np.ndarray  # (n_nets, n_scenarios)
    plan: PlanState
    dual: DualState
    state: ScenarioState
    wall_time: float
    parallel_time: float
    objective: float
    pmp_trace: list = field(default_factory=list, repr=False)


def scenario_consensus_solve(sub: IntervalSubproblem, net: DtnNetwork, scenarios: ScenarioSet,
                             params: AppParams, pmp: PmpParams, warm: ScenarioState | None = None,
                             sink: Callable[[dict], None] | None = None, rho_scaling: bool = True,
                             trace_pmp: bool = False) -> ScopfResult:
    """SCOPF of one interval by consensus among per-scenario OPFs.

    The base case (label 0) is the hub: it carries the cost and every
    interval-layer term. Each contingency solves its own OPF on a private
    copy of the base-case dispatch; proximity, consensus and multiplier
    terms pull the copies onto the hub's dispatch.
    """
    t0 = time.perf_counter()
    base = net.base_mva
    gens = generator_order(net)
    G = len(gens)
    labels = list(scenarios.labels)
    n = len(labels) - 1
    S = n + 1
    load = np.repeat(np.asarray(sub.load_mw, dtype=float)[:, None], S, axis=1)
    if warm is None:
        init = np.array([p.prox_anchor * base if p.prox_weight > 0 else g.sched_mw
                         for p, g in zip(sub.hub_gens, gens)])
        warm = ScenarioState(init.copy(), np.repeat(init[:, None], n, axis=1), np.zeros((G, n)))
    x0, xc, lam = warm.x0.copy(), warm.xc.copy(), warm.lam.copy()
    plan, dual = warm.plan, warm.dual
    beta, gamma = params.beta / base**2, params.gamma / base**2

    trace = []
    pmp_trace = []
    pmp_iters = 0
    par_time = 0.0
    converged = False
    resid = 0.0
    nu = 0
    rep = None
    for nu in range(1, params.max_outer + 1):
        cols = []
        for g, gen in enumerate(gens):
            hub = sub.hub_gens[g]
            if n:
                hub = add_terms(hub, n * beta, x0[g], gamma * float(np.sum(x0[g] - xc[g])) - float(lam[g].sum()), base)
            row = [hub]
            for c in range(n):
                kw = {}
                if sub.p0_window[g] is not None:
                    kw["prev_fixed"] = sub.p0_window[g] / base
                leaf = generator_problem(gen, base, **kw)
                # leaves carry no cost: only the consensus terms
                leaf = replace(leaf, A=0.0, B=0.0, C=0.0)
                leaf = add_terms(leaf, beta, xc[g, c], gamma * (xc[g, c] - x0[g]) + lam[g, c], base)
                row.append(leaf)
            cols.append(row)
        opf = OpfSubproblem(net, scenarios, labels, load, cols, coupled=False)
        engine = PmpEngine(opf, pmp)
        if plan is None:
            plan = PlanState.zeros((engine.T, S))
            dual = DualState.zeros((engine.T, S))
            dual.rho = column_rho(cols, base, pmp.rho) if rho_scaling else np.full(S, pmp.rho)
        ts = time.perf_counter()
        try:
            psink = None
            if trace_pmp:
                psink = lambda r, nu=nu: pmp_trace.append({**r, "interval": sub.interval, "round": nu})
            plan, dual, rep = run_pmp(engine, None if plan is None else (plan, dual), pmp, sink=psink)
        except PmpDivergence as exc:
            col = getattr(exc, "column", None)
            what = f"scenario {labels[col]}" if col is not None else "a scenario"
            raise ScopfInfeasible(f"interval {sub.interval}: {what} OPF diverged ({exc})",
                                  sub.interval, None if col is None else labels[col]) from exc
        dt = time.perf_counter() - ts
        # columns are independent OPFs: a fully parallel run costs one column's share
        par_time += dt / S
        pmp_iters += rep.iterations
        disp = rep.dispatch_mw
        x0 = disp[:, 0].copy()
        xc = disp[:, 1:].copy()
        resid = float(np.linalg.norm(xc - x0[:, None])) if n else 0.0
        rec = {"layer": "scopf", "interval": sub.interval, "iter": nu, "residual": resid,
               "pmp_iterations": rep.iterations, "pmp_converged": rep.converged,
               "elapsed": time.perf_counter() - t0}
        trace.append(rec)
        if sink is not None:
            sink(rec)
        if not rep.converged:
            log.warning("interval %d scenario round %d: PMP hit max_iter (r=%.3g)", sub.interval, nu, rep.r_norm)
        if n == 0 or (resid <= params.eps and rep.converged):
            converged = rep.converged
            break
        lam = lam + alpha_at(params.alpha, nu) / base**2 * (xc - x0[:, None])

    private = {}
    for g in range(G):
        xs = rep.private.get((g, 0))
        private[g] = np.array([x0[g]]) if xs is None else np.asarray(xs) * base
    state = ScenarioState(x0, xc, lam, plan, dual)
    return ScopfResult(
        dispatch_mw=x0,
        private=private,
        converged=converged,
        outer_iterations=nu if n else 0,
        pmp_iterations=pmp_iters,
        residual=resid,
        residual_trace=trace,
        lmp=rep.lmp,
        angles=rep.angles,
        plan=plan,
        dual=dual,
        state=state,
        wall_time=time.perf_counter() - t0,
        parallel_time=par_time,
        objective=float(sum(g.cost(x0[i]) for i, g in enumerate(gens))),
        pmp_trace=pmp_trace,
    )


# ---------------------------------------------------------------------------
# interval layer

@dataclass
class LascopfReport:
    dispatch_mw: np.ndarray  # (G, T)
    objective: float
    converged: bool
    outer_iterations: int
    outer_trace: list
    inner_trace: list
    scopf_iterations: list  # per interval, summed over outer iterations
    pmp_iterations: int
    lmp: np.ndarray  # (T, n_nets, n_scenarios)
    angles: np.ndarray  # (T, n_nets, n_scenarios)
    beliefs: BeliefSet
    lam: LambdaState
    states: list  # ScenarioState per interval
    wall_time: float
    parallel_time: float
    residual: float
    results: list = field(default_factory=list, repr=False)


def _solve_interval(args):
    k, sub, net, scen, sp, pp, warm, tp = args
    return k, scenario_consensus_solve(sub, net, scen, sp, pp, warm, trace_pmp=tp)


def lascopf_solve(case: CaseSpec, pmp: PmpParams | None = None, scopf: AppParams | None = None,
                  lascopf: AppParams | None = None, contingencies=None, horizon=None, p0_mw=None,
                  warm: dict | None = None, sink: Callable[[dict], None] | None = None,
                  jobs: int = 1, trace_pmp: bool = False) -> LascopfReport:
    """Look-ahead SCOPF by interval consensus over scenario-consensus SCOPFs.

    ``warm`` may carry ``beliefs``, ``lam`` and ``states`` from an earlier
    (typically rolled) solve. With ``trace_pmp`` every PMP iteration is
    also sent to ``sink``, after the scenario rounds of its interval.
    """
    t_start = time.perf_counter()
    pmp = pmp or PmpParams()
    scopf = scopf or scopf_defaults()
    lascopf = lascopf or lascopf_defaults()
    if horizon is not None and horizon != case.horizon:
        case = replace(case, horizon=int(horizon))
    T = case.horizon
    net = build_network(case)
    cont = case.contingency_lines if contingencies is None else tuple(contingencies)
    scen = generate_scenarios(net, cont)
    gens = generator_order(net)
    G = len(gens)
    p0 = np.array([g.sched_mw for g in gens] if p0_mw is None else p0_mw, dtype=float)

    warm = warm or {}
    beliefs = warm.get("beliefs") or BeliefSet.initial(p0, T)
    lam = warm.get("lam") or LambdaState.zeros(G, T)
    states = list(warm.get("states") or [None] * T)

    outer_trace, inner_trace = [], []

    def inner_sink(rec):
        inner_trace.append(rec)
        if sink is not None:
            sink(rec)

    look = T > 1 and lascopf.beta > 0
    converged = False
    mu = 0
    res = 0.0
    par_time = 0.0
    results = [None] * T
    scopf_iters = [0] * T
    pool = None
    if jobs > 1 and T > 1:
        from concurrent.futures import ProcessPoolExecutor

        pool = ProcessPoolExecutor(max_workers=jobs)
    try:
        for mu in range(1, lascopf.max_outer + 1):
            subs = [build_interval_subproblem(k + 1, beliefs, lam, lascopf, net, p0) for k in range(T)]
            tasks = [(k, subs[k], net, scen, scopf, pmp, states[k], trace_pmp) for k in range(T)]
            if pool is not None:
                done = list(pool.map(_solve_interval, tasks))
            else:
                done = [_solve_interval(tk) for tk in tasks]
            new = beliefs.copy()
            slowest = 0.0
            for k, r in done:
                for rec in r.residual_trace:
                    inner_sink({**rec, "outer": mu})
                if sink is not None:
                    for rec in r.pmp_trace:
                        sink({**rec, "outer": mu})
                results[k] = r
                states[k] = r.state
                scopf_iters[k] += r.outer_iterations
                slowest = max(slowest, r.parallel_time)
                new.own[:, k] = r.dispatch_mw
                if look:
                    for g in range(G):
                        xs = r.private[g]
                        j = 1
                        if k > 0:
                            new.prev[g, k] = xs[j]
                            j += 1
                        if k < T - 1:
                            new.nxt[g, k] = xs[j]
            if lascopf.beta == 0 and T > 1:
                # without proximity there are no private beliefs; neighbours read the dispatch directly
                for k in range(T):
                    if k > 0:
                        new.prev[:, k] = new.own[:, k - 1]
                    if k < T - 1:
                        new.nxt[:, k] = new.own[:, k + 1]
            par_time += slowest
            beliefs = new
            res = beliefs.residual()
            inner_ok = all(r.converged for r in results)
            rec = {"layer": "lascopf", "iter": mu, "residual": res, "objective": case.total_cost(beliefs.own),
                   "elapsed": time.perf_counter() - t_start}
            outer_trace.append(rec)
            if sink is not None:
                sink(rec)
            log.info("outer %d: residual %.4g MW, objective %.6g", mu, res, rec["objective"])
            if res <= lascopf.eps and inner_ok:
                converged = True
                break
            if T > 1:
                lam = update_interval_duals(lam, beliefs, alpha_at(lascopf.alpha, mu) / net.base_mva**2)
    finally:
        if pool is not None:
            pool.shutdown()

    lmp = np.stack([r.lmp for r in results])
    angles = np.stack([r.angles for r in results])
    return LascopfReport(
        dispatch_mw=beliefs.own.copy(),
        objective=case.total_cost(beliefs.own),
        converged=converged,
        outer_iterations=mu,
        outer_trace=outer_trace,
        inner_trace=inner_trace,
        scopf_iterations=scopf_iters,
        pmp_iterations=sum(r["pmp_iterations"] for r in inner_trace),
        lmp=lmp,
        angles=angles,
        beliefs=beliefs,
        lam=lam,
        states=states,
        wall_time=time.perf_counter() - t_start,
        parallel_time=par_time,
        residual=res,
        results=results,
    )


def mpc_roll(case: CaseSpec, report: LascopfReport, new_row: dict | None):
    """Commit interval 1 and shift the horizon by one interval.

    Returns ``(next_case, warm)`` where ``warm`` seeds interval t of the
    next solve with interval t+1 of this one (the last interval reuses its
    own state); interval multipliers start from zero.
    """
    if new_row is None:
        raise ValueError("rolling forward needs the forecast row of the new last interval")
    T = case.horizon
    if report.dispatch_mw.shape[1] != T:
        raise ValueError(f"report covers {report.dispatch_mw.shape[1]} intervals, case horizon is {T}")
    missing = set(case.loads) - set(new_row)
    if missing:
        raise ValueError(f"new forecast row has no entry for load bus {min(missing)}")
    committed = report.dispatch_mw[:, 0]
    gens = list(case.generators)
    net_order = [g.id for g in generator_order(build_network(case))]
    by_id = {gid: committed[i] for i, gid in enumerate(net_order)}
    new_gens = tuple(replace(g, sched_mw=float(min(max(by_id[g.id], g.p_min), g.p_max))) for g in gens)
    forecast = tuple(case.forecast[1:T]) + (dict(new_row),)
    nxt = replace(case, generators=new_gens, forecast=forecast, loads=dict(forecast[0]))

    def shift(a):
        if a.shape[1] <= 1:
            return a.copy()
        return np.concatenate([a[:, 1:], a[:, -1:]], axis=1)

    b = report.beliefs
    beliefs = BeliefSet(shift(b.own), shift(b.prev), shift(b.nxt))
    beliefs.prev[:, 0] = np.nan
    if T > 1:
        beliefs.nxt[:, -1] = np.nan
        beliefs.prev[:, -1] = beliefs.own[:, -2]
        beliefs.nxt[:, -2] = beliefs.own[:, -1]
    # multipliers restart at zero: shifted ones price the old boundaries and
    # cost far more outer iterations than they save
    lam = LambdaState.zeros(len(net_order), T)
    states = list(report.states[1:]) + [report.states[-1]] if T > 1 else list(report.states)
    return nxt, {"beliefs": beliefs, "lam": lam, "states": states}
