"""Proximal message passing: ADMM over the devices-terminals-nets graph.

One iteration is a broadcast (every device evaluates its prox at targets
built from the previous net state) followed by a gather (nets average the
terminal powers and angles and update the scaled prices). State arrays are
shaped ``(n_terminals, n_columns)``: a column is one scenario OPF of one
dispatch interval.

Two column layouts are supported. In a *coupled* subproblem all columns
are scenarios of one security-constrained OPF, so each generator has a
single output shared by its terminal in every column and one penalty
``rho`` serves the whole block. In an *independent* subproblem every
column is its own OPF with its own generator problem, penalty and stopping
test; the columns merely share the vectorized iteration.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import DtnNetwork, ScenarioSet, generator_order
from .prox import GeneratorInfeasible, GenLocalProblem, compile_generator, project_lines

log = logging.getLogger(__name__)


class PmpDivergence(RuntimeError):
    """Residuals blew up or became NaN; usually an infeasible subproblem."""

    def __init__(self, message, iteration=None, r_norm=None, column=None):
        super().__init__(message)
        self.iteration = iteration
        self.r_norm = r_norm
        self.column = column


@dataclass(frozen=True)
class PmpParams:
    rho: float = 1.0
    eps_pri: float = 0.06
    eps_dual: float = 0.6
    eps_abs: float | None = None
    max_iter: int = 20000
    rho_freeze_iter: int = 3000
    # PD gains on log(rho); zero keeps rho at its initial value (see README)
    kp: float = 0.0
    kd: float = 0.0
    rho_min: float = 1e-4
    rho_max: float = 1e4
    divergence_limit: float = 1e6
    # "literal": e = log(|s| / (rho |r|)), rho *= exp(+PD(e))
    # "balance": e = log(|s| / |r|),       rho *= exp(-PD(e))
    rho_law: str = "literal"
    # residual units: power in MW by default, angles as MW across the stiffest line
    power_scale: float | None = None
    angle_scale: float | None = None

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not (self.eps_pri > 0 and self.eps_dual > 0):
            raise ValueError("tolerances must be positive")
        if self.eps_abs is not None and not self.eps_abs > 0:
            raise ValueError("eps_abs must be positive")
        if self.rho_law not in ("literal", "balance"):
            raise ValueError(f"unknown rho_law {self.rho_law!r}")


@dataclass
class PlanState:
    P: np.ndarray
    theta: np.ndarray
    z: np.ndarray
    xi: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls(*(np.zeros(shape) for _ in range(4)))

    def copy(self):
        return PlanState(self.P.copy(), self.theta.copy(), self.z.copy(), self.xi.copy())


@dataclass
class DualState:
    u: np.ndarray
    v: np.ndarray
    rho: np.ndarray  # one entry per column

    @classmethod
    def zeros(cls, shape, rho=1.0):
        return cls(np.zeros(shape), np.zeros(shape), np.full(shape[1], float(rho)))

    def copy(self):
        return DualState(self.u.copy(), self.v.copy(), self.rho.copy())


@dataclass
class Residuals:
    """Residual norms per block (one block when columns are coupled)."""

    r_norm: np.ndarray
    s_norm: np.ndarray
    rho: np.ndarray  # penalty per block used to form s
    n_terminals: int = 0
    n_scenarios: int = 1
    r: np.ndarray | None = field(default=None, repr=False)
    s: np.ndarray | None = field(default=None, repr=False)

    @property
    def r_total(self) -> float:
        return float(np.sqrt(np.sum(self.r_norm**2)))

    @property
    def s_total(self) -> float:
        return float(np.sqrt(np.sum(self.s_norm**2)))


@dataclass
class OpfSubproblem:
    """Device data of one batch of OPF columns.

    ``gens[g]`` is a single :class:`GenLocalProblem` when ``coupled`` (one
    output shared by all columns) and otherwise a sequence with one problem
    per column.
    """

    network: DtnNetwork
    scenarios: ScenarioSet
    labels: Sequence[int]
    load_mw: np.ndarray  # (n_loads, n_columns)
    gens: list
    coupled: bool = True

    @property
    def n_columns(self) -> int:
        return len(self.labels)


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    r_norm: float
    s_norm: float
    rho: np.ndarray
    objective: float
    dispatch_mw: np.ndarray  # (G,) when coupled else (G, n_columns)
    angles: np.ndarray  # (n_nets, n_columns), net 0 at angle 0
    lmp: np.ndarray  # (n_nets, n_columns) $/MWh
    wall_time: float
    trace: list = field(default_factory=list, repr=False)
    private: dict = field(default_factory=dict, repr=False)  # (g, col) -> full generator minimizer


def generator_problem(gen, base_mva, **kw) -> GenLocalProblem:
    """Per-unit local problem of a case generator; ``kw`` are MW-free pu fields."""
    b = base_mva
    return GenLocalProblem(
        A=gen.A * b * b,
        B=gen.B * b,
        C=gen.C,
        p_min=gen.p_min / b,
        p_max=gen.p_max / b,
        r_down=gen.r_down / b,
        r_up=gen.r_up / b,
        **kw,
    )


def opf_subproblem(net: DtnNetwork, scenarios: ScenarioSet, interval: int = 1, labels=None,
                   p0_mw=None, ramp_boundary=True, coupled=True) -> OpfSubproblem:
    """Plain (no APP terms) SCOPF of one interval over the given scenario labels."""
    labels = list(scenarios.labels if labels is None else labels)
    base = net.base_mva
    gens = generator_order(net)
    p0 = [g.sched_mw for g in gens] if p0_mw is None else list(p0_mw)
    probs = []
    for g, p in zip(gens, p0):
        kw = {"prev_fixed": p / base} if ramp_boundary else {}
        probs.append(generator_problem(g, base, **kw))
    if not coupled:
        probs = [[p] * len(labels) for p in probs]
    load = np.repeat(net.load_vector(interval)[:, None], len(labels), axis=1)
    return OpfSubproblem(net, scenarios, labels, load, probs, coupled)


class PmpEngine:
    """Compiled index arrays and device data for fast iterations."""

    def __init__(self, sub: OpfSubproblem, params: PmpParams):
        net = sub.network
        self.sub = sub
        self.params = params
        self.net = net
        self.base = net.base_mva
        self.T = net.n_terminals
        self.S = sub.n_columns
        self.coupled = sub.coupled
        self.block = np.zeros(self.S, dtype=int) if sub.coupled else np.arange(self.S)
        self.n_blocks = 1 if sub.coupled else self.S

        order = np.argsort(net.term_net, kind="stable")
        self.perm = order
        counts = np.bincount(net.term_net, minlength=net.n_nets)
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.counts = counts.astype(float)[:, None]

        lab = list(sub.labels)
        self.X = net.line_reactance[:, None]
        self.limit = sub.scenarios.limit[lab].T.copy()  # (L, S)
        self.outaged = (sub.scenarios.susceptance[lab] == 0).T
        self.any_outage = bool(self.outaged.any())
        self.load_p = -np.asarray(sub.load_mw, dtype=float) / self.base

        # penalties are quoted in $/h per MW^2; the iteration runs in per-unit
        self.rho_unit = self.base * self.base
        self.power_scale = params.power_scale or self.base
        if params.angle_scale is not None:
            self.angle_scale = params.angle_scale
        else:
            self.angle_scale = self.base / float(net.line_reactance.min()) if net.n_lines else self.base

        self._compile_gens()

    def _compile_gens(self):
        G = self.net.n_gens
        shape = (G, 1) if self.coupled else (G, self.S)
        self.g_h0 = np.zeros(shape)
        self.g_g0 = np.zeros(shape)
        self.g_lo = np.zeros(shape)
        self.g_hi = np.zeros(shape)
        self.complex = []  # (g, col or None, GenQP)
        dev_ids = [d.id for d in self.net.devices if d.kind == "gen"]
        for g in range(G):
            probs = [self.sub.gens[g]] if self.coupled else list(self.sub.gens[g])
            if len(probs) != shape[1]:
                raise ValueError(f"generator {dev_ids[g]}: expected {shape[1]} column problems")
            for k, prob in enumerate(probs):
                try:
                    qp = compile_generator(prob)
                except GeneratorInfeasible as exc:
                    raise GeneratorInfeasible(str(exc), device=dev_ids[g]) from None
                self.g_h0[g, k] = qp.hdiag[0]
                self.g_g0[g, k] = qp.g[0]
                self.g_lo[g, k] = qp.lo0
                self.g_hi[g, k] = qp.hi0
                if qp.n > 1:
                    self.complex.append((g, None if self.coupled else k, qp))
        self.private = {}

    # -- gather helpers -------------------------------------------------
    def net_mean(self, X):
        return np.add.reduceat(X[self.perm], self.starts, axis=0) / self.counts

    def expand(self, Y):
        return Y[self.net.term_net]

    def col_rho(self, rho_block):
        return rho_block[self.block] if not self.coupled else np.full(self.S, rho_block[0])

    # -- broadcast ------------------------------------------------------
    def prox(self, vP, vT, rho):
        """All device prox evaluations; ``rho`` per column."""
        net = self.net
        P = np.empty_like(vP)
        th = vT.copy()  # generators and loads pass angles through
        rho = rho * self.rho_unit

        vg = vP[net.gen_term]
        if self.coupled:
            r = rho[0]
            tot = vg.sum(axis=1, keepdims=True)
            x = (r * tot - self.g_g0) / (self.g_h0 + r * self.S)
            x = np.clip(x, self.g_lo, self.g_hi)
            for g, _, qp in self.complex:
                xs = qp.solve(r * self.S, -r * float(tot[g, 0]))
                x[g, 0] = xs[0]
                self.private[(g, None)] = xs
            P[net.gen_term] = x
        else:
            x = (rho * vg - self.g_g0) / (self.g_h0 + rho)
            x = np.clip(x, self.g_lo, self.g_hi)
            for g, k, qp in self.complex:
                xs = qp.solve(rho[k], -rho[k] * vg[g, k])
                x[g, k] = xs[0]
                self.private[(g, k)] = xs
            P[net.gen_term] = x

        f, t = net.line_from_term, net.line_to_term
        q1, q2, a1, a2 = project_lines(
            vP[f], vP[t], vT[f], vT[t], self.X, self.limit, self.outaged if self.any_outage else None
        )
        P[f], P[t], th[f], th[t] = q1, q2, a1, a2
        P[net.load_term] = self.load_p
        return P, th

    def iterate(self, plan: PlanState, dual: DualState):
        rho = dual.rho
        vP = plan.z - dual.u
        vT = plan.xi - dual.v
        P, th = self.prox(vP, vT, rho)
        Pbar = self.net_mean(P)
        ubar = self.net_mean(dual.u)
        z = P + dual.u - self.expand(Pbar + ubar)
        that = self.net_mean(th)
        vhat = self.net_mean(dual.v)
        xi = self.expand(that + vhat)
        u = dual.u + P - z
        v = dual.v + th - xi
        return PlanState(P, th, z, xi), DualState(u, v, rho.copy())

    def residuals(self, prev: PlanState, cur: PlanState, rho) -> Residuals:
        ps, ang = self.power_scale, self.angle_scale
        pbar = self.net_mean(cur.P)
        tbar = self.net_mean(cur.theta)
        ttil = cur.theta - self.expand(tbar)
        pprev = self.net_mean(prev.P)
        tprev = self.net_mean(prev.theta)
        r2 = (ps * pbar) ** 2
        r2 = r2.sum(axis=0) + ((ang * ttil) ** 2).sum(axis=0)
        dP = (cur.P - self.expand(pbar)) - (prev.P - self.expand(pprev))
        dT = self.expand(tbar - tprev)
        rc = rho if rho.shape[0] == self.S else self.col_rho(rho)
        s2 = (rc * ps * dP) ** 2
        s2 = s2.sum(axis=0) + ((rc * ang * dT) ** 2).sum(axis=0)
        r_b = np.sqrt(np.bincount(self.block, weights=r2, minlength=self.n_blocks))
        s_b = np.sqrt(np.bincount(self.block, weights=s2, minlength=self.n_blocks))
        rho_b = rc[:1] if self.coupled else rc
        per = self.S if self.coupled else 1
        return Residuals(r_b, s_b, rho_b.copy(), self.T, per)

    # -- reporting ------------------------------------------------------
    def objective(self, P):
        """Generation cost ($/h) at the current generator outputs, summed over blocks."""
        gens = generator_order(self.net)
        x = P[self.net.gen_term] * self.base
        if self.coupled:
            x = x[:, :1]
        return float(sum(g.cost(x[i]).sum() for i, g in enumerate(gens)))


def compute_residuals(prev: PlanState, cur: PlanState, engine: PmpEngine, rho) -> Residuals:
    if prev.P.shape != cur.P.shape or prev.theta.shape != cur.theta.shape:
        raise ValueError(f"plan shapes differ: {prev.P.shape} vs {cur.P.shape}")
    return engine.residuals(prev, cur, np.asarray(rho, dtype=float).reshape(-1))


def stop_thresholds(res: Residuals, params: PmpParams):
    if params.eps_abs is not None:
        e = params.eps_abs * math.sqrt(res.n_terminals * res.n_scenarios)
        return e, e
    return params.eps_pri, params.eps_dual


def stop_mask(res: Residuals, params: PmpParams) -> np.ndarray:
    if not (np.all(np.isfinite(res.r_norm)) and np.all(np.isfinite(res.s_norm))):
        raise PmpDivergence("residual norm is not finite")
    ep, ed = stop_thresholds(res, params)
    return (res.r_norm <= ep) & (res.s_norm <= ed)


def check_stop(res: Residuals, params: PmpParams) -> bool:
    return bool(np.all(stop_mask(res, params)))


def _rho_error(res: Residuals, law: str):
    with np.errstate(divide="ignore", invalid="ignore"):
        if law == "literal":
            return np.log(res.s_norm / (res.rho * res.r_norm))
        return np.log(res.s_norm / res.r_norm)


def adapt_rho(rho, res: Residuals, prev_res: Residuals | None, iteration: int, params: PmpParams):
    """Multiplicative log-domain PD step on the penalty.

    The ``literal`` law steers ``rho * ||r||`` towards ``||s||`` by
    ``rho' = rho exp(kp e + kd (e - e_prev))`` with
    ``e = log(||s|| / (rho ||r||))``. The ``balance`` law uses
    ``e = log(||s|| / ||r||)`` with the opposite sign (raise rho while the
    primal residual dominates). Elementwise on per-block arrays; blocks with
    a zero residual keep their penalty, and rho is frozen after
    ``rho_freeze_iter`` iterations.
    """
    rho = np.asarray(rho, dtype=float)
    if iteration > params.rho_freeze_iter:
        return rho.copy()
    e = _rho_error(res, params.rho_law)
    e_prev = _rho_error(prev_res, params.rho_law) if prev_res is not None else e
    with np.errstate(invalid="ignore"):
        e_prev = np.where(np.isfinite(e_prev), e_prev, e)
        step = params.kp * e + params.kd * (e - e_prev)
    if params.rho_law == "balance":
        step = -step
    ok = np.isfinite(step)
    out = np.where(ok, rho * np.exp(np.where(ok, step, 0.0)), rho)
    return np.clip(out, params.rho_min, params.rho_max)


def pmp_iterate(plan: PlanState, dual: DualState, engine: PmpEngine):
    return engine.iterate(plan, dual)


def _final_report(engine, plan, dual, converged, it, res, trace, t0):
    net = engine.net
    base = engine.base
    disp = plan.P[net.gen_term] * base
    if engine.coupled:
        disp = disp[:, 0].copy()
    xi = engine.net_mean(plan.xi)
    angles = xi - xi[:1]
    ubar = engine.net_mean(dual.u)
    lmp = -dual.rho[None, :] * engine.rho_unit * ubar / base
    return SolveReport(
        converged=converged,
        iterations=it,
        r_norm=res.r_total if res is not None else 0.0,
        s_norm=res.s_total if res is not None else 0.0,
        rho=dual.rho.copy(),
        objective=engine.objective(plan.P),
        dispatch_mw=disp,
        angles=angles,
        lmp=lmp,
        wall_time=time.perf_counter() - t0,
        trace=trace,
        private=dict(engine.private),
    )


def run_pmp(sub: OpfSubproblem | PmpEngine, warm=None, params: PmpParams | None = None,
            sink: Callable[[dict], None] | None = None, trace_every: int = 1, active=None):
    """Iterate until every block passes the stopping test or ``max_iter``.

    ``warm`` is an optional ``(PlanState, DualState)`` pair; a cold start
    zero-initializes every state with ``rho = params.rho``. Blocks that have
    converged are frozen while the rest continue. Returns
    ``(PlanState, DualState, SolveReport)``.
    """
    params = params or PmpParams()
    engine = sub if isinstance(sub, PmpEngine) else PmpEngine(sub, params)
    t0 = time.perf_counter()
    shape = (engine.T, engine.S)
    if warm is not None:
        plan, dual = warm[0].copy(), warm[1].copy()
        if plan.P.shape != shape:
            raise ValueError(f"warm start shape {plan.P.shape} does not match {shape}")
    else:
        plan, dual = PlanState.zeros(shape), DualState.zeros(shape, params.rho)
    rho_b = dual.rho[:1].copy() if engine.coupled else dual.rho.copy()

    trace = []
    prev_res = None
    res = None
    done = np.zeros(engine.n_blocks, dtype=bool)
    it = 0
    for it in range(1, params.max_iter + 1):
        new_plan, new_dual = engine.iterate(plan, dual)
        res = engine.residuals(plan, new_plan, dual.rho)
        if not np.all(np.isfinite(res.r_norm)) or np.any(res.r_norm > params.divergence_limit):
            raise PmpDivergence(
                f"primal residual {res.r_total:.3g} exceeded {params.divergence_limit:g} at iteration {it}",
                it,
                res.r_total,
                None if engine.coupled else int(np.nanargmax(np.where(np.isfinite(res.r_norm), res.r_norm, np.inf))),
            )
        if done.any():
            # frozen blocks keep their converged state
            keep = done[engine.block]
            new_plan.P[:, keep] = plan.P[:, keep]
            new_plan.theta[:, keep] = plan.theta[:, keep]
            new_plan.z[:, keep] = plan.z[:, keep]
            new_plan.xi[:, keep] = plan.xi[:, keep]
            new_dual.u[:, keep] = dual.u[:, keep]
            new_dual.v[:, keep] = dual.v[:, keep]
        plan, dual = new_plan, new_dual
        newly = stop_mask(res, params) & ~done
        done |= newly
        if sink is not None and (it % trace_every == 0 or done.all()):
            rec = {"layer": "pmp", "iter": it, "r": res.r_total, "s": res.s_total, "rho": float(np.max(rho_b)),
                   "objective": engine.objective(plan.P)}
            sink(rec)
            trace.append(rec)
        if done.all():
            return plan, dual, _final_report(engine, plan, dual, True, it, res, trace, t0)
        new_rho = adapt_rho(rho_b, res, prev_res, it, params)
        new_rho = np.where(done, rho_b, new_rho)
        if np.any(new_rho != rho_b):
            scale = (rho_b / new_rho)[engine.block] if not engine.coupled else np.full(engine.S, rho_b[0] / new_rho[0])
            dual.u *= scale
            dual.v *= scale
            rho_b = new_rho
            dual.rho = engine.col_rho(rho_b) if not engine.coupled else np.full(engine.S, rho_b[0])
        prev_res = res
    log.info("PMP stopped at max_iter=%d with r=%.4g s=%.4g", params.max_iter, res.r_total, res.s_total)
    return plan, dual, _final_report(engine, plan, dual, False, it, res, trace, t0)
