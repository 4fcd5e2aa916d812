"""Centralized reference solver for the look-ahead SCOPF.

The whole multi-interval, multi-scenario DC problem is assembled as one
convex QP straight from the case data (MW, radians) and solved by a
null-space primal active-set method. None of the distributed machinery is
used here, so agreement with the message-passing solver is real evidence.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .grid import CaseSpec, ScenarioSet, forecast_at

log = logging.getLogger(__name__)

KKT_TOL = 1e-8


class OracleError(RuntimeError):
    pass


@dataclass
class CentralProblem:
    """``min 1/2 x'diag(H)x + c'x + const  s.t.  A_eq x = b_eq,  A_ub x <= b_ub``.

    Variable layout: ``P[g, t]`` first (generator-major), then one angle per
    (interval, scenario, non-reference bus). Row labels are kept for
    diagnostics and to map duals back to buses.
    """

    case: CaseSpec
    horizon: int
    outages: list  # None for the base case, else line id
    H: np.ndarray
    c: np.ndarray
    const: float
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray
    eq_rows: list  # (t, s, bus)
    ub_rows: list  # (kind, ...)
    n_p: int
    theta_index: dict  # (t, s, bus) -> column, reference buses absent

    @property
    def n(self) -> int:
        return len(self.c)

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.H * x) + self.c @ x + self.const)


@dataclass
class CentralSolution:
    feasible = True
    dispatch: np.ndarray  # (G, horizon) MW
    angles: np.ndarray  # (horizon, S, n_bus) rad, reference bus 0
    objective: float
    lmp: np.ndarray  # (horizon, S, n_bus) $/MWh
    kkt_residual: float
    iterations: int
    wall_time: float
    x: np.ndarray = field(repr=False, default=None)
    problem: CentralProblem = field(repr=False, default=None)


@dataclass
class InfeasibilityCertificate:
    """Phase-1 evidence: the least total constraint violation is positive."""

    feasible = False
    phase1_objective: float
    worst_rows: list
    message: str


def _connected(buses, lines, skip):
    adj = {b: [] for b in buses}
    for ln in lines:
        if ln.id != skip:
            adj[ln.from_bus].append(ln.to_bus)
            adj[ln.to_bus].append(ln.from_bus)
    seen = {buses[0]}
    todo = deque([buses[0]])
    while todo:
        for nb in adj[todo.popleft()]:
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    return len(seen) == len(buses)


def build_central_problem(case: CaseSpec, contingencies=None, horizon=None, ramp_boundary=True) -> CentralProblem:
    """Assemble the conventional multi-interval SCOPF from case data."""
    T = case.horizon if horizon is None else int(horizon)
    if contingencies is None:
        contingencies = list(case.contingency_lines)
    outages = [None] + list(contingencies)
    lines = {ln.id: ln for ln in case.lines}
    for lid in contingencies:
        if lid not in lines:
            raise OracleError(f"unknown contingency line {lid}")
    buses = sorted(case.buses)
    ref = buses[0]
    for lid in outages:
        if not _connected(buses, case.lines, lid):
            raise OracleError(f"outage of line {lid} islands the network")
    gens = list(case.generators)
    G = len(gens)
    base = case.base_mva

    n_p = G * T
    theta_index = {}
    col = n_p
    for t in range(T):
        for s in range(len(outages)):
            for b in buses:
                if b != ref:
                    theta_index[(t, s, b)] = col
                    col += 1
    n = col
    H = np.zeros(n)
    c = np.zeros(n)
    const = 0.0
    for gi, g in enumerate(gens):
        for t in range(T):
            H[gi * T + t] = 2.0 * g.A
            c[gi * T + t] = g.B
            const += g.C

    eq_rows, eq_b = [], []
    A_eq = []
    for t in range(T):
        load = forecast_at(case, t + 1)
        for s, out in enumerate(outages):
            for b in buses:
                row = np.zeros(n)
                for gi, g in enumerate(gens):
                    if g.bus == b:
                        row[gi * T + t] += 1.0
                for ln in case.lines:
                    if ln.id == out:
                        continue
                    bmw = base / ln.reactance
                    # flow leaving b on this line: bmw * (theta_b - theta_other)
                    if ln.from_bus == b:
                        other = ln.to_bus
                    elif ln.to_bus == b:
                        other = ln.from_bus
                    else:
                        continue
                    if b != ref:
                        row[theta_index[(t, s, b)]] -= bmw
                    if other != ref:
                        row[theta_index[(t, s, other)]] += bmw
                A_eq.append(row)
                eq_b.append(load.get(b, 0.0))
                eq_rows.append((t, s, b))
    A_eq = np.array(A_eq)
    b_eq = np.array(eq_b)

    A_ub, b_ub, ub_rows = [], [], []

    def add(row, rhs, label):
        A_ub.append(row)
        b_ub.append(rhs)
        ub_rows.append(label)

    for t in range(T):
        for s, out in enumerate(outages):
            for ln in case.lines:
                if ln.id == out:
                    continue
                bmw = base / ln.reactance
                cap = ln.flow_limit * (1.0 if out is None else case.emergency_factor)
                row = np.zeros(n)
                if ln.from_bus != ref:
                    row[theta_index[(t, s, ln.from_bus)]] += bmw
                if ln.to_bus != ref:
                    row[theta_index[(t, s, ln.to_bus)]] -= bmw
                add(row, cap, ("flow+", t, s, ln.id))
                add(-row, cap, ("flow-", t, s, ln.id))
    for gi, g in enumerate(gens):
        for t in range(T):
            k = gi * T + t
            row = np.zeros(n)
            row[k] = 1.0
            add(row, g.p_max, ("pmax", gi, t))
            add(-row, -g.p_min, ("pmin", gi, t))
            # r_down <= P_t - P_{t-1} <= r_up
            row = np.zeros(n)
            row[k] = 1.0
            if t == 0:
                if not ramp_boundary:
                    continue
                add(row, g.r_up + g.sched_mw, ("ramp+", gi, t))
                add(-row, -(g.r_down + g.sched_mw), ("ramp-", gi, t))
            else:
                row[k - 1] = -1.0
                add(row, g.r_up, ("ramp+", gi, t))
                add(-row, -g.r_down, ("ramp-", gi, t))
    A_ub = np.array(A_ub).reshape(-1, n)
    return CentralProblem(
        case, T, outages, H, c, const, A_eq, b_eq, A_ub, np.array(b_ub), eq_rows, ub_rows, n_p, theta_index
    )


def _phase1(prob: CentralProblem):
    """Least-violation LP; returns (x, violation)."""
    m_eq, m_ub, n = len(prob.b_eq), len(prob.b_ub), prob.n
    # variables: x (free), e+ e- (eq slacks), w (ineq slacks)
    cost = np.concatenate([np.zeros(n), np.ones(2 * m_eq + m_ub)])
    Aeq = np.hstack([prob.A_eq, np.eye(m_eq), -np.eye(m_eq), np.zeros((m_eq, m_ub))])
    Aub = np.hstack([prob.A_ub, np.zeros((m_ub, 2 * m_eq)), -np.eye(m_ub)])
    bounds = [(None, None)] * n + [(0, None)] * (2 * m_eq + m_ub)
    res = linprog(cost, A_ub=Aub, b_ub=prob.b_ub, A_eq=Aeq, b_eq=prob.b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise OracleError(f"phase-1 LP failed: {res.message}")
    x = res.x[:n]
    slack = res.x[n:]
    return x, float(res.fun), slack


class _NullSpace:
    def __init__(self, A):
        U, s, Vt = np.linalg.svd(A, full_matrices=True)
        tol = max(A.shape) * np.finfo(float).eps * (s[0] if len(s) else 1.0)
        r = int(np.sum(s > tol))
        self.rank = r
        self.Z = Vt[r:].T
        self._U = U[:, :r]
        self._s = s[:r]
        self._V = Vt[:r].T

    def min_norm(self, b):
        return self._V @ ((self._U.T @ b) / self._s)


def _active_set(Hr, cr, Ar, d, y0, max_iter=5000, tol=1e-10):
    """Primal active-set for ``min 1/2 y'Hr y + cr'y  s.t.  Ar y <= d`` from feasible y0.

    Handles a singular reduced Hessian by stepping along a descent
    direction of zero curvature until a constraint blocks.
    """
    y = y0.copy()
    if y.size == 0:  # the equalities pin every variable
        return y, [], np.zeros(0), 0
    nrm = np.linalg.norm(Ar, axis=1)
    nrm[nrm == 0] = 1.0
    scale = 1.0 + np.abs(d)
    W = []
    slack = d - Ar @ y
    for j in np.argsort(slack / nrm):
        if slack[j] > tol * scale[j]:
            break
        cand = W + [int(j)]
        if np.linalg.matrix_rank(Ar[cand]) == len(cand) and len(cand) <= len(y):
            W = cand
    it = 0
    for it in range(1, max_iter + 1):
        g = Hr @ y + cr
        if W:
            Aw = Ar[W]
            _, sv, vt = np.linalg.svd(Aw)
            rk = int(np.sum(sv > 1e-12 * max(1.0, sv[0])))
            N = vt[rk:].T
        else:
            N = np.eye(len(y))
        if N.shape[1] == 0:
            p = np.zeros_like(y)
            ray = False
        else:
            Hn = N.T @ Hr @ N
            gn = N.T @ g
            w, Q = np.linalg.eigh(Hn)
            big = w > 1e-10 * max(1.0, np.abs(w).max(initial=0.0))
            gq = Q.T @ gn
            zero_dir = Q[:, ~big] @ gq[~big]
            if np.linalg.norm(zero_dir) > 1e-10 * max(1.0, np.linalg.norm(gn)):
                p = -N @ zero_dir
                ray = True
            else:
                p = -N @ (Q[:, big] @ (gq[big] / w[big]))
                ray = False
        if np.linalg.norm(p) <= 1e-12 * max(1.0, np.linalg.norm(y)):
            if not W:
                return y, W, np.zeros(0), it
            mu, *_ = np.linalg.lstsq(Ar[W].T, -g, rcond=None)
            k = int(np.argmin(mu))
            if mu[k] >= -1e-9 * max(1.0, np.abs(mu).max()):
                return y, W, mu, it
            W.pop(k)
            continue
        Ap = Ar @ p
        slack = d - Ar @ y
        alpha = np.inf if ray else 1.0
        block = None
        inW = np.zeros(len(d), bool)
        inW[W] = True
        cand = np.where((Ap > 1e-14 * nrm) & ~inW)[0]
        if len(cand):
            steps = np.maximum(slack[cand], 0.0) / Ap[cand]
            k = int(np.argmin(steps))
            if steps[k] < alpha:
                alpha = steps[k]
                block = int(cand[k])
        if not np.isfinite(alpha):
            raise OracleError("objective unbounded below on the feasible set")
        y = y + alpha * p
        if block is not None:
            W.append(block)
    raise OracleError(f"active-set did not terminate in {max_iter} iterations")


def solve_centralized(case: CaseSpec, contingencies=None, horizon=None, ramp_boundary=True):
    """Global optimum of the look-ahead SCOPF, or an infeasibility certificate."""
    t0 = time.perf_counter()
    prob = build_central_problem(case, contingencies, horizon, ramp_boundary)
    x1, viol, slack = _phase1(prob)
    if viol > 1e-6:
        labels = [("balance",) + r for r in prob.eq_rows] * 2 + prob.ub_rows
        order = np.argsort(-slack)[:5]
        worst = [(labels[i], float(slack[i])) for i in order if slack[i] > 1e-9]
        return InfeasibilityCertificate(viol, worst, f"minimum total constraint violation {viol:.6g} MW > 0")

    ns = _NullSpace(prob.A_eq)
    # polish the phase-1 point onto the equality set
    x1 = x1 - ns.min_norm(prob.A_eq @ x1 - prob.b_eq)
    Z = ns.Z
    Hr = Z.T @ (prob.H[:, None] * Z)
    cr = Z.T @ (prob.H * x1 + prob.c)
    Ar = prob.A_ub @ Z
    d = prob.b_ub - prob.A_ub @ x1
    y, W, mu, iters = _active_set(Hr, cr, Ar, d, np.zeros(Z.shape[1]))
    x = x1 + Z @ y

    # multipliers in the full space
    lam = np.zeros(len(prob.b_ub))
    if W:
        lam[W] = np.maximum(mu, 0.0)
    rhs = -(prob.H * x + prob.c + prob.A_ub.T @ lam)
    pi, *_ = np.linalg.lstsq(prob.A_eq.T, rhs, rcond=None)
    stat = prob.H * x + prob.c + prob.A_ub.T @ lam + prob.A_eq.T @ pi
    slack_ub = prob.b_ub - prob.A_ub @ x
    kkt = max(
        np.abs(stat).max(initial=0.0),
        np.abs(prob.A_eq @ x - prob.b_eq).max(initial=0.0),
        max(0.0, -slack_ub.min(initial=0.0)),
        np.abs(lam * slack_ub).max(initial=0.0),
    )
    if kkt > KKT_TOL:
        log.warning("oracle KKT residual %.3g above %.1g", kkt, KKT_TOL)

    T, S = prob.horizon, len(prob.outages)
    buses = sorted(case.buses)
    G = len(case.generators)
    dispatch = x[: G * T].reshape(G, T)
    angles = np.zeros((T, S, len(buses)))
    lmp = np.zeros((T, S, len(buses)))
    for (t, s, b), j in prob.theta_index.items():
        angles[t, s, buses.index(b)] = x[j]
    for i, (t, s, b) in enumerate(prob.eq_rows):
        lmp[t, s, buses.index(b)] = -pi[i]
    return CentralSolution(
        dispatch=dispatch,
        angles=angles,
        objective=prob.objective(x),
        lmp=lmp,
        kkt_residual=float(kkt),
        iterations=iters,
        wall_time=time.perf_counter() - t0,
        x=x,
        problem=prob,
    )


def dc_flows(angles, scenarios: ScenarioSet, label: int) -> np.ndarray:
    """Per-line DC flow (pu) from per-net angles in scenario ``label``.

    Flow on line r is ``B_r^(c) (theta_from - theta_to)``; the outaged line
    has zero susceptance and so reports 0.
    """
    net = scenarios.network
    th = np.asarray(angles, dtype=float)
    b = scenarios.susceptance[label]
    return b * (th[net.line_from_net] - th[net.line_to_net])
