"""Proximal operators of the device objectives.

Every operator evaluates

    prox_{f, rho}(v) = argmin_x  f(x) + (rho / 2) ||x - v||^2

for one device class. Powers are per-unit, angles are radians, and the
terminal sign convention is injection into the net (generation positive,
consumption negative).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

INF = math.inf
_FEAS_TOL = 1e-10
_MULT_TOL = 1e-10


class GeneratorInfeasible(ValueError):
    """Box and ramp limits of a generator leave no feasible output."""

    def __init__(self, message, device=None):
        super().__init__(message if device is None else f"generator {device}: {message}")
        self.device = device


@dataclass(frozen=True)
class BeliefVar:
    """A private copy of the generator's output in a neighbouring interval.

    ``weight`` is the proximity weight towards ``anchor`` (the previous
    outer iterate) and ``lin`` collects the consensus and multiplier terms.
    """

    weight: float
    anchor: float
    lin: float = 0.0


@dataclass(frozen=True)
class GenLocalProblem:
    """Local problem of one generator in one OPF column (per-unit, $/h).

    Cost ``A p^2 + B p + C`` on the net-attached output ``p``, plus an
    optional proximity ``(prox_weight/2)(p - prox_anchor)^2`` and linear
    term ``lin * p``. Ramp windows ``r_down <= next - p <= r_up`` and
    ``r_down <= p - prev <= r_up`` are taken against either a constant
    (``prev_fixed`` / ``next_fixed``) or a private belief variable.
    """

    A: float
    B: float
    C: float
    p_min: float
    p_max: float
    r_down: float = -INF
    r_up: float = INF
    prev_fixed: float | None = None
    next_fixed: float | None = None
    prev: BeliefVar | None = None
    next: BeliefVar | None = None
    prox_weight: float = 0.0
    prox_anchor: float = 0.0
    lin: float = 0.0

    def __post_init__(self):
        if self.prev is not None and self.prev_fixed is not None:
            raise ValueError("previous-interval ramp is either fixed or a belief, not both")
        if self.next is not None and self.next_fixed is not None:
            raise ValueError("next-interval ramp is either fixed or a belief, not both")

    @property
    def n_vars(self) -> int:
        return 1 + (self.prev is not None) + (self.next is not None)

    def own_window(self) -> tuple[float, float]:
        """Feasible interval of the net-attached output alone."""
        lo, hi = self.p_min, self.p_max
        if self.p_min > self.p_max:
            raise GeneratorInfeasible("p_min > p_max")
        if self.prev_fixed is not None:
            lo2, hi2 = self.prev_fixed + self.r_down, self.prev_fixed + self.r_up
            if lo2 > hi + _FEAS_TOL or hi2 < lo - _FEAS_TOL:
                raise GeneratorInfeasible(
                    "box [p_min, p_max] and ramp window from the previous interval do not intersect"
                )
            lo, hi = max(lo, lo2), min(hi, hi2)
        if self.next_fixed is not None:
            lo2, hi2 = self.next_fixed - self.r_up, self.next_fixed - self.r_down
            if lo2 > hi + _FEAS_TOL or hi2 < lo - _FEAS_TOL:
                raise GeneratorInfeasible(
                    "box [p_min, p_max] and ramp window to the next interval do not intersect"
                )
            lo, hi = max(lo, lo2), min(hi, hi2)
        return lo, max(hi, lo)

    def is_feasible(self, x, tol=1e-9) -> bool:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        qp = compile_generator(self)
        return bool(np.all(qp.G @ x <= qp.h + tol))

    def objective(self, x) -> float:
        """Local objective at ``x = (p, [prev belief], [next belief])``; inf if infeasible."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if not self.is_feasible(x):
            return INF
        p = x[0]
        val = self.A * p * p + self.B * p + self.C + self.lin * p
        val += 0.5 * self.prox_weight * (p - self.prox_anchor) ** 2
        k = 1
        for b in (self.prev, self.next):
            if b is not None:
                val += 0.5 * b.weight * (x[k] - b.anchor) ** 2 + b.lin * x[k]
                k += 1
        return float(val)


@dataclass
class GenQP:
    """``min 1/2 x'diag(h)x + g'x  s.t.  G x <= h_rhs`` for one generator.

    Row order of ``G``: lower/upper bound of each variable, then the two
    sides of each ramp link. ``last_active`` caches the optimal working set
    of the previous call; successive prox evaluations inside an ADMM loop
    almost always share it.
    """

    hdiag: np.ndarray
    g: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lo0: float
    hi0: float
    last_active: tuple[int, ...] = ()
    _subsets: list = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return len(self.hdiag)

    def solve(self, extra_h0: float = 0.0, extra_g0: float = 0.0) -> np.ndarray:
        """Minimizer after adding ``extra_h0/2 p^2 + extra_g0 p`` to the own output."""
        h0 = self.hdiag[0] + extra_h0
        g0 = self.g[0] + extra_g0
        if self.n == 1:
            if h0 <= 0:
                return np.array([self.lo0 if g0 > 0 else self.hi0])
            return np.array([min(max(-g0 / h0, self.lo0), self.hi0)])
        hd = self.hdiag.copy()
        hd[0] = h0
        g = self.g.copy()
        g[0] = g0
        if self.last_active is not None:
            x = self._try(self.last_active, hd, g)
            if x is not None:
                return x
        if not self._subsets:
            rows = range(len(self.h))
            for k in range(self.n + 1):
                self._subsets.extend(itertools.combinations(rows, k))
        for act in self._subsets:
            x = self._try(act, hd, g)
            if x is not None:
                self.last_active = act
                return x
        raise GeneratorInfeasible("no active set satisfies the KKT conditions")

    def _try(self, act, hd, g):
        n = self.n
        if not act:
            if np.any(hd <= 0):
                return None
            x = -g / hd
            mu = ()
        else:
            Ga = self.G[list(act)]
            m = len(act)
            kkt = np.zeros((n + m, n + m))
            kkt[np.arange(n), np.arange(n)] = hd
            kkt[:n, n:] = Ga.T
            kkt[n:, :n] = Ga
            rhs = np.concatenate([-g, self.h[list(act)]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                return None
            if not np.all(np.isfinite(sol)):
                return None
            x, mu = sol[:n], sol[n:]
            if np.any(mu < -_MULT_TOL * max(1.0, np.abs(mu).max())):
                return None
        scale = 1.0 + np.abs(self.h)
        if np.any(self.G @ x > self.h + _FEAS_TOL * scale):
            return None
        return x


def compile_generator(prob: GenLocalProblem) -> GenQP:
    """Assemble the diagonal QP of a generator local problem."""
    lo0, hi0 = prob.own_window()
    hd = [2.0 * prob.A + prob.prox_weight]
    g = [prob.B + prob.lin - prob.prox_weight * prob.prox_anchor]
    bounds = [(lo0, hi0)]
    links = []  # (i, j): r_down <= x_j - x_i <= r_up
    k = 1
    if prob.prev is not None:
        hd.append(prob.prev.weight)
        g.append(prob.prev.lin - prob.prev.weight * prob.prev.anchor)
        bounds.append((prob.p_min, prob.p_max))
        links.append((k, 0))
        k += 1
    if prob.next is not None:
        hd.append(prob.next.weight)
        g.append(prob.next.lin - prob.next.weight * prob.next.anchor)
        bounds.append((prob.p_min, prob.p_max))
        links.append((0, k))
        k += 1
    n = k
    rows, rhs = [], []
    for i, (lo, hi) in enumerate(bounds):
        if math.isfinite(lo):
            r = np.zeros(n)
            r[i] = -1.0
            rows.append(r)
            rhs.append(-lo)
        if math.isfinite(hi):
            r = np.zeros(n)
            r[i] = 1.0
            rows.append(r)
            rhs.append(hi)
    for i, j in links:
        if math.isfinite(prob.r_up):
            r = np.zeros(n)
            r[j], r[i] = 1.0, -1.0
            rows.append(r)
            rhs.append(prob.r_up)
        if math.isfinite(prob.r_down):
            r = np.zeros(n)
            r[j], r[i] = -1.0, 1.0
            rows.append(r)
            rhs.append(-prob.r_down)
    G = np.array(rows).reshape(-1, n)
    return GenQP(np.array(hd), np.array(g), G, np.array(rhs), lo0, hi0)


@dataclass(frozen=True)
class ProxInput:
    """Prox targets of one device: one power and one angle entry per slot."""

    v_p: np.ndarray
    v_theta: np.ndarray
    rho: float

    def __post_init__(self):
        object.__setattr__(self, "v_p", np.atleast_1d(np.asarray(self.v_p, dtype=float)))
        object.__setattr__(self, "v_theta", np.atleast_1d(np.asarray(self.v_theta, dtype=float)))
        if self.rho <= 0:
            raise ValueError("rho must be positive")


def solve_generator(prob: GenLocalProblem, inp: ProxInput, qp: GenQP | None = None) -> np.ndarray:
    """Full minimizer ``(p, [prev belief], [next belief])`` of the generator prox."""
    qp = compile_generator(prob) if qp is None else qp
    k = len(inp.v_p)
    return qp.solve(inp.rho * k, -inp.rho * float(inp.v_p.sum()))


def prox_generator(prob: GenLocalProblem, inp: ProxInput):
    """Generator prox over its scenario slots.

    All power slots share the single base-case output, so the slots couple
    only through it; the angle slots are free (the cost does not depend on
    angles) and pass through.
    """
    x = solve_generator(prob, inp)
    return np.full(len(inp.v_p), x[0]), inp.v_theta.copy()


@dataclass(frozen=True)
class LineLocalProblem:
    """A transmission line across scenario slots (per-unit)."""

    reactance: float
    limit: np.ndarray  # per slot; inf where the limit is inactive
    outaged: np.ndarray  # bool per slot

    def __post_init__(self):
        if not self.reactance > 0:
            raise ValueError("reactance must be positive")


def project_lines(p1, p2, t1, t2, reactance, limit, outaged=None):
    """Vectorized line prox: projection onto the DC power-angle set with a flow cap.

    Arrays broadcast against each other; ``reactance``/``limit`` are usually
    shaped ``(n_lines, 1)`` against ``(n_lines, n_slots)`` targets. The flow
    ``f = (t1 - t2)/X`` is the power leaving terminal 1 towards terminal 2,
    so the terminal injections are ``(-f, +f)``.
    """
    x = reactance
    f = (p2 - p1 + 0.5 * x * (t1 - t2)) / (2.0 + 0.5 * x * x)
    f = np.clip(f, -limit, limit)
    m = 0.5 * (t1 + t2)
    q1, q2 = -f, f
    a1, a2 = m + 0.5 * x * f, m - 0.5 * x * f
    if outaged is not None and np.any(outaged):
        q1 = np.where(outaged, 0.0, q1)
        q2 = np.where(outaged, 0.0, q2)
        a1 = np.where(outaged, t1, a1)
        a2 = np.where(outaged, t2, a2)
    return q1, q2, a1, a2


def prox_line(prob: LineLocalProblem, inp: ProxInput):
    """Prox of one line; ``v_p``/``v_theta`` are ``(2, n_slots)`` (terminal rows)."""
    vp = np.asarray(inp.v_p, dtype=float).reshape(2, -1)
    vt = np.asarray(inp.v_theta, dtype=float).reshape(2, -1)
    q1, q2, a1, a2 = project_lines(
        vp[0], vp[1], vt[0], vt[1], prob.reactance, np.asarray(prob.limit), np.asarray(prob.outaged)
    )
    return np.vstack([q1, q2]), np.vstack([a1, a2])


def prox_load(fixed_mw: float, inp: ProxInput, base_mva: float = 100.0):
    """A fixed load: power pinned to the (negative) consumption, angle free."""
    return np.full(len(inp.v_p), -fixed_mw / base_mva), inp.v_theta.copy()
