import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lascopf.prox import (
    BeliefVar,
    GeneratorInfeasible,
    GenLocalProblem,
    LineLocalProblem,
    ProxInput,
    compile_generator,
    project_lines,
    prox_generator,
    prox_line,
    prox_load,
    solve_generator,
)

INF = math.inf


def gen2_mw(**kw):
    # generator 2 of the 5-bus case, kept in MW units
    return GenLocalProblem(A=0.25, B=20.0, C=0.0, p_min=0.0, p_max=140.0, **kw)


def test_generator_stationarity():
    p, th = prox_generator(gen2_mw(), ProxInput([24.0], [0.3], 1.0))
    assert p[0] == pytest.approx(8.0 / 3.0, abs=1e-12)
    assert th[0] == 0.3


def test_generator_clipped_at_min():
    p, _ = prox_generator(gen2_mw(), ProxInput([-100.0], [0.0], 1.0))
    assert p[0] == 0.0


def test_zero_cost_is_identity():
    prob = GenLocalProblem(0.0, 0.0, 0.0, -INF, INF)
    p, _ = prox_generator(prob, ProxInput([5.0], [0.0], 1.0))
    assert p[0] == 5.0


def test_generator_shared_across_slots():
    # one output serves every scenario slot: the prox averages the targets
    prob = GenLocalProblem(0.0, 0.0, 0.0, -INF, INF)
    p, _ = prox_generator(prob, ProxInput([1.0, 2.0, 6.0], [0, 0, 0], 1.0))
    assert np.allclose(p, 3.0)


def test_infeasible_window_named():
    prob = GenLocalProblem(0.0, 0.0, 0.0, 0.0, 1.0, r_down=-0.1, r_up=0.1, prev_fixed=2.0)
    with pytest.raises(GeneratorInfeasible, match="ramp window from the previous interval"):
        compile_generator(prob)


def test_line_fixed_point():
    p1, p2, t1, t2 = -0.5, 0.5, 0.03, 0.0
    out = project_lines(p1, p2, t1, t2, 0.06, 10.0)
    assert np.allclose(out, (p1, p2, t1, t2), atol=1e-15)


def test_line_projection_kkt():
    X = 0.06
    q1, q2, a1, a2 = project_lines(0.0, 0.0, 0.06, 0.0, X, 1e9)
    assert abs(q1 + (a1 - a2) / X) < 1e-12
    assert abs(q1 + q2) < 1e-12
    # cross-check against the 4x4 KKT system of the equality-constrained projection
    v = np.array([0.0, 0.0, 0.06, 0.0])
    Aeq = np.array([[1.0, 1.0, 0.0, 0.0], [X, 0.0, 1.0, -1.0]])
    K = np.block([[np.eye(4), Aeq.T], [Aeq, np.zeros((2, 2))]])
    sol = np.linalg.solve(K, np.concatenate([v, [0.0, 0.0]]))
    assert np.allclose([q1, q2, a1, a2], sol[:4], atol=1e-12)


def test_line_outage():
    prob = LineLocalProblem(0.06, np.array([1.0]), np.array([True]))
    P, th = prox_line(prob, ProxInput(np.array([[0.7], [0.2]]), np.array([[0.1], [-0.4]]), 1.0))
    assert np.all(P == 0.0)
    assert th[0, 0] == 0.1 and th[1, 0] == -0.4


def test_load():
    P, th = prox_load(20.0, ProxInput([0.0, 1.0], [0.3, 0.3], 1.0), 100.0)
    assert np.allclose(P, -0.2) and np.allclose(th, 0.3)
    P, _ = prox_load(0.0, ProxInput([5.0], [0.0], 1.0))
    assert P[0] == 0.0


# ---------------------------------------------------------------------------
# property checks

finite = st.floats(-3.0, 3.0, allow_nan=False)


@st.composite
def generator_problems(draw):
    p_min = draw(st.floats(-1.0, 1.0))
    p_max = p_min + draw(st.floats(0.0, 2.0))
    r = draw(st.floats(0.05, 1.5))
    kw = {}
    mode = draw(st.sampled_from(["none", "fixed", "belief_prev", "belief_both", "both_fixed"]))
    if mode in ("fixed", "both_fixed"):
        kw["prev_fixed"] = draw(st.floats(p_min, p_max))
    if mode == "both_fixed":
        kw["next_fixed"] = kw["prev_fixed"]
    if mode.startswith("belief"):
        kw["prev"] = BeliefVar(draw(st.floats(0.1, 5.0)), draw(finite), draw(finite))
    if mode == "belief_both":
        kw["next"] = BeliefVar(draw(st.floats(0.1, 5.0)), draw(finite), draw(finite))
    return GenLocalProblem(
        A=draw(st.floats(0.0, 5.0)), B=draw(finite), C=0.0, p_min=p_min, p_max=p_max,
        r_down=-r, r_up=r, prox_weight=draw(st.floats(0.0, 5.0)), prox_anchor=draw(finite),
        lin=draw(finite), **kw,
    )


def prox_objective(prob, inp, x):
    return prob.objective(x) + 0.5 * inp.rho * float(np.sum((x[0] - inp.v_p) ** 2))


@settings(max_examples=150, deadline=None)
@given(prob=generator_problems(), v=st.lists(finite, min_size=1, max_size=4),
       rho=st.floats(0.1, 10.0), seed=st.integers(0, 2**31))
def test_generator_prox_optimality_probes(prob, v, rho, seed):
    inp = ProxInput(v, np.zeros(len(v)), rho)
    x = solve_generator(prob, inp)
    assert prob.is_feasible(x, tol=1e-9)
    best = prox_objective(prob, inp, x)
    rng = np.random.default_rng(seed)
    for scale in (1e-3, 1e-1, 1.0):
        for _ in range(10):
            y = x + scale * rng.standard_normal(len(x))
            if prob.is_feasible(y, tol=0.0):
                assert prox_objective(prob, inp, y) >= best - 1e-9


@settings(max_examples=60, deadline=None)
@given(prob=generator_problems(), v=finite, rho=st.floats(0.1, 10.0))
def test_generator_prox_against_grid(prob, v, rho):
    # brute force over the own output when there are no belief variables
    if prob.n_vars != 1:
        return
    inp = ProxInput([v], [0.0], rho)
    x = solve_generator(prob, inp)[0]
    lo, hi = prob.own_window()
    grid = np.linspace(lo, hi, 2001)
    vals = [prox_objective(prob, inp, np.array([p])) for p in grid]
    assert prox_objective(prob, inp, np.array([x])) <= min(vals) + 1e-9


@settings(max_examples=120, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), rho=st.floats(0.1, 10.0),
       A=st.floats(0, 5), p_min=st.floats(-1, 0), width=st.floats(0, 2))
def test_generator_prox_nonexpansive(a, b, rho, A, p_min, width):
    prob = GenLocalProblem(A, 1.0, 0.0, p_min, p_min + width)
    xa = solve_generator(prob, ProxInput([a], [0.0], rho))[0]
    xb = solve_generator(prob, ProxInput([b], [0.0], rho))[0]
    assert abs(xa - xb) <= abs(a - b) + 1e-12


line_targets = st.tuples(finite, finite, finite, finite)


def line_distance(v, q):
    return float(np.sum((np.asarray(v) - np.asarray(q)) ** 2))


@settings(max_examples=150, deadline=None)
@given(v=line_targets, X=st.floats(0.01, 1.0), L=st.floats(0.05, 3.0), seed=st.integers(0, 2**31))
def test_line_prox_optimality_probes(v, X, L, seed):
    q = project_lines(*v, X, L)
    f = q[1]
    assert abs(q[0] + q[1]) < 1e-12
    assert abs(f - (q[2] - q[3]) / X) < 1e-9
    assert abs(f) <= L + 1e-12
    best = line_distance(v, q)
    rng = np.random.default_rng(seed)
    for _ in range(30):
        # feasible points: flow f' within the cap, angle midpoint m' free
        f2 = rng.uniform(-L, L)
        m2 = 0.5 * (q[2] + q[3]) + rng.normal(scale=0.5)
        cand = (-f2, f2, m2 + 0.5 * X * f2, m2 - 0.5 * X * f2)
        assert line_distance(v, cand) >= best - 1e-9


@settings(max_examples=120, deadline=None)
@given(a=line_targets, b=line_targets, X=st.floats(0.01, 1.0), L=st.floats(0.05, 3.0))
def test_line_prox_nonexpansive(a, b, X, L):
    qa = np.array(project_lines(*a, X, L))
    qb = np.array(project_lines(*b, X, L))
    assert np.linalg.norm(qa - qb) <= np.linalg.norm(np.subtract(a, b)) + 1e-12


@settings(max_examples=120, deadline=None)
@given(v=st.lists(finite, min_size=1, max_size=5), t=st.lists(finite, min_size=1, max_size=5),
       load=st.floats(0, 500), seed=st.integers(0, 2**31))
def test_load_prox_optimality(v, t, load, seed):
    n = min(len(v), len(t))
    inp = ProxInput(v[:n], t[:n], 1.0)
    P, th = prox_load(load, inp)
    rng = np.random.default_rng(seed)
    best = line_distance(inp.v_theta, th)
    for _ in range(5):
        # power is pinned, so only the angle can move
        assert line_distance(inp.v_theta, th + rng.normal(size=n)) >= best
    assert np.all(P == -load / 100.0)
