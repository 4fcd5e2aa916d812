import numpy as np
import pytest

from lascopf.grid import build_network, generate_scenarios
from lascopf.oracle import (
    InfeasibilityCertificate,
    build_central_problem,
    dc_flows,
    solve_centralized,
)

from conftest import gen, line, overload_case3, tiny_case


def closed_form_ed(case, load):
    # equal incremental cost with no binding limits: 2 A_i p_i + B_i = lambda
    A = np.array([g.A for g in case.generators])
    B = np.array([g.B for g in case.generators])
    lam = (load + np.sum(B / (2 * A))) / np.sum(1 / (2 * A))
    return (lam - B) / (2 * A)


def test_base_case_dispatch(case5):
    sol = solve_centralized(case5, contingencies=(), horizon=1, ramp_boundary=False)
    assert np.allclose(sol.dispatch[:, 0], [140.765, 24.2275], atol=0.5)
    assert sol.dispatch[:, 0].sum() == pytest.approx(165.0, abs=1e-6)
    assert np.allclose(sol.dispatch[:, 0], closed_form_ed(case5, 165.0), atol=1e-3)
    assert sol.kkt_residual < 1e-6
    # an uncongested lossless network has one price everywhere
    assert np.ptp(sol.lmp[0, 0]) < 1e-6


def test_zero_load():
    c = tiny_case([1, 2], [gen(1, 1, 0.1, 10.0, 50.0, 0.0)], [line(1, 1, 2, 0.1, 100.0)], {2: 0.0})
    sol = solve_centralized(c)
    assert np.allclose(sol.dispatch, 0.0, atol=1e-9)
    assert sol.objective == pytest.approx(0.0, abs=1e-9)


def test_capacity_shortfall_certificate():
    c = tiny_case([1, 2, 3], [gen(1, 1, 0.1, 10.0, 50.0, 10.0)],
                  [line(1, 1, 2, 0.1, 100.0), line(2, 2, 3, 0.1, 100.0)], {3: 80.0})
    cert = solve_centralized(c)
    assert isinstance(cert, InfeasibilityCertificate) and not cert.feasible
    assert cert.phase1_objective == pytest.approx(30.0, rel=1e-6)


def test_security_certificate():
    c = overload_case3()
    assert solve_centralized(c, contingencies=()).feasible
    cert = solve_centralized(c)
    assert not cert.feasible and cert.phase1_objective > 1.0
    assert cert.worst_rows


def test_secured_flows_within_ratings(case5):
    sol = solve_centralized(case5, horizon=2)
    scen = generate_scenarios(build_network(case5), case5.contingency_lines)
    for t in range(2):
        for s in scen.labels:
            f = np.abs(dc_flows(sol.angles[t, s], scen, s))
            assert np.all(f <= scen.limit[s] + 1e-9)


def test_ramps_respected(case5):
    sol = solve_centralized(case5)
    p0 = np.array([g.sched_mw for g in case5.generators])[:, None]
    steps = np.diff(np.concatenate([p0, sol.dispatch], axis=1), axis=1)
    up = np.array([g.r_up for g in case5.generators])[:, None]
    dn = np.array([g.r_down for g in case5.generators])[:, None]
    assert np.all(steps <= up + 1e-7) and np.all(steps >= dn - 1e-7)


def test_problem_shapes(case5):
    prob = build_central_problem(case5, contingencies=(1, 2), horizon=2)
    assert prob.A_eq.shape[0] == 2 * 3 * 5  # balance rows per interval, scenario, bus
    assert prob.n == prob.A_eq.shape[1] == prob.A_ub.shape[1]


def test_dc_flow_examples(case5):
    net = build_network(case5)
    scen = generate_scenarios(net, [1])
    th = np.zeros(net.n_nets)
    assert np.all(dc_flows(th, scen, 0) == 0.0)
    th[0] = 0.06  # line 1-2 has X = 0.06
    assert dc_flows(th, scen, 0)[0] == pytest.approx(1.0)
    assert dc_flows(th, scen, 1)[0] == 0.0
