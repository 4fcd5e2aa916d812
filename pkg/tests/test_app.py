from dataclasses import replace

import numpy as np
import pytest

from lascopf.app import (
    LASCOPF_SCHEDULE,
    SCOPF_SCHEDULE,
    AppParams,
    BeliefSet,
    LambdaState,
    add_terms,
    alpha_at,
    build_interval_subproblem,
    lascopf_solve,
    lascopf_defaults,
    mpc_roll,
    scenario_consensus_solve,
    scopf_defaults,
    update_interval_duals,
)
from lascopf.grid import build_network, generate_scenarios, generator_order
from lascopf.oracle import dc_flows, solve_centralized
from lascopf.pmp import PmpParams, opf_subproblem, run_pmp


def test_alpha_schedule():
    assert alpha_at(LASCOPF_SCHEDULE, 3) == 10
    assert alpha_at(LASCOPF_SCHEDULE, 12) == 2.5
    assert alpha_at(LASCOPF_SCHEDULE, 1000) == 0.5
    assert alpha_at(SCOPF_SCHEDULE, 5) == 5 and alpha_at(SCOPF_SCHEDULE, 6) == 3


def test_app_params_validation():
    with pytest.raises(ValueError):
        AppParams(alpha=((5, 1.0), (3, 1.0)))
    with pytest.raises(ValueError):
        AppParams(beta=-1.0)


def beliefs_with_gap(G=2, T=3):
    b = BeliefSet.initial(np.zeros(G), T)
    b.own[0, 0] = 150.0
    b.prev[0, 1] = 148.0
    return b


def test_interval_dual_update():
    b = beliefs_with_gap()
    lam = update_interval_duals(LambdaState.zeros(2, 3), b, 10.0)
    assert lam.lam[0, 0] == pytest.approx(20.0)
    assert np.count_nonzero(lam.lam) == 1
    # agreement or a zero step leaves the multipliers alone
    same = BeliefSet.initial(np.array([1.0, 2.0]), 3)
    assert np.all(update_interval_duals(lam, same, 10.0).lam == lam.lam)
    assert np.all(update_interval_duals(lam, b, 0.0).lam == lam.lam)


def test_interval_subproblem_boundary(case5):
    net = build_network(case5)
    p0 = [g.sched_mw for g in generator_order(net)]
    b = BeliefSet.initial(p0, 3)
    sub = build_interval_subproblem(1, b, LambdaState.zeros(2, 3), lascopf_defaults(), net, p0)
    assert sub.hub_gens[0].prev_fixed * 100 == pytest.approx(140.765)
    assert sub.p0_window[0] == 140.765
    assert sub.hub_gens[0].next is not None and sub.hub_gens[0].prev is None


def test_interval_subproblem_without_regularizers(case5):
    net = build_network(case5)
    p0 = [g.sched_mw for g in generator_order(net)]
    b = BeliefSet.initial(p0, 3)
    params = lascopf_defaults(beta=0.0, gamma=0.0)
    plain = opf_subproblem(net, generate_scenarios(net, []), 2, ramp_boundary=False)
    sub = build_interval_subproblem(2, b, LambdaState.zeros(2, 3), params, net, p0)
    for a, g in zip(sub.hub_gens, plain.gens):
        # the anchor is inert at zero proximity weight
        assert a.prox_weight == 0.0 and replace(a, prox_anchor=0.0) == g
    assert np.all(sub.load_mw == plain.load_mw[:, 0])


def test_zero_beliefs_zero_linear_terms(case5):
    net = build_network(case5)
    b = BeliefSet.initial(np.zeros(2), 3)
    sub = build_interval_subproblem(2, b, LambdaState.zeros(2, 3), lascopf_defaults(), net, np.zeros(2))
    for p in sub.hub_gens:
        assert p.lin == 0.0 and p.prev.lin == 0.0 and p.next.lin == 0.0


def test_add_terms_combines_proximity():
    from lascopf.prox import GenLocalProblem

    p = GenLocalProblem(1.0, 0.0, 0.0, 0.0, 1.0, prox_weight=2.0, prox_anchor=0.5)
    q = add_terms(p, weight_mw=1e-4 * 2.0, anchor_mw=100.0, lin_mw=1.0, base=100.0)
    # equal weights: the anchor moves to the midpoint
    assert q.prox_weight == pytest.approx(4.0) and q.prox_anchor == pytest.approx(0.75)
    assert q.lin == pytest.approx(100.0)


def test_layer_collapse(case5):
    """One interval and no contingencies reduce both layers to a single PMP solve."""
    net = build_network(case5)
    _, _, plain = run_pmp(opf_subproblem(net, generate_scenarios(net, []), 1))
    rep = lascopf_solve(case5, contingencies=(), horizon=1)
    assert rep.converged and rep.outer_iterations == 1
    assert rep.scopf_iterations == [0] and rep.pmp_iterations == plain.iterations
    assert np.allclose(rep.dispatch_mw[:, 0], plain.dispatch_mw, rtol=1e-9, atol=0)
    assert rep.objective == pytest.approx(plain.objective, rel=1e-9)


def test_single_scenario_is_one_pmp_solve(case5):
    net = build_network(case5)
    p0 = [g.sched_mw for g in generator_order(net)]
    sub = build_interval_subproblem(1, BeliefSet.initial(p0, 1), LambdaState.zeros(2, 1),
                                    lascopf_defaults(), net, p0)
    res = scenario_consensus_solve(sub, net, generate_scenarios(net, []), scopf_defaults(), PmpParams())
    assert res.converged and res.outer_iterations == 0 and len(res.residual_trace) == 1


def test_scenario_consensus_secures_interval1(case5):
    net = build_network(case5)
    scen = generate_scenarios(net, case5.contingency_lines)
    p0 = [g.sched_mw for g in generator_order(net)]
    sub = build_interval_subproblem(1, BeliefSet.initial(p0, 1), LambdaState.zeros(2, 1),
                                    lascopf_defaults(), net, p0)
    res = scenario_consensus_solve(sub, net, scen, scopf_defaults(), PmpParams())
    assert res.converged and res.residual <= 0.7
    ref = solve_centralized(case5, horizon=1)
    assert np.allclose(res.dispatch_mw, ref.dispatch[:, 0], atol=0.5)
    for s in scen.labels:
        f = np.abs(dc_flows(res.angles[:, s], scen, s)) * 100
        assert np.all(f <= scen.limit[s] * 100 + 2 * 0.06)


def test_roll_commits_interval1(case5):
    c2 = replace(case5, horizon=2)
    rep = lascopf_solve(c2, contingencies=())
    nxt, warm = mpc_roll(c2, rep, dict(case5.forecast[2]))
    gens = sorted(nxt.generators, key=lambda g: g.id)
    assert [g.sched_mw for g in gens] == pytest.approx(list(rep.dispatch_mw[:, 0]))
    assert nxt.forecast[0] == case5.forecast[1] and nxt.forecast[1] == case5.forecast[2]
    assert np.allclose(warm["beliefs"].own[:, 0], rep.dispatch_mw[:, 1])
    with pytest.raises(ValueError):
        mpc_roll(c2, rep, None)
    with pytest.raises(ValueError):
        mpc_roll(case5, rep, dict(case5.forecast[2]))


def test_roll_warm_start_is_cheaper(case5):
    c3 = replace(case5, horizon=3)
    rep = lascopf_solve(c3, contingencies=())
    # unchanged forecast: the new last interval repeats the old one
    nxt, warm = mpc_roll(c3, rep, dict(case5.forecast[2]))
    warm_rep = lascopf_solve(nxt, contingencies=(), warm=warm)
    cold_rep = lascopf_solve(nxt, contingencies=())
    assert warm_rep.converged and cold_rep.converged
    assert warm_rep.outer_iterations <= cold_rep.outer_iterations
    assert warm_rep.pmp_iterations < cold_rep.pmp_iterations


def test_horizon_one_roll(case5):
    c1 = replace(case5, horizon=1)
    one = lascopf_solve(c1, contingencies=())
    nxt, warm = mpc_roll(c1, one, dict(case5.forecast[1]))
    again = lascopf_solve(nxt, contingencies=(), warm=warm)
    assert again.converged and again.dispatch_mw.shape == (2, 1)
