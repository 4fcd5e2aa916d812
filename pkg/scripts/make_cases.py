"""Regenerate the bundled 5-bus and 14-bus case documents.

The 14-bus network is the IEEE 14-bus test system (DC view: branch
reactances only). The archive data has no thermal ratings and no ramp
limits, so both are chosen here; the running-interval dispatch is the
unconstrained economic dispatch of the interval-1 load.
"""

import json
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "lascopf" / "cases"


def case5():
    gens = [
        dict(id=1, bus=1, A=0.0430293, B=20, C=0, p_max=332.4, p_min=0, r_up=20, r_down=-20, sched_mw=140.765),
        dict(id=2, bus=2, A=0.25, B=20, C=0, p_max=140, p_min=0, r_up=15, r_down=-15, sched_mw=24.2275),
    ]
    br = [(1, 2, .02, .06), (1, 3, .08, .24), (2, 3, .06, .18), (2, 4, .06, .18),
          (2, 5, .04, .12), (3, 4, .01, .03), (4, 5, .08, .24)]
    lines = [dict(id=i + 1, from_bus=a, to_bus=b, resistance=r, reactance=x, flow_limit=100)
             for i, (a, b, r, x) in enumerate(br)]
    tab = {2: [20, 30, 20, 20, 20], 3: [45, 40, 43, 43, 43], 4: [40, 40, 45, 45, 45], 5: [60, 65, 65, 65, 65]}
    fc = [{str(b): tab[b][k] for b in tab} for k in range(5)]
    return dict(name="case5", base_mva=100, buses=[1, 2, 3, 4, 5], generators=gens, lines=lines,
                loads=fc[0], forecast=fc, horizon=5, contingencies="all", emergency_factor=1.5)


BR14 = [(1, 2, 0.01938, 0.05917), (1, 5, 0.05403, 0.22304), (2, 3, 0.04699, 0.19797),
        (2, 4, 0.05811, 0.17632), (2, 5, 0.05695, 0.17388), (3, 4, 0.06701, 0.17103),
        (4, 5, 0.01335, 0.04211), (4, 7, 0, 0.20912), (4, 9, 0, 0.55618), (5, 6, 0, 0.25202),
        (6, 11, 0.09498, 0.1989), (6, 12, 0.12291, 0.25581), (6, 13, 0.06615, 0.13027),
        (7, 8, 0, 0.17615), (7, 9, 0, 0.11001), (9, 10, 0.03181, 0.0845), (9, 14, 0.12711, 0.27038),
        (10, 11, 0.08205, 0.19207), (12, 13, 0.22092, 0.19988), (13, 14, 0.17093, 0.34802)]
GEN14 = [(1, 332.4, 0.0430292599, 20), (2, 140, 0.25, 20), (3, 100, 0.01, 40), (6, 100, 0.01, 40), (8, 100, 0.01, 40)]
LOAD14 = {2: [21.7, 16.7, 26.7, 24.2, 14.2], 3: [94.2, 89.2, 99.2, 96.7, 86.7], 4: [47.8, 42.8, 52.8, 50.3, 40.3],
          5: [7.6, 2.6, 12.6, 10.1, 0.1], 6: [11.2, 6.2, 16.2, 13.7, 3.7], 9: [29.5, 24.5, 34.5, 32, 22],
          10: [9, 4, 14, 11.5, 1.5], 11: [3.5, 1.5, 8.5, 6, 4], 12: [6.1, 1.1, 11.1, 8.6, 1.4],
          13: [13.5, 8.5, 18.5, 16, 6], 14: [14.9, 9.9, 19.9, 17.4, 7.4]}


# uniform thermal rating; post-contingency rating at 125%
LIMITS14 = {i: 150.0 for i in range(1, 21)}
EF14 = 1.25


def case14(limit=None, ramp_frac=0.5, sched=None):
    limit = limit or {}
    gens = []
    for i, (bus, pmax, a, b) in enumerate(GEN14):
        r = round(ramp_frac * pmax, 4)
        gens.append(dict(id=i + 1, bus=bus, A=a, B=b, C=0, p_max=pmax, p_min=0, r_up=r, r_down=-r,
                         sched_mw=0.0 if sched is None else sched[i]))
    lines = [dict(id=i + 1, from_bus=f, to_bus=t, resistance=r, reactance=x, flow_limit=limit.get(i + 1, 9999.0))
             for i, (f, t, r, x) in enumerate(BR14)]
    fc = [{str(b): LOAD14[b][k] for b in LOAD14} for k in range(5)]
    # line 7-8 is the only branch to bus 8; its outage would island the generator there
    cont = [ln["id"] for ln in lines if (ln["from_bus"], ln["to_bus"]) != (7, 8)]
    return dict(name="case14", base_mva=100, buses=list(range(1, 15)), generators=gens, lines=lines,
                loads=fc[0], forecast=fc, horizon=5, contingencies=cont, emergency_factor=EF14)


if __name__ == "__main__":
    sys.path.insert(0, str(OUT.parents[1]))
    from lascopf.grid import case_from_dict
    from lascopf.oracle import solve_centralized

    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "case5.json").write_text(json.dumps(case5(), indent=2) + "\n")
    doc = case14(LIMITS14)
    ed = solve_centralized(case_from_dict(doc), contingencies=[], horizon=1, ramp_boundary=False)
    sched = [max(0.0, round(float(p), 4)) for p in ed.dispatch[:, 0]]
    (OUT / "case14.json").write_text(json.dumps(case14(LIMITS14, sched=sched), indent=2) + "\n")
