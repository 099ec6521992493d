import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fed2sim.topology import (CostModelParams, TopologyError, build_topology, cost_centralized, cost_mesh,
                              cost_sweep, write_cost_csv)

from oracles import cost_centralized_literal


# adjacency

def test_ring_is_a_path():
    g = build_topology("ring", 4)
    assert g.edges() == [(0, 1), (1, 2), (2, 3)]
    assert g.total_weight == 3


def test_closed_ring_adds_wraparound():
    assert (0, 3) in build_topology("ring", 4, closed=True).edges()
    assert len(build_topology("ring", 2, closed=True).edges()) == 1


def test_mesh_is_complete():
    assert len(build_topology("mesh", 4).edges()) == 6


def test_weighted_adjacency_symmetric():
    rng = np.random.default_rng(0)
    table = rng.uniform(1, 5, size=(6, 6))
    g = build_topology("mesh", 6, lambda i, j: table[i, j])
    assert np.array_equal(g.W, g.W.T) and np.all(np.diag(g.W) == 0)


def test_topology_errors():
    with pytest.raises(TopologyError):
        build_topology("ring", 1)
    with pytest.raises(TopologyError):
        build_topology("star", 4)


# cost formulas

def unit_toy(**kw):
    base = dict(L=3, D=1, B_w=1, k=[1, 1, 1], f=[1, 1, 1, 1])
    base.update(kw)
    return CostModelParams(**base)


def test_unit_toy_hand_values():
    # first sum i=1..2 -> 2; second sum i=1..3 -> 3
    assert cost_centralized(unit_toy()) == 5
    assert cost_mesh(unit_toy(N=2, R=3)) == 2 * 2 + 2 * 3
    # corrected second sum i=3..3 -> 1
    assert cost_centralized(unit_toy(), corrected=True) == 3


def test_two_layer_full_decoupling_counts_model_twice():
    # terms: 8*4*9 = 288 and 8*2*1 = 16
    p = CostModelParams(L=2, D=0, B_w=8, k=[3, 1], f=[1, 4, 2])
    assert cost_centralized(p) == 2 * (288 + 16)
    assert cost_centralized(p) == cost_centralized_literal(2, 0, 8, [3, 1], [1, 4, 2])


def test_mixed_toy_hand_values():
    # terms 72, 90, 12; first sum = 72; second = 0.5 * (90 + 12) = 51
    p = CostModelParams(L=3, D=2, B_w=2, k=[3, 3, 1], f=[3, 4, 5, 6], P=2, F_r=0.5, N=3, R=2)
    assert cost_centralized(p) == 72 + 2 * 51
    assert cost_mesh(p) == 3 * 72 + 2 * 1 * 51


def test_limits_and_linearity():
    p = CostModelParams(L=3, D=2, B_w=2, k=[3, 3, 1], f=[3, 4, 5, 6], F_r=1e-300)
    assert cost_centralized(p) == pytest.approx(72)
    q = CostModelParams(L=3, D=2, B_w=4, k=[3, 3, 1], f=[3, 4, 5, 6])
    q1 = CostModelParams(L=3, D=2, B_w=2, k=[3, 3, 1], f=[3, 4, 5, 6])
    assert cost_centralized(q) == 2 * cost_centralized(q1)
    assert cost_mesh(unit_toy(R=1, N=1)) == 2       # second term vanishes, first equals centralized's
    assert cost_mesh(unit_toy(R=1, N=1)) == cost_centralized(unit_toy(P=0))


@pytest.mark.parametrize("kw,msg", [(dict(D=4), "D <= L"), (dict(k=[1, 1]), "kernel widths"),
                                    (dict(F_r=0.0), "F_r"), (dict(F_r=1.5), "F_r"), (dict(R=0.5), "R must")])
def test_cost_validation(kw, msg):
    with pytest.raises(TopologyError, match=msg):
        cost_centralized(unit_toy(**kw))


@st.composite
def params(draw):
    L = draw(st.integers(1, 5))
    return dict(L=L, D=draw(st.integers(0, L)), B_w=draw(st.sampled_from([8, 16, 32, 64])),
                k=draw(st.lists(st.sampled_from([1, 3, 5]), min_size=L, max_size=L)),
                f=draw(st.lists(st.integers(1, 64), min_size=L + 1, max_size=L + 1)),
                P=draw(st.integers(1, 4)), F_r=draw(st.floats(0.05, 1.0)),
                R=draw(st.integers(1, 4)), N=draw(st.integers(1, 8)))


@settings(max_examples=80, deadline=None)
@given(params(), st.sampled_from(["B_w", "P", "F_r", "R", "N", "k", "f"]), st.booleans())
def test_costs_nondecreasing_in_each_parameter(kw, name, corrected):
    lo = CostModelParams(**kw)
    bumped = dict(kw)
    if name in ("k", "f"):
        bumped[name] = [v + 1 for v in kw[name]]
    elif name == "F_r":
        bumped[name] = min(1.0, kw[name] * 1.5)
    else:
        bumped[name] = kw[name] + 1
    hi = CostModelParams(**bumped)
    for fn in (cost_centralized, cost_mesh):
        assert fn(hi, corrected) >= fn(lo, corrected)


@settings(max_examples=60, deadline=None)
@given(params())
def test_literal_matches_oracle_and_depth_trades_off(kw):
    p = CostModelParams(**kw)
    assert cost_centralized(p) == pytest.approx(
        cost_centralized_literal(p.L, p.D, p.B_w, p.k, p.f, p.P, p.F_r), rel=1e-12)
    # more decoupled layers drop terms from both literal sums
    if p.D < p.L:
        deeper = CostModelParams(**{**kw, "D": p.D + 1})
        assert cost_centralized(deeper) <= cost_centralized(p)


def test_sweep_rows_and_csv(tmp_path):
    rows = cost_sweep(unit_toy(), {"D": [0, 1, 2, 3], "R": [1, 2]})
    assert [r["param"] for r in rows] == ["D"] * 4 + ["R"] * 2
    write_cost_csv(tmp_path / "c.csv", rows)
    back = list(csv.DictReader(open(tmp_path / "c.csv")))
    assert float(back[1]["Q_centralized"]) == 5.0
    with pytest.raises(TopologyError):
        cost_sweep(unit_toy(), {"bogus": [1]})
