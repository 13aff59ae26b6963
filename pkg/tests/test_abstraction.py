import numpy as np
import pytest

from cbm import abstraction as A
from cbm import env as E


def _graph(d_S, edges, action_children=()):
    g = np.zeros((d_S + 1, d_S), dtype=bool)
    for j, i in edges:
        g[j, i] = True
    for i in action_children:
        g[d_S, i] = True
    return g


def test_chain_closure():
    assert A.ancestors(_graph(3, [(0, 1), (1, 2)]), [2]) == {0, 1, 2}


def test_empty_graph_keeps_seed():
    assert A.ancestors(_graph(3, []), [2]) == {2}


def test_cycle_terminates():
    assert A.ancestors(_graph(3, [(0, 1), (1, 0), (1, 2)]), [2]) == {0, 1, 2}


def test_action_row_is_not_a_member():
    g = _graph(2, [], action_children=[0, 1])
    assert A.ancestors(g, [1]) == {1}


def test_self_loops_add_nothing():
    assert A.ancestors(_graph(3, [(2, 2)]), [2]) == {2}


def test_bisimulation_pattern():
    # reward parent B=1, A=0 -> B, C=2 isolated
    m = A.bisim_abstraction(_graph(3, [(0, 1)]), [1])
    assert m.indices == [0, 1]
    assert m.provenance == "bisimulation"


def test_all_parents_gives_full_mask():
    assert A.bisim_abstraction(_graph(4, []), [0, 1, 2, 3]).size == 4


def test_empty_reward_parents_rejected():
    with pytest.raises(ValueError, match="no reward parents"):
        A.bisim_abstraction(_graph(3, []), [])


def test_cdl_reachability():
    assert A.cdl_abstraction(_graph(3, [(0, 1)], action_children=[0])).indices == [0, 1]


def test_cdl_action_relevant_parent():
    # action -> A(0), D(1) -> A with D uncontrollable
    assert A.cdl_abstraction(_graph(2, [(1, 0)], action_children=[0])).indices == [0, 1]


def test_cdl_keeps_twenty_controllable_distractors():
    d_S = 22
    g = _graph(d_S, [(0, 1)], action_children=[0] + list(range(2, 22)))
    m = A.cdl_abstraction(g)
    assert m.size == 22
    assert A.bisim_abstraction(g, [1]).indices == [0, 1]


def test_accuracy():
    a = np.array([1, 0, 1, 1, 0, 0, 1, 1, 0, 1], dtype=bool)
    assert A.abstraction_accuracy(a, a) == 1.0
    assert A.abstraction_accuracy(a, ~a) == 0.0
    b = a.copy()
    b[[0, 1]] = ~b[[0, 1]]
    assert A.abstraction_accuracy(a, b) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        A.abstraction_accuracy(a, a[:5])


def test_apply_mask():
    s = np.array([3.0, 4.0, 5.0])
    assert np.array_equal(A.apply_mask(np.ones(3, bool), s), s)
    assert np.array_equal(A.apply_mask(np.zeros(3, bool), s), np.zeros(3))
    assert np.array_equal(A.apply_mask(np.array([1, 0, 1], bool), s), [3.0, 0.0, 5.0])


def test_monotone_and_idempotent_on_random_graphs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        d = int(rng.integers(2, 9))
        g = rng.random((d + 1, d)) < 0.25
        seeds = rng.random(d) < 0.3
        seeds[rng.integers(d)] = True
        closed = A.ancestor_mask(g, seeds)
        assert np.array_equal(A.ancestor_mask(g, closed), closed)
        g2 = g.copy()
        g2[rng.integers(d + 1), rng.integers(d)] = True
        assert np.all(A.ancestor_mask(g2, seeds) >= closed)
        # closure property: every parent of a member is a member
        for v in np.flatnonzero(closed):
            assert np.all(closed[np.flatnonzero(g[:d, v])])


def test_mask_json_round_trip(tmp_path):
    m = A.AbstractionMask(np.array([1, 0, 1], bool), task=2, provenance="cdl")
    m.save(tmp_path / "m.json")
    back = A.AbstractionMask.load(tmp_path / "m.json")
    assert back.indices == [0, 2] and back.task == 2 and back.provenance == "cdl"
