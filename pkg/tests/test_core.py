import math

import numpy as np
import pytest

from m2msched.core import (PriorityOrder, QosClass, ScenarioError, ServiceKind, ServiceModel, TimeSharingPolicy,
                           Topology, enumerate_priority_orders, validate_scenario)

from helpers import s7a_classes, s7b


def test_class_constants_identity():
    c = QosClass(1, 0.1, 800, 0.7, 1.0, 0.8)
    assert c.c * c.d == pytest.approx(c.c - 1, abs=1e-15)
    assert 0 < c.d < 0.5 < c.c
    assert c.c * (1 / (1 + math.exp(c.a * c.b)) - c.d) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("field", ["lam", "packet_size", "a", "b"])
def test_class_rejects_non_positive(field):
    kw = dict(id=1, lam=0.1, packet_size=800, a=1.0, b=1.0, beta=1.0)
    kw[field] = 0.0
    with pytest.raises(ScenarioError):
        QosClass(**kw)


def test_service_second_moment():
    d = ServiceModel(ServiceKind.DETERMINISTIC, 0.1)
    e = ServiceModel(ServiceKind.EXPONENTIAL, 0.1)
    assert d.second_moment == pytest.approx(1 / 0.01)
    assert e.second_moment == pytest.approx(2 / 0.01)
    assert ServiceModel.from_capacity("deterministic", 800, 80).rate == 10.0


def test_orders_r3_lexicographic():
    assert [str(o) for o in enumerate_priority_orders(3)] == ["123", "132", "213", "231", "312", "321"]
    assert [str(o) for o in enumerate_priority_orders(1)] == ["1"]
    o4 = enumerate_priority_orders(4)
    assert len(o4) == 24 and len(set(o4)) == 24
    assert [o.perm for o in o4] == sorted(o.perm for o in o4)
    assert enumerate_priority_orders(4) == o4


def test_orders_factorial_limit():
    with pytest.raises(ScenarioError, match="factorial limit exceeded"):
        enumerate_priority_orders(9)


def test_higher_set():
    o = PriorityOrder((4, 3, 2, 1))
    assert o.higher_set(4) == frozenset()
    assert o.higher_set(2) == frozenset({4, 3})
    with pytest.raises(ScenarioError):
        PriorityOrder((1, 1, 2))


def test_policy_simplex_and_one_hot():
    o = PriorityOrder((2, 1))
    p = TimeSharingPolicy.fixed(o)
    assert p.gamma[o] == 1.0 and p.support == [o]
    with pytest.raises(ScenarioError):
        TimeSharingPolicy({o: 0.5})
    with pytest.raises(ScenarioError):
        TimeSharingPolicy({o: 1.2, PriorityOrder((1, 2)): -0.2})
    u = TimeSharingPolicy.uniform(3)
    assert sum(u.gamma.values()) == pytest.approx(1.0, abs=1e-12)


def test_validate_single_class_valid():
    t = Topology.single_node([QosClass(1, 0.05, 800, 1, 1, 1)], 800)
    assert validate_scenario(t) == []


def test_validate_as_unstable():
    t = Topology.single_node([QosClass(1, 1.2, 800, 1, 1, 1)], 800)
    v = validate_scenario(t)
    assert [x.constraint for x in v] == ["AS unstable"] and v[0].node == "AS"


def test_validate_near_critical():
    t = Topology.single_node([QosClass(1, 1.0 - 1e-8, 800, 1, 1, 1)], 800)
    assert [x.constraint for x in validate_scenario(t)] == ["near-critical"]


def test_validate_reference_scenario():
    t = Topology.single_node(s7a_classes(), 800)
    assert validate_scenario(t) == []
    expected = (0.01 * 143 + 0.02 * 111 + 0.04 * 83 + 0.05 * 67) / 100
    assert t.as_load() == pytest.approx(expected, rel=1e-12)


def test_weights_reconstruct_rates():
    t = s7b().topology
    W = t.weights
    lam = np.array([c.lam for c in t.classes])
    assert np.allclose(W.sum(axis=1), 1.0, atol=1e-15)
    assert np.allclose(np.array(t.arrival_matrix).sum(axis=1), lam, rtol=1e-12, atol=0)
    assert np.allclose(W * lam[:, None], np.array(t.arrival_matrix), rtol=1e-15, atol=0)


def test_topology_shape_errors():
    c = [QosClass(1, 0.1, 8, 1, 1, 1)]
    with pytest.raises(ScenarioError):
        Topology(2, c, [[0.1]], 800)
    with pytest.raises(ScenarioError):
        Topology(1, c, [[0.1]], 800, (1.0, 2.0))


def test_ma_unstable_reported():
    t = s7b().topology.with_ma_capacities([1.0, 1e6, 1e6, 1e6])
    v = validate_scenario(t)
    assert any(x.constraint == "MA unstable" and x.node == "MA 1" for x in v)
