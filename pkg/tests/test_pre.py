import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfu_offload.pre import (
    DuplicateMgid,
    DuplicateRidPort,
    L1BudgetExhausted,
    L1Node,
    PacketReplicationMeta,
    PreResources,
    Replica,
    ReplicationEngine,
    TreeBudgetExhausted,
    UnknownMgid,
)


def _nodes(engine, ports, xid, rid_base=1):
    return [engine.new_node(rid_base + i, port, l1_xid=xid) for i, port in enumerate(ports)]


def test_tree_budget_exhausted_at_65537():
    eng = ReplicationEngine()
    for mgid in range(65536):
        eng.create_tree(mgid, ())
    with pytest.raises(TreeBudgetExhausted):
        eng.create_tree(70000, ())
    # destroy one, create one
    eng.destroy_tree(123)
    eng.create_tree(70000, ())
    assert eng.resources.used_trees == 65536


def test_empty_tree_replicates_to_nothing():
    eng = ReplicationEngine()
    eng.create_tree(1, ())
    assert eng.replicate(PacketReplicationMeta(1)) == []


def test_duplicate_rid_port():
    eng = ReplicationEngine()
    with pytest.raises(DuplicateRidPort):
        eng.create_tree(1, [L1Node(1, 5, 0, True, 9), L1Node(2, 5, 0, True, 9)])
    assert eng.resources.used_trees == 0


def test_duplicate_mgid_and_unknown():
    eng = ReplicationEngine()
    eng.create_tree(1, ())
    with pytest.raises(DuplicateMgid):
        eng.create_tree(1, ())
    with pytest.raises(UnknownMgid):
        eng.destroy_tree(2)
    with pytest.raises(UnknownMgid):
        eng.replicate(PacketReplicationMeta(2))


def test_l1_budget():
    eng = ReplicationEngine(PreResources(max_l1_nodes_total=3))
    eng.create_tree(1, _nodes(eng, [1, 2], 0))
    with pytest.raises(L1BudgetExhausted):
        eng.create_tree(2, _nodes(eng, [3, 4], 0))
    assert eng.resources.used_l1_nodes == 2


def test_create_destroy_restores_counters():
    eng = ReplicationEngine()
    before = (eng.resources.used_trees, eng.resources.used_l1_nodes)
    eng.create_tree(7, _nodes(eng, [1, 2, 3], 0))
    eng.destroy_tree(7)
    assert (eng.resources.used_trees, eng.resources.used_l1_nodes) == before


def test_l1_xid_prunes_other_meeting():
    eng = ReplicationEngine()
    m1 = _nodes(eng, [1, 2, 3], xid=1, rid_base=1)
    m2 = _nodes(eng, [4, 5, 6], xid=2, rid_base=10)
    eng.create_tree(1, m1 + m2)
    out = eng.replicate(PacketReplicationMeta(1, l1_xid=2))
    assert sorted(r.egress_port for r in out) == [1, 2, 3]


def test_sender_suppression_by_rid_and_port():
    eng = ReplicationEngine()
    eng.create_tree(1, _nodes(eng, [1, 2, 3, 4], xid=1))
    out = eng.replicate(PacketReplicationMeta(1, l1_xid=9, rid=2, l2_xid_ports=frozenset({2})))
    assert out == [Replica(1, 1), Replica(3, 3), Replica(4, 4)]


def test_no_match_replicates_everywhere():
    eng = ReplicationEngine()
    eng.create_tree(1, _nodes(eng, range(5), xid=1))
    assert len(eng.replicate(PacketReplicationMeta(1, l1_xid=42))) == 5


def test_prune_disabled_ignores_xid():
    eng = ReplicationEngine()
    eng.create_tree(1, [L1Node(1, 1, 3, False, 1), L1Node(2, 2, 3, True, 2)])
    assert [r.egress_port for r in eng.replicate(PacketReplicationMeta(1, l1_xid=3))] == [1]


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 64))
def test_nra_replica_count_is_n_minus_one(n):
    eng = ReplicationEngine()
    nodes = _nodes(eng, range(100, 100 + n), xid=1)
    eng.create_tree(1, nodes)
    for sender in nodes:
        meta = PacketReplicationMeta(1, 2, sender.rid, frozenset({sender.egress_port}))
        out = eng.replicate(meta)
        assert len(out) == n - 1
        assert sender.egress_port not in {r.egress_port for r in out}


@pytest.mark.parametrize("n1", range(1, 7))
@pytest.mark.parametrize("n2", range(1, 7))
def test_cross_meeting_isolation_exhaustive(n1, n2):
    eng = ReplicationEngine()
    a = _nodes(eng, range(0, n1), xid=1, rid_base=1)
    b = _nodes(eng, range(100, 100 + n2), xid=2, rid_base=50)
    eng.create_tree(1, a + b)
    ports_a = {n.egress_port for n in a}
    ports_b = {n.egress_port for n in b}
    for sender in a:
        got = {r.egress_port for r in eng.replicate(PacketReplicationMeta(1, 2, sender.rid, frozenset({sender.egress_port})))}
        assert got == ports_a - {sender.egress_port}
    for sender in b:
        got = {r.egress_port for r in eng.replicate(PacketReplicationMeta(1, 1, sender.rid, frozenset({sender.egress_port})))}
        assert got == ports_b - {sender.egress_port}


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 20), st.integers(0, 5)), max_size=60))
def test_resource_conservation(ops):
    eng = ReplicationEngine()
    live = []
    for create, mgid, size in ops:
        if create and mgid not in eng.trees:
            eng.create_tree(mgid, _nodes(eng, range(size), 0))
            live.append(mgid)
        elif live:
            victim = live.pop(mgid % len(live))
            eng.destroy_tree(victim)
        assert eng.check_conservation()


def test_dump_is_json():
    eng = ReplicationEngine()
    eng.create_tree(3, _nodes(eng, [1], 1))
    d = json.loads(eng.dumps())
    assert d["resources"]["used_trees"] == 1
    assert d["trees"]["3"][0]["egress_port"] == 1
