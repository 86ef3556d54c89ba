"""Packet replication engine model.

Each multicast group (MGID) owns a flat list of L1 nodes. A node names one
egress port and one RID, and may be pruned per packet by its L1 exclusion id.
The L2 port map is collapsed onto the node: a packet carries a RID and a set
of ports, and a node matching both is suppressed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Iterable, List, NamedTuple


class PreError(Exception):
    pass


class TreeBudgetExhausted(PreError):
    pass


class L1BudgetExhausted(PreError):
    pass


class RidBudgetExhausted(PreError):
    pass


class DuplicateMgid(PreError):
    pass


class DuplicateRidPort(PreError):
    pass


class UnknownMgid(PreError, KeyError):
    pass


@dataclass(frozen=True)
class L1Node:
    node_id: int
    rid: int
    l1_xid: int
    prune_enabled: bool
    egress_port: int


@dataclass(frozen=True)
class ReplicationTree:
    mgid: int
    l1_nodes: tuple


@dataclass(frozen=True)
class PacketReplicationMeta:
    mgid: int
    l1_xid: int = 0
    rid: int = 0
    l2_xid_ports: FrozenSet[int] = frozenset()


class Replica(NamedTuple):
    egress_port: int
    rid: int


@dataclass
class PreResources:
    max_trees: int = 65536
    max_l1_nodes_total: int = 1 << 24
    max_rids_per_tree: int = 65536
    used_trees: int = 0
    used_l1_nodes: int = 0


@dataclass
class ReplicationEngine:
    """Owns the trees and the budget counters."""

    resources: PreResources = field(default_factory=PreResources)
    trees: Dict[int, ReplicationTree] = field(default_factory=dict)
    _next_node_id: int = 0
    _next_mgid: int = 0
    _freed_mgids: List[int] = field(default_factory=list)

    def new_node(self, rid: int, egress_port: int, l1_xid: int = 0, prune_enabled: bool = True) -> L1Node:
        """Allocate an engine-wide unique node id."""
        self._next_node_id += 1
        return L1Node(self._next_node_id, rid, l1_xid, prune_enabled, egress_port)

    def create_tree(self, mgid: int, nodes: Iterable[L1Node]) -> ReplicationTree:
        nodes = tuple(nodes)
        res = self.resources
        if mgid in self.trees:
            raise DuplicateMgid(mgid)
        if res.used_trees >= res.max_trees:
            raise TreeBudgetExhausted(f"{res.used_trees} of {res.max_trees} trees in use")
        if res.used_l1_nodes + len(nodes) > res.max_l1_nodes_total:
            raise L1BudgetExhausted(
                f"need {len(nodes)} L1 nodes, {res.max_l1_nodes_total - res.used_l1_nodes} left")
        seen = set()
        rids = set()
        for n in nodes:
            key = (n.rid, n.egress_port)
            if key in seen:
                raise DuplicateRidPort(key)
            seen.add(key)
            rids.add(n.rid)
        if len(rids) > res.max_rids_per_tree or any(not 0 <= r < res.max_rids_per_tree for r in rids):
            raise RidBudgetExhausted(f"tree {mgid} exceeds {res.max_rids_per_tree} RIDs")
        tree = ReplicationTree(mgid, nodes)
        self.trees[mgid] = tree
        res.used_trees += 1
        res.used_l1_nodes += len(nodes)
        return tree

    def destroy_tree(self, mgid: int) -> None:
        tree = self.trees.pop(mgid, None)
        if tree is None:
            raise UnknownMgid(mgid)
        self.resources.used_trees -= 1
        self.resources.used_l1_nodes -= len(tree.l1_nodes)
        self._freed_mgids.append(mgid)

    def add_nodes(self, mgid: int, nodes: Iterable[L1Node]) -> ReplicationTree:
        """Attach more L1 nodes to a live tree (hardware supports this in place)."""
        tree = self.trees.get(mgid)
        if tree is None:
            raise UnknownMgid(mgid)
        nodes = tuple(nodes)
        res = self.resources
        if res.used_l1_nodes + len(nodes) > res.max_l1_nodes_total:
            raise L1BudgetExhausted(
                f"need {len(nodes)} L1 nodes, {res.max_l1_nodes_total - res.used_l1_nodes} left")
        merged = tree.l1_nodes + nodes
        keys = [(n.rid, n.egress_port) for n in merged]
        if len(set(keys)) != len(keys):
            raise DuplicateRidPort(mgid)
        rids = {n.rid for n in merged}
        if len(rids) > res.max_rids_per_tree or any(not 0 <= r < res.max_rids_per_tree for r in rids):
            raise RidBudgetExhausted(f"tree {mgid} exceeds {res.max_rids_per_tree} RIDs")
        tree = ReplicationTree(mgid, merged)
        self.trees[mgid] = tree
        res.used_l1_nodes += len(nodes)
        return tree

    def remove_nodes(self, mgid: int, node_ids: Iterable[int]) -> ReplicationTree:
        tree = self.trees.get(mgid)
        if tree is None:
            raise UnknownMgid(mgid)
        drop = set(node_ids)
        kept = tuple(n for n in tree.l1_nodes if n.node_id not in drop)
        self.resources.used_l1_nodes -= len(tree.l1_nodes) - len(kept)
        tree = ReplicationTree(mgid, kept)
        self.trees[mgid] = tree
        return tree

    def replicate(self, meta: PacketReplicationMeta) -> List[Replica]:
        tree = self.trees.get(meta.mgid)
        if tree is None:
            raise UnknownMgid(meta.mgid)
        out = []
        for n in tree.l1_nodes:
            if n.prune_enabled and n.l1_xid == meta.l1_xid:
                continue
            if n.rid == meta.rid and n.egress_port in meta.l2_xid_ports:
                continue
            out.append(Replica(n.egress_port, n.rid))
        return out

    def allocate_mgid(self) -> int:
        """Smallest-effort unused MGID; freed ids are reused first."""
        while self._freed_mgids:
            mgid = self._freed_mgids.pop()
            if mgid not in self.trees:
                return mgid
        while True:
            self._next_mgid += 1
            if self._next_mgid not in self.trees:
                return self._next_mgid

    def check_conservation(self) -> bool:
        return (sum(len(t.l1_nodes) for t in self.trees.values()) == self.resources.used_l1_nodes
                and len(self.trees) == self.resources.used_trees)

    def dump(self) -> dict:
        return {
            "resources": asdict(self.resources),
            "trees": {str(m): [asdict(n) for n in t.l1_nodes] for m, t in sorted(self.trees.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.dump(), indent=2)


# functional aliases mirroring the engine methods
def create_tree(engine: ReplicationEngine, mgid: int, nodes: Iterable[L1Node]) -> ReplicationTree:
    return engine.create_tree(mgid, nodes)


def destroy_tree(engine: ReplicationEngine, mgid: int) -> None:
    engine.destroy_tree(mgid)


def replicate(meta: PacketReplicationMeta, engine: ReplicationEngine) -> List[Replica]:
    return engine.replicate(meta)
