"""Global (omniscient) HSkip+ topology.

Everything here works on an immutable snapshot of the true node values and
is used as ground truth: the protocol is legal when the nodes' explicit
edges equal ``target_edges`` and their cached bandwidths are current.
"""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field

from hskip.core import BandwidthKey, BitStream, NodeId, common_prefix
from hskip.errors import UnknownNode


@dataclass(frozen=True)
class ViewNode:
    id: NodeId
    rs: BitStream
    key: BandwidthKey


class GlobalView:
    """Snapshot of (id, bit stream, bandwidth key) for a set of nodes."""

    def __init__(self, nodes: Iterable[ViewNode]):
        self._nodes: dict[NodeId, ViewNode] = {}
        for node in nodes:
            if node.id in self._nodes:
                raise ValueError(f"duplicate node id {node.id}")
            self._nodes[node.id] = node
        # ascending bandwidth key: successors come first, predecessors last
        self._ordered = sorted(self._nodes.values(), key=lambda n: n.key)
        self._pos = {n.id: p for p, n in enumerate(self._ordered)}

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._nodes

    def __iter__(self) -> Iterator[ViewNode]:
        return iter(self._ordered)

    def ids(self) -> list[NodeId]:
        return sorted(self._nodes)

    def node(self, node_id: NodeId) -> ViewNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNode(f"node {node_id} is not in the view") from None

    def ordered(self) -> list[ViewNode]:
        return list(self._ordered)

    def position(self, node_id: NodeId) -> int:
        self.node(node_id)
        return self._pos[node_id]

    def subview(self, ids: Iterable[NodeId]) -> GlobalView:
        return GlobalView(self.node(i) for i in ids)


@dataclass(frozen=True)
class TargetEdgeSet:
    """Directed HSkip+ edges with every level that witnesses them."""

    levels: Mapping[tuple[NodeId, NodeId], tuple[int, ...]] = field(default_factory=dict)

    def __contains__(self, edge: object) -> bool:
        return edge in self.levels

    def __iter__(self) -> Iterator[tuple[NodeId, NodeId]]:
        return iter(sorted(self.levels))

    def __len__(self) -> int:
        return len(self.levels)

    def edges(self) -> set[tuple[NodeId, NodeId]]:
        return set(self.levels)

    def witness(self, v: NodeId, w: NodeId) -> int:
        """Lowest level witnessing v→w."""
        return self.levels[(v, w)][0]

    def out_degrees(self) -> dict[NodeId, int]:
        deg: dict[NodeId, int] = defaultdict(int)
        for v, _ in self.levels:
            deg[v] += 1
        return dict(deg)


def _cp(a: ViewNode, b: ViewNode) -> int:
    return common_prefix(a.rs, b.rs)


def component(view: GlobalView, v: NodeId, i: int) -> set[NodeId]:
    me = view.node(v)
    return {w.id for w in view if w.id == v or _cp(me, w) >= i}


def graph_level(view: GlobalView) -> int:
    """Maximum common prefix over distinct pairs; 0 for fewer than two nodes."""
    if len(view) < 2:
        return 0
    # the longest common prefix of a set is attained by neighbours in stream order
    by_stream = sorted(view, key=lambda n: n.rs.value)
    return max(_cp(a, b) for a, b in zip(by_stream, by_stream[1:]))


def _first(
    view: GlobalView, v: NodeId, i: int, b: int, upward: bool
) -> NodeId | None:
    me = view.node(v)
    ordered = view.ordered()
    pos = view.position(v)
    scan = ordered[pos + 1 :] if upward else reversed(ordered[:pos])
    for u in scan:
        if _cp(me, u) >= i and u.rs.bit(i) == b:
            return u.id
    return None


def first_pred(view: GlobalView, v: NodeId, i: int, b: int) -> NodeId | None:
    """Nearest higher-key node in component(v, i) whose bit i is ``b``."""
    return _first(view, v, i, b, upward=True)


def first_succ(view: GlobalView, v: NodeId, i: int, b: int) -> NodeId | None:
    """Nearest lower-key node in component(v, i) whose bit i is ``b``."""
    return _first(view, v, i, b, upward=False)


def farthest_pred(view: GlobalView, v: NodeId, i: int) -> NodeId | None:
    found = [u for u in (first_pred(view, v, i, 0), first_pred(view, v, i, 1)) if u is not None]
    return max(found, key=lambda u: view.node(u).key, default=None)


def farthest_succ(view: GlobalView, v: NodeId, i: int) -> NodeId | None:
    found = [u for u in (first_succ(view, v, i, 0), first_succ(view, v, i, 1)) if u is not None]
    return min(found, key=lambda u: view.node(u).key, default=None)


def neighbor_range(view: GlobalView, v: NodeId, i: int) -> set[NodeId]:
    """Nodes of component(v, i) between farthest_succ(v, i) and farthest_pred(v, i)."""
    me = view.node(v)
    fp = farthest_pred(view, v, i)
    fs = farthest_succ(view, v, i)
    out: set[NodeId] = set()
    for w in view:
        if w.id == v or _cp(me, w) < i:
            continue
        if w.key > me.key and fp is not None and w.key <= view.node(fp).key:
            out.add(w.id)
        elif w.key < me.key and fs is not None and w.key >= view.node(fs).key:
            out.add(w.id)
    return out


def _span(group: list[ViewNode], start: int, step: int, i: int) -> int | None:
    """Index of the farther of the two nearest bit-0 / bit-1 nodes walking from ``start``."""
    seen: dict[int, int] = {}
    j = start + step
    while 0 <= j < len(group) and len(seen) < 2:
        seen.setdefault(group[j].rs.bit(i), j)
        j += step
    if not seen:
        return None
    return max(seen.values()) if step > 0 else min(seen.values())


def target_edges(view: GlobalView) -> TargetEdgeSet:
    levels: dict[tuple[NodeId, NodeId], list[int]] = defaultdict(list)
    for i in range(graph_level(view) + 1):
        groups: dict[int, list[ViewNode]] = defaultdict(list)
        for node in view:  # ascending key, so every group is ordered too
            groups[node.rs.prefix_int(i)].append(node)
        for group in groups.values():
            if len(group) < 2:
                continue
            for idx, v in enumerate(group):
                top = _span(group, idx, +1, i)
                if top is not None:
                    for w in group[idx + 1 : top + 1]:
                        levels[(v.id, w.id)].append(i)
                bottom = _span(group, idx, -1, i)
                if bottom is not None:
                    for w in group[bottom:idx]:
                        levels[(v.id, w.id)].append(i)
    return TargetEdgeSet({edge: tuple(lv) for edge, lv in levels.items()})


def longest_prefix_match(view: GlobalView, x: BitStream) -> NodeId:
    """Node sharing the longest prefix with ``x``; ties go to the higher bandwidth key."""
    if len(view) == 0:
        raise UnknownNode("empty view has no prefix match")
    best = max(view, key=lambda n: (common_prefix(n.rs, x), n.key))
    return best.id


@dataclass(frozen=True)
class LegalityReport:
    legal: bool
    missing: tuple[tuple[NodeId, NodeId, int], ...] = ()
    surplus: tuple[tuple[NodeId, NodeId], ...] = ()
    stale: tuple[tuple[NodeId, NodeId], ...] = ()

    def lines(self, names: Mapping[NodeId, str] | None = None) -> list[str]:
        """Diff as text lines: ``MISSING v→w@i``, ``SURPLUS v→w``, ``STALE v:w``."""
        names = names or {}

        def n(x: NodeId) -> str:
            return names.get(x, str(x))

        out = [f"MISSING {n(v)}→{n(w)}@{i}" for v, w, i in self.missing]
        out += [f"SURPLUS {n(v)}→{n(w)}" for v, w in self.surplus]
        out += [f"STALE {n(v)}:{n(w)}" for v, w in self.stale]
        return out


def is_legal(
    view: GlobalView,
    explicit_edges: Iterable[tuple[NodeId, NodeId]],
    cached_info: Mapping[tuple[NodeId, NodeId], float | BandwidthKey],
    target: TargetEdgeSet | None = None,
) -> LegalityReport:
    """Exact directed edge-set equality plus freshness of every cached bandwidth."""
    if target is None:
        target = target_edges(view)
    have = set(explicit_edges)
    want = target.edges()
    missing = tuple((v, w, target.witness(v, w)) for v, w in sorted(want - have))
    surplus = tuple(sorted(have - want))
    stale = []
    for (v, w), cached in sorted(cached_info.items()):
        if w not in view:
            continue
        cached_bw = cached.bw if isinstance(cached, BandwidthKey) else float(cached)
        if cached_bw != view.node(w).key.bw:
            stale.append((v, w))
    legal = not missing and not surplus and not stale
    return LegalityReport(legal, missing, surplus, tuple(stale))
