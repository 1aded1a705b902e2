"""Simulated message-passing world for HSkip+ nodes.

A :class:`World` owns the live nodes, one FIFO channel per ordered pair of
nodes, the scheduler clock and a seeded ``numpy`` generator. Two schedulers
are offered:

* :meth:`World.step_round` is the synchronous round: every live node, in
  ascending id, handles the messages that were queued for it when the round
  started and then runs its periodic action once.
* :meth:`World.step_async` executes one enabled action chosen by the
  generator, forcing any action that has waited half the fairness window.

``clock`` counts rounds under the first scheduler and single steps under
the second; a world is driven by one of them only.
"""

from __future__ import annotations

import copy
import logging
from collections import Counter, defaultdict, deque
from collections.abc import Iterable
from dataclasses import dataclass, field
from enum import Enum
from typing import TextIO

import networkx as nx
import numpy as np

from hskip import protocol
from hskip.core import DEFAULT_CAP, BandwidthKey, BitStream, NodeId, common_prefix
from hskip.errors import NoRoute, QueueOverflow, UnknownNode
from hskip.oracle import (
    GlobalView,
    LegalityReport,
    TargetEdgeSet,
    ViewNode,
    is_legal,
    target_edges,
)
from hskip.protocol import Message, MessageKind, NodeRef, NodeState, Outbound

logger = logging.getLogger("hskip.simnet")

DEFAULT_MAX_QUEUED = 10**7
DEFAULT_FAIRNESS_FACTOR = 4


class Origin(str, Enum):
    PERIODIC = "periodic"
    REACTIVE = "reactive"


@dataclass(frozen=True)
class Envelope:
    src: NodeId
    dst: NodeId
    message: Message
    seq: int
    origin: Origin
    sent_at: int


@dataclass
class RoundStats:
    round: int
    by_kind: Counter = field(default_factory=Counter)
    by_origin: Counter = field(default_factory=Counter)
    edge_adds: int = 0
    edge_removes: int = 0
    dropped: int = 0
    legal: bool | None = None

    @property
    def messages(self) -> int:
        return sum(self.by_origin.values())


@dataclass
class LookupRecord:
    lookup_id: int
    src: NodeId
    dst: NodeId
    volume: float
    issued_at: int
    trace: tuple[NodeId, ...] = ()
    delivered: bool = False
    failure: str | None = None

    @property
    def hops(self) -> int:
        return max(len(self.trace) - 1, 0)


@dataclass
class MetricsSink:
    rounds: list[RoundStats] = field(default_factory=list)
    current: RoundStats = field(default_factory=lambda: RoundStats(0))
    traffic: dict[NodeId, float] = field(default_factory=lambda: defaultdict(float))
    lookups: dict[int, LookupRecord] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    isolation_events: int = 0
    dead_payloads: int = 0

    def record_send(self, kind: MessageKind, origin: Origin) -> None:
        self.current.by_kind[kind.value] += 1
        self.current.by_origin[origin.value] += 1

    def record_edges(self, adds: int, removes: int) -> None:
        self.current.edge_adds += adds
        self.current.edge_removes += removes

    def close_round(self, next_round: int) -> RoundStats:
        done = self.current
        self.rounds.append(done)
        self.current = RoundStats(next_round)
        return done

    def _all(self) -> list[RoundStats]:
        return [*self.rounds, self.current]

    def totals(self) -> dict[str, int]:
        by_origin: Counter = Counter()
        by_kind: Counter = Counter()
        adds = removes = dropped = 0
        for stats in self._all():
            by_origin.update(stats.by_origin)
            by_kind.update(stats.by_kind)
            adds += stats.edge_adds
            removes += stats.edge_removes
            dropped += stats.dropped
        return {
            "messages": sum(by_origin.values()),
            "periodic": by_origin[Origin.PERIODIC.value],
            "reactive": by_origin[Origin.REACTIVE.value],
            "build": by_kind[MessageKind.BUILD.value],
            "remove": by_kind[MessageKind.REMOVE.value],
            "lookup": by_kind[MessageKind.LOOKUP.value],
            "edge_adds": adds,
            "edge_removes": removes,
            "dropped": dropped,
        }

    def snapshot(self) -> list[tuple]:
        """Per-round counters as plain tuples, for determinism comparisons."""
        return [
            (
                s.round,
                tuple(sorted(s.by_kind.items())),
                tuple(sorted(s.by_origin.items())),
                s.edge_adds,
                s.edge_removes,
                s.dropped,
                s.legal,
            )
            for s in self._all()
        ]


class World:
    def __init__(
        self,
        seed: int = 0,
        cap: int = DEFAULT_CAP,
        max_queued: int = DEFAULT_MAX_QUEUED,
        fairness_factor: int = DEFAULT_FAIRNESS_FACTOR,
        check_invariants: bool = False,
        trace: TextIO | None = None,
    ):
        self.seed = seed
        self.cap = cap
        self.max_queued = max_queued
        self.fairness_factor = fairness_factor
        self.check_invariants = check_invariants
        self.trace = trace
        self.rng = np.random.default_rng(seed)
        self.live: dict[NodeId, NodeState] = {}
        self.departed: set[NodeId] = set()
        self.channels: dict[tuple[NodeId, NodeId], deque[Envelope]] = {}
        self.clock = 0
        self.metrics = MetricsSink()
        self.churned = False
        self._seq = 0
        self._queued = 0
        self._last_delivered: dict[tuple[NodeId, NodeId], int] = {}
        self._last_periodic: dict[NodeId, int] = {}
        self._next_lookup = 0
        self._version = 0
        self._view_cache: tuple[int, GlobalView, TargetEdgeSet] | None = None

    # ------------------------------------------------------------------ membership

    def add_node(self, node_id: NodeId, bw: float, rs: BitStream | None = None) -> NodeState:
        if node_id in self.live or node_id in self.departed:
            raise ValueError(f"node id {node_id} already used in this world")
        rs = rs or BitStream.for_node(node_id, self.cap)
        state = NodeState(node_id, rs, BandwidthKey(bw, node_id))
        self.live[node_id] = state
        self._last_periodic[node_id] = self.clock
        self._touch()
        return state

    def fresh_id(self) -> NodeId:
        while True:
            node_id = int(self.rng.integers(0, 2**64, dtype=np.uint64))
            if node_id not in self.live and node_id not in self.departed:
                return node_id

    def node(self, node_id: NodeId) -> NodeState:
        try:
            return self.live[node_id]
        except KeyError:
            raise UnknownNode(f"node {node_id} is not live") from None

    def link(self, v: NodeId, w: NodeId) -> None:
        """Store a correct reference to ``w`` in v's neighbourhood (an explicit edge)."""
        state = self.node(v)
        self._commit(v, state.with_nh({**state.nh, w: self.node(w).ref}))

    def join(
        self, node_id: NodeId, bw: float, contact: NodeId, rs: BitStream | None = None
    ) -> None:
        contact_ref = self.node(contact).ref
        state = self.add_node(node_id, bw, rs)
        state, out = protocol.join(state, contact_ref)
        self._commit(node_id, state)
        self._send_all(node_id, out, Origin.REACTIVE)
        logger.debug("join %d via %d", node_id, contact)

    def leave(self, node_id: NodeId) -> None:
        _, out = protocol.leave(self.node(node_id))
        self._retire(node_id, keep_outbound=True)
        self._send_all(node_id, out, Origin.REACTIVE)
        logger.debug("leave %d (%d farewells)", node_id, len(out))

    def crash(self, victims: Iterable[NodeId]) -> None:
        victims = sorted(set(victims))
        for v in victims:
            self.node(v)
        for v in victims:
            self._retire(v, keep_outbound=False)
        logger.debug("crashed %d nodes", len(victims))

    def change_bandwidth(self, node_id: NodeId, bw: float) -> None:
        self._commit(node_id, protocol.change_bandwidth(self.node(node_id), bw))
        self._touch()

    def _retire(self, node_id: NodeId, keep_outbound: bool) -> None:
        del self.live[node_id]
        self._last_periodic.pop(node_id, None)
        self.departed.add(node_id)
        self.churned = True
        doomed = [
            p
            for p in self.channels
            if p[1] == node_id or (not keep_outbound and p[0] == node_id)
        ]
        for pair in doomed:
            self._queued -= len(self.channels.pop(pair))
        self._touch()

    # ------------------------------------------------------------------ channels

    def send(self, src: NodeId, dst: NodeId, message: Message, origin: Origin) -> None:
        self.metrics.record_send(message.kind, origin)
        if self.trace is not None:
            self.trace.write(
                f"{self.clock},{src},{dst},{message.kind.value},{message.ref.id},{origin.value}\n"
            )
        if dst not in self.live:
            self.metrics.current.dropped += 1
            return
        self._seq += 1
        self.channels.setdefault((src, dst), deque()).append(
            Envelope(src, dst, message, self._seq, origin, self.clock)
        )
        self._queued += 1
        if self._queued > self.max_queued:
            raise QueueOverflow(
                f"{self._queued} queued messages exceed the ceiling {self.max_queued}"
            )

    def _send_all(self, src: NodeId, out: list[Outbound], origin: Origin) -> None:
        for o in out:
            self.send(src, o.dst, o.message, origin)

    def queued(self) -> int:
        return self._queued

    def nonempty_channels(self) -> list[tuple[NodeId, NodeId]]:
        return sorted(pair for pair, q in self.channels.items() if q)

    # ------------------------------------------------------------------ node activation

    def _commit(self, node_id: NodeId, state: NodeState) -> None:
        old = self.live[node_id].nh
        if state.nh is not old:
            adds = sum(1 for w in state.nh if w not in old)
            removes = sum(1 for w in old if w not in state.nh)
            self.metrics.record_edges(adds, removes)
        self.live[node_id] = state

    def detect_and_purge(self, node_id: NodeId) -> NodeState:
        """Drop references to departed nodes from a node's neighbourhood."""
        state = self.live[node_id]
        dead = [w for w in state.nh if w not in self.live]
        if not dead:
            return state
        state = state.with_nh({w: r for w, r in state.nh.items() if w in self.live})
        if not state.nh:
            self.metrics.isolation_events += 1
            logger.warning("node %d lost every neighbour at t=%d", node_id, self.clock)
        self._commit(node_id, state)
        return state

    def _periodic(self, node_id: NodeId) -> None:
        before = self.live[node_id]
        state, out = protocol.periodic_action(before)
        self._check_conservation(before, state, out, None)
        self._commit(node_id, state)
        self._last_periodic[node_id] = self.clock
        self._send_all(node_id, out, Origin.PERIODIC)

    def _deliver(self, env: Envelope) -> None:
        pair = (env.src, env.dst)
        if self.check_invariants:
            last = self._last_delivered.get(pair, 0)
            if env.seq <= last:
                self.metrics.violations.append(
                    f"FIFO {env.src}->{env.dst} seq {env.seq} after {last}"
                )
            self._last_delivered[pair] = env.seq
        msg = env.message
        if msg.kind is MessageKind.LOOKUP:
            self._route_lookup(env.dst, msg)
            return
        if msg.kind is MessageKind.BUILD and msg.ref.id not in self.live:
            self.metrics.dead_payloads += 1
            return
        before = self.live[env.dst]
        result = protocol.handle_message(before, msg, env.src)
        removed_by_request = msg.ref.id if msg.kind is MessageKind.REMOVE else None
        incoming = msg.ref if msg.kind is MessageKind.BUILD else None
        self._check_conservation(
            before, result.state, result.outbound, removed_by_request, incoming
        )
        self._commit(env.dst, result.state)
        self._send_all(env.dst, result.outbound, Origin.REACTIVE)

    def _check_conservation(
        self,
        before: NodeState,
        after: NodeState,
        out: list[Outbound],
        removed_by_request: NodeId | None = None,
        incoming: NodeRef | None = None,
    ) -> None:
        if not self.check_invariants:
            return
        forwarded = {o.message.ref.id for o in out if o.message.kind is MessageKind.BUILD}
        for w in before.nh:
            if w not in after.nh and w != removed_by_request and w not in forwarded:
                self.metrics.violations.append(
                    f"REFERENCE {before.id} dropped {w} without delegating it at t={self.clock}"
                )
        delegated = {w: r for w, r in before.nh.items() if w not in after.nh}
        if incoming is not None and incoming.id not in after.nh and incoming.id != before.id:
            delegated[incoming.id] = incoming
        for o in out:
            x = delegated.get(o.message.ref.id)
            if o.message.kind is not MessageKind.BUILD or x is None:
                continue
            self._check_progress(before, after, x, o.dst)

    def _check_progress(
        self, before: NodeState, after: NodeState, x: NodeRef, dst: NodeId
    ) -> None:
        """A delegated reference moves to a neighbour sharing at least as long a prefix."""
        here = common_prefix(x.rs, before.rs)
        better = any(common_prefix(x.rs, r.rs) > here for r in after.nh.values())
        target = after.nh.get(dst) or before.nh.get(dst)
        if not better or target is None:
            return
        there = common_prefix(x.rs, target.rs)
        if there < here:
            self.metrics.violations.append(
                f"DELEGATION {before.id} sent {x.id} to {dst} with prefix {there} < {here}"
                f" at t={self.clock}"
            )

    # ------------------------------------------------------------------ schedulers

    def step_round(self) -> RoundStats:
        snapshot = {pair: len(q) for pair, q in self.channels.items() if q}
        inbound: dict[NodeId, list[tuple[NodeId, NodeId]]] = defaultdict(list)
        for pair in sorted(snapshot):
            inbound[pair[1]].append(pair)
        for v in sorted(self.live):
            self.detect_and_purge(v)
            for pair in inbound.get(v, ()):
                queue = self.channels.get(pair)
                for _ in range(snapshot[pair]):
                    if not queue:
                        break
                    self._queued -= 1
                    self._deliver(queue.popleft())
            self._periodic(v)
        self.clock += 1
        self._after_step()
        stats = self.metrics.close_round(self.clock)
        logger.debug(
            "round %d: %d messages, +%d/-%d edges, %d queued",
            stats.round,
            stats.messages,
            stats.edge_adds,
            stats.edge_removes,
            self._queued,
        )
        return stats

    def fairness_window(self) -> int:
        return self.fairness_factor * (len(self.live) + len(self.nonempty_channels()))

    def enabled_actions(self) -> list[tuple[str, object]]:
        """``("periodic", v)`` for every live node and ``("deliver", pair)`` per channel head."""
        actions: list[tuple[str, object]] = [("periodic", v) for v in sorted(self.live)]
        actions += [("deliver", pair) for pair in self.nonempty_channels()]
        return actions

    def _age(self, action: tuple[str, object]) -> int:
        kind, what = action
        if kind == "periodic":
            return self.clock - self._last_periodic[what]
        return self.clock - self.channels[what][0].sent_at

    def step_async(self) -> tuple[str, object] | None:
        actions = self.enabled_actions()
        if not actions:
            return None
        limit = self.fairness_window() // 2
        overdue = [a for a in actions if self._age(a) >= limit]
        if overdue:
            action = max(overdue, key=self._age)
        else:
            action = actions[int(self.rng.integers(len(actions)))]
        kind, what = action
        if kind == "periodic":
            self.detect_and_purge(what)
            self._periodic(what)
        else:
            src, dst = what
            self.detect_and_purge(dst)
            self._queued -= 1
            self._deliver(self.channels[what].popleft())
        self.clock += 1
        self._after_step()
        return action

    def _after_step(self) -> None:
        if self.check_invariants and not self.churned and not self.connectivity_check():
            self.metrics.violations.append(f"CONNECTIVITY lost at t={self.clock}")

    # ------------------------------------------------------------------ lookups

    def inject_lookup(self, src: NodeId, dst: NodeId, volume: float = 0.0) -> int:
        lookup_id = self._next_lookup
        self._next_lookup += 1
        self.metrics.lookups[lookup_id] = LookupRecord(lookup_id, src, dst, volume, self.clock)
        self._route_lookup(src, Message.lookup(self.node(dst).ref, volume, lookup_id))
        return lookup_id

    def _route_lookup(self, at: NodeId, message: Message) -> None:
        record = self.metrics.lookups.get(message.lookup_id)
        if message.target.id not in self.live:
            self._fail_lookup(record, message.trace + (at,), "target departed")
            return
        try:
            result = protocol.handle_lookup(self.live[at], message)
        except NoRoute as e:
            self._fail_lookup(record, message.trace + (at,), str(e))
            return
        if result.delivered:
            if record is not None:
                record.trace = result.message.trace
                record.delivered = True
            return
        if len(result.message.trace) > self.cap:
            self._fail_lookup(record, result.message.trace, "hop limit reached")
            return
        self.metrics.traffic[at] += message.volume
        self.send(at, result.next_hop, result.message, Origin.REACTIVE)

    def _fail_lookup(
        self, record: LookupRecord | None, trace: tuple[NodeId, ...], why: str
    ) -> None:
        if record is None:
            return
        record.trace = trace
        record.failure = why
        logger.warning(
            "lookup %d (%d -> %d) failed: %s", record.lookup_id, record.src, record.dst, why
        )

    # ------------------------------------------------------------------ global queries

    def _touch(self) -> None:
        self._version += 1

    def view(self) -> GlobalView:
        return self._oracle()[0]

    def target(self) -> TargetEdgeSet:
        return self._oracle()[1]

    def _oracle(self) -> tuple[GlobalView, TargetEdgeSet]:
        if self._view_cache is None or self._view_cache[0] != self._version:
            view = GlobalView(ViewNode(s.id, s.rs, s.bw) for s in self.live.values())
            self._view_cache = (self._version, view, target_edges(view))
        return self._view_cache[1], self._view_cache[2]

    def explicit_edges(self) -> set[tuple[NodeId, NodeId]]:
        return {(v, w) for v, s in self.live.items() for w in s.nh}

    def cached_info(self) -> dict[tuple[NodeId, NodeId], BandwidthKey]:
        return {(v, w): ref.bw for v, s in self.live.items() for w, ref in s.nh.items()}

    def legality(self, ids: Iterable[NodeId] | None = None) -> LegalityReport:
        if ids is None:
            view, target = self._oracle()
            return is_legal(view, self.explicit_edges(), self.cached_info(), target)
        ids = set(ids)
        view = self.view().subview(sorted(ids))
        edges = {(v, w) for v, w in self.explicit_edges() if v in ids}
        cached = {k: bw for k, bw in self.cached_info().items() if k[0] in ids}
        return is_legal(view, edges, cached)

    def is_legal(self) -> bool:
        return self.legality().legal

    def graph(self) -> nx.Graph:
        """Undirected union of explicit and implicit edges over live nodes."""
        g = nx.Graph()
        g.add_nodes_from(self.live)
        for v, w in self.explicit_edges():
            if w in self.live:
                g.add_edge(v, w)
        for (_, dst), queue in self.channels.items():
            if dst not in self.live:
                continue
            for env in queue:
                if env.message.ref.id in self.live and env.message.ref.id != dst:
                    g.add_edge(dst, env.message.ref.id)
        return g

    def connectivity_check(self) -> bool:
        if len(self.live) <= 1:
            return True
        return nx.is_connected(self.graph())

    def components(self) -> list[set[NodeId]]:
        comps = [set(c) for c in nx.connected_components(self.graph())]
        return sorted(comps, key=min)

    def max_degree(self) -> int:
        return max((len(s.nh) for s in self.live.values()), default=0)

    def clone(self) -> World:
        """Independent deep copy; the trace sink is not shared."""
        trace, self.trace = self.trace, None
        try:
            return copy.deepcopy(self)
        finally:
            self.trace = trace
