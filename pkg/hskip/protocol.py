"""HSkip+ node state machine.

Every operation is a pure transition ``(state, stimulus) -> (state', outbound)``.
All local computations order neighbours by their *cached* bandwidth keys and
iterate neighbourhoods in ascending id so runs are reproducible bit for bit.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

from hskip.core import BandwidthKey, BitStream, NodeId, common_prefix
from hskip.errors import NoRoute


@dataclass(frozen=True)
class NodeRef:
    """Copyable reference: id, bit stream and a (possibly stale) bandwidth snapshot."""

    id: NodeId
    rs: BitStream
    bw: BandwidthKey
    # bumped by the referenced node on every bandwidth change
    epoch: int = 0


class MessageKind(str, Enum):
    BUILD = "build"
    REMOVE = "remove"
    LOOKUP = "lookup"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    ref: NodeRef
    # lookup only
    trace: tuple[NodeId, ...] = ()
    volume: float = 0.0
    lookup_id: int = -1

    @classmethod
    def build(cls, ref: NodeRef) -> Message:
        return cls(MessageKind.BUILD, ref)

    @classmethod
    def remove(cls, ref: NodeRef) -> Message:
        return cls(MessageKind.REMOVE, ref)

    @classmethod
    def lookup(cls, target: NodeRef, volume: float = 0.0, lookup_id: int = -1) -> Message:
        return cls(MessageKind.LOOKUP, target, (), volume, lookup_id)

    @property
    def target(self) -> NodeRef:
        return self.ref

    @property
    def hops(self) -> int:
        return max(len(self.trace) - 1, 0)


@dataclass(frozen=True)
class Outbound:
    dst: NodeId
    message: Message


@dataclass(frozen=True)
class NodeState:
    """A live node: identity, bit stream, true bandwidth and neighbourhood.

    ``checked`` is set when a neighbourhood check found nothing to remove and
    nothing changed since; the next check can then be skipped because it is a
    deterministic function of the fields above.
    """

    id: NodeId
    rs: BitStream
    bw: BandwidthKey
    nh: Mapping[NodeId, NodeRef] = field(default_factory=dict)
    checked: bool = False
    departed: bool = False
    epoch: int = 0

    def __post_init__(self) -> None:
        if self.id in self.nh:
            raise ValueError(f"node {self.id} cannot store a reference to itself")
        if self.bw.id != self.id:
            raise ValueError(f"bandwidth key id {self.bw.id} does not match node {self.id}")

    @property
    def ref(self) -> NodeRef:
        return NodeRef(self.id, self.rs, self.bw, self.epoch)

    def with_nh(self, nh: Mapping[NodeId, NodeRef]) -> NodeState:
        return replace(self, nh=dict(nh), checked=False)

    @cached_property
    def view(self) -> LocalView:
        return LocalView(self)


@dataclass(frozen=True)
class LevelView:
    """A node's neighbours at one level, nearest first on each side."""

    preds: tuple[NodeRef, ...] = ()
    succs: tuple[NodeRef, ...] = ()
    first_pred: tuple[NodeRef | None, NodeRef | None] = (None, None)
    first_succ: tuple[NodeRef | None, NodeRef | None] = (None, None)
    range_preds: tuple[NodeRef, ...] = ()
    range_succs: tuple[NodeRef, ...] = ()

    @property
    def farthest_pred(self) -> NodeRef | None:
        return self.range_preds[-1] if self.range_preds else None

    @property
    def farthest_succ(self) -> NodeRef | None:
        return self.range_succs[-1] if self.range_succs else None

    @property
    def closest_pred(self) -> NodeRef | None:
        return self.preds[0] if self.preds else None

    @property
    def closest_succ(self) -> NodeRef | None:
        return self.succs[0] if self.succs else None

    @property
    def neighbors(self) -> tuple[NodeRef, ...]:
        return self.preds + self.succs


_EMPTY_LEVEL = LevelView()


def _scan(side: tuple[NodeRef, ...], i: int):
    first: list[NodeRef | None] = [None, None]
    far = -1
    for idx, ref in enumerate(side):
        b = ref.rs.bit(i)
        if first[b] is None:
            first[b] = ref
            far = idx
            if first[1 - b] is not None:
                break
    return (first[0], first[1]), side[: far + 1]


class LocalView:
    """Per-level decomposition of ``state.nh`` as seen from the node itself."""

    def __init__(self, state: NodeState):
        key = state.bw
        refs = sorted(state.nh.values(), key=lambda r: r.bw)
        self.cp: dict[NodeId, int] = {r.id: common_prefix(state.rs, r.rs) for r in refs}
        self.level: int = max(self.cp.values(), default=0)
        preds = [r for r in refs if r.bw > key]
        succs = [r for r in reversed(refs) if r.bw < key]
        self.levels: list[LevelView] = []
        for i in range(self.level + 1):
            p = tuple(r for r in preds if self.cp[r.id] >= i)
            s = tuple(r for r in succs if self.cp[r.id] >= i)
            fp, rp = _scan(p, i)
            fs, rs = _scan(s, i)
            self.levels.append(LevelView(p, s, fp, fs, rp, rs))

    def at(self, i: int) -> LevelView:
        if 0 <= i < len(self.levels):
            return self.levels[i]
        return _EMPTY_LEVEL


def local_level(v: NodeState) -> int:
    return v.view.level


def local_farthest_pred(v: NodeState, i: int, b: int | None = None) -> NodeRef | None:
    """Per-bit variant returns the nearest predecessor extending the prefix with ``b``."""
    lv = v.view.at(i)
    return lv.farthest_pred if b is None else lv.first_pred[b]


def local_farthest_succ(v: NodeState, i: int, b: int | None = None) -> NodeRef | None:
    lv = v.view.at(i)
    return lv.farthest_succ if b is None else lv.first_succ[b]


def local_closest_pred(v: NodeState, i: int) -> NodeRef | None:
    return v.view.at(i).closest_pred


def local_closest_succ(v: NodeState, i: int) -> NodeRef | None:
    return v.view.at(i).closest_succ


def local_neighbors(v: NodeState, i: int) -> list[NodeRef]:
    return list(v.view.at(i).neighbors)


def local_predecessors(v: NodeState, i: int) -> list[NodeRef]:
    return list(v.view.at(i).preds)


def local_successors(v: NodeState, i: int) -> list[NodeRef]:
    return list(v.view.at(i).succs)


def check_node(v: NodeState, w: NodeRef) -> bool:
    """True iff ``w`` lies in v's local range at some level up to local_level(v)."""
    if v.nh.get(w.id) != w:
        v = v.with_nh({**v.nh, w.id: w})
    view = v.view
    for i in range(min(view.level, view.cp[w.id]) + 1):
        lv = view.levels[i]
        fp, fs = lv.farthest_pred, lv.farthest_succ
        if (fp is None or w.bw <= fp.bw) and (fs is None or w.bw >= fs.bw):
            return True
    return False


def forward_target(v: NodeState, x: NodeRef) -> NodeId:
    """Neighbour sharing the longest prefix with ``x``; ties go to the smaller id."""
    return max(sorted(v.nh), key=lambda w: (common_prefix(x.rs, v.nh[w].rs), -w))


def check_neighborhood(v: NodeState) -> tuple[NodeState, list[Outbound]]:
    """Single pass: drop every unneeded neighbour and delegate it onwards."""
    if v.checked:
        return v, []
    current = v
    out: list[Outbound] = []
    for wid in sorted(v.nh):
        w = current.nh[wid]
        if len(current.nh) == 1 or check_node(current, w):
            continue
        current = current.with_nh({k: r for k, r in current.nh.items() if k != wid})
        out.append(Outbound(forward_target(current, w), Message.build(w)))
    if not out:
        current = replace(current, checked=True)
    return current, out


def introduce_node(v: NodeState) -> list[Outbound]:
    me = Message.build(v.ref)
    return [Outbound(w, me) for w in sorted(v.nh)]


def introduce_closest_neighbors(v: NodeState) -> list[Outbound]:
    out: list[Outbound] = []
    for lv in v.view.levels:
        targets = sorted(r.id for r in lv.neighbors)
        for closest in (lv.closest_pred, lv.closest_succ):
            if closest is not None:
                msg = Message.build(closest)
                out.extend(Outbound(w, msg) for w in targets)
    return out


def linearize_neighbors(v: NodeState) -> list[Outbound]:
    out: list[Outbound] = []
    for lv in v.view.levels:
        for side in (lv.preds, lv.succs):
            out.extend(Outbound(a.id, Message.build(b)) for a, b in zip(side, side[1:]))
    return out


def periodic_action(v: NodeState) -> tuple[NodeState, list[Outbound]]:
    v, out = check_neighborhood(v)
    out += introduce_node(v)
    out += introduce_closest_neighbors(v)
    out += linearize_neighbors(v)
    return v, out


def answer_introduction(v: NodeState, x: NodeRef) -> list[Outbound]:
    """Closest and first-per-bit neighbours of ``v`` on every level it shares with ``x``.

    Sent back to a node that introduced itself, whether or not ``v`` keeps it.
    """
    view = v.view
    top = min(view.level, common_prefix(v.rs, x.rs))
    seen = {x.id}
    out: list[Outbound] = []
    for lv in view.levels[: top + 1]:
        for ref in (lv.closest_pred, lv.closest_succ, *lv.first_pred, *lv.first_succ):
            if ref is not None and ref.id not in seen:
                seen.add(ref.id)
                out.append(Outbound(x.id, Message.build(ref)))
    return out


def handle_build(
    v: NodeState, x: NodeRef, sender: NodeId | None = None
) -> tuple[NodeState, list[Outbound]]:
    if x.id == v.id:
        return v, []
    if x.id in v.nh:
        stored = v.nh[x.id]
        # an older copy never overwrites a newer one; equal epochs take the incoming copy
        if x != stored and x.epoch >= stored.epoch:
            v = v.with_nh({**v.nh, x.id: x})
        v, out = check_neighborhood(v)
    else:
        candidate = v.with_nh({**v.nh, x.id: x})
        if check_node(candidate, x):
            v, out = check_neighborhood(candidate)
        else:
            out = [Outbound(forward_target(v, x), Message.build(x))]
    if sender == x.id:
        out = out + answer_introduction(v, x)
    return v, out


def handle_remove(v: NodeState, x: NodeRef) -> NodeState:
    if x.id not in v.nh:
        return v
    return v.with_nh({k: r for k, r in v.nh.items() if k != x.id})


def lookup_next_hop(v: NodeState, target: NodeRef) -> NodeRef | None:
    view = v.view
    length = min(view.level, common_prefix(v.rs, target.rs))
    b = target.rs.bit(length)
    lv = view.at(length)
    return lv.first_pred[b] or lv.first_succ[b]


@dataclass(frozen=True)
class LookupResult:
    message: Message
    delivered: bool
    next_hop: NodeId | None = None


def handle_lookup(v: NodeState, message: Message) -> LookupResult:
    trace = message.trace + (v.id,)
    stamped = replace(message, trace=trace)
    if v.id == message.target.id:
        return LookupResult(stamped, True)
    w = lookup_next_hop(v, message.target)
    if w is None:
        raise NoRoute(f"node {v.id} has no next hop towards {message.target.id}")
    return LookupResult(stamped, False, w.id)


def join(v: NodeState, contact: NodeRef) -> tuple[NodeState, list[Outbound]]:
    fresh = replace(v, nh={}, checked=False, departed=False)
    return fresh, [Outbound(contact.id, Message.build(fresh.ref))]


def leave(v: NodeState) -> tuple[NodeState, list[Outbound]]:
    bye = Message.remove(v.ref)
    out = [Outbound(w, bye) for w in sorted(v.nh)]
    return replace(v, nh={}, checked=False, departed=True), out


def change_bandwidth(v: NodeState, bw: float | BandwidthKey) -> NodeState:
    key = bw if isinstance(bw, BandwidthKey) else BandwidthKey(float(bw), v.id)
    return replace(v, bw=key, epoch=v.epoch + 1, checked=False)


@dataclass(frozen=True)
class Transition:
    state: NodeState
    outbound: list[Outbound]
    delivered: Message | None = None


def handle_message(v: NodeState, message: Message, sender: NodeId | None = None) -> Transition:
    if message.kind is MessageKind.BUILD:
        state, out = handle_build(v, message.ref, sender)
        return Transition(state, out)
    if message.kind is MessageKind.REMOVE:
        return Transition(handle_remove(v, message.ref), [])
    result = handle_lookup(v, message)
    if result.delivered:
        return Transition(v, [], result.message)
    return Transition(v, [Outbound(result.next_hop, result.message)])
