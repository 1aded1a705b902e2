import pytest
from conftest import f4_id
from hypothesis import given, settings
from hypothesis import strategies as st

from hskip.core import BandwidthKey, BitStream, common_prefix
from hskip.errors import InvalidBandwidth, NoRoute
from hskip.protocol import (
    Message,
    MessageKind,
    NodeRef,
    NodeState,
    answer_introduction,
    change_bandwidth,
    check_neighborhood,
    check_node,
    handle_build,
    handle_lookup,
    handle_message,
    handle_remove,
    introduce_closest_neighbors,
    introduce_node,
    join,
    leave,
    linearize_neighbors,
    local_closest_pred,
    local_closest_succ,
    local_farthest_pred,
    local_farthest_succ,
    local_level,
    local_neighbors,
    local_predecessors,
    lookup_next_hop,
    periodic_action,
)

A, B, C, D = (f4_id(x) for x in "ABCD")
FIXPOINT = {"A": "BC", "B": "AC", "C": "BD", "D": "BC"}


def _sent(out):
    return [(o.dst, o.message.kind, o.message.ref.id) for o in out]


def test_local_level(f4_state):
    assert local_level(f4_state("A")) == 0
    assert local_level(f4_state("B", "AC")) == 1
    assert local_level(f4_state("B", "C")) == 0


def test_local_views_mirror_the_global_ones(f4_state):
    d = f4_state("D", "BC")
    assert local_farthest_pred(d, 0).id == B
    assert local_farthest_pred(d, 0, 1).id == C
    assert local_farthest_succ(d, 0) is None
    assert local_closest_pred(d, 0).id == C
    assert [r.id for r in local_predecessors(d, 0)] == [C, B]
    assert [r.id for r in local_neighbors(d, 1)] == [C]
    empty = f4_state("D")
    assert local_farthest_pred(empty, 0) is None
    assert local_closest_succ(empty, 3) is None


def test_check_node(f4_state, f4_ref):
    assert not check_node(f4_state("B", "AC"), f4_ref("D"))
    assert check_node(f4_state("B"), f4_ref("D"))
    assert check_node(f4_state("A", "BC"), f4_ref("C"))


def test_check_neighborhood_drops_and_delegates_a_stray(f4_state):
    state, out = check_neighborhood(f4_state("B", "ACD"))
    assert set(state.nh) == {A, C}
    assert _sent(out) == [(C, MessageKind.BUILD, D)]
    assert not state.checked


def test_check_neighborhood_at_fixpoint_is_a_no_op(f4_state):
    for label, nh in FIXPOINT.items():
        before = f4_state(label, nh)
        state, out = check_neighborhood(before)
        assert state.nh == before.nh
        assert out == []
        assert state.checked
        assert check_neighborhood(state) == (state, [])


def test_introductions(f4_state):
    b = f4_state("B", "AC")
    assert _sent(introduce_node(b)) == [(A, MessageKind.BUILD, B), (C, MessageKind.BUILD, B)]
    assert introduce_node(f4_state("B")) == []
    assert [(dst, ref) for dst, _, ref in _sent(introduce_closest_neighbors(b))] == [
        (A, A),
        (C, A),
        (A, C),
        (C, C),
        (A, A),
    ]


def test_linearize_introduces_consecutive_neighbours(f4_state):
    assert [(dst, ref) for dst, _, ref in _sent(linearize_neighbors(f4_state("D", "BC")))] == [
        (C, B)
    ]
    assert [(dst, ref) for dst, _, ref in _sent(linearize_neighbors(f4_state("D", "ABC")))] == [
        (C, B),
        (B, A),
    ]
    assert linearize_neighbors(f4_state("A", "B")) == []


def test_periodic_action_keeps_the_fixpoint(f4_state):
    for label, nh in FIXPOINT.items():
        before = f4_state(label, nh)
        state, out = periodic_action(before)
        assert state.nh == before.nh
        assert all(o.message.kind is MessageKind.BUILD for o in out)
    lone, out = periodic_action(f4_state("A"))
    assert lone.nh == {} and out == []


def test_handle_build_paths(f4_state, f4_ref):
    b = f4_state("B", "AC")
    assert handle_build(b, b.ref) == (b, [])
    state, out = handle_build(b, f4_ref("D"))
    assert state.nh == b.nh
    assert _sent(out) == [(C, MessageKind.BUILD, D)]
    lone, out = handle_build(f4_state("B"), f4_ref("D"))
    assert set(lone.nh) == {D} and out == []


def test_self_introduction_is_answered_with_shared_level_neighbours(f4_state, f4_ref):
    b = f4_state("B", "AC")
    state, out = handle_build(b, f4_ref("D"), sender=D)
    assert state.nh == b.nh
    assert _sent(out) == [
        (C, MessageKind.BUILD, D),
        (D, MessageKind.BUILD, A),
        (D, MessageKind.BUILD, C),
    ]

    state, out = handle_build(b, f4_ref("A"), sender=A)
    assert set(state.nh) == {A, C}
    assert _sent(out) == [(A, MessageKind.BUILD, C)]

    # relayed refs are only placed or forwarded
    _, out = handle_build(f4_state("D", "BC"), f4_ref("A"), sender=B)
    assert _sent(out) == [(B, MessageKind.BUILD, A)]

    t = handle_message(b, Message.build(f4_ref("D")), sender=D)
    assert [o.dst for o in t.outbound] == [C, D, D]


def test_handle_build_refreshes_stale_cache_but_not_with_an_older_copy(f4_state, f4_ref):
    stale = f4_state("B", "C").with_nh({A: f4_ref("A", bw=35.0), C: f4_ref("C")})
    state, _ = handle_build(stale, f4_ref("A"))
    assert state.nh[A].bw == BandwidthKey(40.0, A)

    newer = stale.with_nh({A: f4_ref("A", bw=45.0, epoch=1), C: f4_ref("C")})
    state, _ = handle_build(newer, f4_ref("A"))
    assert state.nh[A].bw.bw == 45.0


def test_remove_then_build_restores(f4_state, f4_ref):
    b = f4_state("B", "AC")
    removed = handle_remove(b, f4_ref("A"))
    assert set(removed.nh) == {C}
    assert handle_remove(removed, f4_ref("A")) is removed
    restored, _ = handle_build(removed, f4_ref("A"))
    assert set(restored.nh) == {A, C}


def test_lookup_walks_d_b_a(f4_state, f4_ref):
    msg = Message.lookup(f4_ref("A"), volume=4.0)
    at_d = handle_lookup(f4_state("D", "BC"), msg)
    assert not at_d.delivered and at_d.next_hop == B
    at_b = handle_lookup(f4_state("B", "AC"), at_d.message)
    assert at_b.next_hop == A
    at_a = handle_lookup(f4_state("A", "BC"), at_b.message)
    assert at_a.delivered
    assert at_a.message.trace == (D, B, A)
    assert at_a.message.hops == 2


def test_lookup_without_a_route(f4_state, f4_ref):
    assert lookup_next_hop(f4_state("A"), f4_ref("D")) is None
    with pytest.raises(NoRoute):
        handle_lookup(f4_state("A"), Message.lookup(f4_ref("D")))
    t = handle_message(f4_state("A"), Message.lookup(f4_ref("A")))
    assert t.delivered is not None and t.delivered.trace == (A,)


def test_join_leave_change(f4_state, f4_ref):
    fresh, out = join(f4_state("D", "B"), f4_ref("B"))
    assert fresh.nh == {}
    assert _sent(out) == [(B, MessageKind.BUILD, D)]

    gone, out = leave(f4_state("C", "BD"))
    assert gone.departed and gone.nh == {}
    assert _sent(out) == [(B, MessageKind.REMOVE, C), (D, MessageKind.REMOVE, C)]

    changed = change_bandwidth(f4_state("C", "BD"), 50.0)
    assert changed.bw == BandwidthKey(50.0, C)
    assert changed.epoch == 1
    assert {o.message.ref.bw.bw for o in introduce_node(changed)} == {50.0}
    with pytest.raises(InvalidBandwidth):
        change_bandwidth(changed, 0.0)


def test_handle_message_dispatches_remove(f4_state, f4_ref):
    t = handle_message(f4_state("B", "AC"), Message.remove(f4_ref("C")))
    assert set(t.state.nh) == {A}
    assert t.outbound == []


def test_state_cannot_reference_itself(f4_ref):
    with pytest.raises(ValueError):
        NodeState(A, f4_ref("A").rs, BandwidthKey(40.0, A), {A: f4_ref("A")})


def _ref(i: int, bw: float) -> NodeRef:
    return NodeRef(i, BitStream.for_node(i, cap=64), BandwidthKey(bw, i))


node_sets = st.lists(
    st.tuples(st.integers(2, 10**6), st.floats(0.5, 1000.0)),
    min_size=1,
    max_size=10,
    unique_by=lambda t: t[0],
)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.5, 1000.0), st.integers(2, 10**6), st.floats(0.5, 1000.0))
def test_a_single_neighbour_is_always_kept(bw, other, other_bw):
    v = NodeState(1, BitStream.for_node(1, cap=64), BandwidthKey(bw, 1))
    assert check_node(v, _ref(other, other_bw))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.5, 1000.0), node_sets)
def test_closest_neighbours_are_always_needed(bw, nodes):
    v = NodeState(
        1,
        BitStream.for_node(1, cap=64),
        BandwidthKey(bw, 1),
        {i: _ref(i, b) for i, b in nodes},
    )
    for i in range(local_level(v) + 1):
        for closest in (local_closest_pred(v, i), local_closest_succ(v, i)):
            if closest is not None:
                assert check_node(v, closest)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.5, 1000.0), node_sets)
def test_check_neighborhood_conserves_references(bw, nodes):
    v = NodeState(
        1,
        BitStream.for_node(1, cap=64),
        BandwidthKey(bw, 1),
        {i: _ref(i, b) for i, b in nodes},
    )
    state, out = check_neighborhood(v)
    dropped = set(v.nh) - set(state.nh)
    assert sorted(o.message.ref.id for o in out) == sorted(dropped)
    assert all(o.dst in v.nh for o in out)
    assert state.nh


@settings(max_examples=60, deadline=None)
@given(st.floats(0.5, 1000.0), node_sets, st.integers(2, 10**6), st.floats(0.5, 1000.0))
def test_introductions_are_answered_from_the_neighbourhood(bw, nodes, other, other_bw):
    v = NodeState(
        1,
        BitStream.for_node(1, cap=64),
        BandwidthKey(bw, 1),
        {i: _ref(i, b) for i, b in nodes},
    )
    x = v.nh.get(other) or _ref(other, other_bw)
    out = answer_introduction(v, x)
    sent = [o.message.ref.id for o in out]
    assert all(o.dst == x.id for o in out)
    assert len(sent) == len(set(sent))
    assert x.id not in sent
    assert set(sent) <= set(v.nh)
    for i in range(min(local_level(v), common_prefix(v.rs, x.rs)) + 1):
        for closest in (local_closest_pred(v, i), local_closest_succ(v, i)):
            if closest is not None and closest.id != x.id:
                assert closest.id in sent
