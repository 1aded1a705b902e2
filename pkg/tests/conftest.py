import pytest

from hskip.core import BandwidthKey, BitStream, seed_for
from hskip.oracle import GlobalView, ViewNode
from hskip.protocol import NodeRef, NodeState
from hskip.simnet import World

CAP = 16

# label -> (id, bandwidth, leading bits)
F4 = {
    "A": (1, 40.0, "00"),
    "B": (2, 30.0, "01"),
    "C": (3, 20.0, "10"),
    "D": (4, 10.0, "11"),
}
F4_TARGET = {
    ("A", "B"),
    ("A", "C"),
    ("B", "A"),
    ("B", "C"),
    ("C", "B"),
    ("C", "D"),
    ("D", "B"),
    ("D", "C"),
}


def f4_stream(label: str) -> BitStream:
    node_id, _, bits = F4[label]
    return BitStream.with_prefix(bits, seed_for(node_id), CAP)


def f4_id(label: str) -> int:
    return F4[label][0]


@pytest.fixture
def f4_view() -> GlobalView:
    return GlobalView(
        ViewNode(i, f4_stream(label), BandwidthKey(bw, i)) for label, (i, bw, _) in F4.items()
    )


@pytest.fixture
def f4_ref():
    def make(label: str, bw: float | None = None, epoch: int = 0) -> NodeRef:
        node_id, true_bw, _ = F4[label]
        return NodeRef(node_id, f4_stream(label), BandwidthKey(bw or true_bw, node_id), epoch)

    return make


@pytest.fixture
def f4_state(f4_ref):
    def make(label: str, nh: str = "") -> NodeState:
        node_id, bw, _ = F4[label]
        refs = {f4_id(w): f4_ref(w) for w in nh}
        return NodeState(node_id, f4_stream(label), BandwidthKey(bw, node_id), refs)

    return make


@pytest.fixture
def f4_world():
    def make(edges=(), **options) -> World:
        world = World(seed=options.pop("seed", 0), cap=CAP, **options)
        for label, (node_id, bw, _) in F4.items():
            world.add_node(node_id, bw, f4_stream(label))
        for v, w in sorted(edges):
            world.link(f4_id(v), f4_id(w))
        return world

    return make
