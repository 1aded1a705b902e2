"""Identifiers, pseudo-random bit streams and the bandwidth order.

Bit streams are expanded from a 64-bit seed with the SplitMix64 finalizer:
word ``k`` of the stream is ``mix64(seed + (k + 1) * GOLDEN)`` and the words
are concatenated most-significant-bit first, so ``bit(j)`` is bit ``63 - j % 64``
of word ``j // 64``. Streams are truncated to ``cap`` bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from hskip.errors import InvalidBandwidth, LevelOverflow

NodeId = int

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
DEFAULT_CAP = 256


def mix64(x: int) -> int:
    """SplitMix64 output function."""
    z = x & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def seed_for(node_id: NodeId) -> int:
    return mix64((node_id & MASK64) + GOLDEN)


def _expand(seed: int, cap: int) -> int:
    words = (cap + 63) // 64
    value = 0
    for k in range(words):
        value = (value << 64) | mix64(seed + (k + 1) * GOLDEN)
    return value >> (words * 64 - cap)


@dataclass(frozen=True)
class BitStream:
    """Immutable pseudo-random bit string of length ``cap``.

    ``pinned`` optionally fixes the leading bits (e.g. ``"01"``); the rest of
    the stream still comes from ``seed``. Fixtures use it to build topologies
    by hand.
    """

    seed: int
    cap: int = DEFAULT_CAP
    pinned: str = ""
    value: int = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.cap < 1:
            raise ValueError(f"cap must be positive, got {self.cap}")
        if len(self.pinned) > self.cap or set(self.pinned) - {"0", "1"}:
            raise ValueError(f"invalid pinned prefix {self.pinned!r}")
        value = _expand(self.seed & MASK64, self.cap)
        if self.pinned:
            rest = self.cap - len(self.pinned)
            value = (int(self.pinned, 2) << rest) | (value & ((1 << rest) - 1))
        object.__setattr__(self, "value", value)

    @classmethod
    def for_node(cls, node_id: NodeId, cap: int = DEFAULT_CAP) -> BitStream:
        return cls(seed_for(node_id), cap)

    @classmethod
    def with_prefix(cls, bits: str, seed: int = 0, cap: int = DEFAULT_CAP) -> BitStream:
        return cls(seed, cap, bits)

    def bit(self, j: int) -> int:
        if not 0 <= j < self.cap:
            raise LevelOverflow(f"bit index {j} outside [0, {self.cap})")
        return (self.value >> (self.cap - 1 - j)) & 1

    def prefix(self, i: int) -> tuple[int, ...]:
        if not 0 <= i <= self.cap:
            raise LevelOverflow(f"prefix length {i} outside [0, {self.cap}]")
        return tuple(self.bit(j) for j in range(i))

    def prefix_int(self, i: int) -> int:
        """The first ``i`` bits packed into an int (grouping key for components)."""
        if not 0 <= i <= self.cap:
            raise LevelOverflow(f"prefix length {i} outside [0, {self.cap}]")
        return self.value >> (self.cap - i)

    def bits(self, i: int) -> str:
        return "".join(str(b) for b in self.prefix(i))


@dataclass(frozen=True, order=True)
class BandwidthKey:
    """Bandwidth with the node id as tie-breaker: a strict total order."""

    bw: float
    id: NodeId

    def __post_init__(self) -> None:
        # NaN fails this comparison too
        if not self.bw > 0:
            raise InvalidBandwidth(f"bandwidth must be positive, got {self.bw!r}")


def bit(stream: BitStream, j: int) -> int:
    return stream.bit(j)


def prefix(stream: BitStream, i: int) -> tuple[int, ...]:
    return stream.prefix(i)


def common_prefix(a: BitStream, b: BitStream) -> int:
    """Length of the longest common prefix, i.e. the first index where the streams differ."""
    if a.cap != b.cap:
        raise ValueError(f"streams have different caps ({a.cap} != {b.cap})")
    diff = a.value ^ b.value
    if diff == 0:
        raise LevelOverflow(f"streams agree on all {a.cap} bits (seeds {a.seed:#x}, {b.seed:#x})")
    return a.cap - diff.bit_length()
