"""Scenario generation and measurement campaigns.

Every run is a pure function of its :class:`ScenarioConfig` and run seed: the
world, the bandwidths, the tree it starts from and every random choice of a
scenario come from the world's own generator.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, TextIO

import numpy as np

from hskip import protocol
from hskip.core import DEFAULT_CAP, BitStream, NodeId
from hskip.errors import BadDistribution, BadFraction, LevelOverflow, NoRoute, QueueOverflow
from hskip.oracle import longest_prefix_match
from hskip.simnet import DEFAULT_FAIRNESS_FACTOR, DEFAULT_MAX_QUEUED, MetricsSink, World

logger = logging.getLogger("hskip.experiments")

SCENARIOS = (
    "converge",
    "join",
    "leave",
    "change",
    "crash",
    "attack",
    "flow",
    "random_target_flow",
)
CRASH_MODES = ("random", "contiguous")
SCHEDULERS = ("sync", "async")


@dataclass(frozen=True)
class BandwidthDist:
    """``pareto(alpha, scale)``, ``uniform(lo, hi)`` or ``empirical(path)``."""

    kind: str = "pareto"
    params: tuple[float, ...] = (1.5, 1.0)
    path: str | None = None
    values: tuple[float, ...] = field(default=(), repr=False, compare=False)

    @classmethod
    def parse(cls, spec: str | Mapping[str, Any] | BandwidthDist | None) -> BandwidthDist:
        if spec is None:
            return cls()
        if isinstance(spec, BandwidthDist):
            return spec
        if isinstance(spec, Mapping):
            kind = str(spec.get("kind", "")).lower()
            if kind == "pareto":
                return cls._make(kind, (spec.get("alpha", 1.5), spec.get("scale", 1.0)))
            if kind == "uniform":
                return cls._make(kind, (spec.get("lo"), spec.get("hi")))
            if kind == "empirical":
                return cls._empirical(spec.get("path"))
            raise BadDistribution(f"unknown bandwidth distribution {spec!r}")
        kind, _, rest = str(spec).partition(":")
        kind = kind.strip().lower()
        if kind == "empirical":
            return cls._empirical(rest.strip())
        if kind == "pareto" and not rest.strip():
            return cls()
        if kind in ("pareto", "uniform"):
            return cls._make(kind, tuple(p for p in rest.split(",") if p.strip()))
        raise BadDistribution(f"unknown bandwidth distribution {spec!r}")

    @classmethod
    def _make(cls, kind: str, raw: tuple) -> BandwidthDist:
        try:
            params = tuple(float(p) for p in raw)
        except (TypeError, ValueError):
            raise BadDistribution(f"{kind} parameters must be numbers, got {raw!r}") from None
        if len(params) != 2 or not all(math.isfinite(p) and p > 0 for p in params):
            raise BadDistribution(f"{kind} needs two positive parameters, got {raw!r}")
        if kind == "uniform" and params[0] > params[1]:
            raise BadDistribution(f"uniform needs lo <= hi, got {params}")
        return cls(kind, params)

    @classmethod
    def _empirical(cls, path: str | None) -> BandwidthDist:
        if not path:
            raise BadDistribution("empirical distribution needs a file path")
        try:
            lines = Path(path).read_text(encoding="utf-8").split()
            values = tuple(float(x) for x in lines)
        except (OSError, ValueError) as e:
            raise BadDistribution(f"cannot read bandwidths from {path}: {e}") from e
        if not values or not all(math.isfinite(v) and v > 0 for v in values):
            raise BadDistribution(f"{path} must hold positive bandwidths, one per line")
        return cls("empirical", (), str(path), values)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "pareto":
            alpha, scale = self.params
            return scale * (1.0 + rng.pareto(alpha, size))
        if self.kind == "uniform":
            lo, hi = self.params
            return rng.uniform(lo, hi, size)
        if self.kind == "empirical":
            return rng.choice(np.asarray(self.values), size)
        raise BadDistribution(f"unknown bandwidth distribution {self.kind!r}")

    def describe(self) -> str:
        if self.kind == "empirical":
            return f"empirical:{self.path}"
        return f"{self.kind}:" + ",".join(f"{p:g}" for p in self.params)


def derive_seed(base: int, *salt: int) -> int:
    """Independent 64-bit seed for a (base, salt...) tuple."""
    state = np.random.SeedSequence([base, *salt]).generate_state(1, dtype=np.uint64)
    return int(state[0])


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    n: int
    seed: int = 0
    dist: BandwidthDist = field(default_factory=BandwidthDist)
    max_rounds: int | None = None
    repeats: int = 1
    fraction: float = 0.0
    mode: str = "random"
    scheduler: str = "sync"
    check_invariants: bool = False
    churn_lookups: int = 0
    cap: int = DEFAULT_CAP
    max_queued: int = DEFAULT_MAX_QUEUED
    fairness_factor: int = DEFAULT_FAIRNESS_FACTOR

    def __post_init__(self) -> None:
        if self.scenario == "attack":
            object.__setattr__(self, "mode", "contiguous")

    def validate(self) -> ScenarioConfig:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n < 2:
            raise ValueError(f"n must be at least 2, got {self.n}")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise ValueError(f"max_rounds must be at least 1, got {self.max_rounds}")
        if self.repeats < 1:
            raise ValueError(f"repeats must be at least 1, got {self.repeats}")
        if not 0 <= self.fraction < 1:
            raise BadFraction(f"fraction must lie in [0, 1), got {self.fraction}")
        if self.mode not in CRASH_MODES:
            raise ValueError(f"unknown crash mode {self.mode!r}")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        return self

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], **defaults: Any) -> ScenarioConfig:
        merged = {**defaults, **data}
        known = set(cls.__dataclass_fields__)
        unknown = set(merged) - known - {"bandwidth_dist"}
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        dist = merged.pop("bandwidth_dist", None)
        merged["dist"] = BandwidthDist.parse(merged.get("dist", dist))
        return cls(**merged).validate()

    @property
    def label(self) -> str:
        if self.scenario == "crash" and self.mode == "contiguous":
            return "attack"
        return self.scenario

    @property
    def rounds_cap(self) -> int:
        if self.max_rounds is not None:
            return self.max_rounds
        return math.ceil(50 * math.log2(self.n))

    def runs(self) -> list[int]:
        """One seed per repeat; a single run keeps the configured seed."""
        if self.repeats == 1:
            return [self.seed]
        return [derive_seed(self.seed, rep) for rep in range(self.repeats)]


@dataclass
class RunRecord:
    run_id: str
    seed: int
    n: int
    scenario: str
    rounds_to_legal: int
    total_messages: int
    additional_messages: int | None = None
    max_degree: int = 0
    dilation: int | None = None
    avg_normalized_congestion: float | None = None
    surviving_fraction: float | None = None
    legal: bool = False
    # reported in the run summary only
    structural_changes: int = 0
    periodic_messages: int = 0
    reactive_messages: int = 0
    max_congestion: float | None = None
    delivered_ratio: float | None = None
    attack_offset: int | None = None
    isolation_events: int = 0
    violations: tuple[str, ...] = ()

    @property
    def sort_key(self) -> tuple[str, int, int]:
        return (self.scenario, self.n, self.seed)


def make_run_id(label: str, n: int, seed: int) -> str:
    return f"{label}-n{n}-{seed:016x}"


# ---------------------------------------------------------------------- worlds


def gen_initial_world(
    n: int,
    seed: int,
    dist: BandwidthDist | None = None,
    cap: int = DEFAULT_CAP,
    **world_options: Any,
) -> World:
    """``n`` fresh nodes whose explicit edges form a uniformly random recursive tree."""
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    dist = BandwidthDist.parse(dist)
    world = World(seed=seed, cap=cap, **world_options)
    ids = [world.fresh_id() for _ in range(n)]
    for node_id, bw in zip(ids, dist.sample(world.rng, n)):
        world.add_node(node_id, float(bw))
    for i in range(1, n):
        world.link(ids[i], ids[int(world.rng.integers(i))])
    world.metrics = MetricsSink()
    return world


@dataclass(frozen=True)
class Convergence:
    rounds: int
    messages: int
    periodic: int
    reactive: int
    structural_changes: int
    legal: bool


def _delta(world: World, start: Mapping[str, int], rounds: int, legal: bool) -> Convergence:
    now = world.metrics.totals()
    return Convergence(
        rounds=rounds,
        messages=now["messages"] - start["messages"],
        periodic=now["periodic"] - start["periodic"],
        reactive=now["reactive"] - start["reactive"],
        structural_changes=now["edge_adds"]
        + now["edge_removes"]
        - start["edge_adds"]
        - start["edge_removes"],
        legal=legal,
    )


def _each_component_legal(world: World) -> bool:
    return all(world.legality(c).legal for c in world.components())


def run_until_legal(world: World, max_rounds: int, per_component: bool = False) -> Convergence:
    """Synchronous rounds until the oracle accepts the world (or ``max_rounds``).

    With ``per_component`` the run stops once every weakly connected component
    is legal on its own node set; such components can no longer merge.
    """
    check = _each_component_legal if per_component else World.is_legal
    start = world.metrics.totals()
    if check(world):
        return _delta(world, start, 0, True)
    for r in range(1, max_rounds + 1):
        stats = world.step_round()
        stats.legal = check(world)
        if stats.legal:
            return _delta(world, start, r, True)
    return _delta(world, start, max_rounds, False)


def run_until_legal_async(world: World, max_rounds: int) -> Convergence:
    """Asynchronous variant; one round is ``fairness_factor * len(live)`` scheduler steps."""
    start = world.metrics.totals()
    if world.is_legal():
        return _delta(world, start, 0, True)
    per_round = world.fairness_factor * max(len(world.live), 1)
    for r in range(1, max_rounds + 1):
        for _ in range(per_round):
            world.step_async()
        stats = world.metrics.close_round(r)
        stats.legal = world.is_legal()
        if stats.legal:
            return _delta(world, start, r, True)
    return _delta(world, start, max_rounds, False)


def _pick(world: World, ids: list[NodeId]) -> NodeId:
    return ids[int(world.rng.integers(len(ids)))]


def _event_record(
    world: World,
    label: str,
    n: int,
    start: Mapping[str, int],
    baseline: World,
    conv: Convergence,
) -> RunRecord:
    for _ in range(conv.rounds):
        baseline.step_round()
    base = baseline.metrics.totals()["messages"] - start["messages"]
    return RunRecord(
        run_id=make_run_id(label, n, world.seed),
        seed=world.seed,
        n=n,
        scenario=label,
        rounds_to_legal=conv.rounds,
        total_messages=conv.messages,
        additional_messages=conv.messages - base,
        max_degree=world.max_degree(),
        legal=conv.legal,
        structural_changes=conv.structural_changes,
        periodic_messages=conv.periodic,
        reactive_messages=conv.reactive,
        isolation_events=world.metrics.isolation_events,
    )


def scenario_join(world: World, max_rounds: int, dist: BandwidthDist | None = None) -> RunRecord:
    """A fresh node joins through a random contact."""
    dist = BandwidthDist.parse(dist)
    n = len(world.live)
    baseline = world.clone()
    start = world.metrics.totals()
    contact = _pick(world, sorted(world.live))
    world.join(world.fresh_id(), float(dist.sample(world.rng, 1)[0]), contact)
    conv = run_until_legal(world, max_rounds)
    return _event_record(world, "join", n, start, baseline, conv)


def scenario_leave(world: World, max_rounds: int) -> RunRecord:
    """A random node leaves gracefully."""
    n = len(world.live)
    baseline = world.clone()
    start = world.metrics.totals()
    world.leave(_pick(world, sorted(world.live)))
    conv = run_until_legal(world, max_rounds)
    return _event_record(world, "leave", n, start, baseline, conv)


def scenario_change(world: World, max_rounds: int, dist: BandwidthDist | None = None) -> RunRecord:
    """A random node's bandwidth is resampled."""
    dist = BandwidthDist.parse(dist)
    n = len(world.live)
    baseline = world.clone()
    start = world.metrics.totals()
    victim = _pick(world, sorted(world.live))
    world.change_bandwidth(victim, float(dist.sample(world.rng, 1)[0]))
    conv = run_until_legal(world, max_rounds)
    return _event_record(world, "change", n, start, baseline, conv)


def scenario_crash(
    world: World,
    fraction: float,
    mode: str = "random",
    max_rounds: int = 64,
    dist: BandwidthDist | None = None,
    lookups: int = 0,
) -> RunRecord:
    """Crash ``ceil(fraction * n)`` nodes and join as many fresh ones in the same round."""
    if not 0 <= fraction < 1:
        raise BadFraction(f"fraction must lie in [0, 1), got {fraction}")
    if mode not in CRASH_MODES:
        raise ValueError(f"unknown crash mode {mode!r}")
    dist = BandwidthDist.parse(dist)
    n = len(world.live)
    k = min(math.ceil(fraction * n), n - 1)
    by_bandwidth = sorted(world.live, key=lambda v: world.live[v].bw)
    offset = None
    if mode == "random":
        picked = world.rng.choice(n, size=k, replace=False)
        victims = [by_bandwidth[int(i)] for i in sorted(picked)]
    else:
        offset = int(world.rng.integers(n - k + 1))
        victims = by_bandwidth[offset : offset + k]
    world.crash(victims)
    survivors = sorted(world.live)
    for bw in dist.sample(world.rng, k):
        world.join(world.fresh_id(), float(bw), _pick(world, survivors))

    injected = []
    if lookups and len(survivors) > 1:
        total_bw = sum(world.live[v].bw.bw for v in survivors)
        for _ in range(lookups):
            pair = world.rng.choice(len(survivors), 2, replace=False)
            src, dst = (survivors[int(i)] for i in pair)
            volume = world.live[src].bw.bw * world.live[dst].bw.bw / total_bw
            injected.append(world.inject_lookup(src, dst, volume))

    conv = run_until_legal(world, max_rounds, per_component=True)
    comps = world.components()
    largest = max((len(c) for c in comps if world.legality(c).legal), default=0)
    label = "attack" if mode == "contiguous" else "crash"
    record = RunRecord(
        run_id=make_run_id(label, n, world.seed),
        seed=world.seed,
        n=n,
        scenario=label,
        rounds_to_legal=conv.rounds,
        total_messages=conv.messages,
        max_degree=world.max_degree(),
        surviving_fraction=largest / len(world.live),
        legal=conv.legal and world.is_legal(),
        structural_changes=conv.structural_changes,
        periodic_messages=conv.periodic,
        reactive_messages=conv.reactive,
        attack_offset=offset,
        isolation_events=world.metrics.isolation_events,
    )
    if injected:
        records = [world.metrics.lookups[i] for i in injected]
        delivered = [r for r in records if r.delivered]
        record.dilation = max((r.hops for r in delivered), default=None)
        record.delivered_ratio = len(delivered) / len(records)
    if len(comps) > 1:
        logger.warning(
            "%s split into %d components (largest %d)", record.run_id, len(comps), largest
        )
    return record


# ---------------------------------------------------------------------- routing


class RouteTable:
    """Memoised :func:`hskip.protocol.lookup_next_hop` over a static world."""

    def __init__(self, world: World):
        self.world = world
        self._hops: dict[tuple[NodeId, NodeId], NodeId | None] = {}

    def next_hop(self, v: NodeId, target: NodeId) -> NodeId | None:
        key = (v, target)
        if key not in self._hops:
            hop = protocol.lookup_next_hop(self.world.live[v], self.world.live[target].ref)
            self._hops[key] = None if hop is None else hop.id
        return self._hops[key]

    def route(self, src: NodeId, dst: NodeId) -> list[NodeId]:
        trace = [src]
        while trace[-1] != dst:
            hop = self.next_hop(trace[-1], dst)
            if hop is None or hop not in self.world.live:
                raise NoRoute(f"no route from {src} to {dst} (stuck at {trace[-1]})")
            trace.append(hop)
            if len(trace) > self.world.cap + 1:
                raise NoRoute(f"route from {src} to {dst} exceeded {self.world.cap} hops")
        return trace


def trace_violations(world: World, trace: list[NodeId]) -> list[str]:
    """Bandwidth audit of one route: no node below min(src, dst), rising then falling."""
    keys = [world.live[v].bw for v in trace]
    out = []
    floor = min(keys[0], keys[-1])
    if any(k < floor for k in keys):
        out.append(f"ROUTE {trace[0]}->{trace[-1]} visits a node below min(src, dst)")
    peak = keys.index(max(keys))
    rising = all(a < b for a, b in zip(keys[: peak + 1], keys[1 : peak + 1]))
    falling = all(a > b for a, b in zip(keys[peak:], keys[peak + 1 :]))
    if not (rising and falling):
        out.append(f"ROUTE {trace[0]}->{trace[-1]} is not rising-then-falling in bandwidth")
    return out


@dataclass
class FlowResult:
    traffic: dict[NodeId, float]
    congestion: dict[NodeId, float]
    dilation: int
    volume_hops: float
    violations: list[str] = field(default_factory=list)

    @property
    def avg_normalized_congestion(self) -> float:
        return float(np.mean(list(self.congestion.values()))) if self.congestion else 0.0

    @property
    def max_congestion(self) -> float:
        return max(self.congestion.values(), default=0.0)


def _finish_flow(
    world: World,
    raw: Mapping[NodeId, float],
    dilation: int,
    volume_hops: float,
    violations: list[str],
) -> FlowResult:
    traffic = {v: raw.get(v, 0.0) for v in sorted(world.live)}
    congestion = {v: traffic[v] / world.live[v].bw.bw for v in traffic}
    total = sum(traffic.values())
    if not math.isclose(total, volume_hops, rel_tol=1e-9, abs_tol=1e-9):
        violations.append(f"VOLUME traffic {total:.9g} != volume x hops {volume_hops:.9g}")
    return FlowResult(traffic, congestion, dilation, volume_hops, violations)


def flow_problem(world: World, audit: bool = True) -> FlowResult:
    """Every ordered pair (u, v) routes volume ``bw(u) * bw(v) / sum(bw)``."""
    table = RouteTable(world)
    ids = sorted(world.live)
    bw = {v: world.live[v].bw.bw for v in ids}
    total_bw = sum(bw.values())
    traffic: dict[NodeId, float] = defaultdict(float)
    dilation = 0
    volume_hops = 0.0
    violations: list[str] = []
    for u in ids:
        for v in ids:
            if u == v:
                continue
            volume = bw[u] * bw[v] / total_bw
            trace = table.route(u, v)
            for hop in trace[:-1]:
                traffic[hop] += volume
            dilation = max(dilation, len(trace) - 1)
            volume_hops += volume * (len(trace) - 1)
            if audit:
                violations += trace_violations(world, trace)
    return _finish_flow(world, traffic, dilation, volume_hops, violations)


def random_target_flow(world: World, seed: int) -> FlowResult:
    """Each node routes ``min(bw(u), bw(w))`` to the best prefix match of a random string."""
    rng = np.random.default_rng(seed)
    table = RouteTable(world)
    view = world.view()
    traffic: dict[NodeId, float] = defaultdict(float)
    dilation = 0
    volume_hops = 0.0
    violations: list[str] = []
    for u in sorted(world.live):
        x = BitStream(int(rng.integers(0, 2**64, dtype=np.uint64)), world.cap)
        w = longest_prefix_match(view, x)
        volume = min(world.live[u].bw.bw, world.live[w].bw.bw)
        trace = table.route(u, w)
        for hop in trace[:-1]:
            traffic[hop] += volume
        dilation = max(dilation, len(trace) - 1)
        volume_hops += volume * (len(trace) - 1)
        violations += trace_violations(world, trace)
    return _finish_flow(world, traffic, dilation, volume_hops, violations)


# ---------------------------------------------------------------------- dispatch


def iter_runs(configs: list[ScenarioConfig]) -> Iterator[tuple[ScenarioConfig, int]]:
    for cfg in configs:
        for seed in cfg.runs():
            yield cfg, seed


def run_scenario(
    cfg: ScenarioConfig, seed: int | None = None, trace: TextIO | None = None
) -> RunRecord:
    seed = cfg.seed if seed is None else seed
    run_id = make_run_id(cfg.label, cfg.n, seed)
    logger.info("run %s start", run_id)
    world = gen_initial_world(
        cfg.n,
        seed,
        cfg.dist,
        cap=cfg.cap,
        max_queued=cfg.max_queued,
        fairness_factor=cfg.fairness_factor,
        check_invariants=cfg.check_invariants,
        trace=trace,
    )
    try:
        record = _dispatch(cfg, world)
    except (QueueOverflow, NoRoute, LevelOverflow) as e:
        logger.error("run %s failed: %s", run_id, e)
        record = RunRecord(run_id, seed, cfg.n, cfg.label, cfg.rounds_cap, 0, legal=False)
        record.violations = (f"ABORT {e}",)
    record.violations = tuple(record.violations) + tuple(world.metrics.violations)
    level = logging.INFO if record.legal and not record.violations else logging.WARNING
    logger.log(
        level,
        "run %s: legal=%s rounds=%d messages=%d",
        run_id,
        record.legal,
        record.rounds_to_legal,
        record.total_messages,
    )
    return record


def _dispatch(cfg: ScenarioConfig, world: World) -> RunRecord:
    n, label = cfg.n, cfg.label
    if cfg.scheduler == "async":
        conv = run_until_legal_async(world, cfg.rounds_cap)
    else:
        conv = run_until_legal(world, cfg.rounds_cap)
    converged = RunRecord(
        run_id=make_run_id(label, n, world.seed),
        seed=world.seed,
        n=n,
        scenario=label,
        rounds_to_legal=conv.rounds,
        total_messages=conv.messages,
        max_degree=world.max_degree(),
        legal=conv.legal,
        structural_changes=conv.structural_changes,
        periodic_messages=conv.periodic,
        reactive_messages=conv.reactive,
    )
    if cfg.scenario == "converge" or not conv.legal:
        return converged
    if cfg.scenario == "join":
        return scenario_join(world, cfg.rounds_cap, cfg.dist)
    if cfg.scenario == "leave":
        return scenario_leave(world, cfg.rounds_cap)
    if cfg.scenario == "change":
        return scenario_change(world, cfg.rounds_cap, cfg.dist)
    if cfg.scenario in ("crash", "attack"):
        return scenario_crash(
            world, cfg.fraction, cfg.mode, cfg.rounds_cap, cfg.dist, cfg.churn_lookups
        )
    if cfg.scenario == "flow":
        flow = flow_problem(world)
    else:
        flow = random_target_flow(world, derive_seed(world.seed, 1))
    return replace(
        converged,
        dilation=flow.dilation,
        avg_normalized_congestion=flow.avg_normalized_congestion,
        max_congestion=flow.max_congestion,
        violations=tuple(flow.violations),
    )
