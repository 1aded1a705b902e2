import math
from pathlib import Path

import numpy as np
import pytest
from conftest import F4_TARGET, f4_id

from hskip.errors import BadDistribution, BadFraction
from hskip.experiments import (
    BandwidthDist,
    RouteTable,
    ScenarioConfig,
    derive_seed,
    flow_problem,
    gen_initial_world,
    make_run_id,
    random_target_flow,
    run_scenario,
    run_until_legal,
    run_until_legal_async,
    scenario_change,
    scenario_crash,
    scenario_join,
    scenario_leave,
    trace_violations,
)
from hskip.protocol import lookup_next_hop

A, B, C, D = (f4_id(x) for x in "ABCD")
CAP = 64


def _legal_world(n: int = 16, seed: int = 1, **options):
    world = gen_initial_world(n, seed, cap=CAP, **options)
    conv = run_until_legal(world, 400)
    assert conv.legal
    return world


# ---------------------------------------------------------------- distributions


def test_distribution_shorthands():
    assert BandwidthDist.parse(None) == BandwidthDist("pareto", (1.5, 1.0))
    assert BandwidthDist.parse("pareto") == BandwidthDist()
    assert BandwidthDist.parse("pareto:2,3").params == (2.0, 3.0)
    uniform = BandwidthDist.parse({"kind": "uniform", "lo": 1, "hi": 4})
    assert uniform.params == (1.0, 4.0)
    assert uniform.describe() == "uniform:1,4"


@pytest.mark.parametrize(
    "spec",
    ["weibull:1,2", "uniform:3,1", "uniform:1", "pareto:-1,1", "pareto:a,b", {"kind": "zipf"}],
)
def test_bad_distributions(spec):
    with pytest.raises(BadDistribution):
        BandwidthDist.parse(spec)


def test_empirical_distribution(tmp_path: Path):
    path = tmp_path / "bw.txt"
    path.write_text("1.5\n2.5\n10\n")
    dist = BandwidthDist.parse(f"empirical:{path}")
    sample = dist.sample(np.random.default_rng(0), 50)
    assert set(sample.tolist()) <= {1.5, 2.5, 10.0}
    assert dist.describe() == f"empirical:{path}"

    (tmp_path / "bad.txt").write_text("1.0\n0\n")
    with pytest.raises(BadDistribution):
        BandwidthDist.parse(f"empirical:{tmp_path / 'bad.txt'}")
    with pytest.raises(BadDistribution):
        BandwidthDist.parse(f"empirical:{tmp_path / 'missing.txt'}")


def test_samples_respect_the_support():
    rng = np.random.default_rng(4)
    assert (BandwidthDist.parse("pareto:1.5,2").sample(rng, 500) >= 2.0).all()
    uniform = BandwidthDist.parse("uniform:3,5").sample(rng, 500)
    assert ((uniform >= 3.0) & (uniform <= 5.0)).all()


def test_derive_seed():
    assert derive_seed(7, 1) == derive_seed(7, 1)
    assert derive_seed(7, 1) != derive_seed(7, 2)
    assert 0 <= derive_seed(7) < 2**64


# ---------------------------------------------------------------- configuration


def test_scenario_config_defaults_and_labels():
    cfg = ScenarioConfig("converge", 16).validate()
    assert cfg.rounds_cap == 200
    assert cfg.runs() == [0]
    attack = ScenarioConfig("attack", 16, fraction=0.25)
    assert attack.mode == "contiguous"
    assert attack.label == "attack"
    assert ScenarioConfig("crash", 16, mode="contiguous").label == "attack"
    seeds = ScenarioConfig("join", 16, seed=5, repeats=3).runs()
    assert len(set(seeds)) == 3


@pytest.mark.parametrize(
    "kwargs",
    [
        {"scenario": "teleport", "n": 16},
        {"scenario": "converge", "n": 1},
        {"scenario": "converge", "n": 16, "repeats": 0},
        {"scenario": "converge", "n": 16, "max_rounds": 0},
        {"scenario": "crash", "n": 16, "mode": "sideways"},
        {"scenario": "converge", "n": 16, "scheduler": "lockstep"},
    ],
)
def test_invalid_scenario_configs(kwargs):
    with pytest.raises(ValueError):
        ScenarioConfig(**kwargs).validate()


def test_fraction_must_be_below_one():
    with pytest.raises(BadFraction):
        ScenarioConfig("crash", 16, fraction=1.0).validate()


def test_from_mapping():
    cfg = ScenarioConfig.from_mapping(
        {"scenario": "join", "n": 32, "bandwidth_dist": "uniform:1,2"}, seed=9
    )
    assert cfg.seed == 9
    assert cfg.dist.kind == "uniform"
    with pytest.raises(ValueError):
        ScenarioConfig.from_mapping({"scenario": "join", "n": 32, "colour": "red"})


def test_run_ids():
    assert make_run_id("join", 64, 255) == "join-n64-00000000000000ff"


# ---------------------------------------------------------------- convergence


def test_initial_world_is_a_tree():
    world = gen_initial_world(20, 3, cap=CAP)
    assert len(world.live) == 20
    assert len(world.explicit_edges()) == 19
    assert world.connectivity_check()
    assert world.metrics.totals()["messages"] == 0
    again = gen_initial_world(20, 3, cap=CAP)
    assert again.explicit_edges() == world.explicit_edges()


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_random_trees_converge_without_violations(seed):
    world = gen_initial_world(16, seed, cap=CAP, check_invariants=True)
    conv = run_until_legal(world, 400)
    assert conv.legal
    assert conv.rounds > 0
    assert conv.messages == conv.periodic + conv.reactive
    assert world.metrics.violations == []


def test_async_scheduler_converges():
    world = gen_initial_world(8, 4, cap=CAP, check_invariants=True)
    conv = run_until_legal_async(world, 400)
    assert conv.legal
    assert world.metrics.violations == []


def test_already_legal_world_takes_zero_rounds(f4_world):
    conv = run_until_legal(f4_world(F4_TARGET), 10)
    assert conv.legal and conv.rounds == 0 and conv.messages == 0


# ---------------------------------------------------------------- churn scenarios


def test_join_scenario():
    world = _legal_world()
    record = scenario_join(world, 400)
    assert record.legal
    assert record.scenario == "join"
    assert len(world.live) == 17
    assert record.additional_messages is not None


def test_leave_scenario():
    world = _legal_world()
    record = scenario_leave(world, 400)
    assert record.legal
    assert len(world.live) == 15


def test_change_scenario():
    world = _legal_world(seed=2)
    record = scenario_change(world, 400)
    assert record.legal
    assert world.is_legal()


def test_crash_scenario_replaces_the_victims():
    world = _legal_world(seed=3)
    record = scenario_crash(world, 0.25, "random", 400, lookups=5)
    assert len(world.live) == 16
    assert len(world.departed) == 4
    assert 0 < record.surviving_fraction <= 1
    assert record.attack_offset is None
    assert record.delivered_ratio is not None


def test_attack_records_its_offset():
    world = _legal_world(seed=4)
    record = scenario_crash(world, 0.25, "contiguous", 400)
    assert record.scenario == "attack"
    assert 0 <= record.attack_offset <= 12


def test_crash_rejects_bad_arguments(f4_world):
    with pytest.raises(BadFraction):
        scenario_crash(f4_world(F4_TARGET), 1.5)
    with pytest.raises(ValueError):
        scenario_crash(f4_world(F4_TARGET), 0.5, mode="sideways")


# ---------------------------------------------------------------- routing and flows


def test_routes_on_the_f4_fixpoint(f4_world):
    table = RouteTable(f4_world(F4_TARGET))
    assert table.route(D, A) == [D, B, A]
    assert table.route(A, D) == [A, C, D]
    assert table.route(B, D) == [B, C, D]
    assert table.route(C, A) == [C, B, A]
    assert table.route(A, B) == [A, B]


def test_trace_audit(f4_world):
    world = f4_world(F4_TARGET)
    assert trace_violations(world, [D, B, A]) == []
    assert len(trace_violations(world, [B, D, A])) == 2


def test_flow_problem_on_f4(f4_world):
    flow = flow_problem(f4_world(F4_TARGET))
    assert flow.traffic == pytest.approx({A: 24.0, B: 33.0, C: 23.0, D: 9.0})
    assert flow.congestion == pytest.approx({A: 0.6, B: 1.1, C: 1.15, D: 0.9})
    assert flow.avg_normalized_congestion == pytest.approx(0.9375)
    assert flow.max_congestion == pytest.approx(1.15)
    assert flow.dilation == 2
    assert flow.volume_hops == pytest.approx(89.0)
    assert flow.violations == []


def test_random_target_flow_on_f4(f4_world):
    flow = random_target_flow(f4_world(F4_TARGET), seed=8)
    assert flow.dilation <= 2
    assert sum(flow.traffic.values()) == pytest.approx(flow.volume_hops)
    assert flow.violations == []


# ---------------------------------------------------------------- full runs


def test_run_scenario_is_deterministic():
    cfg = ScenarioConfig("converge", 16, seed=3, cap=CAP).validate()
    first, second = run_scenario(cfg), run_scenario(cfg)
    assert first == second
    assert first.legal
    assert first.run_id == make_run_id("converge", 16, 3)


def test_flow_run_reports_congestion():
    record = run_scenario(ScenarioConfig("flow", 16, seed=5, cap=CAP).validate())
    assert record.legal
    assert record.violations == ()
    assert record.dilation is not None and record.dilation >= 1
    assert record.avg_normalized_congestion > 0


def test_queue_ceiling_aborts_the_run():
    record = run_scenario(ScenarioConfig("converge", 16, seed=1, cap=CAP, max_queued=2))
    assert not record.legal
    assert record.violations[0].startswith("ABORT")


def test_colliding_streams_abort_the_run():
    record = run_scenario(ScenarioConfig("converge", 64, seed=1, cap=4).validate())
    assert not record.legal
    assert record.violations[0].startswith("ABORT")
    assert record.rounds_to_legal == ScenarioConfig("converge", 64).rounds_cap


# ---------------------------------------------------------------- seed sweeps

SWEEP = (
    [(16, seed) for seed in range(30)]
    + [(32, seed) for seed in range(20)]
    + [pytest.param(64, seed, marks=pytest.mark.slow) for seed in range(20)]
)


@pytest.mark.parametrize("n,seed", SWEEP)
def test_random_trees_reach_the_target_and_stay_there(n, seed):
    world = gen_initial_world(n, seed, check_invariants=True)
    conv = run_until_legal(world, ScenarioConfig("converge", n).rounds_cap)
    assert conv.legal, world.legality().lines()[:5]
    assert world.explicit_edges() == world.target().edges()
    for _ in range(50):
        stats = world.step_round()
        assert (stats.edge_adds, stats.edge_removes) == (0, 0)
        assert world.is_legal()
    assert world.metrics.violations == []


@pytest.mark.parametrize("n,seed", [(16, s) for s in range(10)] + [(32, s) for s in range(5)])
def test_all_pairs_lookups_are_delivered_on_legal_worlds(n, seed):
    world = _legal_world(n, seed)
    ids = sorted(world.live)
    lookups = [world.inject_lookup(u, v) for u in ids for v in ids if u != v]
    for _ in range(world.cap + 1):
        if all(world.metrics.lookups[i].delivered for i in lookups):
            break
        world.step_round()
    records = [world.metrics.lookups[i] for i in lookups]
    assert all(r.delivered for r in records)
    assert max(r.hops for r in records) <= 4 * math.log2(n)
    for r in records:
        assert trace_violations(world, list(r.trace)) == []
    assert world.is_legal()


def test_route_table_follows_the_lookup_handler():
    world = _legal_world(16, 6)
    table = RouteTable(world)
    for v, state in world.live.items():
        for t in world.live:
            if t == v:
                continue
            hop = lookup_next_hop(state, world.live[t].ref)
            assert table.next_hop(v, t) == hop.id


def test_async_rounds_stay_within_the_cap():
    world = gen_initial_world(8, 4, cap=CAP)
    conv = run_until_legal_async(world, 1)
    assert conv.rounds == 1
    assert world.clock == world.fairness_factor * 8


def test_surviving_fraction_counts_only_a_legal_component(f4_world):
    # {A} is a legal singleton; the chain B -> C -> D is not legal on its own
    world = f4_world({("B", "C"), ("C", "D")})
    record = scenario_crash(world, 0.0, "random", max_rounds=0)
    assert not record.legal
    assert record.surviving_fraction == pytest.approx(0.25)
