import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from torta.baselines import Scheduler, make_baseline
from torta.core import Config, FailureEvent, GpuKind, ServerMode, ServerSpec, Task, TaskClass, Weights
from torta.engine import (
    Engine,
    FailureSchedule,
    WorkloadSpec,
    apportion,
    compute_response_time,
    generate_workload,
    inject_failure,
    objective_total,
    power_cost,
    switching_cost,
    SlotReport,
)
from torta.metrics import emit_slot_csv
from torta.topology import PRESETS, TopologyError, format_topology, load_topology, parse_topology

from conftest import TWO_REGION

GOLDEN = Path(__file__).parent / "golden"


# -- topology ----------------------------------------------------------------

@pytest.mark.parametrize("name,regions,scale", [("abilene", 12, 25.0), ("polska", 12, 45.0),
                                                ("gabriel", 25, 80.0), ("cost2", 32, 150.0)])
def test_presets_match_table(name, regions, scale):
    topo = load_topology(name)
    assert topo.n_regions == regions
    assert topo.latency.max() == pytest.approx(scale, abs=1e-3)
    assert np.allclose(topo.latency, topo.latency.T)


def test_all_presets_load():
    for name in PRESETS:
        load_topology(name).validate()


def test_pair_file_parsed_exactly(pair_topo):
    assert pair_topo.name == "pair"
    assert np.array_equal(pair_topo.latency, [[0.0, 5.0], [5.0, 0.0]])
    assert pair_topo.inventory[0] == {GpuKind.A100: 2, GpuKind.T4: 1}
    assert np.allclose(pair_topo.electricity_price, [0.10, 0.12])


def test_links_complete_with_shortest_paths():
    text = "[nodes]\n0 a 1\n1 b 1\n2 c 1\n[links]\n0 1 10\n1 2 7\n[inventory]\n0 T4 1\n1 T4 1\n2 T4 1\n"
    topo = parse_topology(text)
    assert topo.latency[0, 2] == 17.0
    assert topo.bandwidth_cost[0, 2] == 2.0


@pytest.mark.parametrize("text,msg", [
    (TWO_REGION.replace("0 5\n5 0", "0 5\n6 0"), "symmetric"),
    (TWO_REGION.replace("1 A100 2\n1 T4 1\n", ""), "no servers"),
    ("[nodes]\n0 a 1\n1 b 1\n2 c 1\n[links]\n0 1 3\n[inventory]\n0 T4 1\n1 T4 1\n2 T4 1\n", "connected"),
    ("[nodes]\n0 a 1\n[inventory]\n0 B200 1\n", "cannot parse"),
])
def test_topology_errors(text, msg):
    with pytest.raises(TopologyError, match=msg):
        parse_topology(text)


def test_missing_topology_file(tmp_path):
    with pytest.raises(TopologyError):
        load_topology(tmp_path / "nope.topo")


def test_format_round_trip(toy4):
    again = parse_topology(format_topology(toy4))
    assert np.allclose(again.latency, toy4.latency, atol=1e-4)
    assert again.inventory == toy4.inventory


# -- workload ----------------------------------------------------------------

def _flat(rate, **kw):
    return WorkloadSpec(rates=np.array([rate]), phases=np.zeros(1), amplitude=0.0, **kw)


def test_zero_rate_is_empty(rng):
    assert generate_workload(_flat(0.0), 0, rng) == []


def test_rate_law_of_large_numbers(rng):
    spec = _flat(10.0)
    n = [len(generate_workload(spec, t, rng)) for t in range(10_000)]
    assert np.mean(n) == pytest.approx(10.0, rel=0.02)


def test_surge_doubles_rate(rng):
    spec = _flat(10.0, surges=((0, 5000),))
    base = _flat(10.0)
    surged = np.mean([len(generate_workload(spec, t, rng)) for t in range(5000)])
    plain = np.mean([len(generate_workload(base, t, rng)) for t in range(5000)])
    assert surged / plain == pytest.approx(2.0, rel=0.05)


def test_workload_deterministic_per_slot():
    spec = WorkloadSpec(rates=np.array([20.0, 5.0]), phases=np.zeros(2))
    a = generate_workload(spec, 7, np.random.default_rng(3))
    b = generate_workload(spec, 7, np.random.default_rng(3))
    assert a == b and a
    assert all(t.deadline >= t.arrival_slot and t.compute_req > 0 for t in a)


def test_workload_rejects_bad_spec():
    with pytest.raises(ValueError):
        WorkloadSpec(rates=np.array([-1.0]), phases=np.zeros(1))
    with pytest.raises(ValueError):
        WorkloadSpec(rates=np.array([1.0]), phases=np.zeros(1), class_mix=(0.5, 0.5, 0.5))


# -- response, power, switching, objective -----------------------------------

def _spec(region=0, cap=4.0, price=0.3):
    return ServerSpec(region=region, gpu_kind=GpuKind.T4, compute_capacity=cap, memory_capacity=16.0,
                      avg_capacity_contrib=1.0, power_price=price, preferred_class=TaskClass.Lightweight,
                      warmup_slots=1, server_id=0)


def _task(origin=0, compute=2.0, arrival=0):
    return Task(0, origin, compute, 1.0, arrival + 5, TaskClass.Lightweight, arrival)


def test_response_time_examples():
    lat = np.array([[0.0, 25.0], [25.0, 0.0]])
    wait, comp, net = compute_response_time(_task(), _spec(), 0, 0.0, lat, 45.0)
    assert (wait, net) == (0.0, 0.0)
    assert comp == pytest.approx(22.5, abs=1e-12)
    _, _, net = compute_response_time(_task(origin=1), _spec(), 0, 0.0, lat, 45.0)
    assert net == pytest.approx(0.05, abs=1e-12)


def test_response_time_fifo_wait():
    # two slots in the buffer, then one slot of backlog ahead of it
    wait, _, _ = compute_response_time(_task(arrival=3), _spec(cap=4.0), 5, 4.0, np.zeros((1, 1)), 45.0)
    assert wait == pytest.approx(3 * 45.0)


def test_power_cost_examples():
    w = Weights(w_network=0.01, w_compute=1.0)
    lat = np.array([[0.0, 20.0], [20.0, 0.0]])
    assert power_cost([], w, lat) == 0.0
    w_any = Weights(w_network=123.0, w_compute=2.0)
    assert power_cost([(_task(), _spec(price=0.3))], w_any, lat) == pytest.approx(0.6, abs=1e-12)
    pair = [(_task(), _spec(price=0.3)), (_task(origin=1), _spec(region=0, price=0.5))]
    assert power_cost(pair, w, lat) == pytest.approx(0.3 + (0.01 * 20 + 0.5), abs=1e-12)


def test_switching_cost_examples():
    a = np.array([[0.5, 0.5], [0.2, 0.8]])
    assert switching_cost(a, a) == 0.0
    b = np.array([[1.0, 0.0], [0.2, 0.8]])
    assert switching_cost(a, b) == pytest.approx(0.5, abs=1e-12)
    assert switching_cost(np.eye(2), np.full((2, 2), 0.5)) == pytest.approx(1.0, abs=1e-12)


def test_switching_cost_symmetric(rng):
    for _ in range(20):
        a, b = rng.random((3, 3)), rng.random((3, 3))
        assert switching_cost(a, b) == switching_cost(b, a)


def _report(slot, waits, comps, nets, power, switch):
    return SlotReport(slot=slot, wait_s=np.array(waits, float), compute_s=np.array(comps, float),
                      network_s=np.array(nets, float), power_cost=power, switching_cost=switch)


def test_objective_examples():
    w = Weights(alpha=2.0, beta=3.0)
    assert objective_total([SlotReport(slot=0), SlotReport(slot=1)], w) == 0.0
    run = [_report(0, [1.0, 2.0], [3.0, 4.0], [0.5, 0.5], 1.0, 0.25),
           _report(1, [0.0], [10.0], [0.1], 2.0, 1.0)]
    assert objective_total(run, Weights(alpha=0.0, beta=0.0)) == pytest.approx(21.1, abs=1e-12)
    # 21.1 + 2*(0.25+1.0) + 3*(1.0+2.0)
    assert objective_total(run, w) == pytest.approx(21.1 + 2.5 + 9.0, abs=1e-12)


def test_apportion_largest_remainder():
    assert list(apportion(10, np.array([0.25, 0.25, 0.5]))) == [3, 2, 5]
    assert apportion(7, np.array([0.3, 0.3, 0.4])).sum() == 7


# -- failures ----------------------------------------------------------------

def test_failure_severity_rounding():
    sched = FailureSchedule([FailureEvent(region=0, start_slot=10, duration_slots=5, severity=0.5)])
    assert sched.unavailable(0, 12, 10) == set(range(5))
    assert sched.unavailable(0, 12, 7) == set(range(3))
    assert sched.unavailable(0, 15, 10) == set()
    assert sched.unavailable(1, 12, 10) == set()


def test_failure_event_validation():
    with pytest.raises(ValueError):
        FailureEvent(0, -1, 3)
    with pytest.raises(ValueError):
        FailureEvent(0, 0, 0)
    with pytest.raises(ValueError):
        FailureEvent(0, 0, 3, severity=1.5)


def test_full_failure_zeroes_capacity(toy4):
    cfg = Config(topology="toy4")
    ev = FailureEvent(region=1, start_slot=2, duration_slots=3, severity=1.0)
    eng = Engine(toy4, make_baseline("reactive-ot", cfg), cfg, seed=0, failures=[ev])
    for t in range(7):
        eng.step()
        if 2 <= t < 5:
            assert eng.regions[1].resource_capacity == 0.0
            assert eng.regions[1].installed_capacity == 0.0
    assert eng.regions[1].installed_capacity > 0


def test_failure_outside_horizon_has_no_effect(toy4):
    cfg = Config(topology="toy4")
    plain = Engine(toy4, make_baseline("rr", cfg), cfg, seed=2).run(10)
    sched = inject_failure(FailureSchedule(), FailureEvent(0, 500, 5, 1.0))
    eng = Engine(toy4, make_baseline("rr", cfg), cfg, seed=2, failures=sched.events)
    assert emit_rows(plain) == emit_rows(eng.run(10))


# -- engine ------------------------------------------------------------------

def emit_rows(reports):
    from torta.metrics import slot_rows
    return list(slot_rows(reports))


class _Idle(Scheduler):
    name = "idle"

    def macro_allocate(self, state, tasks, ctx):
        return np.eye(len(ctx.request_counts))


def test_no_arrivals_slot_is_all_zero(pair_topo):
    eng = Engine(pair_topo, _Idle(), Config(), seed=0)
    before = eng.state()
    rep = eng.step(tasks=[])
    assert (rep.arrivals, rep.completions, rep.drops, rep.carryover) == (0, 0, 0, 0)
    assert rep.power_cost == 0.0 and rep.switching_cost == 0.0 and rep.response_sum == 0.0
    after = eng.state()
    assert after.slot == before.slot + 1
    assert np.array_equal(after.queues, before.queues)
    assert np.array_equal(after.prev_action, before.prev_action)


def test_no_wait_with_ample_capacity(pair_topo):
    cfg = Config(initial_active_fraction=1.0)
    eng = Engine(pair_topo, _Idle(), cfg, seed=0)
    for reg in eng.regions:
        for s in reg.servers:
            s.spec = dataclasses.replace(s.spec, compute_capacity=1e12)
    tasks = [Task(k, k % 2, 5.0, 4.0, 5, TaskClass.Lightweight, 0) for k in range(40)]
    rep = eng.step(tasks=tasks)
    assert rep.completions == 40
    assert np.all(rep.wait_s < 1e-6)


@pytest.mark.parametrize("sched", ["rr", "skylb", "sdib", "reactive-ot"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_conservation_every_slot(toy4, sched, seed):
    cfg = Config(topology="toy4")
    eng = Engine(toy4, make_baseline(sched, cfg), cfg, seed=seed,
                 failures=[FailureEvent(0, 10, 10, 1.0)])
    arrivals = completions = drops = 0
    for rep in eng.run(40):
        arrivals += rep.arrivals
        completions += rep.completions
        drops += rep.drops
        assert arrivals == completions + drops + rep.carryover
        assert np.all(rep.wait_s >= 0) and np.all(rep.compute_s >= 0) and np.all(rep.network_s >= 0)


def test_determinism_same_seed(toy4):
    cfg = Config(topology="toy4")
    a = Engine(toy4, make_baseline("sdib", cfg), cfg, seed=9).run(30)
    b = Engine(toy4, make_baseline("sdib", cfg), cfg, seed=9).run(30)
    assert emit_rows(a) == emit_rows(b)
    c = Engine(toy4, make_baseline("sdib", cfg), cfg, seed=10).run(30)
    assert emit_rows(a) != emit_rows(c)


@pytest.mark.parametrize("stem,topo,sched,seed", [("rr_toy4_s3_20", "toy4", "rr", 3),
                                                   ("reactive-ot_abilene_s1_20", "abilene", "reactive-ot", 1)])
def test_golden_slot_stream(tmp_path, stem, topo, sched, seed):
    cfg = Config(topology=topo)
    eng = Engine(load_topology(topo), make_baseline(sched, cfg), cfg, seed=seed)
    out = emit_slot_csv(eng.run(20), tmp_path / "slots.csv")
    assert out.read_bytes() == (GOLDEN / f"{stem}.csv").read_bytes()


def test_scheduler_error_has_slot_context(pair_topo):
    class Broken(Scheduler):
        name = "broken"

        def macro_allocate(self, state, tasks, ctx):
            return np.ones((2, 2))

    eng = Engine(pair_topo, Broken(), Config(), seed=0)
    with pytest.raises(RuntimeError, match="slot 0"):
        eng.step()


def test_abilene_full_horizon_under_a_minute(abilene):
    cfg = Config()
    eng = Engine(abilene, make_baseline("reactive-ot", cfg), cfg, seed=0)
    t0 = time.perf_counter()
    reps = eng.run(480)
    assert time.perf_counter() - t0 < 60.0
    assert len(reps) == 480
