"""Engine tests: wire codec, timing injection, scheme behavior, determinism,
cost counters, resume, and failure surfacing."""

from __future__ import annotations

import math

import numpy as np
import pytest

from fedsim.aggregate import DevicePartial, PartialEntry
from fedsim.core import ClientProfile, ConfigError, DataSlice, SimConfig
from fedsim.data import PartitionSpec, generate, partition
from fedsim.engine import (
    DeviceFailureError,
    DeviceModel,
    Message,
    SimulationEngine,
    TransportError,
    append_results,
    channel_pair,
    decode_message,
    encode_assignment,
    encode_error,
    encode_report,
    encode_shutdown,
    make_device_models,
    partial_byte_roles,
    report_time,
    virtual_task_seconds,
)
from fedsim.estimate import TimingRecord
from fedsim.statestore import StateStore
from fedsim.trainer import AggOp, FedAvg, ModelParams, ParamBundle, Scaffold


# --- fixtures ---------------------------------------------------------------

def small_world(m=12, n=240, f=4, c=3, seed=5):
    ds = generate(n, f, c, seed=seed)
    profiles = partition(ds, m, PartitionSpec(), seed=seed)
    eval_ds = generate(120, f, c, seed=seed, sample_set=1)
    return profiles, eval_ds


def run_engine(scheme, k, profiles, eval_ds=None, rounds=3, seed=5, m_p=6,
               scheduling="time-window", clock="virtual", plugin=None,
               store=None, overhead=0.0, **engine_kw):
    cfg = SimConfig(total_clients=len(profiles), concurrent_clients=m_p,
                    num_devices=k, total_rounds=rounds, seed=seed,
                    scheme=scheme, scheduling=scheduling, clock=clock,
                    trip_overhead_seconds=overhead)
    eng = SimulationEngine(cfg, plugin or FedAvg(lr=0.1), profiles,
                           make_device_models(k), store=store,
                           eval_data=eval_ds, **engine_kw)
    return eng, eng.run()


# --- codec ------------------------------------------------------------------

def test_assignment_codec_round_trip():
    bundle = ParamBundle()
    bundle.add("weights", np.arange(6.0).reshape(2, 3), AggOp.WEIGHTED_AVERAGE)
    bundle.add("bias", np.array([-0.0, 1e-300]), AggOp.WEIGHTED_AVERAGE, weight=2.5)
    bundle.add("server_ctrl", np.zeros((2, 3)), AggOp.SUM)
    bundle.add("tag", np.array([7.0]), AggOp.COLLECT, client_id=9)
    blob = encode_assignment(4, [3, 1, 8], bundle)
    msg = decode_message(blob)
    assert msg.round == 4
    assert msg.clients == (3, 1, 8)
    assert set(msg.bundle.entries) == set(bundle.entries)
    for name, e in bundle.entries.items():
        got = msg.bundle.entries[name]
        assert got.op is e.op
        assert got.weight == e.weight
        assert got.client_id == e.client_id
        assert np.array_equal(got.tensor, e.tensor)
    # -0.0 survives bit-exactly
    assert np.signbit(msg.bundle.tensor("bias")[0])


def test_report_codec_round_trip():
    partial = DevicePartial(device_id=2, entries={
        "delta": PartialEntry(op=AggOp.WEIGHTED_AVERAGE,
                              acc=np.array([[1.5, -2.0]]), weight_sum=12.0, count=2),
        "ctrl": PartialEntry(op=AggOp.SIMPLE_AVERAGE,
                             acc=np.array([0.25]), count=2),
        "scale": PartialEntry(op=AggOp.SUM, acc=np.array([3.0]), count=2),
        "local_loss": PartialEntry(op=AggOp.COLLECT, collected=[
            (4, np.array([0.9])), (7, np.array([1.1]))], count=2),
    }, clients_folded=[4, 7])
    timings = [TimingRecord(2, 4, 3, 20, 0.125), TimingRecord(2, 7, 3, 11, 0.5)]
    msg = decode_message(encode_report(3, 2, partial, timings))
    assert msg.kind == 2 and msg.round == 3 and msg.device_id == 2
    got = msg.partial
    assert got.clients_folded == [4, 7]
    assert got.entries["delta"].weight_sum == 12.0
    assert np.array_equal(got.entries["delta"].acc, partial.entries["delta"].acc)
    assert got.entries["local_loss"].acc is None
    assert got.entries["local_loss"].collected[1][0] == 7
    assert np.array_equal(got.entries["local_loss"].collected[1][1], np.array([1.1]))
    assert msg.timings == tuple(timings)


def test_shutdown_error_and_bad_frames():
    assert decode_message(encode_shutdown()).kind == 3
    msg = decode_message(encode_error(5, 1, "boom\ntrace"))
    assert msg.kind == 4 and msg.device_id == 1 and "boom" in msg.error
    with pytest.raises(TransportError, match="empty"):
        decode_message(b"")
    with pytest.raises(TransportError, match="unknown message kind"):
        decode_message(bytes([99]))


def test_partial_byte_roles_counts_data_only():
    partial = DevicePartial(device_id=0, entries={
        "w": PartialEntry(op=AggOp.WEIGHTED_AVERAGE, acc=np.zeros((3, 4))),
        "s": PartialEntry(op=AggOp.SUM, acc=np.zeros(2)),
        "c": PartialEntry(op=AggOp.COLLECT,
                          collected=[(0, np.zeros(5)), (1, np.zeros(5))]),
    })
    avg, special = partial_byte_roles(partial)
    assert avg == 8 * (12 + 2)
    assert special == 8 * 10


def test_channel_pair_duplex_and_close():
    server, device = channel_pair()
    server.connect()
    server.send(b"down")
    assert device.receive() == b"down"
    device.send(b"up")
    assert server.receive() == b"up"
    device.close()
    with pytest.raises(TransportError):
        device.send(b"x")
    with pytest.raises(TransportError):
        device.connect()


# --- timing injection ---------------------------------------------------------

def test_report_time_examples():
    plain = DeviceModel(device_id=0)
    assert report_time(1.25, plain, 3, 10) == 1.25

    slow = DeviceModel(device_id=0, hetero_ratio=0.5)
    assert report_time(2.0, slow, 3, 10) == 3.0

    dyn = DeviceModel(device_id=0, dynamic=True)
    assert report_time(1.0, dyn, 0, 10) == pytest.approx(2.0)

    # cos(3.14) is near -1: the factor bottoms out and the floor keeps the
    # reported time positive.
    late = report_time(1.0, dyn, 10, 10)
    assert 1e-9 <= late < 0.01

    k1 = DeviceModel(device_id=1, dynamic=True)
    assert report_time(1.0, k1, 0, 10) == pytest.approx(1.0 + math.cos(1.0))

    with pytest.raises(ValueError, match="measured_seconds"):
        report_time(0.0, plain, 0, 10)


def test_virtual_task_seconds():
    dev = DeviceModel(device_id=1, t_true=0.01, b_true=0.5)
    assert virtual_task_seconds(dev, 30, seed=0, round_num=0, client_id=0) == \
        pytest.approx(0.8)
    noisy = DeviceModel(device_id=1, t_true=0.01, b_true=0.5, noise=0.05)
    a = virtual_task_seconds(noisy, 30, seed=0, round_num=2, client_id=7)
    b = virtual_task_seconds(noisy, 30, seed=0, round_num=2, client_id=7)
    c = virtual_task_seconds(noisy, 30, seed=0, round_num=3, client_id=7)
    assert a == b != c
    assert a > 0


def test_device_model_validation():
    with pytest.raises(ConfigError, match="hetero_ratio"):
        DeviceModel(device_id=0, hetero_ratio=-0.1)
    with pytest.raises(ConfigError, match="timing"):
        DeviceModel(device_id=0, t_true=0.0)
    devs = make_device_models(3, hetero=[0.0, 0.5, 1.0], t_true=2e-4)
    assert [d.hetero_ratio for d in devs] == [0.0, 0.5, 1.0]
    assert all(d.t_true == 2e-4 for d in devs)
    with pytest.raises(ConfigError, match="hetero needs 3"):
        make_device_models(3, hetero=[0.0, 0.5])


# --- runs -------------------------------------------------------------------

def test_parrot_round_counters_and_results_file(tmp_path):
    profiles, eval_ds = small_world()
    out = tmp_path / "results.tsv"
    eng, outcomes = run_engine("PARROT", 2, profiles, eval_ds,
                               results_path=out, overhead=0.001)
    assert len(outcomes) == 3
    model_floats = sum(e.tensor.size for e in eng.global_bundle.entries.values())
    for oc in outcomes:
        assert oc.costs.trips_up == 2
        assert oc.costs.trips_down == 2
        assert oc.costs.bytes_avg_params == 2 * 8 * model_floats
        assert oc.costs.bytes_special_params == 0
        assert oc.costs.peak_live_model_replicas <= 2
        assert set(oc.device_loads) == {0, 1}
        assert oc.simulated_round_seconds == pytest.approx(
            max(oc.device_loads.values()) + 0.001 * 4)
        assert 0.2 <= oc.accuracy <= 1.0
        assert np.isfinite(oc.loss)
    # Warm-up round is uniform; later rounds greedy once fits exist.
    assert outcomes[0].scheduling_mode == "warmup-uniform"
    assert outcomes[2].scheduling_mode == "greedy"
    assert np.isnan(outcomes[0].estimation_error)
    assert np.isfinite(outcomes[2].estimation_error)

    lines = out.read_text().splitlines()
    assert lines[0].startswith("round\tscheme")
    assert len(lines) == 4
    assert lines[1].split("\t")[1] == "PARROT"


def test_trips_per_scheme():
    profiles, _ = small_world()
    _, sp = run_engine("SP", 1, profiles, rounds=2)
    _, sd = run_engine("SD_DIST", 6, profiles, rounds=2)
    _, fa = run_engine("FA_DIST", 2, profiles, rounds=2)
    _, pa = run_engine("PARROT", 2, profiles, rounds=2)
    assert all(o.costs.trips_up == 0 and o.costs.bytes_avg_params == 0 for o in sp)
    assert all(o.costs.trips_up == 6 and o.costs.trips_down == 6 for o in sd)
    assert all(o.costs.trips_up == 6 and o.costs.trips_down == 6 for o in fa)
    assert all(o.costs.trips_up == 2 and o.costs.trips_down == 2 for o in pa)


def test_scheme_equivalence_small():
    profiles, _ = small_world()
    finals = {}
    for scheme, k in [("SP", 1), ("SD_DIST", 6), ("FA_DIST", 2), ("PARROT", 2)]:
        eng, _ = run_engine(scheme, k, profiles, rounds=3)
        finals[scheme] = eng.global_bundle.model()
    ref = finals["SP"]
    scale = max(np.abs(ref.weights).max(), 1e-30)
    for scheme, model in finals.items():
        assert np.abs(model.weights - ref.weights).max() / scale < 1e-12, scheme
        assert np.allclose(model.bias, ref.bias, rtol=1e-12, atol=1e-14)


def test_virtual_runs_bit_reproducible():
    profiles, _ = small_world()
    for scheme, k in [("PARROT", 3), ("FA_DIST", 3)]:
        eng1, out1 = run_engine(scheme, k, profiles, rounds=4)
        eng2, out2 = run_engine(scheme, k, profiles, rounds=4)
        m1, m2 = eng1.global_bundle.model(), eng2.global_bundle.model()
        assert np.array_equal(m1.weights, m2.weights)
        assert np.array_equal(m1.bias, m2.bias)
        for a, b in zip(out1, out2):
            assert a.device_loads == b.device_loads
            assert a.simulated_round_seconds == b.simulated_round_seconds


def test_fa_work_pulling_balances_heterogeneous_devices():
    # Device 1 is 9x slower; work pulling should hand it far fewer tasks.
    profiles, _ = small_world(m=20)
    cfg = SimConfig(total_clients=20, concurrent_clients=10, num_devices=2,
                    total_rounds=2, seed=5, scheme="FA_DIST")
    eng = SimulationEngine(cfg, FedAvg(lr=0.1), profiles,
                           make_device_models(2, t_true=[1e-4, 9e-4]))
    eng.run()
    per_dev = [len(eng.history.device_records(k, 0, 2)) for k in (0, 1)]
    assert per_dev[0] + per_dev[1] == 20
    assert per_dev[0] > per_dev[1]


def test_stateful_run_requires_store(tmp_path):
    profiles, _ = small_world()
    with pytest.raises(ConfigError, match="state store"):
        run_engine("PARROT", 2, profiles, plugin=Scaffold(lr=0.1))
    store = StateStore(tmp_path / "st")
    eng, outcomes = run_engine("PARROT", 2, profiles, plugin=Scaffold(lr=0.1),
                               store=store, rounds=2)
    assert store.stats().bytes_on_disk > 0
    assert outcomes[-1].costs.state_bytes_disk == store.stats().bytes_on_disk


def test_resume_matches_uninterrupted():
    profiles, _ = small_world()
    eng_full, _ = run_engine("PARROT", 2, profiles, rounds=6)

    cfg = SimConfig(total_clients=12, concurrent_clients=6, num_devices=2,
                    total_rounds=6, seed=5, scheme="PARROT")
    eng_a = SimulationEngine(cfg, FedAvg(lr=0.1), profiles, make_device_models(2))
    eng_a.run(rounds=3)
    eng_b = SimulationEngine(cfg, FedAvg(lr=0.1), profiles, make_device_models(2),
                             start_round=3, initial_global=eng_a.global_bundle,
                             history=eng_a.history)
    eng_b.run()
    full, resumed = eng_full.global_bundle.model(), eng_b.global_bundle.model()
    assert np.array_equal(full.weights, resumed.weights)
    assert np.array_equal(full.bias, resumed.bias)


def test_device_failure_aborts_with_diagnostics():
    profiles, _ = small_world()
    bad = profiles[3].data_partition.features.copy()
    bad[0, 0] = np.nan
    profiles = list(profiles)
    profiles[3] = ClientProfile(
        client_id=3, sample_count=len(profiles[3].data_partition),
        data_partition=DataSlice(bad, profiles[3].data_partition.labels,
                                 profiles[3].data_partition.indices))
    cfg = SimConfig(total_clients=12, concurrent_clients=12, num_devices=2,
                    total_rounds=2, seed=5, scheme="PARROT")
    eng = SimulationEngine(cfg, FedAvg(lr=0.1), profiles, make_device_models(2))
    with pytest.raises(DeviceFailureError, match="device .* failed"):
        eng.run()


def test_real_clock_smoke():
    profiles, _ = small_world()
    for scheme, k in [("PARROT", 2), ("FA_DIST", 2)]:
        eng, outcomes = run_engine(scheme, k, profiles, rounds=2, clock="real")
        assert all(o.wall_seconds > 0 for o in outcomes)
        assert all(o.costs.trips_up == 6 if scheme == "FA_DIST" else 2
                   for o in outcomes)
        model = eng.global_bundle.model()
        assert np.all(np.isfinite(model.weights))


def test_history_covers_every_task():
    profiles, _ = small_world()
    eng, _ = run_engine("PARROT", 2, profiles, rounds=4)
    assert eng.history.size == 4 * 6
    for r in range(4):
        assert len(eng.history.round_records(r)) == 6


def test_engine_validation():
    profiles, _ = small_world()
    cfg = SimConfig(total_clients=12, concurrent_clients=6, num_devices=2,
                    total_rounds=3, seed=5, scheme="PARROT")
    with pytest.raises(ConfigError, match="device models"):
        SimulationEngine(cfg, FedAvg(), profiles, make_device_models(3))
    with pytest.raises(ConfigError, match="client profiles"):
        SimulationEngine(cfg, FedAvg(), profiles[:5], make_device_models(2))
    with pytest.raises(ConfigError, match="start_round"):
        SimulationEngine(cfg, FedAvg(), profiles, make_device_models(2),
                         start_round=7)
