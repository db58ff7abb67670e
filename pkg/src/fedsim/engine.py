"""Round orchestration: a server driving K device executors over a message
channel, under four execution schemes.

- SP: one in-process executor runs every selected client sequentially; no
  messages cross a serialization boundary, so communication counters stay 0.
- SD_DIST: one executor per selected client, one task each, one uplink per
  task.
- FA_DIST: K executors; the server hands out one task at a time and assigns
  the next pending client to whichever device frees up first (work pulling).
- PARROT: K executors; a per-round plan assigns each device an ordered batch
  of clients, devices fold their clients' results locally, and exactly one
  uplink per device carries the folded partial.

Task timing is decoupled from the clock mode. In virtual mode (default) a
task's duration comes from the device's ground-truth cost model and nothing
sleeps, so timing experiments run in wall-clock seconds and the whole run is
reproducible bit-for-bit. In real mode the executor reports its measured
compute time and sleeps any injected slowdown.

Transport is a duplex byte channel; the in-process implementation pairs two
queues. Workers and server exchange little-endian binary messages, and the
uplink byte counters are taken from tensor payload data only (8 bytes per
float64 element), never framing or names.
"""

from __future__ import annotations

import abc
import math
import queue
import struct
import threading
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .aggregate import DevicePartial, PartialEntry, global_fold, local_fold, server_update
from .core import (
    STREAM_NOISE,
    ClientProfile,
    ClientSelection,
    ConfigError,
    SimConfig,
    select_clients,
    stream_rng,
)
from .data import SyntheticDataset
from .estimate import (
    InsufficientDataError,
    TimingHistory,
    TimingRecord,
    WorkloadFit,
    estimation_error,
    fit_device,
    record,
)
from .metrics import CostLedger, ReplicaGauge
from .schedule import MODE_GREEDY, RoundPlan, schedule, uniform_division, warm_jit
from .statestore import StateStore
from .trainer import AggOp, AlgorithmPlugin, ModelParams, ParamBundle, client_execute, evaluate

KIND_TASK = 1
KIND_REPORT = 2
KIND_SHUTDOWN = 3
KIND_ERROR = 4

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")

_OP_CODE = {AggOp.WEIGHTED_AVERAGE: 1, AggOp.SUM: 2,
            AggOp.SIMPLE_AVERAGE: 3, AggOp.COLLECT: 4}
_OP_FROM_CODE = {v: k for k, v in _OP_CODE.items()}

RESULTS_HEADER = ("round\tscheme\tscheduling\tsim_seconds\twall_seconds\t"
                  "device_loads\ttrips_up\ttrips_down\tbytes_avg\tbytes_special\t"
                  "accuracy\tloss\test_error")


class TransportError(RuntimeError):
    """Channel used after close, or a malformed frame."""


class DeviceFailureError(RuntimeError):
    """A device executor raised; the run aborts with its traceback."""


class Channel(abc.ABC):
    """Duplex, ordered, reliable byte-message transport endpoint."""

    @abc.abstractmethod
    def connect(self) -> None: ...

    @abc.abstractmethod
    def send(self, data: bytes) -> None: ...

    @abc.abstractmethod
    def receive(self) -> bytes: ...

    @abc.abstractmethod
    def close(self) -> None: ...


class InProcessChannel(Channel):
    """Queue-backed endpoint. Build endpoints in pairs via channel_pair().

    Several endpoints may share one receive queue (used for work-pulling in
    real-clock mode, where the server takes reports from whichever device
    finishes first).
    """

    def __init__(self, send_q: "queue.Queue[bytes]", recv_q: "queue.Queue[bytes]"):
        self._send_q = send_q
        self._recv_q = recv_q
        self._closed = False

    def connect(self) -> None:
        if self._closed:
            raise TransportError("connect on closed channel")

    def send(self, data: bytes) -> None:
        if self._closed:
            raise TransportError("send on closed channel")
        self._send_q.put(bytes(data))

    def receive(self) -> bytes:
        if self._closed:
            raise TransportError("receive on closed channel")
        return self._recv_q.get()

    def close(self) -> None:
        self._closed = True


def channel_pair(uplink: "queue.Queue[bytes] | None" = None
                 ) -> tuple[InProcessChannel, InProcessChannel]:
    """(server_end, device_end) wired crosswise; `uplink` lets several pairs
    share the server-bound queue."""
    up = uplink if uplink is not None else queue.Queue()
    down: "queue.Queue[bytes]" = queue.Queue()
    return InProcessChannel(down, up), InProcessChannel(up, down)


# --- wire codec -------------------------------------------------------------

def _pack_str(buf: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    buf += _U16.pack(len(raw))
    buf += raw


def _unpack_str(blob: bytes, off: int) -> tuple[str, int]:
    n = _U16.unpack_from(blob, off)[0]
    off += 2
    return blob[off:off + n].decode("utf-8"), off + n


def _pack_tensor(buf: bytearray, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    buf += _U8.pack(arr.ndim)
    for d in arr.shape:
        buf += _U64.pack(d)
    buf += arr.tobytes()


def _unpack_tensor(blob: bytes, off: int) -> tuple[np.ndarray, int]:
    ndim = blob[off]
    off += 1
    shape = []
    for _ in range(ndim):
        shape.append(_U64.unpack_from(blob, off)[0])
        off += 8
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
    return arr, off + 8 * n


def _pack_bundle(buf: bytearray, bundle: ParamBundle) -> None:
    buf += _U32.pack(len(bundle.entries))
    for name, e in bundle.entries.items():
        _pack_str(buf, name)
        buf += _U8.pack(_OP_CODE[e.op])
        buf += _F64.pack(e.weight)
        buf += _I64.pack(-1 if e.client_id is None else e.client_id)
        _pack_tensor(buf, e.tensor)


def _unpack_bundle(blob: bytes, off: int) -> tuple[ParamBundle, int]:
    n = _U32.unpack_from(blob, off)[0]
    off += 4
    bundle = ParamBundle()
    for _ in range(n):
        name, off = _unpack_str(blob, off)
        op = _OP_FROM_CODE[blob[off]]
        off += 1
        weight = _F64.unpack_from(blob, off)[0]
        off += 8
        cid = _I64.unpack_from(blob, off)[0]
        off += 8
        tensor, off = _unpack_tensor(blob, off)
        bundle.add(name, tensor, op, weight=weight,
                   client_id=None if cid < 0 else int(cid))
    return bundle, off


@dataclass
class Message:
    kind: int
    round: int = -1
    clients: tuple[int, ...] = ()
    bundle: ParamBundle | None = None
    device_id: int = -1
    partial: DevicePartial | None = None
    timings: tuple[TimingRecord, ...] = ()
    error: str = ""


def encode_assignment(round_num: int, clients: Sequence[int],
                      bundle: ParamBundle) -> bytes:
    buf = bytearray(_U8.pack(KIND_TASK))
    buf += _I64.pack(round_num)
    buf += _U32.pack(len(clients))
    for m in clients:
        buf += _U32.pack(m)
    _pack_bundle(buf, bundle)
    return bytes(buf)


def encode_report(round_num: int, device_id: int, partial: DevicePartial,
                  timings: Sequence[TimingRecord]) -> bytes:
    buf = bytearray(_U8.pack(KIND_REPORT))
    buf += _I64.pack(round_num)
    buf += _U32.pack(device_id)
    buf += _U32.pack(len(partial.entries))
    for name, e in partial.entries.items():
        _pack_str(buf, name)
        buf += _U8.pack(_OP_CODE[e.op])
        buf += _U8.pack(0 if e.acc is None else 1)
        if e.acc is not None:
            _pack_tensor(buf, e.acc)
        buf += _F64.pack(e.weight_sum)
        buf += _U32.pack(e.count)
        buf += _U32.pack(len(e.collected))
        for cid, tensor in e.collected:
            buf += _I64.pack(cid)
            _pack_tensor(buf, tensor)
    buf += _U32.pack(len(partial.clients_folded))
    for m in partial.clients_folded:
        buf += _U32.pack(m)
    buf += _U32.pack(len(timings))
    for rec in timings:
        buf += _U32.pack(rec.device_id)
        buf += _U32.pack(rec.client_id)
        buf += _I64.pack(rec.round)
        buf += _U64.pack(rec.sample_count)
        buf += _F64.pack(rec.reported_seconds)
    return bytes(buf)


def encode_shutdown() -> bytes:
    return _U8.pack(KIND_SHUTDOWN)


def encode_error(round_num: int, device_id: int, text: str) -> bytes:
    buf = bytearray(_U8.pack(KIND_ERROR))
    buf += _I64.pack(round_num)
    buf += _U32.pack(device_id)
    raw = text.encode("utf-8")
    buf += _U32.pack(len(raw))
    buf += raw
    return bytes(buf)


def decode_message(blob: bytes) -> Message:
    if not blob:
        raise TransportError("empty frame")
    kind = blob[0]
    if kind not in (KIND_TASK, KIND_REPORT, KIND_SHUTDOWN, KIND_ERROR):
        raise TransportError(f"unknown message kind {kind}")
    off = 1
    if kind == KIND_SHUTDOWN:
        return Message(kind=kind)
    if kind == KIND_ERROR:
        round_num = _I64.unpack_from(blob, off)[0]
        off += 8
        device_id = _U32.unpack_from(blob, off)[0]
        off += 4
        n = _U32.unpack_from(blob, off)[0]
        off += 4
        return Message(kind=kind, round=round_num, device_id=device_id,
                       error=blob[off:off + n].decode("utf-8"))
    round_num = _I64.unpack_from(blob, off)[0]
    off += 8
    if kind == KIND_TASK:
        n = _U32.unpack_from(blob, off)[0]
        off += 4
        clients = []
        for _ in range(n):
            clients.append(_U32.unpack_from(blob, off)[0])
            off += 4
        bundle, off = _unpack_bundle(blob, off)
        return Message(kind=kind, round=round_num, clients=tuple(clients),
                       bundle=bundle)
    device_id = _U32.unpack_from(blob, off)[0]
    off += 4
    n_entries = _U32.unpack_from(blob, off)[0]
    off += 4
    entries: dict[str, PartialEntry] = {}
    for _ in range(n_entries):
        name, off = _unpack_str(blob, off)
        op = _OP_FROM_CODE[blob[off]]
        off += 1
        has_acc = blob[off]
        off += 1
        acc = None
        if has_acc:
            acc, off = _unpack_tensor(blob, off)
        weight_sum = _F64.unpack_from(blob, off)[0]
        off += 8
        count = _U32.unpack_from(blob, off)[0]
        off += 4
        n_coll = _U32.unpack_from(blob, off)[0]
        off += 4
        collected = []
        for _ in range(n_coll):
            cid = _I64.unpack_from(blob, off)[0]
            off += 8
            tensor, off = _unpack_tensor(blob, off)
            collected.append((int(cid), tensor))
        entries[name] = PartialEntry(op=op, acc=acc, weight_sum=weight_sum,
                                     count=count, collected=collected)
    n_clients = _U32.unpack_from(blob, off)[0]
    off += 4
    folded = []
    for _ in range(n_clients):
        folded.append(_U32.unpack_from(blob, off)[0])
        off += 4
    n_t = _U32.unpack_from(blob, off)[0]
    off += 4
    timings = []
    for _ in range(n_t):
        dev = _U32.unpack_from(blob, off)[0]
        off += 4
        cid = _U32.unpack_from(blob, off)[0]
        off += 4
        rnd = _I64.unpack_from(blob, off)[0]
        off += 8
        samples = _U64.unpack_from(blob, off)[0]
        off += 8
        seconds = _F64.unpack_from(blob, off)[0]
        off += 8
        timings.append(TimingRecord(int(dev), int(cid), int(rnd),
                                    int(samples), float(seconds)))
    partial = DevicePartial(device_id=int(device_id), entries=entries,
                            clients_folded=[int(m) for m in folded])
    return Message(kind=kind, round=round_num, device_id=int(device_id),
                   partial=partial, timings=tuple(timings))


def partial_byte_roles(partial: DevicePartial) -> tuple[int, int]:
    """(averaged-entry data bytes, collect-entry data bytes) of one uplink."""
    avg = special = 0
    for e in partial.entries.values():
        if e.op is AggOp.COLLECT:
            special += sum(8 * t.size for _, t in e.collected)
        elif e.acc is not None:
            avg += 8 * e.acc.size
    return avg, special


# --- devices ----------------------------------------------------------------

@dataclass(frozen=True)
class DeviceModel:
    """One executor's identity plus its injected timing behavior.

    hetero_ratio slows reported times by (1 + ratio); dynamic devices further
    swing by (1 + cos(3.14 * r / R + k)). In virtual-clock mode task time is
    synthesized as N * t_true + b_true with relative Gaussian noise of scale
    `noise`, instead of being measured.
    """

    device_id: int
    hetero_ratio: float = 0.0
    dynamic: bool = False
    t_true: float = 1e-4
    b_true: float = 0.0
    noise: float = 0.0

    def __post_init__(self) -> None:
        if self.device_id < 0:
            raise ConfigError("device_id must be >= 0")
        if self.hetero_ratio < 0:
            raise ConfigError(f"device {self.device_id}: hetero_ratio must be >= 0")
        if self.t_true <= 0 or self.b_true < 0 or self.noise < 0:
            raise ConfigError(f"device {self.device_id}: bad ground-truth timing")


def make_device_models(k: int, hetero=0.0, dynamic: bool = False,
                       t_true=1e-4, b_true=0.0, noise: float = 0.0
                       ) -> list[DeviceModel]:
    """Build K devices; `hetero`, `t_true`, `b_true` may be scalars or
    per-device sequences."""
    def spread(v, name):
        if np.isscalar(v):
            return [float(v)] * k
        vals = [float(x) for x in v]
        if len(vals) != k:
            raise ConfigError(f"{name} needs {k} values, got {len(vals)}")
        return vals

    het = spread(hetero, "hetero")
    ts = spread(t_true, "t_true")
    bs = spread(b_true, "b_true")
    return [DeviceModel(device_id=i, hetero_ratio=het[i], dynamic=dynamic,
                        t_true=ts[i], b_true=bs[i], noise=noise)
            for i in range(k)]


def report_time(measured_seconds: float, device: DeviceModel,
                round_num: int, total_rounds: int) -> float:
    """Slowed time a device reports: measured * (1 + eta_k), and for dynamic
    devices a further (1 + cos(3.14 * r / R + k)) swing. Floored at 1e-9 so
    records stay usable when the cosine factor approaches zero."""
    if measured_seconds <= 0:
        raise ValueError("measured_seconds must be > 0")
    reported = measured_seconds * (1.0 + device.hetero_ratio)
    if device.dynamic:
        reported *= 1.0 + math.cos(3.14 * round_num / total_rounds + device.device_id)
    return max(reported, 1e-9)


def virtual_task_seconds(device: DeviceModel, sample_count: int, seed: int,
                         round_num: int, client_id: int) -> float:
    """Ground-truth task time N * t_true + b_true, with relative Gaussian
    noise when the device model carries one. Deterministic per
    (seed, round, device, client)."""
    base = sample_count * device.t_true + device.b_true
    if device.noise > 0:
        eps = stream_rng(seed, STREAM_NOISE, round_num, device.device_id,
                         client_id).standard_normal()
        base *= 1.0 + device.noise * eps
    return max(base, 1e-9)


class DeviceWorker:
    """Sequentially executes assigned clients: load state, train, save state,
    fold the result into the device partial. Used directly by SP and behind
    a channel by the distributed schemes."""

    def __init__(self, device: DeviceModel, cfg: SimConfig,
                 plugin: AlgorithmPlugin, profiles: Sequence[ClientProfile],
                 store: StateStore | None, gauge: ReplicaGauge,
                 channel: Channel | None = None):
        self.device = device
        self.cfg = cfg
        self.plugin = plugin
        self.profiles = profiles
        self.store = store
        self.gauge = gauge
        self.channel = channel

    def execute_clients(self, bundle: ParamBundle, clients: Sequence[int],
                        round_num: int) -> tuple[DevicePartial, list[TimingRecord]]:
        partial = DevicePartial(device_id=self.device.device_id)
        timings: list[TimingRecord] = []
        for m in clients:
            prof = self.profiles[m]
            state = None
            if self.plugin.is_stateful:
                base = bundle.model()
                state = self.store.load(
                    m, default_factory=lambda: self.plugin.default_state(base))
            self.gauge.acquire()
            try:
                rep = client_execute(self.plugin, prof, bundle, state,
                                     self.cfg.local_epochs, self.plugin.batch_size,
                                     self.plugin.lr, self.cfg.seed, round_num)
            finally:
                self.gauge.release()
            if (self.plugin.is_stateful and rep.new_state is not None
                    and rep.new_state.payload):
                self.store.save(m, round_num, rep.new_state.payload)
            if self.cfg.clock == "virtual":
                measured = virtual_task_seconds(self.device, prof.sample_count,
                                                self.cfg.seed, round_num, m)
            else:
                measured = rep.measured_seconds
            reported = report_time(measured, self.device, round_num,
                                   self.cfg.total_rounds)
            if self.cfg.clock == "real" and reported > measured:
                time.sleep(reported - measured)
            local_fold(partial, rep.client_result, m)
            timings.append(TimingRecord(self.device.device_id, m, round_num,
                                        prof.sample_count, reported))
        return partial, timings

    def run_loop(self) -> None:
        """Thread body: serve TASK messages until SHUTDOWN; on any failure,
        surface the traceback to the server instead of dying silently."""
        try:
            while True:
                msg = decode_message(self.channel.receive())
                if msg.kind == KIND_SHUTDOWN:
                    return
                if msg.kind != KIND_TASK:
                    raise TransportError(f"device got message kind {msg.kind}")
                partial, timings = self.execute_clients(msg.bundle, msg.clients,
                                                        msg.round)
                self.channel.send(encode_report(msg.round, self.device.device_id,
                                                partial, timings))
        except Exception:
            try:
                self.channel.send(encode_error(-1, self.device.device_id,
                                               traceback.format_exc()))
            except Exception:
                pass


# --- server -----------------------------------------------------------------

@dataclass
class RoundOutcome:
    round: int
    scheme: str
    scheduling_mode: str
    simulated_round_seconds: float
    wall_seconds: float
    device_loads: dict[int, float]
    costs: CostLedger
    accuracy: float
    loss: float
    estimation_error: float
    fit_seconds: float
    schedule_seconds: float
    new_global: ParamBundle


def append_results(path: str | Path, outcome: RoundOutcome) -> None:
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    loads = ",".join(f"{outcome.device_loads[k]:.9g}"
                     for k in sorted(outcome.device_loads))
    row = (f"{outcome.round}\t{outcome.scheme}\t{outcome.scheduling_mode}\t"
           f"{outcome.simulated_round_seconds:.9g}\t{outcome.wall_seconds:.9g}\t"
           f"{loads}\t{outcome.costs.trips_up}\t{outcome.costs.trips_down}\t"
           f"{outcome.costs.bytes_avg_params}\t{outcome.costs.bytes_special_params}\t"
           f"{outcome.accuracy:.9g}\t{outcome.loss:.9g}\t"
           f"{outcome.estimation_error:.9g}")
    with open(path, "a", encoding="utf-8") as fh:
        if fresh:
            fh.write(RESULTS_HEADER + "\n")
        fh.write(row + "\n")


class SimulationEngine:
    """Server loop: select, schedule, dispatch, aggregate, update, record.

    Construct once and call run(); passing start_round / initial_global /
    history resumes an interrupted experiment against the same state store
    (round seeds are absolute, so a resumed run replays identically).
    """

    def __init__(self, cfg: SimConfig, plugin: AlgorithmPlugin,
                 profiles: Sequence[ClientProfile],
                 device_models: Sequence[DeviceModel],
                 store: StateStore | None = None,
                 eval_data: SyntheticDataset | None = None,
                 results_path: str | Path | None = None,
                 start_round: int = 0,
                 initial_global: ParamBundle | None = None,
                 history: TimingHistory | None = None,
                 eval_every: int = 1):
        if len(profiles) != cfg.total_clients:
            raise ConfigError(f"need {cfg.total_clients} client profiles, "
                              f"got {len(profiles)}")
        if len(device_models) != cfg.num_devices:
            raise ConfigError(f"scheme {cfg.scheme} with K={cfg.num_devices} "
                              f"needs {cfg.num_devices} device models, "
                              f"got {len(device_models)}")
        if [d.device_id for d in device_models] != list(range(cfg.num_devices)):
            raise ConfigError("device ids must be 0..K-1 in order")
        if plugin.is_stateful and store is None:
            raise ConfigError(f"{plugin.name} is stateful and needs a state store")
        if not 0 <= start_round <= cfg.total_rounds:
            raise ConfigError(f"start_round {start_round} outside [0, {cfg.total_rounds}]")
        self.cfg = cfg
        self.plugin = plugin
        self.profiles = list(profiles)
        self.devices = list(device_models)
        self.store = store
        self.eval_data = eval_data
        self.results_path = results_path
        self.eval_every = max(1, eval_every)
        self.history = history if history is not None else TimingHistory()
        self.gauge = ReplicaGauge()
        self.next_round = start_round
        if initial_global is not None:
            self.global_bundle = initial_global
        else:
            feats = self.profiles[0].data_partition.features.shape[1]
            classes = 1 + max(int(p.data_partition.labels.max())
                              for p in self.profiles)
            self.global_bundle = plugin.init_global(ModelParams.zeros(classes, feats))
        self._truth = {d.device_id: (d.t_true, d.b_true) for d in self.devices}
        self._workers: list[DeviceWorker] = []
        self._threads: list[threading.Thread] = []
        self._server_channels: list[Channel] = []
        if cfg.scheme == "PARROT" and cfg.scheduling in ("full-history", "time-window"):
            warm_jit()  # keep kernel compile time out of per-round timings

    # -- worker lifecycle --

    def _start_workers(self) -> None:
        shared_up = None
        if self.cfg.scheme == "FA_DIST" and self.cfg.clock == "real":
            shared_up = queue.Queue()
        for dev in self.devices:
            server_end, device_end = channel_pair(uplink=shared_up)
            worker = DeviceWorker(dev, self.cfg, self.plugin, self.profiles,
                                  self.store, self.gauge, channel=device_end)
            thread = threading.Thread(target=worker.run_loop,
                                      name=f"device-{dev.device_id}", daemon=True)
            self._server_channels.append(server_end)
            self._workers.append(worker)
            self._threads.append(thread)
            thread.start()

    def _stop_workers(self) -> None:
        for ch in self._server_channels:
            ch.send(encode_shutdown())
        for t in self._threads:
            t.join(timeout=30)
        for ch in self._server_channels:
            ch.close()
        self._workers, self._threads, self._server_channels = [], [], []

    def _receive(self, device_id: int) -> Message:
        msg = decode_message(self._server_channels[device_id].receive())
        if msg.kind == KIND_ERROR:
            raise DeviceFailureError(
                f"device {msg.device_id} failed:\n{msg.error}")
        return msg

    # -- per-round pieces --

    def _fit_all(self, round_num: int) -> tuple[dict[int, WorkloadFit | None] | None, float]:
        if self.cfg.scheduling not in ("full-history", "time-window"):
            return None, 0.0
        if round_num <= self.cfg.warmup_rounds:
            return None, 0.0
        window = (self.cfg.time_window if self.cfg.scheduling == "time-window"
                  else "all-history")
        t0 = time.perf_counter()
        fits: dict[int, WorkloadFit | None] = {}
        for k in range(self.cfg.num_devices):
            try:
                fits[k] = fit_device(self.history, k, window, round_num)
            except InsufficientDataError:
                fits[k] = None
        return fits, time.perf_counter() - t0

    def _expected_reported(self, round_num: int, device: DeviceModel,
                           client_id: int) -> float:
        base = virtual_task_seconds(device, self.profiles[client_id].sample_count,
                                    self.cfg.seed, round_num, client_id)
        return report_time(base, device, round_num, self.cfg.total_rounds)

    def _run_batch_round(self, round_num: int, plan: RoundPlan,
                         ledger: CostLedger) -> list[DevicePartial]:
        """SD_DIST / PARROT: one assignment and one report per device."""
        k = self.cfg.num_devices
        for dev in range(k):
            self._server_channels[dev].send(
                encode_assignment(round_num, plan.assignments[dev], self.global_bundle))
            ledger.add_downlink()
        reports: dict[int, Message] = {}
        for dev in range(k):
            msg = self._receive(dev)
            reports[msg.device_id] = msg
        # All K reports are in hand before any folding starts.
        partials = []
        for dev in range(k):
            msg = reports[dev]
            avg_b, spec_b = partial_byte_roles(msg.partial)
            ledger.add_uplink(avg_b, spec_b)
            partials.append(msg.partial)
            for rec in msg.timings:
                record(self.history, rec)
        return partials

    def _run_fa_round(self, round_num: int, selection: ClientSelection,
                      ledger: CostLedger) -> tuple[list[DevicePartial], dict[int, float]]:
        """Work pulling: one client per assignment; next client goes to the
        first device to free up. Virtual mode serializes collection in
        ground-truth completion order, which makes the round deterministic;
        real mode takes reports in actual completion order."""
        k = self.cfg.num_devices
        pending = list(selection.selected)
        idx = 0
        virtual = self.cfg.clock == "virtual"
        clocks = {dev: 0.0 for dev in range(k)}
        busy: dict[int, float] = {}
        partials: list[DevicePartial] = []

        def assign(dev: int) -> None:
            nonlocal idx
            m = pending[idx]
            idx += 1
            self._server_channels[dev].send(
                encode_assignment(round_num, [m], self.global_bundle))
            ledger.add_downlink()
            busy[dev] = clocks[dev] + (
                self._expected_reported(round_num, self.devices[dev], m)
                if virtual else 0.0)

        for dev in range(min(k, len(pending))):
            assign(dev)
        while busy:
            if virtual:
                dev = min(busy, key=lambda d: (busy[d], d))
                msg = self._receive(dev)
            else:
                # Shared uplink queue: whichever device reports first.
                msg = self._receive(0)
                dev = msg.device_id
            avg_b, spec_b = partial_byte_roles(msg.partial)
            ledger.add_uplink(avg_b, spec_b)
            partials.append(msg.partial)
            for rec in msg.timings:
                record(self.history, rec)
            if virtual:
                clocks[dev] = busy[dev]
            else:
                clocks[dev] += sum(rec.reported_seconds for rec in msg.timings)
            del busy[dev]
            if idx < len(pending):
                assign(dev)
        return partials, clocks

    def run_round(self, round_num: int) -> RoundOutcome:
        wall0 = time.perf_counter()
        selection = select_clients(self.cfg, round_num)
        sizes = {m: self.profiles[m].sample_count for m in selection.selected}
        fits, fit_seconds = self._fit_all(round_num)

        t0 = time.perf_counter()
        if self.cfg.scheme in ("SP", "SD_DIST"):
            plan = uniform_division(round_num, selection, self.cfg.num_devices)
        elif self.cfg.scheme == "PARROT":
            plan = schedule(round_num, selection, fits, sizes, self.cfg)
        else:  # FA_DIST: assignment is dynamic; keep a placeholder plan
            plan = RoundPlan(round=round_num, assignments={}, predicted_loads={},
                             mode="work-pulling")
        schedule_seconds = time.perf_counter() - t0

        ledger = CostLedger(round=round_num, scheme=self.cfg.scheme)
        if self.cfg.scheme == "SP":
            worker = DeviceWorker(self.devices[0], self.cfg, self.plugin,
                                  self.profiles, self.store, self.gauge)
            partial, timings = worker.execute_clients(
                self.global_bundle, plan.assignments[0], round_num)
            for rec in timings:
                record(self.history, rec)
            partials = [partial]
        elif self.cfg.scheme == "FA_DIST":
            partials, _ = self._run_fa_round(round_num, selection, ledger)
        else:
            partials = self._run_batch_round(round_num, plan, ledger)

        agg = global_fold(partials)
        new_global = server_update(self.plugin, self.global_bundle, agg)
        self.global_bundle = new_global

        loads = {dev: 0.0 for dev in range(self.cfg.num_devices)}
        for rec in self.history.round_records(round_num):
            loads[rec.device_id] += rec.reported_seconds
        makespan_s = max(loads.values()) if loads else 0.0
        sim_seconds = makespan_s + self.cfg.trip_overhead_seconds * (
            ledger.trips_up + ledger.trips_down)

        est_err = float("nan")
        if fits is not None and plan.mode == MODE_GREEDY:
            est_err = estimation_error(self.history, fits, round_num)

        accuracy = loss = float("nan")
        if self.eval_data is not None and (
                round_num % self.eval_every == 0
                or round_num == self.cfg.total_rounds - 1):
            accuracy, loss = evaluate(new_global.model(), self.eval_data)

        ledger.peak_live_model_replicas = self.gauge.peak
        if self.store is not None:
            ledger.state_bytes_disk = self.store.stats().bytes_on_disk

        outcome = RoundOutcome(
            round=round_num, scheme=self.cfg.scheme, scheduling_mode=plan.mode,
            simulated_round_seconds=sim_seconds,
            wall_seconds=time.perf_counter() - wall0,
            device_loads=loads, costs=ledger, accuracy=accuracy, loss=loss,
            estimation_error=est_err, fit_seconds=fit_seconds,
            schedule_seconds=schedule_seconds, new_global=new_global)
        if self.results_path is not None:
            append_results(self.results_path, outcome)
        return outcome

    def run(self, rounds: int | None = None) -> list[RoundOutcome]:
        remaining = self.cfg.total_rounds - self.next_round
        count = remaining if rounds is None else min(rounds, remaining)
        outcomes: list[RoundOutcome] = []
        distributed = self.cfg.scheme != "SP"
        if distributed:
            self._start_workers()
        try:
            for _ in range(count):
                outcomes.append(self.run_round(self.next_round))
                self.next_round += 1
        finally:
            if distributed:
                self._stop_workers()
        return outcomes
