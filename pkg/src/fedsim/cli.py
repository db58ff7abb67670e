"""Command-line front end: run one experiment from a YAML spec, sweep a
cartesian grid of overrides with paired seeds, or summarize a directory of
results into plot-ready tables.

Exit codes: 0 success, 1 spec/validation error (the diagnostic names the
offending key), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .core import ConfigError, SimConfig
from .data import PartitionSpec, SyntheticDataset, generate, partition
from .engine import DeviceModel, RoundOutcome, SimulationEngine, make_device_models
from .statestore import StateStore
from .trainer import PLUGINS, AlgorithmPlugin, make_plugin


class SpecError(ValueError):
    """Bad experiment spec; message names the offending key."""


_TOP_KEYS = {"simulation", "dataset", "partition", "algorithm", "devices",
             "output", "sweep"}
_DATASET_KEYS = {"n_samples", "n_features", "n_classes", "separation",
                 "noise_scale", "eval_samples"}
_PARTITION_KEYS = {"label_skew", "quantity_skew", "min_samples_per_client"}
_DEVICE_KEYS = {"hetero", "dynamic", "t_true", "b_true", "noise"}
_OUTPUT_KEYS = {"dir", "eval_every"}
_SWEEP_KEYS = {"seeds", "axes"}


@dataclass
class ExperimentSpec:
    sim: SimConfig
    dataset: dict[str, Any]
    partition: PartitionSpec
    algorithm: str
    hyper: dict[str, Any]
    devices: dict[str, Any]
    out_dir: Path
    eval_every: int
    sweep_seeds: list[int]
    sweep_axes: dict[str, list[Any]]
    source_text: str


def _as_mapping(obj: Any, path: str) -> dict:
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise SpecError(f"{path}: expected a mapping, got {type(obj).__name__}")
    return obj


def _check_keys(section: Mapping, allowed: set[str], path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise SpecError(f"unknown key {path}.{unknown[0]}" if path
                        else f"unknown key {unknown[0]}")


def spec_from_mapping(mapping: Mapping, source_text: str = "",
                      default_out: str = "fedsim-runs") -> ExperimentSpec:
    mapping = _as_mapping(mapping, "spec")
    _check_keys(mapping, _TOP_KEYS, "")

    sim_section = _as_mapping(mapping.get("simulation"), "simulation")
    try:
        sim = SimConfig.from_mapping(sim_section)
    except ConfigError as exc:
        raise SpecError(f"simulation: {exc}") from exc

    ds = dict(_as_mapping(mapping.get("dataset"), "dataset"))
    _check_keys(ds, _DATASET_KEYS, "dataset")
    ds.setdefault("n_samples", 50 * sim.total_clients)
    ds.setdefault("n_features", 8)
    ds.setdefault("n_classes", 5)
    ds.setdefault("separation", 3.0)
    ds.setdefault("noise_scale", 1.0)
    ds.setdefault("eval_samples", 0)

    part_section = _as_mapping(mapping.get("partition"), "partition")
    _check_keys(part_section, _PARTITION_KEYS, "partition")
    try:
        part = PartitionSpec(**part_section)
    except (TypeError, ValueError) as exc:
        raise SpecError(f"partition: {exc}") from exc

    algo = dict(_as_mapping(mapping.get("algorithm"), "algorithm"))
    name = str(algo.pop("name", "fedavg"))
    if name not in PLUGINS:
        raise SpecError(f"algorithm.name: unknown algorithm {name!r}; "
                        f"known: {sorted(PLUGINS)}")

    dev = dict(_as_mapping(mapping.get("devices"), "devices"))
    _check_keys(dev, _DEVICE_KEYS, "devices")

    out = _as_mapping(mapping.get("output"), "output")
    _check_keys(out, _OUTPUT_KEYS, "output")
    out_dir = Path(out.get("dir", default_out))
    eval_every = int(out.get("eval_every", 1))

    sweep = _as_mapping(mapping.get("sweep"), "sweep")
    _check_keys(sweep, _SWEEP_KEYS, "sweep")
    seeds = [int(s) for s in sweep.get("seeds", [])]
    axes_raw = _as_mapping(sweep.get("axes"), "sweep.axes")
    axes: dict[str, list[Any]] = {}
    for key, values in axes_raw.items():
        if not isinstance(values, list) or not values:
            raise SpecError(f"sweep.axes.{key}: expected a non-empty list")
        axes[key] = list(values)

    return ExperimentSpec(sim=sim, dataset=ds, partition=part, algorithm=name,
                          hyper=algo, devices=dev, out_dir=out_dir,
                          eval_every=eval_every, sweep_seeds=seeds,
                          sweep_axes=axes, source_text=source_text)


def load_spec(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise SpecError(f"spec file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        mapping = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecError(f"{path}: not valid YAML: {exc}") from exc
    return spec_from_mapping(mapping, source_text=text,
                             default_out=str(path.with_suffix("")) + "-out")


def set_by_path(mapping: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = mapping
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise SpecError(f"{dotted}: {key} is not a mapping")
    node[keys[-1]] = value


def build_plugin(spec: ExperimentSpec) -> AlgorithmPlugin:
    try:
        return make_plugin(spec.algorithm, **spec.hyper)
    except TypeError as exc:
        raise SpecError(f"algorithm: {exc}") from exc


def build_world(spec: ExperimentSpec):
    """(profiles, eval_dataset, plugin, device models) from a validated spec."""
    ds = generate(int(spec.dataset["n_samples"]), int(spec.dataset["n_features"]),
                  int(spec.dataset["n_classes"]), seed=spec.sim.seed,
                  separation=float(spec.dataset["separation"]),
                  noise_scale=float(spec.dataset["noise_scale"]))
    profiles = partition(ds, spec.sim.total_clients, spec.partition,
                         seed=spec.sim.seed)
    eval_ds: SyntheticDataset | None = None
    if int(spec.dataset["eval_samples"]) > 0:
        eval_ds = generate(int(spec.dataset["eval_samples"]),
                           int(spec.dataset["n_features"]),
                           int(spec.dataset["n_classes"]), seed=spec.sim.seed,
                           separation=float(spec.dataset["separation"]),
                           noise_scale=float(spec.dataset["noise_scale"]),
                           sample_set=1)
    plugin = build_plugin(spec)
    devices = make_device_models(spec.sim.num_devices, **spec.devices)
    return profiles, eval_ds, plugin, devices


def execute(spec: ExperimentSpec, out_dir: Path | None = None
            ) -> list[RoundOutcome]:
    """Run one experiment; write results.tsv, spec.yaml, and summary.txt."""
    out = Path(out_dir) if out_dir is not None else spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    profiles, eval_ds, plugin, devices = build_world(spec)
    store = StateStore(out / "state") if plugin.is_stateful else None
    engine = SimulationEngine(spec.sim, plugin, profiles, devices, store=store,
                              eval_data=eval_ds, results_path=out / "results.tsv",
                              eval_every=spec.eval_every)
    outcomes = engine.run()
    if spec.source_text:
        (out / "spec.yaml").write_text(spec.source_text, encoding="utf-8")
    _write_summary(out / "summary.txt", spec, outcomes)
    return outcomes


def _nanmean(values: Sequence[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else float("nan")


def _write_summary(path: Path, spec: ExperimentSpec,
                   outcomes: list[RoundOutcome]) -> None:
    last = outcomes[-1]
    lines = [
        f"scheme: {spec.sim.scheme}",
        f"scheduling: {spec.sim.scheduling}",
        f"algorithm: {spec.algorithm}",
        f"rounds: {len(outcomes)}",
        f"final_accuracy: {last.accuracy:.6g}",
        f"final_loss: {last.loss:.6g}",
        f"mean_sim_round_seconds: {_nanmean([o.simulated_round_seconds for o in outcomes]):.6g}",
        f"mean_wall_seconds: {_nanmean([o.wall_seconds for o in outcomes]):.6g}",
        f"total_trips_up: {sum(o.costs.trips_up for o in outcomes)}",
        f"total_trips_down: {sum(o.costs.trips_down for o in outcomes)}",
        f"total_bytes_avg_params: {sum(o.costs.bytes_avg_params for o in outcomes)}",
        f"total_bytes_special_params: {sum(o.costs.bytes_special_params for o in outcomes)}",
        f"peak_live_model_replicas: {max(o.costs.peak_live_model_replicas for o in outcomes)}",
        f"state_bytes_disk: {last.costs.state_bytes_disk}",
        f"mean_estimation_error: {_nanmean([o.estimation_error for o in outcomes]):.6g}",
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_run(spec_path: str, seed: int | None = None, out: str | None = None,
            clock: str | None = None) -> int:
    spec = _spec_with_overrides(spec_path, seed, out, clock)
    outcomes = execute(spec)
    print(f"run complete: {len(outcomes)} rounds -> {spec.out_dir}")
    return 0


def _spec_with_overrides(spec_path: str, seed: int | None, out: str | None,
                         clock: str | None) -> ExperimentSpec:
    spec = load_spec(spec_path)
    mapping = yaml.safe_load(spec.source_text) or {}
    changed = False
    if seed is not None:
        set_by_path(mapping, "simulation.seed", int(seed))
        changed = True
    if clock is not None:
        set_by_path(mapping, "simulation.clock", clock)
        changed = True
    if out is not None:
        set_by_path(mapping, "output.dir", out)
        changed = True
    if changed:
        spec = spec_from_mapping(mapping, source_text=spec.source_text,
                                 default_out=str(spec.out_dir))
        if out is not None:
            spec.out_dir = Path(out)
    return spec


def _arm_label(index: int, overrides: dict[str, Any]) -> str:
    if not overrides:
        return f"arm-{index:02d}"
    parts = []
    for key, value in overrides.items():
        tail = key.split(".")[-1]
        parts.append(f"{tail}={str(value).replace('/', '-')}")
    return f"arm-{index:02d}-" + "-".join(parts)


def cmd_sweep(spec_path: str, seed: int | None = None, out: str | None = None,
              clock: str | None = None) -> int:
    base = _spec_with_overrides(spec_path, seed, out, clock)
    root = base.out_dir
    root.mkdir(parents=True, exist_ok=True)
    if base.source_text:
        (root / "spec.yaml").write_text(base.source_text, encoding="utf-8")

    seeds = base.sweep_seeds or [base.sim.seed]
    axis_keys = sorted(base.sweep_axes)
    combos: list[dict[str, Any]] = [{}]
    for key in axis_keys:
        combos = [dict(c, **{key: v}) for c in combos for v in base.sweep_axes[key]]

    base_mapping = yaml.safe_load(base.source_text) or {}
    summary_rows: list[dict[str, Any]] = []
    for idx, overrides in enumerate(combos):
        label = _arm_label(idx, overrides)
        for s in seeds:
            mapping = copy.deepcopy(base_mapping)
            mapping.pop("sweep", None)
            for key, value in overrides.items():
                set_by_path(mapping, key, value)
            set_by_path(mapping, "simulation.seed", int(s))
            arm_spec = spec_from_mapping(mapping, source_text=yaml.safe_dump(mapping))
            arm_dir = root / label / f"seed-{s}"
            outcomes = execute(arm_spec, out_dir=arm_dir)
            row: dict[str, Any] = {"arm": label, "seed": s}
            row.update({k: overrides[k] for k in axis_keys} if overrides else {})
            row["final_accuracy"] = outcomes[-1].accuracy
            row["final_loss"] = outcomes[-1].loss
            row["mean_sim_seconds"] = _nanmean(
                [o.simulated_round_seconds for o in outcomes])
            row["mean_makespan"] = _nanmean(
                [max(o.device_loads.values()) if o.device_loads else float("nan")
                 for o in outcomes])
            row["total_trips_up"] = sum(o.costs.trips_up for o in outcomes)
            row["total_bytes_avg"] = sum(o.costs.bytes_avg_params for o in outcomes)
            row["mean_est_error"] = _nanmean(
                [o.estimation_error for o in outcomes])
            summary_rows.append(row)

    cols = ["arm", "seed", *axis_keys, "final_accuracy", "final_loss",
            "mean_sim_seconds", "mean_makespan", "total_trips_up",
            "total_bytes_avg", "mean_est_error"]
    lines = ["\t".join(cols)]
    for row in summary_rows:
        lines.append("\t".join(_fmt(row.get(c, "")) for c in cols))
    (root / "sweep_summary.tsv").write_text("\n".join(lines) + "\n",
                                            encoding="utf-8")
    print(f"sweep complete: {len(summary_rows)} runs -> {root}")
    return 0


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


# --- report -----------------------------------------------------------------

def _read_results(path: Path) -> list[dict[str, str]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        return []
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:]]


def _run_label(rows: list[dict[str, str]]) -> str:
    """A results file's scheduling label: the last round's plan mode (greedy
    runs start with warm-up rounds; the tail mode identifies the policy)."""
    return rows[-1]["scheduling"]


def cmd_report(results_dir: str) -> int:
    root = Path(results_dir)
    if not root.is_dir():
        raise SpecError(f"not a directory: {root}")
    files = sorted(root.rglob("results*.tsv"))
    runs = [(_read_results(f), f) for f in files]
    runs = [(rows, f) for rows, f in runs if rows]
    if not runs:
        print("no results found")
        return 0

    def makespan(row: dict[str, str]) -> float:
        loads = [float(x) for x in row["device_loads"].split(",") if x]
        return max(loads) if loads else float("nan")

    def k_of(row: dict[str, str]) -> int:
        return len(row["device_loads"].split(","))

    # Round time vs device count.
    by_scheme_k: dict[tuple[str, int], list[float]] = {}
    for rows, _ in runs:
        for row in rows:
            by_scheme_k.setdefault((row["scheme"], k_of(row)), []).append(
                float(row["sim_seconds"]))
    time_lines = ["scheme\tdevices\tmean_sim_seconds\trounds"]
    for (scheme, k), vals in sorted(by_scheme_k.items()):
        time_lines.append(f"{scheme}\t{k}\t{np.mean(vals):.9g}\t{len(vals)}")

    # Estimation error vs round, grouped by run label.
    err_by: dict[str, dict[int, list[float]]] = {}
    for rows, _ in runs:
        label = _run_label(rows)
        for row in rows:
            err = float(row["est_error"])
            if not math.isnan(err):
                err_by.setdefault(label, {}).setdefault(int(row["round"]), []).append(err)
    err_lines = ["label\tround\tmean_est_error"]
    for label in sorted(err_by):
        for rnd in sorted(err_by[label]):
            err_lines.append(f"{label}\t{rnd}\t{np.mean(err_by[label][rnd]):.9g}")

    # Scheduled vs unscheduled makespan: pair labels within a (scheme, K) group.
    pair_lines = ["scheme\tdevices\tround\t" "label_a\tmakespan_a\tlabel_b\tmakespan_b\tratio_b_over_a"]
    groups: dict[tuple[str, int], dict[str, dict[int, list[float]]]] = {}
    for rows, _ in runs:
        label = _run_label(rows)
        for row in rows:
            key = (row["scheme"], k_of(row))
            groups.setdefault(key, {}).setdefault(label, {}).setdefault(
                int(row["round"]), []).append(makespan(row))
    for (scheme, k), by_label in sorted(groups.items()):
        labels = sorted(by_label)
        if len(labels) != 2:
            continue
        a, b = labels
        for rnd in sorted(set(by_label[a]) & set(by_label[b])):
            ma = float(np.mean(by_label[a][rnd]))
            mb = float(np.mean(by_label[b][rnd]))
            ratio = mb / ma if ma > 0 else float("nan")
            pair_lines.append(f"{scheme}\t{k}\t{rnd}\t{a}\t{ma:.9g}\t{b}\t{mb:.9g}\t{ratio:.9g}")

    # Communication counters vs the closed forms.
    comm_lines = ["scheme\tdevices\tmean_trips_up\tmean_trips_down\t"
                  "bytes_per_uplink\tanalytic_match"]
    trips_by: dict[tuple[str, int], list[tuple[int, int, int]]] = {}
    for rows, _ in runs:
        for row in rows:
            trips_by.setdefault((row["scheme"], k_of(row)), []).append(
                (int(row["trips_up"]), int(row["trips_down"]),
                 int(row["bytes_avg"])))
    for (scheme, k), triples in sorted(trips_by.items()):
        ups = [t[0] for t in triples]
        downs = [t[1] for t in triples]
        per_trip = [b / u for u, _, b in triples if u > 0]
        if scheme == "SP":
            match = "yes" if set(ups) == {0} else "NO"
        elif scheme in ("SD_DIST", "PARROT"):
            match = "yes" if set(ups) == {k} else "NO"
        else:  # FA_DIST trips equal M_p, which the file does not carry;
            # constancy across rounds is the checkable part.
            match = "yes" if len(set(ups)) == 1 else "NO"
        comm_lines.append(f"{scheme}\t{k}\t{np.mean(ups):.9g}\t{np.mean(downs):.9g}\t"
                          f"{np.mean(per_trip) if per_trip else 0:.9g}\t{match}")

    for name, lines in [("round_time_vs_devices.tsv", time_lines),
                        ("estimation_error_vs_round.tsv", err_lines),
                        ("makespan_pairs.tsv", pair_lines),
                        ("comm_vs_analytic.tsv", comm_lines)]:
        (root / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"--- {name} ---")
        print("\n".join(lines))
    return 0


# --- entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # map usage errors onto the validation exit code
        raise SpecError(message)


def main(argv: Sequence[str] | None = None) -> int:
    parser = _Parser(prog="fedsim",
                     description="Desk-scale federated-learning simulation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("spec", help="YAML experiment spec")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--clock", choices=["virtual", "real"], default=None)
    p = sub.add_parser("report")
    p.add_argument("results_dir")

    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return cmd_run(args.spec, args.seed, args.out, args.clock)
        if args.command == "sweep":
            return cmd_sweep(args.spec, args.seed, args.out, args.clock)
        return cmd_report(args.results_dir)
    except (SpecError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report and signal distinctly
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
