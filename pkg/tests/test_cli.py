"""CLI tests: spec validation with key-naming errors, run/sweep/report
commands, exit codes, and output-directory contents."""

from __future__ import annotations

import math
from pathlib import Path

import pytest

from fedsim.cli import (
    ExperimentSpec,
    SpecError,
    cmd_report,
    load_spec,
    main,
    spec_from_mapping,
)

FULL_SPEC = """\
simulation:
  total_clients: 12
  concurrent_clients: 6
  num_devices: 2
  total_rounds: 3
  seed: 5
  scheme: PARROT
  scheduling: time-window
dataset:
  n_samples: 360
  n_features: 4
  n_classes: 3
  eval_samples: 90
algorithm:
  name: fedavg
  lr: 0.1
devices:
  t_true: 0.0001
output:
  dir: "{out}"
"""


def write_spec(tmp_path: Path, text: str, name: str = "exp.yaml") -> Path:
    path = tmp_path / name
    path.write_text(text.format(out=tmp_path / "out"), encoding="utf-8")
    return path


def test_load_spec_full(tmp_path):
    spec = load_spec(write_spec(tmp_path, FULL_SPEC))
    assert spec.sim.total_clients == 12
    assert spec.sim.scheme == "PARROT"
    assert spec.dataset["n_samples"] == 360
    assert spec.dataset["separation"] == 3.0  # default filled in
    assert spec.algorithm == "fedavg"
    assert spec.hyper == {"lr": 0.1}
    assert spec.out_dir == tmp_path / "out"


def test_defaults_for_missing_sections(tmp_path):
    path = tmp_path / "mini.yaml"
    path.write_text("simulation:\n  total_clients: 8\n  concurrent_clients: 4\n"
                    "  num_devices: 2\n  total_rounds: 2\n", encoding="utf-8")
    spec = load_spec(path)
    assert spec.dataset["n_samples"] == 400
    assert spec.algorithm == "fedavg"
    assert spec.out_dir == tmp_path / "mini-out"
    assert spec.sweep_seeds == []


@pytest.mark.parametrize("mutate, needle", [
    ({"bogus_section": {}}, "unknown key bogus_section"),
    ({"dataset": {"n_sample": 10}}, "unknown key dataset.n_sample"),
    ({"partition": {"alpha": 0.1}}, "unknown key partition.alpha"),
    ({"devices": {"eta": 0.5}}, "unknown key devices.eta"),
    ({"output": {"folder": "x"}}, "unknown key output.folder"),
    ({"sweep": {"grid": {}}}, "unknown key sweep.grid"),
    ({"simulation": {"total_clients": 8, "concurrent_clients": 4,
                     "num_devices": 2, "total_rounds": 2, "max_rounds": 9}},
     "max_rounds"),
    ({"algorithm": {"name": "fedsgd"}}, "unknown algorithm 'fedsgd'"),
])
def test_spec_errors_name_the_key(mutate, needle):
    base = {"simulation": {"total_clients": 8, "concurrent_clients": 4,
                           "num_devices": 2, "total_rounds": 2}}
    base.update(mutate)
    with pytest.raises(SpecError, match=needle):
        spec_from_mapping(base)


def test_bad_hyperparameter_is_validation_error():
    spec = spec_from_mapping(
        {"simulation": {"total_clients": 8, "concurrent_clients": 4,
                        "num_devices": 2, "total_rounds": 2},
         "algorithm": {"name": "fedavg", "momentum": 0.9}})
    from fedsim.cli import build_plugin
    with pytest.raises(SpecError, match="momentum"):
        build_plugin(spec)


def test_sweep_axes_validation():
    base = {"simulation": {"total_clients": 8, "concurrent_clients": 4,
                           "num_devices": 2, "total_rounds": 2},
            "sweep": {"axes": {"simulation.seed": []}}}
    with pytest.raises(SpecError, match="non-empty list"):
        spec_from_mapping(base)


def test_cmd_run_outputs(tmp_path, capsys):
    spec_path = write_spec(tmp_path, FULL_SPEC)
    assert main(["run", str(spec_path)]) == 0
    out = tmp_path / "out"
    results = (out / "results.tsv").read_text().splitlines()
    assert results[0].startswith("round\tscheme")
    assert len(results) == 4
    # Spec copy is verbatim.
    assert (out / "spec.yaml").read_text() == spec_path.read_text()
    summary = (out / "summary.txt").read_text()
    assert "final_accuracy:" in summary
    assert "total_trips_up: 6" in summary  # 3 rounds x K=2
    assert "run complete" in capsys.readouterr().out


def test_cli_overrides(tmp_path):
    spec_path = write_spec(tmp_path, FULL_SPEC)
    alt = tmp_path / "alt"
    assert main(["run", str(spec_path), "--seed", "9", "--out", str(alt)]) == 0
    assert (alt / "results.tsv").exists()
    base_rows = (tmp_path / "out" / "results.tsv").read_text() \
        if (tmp_path / "out" / "results.tsv").exists() else None
    assert base_rows is None  # --out redirected everything


def test_exit_codes(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.yaml")]) == 1
    assert "not found" in capsys.readouterr().err

    bad = tmp_path / "bad.yaml"
    bad.write_text("simulation:\n  total_clients: 8\n  concurrent_clients: 4\n"
                   "  num_devices: 2\n  total_rounds: 2\nmystery: 1\n")
    assert main(["run", str(bad)]) == 1
    assert "mystery" in capsys.readouterr().err

    assert main(["report", str(tmp_path / "nowhere")]) == 1
    capsys.readouterr()

    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty)]) == 0
    assert "no results" in capsys.readouterr().out

    with pytest.raises(SystemExit):  # --help still exits normally
        main(["--help"])
    capsys.readouterr()
    assert main(["frobnicate"]) == 1  # usage errors map to validation


SWEEP_SPEC = """\
simulation:
  total_clients: 24
  concurrent_clients: 16
  num_devices: 2
  total_rounds: 2
  seed: 3
  scheme: PARROT
  scheduling: none-uniform
dataset:
  n_samples: 480
  n_features: 4
  n_classes: 3
devices:
  t_true: 0.0001
output:
  dir: "{out}"
sweep:
  seeds: [3, 4]
  axes:
    simulation.num_devices: [2, 4, 8]
"""


def test_sweep_paired_seeds_and_monotone_round_time(tmp_path):
    spec_path = write_spec(tmp_path, SWEEP_SPEC, name="sweep.yaml")
    assert main(["sweep", str(spec_path)]) == 0
    root = tmp_path / "out"
    lines = (root / "sweep_summary.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    rows = [dict(zip(header, ln.split("\t"))) for ln in lines[1:]]
    assert len(rows) == 6  # 3 arms x 2 seeds
    # Paired seeds: every arm ran the same seed set.
    by_arm: dict[str, set[str]] = {}
    for row in rows:
        by_arm.setdefault(row["arm"], set()).add(row["seed"])
    assert all(seeds == {"3", "4"} for seeds in by_arm.values())
    # Fixed work spread over more devices: mean round time never increases.
    mean_by_k = {}
    for row in rows:
        k = int(row["simulation.num_devices"])
        mean_by_k.setdefault(k, []).append(float(row["mean_sim_seconds"]))
    ks = sorted(mean_by_k)
    means = [sum(mean_by_k[k]) / len(mean_by_k[k]) for k in ks]
    assert ks == [2, 4, 8]
    assert means[0] > means[1] > means[2]
    # Each arm/seed run wrote its own self-describing directory.
    arm_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    assert len(arm_dirs) == 3
    assert (arm_dirs[0] / "seed-3" / "results.tsv").exists()
    assert (arm_dirs[0] / "seed-3" / "spec.yaml").exists()


REPORT_SPEC = """\
simulation:
  total_clients: 12
  concurrent_clients: 6
  num_devices: 2
  total_rounds: 4
  seed: 5
  scheme: PARROT
  scheduling: {sched}
dataset:
  n_samples: 360
  n_features: 4
  n_classes: 3
devices:
  t_true: 0.0001
  hetero: [0.0, 1.0]
output:
  dir: "{out}"
"""


def test_cmd_report_tables(tmp_path, capsys):
    for sched, sub in [("none-uniform", "u"), ("time-window", "g")]:
        path = tmp_path / f"{sub}.yaml"
        path.write_text(REPORT_SPEC.format(sched=sched, out=tmp_path / "runs" / sub),
                        encoding="utf-8")
        assert main(["run", str(path)]) == 0
    assert cmd_report(str(tmp_path / "runs")) == 0
    out = capsys.readouterr().out
    assert "round_time_vs_devices.tsv" in out

    root = tmp_path / "runs"
    times = (root / "round_time_vs_devices.tsv").read_text().splitlines()
    assert times[0] == "scheme\tdevices\tmean_sim_seconds\trounds"
    assert any(ln.startswith("PARROT\t2\t") for ln in times[1:])

    pairs = (root / "makespan_pairs.tsv").read_text().splitlines()
    assert len(pairs) >= 2  # header + at least one paired round
    header = pairs[0].split("\t")
    row = dict(zip(header, pairs[1].split("\t")))
    assert {row["label_a"], row["label_b"]} == {"greedy", "warmup-uniform"}
    assert float(row["ratio_b_over_a"]) > 0

    err_tbl = (root / "estimation_error_vs_round.tsv").read_text().splitlines()
    assert any(ln.startswith("greedy\t") for ln in err_tbl[1:])

    comm = (root / "comm_vs_analytic.tsv").read_text().splitlines()
    parrot_rows = [ln for ln in comm[1:] if ln.startswith("PARROT")]
    assert parrot_rows and all(ln.endswith("yes") for ln in parrot_rows)
