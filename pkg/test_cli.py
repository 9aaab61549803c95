#!/usr/bin/env python3
"""
End-to-end tests of the command-line interface and output file handling.
"""

import sys
import json

import pandas as pd
import pytest

from cli import EXIT_ERROR, EXIT_OK, build_parser, main
from experiments import CONVERGENCE_COLUMNS, SOLUTION_TRACE_COLUMNS, SWEEP_COLUMNS
from file_utils import create_backup, ensure_output_dir, file_sha256, prepare_output

SMALL_CONFIG = {
    "schema_version": 1,
    "network": {"K_R": 2, "K_U": 2, "G": 2, "F": 4, "xi": 0.5},
    "outer_loop": {"max_outer": 5, "max_inner": 20, "n_candidates": 8},
    "sweep": {"param": "xi", "grid": [0.0, 0.5], "trials": 1, "schemes": ["fcbt", "tswc"]},
    "run": {"scheme": "fcbt", "seed": 0, "seeds": [0, 1], "threads": 1},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG, indent=2), encoding="utf-8")
    return path


def test_parser_requires_a_command():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args([])
    args = parser.parse_args(["sweep", "--grid", "", "--preset", "fig4"])
    assert args.grid == "" and args.preset == "fig4"


def test_solve_writes_solution_and_trace(tmp_path, small_config, capsys):
    out = tmp_path / "out"
    code = main(["solve", "--config", str(small_config), "--scheme", "fcbt", "--seed", "0", "--out", str(out)])
    assert code == EXIT_OK
    assert "FCBT seed 0: latency" in capsys.readouterr().out

    document = json.loads((out / "solution.json").read_text(encoding="utf-8"))
    assert document["seed"] == 0
    assert document["solution"]["scheme"] == "fcbt"
    assert document["solution"]["tau_s"] == 0.0
    trace = pd.read_csv(out / "trace.csv")
    assert list(trace.columns) == SOLUTION_TRACE_COLUMNS
    assert len(trace) == document["solution"]["iterations"]


def test_solve_repeat_gives_identical_files(tmp_path, small_config):
    out = tmp_path / "out"
    argv = ["solve", "--config", str(small_config), "--seed", "3", "--out", str(out), "--no-backup"]
    main(argv)
    first = (file_sha256(out / "solution.json"), file_sha256(out / "trace.csv"))
    main(argv)
    second = (file_sha256(out / "solution.json"), file_sha256(out / "trace.csv"))
    assert first == second
    assert not list(out.glob("*.bak"))

    main(argv[:-1])
    assert len(list(out.glob("solution.json.*.bak"))) == 1


def test_bad_configuration_exits_with_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "network": {\n    "antennas": 4\n  }\n}\n', encoding="utf-8")
    code = main(["solve", "--config", str(path), "--out", str(tmp_path)])
    assert code == EXIT_ERROR
    err = capsys.readouterr().err
    assert "line 3" in err
    assert "antennas" in err


def test_empty_grid_exits_with_error(tmp_path, small_config, capsys):
    code = main(["sweep", "--config", str(small_config), "--grid", "", "--out-dir", str(tmp_path)])
    assert code == EXIT_ERROR
    assert "grid" in capsys.readouterr().err
    assert not (tmp_path / "sweep.csv").exists()


def test_unknown_scheme_exits_with_error(tmp_path, small_config):
    code = main(["solve", "--config", str(small_config), "--scheme", "mimo", "--out", str(tmp_path)])
    assert code == EXIT_ERROR


def test_sweep_writes_rows_and_summary(tmp_path, small_config, capsys):
    code = main(["sweep", "--config", str(small_config), "--out-dir", str(tmp_path), "--quiet"])
    assert code == EXIT_OK
    frame = pd.read_csv(tmp_path / "sweep.csv")
    assert list(frame.columns) == SWEEP_COLUMNS
    assert len(frame) == 2 * 2 * 1
    summary = pd.read_csv(tmp_path / "summary.csv")
    assert len(summary) == 4
    assert "mean_latency_s" in capsys.readouterr().out


def test_convergence_writes_one_group_per_seed(tmp_path, small_config):
    out = tmp_path / "conv.csv"
    code = main(["convergence", "--config", str(small_config), "--seeds", "0-2", "--out", str(out)])
    assert code == EXIT_OK
    frame = pd.read_csv(out)
    assert list(frame.columns) == CONVERGENCE_COLUMNS
    assert sorted(frame["seed"].unique()) == [0, 1, 2]
    assert frame["approx_error"].isna().all()


def test_file_utils(tmp_path):
    target = tmp_path / "a" / "b"
    assert ensure_output_dir(target) == target and target.is_dir()
    blocker = tmp_path / "file.txt"
    blocker.write_text("x", encoding="utf-8")
    with pytest.raises(ValueError):
        ensure_output_dir(blocker)

    success, backup_path = create_backup(blocker)
    assert success and backup_path.endswith(".bak")
    assert file_sha256(backup_path) == file_sha256(blocker)
    success, message = create_backup(tmp_path / "missing.txt")
    assert not success and message

    path, backup_path = prepare_output(tmp_path / "new" / "out.csv")
    assert path.parent.is_dir() and backup_path == ""


def main_tests():
    """Run the tests in this file."""
    return pytest.main([__file__, "-v"])


if __name__ == "__main__":
    sys.exit(main_tests())
