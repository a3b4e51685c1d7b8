import copy
import json
from pathlib import Path

import pytest

from basinlab.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def small_experiment(out_dir):
    doc = json.loads((CONFIGS / "reference.json").read_text())
    doc["sgd"]["horizon"] = 100
    doc["montecarlo"] = {"trials": 200, "epsilon_grid": [0.01, 0.001]}
    doc["output"] = {"dir": str(out_dir), "trajectory_csv": True}
    return doc


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return str(path)


BARE = {"dist1": 0.1, "r": 0.5, "L_r": 2.0, "sigma_r": 0.18, "batch_size": 1,
        "schedule": {"type": "decreasing", "a": 0.1, "beta": 0.8}, "N": 1000}


# ---------------------------------------------------------------- config errors


def test_missing_radius_is_a_config_error(tmp_path, capsys):
    doc = small_experiment(tmp_path / "out")
    del doc["landscape"]["minima_set"]["radius"]
    code = main(["simulate", "--config", write(tmp_path, doc)])
    assert code == 2
    assert "radius" in capsys.readouterr().err


def test_json_syntax_error_reports_position(tmp_path, capsys):
    code = main(["bounds", "--config", write(tmp_path, '{"dist1": 0.1,\n  "r": }')])
    assert code == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_unknown_key_rejected(tmp_path, capsys):
    doc = small_experiment(tmp_path / "out")
    doc["sgd"]["learning_rate"] = 0.1
    assert main(["simulate", "--config", write(tmp_path, doc)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_missing_section_for_command(tmp_path, capsys):
    doc = small_experiment(tmp_path / "out")
    del doc["montecarlo"]
    assert main(["simulate", "--config", write(tmp_path, doc)]) == 2
    assert "montecarlo" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["bounds", "--config", str(tmp_path / "nope.json")]) == 2


def test_x1_outside_neighborhood(tmp_path, capsys):
    doc = small_experiment(tmp_path / "out")
    doc["sgd"]["x1"] = [2.0, 0.0]
    assert main(["simulate", "--config", write(tmp_path, doc)]) == 2
    assert "outside" in capsys.readouterr().err


def test_bad_seed_and_threads(tmp_path):
    path = write(tmp_path, BARE)
    assert main(["bounds", "--config", path, "--seed", "-1"]) == 2
    assert main(["bounds", "--config", path, "--threads", "0"]) == 2


# ---------------------------------------------------------------- dry run


def test_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["simulate", "--config", write(tmp_path, small_experiment(out)), "--dry-run"])
    assert code == 0
    assert "plan:" in capsys.readouterr().out
    assert not out.exists()


# ---------------------------------------------------------------- bounds


def test_bounds_zero_step_gives_initial_ratio(tmp_path, capsys):
    doc = dict(BARE, schedule={"type": "constant", "a": 0.0})
    out = tmp_path / "b"
    assert main(["bounds", "--config", write(tmp_path, doc), "--out", str(out)]) == 0
    payload = json.loads((out / "bounds.json").read_text())
    assert payload["report"]["C_N"] == pytest.approx(0.1**2 / 0.5**2, rel=1e-14)
    assert "stability guaranteed with probability >=" in capsys.readouterr().out


def test_bounds_vacuous_line(tmp_path, capsys):
    doc = dict(BARE, dist1=0.45, sigma_r=5.0, N="inf")
    assert main(["bounds", "--config", write(tmp_path, doc)]) == 0
    assert "bound vacuous (C_N >= 1)" in capsys.readouterr().out


def test_bounds_from_full_experiment(tmp_path, capsys):
    assert main(["bounds", "--config", str(CONFIGS / "reference.json"),
                 "--out", str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    assert "C_N" in out and "max_a" in out


def test_unwritable_output_is_io_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = main(["bounds", "--config", write(tmp_path, BARE), "--out", str(blocker / "sub")])
    assert code == 3
    assert "I/O error" in capsys.readouterr().err


# ---------------------------------------------------------------- check-conditions


def test_check_conditions_flat_basin(tmp_path, capsys):
    doc = json.loads((CONFIGS / "flat_basin.json").read_text())
    doc["conditions"] = {"samples": 2000, "seed": 0, "rank_points": 20}
    doc["output"] = {"dir": str(tmp_path / "c")}
    assert main(["check-conditions", "--config", write(tmp_path, doc)]) == 0
    out = capsys.readouterr().out
    assert "WQC" in out and "✓" in out and "✗" in out
    assert (tmp_path / "c" / "conditions.json").exists()


# ---------------------------------------------------------------- simulate


def test_simulate_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    doc = small_experiment(a)
    assert main(["simulate", "--config", write(tmp_path, doc, "a.json"), "--threads", "1"]) == 0
    doc_b = copy.deepcopy(doc)
    doc_b["output"]["dir"] = str(b)
    assert main(["simulate", "--config", write(tmp_path, doc_b, "b.json"), "--threads", "3"]) == 0
    for name in ("stability.csv", "concentration.csv", "rates.csv", "trajectory.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    header = (a / "stability.csv").read_text().splitlines()[0]
    assert "config_hash=" in header and "seed=20240601" in header


def test_seed_override_changes_results(tmp_path):
    doc = small_experiment(tmp_path / "a")
    path = write(tmp_path, doc)
    assert main(["simulate", "--config", path]) == 0
    assert main(["simulate", "--config", path, "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    ta = (tmp_path / "a" / "trajectory.csv").read_text()
    tb = (tmp_path / "b" / "trajectory.csv").read_text()
    assert ta != tb and "seed=7" in tb.splitlines()[0]


def test_dominance_failure_exit_code(tmp_path, capsys):
    # an understated noise level makes the stability bound wrong on purpose
    doc = small_experiment(tmp_path / "out")
    doc["noise"]["sigma"] = 1.5
    doc["bounds"]["sigma_r"] = 1e-6
    doc["sgd"]["x1"] = [1.0, 0.0]
    doc["sgd"]["horizon"] = 300
    code = main(["simulate", "--config", write(tmp_path, doc)])
    assert code == 1
    err = capsys.readouterr().err
    assert "--seed 20240601" in err and "config hash" in err
