import csv
import hashlib
import json
import subprocess
import sys

import pytest

from sononlab.cli import main
from sononlab.config import parse_config, parse_flag_value
from sononlab.errors import ConfigError

FAST = {
    "field-scan": ["--radii", "5,10,20"],
    "pilot-wave": ["--trials", "200", "--t-final", "2.0"],
    "kuramoto": ["--trials", "10", "--angles", "90,180"],
    "bell": ["--trials", "2000"],
    "audit": [],
}
DATA_FILES = {
    "field-scan": ["field_scan.csv"],
    "pilot-wave": ["trajectories.csv", "histogram.csv"],
    "kuramoto": ["sweep.csv", "summary.csv"],
    "bell": ["chsh.csv"],
    "audit": [f"{p}/audit.json" for p in ("aspect1982", "salart2008", "tittel1998", "weihs1998")],
}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# --- parse_config ------------------------------------------------------------------

def test_minimal_file_fills_defaults():
    cfg = parse_config(None, {"subcommand": "bell", "model": "shared_phase"})
    assert cfg.subcommand == "bell" and cfg.seed == 0
    assert cfg.params.trials == 100_000
    assert cfg.params.settings_deg == (0.0, 45.0, 22.5, 67.5)


def test_flag_overrides_file():
    cfg = parse_config("bell", {"subcommand": "bell", "seed": 7}, {"seed": 42})
    assert cfg.seed == 42
    cfg = parse_config("bell", {"seed": 7}, {"seed": None})
    assert cfg.seed == 7


@pytest.mark.parametrize("sub, values, key", [
    ("kuramoto", {"angles": [90, 200]}, "angles"),
    ("bell", {"modle": "shared_phase"}, "modle"),
    ("bell", {"trials": "many"}, "trials"),
    ("field-scan", {"k_r": -1.0}, "k_r"),
    ("field-scan", {"trials": 10}, "trials"),
    ("pilot-wave", {"scenario": "triple_slit"}, "scenario"),
    ("bell", {"seed": -1}, "seed"),
    ("audit", {"subcommand": "bell"}, "subcommand"),
])
def test_config_errors_name_the_key(sub, values, key):
    with pytest.raises(ConfigError) as err:
        parse_config(sub, values)
    assert err.value.key == key
    assert str(err.value).startswith(key)


def test_flag_value_parsing():
    assert parse_flag_value("3") == 3
    assert parse_flag_value("1.5") == 1.5
    assert parse_flag_value("true") is True
    assert parse_flag_value("[1, 2]") == [1, 2]
    assert parse_flag_value("90,120.5") == [90, 120.5]
    assert parse_flag_value("shared_phase") == "shared_phase"


# --- run ---------------------------------------------------------------------------

@pytest.mark.parametrize("sub", list(FAST))
def test_subcommand_outputs_and_manifest(sub, tmp_path):
    out = tmp_path / sub
    assert main([sub, "--out", str(out)] + FAST[sub]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["files"]) == set(DATA_FILES[sub])
    for rel, entry in manifest["files"].items():
        assert sha(out / rel) == entry["sha256"]
    assert manifest["config"]["subcommand"] == sub
    assert manifest["config"]["seed"] == 0
    assert "units" in manifest
    for rel in DATA_FILES[sub]:
        if rel.endswith(".csv"):
            header = read_csv(out / rel)[0]
            assert header and all(header)
            assert rel in manifest["units"]


@pytest.mark.parametrize("sub", list(FAST))
def test_rerun_is_byte_identical(sub, tmp_path):
    args = [sub, "--seed", "5"] + FAST[sub]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for rel in DATA_FILES[sub]:
        assert sha(tmp_path / "a" / rel) == sha(tmp_path / "b" / rel)


def test_seed_changes_stochastic_output(tmp_path):
    base = ["bell", "--trials", "2000"]
    main(base + ["--seed", "1", "--out", str(tmp_path / "a")])
    main(base + ["--seed", "2", "--out", str(tmp_path / "b")])
    assert sha(tmp_path / "a/chsh.csv") != sha(tmp_path / "b/chsh.csv")


def test_csv_columns(tmp_path):
    main(["field-scan", "--out", str(tmp_path / "f"), "--radii", "10,20,40"])
    rows = read_csv(tmp_path / "f/field_scan.csv")
    assert rows[0] == ["r", "re_xi", "im_xi", "abs_xi", "chi_far", "rel_dev"]
    dev = [float(r[5]) for r in rows[1:]]
    assert dev[0] > dev[1] > dev[2]

    main(["pilot-wave", "--out", str(tmp_path / "p"), "--trials", "100", "--t-final", "1.0"])
    assert read_csv(tmp_path / "p/trajectories.csv")[0] == ["traj_id", "t", "x"]
    hist = read_csv(tmp_path / "p/histogram.csv")
    assert hist[0] == ["bin_center", "count", "psi2"]
    assert sum(int(r[1]) for r in hist[1:]) == 100
    manifest = json.loads((tmp_path / "p/manifest.json").read_text())
    assert {"scenario", "seed", "dt", "grid", "abort_count"} <= set(manifest)

    main(["kuramoto", "--out", str(tmp_path / "k"), "--trials", "4", "--angles", "60,180"])
    assert read_csv(tmp_path / "k/sweep.csv")[0] == ["angle_deg", "trial", "final_r",
                                                    "cluster_count"]
    assert read_csv(tmp_path / "k/summary.csv")[0] == [
        "angle_deg", "mean_r", "std_r", "p_1_clusters", "p_2_clusters", "p_3_clusters"]

    main(["bell", "--out", str(tmp_path / "b"), "--trials", "500"])
    chsh_rows = read_csv(tmp_path / "b/chsh.csv")
    assert chsh_rows[0] == ["setting_pair", "E", "stderr"]
    manifest = json.loads((tmp_path / "b/manifest.json").read_text())
    assert manifest["convention"].startswith("photon polarisation")
    assert {"model", "seed", "trials"} <= set(manifest)


def test_config_file_and_tetrahedron(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"subcommand": "kuramoto", "mode": "tetrahedron",
                               "trials": 6, "seed": 3}))
    assert main(["kuramoto", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    manifest = json.loads((tmp_path / "o/manifest.json").read_text())
    assert manifest["config"]["seed"] == 3 and manifest["config"]["mode"] == "tetrahedron"
    assert read_csv(tmp_path / "o/summary.csv")[1][0] == "tetrahedron"


def test_audit_files_per_preset(tmp_path):
    assert main(["audit", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "aspect1982/audit.json").read_text())
    assert report["d_m"] == 0.0 and report["classification"] == "chi_loophole_open"
    assert main(["audit", "--out", str(tmp_path / "x"), "--presets", "weihs1998"]) == 0
    assert (tmp_path / "x/weihs1998/audit.json").exists()


# --- exit codes -------------------------------------------------------------------------

def test_exit_code_config(tmp_path, capsys):
    assert main(["kuramoto", "--angles", "90,200", "--out", str(tmp_path)]) == 2
    assert "angles" in capsys.readouterr().err
    assert main(["bell", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"subcommand": "bell", "colour": "red"}')
    assert main(["bell", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "colour" in capsys.readouterr().err


def test_exit_code_contract(tmp_path, capsys):
    code = main(["bell", "--model", "quantum_oracle", "--out", str(tmp_path)])
    assert code == 2
    assert "communication channel" in capsys.readouterr().err


def test_exit_code_runtime_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["audit", "--out", str(blocker / "sub")]) == 3


def test_exit_code_runtime_numeric(tmp_path, capsys):
    # a radius on the source ring is a singular geometry
    assert main(["field-scan", "--radii", "1.0", "--out", str(tmp_path)]) == 3
    assert "ring" in capsys.readouterr().err


def test_exit_code_analysis(tmp_path, monkeypatch):
    from sononlab import pilot

    monkeypatch.setattr(pilot, "default_velocity_cap", lambda grid: 0.0)
    code = main(["pilot-wave", "--scenario", "gaussian_free", "--trials", "100",
                 "--t-final", "0.1", "--out", str(tmp_path)])
    assert code == 4
    assert not (tmp_path / "manifest.json").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sononlab", "audit", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "manifest.json").exists()
