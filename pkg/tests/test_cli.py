import json
import shutil
import subprocess
import sys

import pytest

from histmatch.cli import EXIT_COMPUTE, EXIT_DIAGNOSTIC, EXIT_INPUT, EXIT_OK, main
from histmatch.config import sirs_demo_config


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    d = tmp_path_factory.mktemp("demo")
    assert main(["demo", "wave0", "--out-dir", str(d), "--seed", "2"]) == EXIT_OK
    assert main(["train", str(d / "train.csv"), "--config", str(d / "config.json"),
                 "--out-dir", str(d)]) == EXIT_OK
    return d


def _cfg(tmp_path, **changes):
    cfg = sirs_demo_config()
    cfg.update(changes)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_demo_files(demo):
    for name in ("config.json", "train.csv", "validation.csv", "emulators.json", "summary.txt"):
        assert (demo / name).exists()
    doc = json.loads((demo / "emulators.json").read_text())
    assert list(doc["expectation"]) == ["nS", "nI", "nR"]
    assert "Active variables" in (demo / "summary.txt").read_text()


def test_train_is_byte_deterministic(demo, tmp_path):
    assert main(["train", str(demo / "train.csv"), "--config", str(demo / "config.json"),
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "emulators.json").read_bytes() == (demo / "emulators.json").read_bytes()


def test_emulator_json_round_trip(demo):
    from histmatch.cli import dump_json, load_emulators

    text = (demo / "emulators.json").read_text()
    assert dump_json(load_emulators(demo / "emulators.json").to_dict()) == text


def test_validate_exit_codes(demo, tmp_path):
    code = main(["validate", str(demo / "emulators.json"), str(demo / "validation.csv"),
                 "--config", str(demo / "config.json"), "--out-dir", str(tmp_path)])
    report = json.loads((tmp_path / "diagnostics.json").read_text())
    assert code == (EXIT_OK if not report["failing_rows"] else EXIT_DIAGNOSTIC)
    assert (tmp_path / "nI_classification.csv").exists()
    code = main(["validate", str(demo / "emulators.json"), str(demo / "validation.csv"),
                 "--no-targets", "--out-dir", str(tmp_path / "nt")])
    assert code in (EXIT_OK, EXIT_DIAGNOSTIC)
    assert not (tmp_path / "nt" / "nI_classification.csv").exists()


def test_validate_missing_column(demo, tmp_path):
    lines = (demo / "validation.csv").read_text().splitlines()
    cut = "\n".join(",".join(l.split(",")[:-1]) for l in lines) + "\n"
    path = tmp_path / "cut.csv"
    path.write_text(cut)
    assert main(["validate", str(demo / "emulators.json"), str(path), "--out-dir", str(tmp_path)]) == EXIT_INPUT


def test_train_unknown_output(demo, tmp_path):
    cfg = _cfg(tmp_path, outputs=["nS", "nI", "nR", "nX"])
    assert main(["train", str(demo / "train.csv"), "--config", str(cfg), "--out-dir", str(tmp_path)]) == EXIT_INPUT


def test_train_invalid_config(demo, tmp_path):
    cfg = _cfg(tmp_path, targets={"nQ": [0, 1]})
    assert main(["train", str(demo / "train.csv"), "--config", str(cfg)]) == EXIT_INPUT


def test_train_failure_is_compute_error(demo, tmp_path):
    lines = (demo / "train.csv").read_text().splitlines()
    small = tmp_path / "small.csv"
    small.write_text("\n".join(lines[:4]) + "\n")
    code = main(["train", str(small), "--config", str(demo / "config.json"), "--out-dir", str(tmp_path)])
    assert code == EXIT_COMPUTE


def test_propose_deterministic(demo, tmp_path):
    args = ["propose", str(demo / "emulators.json"), "--config", str(demo / "config.json"), "-n", "30"]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "design.csv").read_bytes()
    assert a == (tmp_path / "b" / "design.csv").read_bytes()
    assert len(a.decode().splitlines()) == 31


def test_propose_empty_region(demo, tmp_path):
    cfg = _cfg(tmp_path, targets={"nS": [580, 651], "nI": {"val": 5000, "sigma": 1}, "nR": [199, 221]})
    code = main(["propose", str(demo / "emulators.json"), "--config", str(cfg), "-n", "10",
                 "--out-dir", str(tmp_path)])
    assert code == EXIT_DIAGNOSTIC
    assert json.loads((tmp_path / "proposal.json").read_text())["status"] == "empty"


def test_slice_grid_size(demo, tmp_path):
    code = main(["analyze", "slice", str(demo / "emulators.json"), "--pair", "aSI", "aIR", "--ppd", "40",
                 "--output", "nS", "--out-dir", str(tmp_path), "--svg"])
    assert code == EXIT_OK
    lines = (tmp_path / "slice.csv").read_text().splitlines()
    assert lines[0] == "aSI,aIR,aSR,nS"
    assert len(lines) == 1 + 1600
    assert (tmp_path / "slice_nS.svg").read_text().startswith("<svg")


def test_slice_errors(demo, tmp_path):
    base = ["analyze", "slice", str(demo / "emulators.json"), "--pair", "aSI", "aIR", "--out-dir", str(tmp_path)]
    assert main(base + ["--plot-type", "nimp"]) == EXIT_INPUT
    assert main(base + ["--plot-type", "contour"]) == EXIT_INPUT
    assert main(base + ["--fixed", "aSR"]) == EXIT_INPUT
    assert main(base + ["--plot-type", "nimp", "--config", str(demo / "config.json")]) == EXIT_OK


def test_space_removed_rows(demo, tmp_path):
    code = main(["analyze", "space-removed", str(demo / "emulators.json"), "--config", str(demo / "config.json"),
                 "--cutoff", "3", "--ppd", "10", "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    lines = (tmp_path / "space_removed.csv").read_text().splitlines()
    assert lines[0] == "multiplier,cutoff,removed"
    assert len(lines) == 1 + 5
    assert [l.split(",")[0] for l in lines[1:]] == ["0.8", "0.9", "1.0", "1.1", "1.2"]


def test_lattice_output(demo, tmp_path):
    code = main(["analyze", "lattice", str(demo / "emulators.json"), "--config", str(demo / "config.json"),
                 "--ppd", "5", "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    lines = (tmp_path / "lattice.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * 25 * 2 + 3 * 5


def test_bad_arguments_exit_2(tmp_path):
    assert main(["analyze", "contour", "x.json"]) == EXIT_INPUT
    assert main(["train", str(tmp_path / "none.csv"), "--config", str(tmp_path / "none.json")]) == EXIT_INPUT


def test_wave_directory_and_determinism(tmp_path):
    cfg = _cfg(tmp_path, wave={"n_points": 30, "n_train": 30, "n_valid": 30})
    for name in ("a", "b"):
        assert main(["wave", "--config", str(cfg), "--out-dir", str(tmp_path / name)]) in (EXIT_OK, EXIT_DIAGNOSTIC)
    for rel in ("state.json", "wave_0/runs.csv", "wave_1/design.csv", "wave_1/runs.csv",
                "wave_1/emulators.json", "wave_1/diagnostics.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    state = json.loads((tmp_path / "a" / "state.json").read_text())
    assert state["format"] == "histmatch-state" and len(state["waves"]) == 2


def test_wave_resumes_from_state(tmp_path):
    cfg = _cfg(tmp_path, wave={"n_points": 30, "n_train": 30, "n_valid": 30})
    out = tmp_path / "run"
    main(["wave", "--config", str(cfg), "--out-dir", str(out)])
    main(["wave", "--config", str(cfg), "--out-dir", str(out)])
    state = json.loads((out / "state.json").read_text())
    assert len(state["waves"]) == 3 or state["stopped"]


def test_external_simulator(tmp_path):
    command = [sys.executable, "-m", "histmatch.cli", "demo", "simulate"]
    cfg = _cfg(tmp_path, simulator={"command": command, "batch_size": 10},
               wave={"n_points": 20, "n_train": 30, "n_valid": 20})
    out = tmp_path / "ext"
    code = main(["wave", "--config", str(cfg), "--out-dir", str(out), "--workers", "2"])
    assert code in (EXIT_OK, EXIT_DIAGNOSTIC)
    runs = (out / "wave_1" / "runs.csv").read_text().splitlines()
    assert runs[0].startswith("aSI,aIR,aSR,nS,nI,nR") and len(runs) == 21


def test_demo_simulate_stdio(tmp_path):
    exe = shutil.which("histmatch")
    cmd = [exe] if exe else [sys.executable, "-m", "histmatch.cli"]
    proc = subprocess.run(cmd + ["demo", "simulate"], input="aSI,aIR,aSR\n0.5,0.2,0.02\n",
                          capture_output=True, text=True, check=True)
    lines = proc.stdout.splitlines()
    assert lines[0] == "aSI,aIR,aSR,nS,nI,nR" and len(lines) == 2
