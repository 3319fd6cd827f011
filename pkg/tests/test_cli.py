import json
import subprocess
import sys

import pytest

from flam import cli

TINY = {
    "schema": {"types": ["shape", "color", "pattern"], "class_counts": [4, 4, 4]},
    "data": {"dim": 16, "instances": 150},
    "embedder": {"epochs": 2, "k": 8},
    "manipulator": {"epochs": 2, "hidden": 16, "proxy_size": 32},
    "evaluate": {"ks": [1, 5, 10], "probe_steps": 50},
}
STAGES = ["gen-data", "train-embedders", "train-manipulator", "evaluate"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def pipeline(out, config, capsys, extra=()):
    for stage in STAGES:
        code, _, err = run([stage, "--config", config, "--out", out, *extra], capsys)
        assert code == 0, err


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("run")
    for stage in STAGES:
        assert cli.main([stage, "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


def artifact_hashes(out):
    stages = json.loads((out / "manifest.json").read_text())["stages"]
    return {stage: entry["artifacts"] for stage, entry in stages.items()}


def test_layout(tiny_run):
    for rel in ("data/train.flamfeat", "data/query.flamfeat", "data/gallery.flamfeat",
                "embedders/color.flamemb", "embedders/color.flamemb.log.json",
                "manipulators/M_OS_Adv/shape.flamgan", "manipulators/M_OS_Adv/shape.flamgan.log.json",
                "report.json", "report.txt", "manifest.json"):
        assert (tiny_run / rel).exists(), rel
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    assert set(manifest["stages"]) == set(STAGES)
    assert manifest["stages"]["train-manipulator"]["variants"] == ["M/OS/Adv"]
    assert manifest["config"]["data"]["dim"] == 16
    assert all(e["wall_clock_seconds"] >= 0 for e in manifest["stages"].values())


def test_every_stage_reproduces_hashes(tiny_run, tiny_config, tmp_path, capsys):
    pipeline(tmp_path, tiny_config, capsys)
    assert artifact_hashes(tmp_path) == artifact_hashes(tiny_run)


def test_seed_changes_data(tiny_config, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    run(["gen-data", "--config", tiny_config, "--out", a], capsys)
    run(["gen-data", "--config", tiny_config, "--out", b, "--seed", 5], capsys)
    assert artifact_hashes(a) != artifact_hashes(b)


def test_manipulate_output(tiny_run, tiny_config, capsys):
    code, out, _ = run(["manipulate", "--config", tiny_config, "--out", tiny_run,
                        "--attr", "color", "--class", 2, "--k", 5, "--record", 3], capsys)
    assert code == 0
    rows = [line.split(",") for line in out.strip().splitlines()]
    assert [int(r[0]) for r in rows] == [1, 2, 3, 4, 5]
    sims = [float(r[2]) for r in rows]
    assert sims == sorted(sims, reverse=True)
    assert all(r[1].isdigit() for r in rows)
    again = run(["manipulate", "--config", tiny_config, "--out", tiny_run,
                 "--attr", "color", "--class", 2, "--k", 5, "--record", 3], capsys)[1]
    assert again == out


def test_manipulate_k_larger_than_gallery_warns(tiny_run, tiny_config, capsys):
    code, out, err = run(["manipulate", "--config", tiny_config, "--out", tiny_run,
                          "--attr", "shape", "--class", 1, "--k", 100000], capsys)
    assert code == 0 and "exceeds gallery size" in err
    assert len(out.strip().splitlines()) < 100000


@pytest.mark.parametrize("args", [
    ["--attr", "color", "--class", 4],
    ["--attr", "color", "--class", -1],
    ["--attr", "size", "--class", 0],
    ["--attr", "color", "--class", 0, "--k", 0],
    ["--attr", "color", "--class", 0, "--record", 10**6],
    ["--attr", "color", "--class", 0, "--variant", "M/OS/Adv", "--manipulator",
     "manipulators/M_OS_Adv/shape.flamgan"],
])
def test_manipulate_usage_errors(tiny_run, tiny_config, capsys, args):
    args = [str(tiny_run / a) if str(a).startswith("manipulators/") else a for a in args]
    code, _, err = run(["manipulate", "--config", tiny_config, "--out", tiny_run, *args], capsys)
    assert code == 2 and "error" in err


def test_evaluate_prints_tables(tiny_run, tiny_config, capsys):
    code, out, _ = run(["evaluate", "--config", tiny_config, "--out", tiny_run], capsys)
    assert code == 0 and "R@1" in out and "T@10" in out
    report = json.loads((tiny_run / "report.json").read_text())
    assert report["fir_check"]["index_unchanged"] and report["fir_check"]["r_at_k_unchanged"]


def test_report_writes_figures(tiny_run, tiny_config, capsys):
    code, out, err = run(["report", "--config", tiny_config, "--out", tiny_run], capsys)
    assert code == 0
    assert out.startswith("variant,attribute,k,t_at_k,unreachable")
    figures = tiny_run / "figures"
    for name in ("topk.png", "ablation_t10.png", "probe_delta.png", "training_curves.png",
                 "t_at_k.csv", "r_at_k.csv", "probe_delta.csv", "convergence_proxy.csv"):
        assert (figures / name).stat().st_size > 0, name
    assert (figures / "topk.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_missing_inputs_exit_3(tmp_path, tiny_config, capsys):
    for stage in ("train-embedders", "train-manipulator", "evaluate", "report"):
        code, _, err = run([stage, "--config", tiny_config, "--out", tmp_path], capsys)
        assert code == 3, stage
        assert "missing" in err


def test_corrupt_checkpoint_exit_3(tiny_run, tiny_config, tmp_path, capsys):
    bad = tmp_path / "bad.flamgan"
    bad.write_bytes(b"FLAMGAN\0" + b"\x07\0\0\0")
    code, _, err = run(["manipulate", "--config", tiny_config, "--out", tiny_run,
                        "--attr", "color", "--class", 0, "--manipulator", bad], capsys)
    assert code == 3 and "version" in err


@pytest.mark.parametrize("extra", [
    ["--set", "data.nope=1"],
    ["--set", "manipulator.matching=\"Q\""],
    ["--set", "data.split=[0.5, 0.5]"],
    ["--set", "novalue"],
    ["--config", "/nonexistent/config.json"],
])
def test_config_errors_exit_2(tmp_path, capsys, extra):
    code, _, err = run(["gen-data", "--out", tmp_path, *extra], capsys)
    assert code == 2 and "error" in err


def test_unknown_variant_exit_2(tiny_run, tiny_config, capsys):
    code, _, _ = run(["train-manipulator", "--config", tiny_config, "--out", tiny_run,
                      "--variant", "Z/Z/Z"], capsys)
    assert code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_4(tiny_config, tmp_path, capsys):
    for stage in ("gen-data", "train-embedders"):
        assert run([stage, "--config", tiny_config, "--out", tmp_path], capsys)[0] == 0
    code, _, err = run(["train-manipulator", "--config", tiny_config, "--out", tmp_path,
                        "--set", "manipulator.lr=1e300", "--set", "manipulator.precision=\"float64\""], capsys)
    assert code == 4 and "epoch" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "flam", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("flam ")
    proc = subprocess.run([sys.executable, "-m", "flam", "manipulate"], capture_output=True, text=True)
    assert proc.returncode == 2
