import json
import os

import numpy as np
import pytest

from xmodal.cli import main
from xmodal.config import PRESETS, RunConfig, load_config, parse_config_text
from xmodal.data import load_dataset
from xmodal.exceptions import ConfigError, ParseError
from xmodal.model import load_checkpoint

TINY = """# small run for tests
num_identities = 6
dim = 8
per_id_visible = 8
per_id_infrared = 8
epochs_stage1 = 2
epochs_stage2 = 2
ids_per_batch = 4
instances_per_id = 4
hidden_dim = 16
emb_dim = 8
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def _run(*argv):
    return main([str(a) for a in argv])


# --- config ----------------------------------------------------------------------

def test_defaults_and_presets():
    cfg = RunConfig()
    assert (cfg.lam, cfg.k, cfg.tau, cfg.gamma, cfg.alpha_cncr) == (25.0, 10, 1.0, 0.25, 0.3)
    desk = RunConfig.from_preset("desk")
    for key, value in PRESETS["desk"].items():
        assert getattr(desk, key) == value
    with pytest.raises(ConfigError):
        RunConfig.from_preset("huge")


def test_round_trip(tmp_path):
    cfg = RunConfig.from_preset("desk", seed=7, tau=float("inf"), data_dir="somewhere")
    path = tmp_path / "echo.cfg"
    cfg.save(path)
    assert load_config(path) == cfg


def test_unknown_and_duplicate_keys_named():
    with pytest.raises(ConfigError, match="bogus"):
        parse_config_text("bogus = 1\n")
    with pytest.raises(ConfigError, match="seed"):
        parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(ParseError) as exc:
        parse_config_text("seed = 1\n\nk = ten\n")
    assert exc.value.line == 3
    with pytest.raises(ParseError):
        parse_config_text("just words\n")


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        RunConfig(gamma=2.0)
    with pytest.raises(ConfigError):
        load_config(None, missing_key=1)
    with pytest.raises(ConfigError):
        load_config("/nonexistent/file.cfg")


def test_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("preset = desk\nepochs_stage1 = 3\nseed = 4\n")
    cfg = load_config(path, seed=9)
    assert (cfg.preset, cfg.epochs_stage1, cfg.epochs_stage2, cfg.seed) == ("desk", 3, 10, 9)
    assert load_config(path, preset="paper").epochs_stage2 == 20


# --- generate ------------------------------------------------------------------------

def test_generate_writes_files_deterministically(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("generate", "--config", tiny_config, "--seed", 3, "--out", a) == 0
    assert _run("generate", "--config", tiny_config, "--seed", 3, "--out", b) == 0
    for name in ("visible.txt", "infrared.txt", "config.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len(load_dataset(a / "visible.txt")) == 48
    assert load_config(a / "config.txt").seed == 3


def test_generate_unknown_key_fails(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("frobnicate = 1\n")
    assert _run("generate", "--config", path, "--out", tmp_path / "o") != 0
    assert "frobnicate" in capsys.readouterr().err


# --- train / evaluate / report ---------------------------------------------------------

@pytest.fixture
def trained(tmp_path, tiny_config):
    data, run = tmp_path / "data", tmp_path / "run"
    assert _run("generate", "--config", tiny_config, "--out", data) == 0
    assert _run("train", "--config", tiny_config, "--data", data, "--out", run, "--export-plans") == 0
    return data, run


def test_train_outputs(trained):
    _, run = trained
    lines = (run / "log.csv").read_text().splitlines()
    assert lines[0].startswith("# started ")
    assert lines[1] == "epoch,stage,loss_total,loss_cv,loss_cr,loss_r,clean_frac_v,clean_frac_r,assign_acc_if_gt"
    stages = [row.split(",")[1] for row in lines[2:]]
    assert stages == ["1", "1", "2", "2"]
    assert all(len(row.split(",")) == 9 for row in lines[2:])
    load_checkpoint(run / "checkpoint_stage1.txt")
    load_checkpoint(run / "checkpoint_stage2.txt")
    hist = (run / "histograms" / "scores_epoch002.csv").read_text().splitlines()
    assert hist[0] == "bin_low,bin_high,count" and sum(int(r.split(",")[2]) for r in hist[1:]) == 48
    plan = np.loadtxt(run / "plans" / "plan_r_from_v_epoch001.csv", delimiter=",")
    assert plan.shape == (48, 6) and abs(plan.sum() - 1) < 1e-9


def test_train_stage1_only(tmp_path, tiny_config):
    data, run = tmp_path / "data", tmp_path / "run"
    _run("generate", "--config", tiny_config, "--out", data)
    assert _run("train", "--config", tiny_config, "--data", data, "--out", run, "--stage1-only") == 0
    rows = (run / "log.csv").read_text().splitlines()[2:]
    assert rows and all(r.split(",")[1] == "1" for r in rows)
    assert not (run / "checkpoint_stage2.txt").exists()


def test_train_missing_dataset_names_path(tmp_path, tiny_config, capsys):
    missing = tmp_path / "nowhere"
    assert _run("train", "--config", tiny_config, "--data", missing, "--out", tmp_path / "run") != 0
    assert str(missing / "visible.txt") in capsys.readouterr().err


def test_evaluate_both_directions(trained, tmp_path):
    data, run = trained
    out = tmp_path / "eval"
    assert _run("evaluate", "--data", data, "--checkpoint", run / "checkpoint_stage2.txt", "--out", out) == 0
    for direction in ("v2r", "r2v"):
        report = json.loads((out / f"report_{direction}.json").read_text())
        assert list(report) == ["r1", "r5", "r10", "r20", "map", "minp", "num_queries", "direction"]
        assert report["direction"] == direction and report["num_queries"] == 48
        assert (out / f"cmc_{direction}.csv").read_text().startswith("rank,cmc\n")


def test_evaluate_single_direction_and_missing_checkpoint(trained, tmp_path):
    data, run = trained
    out = tmp_path / "eval"
    assert _run("evaluate", "--data", data, "--checkpoint", run / "checkpoint_stage1.txt", "--out", out,
                "--direction", "r2v") == 0
    assert sorted(os.listdir(out)) == ["cmc_r2v.csv", "report_r2v.json"]
    assert _run("evaluate", "--data", data, "--checkpoint", run / "nope.txt", "--out", out) != 0


def test_evaluate_matchless_fails(trained, tmp_path):
    data, run = trained
    # drop every id from the infrared file so no visible query has a match
    lines = (data / "infrared.txt").read_text().splitlines()
    n, d = int(lines[0].split()[0]), int(lines[0].split()[1])
    body = [" ".join(row.split()[:d] + ["99"]) for row in lines[1:1 + n]]
    (data / "infrared.txt").write_text("\n".join([lines[0]] + body) + "\n")
    assert _run("evaluate", "--data", data, "--checkpoint", run / "checkpoint_stage2.txt",
                "--out", tmp_path / "e", "--direction", "v2r") != 0


def test_report_summary(trained):
    data, run = trained
    assert _run("report", "--data", data, "--run", run) == 0
    rows = (run / "summary.csv").read_text().splitlines()
    assert rows[0] == "checkpoint,r1,r5,r10,r20,map,minp,num_queries,direction"
    assert [r.split(",")[0] for r in rows[1:]] == ["stage1", "stage1", "stage2", "stage2"]


# --- selftest --------------------------------------------------------------------------

def test_selftest_passes(capsys):
    assert _run("selftest") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 6 and "selftest passed" in out


def test_selftest_catches_sabotaged_gradient(capsys):
    assert _run("selftest", "--debug-sabotage-gradient") != 0
    out = capsys.readouterr().out
    assert "FAIL grad_check" in out
