import subprocess
import sys

import numpy as np
import pytest

from nightstereo import imageio
from nightstereo.cli import EXIT_INTERNAL, EXIT_OK, EXIT_USER, run
from nightstereo.config import RunConfig
from nightstereo.model import StereoModel
from nightstereo.synth import load_dataset, oracle_channels
from nightstereo.training import save_checkpoint

PLAN = "height=64\nwidth=192\ncount=2\nseed=1\nlayer=8,random-dot,0,0,64,192\n"


@pytest.fixture(scope="module")
def oracle_setup(tmp_path_factory):
    """A synthetic dataset with exact-correspondence features and the matching hand-set checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    (root / "plan.txt").write_text(PLAN)
    assert run(["synth", "--spec", str(root / "plan.txt"), "--out", str(root / "data"), "--oracle-features"]) == 0
    C = oracle_channels(64, 192)
    cfg = RunConfig(encoder="files", height=64, width=192, dim=C)
    save_checkpoint(root / "ck", StereoModel.oracle(C), cfg)
    return root


def test_unknown_flag_and_subcommand(capsys):
    assert run(["train", "--no-such-flag"]) == EXIT_USER
    assert run(["fly"]) == EXIT_USER
    assert "usage" in capsys.readouterr().err


def test_help_and_version(capsys):
    assert run(["--version"]) == EXIT_OK
    assert run(["eval", "--help"]) == EXIT_OK
    assert "--max-depth" in capsys.readouterr().out


def test_every_config_field_has_a_flag(capsys):
    from dataclasses import fields
    run(["train", "--help"])
    text = capsys.readouterr().out
    for f in fields(RunConfig):
        if f.name != "command":
            assert f"--{f.name.replace('_', '-')}" in text


def test_synth_layout(oracle_setup, capsys):
    data = oracle_setup / "data"
    for sub in ("left", "right", "gt", "disp", "features/left", "features/right"):
        assert (data / sub).is_dir()
    assert (data / "calib.txt").exists() and (data / "manifest.txt").exists()
    assert sorted(p.name for p in (data / "left").iterdir()) == ["0000.png", "0001.png"]
    assert len(load_dataset(data)) == 2


def test_synth_stdout_table(tmp_path, capsys):
    (tmp_path / "p.txt").write_text("height=32\nwidth=64\ncount=3\nseed=2\n")
    assert run(["synth", "--spec", str(tmp_path / "p.txt"), "--out", str(tmp_path / "d")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "item\tmin_disparity\tmax_disparity\tvalid_fraction" and len(lines) == 4


def test_synth_bad_spec(tmp_path, capsys):
    (tmp_path / "p.txt").write_text("count=two\n")
    assert run(["synth", "--spec", str(tmp_path / "p.txt"), "--out", str(tmp_path / "d")]) == EXIT_USER
    assert run(["synth", "--spec", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "d")]) == EXIT_USER


def test_eval_with_oracle_checkpoint(oracle_setup, capsys):
    out = oracle_setup / "eval"
    code = run(["eval", "--dataset", str(oracle_setup / "data"), "--checkpoint", str(oracle_setup / "ck"),
                "--max-depth", "50", "--out", str(out)])
    assert code == EXIT_OK
    table = [line for line in capsys.readouterr().out.splitlines() if not line.startswith("#")]
    assert table[0].split("\t") == ["kind", "metric", "value", "bin_lo", "bin_hi", "count"]
    abs_rel = {row.split("\t")[0]: float(row.split("\t")[2]) for row in table[1:] if "\tAbsRel\t" in row
               and row.startswith(("U", "W"))}
    assert abs_rel["U"] < 0.02
    assert (out / "metrics.csv").exists() and (out / "bins.csv").exists() and (out / "manifest.txt").exists()


def test_infer_outputs(oracle_setup, capsys):
    out = oracle_setup / "infer"
    assert run(["infer", "--dataset", str(oracle_setup / "data"), "--checkpoint", str(oracle_setup / "ck"),
                "--out", str(out), "--only", "0001"]) == EXIT_OK
    pfm = imageio.read_pfm(out / "0001.pfm")
    assert pfm.shape == (64, 192)
    assert (out / "0001.pfm").read_bytes().split(b"\n")[2] == b"-1.0"
    mask = imageio.read_mask(out / "0001_mask.png")
    assert set(np.unique(mask).tolist()) <= {False, True}
    assert not (out / "0000.pfm").exists()


def test_infer_unknown_item(oracle_setup):
    assert run(["infer", "--dataset", str(oracle_setup / "data"), "--checkpoint", str(oracle_setup / "ck"),
                "--out", str(oracle_setup / "x"), "--only", "9999"]) == EXIT_USER


def test_checkpoint_config_mismatch(oracle_setup, capsys):
    code = run(["eval", "--dataset", str(oracle_setup / "data"), "--checkpoint", str(oracle_setup / "ck"),
                "--dim", "16", "--out", str(oracle_setup / "bad")])
    assert code == EXIT_USER
    assert "different model configuration" in capsys.readouterr().err


def test_missing_required_values(tmp_path):
    assert run(["train", "--out", str(tmp_path)]) == EXIT_USER
    assert run(["eval", "--dataset", str(tmp_path)]) == EXIT_USER


def test_train_small_run(tmp_path, capsys):
    (tmp_path / "p.txt").write_text("height=32\nwidth=32\ncount=2\nseed=3\n")
    run(["synth", "--spec", str(tmp_path / "p.txt"), "--out", str(tmp_path / "d")])
    capsys.readouterr()
    (tmp_path / "cfg.txt").write_text("height=32\nwidth=32\ndim=8\nhidden=4\nsteps=2\n")
    assert run(["train", "--config", str(tmp_path / "cfg.txt"), "--dataset", str(tmp_path / "d"),
                "--out", str(tmp_path / "run"), "--lr", "0.001"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("step\ttotal\tphoto\treg\tsmooth\n2\t")
    assert "lr=0.001" in (tmp_path / "run" / "manifest.txt").read_text()
    assert "dim=8" in (tmp_path / "run" / "checkpoint" / "config.txt").read_text()


def test_seed_environment_override(tmp_path, monkeypatch):
    (tmp_path / "p.txt").write_text("height=32\nwidth=32\ncount=1\nseed=3\n")
    run(["synth", "--spec", str(tmp_path / "p.txt"), "--out", str(tmp_path / "d")])
    monkeypatch.setenv("NSL_SEED", "17")
    assert run(["train", "--dataset", str(tmp_path / "d"), "--out", str(tmp_path / "run"), "--height", "32",
                "--width", "32", "--dim", "8", "--hidden", "4", "--steps", "1", "--seed", "2"]) == EXIT_OK
    assert "seed=17" in (tmp_path / "run" / "manifest.txt").read_text()


def test_internal_error_exit_code(monkeypatch):
    import nightstereo.cli as cli

    def boom(args):
        raise RuntimeError("bug")
    monkeypatch.setitem(cli.HANDLERS, "gradcheck", boom)
    assert run(["gradcheck"]) == EXIT_INTERNAL


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nightstereo.cli", "fly"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USER
