import json
import subprocess
import sys

import pytest

from safr.cli import SUBCOMMANDS, build_parser, dispatch, read_config_file, UsageError

TINY = ["--E", "8", "--d-ff", "16", "--M", "2", "--epochs", "2", "--batch-size", "32"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, toy_tsvs):
    root = tmp_path_factory.mktemp("cli")
    train, dev, test = (toy_tsvs[k] for k in ("train", "dev", "test"))
    assert dispatch(["ingest", "--train-tsv", str(train), "--dev-tsv", str(dev),
                     "--test-tsv", str(test), "--min-freq", "1", "--max-len", "24",
                     "--out", str(root / "ingest")]) == 0
    data = root / "ingest" / "dataset.bin"
    assert dispatch(["train", "--data", str(data), "--lambda-imp", "0.1",
                     "--lambda-inter", "0.1", *TINY, "--out", str(root / "train")]) == 0
    return root, data, root / "train" / "best.ck"


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_ingest_outputs(workspace):
    root, data, _ = workspace
    m = manifest(root / "ingest")
    assert m["command"] == "ingest"
    assert m["results"]["counts"] == {"train": 160, "dev": 40, "test": 60}
    assert len(m["input_sha256"]) == 3
    assert (root / "ingest" / "effective.cfg").exists()


def test_train_outputs(workspace):
    root, data, ck = workspace
    m = manifest(root / "train")
    assert ck.exists() and (root / "train" / "train_log.tsv").exists()
    assert str(data) in m["input_sha256"]
    assert set(m["seeds"]) >= {"train", "mask", "dropout"}
    header = (root / "train" / "train_log.tsv").read_text().splitlines()[0]
    assert header.split("\t") == ["step", "l_ce", "l_imp", "l_inter", "total", "dev_acc"]


@pytest.mark.parametrize("cmd,extra,artifact", [
    ("eval", [], "eval.tsv"),
    ("srs", ["--k", "30", "--random-draws", "2"], "srs.tsv"),
    ("sensitivity", ["--ks", "10,40,70", "--random-draws", "1"], "sensitivity.tsv"),
    ("capacity-report", [], "capacity_report.tsv"),
    ("viz", ["--cross-layer", "true"], "test0_fc1_graph.svg"),
])
def test_eval_commands(workspace, tmp_path, cmd, extra, artifact):
    _, _, ck = workspace
    out = tmp_path / cmd
    # dataset path comes from the checkpoint
    assert dispatch([cmd, "--ckpt", str(ck), *extra, "--out", str(out)]) == 0
    assert (out / artifact).exists()
    assert str(ck) in manifest(out)["input_sha256"]


def test_viz_cross_layer_count(workspace, tmp_path):
    _, _, ck = workspace
    assert dispatch(["viz", "--ckpt", str(ck), "--cross-layer", "yes", "--out", str(tmp_path)]) == 0
    # the fc1 capacity and interference panels are shared with the cross-layer set
    assert len(list(tmp_path.glob("*.svg"))) == 1 + 10


def test_sensitivity_tsv_rows(workspace, tmp_path):
    _, _, ck = workspace
    dispatch(["sensitivity", "--ckpt", str(ck), "--ks", "10,40,70", "--out", str(tmp_path)])
    assert len((tmp_path / "sensitivity.tsv").read_text().splitlines()) == 4


def test_sweep(workspace, tmp_path):
    _, data, _ = workspace
    assert dispatch(["sweep", "--data", str(data), *TINY, "--epochs", "1",
                     "--cells", "0:0,0.1:0.1", "--random-draws", "1",
                     "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "sweep.tsv").read_text().splitlines()
    assert len(lines) == 3 and all(l.endswith("\tok") for l in lines[1:])
    assert len(list((tmp_path / "checkpoints").iterdir())) == 2


def test_grad_check(tmp_path):
    assert dispatch(["grad-check", "--out", str(tmp_path)]) == 0
    assert manifest(tmp_path)["results"]["passed"] is True


def test_rerun_from_effective_config_is_bit_identical(workspace, tmp_path):
    root, _, _ = workspace
    cfg = root / "train" / "effective.cfg"
    assert dispatch(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    for name in ("best.ck", "train_log.tsv"):
        assert (tmp_path / name).read_bytes() == (root / "train" / name).read_bytes()


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("# comment\nE = 8\nd_ff=32 # inline\nM = 2\nmax_len = 5\nstep_size = 1e-5\n")
    assert dispatch(["grad-check", "--config", str(cfg), "--M", "1",
                     "--out", str(tmp_path / "o")]) == 0
    conf = manifest(tmp_path / "o")["config"]
    assert conf["M"] == 1 and conf["d_ff"] == 32


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SAFR_OUT_DIR", str(tmp_path / "envout"))
    assert dispatch(["grad-check"]) == 0
    assert (tmp_path / "envout" / "manifest.json").exists()


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["train", "--no-such-flag"],
    ["train", "--epochs", "many"],
    ["viz", "--cross-layer", "maybe"],
    ["train"],  # no dataset
    ["srs"],  # no checkpoint
])
def test_usage_errors(argv, tmp_path):
    assert dispatch(argv + (["--out", str(tmp_path)] if len(argv) == 1 and argv[0] in SUBCOMMANDS else [])) == 1


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lambda_imp = 0.1\nlearning_rate = 3\n")
    with pytest.raises(UsageError, match="learning_rate"):
        read_config_file(cfg)
    assert dispatch(["train", "--config", str(cfg)]) == 1


def test_runtime_failure_exit_2(tmp_path, workspace):
    _, data, _ = workspace
    missing = tmp_path / "nope.ck"
    assert dispatch(["eval", "--ckpt", str(missing), "--data", str(data),
                     "--out", str(tmp_path / "o")]) == 2
    assert "error" in manifest(tmp_path / "o")["results"]
    bad = tmp_path / "bad.tsv"
    bad.write_text("7\tlabel out of range\n")
    assert dispatch(["ingest", "--train-tsv", str(bad), "--out", str(tmp_path / "o2")]) == 2


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help(cmd, capsys):
    assert dispatch([cmd, "--help"]) == 0
    text = capsys.readouterr().out
    assert "--out" in text and "default:" in text


def test_every_flag_shows_default():
    parser = build_parser()
    for action in parser._subparsers._group_actions[0].choices.values():
        for a in action._actions:
            if a.option_strings and a.dest not in ("help",):
                assert "default" in a.help, a.dest


def test_console_script(tmp_path):
    r = subprocess.run([sys.executable, "-m", "safr.cli", "bogus"], capture_output=True,
                       text=True)
    assert r.returncode == 1 and "error" in r.stderr
