import os
import subprocess
import sys

import numpy as np
import pytest

from pcl.cli import main
from pcl.data import load_dataset
from pcl.encoder import load_checkpoint
from pcl.experiments import ABLATION_VARIANTS
from pcl.metrics_log import read_log

TINY = """[run]
seed = 3

[data]
n_coarse = 2
fine_per_coarse = 2
samples_per_fine = 30
d_in = 6
test_fraction = 0.25

[net]
hidden = 32
output_dim = 4

[augment]
sigma_aug = 0.3

[train]
K = 4, 8
epochs = 4
warmup = 1
r = 16
batch_size = 32
lr = 0.05
lr_milestones = 3
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "c.cfg").write_text(TINY)
    return tmp_path


def run(workdir, *argv):
    return main([argv[0], "--config", str(workdir / "c.cfg"), *argv[1:]])


@pytest.fixture
def trained(workdir):
    assert run(workdir, "gen-data", "--out", str(workdir / "d.pcld"), "--test-out", str(workdir / "t.pcld")) == 0
    assert run(workdir, "train", "--data", str(workdir / "d.pcld"), "--out", str(workdir / "run")) == 0
    return workdir


def test_gen_data_roundtrip(workdir):
    out = workdir / "d.pcld"
    assert run(workdir, "gen-data", "--out", str(out), "--csv", str(workdir / "d.csv")) == 0
    ds = load_dataset(out)
    assert len(ds) == 120
    first = out.read_bytes()
    from pcl.data import save_dataset
    save_dataset(workdir / "again.pcld", ds)
    assert (workdir / "again.pcld").read_bytes() == first
    lines = (workdir / "d.csv").read_text().splitlines()
    assert len(lines) == 120 and len(lines[0].split(",")) == 8


def test_train_writes_one_record_per_epoch(trained):
    run_dir = trained / "run"
    records = read_log(run_dir / "metrics.log")
    assert [r["epoch"] for r in records] == [0, 1, 2, 3]
    assert records[0]["proto_loss_0"] == 0.0
    assert "F_before_1" in records[1]
    assert len((run_dir / "timing.log").read_text().splitlines()) == 4
    assert load_checkpoint(run_dir / "final.pclk").spec.input_dim == 6
    assert (run_dir / "final.pclp").exists()
    assert "[train]" in (run_dir / "config.cfg").read_text()


def test_seed_override_is_reproducible(workdir):
    data = str(workdir / "d.pcld")
    assert run(workdir, "gen-data", "--out", data) == 0
    for name in ("a", "b"):
        assert run(workdir, "train", "--data", data, "--out", str(workdir / name), "--seed", "11") == 0
    assert run(workdir, "train", "--data", data, "--out", str(workdir / "c"), "--seed", "12") == 0
    for f in ("metrics.log", "final.pclk", "final.pclp", "ckpt_0004.pclk"):
        assert (workdir / "a" / f).read_bytes() == (workdir / "b" / f).read_bytes()
    assert (workdir / "a" / "metrics.log").read_bytes() != (workdir / "c" / "metrics.log").read_bytes()


def test_eval_reports(trained, capsys):
    assert run(trained, "eval", "--data", str(trained / "d.pcld"), "--test", str(trained / "t.pcld"),
               "--checkpoint", str(trained / "run" / "final.pclk"), "--protos", str(trained / "run" / "final.pclp"),
               "--hist", str(trained / "hist")) == 0
    out = capsys.readouterr().out
    metrics = {line.split()[0] for line in out.splitlines()}
    for name in ("knn_fine", "ami_fine", "mi_instance_fine", "probe_fine", "cluster_size_std", "mi_proto_fine"):
        assert f"metric={name}" in metrics
    rows = (trained / "hist_1.txt").read_text().splitlines()
    assert sum(int(r.split(",")[2]) for r in rows) == 8


def test_cluster_and_mi(trained, capsys):
    ckpt = str(trained / "run" / "final.pclk")
    out_dir = trained / "parts"
    out_dir.mkdir()
    assert run(trained, "cluster", "--data", str(trained / "d.pcld"), "--checkpoint", ckpt, "--out", str(out_dir)) == 0
    lines = (out_dir / "partition_1_k8.txt").read_text().splitlines()
    # 8 of each fine class went to the held-out file
    assert len(lines) == 88 and lines[0].startswith("0,")
    assert (out_dir / "partition_0_k4.pclt").exists()
    assert run(trained, "mi", "--data", str(trained / "d.pcld"), "--checkpoint", ckpt, "--labels", "coarse") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("metric=mi_instance") and len(out) == 3


def test_ablate_table(trained):
    table = trained / "ablate.txt"
    assert run(trained, "ablate", "--data", str(trained / "d.pcld"), "--test", str(trained / "t.pcld"),
               "--out", str(table)) == 0
    text = table.read_text()
    for name, _ in ABLATION_VARIANTS:
        assert name in text
    assert len([line for line in text.splitlines() if line.startswith(("instance", "proto"))]) == 5


def test_bad_config_is_line_precise(workdir, capsys):
    bad = workdir / "bad.cfg"
    bad.write_text("[train]\nfoo = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(workdir / "x.pcld")]) == 2
    err = capsys.readouterr().err
    assert f"{bad}:2: unknown key 'foo' in [train]" in err
    assert not (workdir / "x.pcld").exists()


def test_missing_input(workdir, capsys):
    assert run(workdir, "train", "--data", str(workdir / "nope.pcld"), "--out", str(workdir / "r")) == 2
    assert "dataset not found" in capsys.readouterr().err


def test_bad_override(workdir, capsys):
    assert run(workdir, "gen-data", "--out", str(workdir / "d.pcld"), "--nonsense", "1") == 2
    assert "unknown override --nonsense" in capsys.readouterr().err


def test_thread_limit_env(workdir, monkeypatch, capsys):
    monkeypatch.setenv("PCL_THREADS", "0")
    assert run(workdir, "gen-data", "--out", str(workdir / "d.pcld")) == 2
    monkeypatch.setenv("PCL_THREADS", "1")
    assert run(workdir, "gen-data", "--out", str(workdir / "d.pcld")) == 0


def test_module_entry_point(workdir):
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    proc = subprocess.run([sys.executable, "-m", "pcl", "gen-data", "--config", str(workdir / "c.cfg"),
                           "--out", str(workdir / "m.pcld")], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert np.asarray(load_dataset(workdir / "m.pcld").inputs).shape == (120, 6)
