"""CLI contract: commands, exit codes, file outputs, determinism."""

import os

import numpy as np
import pytest

from m3em.cli import main

CONFIG = """
[data]
seed = 31
source_samples = 48
target_samples = 48
channels = 8
height = 4
width = 4
rgb_informative = 0,1
flow_informative = 2,3
audio_informative = 4,5
shared_region = 1,1,3,3
dir = {data}

[model]
bottleneck_ratio = 2
pyramid_levels = 1

[train]
epochs = 1
batch_size = 16
seed = 31

[output]
dir = {out}
figures = {figures}
"""


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CONFIG.format(data=tmp_path / "data", out=tmp_path / "out",
                                 figures="false"))
    return tmp_path


def read_kv(path):
    out = {}
    for line in path.read_text().splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out


def test_synth_writes_six_files_deterministically(workdir):
    assert main(["synth", "--config", "run.cfg"]) == 0
    names = sorted(os.listdir(workdir / "data"))
    assert names == [
        "source_audio.mmft", "source_flow.mmft", "source_rgb.mmft",
        "target_audio.mmft", "target_flow.mmft", "target_rgb.mmft",
    ]
    blobs = {n: (workdir / "data" / n).read_bytes() for n in names}
    assert main(["synth", "--config", "run.cfg"]) == 0
    for n in names:
        assert (workdir / "data" / n).read_bytes() == blobs[n]


def test_synth_bad_path_is_io_error(workdir, capsys):
    (workdir / "run.cfg").write_text(
        CONFIG.format(data="/proc/nope/data", out=workdir / "out", figures="false"))
    assert main(["synth", "--config", "run.cfg"]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_config_is_usage_error(workdir, capsys):
    assert main(["train", "--config", "absent.cfg"]) == 1
    assert "absent.cfg" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(workdir):
    assert main(["synth", "--config", "run.cfg", "--frobnicate"]) == 1


def test_train_without_features_names_missing_file(workdir, capsys):
    assert main(["train", "--config", "run.cfg"]) == 2
    assert "source_rgb.mmft" in capsys.readouterr().err


def test_train_eval_cycle_and_metrics_agreement(workdir):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg"]) == 0
    assert (workdir / "out" / "checkpoint.m3em").exists()
    train_kv = read_kv(workdir / "out" / "train_metrics.txt")
    assert train_kv["ablation"] == "full"
    assert "epoch_001_loss" in train_kv

    assert main(["eval", "--config", "run.cfg"]) == 0
    eval_kv = read_kv(workdir / "out" / "eval_metrics.txt")
    for head in ("verb_top1", "noun_top1", "action_top1", "disc_accuracy"):
        assert eval_kv[head] == train_kv[f"target_{head}"]


def test_train_records_ablation_override(workdir):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg", "--ablation", "baseline"]) == 0
    assert read_kv(workdir / "out" / "train_metrics.txt")["ablation"] == "baseline"


def test_train_metrics_are_byte_identical_across_reruns(workdir):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg"]) == 0
    first = {
        name: (workdir / "out" / name).read_bytes()
        for name in ("checkpoint.m3em", "train_metrics.txt", "train_metrics.json")
    }
    assert main(["train", "--config", "run.cfg"]) == 0
    for name, blob in first.items():
        assert (workdir / "out" / name).read_bytes() == blob


def test_eval_dump_consensus_grids(workdir):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg"]) == 0
    assert main(["eval", "--config", "run.cfg", "--dump-consensus"]) == 0
    cdir = workdir / "out" / "consensus"
    files = sorted(os.listdir(cdir))
    assert len(files) == 48
    grid = np.loadtxt(cdir / files[0], delimiter=",")
    assert grid.shape == (4, 4)
    levels = 1
    for name in files:
        grid = np.loadtxt(cdir / name, delimiter=",")
        assert np.all(np.abs(grid) <= levels + 1)


def test_eval_missing_checkpoint_is_io_error(workdir, capsys):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["eval", "--config", "run.cfg"]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_seed_override_changes_outputs(workdir):
    assert main(["synth", "--config", "run.cfg"]) == 0
    base = (workdir / "data" / "source_rgb.mmft").read_bytes()
    assert main(["synth", "--config", "run.cfg", "--seed", "99"]) == 0
    assert (workdir / "data" / "source_rgb.mmft").read_bytes() != base


def test_ensemble_single_checkpoint_matches_eval(workdir):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg"]) == 0
    assert main(["eval", "--config", "run.cfg"]) == 0
    ckpt = str(workdir / "out" / "checkpoint.m3em")
    assert main(["ensemble", "--config", "run.cfg", "--checkpoint", ckpt]) == 0
    eval_kv = read_kv(workdir / "out" / "eval_metrics.txt")
    ens_kv = read_kv(workdir / "out" / "ensemble_metrics.txt")
    for head in ("verb_top1", "noun_top1", "action_top1"):
        assert ens_kv[head] == eval_kv[head]


def test_ensemble_usage_errors(workdir, capsys):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg"]) == 0
    ckpt = str(workdir / "out" / "checkpoint.m3em")
    assert main(["ensemble", "--config", "run.cfg"]) == 1
    assert main(["ensemble", "--config", "run.cfg", "--checkpoint", ckpt,
                 "--weights", "1.0,0.5"]) == 1
    assert main(["ensemble", "--config", "run.cfg", "--checkpoint", ckpt,
                 "--weights", "0.0"]) == 1
    capsys.readouterr()


def test_gradcheck_reports_and_exit_codes(workdir, capsys):
    assert main(["gradcheck", "--config", "run.cfg"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 20
    report = (workdir / "out" / "gradcheck.txt").read_text()
    assert "end_to_end_loss" in report

    assert main(["gradcheck", "--config", "run.cfg",
                 "--corrupt-op", "pearson_map[centered]"]) == 3
    out = capsys.readouterr().out
    assert any("FAIL" in line and "pearson_map[centered]" in line
               for line in out.splitlines())


def test_invalid_threads_env_is_usage_error(workdir, monkeypatch, capsys):
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg"]) == 0
    monkeypatch.setenv("M3EM_THREADS", "zero")
    assert main(["eval", "--config", "run.cfg"]) == 1
    monkeypatch.setenv("M3EM_THREADS", "2")
    assert main(["eval", "--config", "run.cfg"]) == 0
    capsys.readouterr()


def test_figures_rendered_alongside_reports(workdir):
    (workdir / "run.cfg").write_text(
        CONFIG.format(data=workdir / "data", out=workdir / "out", figures="true"))
    assert main(["synth", "--config", "run.cfg"]) == 0
    assert main(["train", "--config", "run.cfg"]) == 0
    assert (workdir / "out" / "loss_curves.png").exists()
    assert (workdir / "out" / "train_target_metrics.png").exists()
    assert main(["eval", "--config", "run.cfg", "--dump-consensus"]) == 0
    assert (workdir / "out" / "eval_metrics.png").exists()
    assert (workdir / "out" / "consensus_grid.png").exists()
