import json

import pytest

from labelevo import cli
from labelevo import experiment as X

SMALL = ["--set", "scenes.count=2", "--set", "scenes.height=32", "--set", "scenes.width=32",
         "--set", 'scenes.target={"kind": "gaussian", "radius": 3, "peak": 400.0}',
         "--set", "network.depth=1", "--set", "network.base_channels=2", "--epochs", "2"]


def test_synth_writes_scenes(tmp_path, capsys):
    assert cli.main(["synth", "--out", str(tmp_path)] + SMALL) == 0
    assert len(list(tmp_path.glob("scene_???.pgm"))) == 2
    assert len(list(tmp_path.glob("scene_*_gt.pgm"))) == 2
    assert "wrote 2 scenes" in capsys.readouterr().out


def test_train_off_and_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--lesps", "off", "--out", str(out)] + SMALL) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["epochs"] == 2 and summary["trigger_epoch"] is None
    assert json.loads((out / "config.json").read_text())["evolution"] is None
    assert cli.main(["eval", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("scene,peak_iou,peak_epoch")
    assert (out / "figures" / "degeneration_iou.png").exists()


def test_train_on_fills_desk_evolution(tmp_path, capsys):
    out = tmp_path / "run"
    args = ["train", "--out", str(out), "--set", "evolution.t_loss=Infinity"] + SMALL
    assert cli.main(args) == 0
    cfg = X.ExperimentConfig.load(out / "config.json")
    assert cfg.evolution.loss_scale == X.DESK_LOSS_SCALE
    assert json.loads(capsys.readouterr().out)["trigger_epoch"] == 1
    assert (out / "figures" / "loss_d.png").exists()


def test_sweep_and_pseudo_baseline(tmp_path, capsys):
    assert cli.main(["sweep", "--axis", "seed", "--values", "0,1", "--out", str(tmp_path / "s")]
                    + SMALL) == 0
    assert len(X.read_csv(tmp_path / "s" / "summary.csv")) == 2
    capsys.readouterr()
    assert cli.main(["pseudo-baseline", "--tau", "0.5", "--out", str(tmp_path / "p")] + SMALL) == 0
    assert (tmp_path / "p" / "pseudo_threshold=0.5" / "losses.csv").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--set", "bogus=1"],
    ["train", "--set", "novalue"],
    ["sweep", "--axis", "nothing", "--values", "1"],
    ["train", "--set", "epochs=0"],
    ["train", "--set", "lr=NaN"],
])
def test_config_errors_exit_2(tmp_path, argv, capsys):
    assert cli.main(argv + ["--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_failure_exit_3(tmp_path, capsys):
    argv = ["train", "--lesps", "off", "--set", "lr=1e300", "--out", str(tmp_path)] + SMALL
    assert cli.main(argv) == cli.EXIT_RUN
    assert "run failed (epoch" in capsys.readouterr().err
    assert (tmp_path / "FAILED").exists()


def test_missing_config_file_exit_4(tmp_path):
    argv = ["train", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]
    assert cli.main(argv) == cli.EXIT_IO


def test_eval_on_empty_dir_exit_4(tmp_path):
    assert cli.main(["eval", str(tmp_path)]) == cli.EXIT_IO
