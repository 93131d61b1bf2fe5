import numpy as np
import pytest

from navexplain.checkpoint import save_checkpoint
from navexplain.cli import run
from navexplain.dqn import DqnNetwork
from navexplain.export import read_csv, read_ppm

TINY = """
[dqn]
episodes = 4
warmup = 64
[branch]
epochs = 2
harvest_episodes = 2
[eval]
states = 12
rollout_episodes = 2
steps = 4
trials = 2
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    out = root / "out"
    base = ["--config", str(root / "tiny.ini"), "--out", str(out), "--seed", "1"]
    for cmd in (["train"], ["distill"], ["eval-nav"], ["metrics"], ["explain", "--states", "1"], ["plan-debug"]):
        assert run(cmd + base) == 0, cmd
    return out


def test_train_artifacts(run_dir):
    rows = read_csv(run_dir / "train_log.csv")
    assert len(rows) == 4
    assert list(rows[0]) == ["episode", "return", "steps", "success", "epsilon", "td_loss_mean"]


def test_distill_artifacts(run_dir):
    summary = read_csv(run_dir / "distill_summary.csv")[0]
    assert summary["trunk_sha256_before"] == summary["trunk_sha256_after"]
    assert len(read_csv(run_dir / "distill_log.csv")) == 2


def test_navstats_row(run_dir):
    row = read_csv(run_dir / "navstats.csv")[0]
    assert list(row)[:4] == ["successes", "trials", "avg_dist_to_goal", "collisions"]


def test_metrics_one_curve_per_source(run_dir):
    for kind in ("deletion", "insertion"):
        rows = read_csv(run_dir / f"{kind}.csv")
        assert list(rows[0]) == ["fraction", "branch", "visualbackprop", "random"]
        assert len(rows) == 5
    assert [r["source"] for r in read_csv(run_dir / "auc_summary.csv")] == ["branch", "visualbackprop", "random"]


def test_explain_images(run_dir):
    d = run_dir / "explain"
    for name in ("frame", "attention", "overlay", "vbp", "sweep_front", "sweep_left", "sweep_right"):
        assert read_ppm(d / f"state000_{name}.ppm").shape == (64, 64, 3)
    assert len(read_csv(d / "sweep.csv")) == 3


def test_plan_dump(run_dir):
    assert "path " in (run_dir / "plan.txt").read_text()


def test_distill_before_train_refused(tmp_path, capsys):
    assert run(["distill", "--out", str(tmp_path)]) != 0
    assert "run 'train' first" in capsys.readouterr().err


def test_distill_refuses_unfrozen_trunk(tmp_path, capsys):
    save_checkpoint(tmp_path / "trunk.ckpt", DqnNetwork(rng=np.random.default_rng(0)).named_params(), frozen=False)
    assert run(["distill", "--out", str(tmp_path)]) != 0
    assert "not frozen" in capsys.readouterr().err


def test_malformed_config_reports_line(tmp_path, capsys):
    (tmp_path / "bad.ini").write_text("[dqn]\nepisodes = 3\nwhat = 1\n")
    assert run(["train", "--config", str(tmp_path / "bad.ini"), "--out", str(tmp_path)]) != 0
    assert "bad.ini:3" in capsys.readouterr().err


def test_corrupt_checkpoint_reported(tmp_path, capsys):
    (tmp_path / "trunk.ckpt").write_bytes(b"NAVXCKPT" + b"\0" * 50)
    assert run(["eval-nav", "--out", str(tmp_path)]) != 0
    assert "checksum" in capsys.readouterr().err
