"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trained trunk and distilled branch are expensive, so they are cached
under ``.acceptance_cache/<key>`` where the key hashes the acceptance config
and the package sources.  Wall-clock times of the cached stages are stored
alongside so that runtime budgets are still checked on reuse.
"""

from __future__ import annotations

import hashlib
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import navexplain
from navexplain import pipeline
from navexplain.branch import BranchConfig, lr_at
from navexplain.config import load_config
from navexplain.dqn import DqnConfig, epsilon_at
from navexplain.evaluate import (SWEEP_ANGLES, angle_sweep, attention_center_column, averaged_attention_per_action,
                                 deletion_curve, insertion_curve, random_saliency)
from navexplain.export import read_csv
from navexplain.planner import PlannerConfig, plan
from navexplain.rng import stream
from navexplain.sim import (FORWARD, TURN_LEFT, TURN_RIGHT, Rect, RobotPose, SimConfig, WorldMap, load_map,
                            step)

from layer_cases import layer_reports

pytestmark = pytest.mark.slow

HERE = Path(__file__).parent
ROOT = HERE.parent
CONFIG = HERE / "acceptance.ini"
DET_CONFIG = HERE / "determinism.ini"
SRC = Path(navexplain.__file__).parent


def _cache_key() -> str:
    h = hashlib.sha256(CONFIG.read_bytes())
    for path in sorted(SRC.rglob("*")):
        if path.suffix in (".py", ".map"):
            h.update(path.relative_to(SRC).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="module")
def cfg():
    return load_config(CONFIG)


@pytest.fixture(scope="module")
def trained(cfg):
    """Train and distill once per source revision, then reuse."""
    out = ROOT / ".acceptance_cache" / _cache_key()
    timings_file = out / "timings.json"
    timings = json.loads(timings_file.read_text()) if timings_file.exists() else {}
    if "train_seconds" not in timings:
        t0 = time.perf_counter()
        pipeline.train(cfg, out)
        timings["train_seconds"] = time.perf_counter() - t0
        timings_file.write_text(json.dumps(timings))
    if "distill_seconds" not in timings:
        trunk = pipeline.load_trunk(out / pipeline.TRUNK_FILE, cfg)
        timings["sha_before_load"] = trunk.checksum()
        t0 = time.perf_counter()
        pipeline.distill(cfg, out)
        timings["distill_seconds"] = time.perf_counter() - t0
        timings_file.write_text(json.dumps(timings))
    trunk = pipeline.load_trunk(out / pipeline.TRUNK_FILE, cfg)
    branch = pipeline.load_branch(out / pipeline.BRANCH_FILE, trunk)
    return {"out": out, "trunk": trunk, "branch": branch, "timings": timings}


@pytest.fixture(scope="module")
def eval_set(cfg, trained):
    t0 = time.perf_counter()
    frames, polars = pipeline.eval_states(cfg, trained["trunk"])
    return frames, polars, time.perf_counter() - t0


def test_criterion_01_gradients(criterion):
    t0 = time.perf_counter()
    reports = layer_reports(seed=0, samples=100)
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda k: reports[k].max_rel_error)
    ok = (all(r.max_rel_error < 1e-3 and r.checked >= 100 for r in reports.values()) and elapsed < 60)
    criterion(1, ok, f"{len(reports)} layer kinds, min samples {min(r.checked for r in reports.values())}, "
                     f"worst {worst} rel err {reports[worst].max_rel_error:.2e}, {elapsed:.1f}s")


def test_criterion_02_rewards(criterion):
    cfg = SimConfig()
    empty = WorldMap(Rect(0, 0, 10, 10))
    boxed = WorldMap(Rect(0, 0, 10, 10), (Rect(2, 0.5, 3, 1.5),))
    goal = step(RobotPose(1.0, 1.0, 0.0), FORWARD, (1.6, 1.0), empty, cfg).reward
    crash = step(RobotPose(1.6, 1.0, 0.0), FORWARD, (5.0, 1.0), boxed, cfg).reward
    progress = step(RobotPose(1.0, 1.0, 0.0), FORWARD, (3.0, 1.0), empty, cfg).reward
    turns = [step(RobotPose(1.0, 1.0, 0.0), a, (5.0, 5.0), empty, cfg).reward for a in (TURN_LEFT, TURN_RIGHT)]
    ok = (goal == 30.0 and crash == -5.0 and abs(progress - 0.2) < 1e-12 and turns == [0.0, 0.0]
          and cfg.progress_scale == 1.0)
    criterion(2, ok, f"subgoal {goal}, crash {crash}, progress {progress:.12f}, turns {turns}")


def test_criterion_03_schedules(criterion):
    eps = [epsilon_at(e, DqnConfig()) for e in (0, 40_000, 80_000)]
    lrs = [lr_at(e, BranchConfig()) for e in (0, 49, 50, 74, 75, 99)]
    ok = (np.allclose(eps, [0.9, 0.5, 0.1], rtol=0, atol=1e-12)
          and np.allclose(lrs, [0.1, 0.1, 0.01, 0.01, 0.001, 0.001], rtol=0, atol=1e-15))
    criterion(3, ok, f"epsilon {[round(e, 9) for e in eps]}, lr {[round(r, 9) for r in lrs]}")


def test_criterion_04_frozen_trunk(criterion, trained):
    summary = read_csv(trained["out"] / "distill_summary.csv")[0]
    before, after = summary["trunk_sha256_before"], summary["trunk_sha256_after"]
    reloaded = trained["trunk"].checksum()
    ok = before == after == reloaded == trained["timings"]["sha_before_load"]
    criterion(4, ok, f"sha256 before {before[:16]}.. after {after[:16]}.. reloaded {reloaded[:16]}..")


def test_criterion_05_navigation(criterion, cfg, trained):
    stats = pipeline.eval_nav(cfg, trained["out"])
    train_s = trained["timings"]["train_seconds"]
    ok = (cfg.dqn.episodes <= 20_000 and stats.trials == 50 and stats.successes >= 40
          and stats.collisions <= 5 and train_s <= 7200)
    criterion(5, ok, f"{stats.successes}/{stats.trials} successes, {stats.collisions} collisions, "
                     f"{cfg.dqn.episodes} episodes trained in {train_s / 60:.1f} min")


def test_criterion_06_distillation(criterion, cfg, trained):
    summary = read_csv(trained["out"] / "distill_summary.csv")[0]
    rows = read_csv(trained["out"] / "distill_log.csv")
    agreement = float(summary["final_holdout_agreement"])
    secs = trained["timings"]["distill_seconds"]
    ok = len(rows) == cfg.branch.epochs == 100 and agreement >= 0.90 and secs <= 600
    criterion(6, ok, f"held-out agreement {agreement:.4f} on {summary['holdout']} states after "
                     f"{len(rows)} epochs, {secs / 60:.1f} min")


def test_criterion_07_explainability_ordering(criterion, cfg, trained, eval_set):
    frames, polars, sample_s = eval_set
    t0 = time.perf_counter()
    curves = pipeline.metrics(cfg, trained["out"], state_set=(frames, polars))
    secs = time.perf_counter() - t0 + sample_s
    auc = {k: c.auc for k, c in curves.items()}
    del_margin = auc[("deletion", "random")] - auc[("deletion", "branch")]
    ins_margin = auc[("insertion", "branch")] - auc[("insertion", "random")]
    beats_vbp = (auc[("deletion", "branch")] < auc[("deletion", "visualbackprop")]
                 or auc[("insertion", "branch")] > auc[("insertion", "visualbackprop")])
    ok = len(frames) == 1000 and del_margin >= 0.03 and ins_margin >= 0.03 and beats_vbp and secs <= 900
    criterion(7, ok, "deletion AUC branch/vbp/random "
              f"{auc[('deletion', 'branch')]:.3f}/{auc[('deletion', 'visualbackprop')]:.3f}/"
              f"{auc[('deletion', 'random')]:.3f}, insertion {auc[('insertion', 'branch')]:.3f}/"
              f"{auc[('insertion', 'visualbackprop')]:.3f}/{auc[('insertion', 'random')]:.3f}, "
              f"{len(frames)} states, {secs / 60:.1f} min")


def test_criterion_08_curve_anchors(criterion, trained, eval_set):
    frames, polars, _ = eval_set
    frames, polars = frames[:200], polars[:200]
    trunk = trained["trunk"]
    sal = random_saliency(frames.shape, stream(0, "acceptance.anchors"))
    d, d2 = (deletion_curve(trunk, frames, polars, s, 20) for s in (sal, sal ** 2))
    i, i2 = (insertion_curve(trunk, frames, polars, s, 20) for s in (sal, sal ** 2))
    ok = (d.accuracy[0] == 1.0 and i.accuracy[-1] == 1.0 and np.array_equal(d.accuracy, d2.accuracy)
          and np.array_equal(i.accuracy, i2.accuracy))
    criterion(8, ok, f"deletion@0 {d.accuracy[0]}, insertion@1 {i.accuracy[-1]}, squared maps identical curves")


def test_criterion_09_subgoal_sensitivity(criterion, cfg, trained, eval_set):
    frames = eval_set[0]
    t0 = time.perf_counter()
    idx = np.sort(stream(cfg.seed, "acceptance.probes").choice(len(frames), cfg.eval.probe_states, replace=False))
    right, left = SWEEP_ANGLES.index(math.pi / 4), SWEEP_ANGLES.index(-math.pi / 4)
    l1, col_right, col_left = [], [], []
    for i in idx:
        maps = angle_sweep(trained["trunk"], trained["branch"], frames[i])
        l1.append(float(np.mean(np.abs(maps[right] - maps[left]))))
        col_right.append(attention_center_column(maps[right])[0])
        col_left.append(attention_center_column(maps[left])[0])
    secs = time.perf_counter() - t0
    frac = float(np.mean(np.array(l1) > 0.01))
    mean_r, mean_l = float(np.nanmean(col_right)), float(np.nanmean(col_left))
    ok = len(idx) == 100 and frac >= 0.80 and mean_r >= mean_l and secs <= 120
    criterion(9, ok, f"{frac:.0%} of {len(idx)} probes with L1 > 0.01 (median {np.median(l1):.4f}), "
                     f"mean column +pi/4 {mean_r:.2f} vs -pi/4 {mean_l:.2f}, {secs:.1f}s")


def test_criterion_10_action_lateralization(criterion, trained, eval_set):
    frames, polars, _ = eval_set
    t0 = time.perf_counter()
    avgs = averaged_attention_per_action(trained["trunk"], trained["branch"], frames, polars)
    secs = time.perf_counter() - t0
    present = avgs[TURN_LEFT].present and avgs[TURN_RIGHT].present
    cols = [float(attention_center_column(a.mean_attention)[0]) if a.present else math.nan for a in avgs]
    ok = present and cols[TURN_LEFT] < cols[TURN_RIGHT] and secs <= 120
    counts = [a.count for a in avgs]
    criterion(10, ok, f"mean column turn_left {cols[TURN_LEFT]:.2f} < turn_right {cols[TURN_RIGHT]:.2f} "
                      f"(forward {cols[FORWARD]:.2f}), counts {counts}, {secs:.1f}s")


def test_criterion_11_planner(criterion):
    t0 = time.perf_counter()
    empty = WorldMap(Rect(0, 0, 10, 10))
    start, goal = (1.0, 1.0), (9.0, 9.0)
    euclid = math.dist(start, goal)
    ratios = [plan(start, goal, empty, PlannerConfig(max_iterations=5000), rng=stream(s, "acceptance.planner")).cost
              / euclid for s in range(20)]
    median = float(np.median(ratios))
    blocked = WorldMap(Rect(0, 0, 10, 10), (Rect(4.5, 0, 5.5, 10),))
    infeasible = not plan((1, 5), (9, 5), blocked, PlannerConfig(max_iterations=1000), rng=0).feasible
    room = load_map()
    drift = []

    def audit(it, tree, best):
        drift.append(float(np.max(np.abs(tree.recomputed_costs() - tree.cost[:tree.size]))))

    plan((0.6, 7.4), room.goal, room, PlannerConfig(max_iterations=500), rng=3, callback=audit)
    secs = time.perf_counter() - t0
    ok = median <= 1.05 and infeasible and len(drift) == 500 and max(drift) <= 1e-9 and secs <= 60
    criterion(11, ok, f"median cost/euclid {median:.4f} over 20 seeds, blocked infeasible {infeasible}, "
                      f"{len(drift)} audited iterations max drift {max(drift):.1e}, {secs:.1f}s")


DET_FILES = ["trunk.ckpt", "train_log.csv", "branch.ckpt", "distill_log.csv", "distill_summary.csv",
             "deletion.csv", "insertion.csv", "auc_summary.csv"]


def _cli_run(out: Path):
    base = ["--config", str(DET_CONFIG), "--seed", "0", "--out", str(out)]
    for cmd in (["train", "--episodes", "500"], ["distill", "--epochs", "5"], ["metrics", "--states", "50"]):
        subprocess.run([sys.executable, "-m", "navexplain.cli", *cmd, *base], check=True, capture_output=True)


def test_criterion_12_determinism(criterion, tmp_path):
    t0 = time.perf_counter()
    _cli_run(tmp_path / "a")
    _cli_run(tmp_path / "b")
    secs = time.perf_counter() - t0
    same = [f for f in DET_FILES if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    ok = len(same) == len(DET_FILES) and secs <= 600
    criterion(12, ok, f"{len(same)}/{len(DET_FILES)} artifacts bitwise identical across two runs, "
                      f"{secs / 60:.1f} min")
