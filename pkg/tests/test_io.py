import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navexplain.branch import AttentionBranch
from navexplain.checkpoint import (CheckpointError, apply_checkpoint, decode_checkpoint, encode_checkpoint,
                                   load_checkpoint, save_checkpoint)
from navexplain.config import ConfigError, RunConfig, load_config, parse_config, render_config
from navexplain.dqn import DqnNetwork
from navexplain.export import encode_csv, read_csv, read_ppm, write_csv, write_ppm, frame_rgb, overlay, map_gray
from navexplain.rng import stream


@pytest.fixture
def net():
    return DqnNetwork(rng=np.random.default_rng(0))


# ------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip_is_bitwise(tmp_path, net):
    path = tmp_path / "trunk.ckpt"
    save_checkpoint(path, net.named_params(), frozen=True, kind="trunk")
    ckpt = load_checkpoint(path)
    assert ckpt.frozen and ckpt.kind == "trunk"
    other = DqnNetwork(rng=np.random.default_rng(9))
    apply_checkpoint(ckpt, other.named_params())
    for a, b in zip(net.params(), other.params()):
        assert a.data.tobytes() == b.data.tobytes()
    assert other.checksum() == net.checksum()


def test_truncated_checkpoint_rejected(tmp_path, net):
    blob = encode_checkpoint(net.named_params())
    for cut in (10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointError, match="checksum"):
            decode_checkpoint(blob[:cut])


def test_corrupted_byte_rejected(net):
    blob = bytearray(encode_checkpoint(net.named_params()))
    blob[200] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(blob))


def test_unknown_version_rejected(net):
    import hashlib
    import struct
    blob = encode_checkpoint(net.named_params())
    body = blob[:8] + struct.pack("<I", 99) + blob[12:-32]
    with pytest.raises(CheckpointError, match="version 99"):
        decode_checkpoint(body + hashlib.sha256(body).digest())


def test_not_a_checkpoint():
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        decode_checkpoint(b"hello world" * 10)


def test_trunk_checkpoint_into_trunk_plus_branch_names_missing(net):
    ckpt = decode_checkpoint(encode_checkpoint(net.named_params()))
    combined = net.named_params() + AttentionBranch(32).named_params()
    with pytest.raises(CheckpointError, match="branch.conv.weight"):
        apply_checkpoint(ckpt, combined)


def test_extra_and_shape_mismatch_diagnostics(net):
    combined = net.named_params() + AttentionBranch(32).named_params()
    ckpt = decode_checkpoint(encode_checkpoint(combined))
    with pytest.raises(CheckpointError, match="does not"):
        apply_checkpoint(ckpt, net.named_params())
    small = DqnNetwork(rng=np.random.default_rng(0), frame_size=48)
    with pytest.raises(CheckpointError, match="shape mismatch for trunk.fc1.weight"):
        apply_checkpoint(decode_checkpoint(encode_checkpoint(net.named_params())), small.named_params())


def test_atomic_write_leaves_no_temp_files(tmp_path, net):
    save_checkpoint(tmp_path / "a.ckpt", net.named_params())
    save_checkpoint(tmp_path / "a.ckpt", net.named_params())
    assert os.listdir(tmp_path) == ["a.ckpt"]


# ------------------------------------------------------------ config


def test_config_round_trip_defaults():
    assert parse_config(render_config(RunConfig())) == RunConfig()


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.floats(1e-6, 1.0), st.integers(1, 500), st.tuples(st.integers(1, 50), st.integers(51, 99)))
def test_config_round_trip_random(seed, lr, episodes, milestones):
    cfg = (RunConfig().with_seed(seed).override("branch", lr=lr, lr_milestones=milestones)
           .override("dqn", episodes=episodes))
    assert parse_config(render_config(cfg)) == cfg


def test_config_unknown_key_reports_line():
    with pytest.raises(ConfigError, match=r"x\.ini:3: unknown key 'bogus'"):
        parse_config("[dqn]\nepisodes = 5\nbogus = 1\n", "x.ini")


def test_config_unknown_section_reports_line():
    with pytest.raises(ConfigError, match=r":2: unknown section \[extra\]"):
        parse_config("\n[extra]\na = 1\n")


def test_config_bad_value_reports_line():
    with pytest.raises(ConfigError, match=r":2: cannot parse 'many'"):
        parse_config("[dqn]\nepisodes = many\n")


def test_config_invalid_value_rejected():
    with pytest.raises(ConfigError, match="gamma"):
        parse_config("[dqn]\ngamma = 1.5\n")


def test_config_comments_and_partial_sections(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("# desk run\n[run]\nseed = 7  # fixed\n[eval]\nstates = 10\n")
    cfg = load_config(path)
    assert cfg.seed == 7 and cfg.eval.states == 10 and cfg.dqn == RunConfig().dqn


# ------------------------------------------------------------ export


def test_ppm_round_trip_and_palette(tmp_path):
    frame = np.array([[0, 1], [2, 0]], dtype=np.uint8)
    rgb = frame_rgb(frame)
    assert rgb[0, 0].tolist() == [128, 128, 128]
    assert rgb[0, 1].tolist() == [255, 255, 255]
    assert rgb[1, 0].tolist() == [255, 0, 0]
    write_ppm(tmp_path / "f.ppm", rgb)
    assert (tmp_path / "f.ppm").read_bytes().startswith(b"P6\n2 2\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "f.ppm"), rgb)


def test_gray_and_overlay():
    sal = np.array([[0.0, 1.0]])
    assert map_gray(sal).tolist() == [[[0, 0, 0], [255, 255, 255]]]
    ov = overlay(np.array([[1, 1]], np.uint8), sal)
    assert ov[0, 1, 0] == 255 and ov[0, 0, 0] == 102 and ov[0, 1, 1] == 102


def test_csv_round_trip_exact_floats(tmp_path):
    rows = [{"a": 0.1 + 0.2, "b": np.int64(3)}, {"a": 1e-300, "b": 4}]
    write_csv(tmp_path / "t.csv", rows, ["a", "b"])
    back = read_csv(tmp_path / "t.csv")
    assert float(back[0]["a"]) == 0.1 + 0.2 and back[1]["b"] == "4"
    assert encode_csv(rows, ["a", "b"]).startswith(b"a,b\n")


# ------------------------------------------------------------ rng


def test_named_streams_reproducible_and_independent():
    assert stream(5, "agent").random() == stream(5, "agent").random()
    assert stream(5, "agent").random() != stream(5, "planner").random()
    assert stream(5, "train.start", 1).random() != stream(5, "train.start", 2).random()
    assert stream(5, "agent").random() != stream(6, "agent").random()
