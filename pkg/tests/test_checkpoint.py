import struct

import numpy as np
import pytest

from unsupmeta import checkpoint as C
from unsupmeta.config import get_profile
from unsupmeta.trainer import SequentialTrainer
from unsupmeta.update_rule import init_theta, theta_shapes

from configs import tiny_config


def _ckpt():
    r = np.random.default_rng(0)
    return C.Checkpoint("desk", {"b": r.normal(size=(2, 3)), "a": r.normal(size=4), "s": np.array(2.5)},
                        {"seed": 1}, {"note": "x"})


def test_save_load_save_identical(tmp_path):
    C.save(tmp_path / "a.smup", _ckpt())
    loaded = C.load(tmp_path / "a.smup")
    C.save(tmp_path / "b.smup", loaded)
    assert (tmp_path / "a.smup").read_bytes() == (tmp_path / "b.smup").read_bytes()
    for k, v in _ckpt().arrays.items():
        np.testing.assert_array_equal(loaded.arrays[k], v)
    assert loaded.meta == {"note": "x"} and loaded.config == {"seed": 1}


def test_layout_sorted_little_endian():
    raw = C.encode(_ckpt())
    assert raw[:4] == b"SMUP"
    version, hlen = struct.unpack("<II", raw[4:12])
    assert version == 1
    payload = raw[12 + hlen:]
    assert len(payload) == 8 * (4 + 6 + 1)
    np.testing.assert_array_equal(np.frombuffer(payload[:32], "<f8"), _ckpt().arrays["a"])


def test_flipped_byte_fails_checksum():
    raw = bytearray(C.encode(_ckpt()))
    raw[-3] ^= 0x10
    with pytest.raises(C.CheckpointError, match="checksum"):
        C.decode(bytes(raw))


def test_bad_magic_and_version():
    raw = C.encode(_ckpt())
    with pytest.raises(C.CheckpointError, match="magic"):
        C.decode(b"XXXX" + raw[4:])
    with pytest.raises(C.CheckpointError, match="version"):
        C.decode(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(C.CheckpointError):
        C.decode(raw[:-1])


def test_paper_theta_round_trip(tmp_path):
    cfg = get_profile("paper")
    th = init_theta(cfg.rule, 0)
    C.save(tmp_path / "t.smup", C.theta_checkpoint(th, cfg))
    back, bcfg, _ = C.load_theta(tmp_path / "t.smup")
    assert bcfg == cfg
    assert {k: v.shape for k, v in back.arrays().items()} == theta_shapes(cfg.rule)
    assert all(np.array_equal(back.arrays()[k], v) for k, v in th.arrays().items())


def test_load_theta_without_theta(tmp_path):
    C.save(tmp_path / "x.smup", _ckpt())
    with pytest.raises(C.CheckpointError):
        C.load_theta(tmp_path / "x.smup")


def test_trainer_resume_matches_uninterrupted(tmp_path):
    cfg = tiny_config(seed=5)
    full = SequentialTrainer(cfg)
    full.run(4)
    part = SequentialTrainer(cfg)
    part.run(2)
    C.save(tmp_path / "c.smup", C.trainer_checkpoint(part))
    resumed = C.restore_trainer(tmp_path / "c.smup")
    resumed.run(2)
    assert resumed.step == 4
    for k, v in full.theta.arrays().items():
        np.testing.assert_array_equal(resumed.theta.arrays()[k], v)
    for k in full.adam.m:
        np.testing.assert_array_equal(resumed.adam.v[k], full.adam.v[k])
