import struct

import numpy as np
import pytest

from sanet.cells import ModelConfig, build_model
from sanet.checkpoint import MAGIC, Checkpoint, CheckpointError
from sanet.data import NormalizationStats


@pytest.fixture(params=["LSTM", "ConvLSTM+Social", "SA-Net"])
def checkpoint(request):
    rng = np.random.default_rng(0)
    features = rng.normal(size=(3, 4, 4))
    cfg = ModelConfig(kind=request.param, grid=(4, 4), channels=4, layers=2, temporal_hidden=4, look_back=3,
                      n_features=3)
    model = build_model(request.param, cfg, features, seed=5)
    ckpt = Checkpoint.from_model(model, NormalizationStats(2.5, 1.25), 0.75, 3,
                                 extra={"gamma": "10.0", "split": "0.6,0.2,0.2"})
    return ckpt, features


def inputs(seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(2, 3, 4, 4)), rng.integers(0, 2, (2, 4, 3)).astype(float), rng.uniform(0, 1, (2, 3))


def test_round_trip_is_bitwise(tmp_path, checkpoint):
    ckpt, features = checkpoint
    ckpt.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    assert back.model_config == ckpt.model_config
    assert back.stats == ckpt.stats and back.best_val_loss == 0.75 and back.epoch == 3
    assert back.extra == ckpt.extra and back.frozen == ckpt.frozen
    before = ckpt.model(features).forward(*inputs()).data
    after = back.model(features).forward(*inputs()).data
    assert np.array_equal(before, after)


def test_saving_twice_gives_same_bytes(tmp_path, checkpoint):
    ckpt, _ = checkpoint
    ckpt.save(tmp_path / "a")
    Checkpoint.load(tmp_path / "a").save(tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_layout_header(tmp_path, checkpoint):
    ckpt, _ = checkpoint
    ckpt.save(tmp_path / "m")
    blob = (tmp_path / "m").read_bytes()
    assert blob.startswith(b"SANET\x01")
    assert struct.unpack("<I", blob[6:10])[0] == 1


def test_bad_magic(tmp_path, checkpoint):
    ckpt, _ = checkpoint
    ckpt.save(tmp_path / "m")
    blob = (tmp_path / "m").read_bytes()
    (tmp_path / "m").write_bytes(b"XXXXX" + blob[5:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        Checkpoint.load(tmp_path / "m")


def test_unknown_version(tmp_path, checkpoint):
    ckpt, _ = checkpoint
    ckpt.save(tmp_path / "m")
    blob = bytearray((tmp_path / "m").read_bytes())
    blob[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 99)
    (tmp_path / "m").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.load(tmp_path / "m")


@pytest.mark.parametrize("cut", [3, 40, -1])
def test_truncated(tmp_path, checkpoint, cut):
    ckpt, _ = checkpoint
    ckpt.save(tmp_path / "m")
    blob = (tmp_path / "m").read_bytes()
    (tmp_path / "m").write_bytes(blob[:cut])
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "m")


def test_trailing_bytes(tmp_path, checkpoint):
    ckpt, _ = checkpoint
    ckpt.save(tmp_path / "m")
    with open(tmp_path / "m", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "m")
