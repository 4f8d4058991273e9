import json

import numpy as np
import pytest

from trclab.checkpoint import CheckpointError, load_backbone, load_corrector, save_backbone, save_corrector
from trclab.trc import TrcHP, train_trc
from conftest import mixed_schema


def test_backbone_round_trip(tmp_path, trained_backbone):
    bb, pre, split = trained_backbone
    save_backbone(tmp_path / "bb.ckpt", bb, pre)
    back, pre2 = load_backbone(tmp_path / "bb.ckpt", split.train.schema)
    assert back.frozen and back.checksum() == bb.checksum()
    np.testing.assert_array_equal(back.forward(split.test.X), bb.forward(split.test.X))
    np.testing.assert_array_equal(pre2.inverse_y(np.ones(3)), pre.inverse_y(np.ones(3)))


def test_schema_and_checksum_mismatch(tmp_path, trained_backbone):
    bb, pre, _ = trained_backbone
    path = tmp_path / "bb.ckpt"
    save_backbone(path, bb, pre)
    with pytest.raises(CheckpointError, match="schema"):
        load_backbone(path, mixed_schema(7, ()))
    blob = json.loads(path.read_text())
    blob["params"][0][0][0] += 1.0
    path.write_text(json.dumps(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_backbone(path)


def test_corrector_round_trip_and_binding(tmp_path, trained_backbone, small_regression):
    bb, pre, split = trained_backbone
    hp = TrcHP(T=3, max_epochs=2, tau=0.05)
    corr, _, _ = train_trc(bb, split, hp, pre)
    save_corrector(tmp_path / "c.ckpt", corr, hp)
    back, hp2 = load_corrector(tmp_path / "c.ckpt", bb)
    assert hp2 == hp and back.checksum() == corr.checksum()
    z = bb.represent(split.test.X)
    np.testing.assert_array_equal(back.forward(z), corr.forward(z))

    from trclab.backbones import BackboneConfig, build_backbone
    other = build_backbone(BackboneConfig(width=bb.width, seed=99), split.train.schema, split.train.task).freeze()
    with pytest.raises(CheckpointError, match="different backbone"):
        load_corrector(tmp_path / "c.ckpt", other)


def test_wrong_kind_and_missing(tmp_path, trained_backbone):
    bb, pre, _ = trained_backbone
    save_backbone(tmp_path / "bb.ckpt", bb, pre)
    with pytest.raises(CheckpointError):
        load_corrector(tmp_path / "bb.ckpt", bb)
    with pytest.raises(FileNotFoundError):
        load_backbone(tmp_path / "none.ckpt")
