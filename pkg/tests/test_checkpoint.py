import numpy as np
import pytest

from segxplain.classification import ClassifierConfig, build_classifier
from segxplain.nn import Network, Conv2D, Dense, Activation, forward, \
    load_model, save_model
from segxplain.nn.checkpoint import MAGIC, CheckpointError
from segxplain.rng import derive_rng
from segxplain.segmentation import UNetConfig, build_unet


def test_round_trip_bit_exact_real32(tmp_path):
    net = build_unet(UNetConfig(input_size=32, depth=2, base_channels=4,
                                seed=9))
    # perturb away from init so the test is not trivially passing
    rng = derive_rng("ckpt")
    for p in net.parameters():
        p.array = (p.array + rng.normal(0, 0.1, p.array.shape)).astype(net.dtype)
    path = tmp_path / "model.ckpt"
    save_model(path, net)
    loaded = load_model(path)
    assert [s for s in loaded.specs] == [s for s in net.specs]
    for a, b in zip(net.state_arrays(), loaded.state_arrays()):
        assert np.array_equal(a, b)
    x = derive_rng("x").random((1, 1, 32, 32)).astype(np.float32)
    ya, _ = forward(net, x, mode="eval")
    yb, _ = forward(loaded, x, mode="eval")
    assert np.array_equal(ya.array, yb.array)


def test_freeze_groups_survive_round_trip(tmp_path):
    model = build_classifier(ClassifierConfig(input_size=32,
                                              backbone_blocks=2,
                                              base_channels=4,
                                              head_sizes=(16, 8, 8)), 2)
    path = tmp_path / "clf.ckpt"
    save_model(path, model)
    loaded = load_model(path)
    orig = {p.name for p in model.parameters() if p.group == "backbone"}
    got = {p.name for p in loaded.parameters() if p.group == "backbone"}
    assert orig == got


def test_magic_validated(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"NOTIT" + bytes(64))
    with pytest.raises(CheckpointError, match="magic"):
        load_model(path)


def test_truncated_file_rejected(tmp_path):
    net = Network([Dense(4, 2), Activation("softmax")], input_shape=(4,))
    path = tmp_path / "model.ckpt"
    save_model(path, net)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) - 10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_model(path)


def test_file_layout_starts_with_magic(tmp_path):
    net = Network([Conv2D(1, 2, 3)], input_shape=(1, 8, 8))
    path = tmp_path / "m.ckpt"
    save_model(path, net)
    assert path.read_bytes()[:5] == MAGIC
