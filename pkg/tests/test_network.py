"""Conv-4 embedding network: geometry, init determinism, persistence."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prototransfer.checkpoint import load_ptt1
from prototransfer.errors import GeometryError, ShapeError
from prototransfer.network import (
    EmbeddingNetwork,
    init_conv4,
    load_network,
    network_from_state,
)

PARAM_COUNT = sum(
    [
        64 * 1 * 9 + 64 + 64 + 64,  # block 1 on grayscale input
        64 * 64 * 9 + 64 + 64 + 64,
        64 * 64 * 9 + 64 + 64 + 64,
        64 * 64 * 9 + 64 + 64 + 64,
    ]
)


def test_embedding_dims_for_reference_geometries():
    assert init_conv4(1, 28, seed=0).embedding_dim == 64
    assert init_conv4(3, 84, seed=0).embedding_dim == 1600


def test_parameter_count_independent_of_input_size():
    for size in (16, 28, 84):
        net = init_conv4(1, size, seed=0)
        assert sum(p.data.size for p in net.parameters().values()) == PARAM_COUNT


def test_forward_shapes():
    net = init_conv4(1, 28, seed=0)
    out = net.embed(np.zeros((5, 1, 28, 28), dtype=np.float32))
    assert out.shape == (5, 64)
    net3 = init_conv4(3, 84, seed=0)
    out3 = net3.embed(np.zeros((2, 3, 84, 84), dtype=np.float32))
    assert out3.shape == (2, 1600)


def test_init_is_deterministic_in_seed():
    a = init_conv4(1, 28, seed=7)
    b = init_conv4(1, 28, seed=7)
    c = init_conv4(1, 28, seed=8)
    for k in a.parameters():
        assert np.array_equal(a.parameters()[k].data, b.parameters()[k].data)
    assert not np.array_equal(
        a.parameters()["block1.conv.weight"].data, c.parameters()["block1.conv.weight"].data
    )


def test_init_bounds_follow_fan_in():
    net = init_conv4(3, 84, seed=3)
    w1 = net.parameters()["block1.conv.weight"].data
    bound = np.sqrt(6.0 / (3 * 9))
    assert np.abs(w1).max() <= bound
    assert np.abs(w1).max() > 0.5 * bound  # actually fills the range
    assert np.all(net.parameters()["block1.bn.gamma"].data == 1.0)
    assert np.all(net.parameters()["block1.bn.beta"].data == 0.0)


def test_geometry_validation():
    with pytest.raises(GeometryError):
        init_conv4(2, 28, seed=0)
    with pytest.raises(GeometryError):
        init_conv4(1, 15, seed=0)


def test_embed_rejects_wrong_geometry():
    net = init_conv4(1, 28, seed=0)
    with pytest.raises(ShapeError):
        net.embed(np.zeros((2, 3, 28, 28), dtype=np.float32))
    with pytest.raises(ShapeError):
        net.embed(np.zeros((2, 1, 32, 32), dtype=np.float32))
    with pytest.raises(ShapeError):
        net.embed(np.zeros((1, 28, 28), dtype=np.float32))


def test_eval_mode_does_not_touch_running_stats():
    net = init_conv4(1, 16, seed=0)
    before = [(b.stats.mean.copy(), b.stats.var.copy()) for b in net.blocks]
    net.embed(np.random.default_rng(0).uniform(size=(3, 1, 16, 16)).astype(np.float32), mode="eval")
    for blk, (m, v) in zip(net.blocks, before):
        assert np.array_equal(blk.stats.mean, m)
        assert np.array_equal(blk.stats.var, v)


def test_train_mode_updates_running_stats():
    net = init_conv4(1, 16, seed=0)
    net.embed(np.random.default_rng(0).uniform(size=(3, 1, 16, 16)).astype(np.float32), mode="train")
    assert not np.array_equal(net.blocks[0].stats.mean, np.zeros(64))


def test_copy_is_deep():
    net = init_conv4(1, 16, seed=0)
    dup = net.copy()
    dup.parameters()["block1.conv.weight"].data[0, 0, 0, 0] += 1.0
    dup.blocks[0].stats.mean[0] += 5.0
    assert net.parameters()["block1.conv.weight"].data[0, 0, 0, 0] != dup.parameters()["block1.conv.weight"].data[0, 0, 0, 0]
    assert net.blocks[0].stats.mean[0] != dup.blocks[0].stats.mean[0]


def test_save_load_round_trip(tmp_path):
    net = init_conv4(1, 16, seed=4)
    net.embed(np.random.default_rng(1).uniform(size=(4, 1, 16, 16)).astype(np.float32), mode="train")
    path = tmp_path / "net.ptt1"
    net.save(path)
    back = load_network(path)
    assert back.input_channels == 1 and back.input_size == 16
    for k, p in net.parameters().items():
        assert np.array_equal(p.data, back.parameters()[k].data)
    for b1, b2 in zip(net.blocks, back.blocks):
        assert np.array_equal(b1.stats.mean, b2.stats.mean)
        assert np.array_equal(b1.stats.var, b2.stats.var)
    x = np.random.default_rng(2).uniform(size=(2, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(net.embed(x).data, back.embed(x).data)


def test_load_ignores_reserved_extra_tensors(tmp_path):
    net = init_conv4(1, 16, seed=4)
    path = tmp_path / "net.ptt1"
    net.save(path, extra={"adam.t": np.array([3.0], dtype=np.float32)})
    assert "adam.t" in load_ptt1(path)
    back = load_network(path)
    assert back.embedding_dim == net.embedding_dim


def test_network_from_state_matches_save_load():
    net = init_conv4(3, 32, seed=9)
    back = network_from_state(net.state_dict())
    x = np.random.default_rng(3).uniform(size=(2, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(net.embed(x).data, back.embed(x).data)


@given(size=st.integers(16, 64))
@settings(max_examples=12, deadline=None)
def test_embedding_dim_formula(size):
    net = init_conv4(1, size, seed=0)
    side = size
    for _ in range(4):
        side //= 2
    assert net.embedding_dim == 64 * side * side
    out = net.embed(np.zeros((2, 1, size, size), dtype=np.float32))
    assert out.shape == (2, net.embedding_dim)
