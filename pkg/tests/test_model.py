import numpy as np
import pytest
import torch

from tracoco.errors import ConfigError, GeometryError, IntegrityError
from tracoco.model import (
    NetConfig,
    checkpoint_load,
    checkpoint_save,
    forward,
    init_pair,
    parameter_checksum,
    parameter_distance,
)

SMALL = NetConfig(base_width=4, depth=3)


@pytest.fixture(scope="module")
def pair():
    return init_pair(SMALL, 1, 2)


def test_distinct_init(pair):
    assert parameter_checksum(pair.model1) != parameter_checksum(pair.model2)
    assert parameter_distance(pair.model1, pair.model2) > 0


def test_init_deterministic(pair):
    again = init_pair(SMALL, 1, 2)
    assert parameter_checksum(again.model1) == parameter_checksum(pair.model1)
    assert parameter_checksum(again.model2) == parameter_checksum(pair.model2)


def test_init_does_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    init_pair(SMALL, 5, 6)
    assert torch.equal(torch.rand(3), expected)


def test_equal_seeds_rejected():
    with pytest.raises(ConfigError):
        init_pair(SMALL, 3, 3)


def test_outputs_differ_between_models(pair):
    crop = np.random.default_rng(0).normal(size=(8, 8, 8)).astype(np.float32)
    with torch.no_grad():
        a, b = forward(pair.model1, crop), forward(pair.model2, crop)
    assert not torch.allclose(a, b)


def test_probability_validity(pair):
    rng = np.random.default_rng(1)
    with torch.no_grad():
        for _ in range(100):
            dims = tuple(int(4 * rng.integers(1, 4)) for _ in range(3))
            out = forward(pair.model1, rng.normal(size=dims).astype(np.float32))
            assert out.shape == (2,) + dims
            assert torch.all(out >= 0)
            assert torch.allclose(out.sum(0), torch.ones(dims), atol=1e-6)


def test_eval_deterministic(pair):
    pair.eval()
    crop = np.random.default_rng(2).normal(size=(8, 8, 8)).astype(np.float32)
    with torch.no_grad():
        assert torch.equal(forward(pair.model1, crop), forward(pair.model1, crop))


def test_indivisible_dims(pair):
    with pytest.raises(GeometryError, match="multiple of 4"):
        forward(pair.model1, np.zeros((8, 8, 6), dtype=np.float32))


def test_96_cube_depth_4():
    model = init_pair(NetConfig(base_width=2, depth=4), 1, 2).model1
    with torch.no_grad():
        out = forward(model, np.zeros((96, 96, 96), dtype=np.float32))
    assert out.shape == (2, 96, 96, 96)


def test_batched_forward(pair):
    x = torch.randn(3, 1, 8, 8, 8)
    with torch.no_grad():
        out = forward(pair.model1, x)
    assert out.shape == (3, 2, 8, 8, 8)


@pytest.mark.parametrize("norm", ["group", "instance", "batch", "none"])
def test_norm_options(norm):
    m = init_pair(NetConfig(base_width=4, depth=2, norm=norm), 1, 2).model1
    m.eval()
    with torch.no_grad():
        assert m(torch.randn(2, 1, 4, 4, 4)).shape == (2, 2, 4, 4, 4)


class TestCheckpoint:
    def test_round_trip(self, pair, tmp_path):
        opt = {"momentum": [torch.randn(3)], "schedule": {"iter": 7}}
        path = tmp_path / "a.ckpt"
        checkpoint_save(pair, opt, 7, path, rng_state={"x": 1}, config={"k": "v"})
        loaded, opt2, step, info = checkpoint_load(path)
        assert step == 7
        assert parameter_checksum(loaded.model1) == parameter_checksum(pair.model1)
        assert parameter_checksum(loaded.model2) == parameter_checksum(pair.model2)
        assert torch.equal(opt2["momentum"][0], opt["momentum"][0])
        assert info["rng"] == {"x": 1} and info["config"] == {"k": "v"}
        assert loaded.cfg == pair.cfg

    def test_truncated(self, pair, tmp_path):
        path = tmp_path / "a.ckpt"
        checkpoint_save(pair, {}, 0, path)
        data = path.read_bytes()
        path.write_bytes(data[:-100])
        with pytest.raises(IntegrityError, match="optimizer|rng|model2"):
            checkpoint_load(path)

    def test_corrupted_section_named(self, pair, tmp_path):
        path = tmp_path / "a.ckpt"
        checkpoint_save(pair, {}, 0, path, rng_state={"state": 123456789})
        data = bytearray(path.read_bytes())
        data[-3] ^= 0xFF  # last section is rng
        path.write_bytes(bytes(data))
        with pytest.raises(IntegrityError, match="'rng'"):
            checkpoint_load(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(IntegrityError, match="header"):
            checkpoint_load(path)
