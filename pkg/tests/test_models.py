"""Network assembly: widths, shapes, parameter count, checkpoints."""

import numpy as np
import pytest

from cardioseg import ndtensor as nd
from cardioseg.errors import CompatibilityError, FormatError, ParameterError, ShapeError
from cardioseg.models import (ModelConfig, build_model, load_checkpoint,
                              read_checkpoint_arrays, save_checkpoint)
from cardioseg.ndtensor import Tensor


def small2d(**kw):
    base = dict(dims=2, in_channels=1, num_classes=4, base_width=4, depth=2)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# configuration and widths

def test_level_widths_2d_default():
    cfg = ModelConfig(dims=2)
    assert cfg.level_widths() == [32, 64, 128, 256, 512]


def test_level_widths_3d_clamped():
    cfg = ModelConfig(dims=3, in_channels=1)
    assert cfg.level_widths() == [32, 64, 128, 256, 256]


def test_level_widths_explicit_cap():
    cfg = ModelConfig(dims=2, base_width=8, depth=3, max_width=16)
    assert cfg.level_widths() == [8, 16, 16, 16]


@pytest.mark.parametrize("bad", [
    dict(dims=4),
    dict(dims=2, in_channels=2),
    dict(dims=2, in_channels=7),
    dict(dims=3, in_channels=3),
    dict(num_classes=1),
    dict(depth=0),
    dict(base_width=0),
    dict(dropout_last=1.0),
    dict(dropout_second_last=-0.1),
    dict(dims=2, base_width=32, max_width=16),
])
def test_invalid_configs_rejected(bad):
    kw = dict(dims=2, in_channels=3)
    kw.update(bad)
    if kw["dims"] == 3:
        kw.setdefault("in_channels", 1)
    with pytest.raises(ParameterError):
        ModelConfig(**kw).validate()


def test_parameter_count_matches_closed_form():
    # dims=2, base 4, depth 1, classes 2, in_ch 1; summed by hand:
    # each level = two (conv+bn+conv) blocks, decoder gets an upconv too.
    def conv_n(cin, cout, k=9):
        return cout * cin * k + cout

    def block_n(cin, cout):
        return conv_n(cin, cout) + 2 * cout + conv_n(cout, cout)

    def level_n(cin, cout):
        return block_n(cin, cout) + block_n(cout, cout)

    expect = (level_n(1, 4)                 # encoder
              + level_n(4, 8)               # base
              + (8 * 4 * 4 + 4)             # upconv 2x2, 8 -> 4
              + level_n(8, 4)               # decoder after skip concat
              + conv_n(4, 2, k=1))          # final 1x1
    model = build_model(ModelConfig(dims=2, in_channels=1, num_classes=2,
                                    base_width=4, depth=1))
    assert model.parameter_count() == expect


# ---------------------------------------------------------------------------
# forward shapes

def test_forward_2d_shape():
    model = build_model(small2d(in_channels=3)).eval()
    x = Tensor(np.zeros((2, 3, 16, 16), dtype=np.float32))
    assert model.forward(x).shape == (2, 4, 16, 16)


@pytest.mark.parametrize("z", [1, 6, 9, 12])
def test_forward_3d_preserves_any_z(z):
    cfg = ModelConfig(dims=3, in_channels=1, base_width=4, depth=2)
    model = build_model(cfg, seed=1).eval()
    x = Tensor(np.zeros((1, 1, z, 16, 16), dtype=np.float32))
    assert model.forward(x).shape == (1, 4, z, 16, 16)


def test_forward_rejects_indivisible_extent():
    model = build_model(small2d()).eval()
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((1, 1, 18, 16), dtype=np.float32)))


def test_forward_rejects_channel_mismatch():
    model = build_model(small2d()).eval()
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((1, 2, 16, 16), dtype=np.float32)))


def test_forward_rejects_wrong_rank():
    model = build_model(small2d()).eval()
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((1, 1, 4, 16, 16), dtype=np.float32)))


def test_eval_forward_bitwise_deterministic():
    rng = np.random.default_rng(0)
    model = build_model(small2d()).eval()
    x = Tensor(rng.normal(size=(1, 1, 16, 16)).astype(np.float32))
    a = model.forward(x).numpy()
    b = model.forward(x).numpy()
    np.testing.assert_array_equal(a, b)


def test_train_forward_deterministic_given_rng_seed():
    rng = np.random.default_rng(1)
    model = build_model(small2d()).train()
    x = Tensor(rng.normal(size=(2, 1, 16, 16)).astype(np.float32))
    a = model.forward(x, rng=np.random.default_rng(42)).numpy()
    b = model.forward(x, rng=np.random.default_rng(42)).numpy()
    np.testing.assert_array_equal(a, b)


def test_gradient_reaches_every_parameter():
    rng = np.random.default_rng(2)
    model = build_model(small2d(base_width=4, depth=2), seed=3).eval()
    x = Tensor(rng.normal(size=(2, 1, 16, 16)).astype(np.float32))
    direction = Tensor(rng.normal(size=(2, 4, 16, 16)).astype(np.float32))
    with nd.Tape():
        out = model.forward(x)
        nd.backward(nd.sum_(nd.mul(out, direction)))
        for name, p in model.params.items():
            assert p.grad is not None, f"{name} got no gradient"
            assert np.linalg.norm(p.grad) > 0, f"{name} gradient is all-zero"
        nd.zero_grads(model.params.values())


# ---------------------------------------------------------------------------
# checkpoints

def _nudge_buffers(model):
    """Leave nonzero running statistics so the roundtrip covers buffers."""
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(2, model.config.in_channels, 16, 16)).astype(np.float32))
    model.train().forward(x, rng=np.random.default_rng(0))
    model.eval()


def test_checkpoint_roundtrip_bitwise(tmp_path):
    path = str(tmp_path / "model.ckpt")
    model = build_model(small2d(), seed=5)
    _nudge_buffers(model)
    save_checkpoint(model, path)

    other = load_checkpoint(path, small2d(), seed=17)  # seed must not matter
    for name, tensor in model.state().items():
        np.testing.assert_array_equal(tensor.numpy(), other.state()[name].numpy())

    x = Tensor(np.random.default_rng(3).normal(size=(1, 1, 16, 16)).astype(np.float32))
    np.testing.assert_array_equal(model.eval().forward(x).numpy(),
                                  other.eval().forward(x).numpy())


def test_checkpoint_truncated_file(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(build_model(small2d()), path)
    with open(path, "rb") as fh:
        blob = fh.read()
    with open(path, "wb") as fh:
        fh.write(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        read_checkpoint_arrays(path)


def test_checkpoint_wrong_magic(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(build_model(small2d()), path)
    with open(path, "r+b") as fh:
        fh.write(b"XXXX")
    with pytest.raises(FormatError):
        read_checkpoint_arrays(path)


def test_checkpoint_wrong_num_classes(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(build_model(small2d(num_classes=4)), path)
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, small2d(num_classes=2))


def test_checkpoint_wrong_depth(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(build_model(small2d(depth=2)), path)
    with pytest.raises(CompatibilityError):
        load_checkpoint(path, small2d(depth=1))


def test_checkpoint_deterministic_bytes(tmp_path):
    a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    model = build_model(small2d(), seed=2)
    save_checkpoint(model, a)
    save_checkpoint(model, b)
    with open(a, "rb") as fa, open(b, "rb") as fb:
        assert fa.read() == fb.read()
