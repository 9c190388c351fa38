"""Encoder-decoder segmentation networks, 2D and 3D.

Both variants share one code path. A level is two conv_bn_relu blocks,
where a block is the literal sequence conv 3x3, bn, ReLU, conv 3x3 (the
trailing conv has no bn or activation of its own). The encoder doubles
the channel width per level and halves H and W; the decoder mirrors it
with transposed convolutions and skip concatenations; a final 1x1 conv
maps the base width back to class logits. The 3D variant pools only in
H and W, so any number of slices Z >= 1 passes through unchanged, and
its width doubling is clamped (256 by default).

Checkpoints are a little-endian binary of named float32 arrays covering
every trainable parameter and batch-norm running buffer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import layers, ndtensor as nd
from .errors import CompatibilityError, FormatError, ParameterError, ShapeError
from .ndtensor import Tensor

_MAGIC = b"CSEG"
_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture knobs; defaults give the full-size 2D network."""

    dims: int = 2
    in_channels: int = 3
    num_classes: int = 4
    base_width: int = 32
    depth: int = 4
    max_width: Optional[int] = None  # None: unlimited in 2D, 256 in 3D
    dropout_last: float = 0.5
    dropout_second_last: float = 0.3

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise ParameterError(f"dims must be 2 or 3, got {self.dims}")
        if self.num_classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.num_classes}")
        if self.depth < 1:
            raise ParameterError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ParameterError(f"base_width must be >= 1, got {self.base_width}")
        if self.dims == 2 and self.in_channels not in (1, 3, 5):
            raise ParameterError(f"2D input is a 1/3/5-slice stack, got {self.in_channels} channels")
        if self.dims == 3 and self.in_channels != 1:
            raise ParameterError(f"3D input is single-channel, got {self.in_channels}")
        if self.max_width is not None and self.max_width < self.base_width:
            raise ParameterError(f"max_width {self.max_width} below base_width {self.base_width}")
        for name in ("dropout_last", "dropout_second_last"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ParameterError(f"{name} must be in [0, 1), got {rate}")

    def effective_max_width(self) -> Optional[int]:
        if self.max_width is not None:
            return self.max_width
        return 256 if self.dims == 3 else None

    def level_widths(self) -> list:
        """Encoder widths for levels 0..depth-1 plus the base width."""
        cap = self.effective_max_width()
        widths = []
        for i in range(self.depth + 1):
            w = self.base_width * (2 ** i)
            widths.append(w if cap is None else min(w, cap))
        return widths


class SegmentationModel:
    """Flat named-parameter network; structure lives in ``forward``."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = True
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, Tensor] = {}
        self._pool = (2, 2) if config.dims == 2 else (1, 2, 2)
        self._kernel = (3, 3) if config.dims == 2 else (3, 3, 3)
        self._init_params(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _add_conv(self, rng, name: str, c_in: int, c_out: int, kernel, transposed=False):
        shape = ((c_in, c_out) if transposed else (c_out, c_in)) + tuple(kernel)
        fan_in = c_in * int(np.prod(kernel))
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=shape)
        self.params[name + ".weight"] = Tensor(w, dtype=self.dtype, requires_grad=True)
        self.params[name + ".bias"] = nd.zeros((c_out,), dtype=self.dtype, requires_grad=True)

    def _add_bn(self, name: str, c: int):
        self.params[name + ".gamma"] = nd.ones((c,), dtype=self.dtype, requires_grad=True)
        self.params[name + ".beta"] = nd.zeros((c,), dtype=self.dtype, requires_grad=True)
        self.buffers[name + ".running_mean"] = nd.zeros((c,), dtype=self.dtype)
        self.buffers[name + ".running_var"] = nd.ones((c,), dtype=self.dtype)

    def _add_block(self, rng, name: str, c_in: int, c_out: int):
        self._add_conv(rng, name + ".conv0", c_in, c_out, self._kernel)
        self._add_bn(name + ".bn", c_out)
        self._add_conv(rng, name + ".conv1", c_out, c_out, self._kernel)

    def _add_level(self, rng, name: str, c_in: int, c_out: int):
        self._add_block(rng, name + ".block0", c_in, c_out)
        self._add_block(rng, name + ".block1", c_out, c_out)

    def _init_params(self, rng):
        cfg = self.config
        widths = cfg.level_widths()
        c = cfg.in_channels
        for i in range(cfg.depth):
            self._add_level(rng, f"enc{i}", c, widths[i])
            c = widths[i]
        self._add_level(rng, "base", c, widths[cfg.depth])
        c = widths[cfg.depth]
        for i in reversed(range(cfg.depth)):
            self._add_conv(rng, f"dec{i}.up", c, widths[i], self._pool, transposed=True)
            self._add_level(rng, f"dec{i}", 2 * widths[i], widths[i])
            c = widths[i]
        ones_kernel = (1,) * cfg.dims
        self._add_conv(rng, "final", widths[0], cfg.num_classes, ones_kernel)

    # -- mode and state ------------------------------------------------------

    def train(self) -> "SegmentationModel":
        self.training = True
        return self

    def eval(self) -> "SegmentationModel":
        self.training = False
        return self

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def state(self) -> Dict[str, Tensor]:
        merged = dict(self.params)
        merged.update(self.buffers)
        return merged

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward -------------------------------------------------------------

    def _block(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        pad = layers.same_padding(self._kernel, self.config.dims)
        x = layers.conv(x, p[name + ".conv0.weight"], p[name + ".conv0.bias"], padding=pad)
        x = layers.batchnorm(x, p[name + ".bn.gamma"], p[name + ".bn.beta"],
                             self.buffers[name + ".bn.running_mean"],
                             self.buffers[name + ".bn.running_var"],
                             training=self.training)
        x = layers.relu(x)
        return layers.conv(x, p[name + ".conv1.weight"], p[name + ".conv1.bias"], padding=pad)

    def _level(self, x: Tensor, name: str) -> Tensor:
        return self._block(self._block(x, name + ".block0"), name + ".block1")

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self.config
        if x.ndim != cfg.dims + 2:
            raise ShapeError(f"expected {cfg.dims + 2}-d input [N, C, spatial...], got shape {x.shape}")
        if x.shape[1] != cfg.in_channels:
            raise ShapeError(f"model expects {cfg.in_channels} input channels, got {x.shape[1]}")
        div = 2 ** cfg.depth
        for extent in x.shape[-2:]:
            if extent % div != 0:
                raise ShapeError(f"H and W must be divisible by {div}, got {x.shape[-2:]}")

        skips = []
        h = x
        for i in range(cfg.depth):
            h = self._level(h, f"enc{i}")
            rate = 0.0
            if i == cfg.depth - 1:
                rate = cfg.dropout_last
            elif i == cfg.depth - 2:
                rate = cfg.dropout_second_last
            if rate > 0.0:
                h = layers.dropout(h, rate, self.training, rng)
            skips.append(h)
            h = layers.maxpool(h, self._pool)
        h = self._level(h, "base")
        for i in reversed(range(cfg.depth)):
            h = layers.upconv(h, self.params[f"dec{i}.up.weight"], self.params[f"dec{i}.up.bias"])
            h = nd.concat([h, skips[i]], axis=1)
            h = self._level(h, f"dec{i}")
        return layers.conv(h, self.params["final.weight"], self.params["final.bias"])

    __call__ = forward


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> SegmentationModel:
    return SegmentationModel(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoint serialization

def save_checkpoint(model: SegmentationModel, path) -> None:
    """Named-array dump; sorted names make the byte stream reproducible."""
    state = model.state()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _MAGIC, _VERSION, len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name].data, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise FormatError(f"checkpoint truncated: wanted {n} bytes, got {len(chunk)}")
    return chunk


def read_checkpoint_arrays(path) -> Dict[str, np.ndarray]:
    """Parse the raw name -> float32 array mapping without a model."""
    with open(path, "rb") as fh:
        magic, version, count = struct.unpack("<4sII", _read_exact(fh, 12))
        if magic != _MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        if version != _VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
            numel = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 4 * numel), dtype="<f4")
            arrays[name] = data.reshape(shape).copy()
        return arrays


def load_checkpoint(path, config: ModelConfig, seed: int = 0) -> SegmentationModel:
    arrays = read_checkpoint_arrays(path)
    model = SegmentationModel(config, seed=seed)
    state = model.state()
    missing = sorted(set(state) - set(arrays))
    if missing:
        raise CompatibilityError(f"checkpoint lacks tensors {missing[:4]} for this configuration")
    extra = sorted(set(arrays) - set(state))
    if extra:
        raise CompatibilityError(f"checkpoint has unexpected tensors {extra[:4]}")
    for name, tensor in state.items():
        if arrays[name].shape != tensor.shape:
            raise CompatibilityError(
                f"{name}: checkpoint shape {arrays[name].shape} vs model shape {tensor.shape}")
        tensor.data[...] = arrays[name]
    return model
