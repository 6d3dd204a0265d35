"""Trainable layers built from the quantizer, gating, and kernel modules.

The gated layers own their input quantization: each forward pass clips the
incoming activations to the layer's learned [0, clip] range (the clip
doubles as the nonlinearity, a bounded ReLU), quantizes them, splits the
bit planes, and runs the dual-precision product. A recorder object with a
record(name, mask, msb_codes) method can observe every gate decision and
the MSB code distribution without touching the data path.

Gradient flow back through a gated layer: gating backward gives the
gradient with respect to the dequantized input; the straight-through
estimator carries it across the rounding step unchanged; the clip backward
then splits it between the input (inside the clip range) and the clip
parameter (at or above it).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gating import (
    GateThresholds,
    PGLayerConfig,
    pg_conv_backward,
    pg_conv_forward,
    pg_dense_backward,
    pg_dense_forward,
    threshold_penalty,
)
from .kernels import gemm
from .quantize import (
    QuantParams,
    pact_clip_backward,
    pact_clip_forward,
    quantize,
    quantize_ste_backward,
    quantize_weights_symmetric,
    split_bits,
)
from .tensor import REAL_DTYPE, ShapeError


@dataclass
class Param:
    """A trainable array and its gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    lower_bound: float | None = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=REAL_DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Layer:
    """Forward/backward node with named parameters."""

    name: str = ""

    def forward(self, x: np.ndarray, train: bool = False, recorder=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(REAL_DTYPE)


class _PGBase(Layer):
    """Shared quantize-then-gate plumbing of the gated layers."""

    def __init__(self, cfg: PGLayerConfig, out_channels: int, clip_init: float):
        self.cfg = cfg
        self.clip = Param("clip", np.array([clip_init], dtype=REAL_DTYPE), lower_bound=1e-2)
        self.thresholds = Param("thresholds", np.zeros(out_channels, dtype=REAL_DTYPE))
        self.sparse_backprop = True
        self.last_sparsity = 0.0
        self._x = None
        self._state = None

    def _quantize_input(self, x: np.ndarray):
        clip = float(self.clip.value[0])
        clipped = pact_clip_forward(x, clip)
        q = quantize(clipped, QuantParams(self.cfg.bits, clip))
        return split_bits(q, self.cfg.msb_bits)

    def _effective_weight(self, weight: np.ndarray) -> np.ndarray:
        if self.cfg.quantize_weights:
            return quantize_weights_symmetric(weight, self.cfg.bits)
        return weight

    def _finish_backward(self, d_dequant: np.ndarray) -> np.ndarray:
        d_codes = quantize_ste_backward(d_dequant)
        dx, dclip = pact_clip_backward(self._x, float(self.clip.value[0]), d_codes)
        self.clip.grad += REAL_DTYPE(dclip)
        return dx

    def threshold_penalty_loss(self) -> float:
        """Add the threshold regularizer's gradient; return its loss term."""
        if self.cfg.mode != "learnable" or self.cfg.penalty == 0.0:
            return 0.0
        loss, grad = threshold_penalty(GateThresholds(self.thresholds.value), self.cfg)
        self.thresholds.grad += grad
        return loss

    def set_cfg(self, cfg: PGLayerConfig) -> None:
        if cfg.bits != self.cfg.bits or cfg.msb_bits != self.cfg.msb_bits:
            raise ValueError("cannot change bit widths of a built layer")
        self.cfg = cfg


class PGConv2d(_PGBase):
    """Gated 3x3-style convolution over (N, C, H, W) maps."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 cfg: PGLayerConfig, stride: int = 1, pad: int = 1,
                 rng: np.random.Generator | None = None, clip_init: float = 1.0):
        super().__init__(cfg, out_channels, clip_init)
        rng = rng or np.random.default_rng()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Param("weight", _he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Param("bias", np.zeros(out_channels, dtype=REAL_DTYPE))
        self.stride = stride
        self.pad = pad

    def params(self) -> list[Param]:
        ps = [self.weight, self.bias, self.clip]
        if self.cfg.mode == "learnable":
            ps.append(self.thresholds)
        return ps

    def forward(self, x: np.ndarray, train: bool = False, recorder=None) -> np.ndarray:
        self._x = x
        split = self._quantize_input(x)
        state = pg_conv_forward(split, self._effective_weight(self.weight.value),
                                self.bias.value, GateThresholds(self.thresholds.value),
                                self.cfg, self.stride, self.pad)
        self.last_sparsity = state.sparsity
        if recorder is not None:
            recorder.record(self.name, state.mask.mask, split.msb)
        if train:
            self._state = state
        else:
            state.drop_backward_cache()
            self._state = None
        return state.output

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._state is None:
            raise RuntimeError("backward called without a training-mode forward")
        grads = pg_conv_backward(self._state, dout, self.cfg, self.sparse_backprop)
        self.weight.grad += grads.d_weight  # straight-through across weight fake-quant
        self.bias.grad += grads.d_bias
        if self.cfg.mode == "learnable":
            self.thresholds.grad += grads.d_threshold
        self._state = None
        return self._finish_backward(grads.d_input)


class PGDense(_PGBase):
    """Gated fully-connected layer over (N, features) activations."""

    def __init__(self, in_features: int, out_features: int, cfg: PGLayerConfig,
                 rng: np.random.Generator | None = None, clip_init: float = 1.0):
        super().__init__(cfg, out_features, clip_init)
        rng = rng or np.random.default_rng()
        self.weight = Param("weight", _he_normal(rng, (out_features, in_features), in_features))
        self.bias = Param("bias", np.zeros(out_features, dtype=REAL_DTYPE))

    def params(self) -> list[Param]:
        ps = [self.weight, self.bias, self.clip]
        if self.cfg.mode == "learnable":
            ps.append(self.thresholds)
        return ps

    def forward(self, x: np.ndarray, train: bool = False, recorder=None) -> np.ndarray:
        if x.ndim != 2:
            raise ShapeError(f"{self.name}: expected (N, features) input, got shape {x.shape}")
        self._x = x
        split = self._quantize_input(x)
        state = pg_dense_forward(split, self._effective_weight(self.weight.value),
                                 self.bias.value, GateThresholds(self.thresholds.value), self.cfg)
        self.last_sparsity = state.sparsity
        if recorder is not None:
            recorder.record(self.name, state.mask.mask, split.msb)
        self._state = state if train else None
        return state.output

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._state is None:
            raise RuntimeError("backward called without a training-mode forward")
        grads = pg_dense_backward(self._state, dout, self.cfg, self.sparse_backprop)
        self.weight.grad += grads.d_weight
        self.bias.grad += grads.d_bias
        if self.cfg.mode == "learnable":
            self.thresholds.grad += grads.d_threshold
        self._state = None
        return self._finish_backward(grads.d_input)


class Dense(Layer):
    """Plain full-precision affine layer (classifier head)."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng()
        self.weight = Param("weight", _he_normal(rng, (out_features, in_features), in_features))
        self.bias = Param("bias", np.zeros(out_features, dtype=REAL_DTYPE))
        self._x = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool = False, recorder=None) -> np.ndarray:
        if x.ndim != 2:
            raise ShapeError(f"{self.name}: expected (N, features) input, got shape {x.shape}")
        self._x = x if train else None
        return gemm(x, np.ascontiguousarray(self.weight.value.T), counter_key="fc_fwd") + self.bias.value[None, :]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called without a training-mode forward")
        self.weight.grad += gemm(np.ascontiguousarray(dout.T), self._x, counter_key="fc_bwd_dw")
        self.bias.grad += dout.sum(axis=0, dtype=np.float64).astype(REAL_DTYPE)
        dx = gemm(dout, self.weight.value, counter_key="fc_bwd_dx")
        self._x = None
        return dx


class MaxPool2d(Layer):
    """Non-overlapping max pooling; ties resolve to the first maximum."""

    def __init__(self, size: int = 2):
        self.size = size
        self._argmax = None
        self._x_shape = None

    def forward(self, x: np.ndarray, train: bool = False, recorder=None) -> np.ndarray:
        n, c, h, w = x.shape
        s = self.size
        if h % s or w % s:
            raise ShapeError(f"{self.name}: input {h}x{w} not divisible by pool size {s}")
        tiles = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
        tiles = tiles.reshape(n, c, h // s, w // s, s * s)
        idx = tiles.argmax(axis=-1)
        out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
        if train:
            self._argmax = idx
            self._x_shape = x.shape
        return out.astype(REAL_DTYPE)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._argmax is None:
            raise RuntimeError("backward called without a training-mode forward")
        n, c, h, w = self._x_shape
        s = self.size
        dtiles = np.zeros((n, c, h // s, w // s, s * s), dtype=REAL_DTYPE)
        np.put_along_axis(dtiles, self._argmax[..., None], dout[..., None], axis=-1)
        dx = dtiles.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        self._argmax = None
        return np.ascontiguousarray(dx)


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C) spatial mean."""

    def __init__(self):
        self._x_shape = None

    def forward(self, x: np.ndarray, train: bool = False, recorder=None) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected (N, C, H, W) input, got shape {x.shape}")
        if train:
            self._x_shape = x.shape
        return x.mean(axis=(2, 3), dtype=np.float64).astype(REAL_DTYPE)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._x_shape is None:
            raise RuntimeError("backward called without a training-mode forward")
        n, c, h, w = self._x_shape
        dx = np.broadcast_to(dout[:, :, None, None] / (h * w), (n, c, h, w))
        self._x_shape = None
        return np.ascontiguousarray(dx, dtype=REAL_DTYPE)


class Flatten(Layer):
    """(N, ...) -> (N, features)."""

    def __init__(self):
        self._x_shape = None

    def forward(self, x: np.ndarray, train: bool = False, recorder=None) -> np.ndarray:
        if train:
            self._x_shape = x.shape
        return np.ascontiguousarray(x.reshape(x.shape[0], -1))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._x_shape is None:
            raise RuntimeError("backward called without a training-mode forward")
        shape = self._x_shape
        self._x_shape = None
        return dout.reshape(shape)
