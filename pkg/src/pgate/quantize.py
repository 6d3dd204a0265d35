"""Activation quantization with a learnable clip, plus MSB/LSB bit splitting.

Activations are clipped to [0, clip] (the clip value is a trained
parameter, one per layer), then mapped to unsigned B-bit codes on a uniform
grid with scale = clip / (2^B - 1). Rounding is half away from zero,
computed in float64 so the decision is not perturbed by float32 division.

A quantized activation can be split into its top `msb_bits` bit planes and
the remaining low planes:

    code = (msb << lsb_bits) + lsb

which dequantizes to x_msb + x_lsb = x_q bit for bit in float32: the low
half is defined as the exact complement of the high half (see
SplitActivation.dequantize_lsb), so no rounding slack accumulates between
the two compute paths. The split is what lets a layer run a cheap few-bit
prediction pass first and spend the low bits only where they matter.

Gradients cross the rounding step via the straight-through estimator: the
code grid is treated as identity, while the clip boundary contributes
dx = upstream inside (0, clip) and routes the out-of-range mass at or above
the clip into the clip parameter's gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import INT_DTYPE, REAL_DTYPE


@dataclass(frozen=True)
class QuantParams:
    """Uniform unsigned quantization grid: `bits` wide, range [0, clip]."""

    bits: int
    clip: float

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if not (np.isfinite(self.clip) and self.clip > 0):
            raise ValueError(f"clip must be positive and finite, got {self.clip}")

    @property
    def levels(self) -> int:
        """Largest code value, 2^bits - 1."""
        return (1 << self.bits) - 1

    @property
    def scale(self) -> float:
        return self.clip / self.levels


@dataclass(frozen=True)
class QuantizedActivation:
    codes: np.ndarray  # int32 in [0, 2^bits - 1]
    params: QuantParams

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(REAL_DTYPE) * REAL_DTYPE(self.params.scale)


@dataclass(frozen=True)
class SplitActivation:
    """Bit-plane split of a quantized activation.

    msb holds the top `msb_bits` planes (values in [0, 2^msb_bits - 1]),
    lsb the remaining `lsb_bits` planes. Recombine with
    (msb << lsb_bits) | lsb.
    """

    msb: np.ndarray
    lsb: np.ndarray
    msb_bits: int
    lsb_bits: int
    params: QuantParams

    def recombine(self) -> np.ndarray:
        return ((self.msb.astype(np.int64) << self.lsb_bits) | self.lsb.astype(np.int64)).astype(INT_DTYPE)

    def dequantize_msb(self) -> np.ndarray:
        """Real value carried by the top planes: (msb << lsb_bits) * scale."""
        shifted = (self.msb.astype(np.int64) << self.lsb_bits).astype(REAL_DTYPE)
        return shifted * REAL_DTYPE(self.params.scale)

    def dequantize_lsb(self) -> np.ndarray:
        """Real value carried by the low planes.

        Defined as the float32 complement full - msb rather than
        lsb * scale directly. The subtraction is exact (the operands are
        within a factor of two whenever msb > 0, and the msb half is zero
        otherwise), so dequantize_msb() + dequantize_lsb() reproduces the
        full dequantized activation bit for bit, and the prediction and
        update paths can never drift apart by rounding.
        """
        full = self.recombine().astype(REAL_DTYPE) * REAL_DTYPE(self.params.scale)
        return (full - self.dequantize_msb()).astype(REAL_DTYPE)


def pact_clip_forward(x: np.ndarray, clip: float) -> np.ndarray:
    """y = min(max(x, 0), clip)."""
    if not (np.isfinite(clip) and clip > 0):
        raise ValueError(f"clip must be positive and finite, got {clip}")
    return np.minimum(np.maximum(x, REAL_DTYPE(0)), REAL_DTYPE(clip)).astype(REAL_DTYPE)


def pact_clip_backward(x: np.ndarray, clip: float, upstream: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradients of the clip: pass-through strictly inside (0, clip).

    Positions at or above the clip saturate, so their upstream gradient
    moves the clip parameter instead of the input. Positions at or below
    zero are dead, as with a ReLU.
    """
    if x.shape != upstream.shape:
        raise ValueError(f"x shape {x.shape} does not match upstream shape {upstream.shape}")
    inside = (x > 0) & (x < clip)
    dx = np.where(inside, upstream, REAL_DTYPE(0)).astype(REAL_DTYPE)
    dclip = float(upstream[x >= clip].sum(dtype=np.float64))
    return dx, dclip


def quantize(x: np.ndarray, params: QuantParams) -> QuantizedActivation:
    """Map already-clipped activations to integer codes.

    Rounding is round-half-away-from-zero on x / scale, evaluated in
    float64. Inputs are expected in [0, clip]; anything that rounds past
    the last level (possible only through caller error) is clamped.
    """
    if x.size and (x.min() < 0 or x.max() > params.clip):
        raise ValueError("quantize input outside [0, clip]; clip it first")
    codes = np.floor(x.astype(np.float64) / params.scale + 0.5)
    codes = np.clip(codes, 0, params.levels)
    return QuantizedActivation(codes.astype(INT_DTYPE), params)


def quantize_ste_backward(upstream: np.ndarray) -> np.ndarray:
    """Straight-through estimator across the rounding step (identity).

    Range effects are not handled here; they belong to pact_clip_backward,
    which sees the pre-clip activation.
    """
    return upstream.astype(REAL_DTYPE)


def split_bits(q: QuantizedActivation, msb_bits: int) -> SplitActivation:
    """Split codes into top `msb_bits` planes and the rest.

    Requires 1 <= msb_bits < bits so both halves are non-empty.
    """
    bits = q.params.bits
    if not 1 <= msb_bits < bits:
        raise ValueError(f"msb_bits must be in [1, {bits - 1}], got {msb_bits}")
    lsb_bits = bits - msb_bits
    codes = q.codes.astype(np.int64)
    msb = (codes >> lsb_bits).astype(INT_DTYPE)
    lsb = (codes & ((1 << lsb_bits) - 1)).astype(INT_DTYPE)
    return SplitActivation(msb=msb, lsb=lsb, msb_bits=msb_bits, lsb_bits=lsb_bits, params=q.params)


def quantize_weights_symmetric(w: np.ndarray, bits: int) -> np.ndarray:
    """Fake-quantize weights on a symmetric signed grid over [-max|w|, max|w|].

    Returns float32 values snapped to the grid (the caller keeps the real
    master copy and applies straight-through gradients to it). With an
    all-zero tensor the grid is degenerate and w is returned unchanged.
    """
    if not 2 <= bits <= 16:
        raise ValueError(f"bits must be in [2, 16], got {bits}")
    bound = float(np.max(np.abs(w)))
    if bound == 0.0:
        return w.astype(REAL_DTYPE)
    # signed grid with 2^(bits-1) - 1 positive levels, symmetric around 0
    levels = (1 << (bits - 1)) - 1
    scale = bound / levels
    codes = np.sign(w) * np.floor(np.abs(w.astype(np.float64)) / scale + 0.5)
    codes = np.clip(codes, -levels, levels)
    return (codes * scale).astype(REAL_DTYPE)
