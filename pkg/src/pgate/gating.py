"""Dual-precision gated products with learnable per-channel thresholds.

A few-bit prediction pass over the high bit planes decides, per output
value, whether the low bit planes are worth computing; the update pass then
runs only at the positions that fired. Per output coordinate p of output
channel c:

    o_hb[p] = (W x_msb)[p] + bias[c]            prediction, high planes
    mask[p] = 1 if o_hb[p] > delta[c] else 0    gate decision
    o[p]    = o_hb[p] + mask[p] * (W x_lsb)[p]  update, low planes

The low-plane term is a sampled product (see kernels.sddmm) whose cost is
nnz * K instead of M * N * K, so every gated-off output saves the
low-plane multiply-accumulates outright.

Backward treats the output as o = o_hb + mask^2 * o_lb. Squaring the
binary mask changes nothing forward, but the product rule then puts a mask
factor in front of every low-plane gradient term: the weight and input
gradients inherit the forward sparsity pattern exactly (same nnz * K cost),
and the threshold receives

    d o[p] / d delta[c] = 2 * mask[p] * o_lb[p] * d gate / d delta[c]

where the hard gate is smoothed as sigmoid(slope * (o_hb - delta)) on the
backward pass only, giving d gate / d delta = -slope * s * (1 - s). The
threshold never enters the forward value except through the hard decision,
so the smoothing cannot leak into inference.

With sparse_backprop=False (an ablation mode) the mask is not squared:
the low-plane product is recomputed densely in the backward pass and the
threshold gradient uses the dense o_lb with a chain factor of 1 instead of
2 * mask. Weight and input gradients are unchanged, only their cost and
the threshold dynamics differ.

Thresholds are pulled toward a target value delta* by a quadratic penalty
penalty * sum_c (delta_c - delta*)^2 added to the task loss, which is what
trades accuracy against gate sparsity during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import MACS, MaskedProductPlan, col2im, gemm, im2col, masked_grad_lhs, masked_grad_rhs, sddmm
from .quantize import SplitActivation
from .tensor import REAL_DTYPE, ShapeError

GATE_MODES = ("learnable", "fixed")


class GateStateError(RuntimeError):
    """Backward state no longer matches the thresholds it was produced under."""


@dataclass(frozen=True)
class PGLayerConfig:
    """Static precision and gating settings for one gated layer.

    bits/msb_bits set the activation grid and where it splits. penalty and
    threshold_target shape the threshold regularizer; surrogate_slope is
    the backward sigmoid steepness. mode picks learnable thresholds or a
    single fixed value (fixed_threshold) shared by every channel.
    """

    bits: int
    msb_bits: int
    penalty: float = 0.0
    threshold_target: float = 0.0
    surrogate_slope: float = 5.0
    mode: str = "learnable"
    fixed_threshold: float = 0.0
    quantize_weights: bool = False

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if not 1 <= self.msb_bits < self.bits:
            raise ValueError(f"msb_bits must be in [1, {self.bits - 1}], got {self.msb_bits}")
        if self.penalty < 0:
            raise ValueError(f"penalty must be >= 0, got {self.penalty}")
        if self.surrogate_slope <= 0:
            raise ValueError(f"surrogate_slope must be > 0, got {self.surrogate_slope}")
        if self.mode not in GATE_MODES:
            raise ValueError(f"mode must be one of {GATE_MODES}, got {self.mode!r}")

    @property
    def lsb_bits(self) -> int:
        return self.bits - self.msb_bits


@dataclass
class GateThresholds:
    """Per-output-channel gate thresholds (the trained delta vector)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=REAL_DTYPE)
        if self.values.ndim != 1:
            raise ShapeError(f"thresholds must be 1-d, got shape {self.values.shape}")

    @classmethod
    def zeros(cls, channels: int) -> "GateThresholds":
        return cls(np.zeros(channels, dtype=REAL_DTYPE))

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class GateMask:
    """Binary gate decisions in the layer's output layout."""

    mask: np.ndarray  # int8 of {0, 1}

    def __post_init__(self):
        if self.mask.dtype.kind not in "iu":
            raise ValueError("gate mask must be integer 0/1")

    @property
    def sparsity(self) -> float:
        """Fraction of outputs whose update pass was skipped."""
        if self.mask.size == 0:
            return 0.0
        return 1.0 - float(self.mask.sum(dtype=np.int64)) / self.mask.size


@dataclass
class PGLayerGrads:
    d_weight: np.ndarray
    d_bias: np.ndarray
    d_threshold: np.ndarray
    d_input: np.ndarray


def resolve_thresholds(cfg: PGLayerConfig, thresholds: GateThresholds, channels: int) -> np.ndarray:
    """Per-channel threshold vector actually used by the gate."""
    if cfg.mode == "fixed":
        return np.full(channels, cfg.fixed_threshold, dtype=REAL_DTYPE)
    if thresholds.channels != channels:
        raise ShapeError(f"thresholds for {thresholds.channels} channels used with {channels} outputs")
    return thresholds.values


def gate_decisions(o_hb: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """mask = 1 where the prediction strictly exceeds the channel threshold.

    delta broadcasts along the last-but-one axis for channel-major (C, P)
    matrices. Ties gate off: a prediction exactly at the threshold is
    treated as confidently low.
    """
    return (o_hb > delta[:, None]).astype(np.uint8)


def gate_sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, evaluated in float64."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def surrogate_gate_dthreshold(o_hb: np.ndarray, delta: np.ndarray, slope: float) -> np.ndarray:
    """d/d delta of the smoothed gate sigmoid(slope * (o_hb - delta)).

    Equals -slope * s * (1 - s); at o_hb == delta this is -slope / 4, the
    steepest point of the surrogate.
    """
    s = gate_sigmoid(slope * (o_hb - delta))
    return -slope * s * (1.0 - s)


def threshold_grad(upstream: np.ndarray, outer: np.ndarray, o_lb: np.ndarray,
                   o_hb: np.ndarray, delta: np.ndarray, slope: float) -> np.ndarray:
    """Per-channel loss gradient for the gate thresholds.

    All matrices are channel-major (C, P). `outer` is the chain factor
    contributed by the gate exponent: 2 * mask for the squared-mask
    backward, ones for the unsquared ablation. Returns

        grad_c = sum_p upstream * outer * o_lb * d gate/d delta

    with d gate/d delta taken from the sigmoid surrogate.
    """
    if not (upstream.shape == outer.shape == o_lb.shape == o_hb.shape):
        raise ShapeError("threshold_grad operands must share one (C, P) shape")
    dsdd = surrogate_gate_dthreshold(o_hb.astype(np.float64), delta.astype(np.float64)[:, None], slope)
    contrib = upstream.astype(np.float64) * outer * o_lb.astype(np.float64) * dsdd
    return contrib.sum(axis=1).astype(REAL_DTYPE)


def threshold_penalty(thresholds: GateThresholds, cfg: PGLayerConfig) -> tuple[float, np.ndarray]:
    """Quadratic pull of each threshold toward the configured target.

    Returns (loss contribution, d loss / d delta). Only meaningful for
    learnable thresholds; a fixed-mode layer has nothing to regularize.
    """
    if cfg.mode != "learnable":
        raise ValueError("threshold penalty applies to learnable thresholds only")
    diff = thresholds.values.astype(np.float64) - cfg.threshold_target
    loss = cfg.penalty * float(np.sum(diff * diff))
    grad = (2.0 * cfg.penalty * diff).astype(REAL_DTYPE)
    return loss, grad


@dataclass
class PGDenseState:
    """Forward products a gated dense layer keeps for its backward pass."""

    output: np.ndarray          # (N, F_out)
    o_hb: np.ndarray            # (N, F_out), prediction-phase output
    o_lb: np.ndarray            # (N, F_out), zeros where gated off
    mask: GateMask              # (N, F_out)
    sparsity: float
    delta: np.ndarray           # (F_out,), thresholds the mask was cut with
    x_hb: np.ndarray
    x_lb: np.ndarray
    weight: np.ndarray


def pg_dense_forward(split: SplitActivation, weight: np.ndarray, bias: np.ndarray,
                     thresholds: GateThresholds, cfg: PGLayerConfig) -> PGDenseState:
    """Gated product for (N, F_in) activations and (F_out, F_in) weights."""
    if split.msb.ndim != 2:
        raise ShapeError(f"dense input must be 2-d, got shape {split.msb.shape}")
    if weight.ndim != 2 or split.msb.shape[1] != weight.shape[1]:
        raise ShapeError(f"weight {weight.shape} does not match input {split.msb.shape}")
    if split.msb_bits != cfg.msb_bits or split.params.bits != cfg.bits:
        raise ValueError("activation split widths do not match the layer config")
    f_out = weight.shape[0]
    if bias.shape != (f_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {f_out} outputs")

    x_hb = split.dequantize_msb()
    x_lb = split.dequantize_lsb()
    w_t = np.ascontiguousarray(weight.T)
    # the two phase outputs are combined at accumulator precision and
    # rounded to float32 once, so the split introduces no extra rounding
    # relative to a single full-width product
    o_hb64 = gemm(x_hb, w_t, counter_key="pg_fwd_msb", out_dtype=np.float64) + bias[None, :]
    o_hb = o_hb64.astype(REAL_DTYPE)
    delta = resolve_thresholds(cfg, thresholds, f_out)
    mask = (o_hb > delta[None, :]).astype(np.uint8)
    o_lb64 = sddmm(MaskedProductPlan(x_lb, w_t, mask), counter_key="pg_fwd_lsb",
                   out_dtype=np.float64)
    output = (o_hb64 + o_lb64).astype(REAL_DTYPE)
    gm = GateMask(mask.astype(np.int8))
    return PGDenseState(output=output, o_hb=o_hb, o_lb=o_lb64.astype(REAL_DTYPE),
                        mask=gm, sparsity=gm.sparsity, delta=delta, x_hb=x_hb,
                        x_lb=x_lb, weight=weight)


def pg_dense_backward(state: PGDenseState, upstream: np.ndarray, cfg: PGLayerConfig,
                      sparse_backprop: bool = True) -> PGLayerGrads:
    """Gradients for a gated dense layer.

    The low-plane terms of d weight and d input run as sampled products
    over the forward mask, costing exactly the forward's nnz * K. Raises
    GateStateError if the mask no longer matches o_hb and the thresholds,
    which happens when thresholds were updated between forward and
    backward.
    """
    if upstream.shape != state.output.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match output {state.output.shape}")
    mask = state.mask.mask.astype(np.uint8)
    if not np.array_equal(mask, (state.o_hb > state.delta[None, :]).astype(np.uint8)):
        raise GateStateError("gate mask is stale relative to o_hb and thresholds")

    w = state.weight
    d_w_hb = gemm(np.ascontiguousarray(upstream.T), state.x_hb, counter_key="pg_bwd_dw_msb")
    d_w_lb = masked_grad_rhs(upstream, state.x_lb, mask, counter_key="pg_bwd_dw_lsb").T
    d_weight = (d_w_hb + d_w_lb).astype(REAL_DTYPE)
    d_bias = upstream.sum(axis=0, dtype=np.float64).astype(REAL_DTYPE)

    if cfg.mode == "fixed":
        d_threshold = np.zeros_like(state.delta)
    else:
        up_cm = np.ascontiguousarray(upstream.T)
        o_hb_cm = np.ascontiguousarray(state.o_hb.T)
        if sparse_backprop:
            outer = 2.0 * mask.T.astype(np.float64)
            o_lb_cm = np.ascontiguousarray(state.o_lb.T)
        else:
            o_lb_dense = sddmm(MaskedProductPlan(state.x_lb, np.ascontiguousarray(w.T),
                                                 np.ones_like(mask)),
                               counter_key="pg_bwd_olb_dense")
            outer = np.ones(up_cm.shape, dtype=np.float64)
            o_lb_cm = np.ascontiguousarray(o_lb_dense.T)
        d_threshold = threshold_grad(up_cm, outer, o_lb_cm, o_hb_cm, state.delta,
                                     cfg.surrogate_slope)

    w_t = np.ascontiguousarray(w.T)
    d_x_hb = gemm(upstream, w, counter_key="pg_bwd_dx_msb")
    d_x_lb = masked_grad_lhs(upstream, w_t, mask, counter_key="pg_bwd_dx_lsb")
    d_input = (d_x_hb + d_x_lb).astype(REAL_DTYPE)
    return PGLayerGrads(d_weight=d_weight, d_bias=d_bias, d_threshold=d_threshold, d_input=d_input)


@dataclass
class PGConvState:
    """Forward products a gated conv layer keeps for its backward pass.

    Matrices are in lowered layout: weights (C_out, C_in*kh*kw), patches
    (C_in*kh*kw, N*OH*OW), outputs (C_out, N*OH*OW) with column index
    l = ((n * OH + oh) * OW + ow).
    """

    output: np.ndarray          # (N, C_out, OH, OW)
    o_hb: np.ndarray            # (N, C_out, OH, OW)
    mask: GateMask              # (N, C_out, OH, OW)
    sparsity: float
    delta: np.ndarray           # (C_out,)
    o_hb_mat: np.ndarray
    o_lb_mat: np.ndarray        # zeros where gated off
    mask_mat: np.ndarray
    cols_hb: np.ndarray
    cols_lb: np.ndarray
    w_mat: np.ndarray
    x_shape: tuple[int, int, int, int]
    geometry: tuple[int, int, int, int, int, int]  # kh, kw, stride, pad, oh, ow

    def drop_backward_cache(self) -> None:
        """Release the lowered matrices (for inference-only forwards)."""
        empty = np.empty((0, 0), dtype=REAL_DTYPE)
        self.o_hb_mat = empty
        self.o_lb_mat = empty
        self.mask_mat = np.empty((0, 0), dtype=np.uint8)
        self.cols_hb = empty
        self.cols_lb = empty


def _mat_to_maps(mat: np.ndarray, n: int, oh: int, ow: int) -> np.ndarray:
    return mat.reshape(mat.shape[0], n, oh, ow).transpose(1, 0, 2, 3)


def _maps_to_mat(maps: np.ndarray) -> np.ndarray:
    n, c, oh, ow = maps.shape
    return np.ascontiguousarray(maps.transpose(1, 0, 2, 3).reshape(c, n * oh * ow))


def pg_conv_forward(split: SplitActivation, weight: np.ndarray, bias: np.ndarray,
                    thresholds: GateThresholds, cfg: PGLayerConfig,
                    stride: int = 1, pad: int = 1) -> PGConvState:
    """Gated 2-d convolution via im2col lowering.

    Input split is (N, C_in, H, W); weight is (C_out, C_in, kh, kw). The
    prediction pass is one dense gemm on the high-plane patches, the update
    pass one sampled product on the low-plane patches over the gate mask.
    """
    if split.msb.ndim != 4:
        raise ShapeError(f"conv input must be 4-d, got shape {split.msb.shape}")
    if weight.ndim != 4 or weight.shape[1] != split.msb.shape[1]:
        raise ShapeError(f"weight {weight.shape} does not match input {split.msb.shape}")
    if split.msb_bits != cfg.msb_bits or split.params.bits != cfg.bits:
        raise ValueError("activation split widths do not match the layer config")
    c_out, _, kh, kw = weight.shape
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} outputs")

    n, _, h, w = split.msb.shape
    x_hb = split.dequantize_msb()
    x_lb = split.dequantize_lsb()
    cols_hb = im2col(x_hb, kh, kw, stride, pad)
    cols_lb = im2col(x_lb, kh, kw, stride, pad)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    w_mat = np.ascontiguousarray(weight.reshape(c_out, -1))

    # combine the phases at accumulator precision, round to float32 once
    o_hb_mat64 = gemm(w_mat, cols_hb, counter_key="pg_fwd_msb", out_dtype=np.float64) + bias[:, None]
    o_hb_mat = o_hb_mat64.astype(REAL_DTYPE)
    delta = resolve_thresholds(cfg, thresholds, c_out)
    mask_mat = gate_decisions(o_hb_mat, delta)
    o_lb_mat64 = sddmm(MaskedProductPlan(w_mat, cols_lb, mask_mat), counter_key="pg_fwd_lsb",
                       out_dtype=np.float64)
    out_mat = (o_hb_mat64 + o_lb_mat64).astype(REAL_DTYPE)
    o_lb_mat = o_lb_mat64.astype(REAL_DTYPE)

    gm = GateMask(_mat_to_maps(mask_mat, n, oh, ow).astype(np.int8))
    return PGConvState(output=_mat_to_maps(out_mat, n, oh, ow),
                       o_hb=_mat_to_maps(o_hb_mat, n, oh, ow),
                       mask=gm, sparsity=gm.sparsity, delta=delta,
                       o_hb_mat=o_hb_mat, o_lb_mat=o_lb_mat, mask_mat=mask_mat,
                       cols_hb=cols_hb, cols_lb=cols_lb, w_mat=w_mat,
                       x_shape=(n, split.msb.shape[1], h, w),
                       geometry=(kh, kw, stride, pad, oh, ow))


def pg_conv_backward(state: PGConvState, upstream: np.ndarray, cfg: PGLayerConfig,
                     sparse_backprop: bool = True) -> PGLayerGrads:
    """Gradients for a gated conv layer, mirroring pg_dense_backward.

    d_input is the gradient with respect to the dequantized input maps
    (the caller still owes the straight-through and clip backward steps).
    """
    if upstream.shape != state.output.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match output {state.output.shape}")
    if state.cols_hb.size == 0:
        raise GateStateError("backward cache was dropped; rerun the forward pass")
    if not np.array_equal(state.mask_mat, gate_decisions(state.o_hb_mat, state.delta)):
        raise GateStateError("gate mask is stale relative to o_hb and thresholds")

    kh, kw, stride, pad, _, _ = state.geometry
    g_mat = _maps_to_mat(upstream)
    mask_mat = state.mask_mat

    d_w_hb = gemm(g_mat, np.ascontiguousarray(state.cols_hb.T), counter_key="pg_bwd_dw_msb")
    d_w_lb = masked_grad_lhs(g_mat, state.cols_lb, mask_mat, counter_key="pg_bwd_dw_lsb")
    c_out = state.w_mat.shape[0]
    d_weight = (d_w_hb + d_w_lb).reshape(c_out, state.x_shape[1], kh, kw).astype(REAL_DTYPE)
    d_bias = g_mat.sum(axis=1, dtype=np.float64).astype(REAL_DTYPE)

    if cfg.mode == "fixed":
        d_threshold = np.zeros_like(state.delta)
    else:
        if sparse_backprop:
            outer = 2.0 * mask_mat.astype(np.float64)
            o_lb_cm = state.o_lb_mat
        else:
            o_lb_cm = sddmm(MaskedProductPlan(state.w_mat, state.cols_lb, np.ones_like(mask_mat)),
                            counter_key="pg_bwd_olb_dense")
            outer = np.ones(g_mat.shape, dtype=np.float64)
        d_threshold = threshold_grad(g_mat, outer, o_lb_cm, state.o_hb_mat, state.delta,
                                     cfg.surrogate_slope)

    d_cols_hb = gemm(np.ascontiguousarray(state.w_mat.T), g_mat, counter_key="pg_bwd_dx_msb")
    d_cols_lb = masked_grad_rhs(g_mat, state.w_mat, mask_mat, counter_key="pg_bwd_dx_lsb")
    d_input = col2im(d_cols_hb + d_cols_lb, state.x_shape, kh, kw, stride, pad)
    return PGLayerGrads(d_weight=d_weight, d_bias=d_bias, d_threshold=d_threshold, d_input=d_input)
