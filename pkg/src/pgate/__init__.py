"""Dual-precision gated neural network engine.

Activations are quantized to B bits and split into MSB/LSB planes; every
layer output is first predicted from the MSBs alone, and only outputs
whose prediction clears a learned per-channel threshold receive the LSB
refinement, computed with sparse sampled-product kernels. Training learns
weights, clips, and thresholds jointly, with a sigmoid surrogate standing
in for the hard gate on the backward pass only.
"""

from .gating import (
    GateMask,
    GateStateError,
    GateThresholds,
    PGLayerConfig,
    PGLayerGrads,
    pg_conv_backward,
    pg_conv_forward,
    pg_dense_backward,
    pg_dense_forward,
    threshold_penalty,
)
from .kernels import MACS, BenchResult, MaskedProductPlan, bench_kernels, gemm, sddmm
from .metrics import EpochMetrics, GateStats, avg_bitwidth, compute_savings
from .model import LayerSpec, Model, ModelSpec, build_model, cnn_spec, mlp_spec
from .quantize import (
    QuantParams,
    QuantizedActivation,
    SplitActivation,
    pact_clip_backward,
    pact_clip_forward,
    quantize,
    split_bits,
)
from .train import TrainConfig, TrainingDiverged, evaluate, sweep_fixed_threshold, train

__version__ = "0.1.0"

__all__ = [
    "GateMask", "GateStateError", "GateThresholds", "PGLayerConfig", "PGLayerGrads",
    "pg_conv_backward", "pg_conv_forward", "pg_dense_backward", "pg_dense_forward",
    "threshold_penalty", "MACS", "BenchResult", "MaskedProductPlan", "bench_kernels",
    "gemm", "sddmm", "EpochMetrics", "GateStats", "avg_bitwidth", "compute_savings",
    "LayerSpec", "Model", "ModelSpec", "build_model", "cnn_spec", "mlp_spec",
    "QuantParams", "QuantizedActivation", "SplitActivation", "pact_clip_backward",
    "pact_clip_forward", "quantize", "split_bits", "TrainConfig", "TrainingDiverged",
    "evaluate", "sweep_fixed_threshold", "train", "__version__",
]
