"""Cost and quality metrics for gated models.

The central quantity is the effective average bitwidth of a gated layer:
every output reads its inputs at msb_bits, and the (1 - sparsity) fraction
that fires the gate reads the remaining planes too, so

    b_avg = msb_bits + (1 - sparsity) * (bits - msb_bits)

which lands at msb_bits when everything is gated off and at the full width
when nothing is. Multiply-accumulate savings from gating follow directly:
the skipped fraction of work is sparsity * lsb_bits / bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def avg_bitwidth(bits: int, msb_bits: int, sparsity: float) -> float:
    """Effective bitwidth msb_bits + (1 - sparsity) * (bits - msb_bits)."""
    if not 1 <= msb_bits < bits:
        raise ValueError(f"msb_bits must be in [1, {bits - 1}], got {msb_bits}")
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must be in [0, 1], got {sparsity}")
    return msb_bits + (1.0 - sparsity) * (bits - msb_bits)


def compute_savings(bits: int, msb_bits: int, sparsity: float) -> float:
    """Fraction of full-width multiply-accumulate work removed by gating."""
    avg_bitwidth(bits, msb_bits, sparsity)  # reuse its argument validation
    return sparsity * (bits - msb_bits) / bits


@dataclass
class EpochMetrics:
    """One row of the training/evaluation record."""

    epoch: int
    loss: float
    accuracy: float
    per_layer_sp: list[float]
    model_sp: float
    b_avg: float


class GateStats:
    """Accumulates gate activity across batches, per gated layer.

    Sparsities are exact ratios of gated-off outputs to total outputs over
    everything recorded, not averages of per-batch averages, so batch-size
    ragging cannot skew them.
    """

    def __init__(self):
        self._off: dict[str, int] = {}
        self._total: dict[str, int] = {}
        self._order: list[str] = []

    def record(self, layer: str, mask: np.ndarray, msb_codes=None) -> None:
        if layer not in self._off:
            self._off[layer] = 0
            self._total[layer] = 0
            self._order.append(layer)
        on = int(mask.sum(dtype=np.int64))
        self._off[layer] += mask.size - on
        self._total[layer] += mask.size

    @property
    def layers(self) -> list[str]:
        return list(self._order)

    def sparsity(self, layer: str) -> float:
        total = self._total[layer]
        return self._off[layer] / total if total else 0.0

    def per_layer(self) -> list[float]:
        return [self.sparsity(name) for name in self._order]

    def model_sparsity(self) -> float:
        """Output-count-weighted sparsity across all gated layers."""
        total = sum(self._total.values())
        if total == 0:
            return 0.0
        return sum(self._off.values()) / total


def aggregate_model_metrics(stats: GateStats, bits: int, msb_bits: int) -> tuple[list[float], float, float]:
    """(per-layer sparsity, model sparsity, model b_avg) for uniform widths.

    With every gated layer sharing one (bits, msb_bits) pair, the
    output-weighted sparsity composes exactly into the model-level average
    bitwidth via the same linear formula.
    """
    sp = stats.model_sparsity()
    return stats.per_layer(), sp, avg_bitwidth(bits, msb_bits, sp)
