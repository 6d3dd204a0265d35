"""Result files: CSV reports and gate decision-map images.

Every float is written with repr(), which round-trips exactly through
float(), so a written file is a function of the run's numbers alone and
identical runs produce byte-identical files. Derived columns (the average
bitwidth) are recomputed from the values as written, not the values in
memory, so a reader re-deriving them from the parsed file gets exact
agreement.

Decision maps visualize where a gated conv layer spends its update phase:
pixel (i, j) is the fraction of output channels that fired the gate at
that position, averaged over channels, scaled to an 8-bit grayscale PGM.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .layers import PGConv2d
from .metrics import EpochMetrics, avg_bitwidth
from .model import Model


def format_float(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def write_metrics_csv(path, metrics: list[EpochMetrics], layer_names: list[str]) -> Path:
    """Per-epoch training record, one sparsity column per gated layer."""
    header = ["epoch", "loss", "accuracy", "model_sp", "b_avg"] + [f"sp_{n}" for n in layer_names]
    rows = []
    for m in metrics:
        if len(m.per_layer_sp) != len(layer_names):
            raise ValueError(f"epoch {m.epoch}: {len(m.per_layer_sp)} layer sparsities "
                             f"for {len(layer_names)} layers")
        rows.append([str(m.epoch), format_float(m.loss), format_float(m.accuracy),
                     format_float(m.model_sp), format_float(m.b_avg)]
                    + [format_float(s) for s in m.per_layer_sp])
    _write_csv(path, header, rows)
    return Path(path)


def write_results_csv(path, bits: int, msb_bits: int, sparsity: float, accuracy: float) -> Path:
    """Single-row summary; b_avg is derived from the sparsity as printed."""
    sp_str = format_float(sparsity)
    b_avg = avg_bitwidth(bits, msb_bits, float(sp_str))
    _write_csv(path, ["bits", "msb_bits", "sparsity", "b_avg", "accuracy"],
               [[str(bits), str(msb_bits), sp_str, format_float(b_avg), format_float(accuracy)]])
    return Path(path)


def write_sweep_csv(path, points, bits: int, msb_bits: int) -> Path:
    """Fixed-threshold sweep table, again with b_avg derived from the
    printed sparsity."""
    rows = []
    for pt in points:
        sp_str = format_float(pt.sparsity)
        b_avg = avg_bitwidth(bits, msb_bits, float(sp_str))
        rows.append([format_float(pt.threshold), sp_str, format_float(b_avg),
                     format_float(pt.accuracy)])
    _write_csv(path, ["threshold", "sparsity", "b_avg", "accuracy"], rows)
    return Path(path)


def write_bench_csv(path, results) -> Path:
    rows = [[r.kernel, str(r.m), str(r.k), str(r.n), format_float(r.sparsity),
             str(r.threads), format_float(r.time_ms), str(r.mac_count),
             format_float(r.speedup)] for r in results]
    _write_csv(path, ["kernel", "m", "k", "n", "sparsity", "threads", "time_ms",
                      "mac_count", "speedup"], rows)
    return Path(path)


@dataclass(frozen=True)
class DecisionMap:
    """Per-position update-phase ratio for one example at one layer."""

    layer: str
    index: int
    grid: np.ndarray  # (OH, OW) float32 in [0, 1]


class MaskCapture:
    """Recorder that keeps the raw gate masks of selected layers."""

    def __init__(self, layers: set[str] | None = None):
        self.layers = layers
        self.masks: dict[str, list[np.ndarray]] = {}

    def record(self, name, mask, msb_codes) -> None:
        if self.layers is None or name in self.layers:
            self.masks.setdefault(name, []).append(mask)


def compute_decision_maps(model: Model, images: np.ndarray, layer_name: str) -> list[DecisionMap]:
    """Channel-mean gate activity per spatial position, one map per example.

    The layer must be a gated conv layer (dense gates have no spatial
    arrangement to draw).
    """
    target = None
    for name, layer in model.pg_layers():
        if name == layer_name:
            target = layer
    if target is None or not isinstance(target, PGConv2d):
        raise ValueError(f"{layer_name!r} is not a gated conv layer of this model")
    cap = MaskCapture({layer_name})
    model.forward(images, train=False, recorder=cap)
    mask = np.concatenate(cap.masks[layer_name], axis=0)  # (N, C, OH, OW)
    ratios = mask.astype(np.float32).mean(axis=1)
    return [DecisionMap(layer=layer_name, index=i, grid=ratios[i])
            for i in range(ratios.shape[0])]


def write_pgm(path, grid: np.ndarray) -> Path:
    """Write a [0, 1] grid as a binary 8-bit PGM (P5), 0 = never updated."""
    if grid.ndim != 2:
        raise ValueError(f"expected a 2-d grid, got shape {grid.shape}")
    if grid.size and (grid.min() < 0.0 or grid.max() > 1.0):
        raise ValueError("grid values must lie in [0, 1]")
    h, w = grid.shape
    pixels = np.floor(grid.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
    return Path(path)


def export_decision_maps(model: Model, data: Dataset, layer_name: str, out_dir,
                         count: int = 8) -> list[Path]:
    """Render decision maps for the first `count` examples of the set."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = data.images[:count]
    paths = []
    for dm in compute_decision_maps(model, images, layer_name):
        p = out_dir / f"map_{dm.layer}_{dm.index:03d}.pgm"
        write_pgm(p, dm.grid)
        paths.append(p)
    return paths
