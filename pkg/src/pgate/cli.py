"""Command-line entry point.

    pg train       --config FILE [--out DIR] [--seed N]
    pg eval        --config FILE [--out DIR]
    pg sweep       --config FILE [--out DIR]
    pg bench       --config FILE [--out DIR] [--seed N] [--threads N]
    pg export-maps --config FILE [--out DIR]

Exit codes: 0 on success, 1 on runtime failure, 2 on configuration errors.
Training always runs the sequential kernels so a seed pins the run
bit for bit; --threads only affects the bench command.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import Dataset, load_dataset
from .kernels import bench_kernels
from .layers import PGConv2d
from .model import ModelSpec, cnn_spec, mlp_spec
from .reporting import (
    export_decision_maps,
    write_bench_csv,
    write_metrics_csv,
    write_results_csv,
    write_sweep_csv,
)
from .train import evaluate, sweep_fixed_threshold, train


def _require(cfg: ExperimentConfig, command: str, **parts) -> None:
    missing = [name for name, value in parts.items() if value is None]
    if missing:
        raise ConfigError(f"{command} needs the {', '.join(f'[{m}]' for m in missing)} "
                          f"section(s) in the config")
    ckpt = parts.get("checkpoint")
    if ckpt is not None and not ckpt.is_dir():
        raise ConfigError(f"checkpoint directory does not exist: {ckpt}")


def _load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    return (load_dataset(ds.train_images, ds.train_labels),
            load_dataset(ds.test_images, ds.test_labels))


def _build_spec(cfg: ExperimentConfig, data: Dataset) -> ModelSpec:
    input_shape = data.images.shape[1:]
    if cfg.model.arch == "mlp":
        return mlp_spec(cfg.pg, input_shape=input_shape, hidden=cfg.model.hidden,
                        classes=cfg.model.classes)
    return cnn_spec(cfg.pg, input_shape=input_shape, channels=cfg.model.channels,
                    classes=cfg.model.classes)


def _cmd_train(cfg: ExperimentConfig, out_dir: Path, args) -> int:
    _require(cfg, "train", dataset=cfg.dataset, model=cfg.model, pg=cfg.pg, train=cfg.train)
    tc = cfg.train
    if args.seed is not None:
        tc = dataclasses.replace(tc, seed=args.seed)
    train_ds, test_ds = _load_datasets(cfg)
    spec = _build_spec(cfg, train_ds)
    model, metrics = train(spec, train_ds, test_ds, tc)
    bits, msb_bits = model.pg_widths()

    layer_names = [name for name, _ in model.pg_layers()]
    metrics_path = write_metrics_csv(out_dir / "metrics.csv", metrics, layer_names)
    final = metrics[-1]
    results_path = write_results_csv(out_dir / "results.csv", bits, msb_bits,
                                     final.model_sp, final.accuracy)
    ckpt = save_checkpoint(out_dir / "checkpoint", model, metrics,
                           extra={"experiment": cfg.name, "bits": bits, "msb_bits": msb_bits})
    print(f"accuracy {final.accuracy:.4f}  sparsity {final.model_sp:.4f}  b_avg {final.b_avg:.3f}")
    print(f"wrote {metrics_path}")
    print(f"wrote {results_path}")
    print(f"wrote {ckpt}/")
    return 0


def _cmd_eval(cfg: ExperimentConfig, out_dir: Path, args) -> int:
    _require(cfg, "eval", dataset=cfg.dataset, checkpoint=cfg.checkpoint)
    _, test_ds = _load_datasets(cfg)
    model, _, _ = load_checkpoint(cfg.checkpoint)
    ev = evaluate(model, test_ds)
    bits, msb_bits = model.pg_widths()
    path = write_results_csv(out_dir / "eval.csv", bits, msb_bits, ev.model_sp, ev.accuracy)
    print(f"accuracy {ev.accuracy:.4f}  sparsity {ev.model_sp:.4f}  b_avg {ev.b_avg:.3f}")
    print(f"wrote {path}")
    return 0


def _cmd_sweep(cfg: ExperimentConfig, out_dir: Path, args) -> int:
    _require(cfg, "sweep", dataset=cfg.dataset, checkpoint=cfg.checkpoint)
    _, test_ds = _load_datasets(cfg)
    model, _, _ = load_checkpoint(cfg.checkpoint)
    model.set_gating_mode("fixed")
    points = sweep_fixed_threshold(model, test_ds, list(cfg.sweep_thresholds))
    bits, msb_bits = model.pg_widths()
    path = write_sweep_csv(out_dir / "sweep.csv", points, bits, msb_bits)
    for pt in points:
        print(f"threshold {pt.threshold:+.2f}  sparsity {pt.sparsity:.4f}  "
              f"b_avg {pt.b_avg:.3f}  accuracy {pt.accuracy:.4f}")
    print(f"wrote {path}")
    return 0


def _cmd_bench(cfg: ExperimentConfig, out_dir: Path, args) -> int:
    dims = None if isinstance(cfg.bench.dims, str) else [tuple(d) for d in cfg.bench.dims]
    results = bench_kernels(dims=dims, sparsities=cfg.bench.sparsities,
                            repeats=cfg.bench.repeats, threads=args.threads,
                            seed=args.seed if args.seed is not None else 0)
    path = write_bench_csv(out_dir / "bench.csv", results)
    for r in results:
        if r.kernel == "sddmm":
            print(f"({r.m},{r.k},{r.n}) sparsity {r.sparsity:.2f}: {r.time_ms:.2f} ms, "
                  f"speedup {r.speedup:.2f}x")
    print(f"wrote {path}")
    return 0


def _cmd_export_maps(cfg: ExperimentConfig, out_dir: Path, args) -> int:
    _require(cfg, "export-maps", dataset=cfg.dataset, checkpoint=cfg.checkpoint)
    _, test_ds = _load_datasets(cfg)
    model, _, _ = load_checkpoint(cfg.checkpoint)
    layer = cfg.maps.layer
    if not layer:
        conv_names = [n for n, l in model.pg_layers() if isinstance(l, PGConv2d)]
        if not conv_names:
            raise ValueError("model has no gated conv layer to map")
        layer = conv_names[-1]
    paths = export_decision_maps(model, test_ds, layer, out_dir / "maps", cfg.maps.count)
    print(f"wrote {len(paths)} maps for layer {layer} under {out_dir / 'maps'}/")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "bench": _cmd_bench,
    "export-maps": _cmd_export_maps,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pg",
                                     description="dual-precision gated network engine")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--threads", type=int, default=1,
                       help="kernel threads (bench only)")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        out_dir = Path(args.out) if args.out else cfg.output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, out_dir, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary maps failures to exit 1
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
