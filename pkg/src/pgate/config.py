"""Experiment configuration: a strict INI dialect.

Strict means: unknown sections or keys are errors, values are typed, and
referenced input files must exist at load time. Relative dataset and
checkpoint paths resolve against the PG_DATA_DIR environment variable when
it is set, else against the directory containing the config file, so a
config can travel with its data.

serialize_config writes the fully-explicit canonical form (every key of
every present section, fixed order, repr-formatted floats). Loading the
serialized text reproduces the config exactly, and serializing again is
byte-identical.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .gating import GATE_MODES, PGLayerConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """The config file is malformed, has unknown keys, or references
    missing files."""


@dataclass(frozen=True)
class DatasetPaths:
    train_images: Path
    train_labels: Path
    test_images: Path
    test_labels: Path


@dataclass(frozen=True)
class ModelSettings:
    arch: str  # "mlp" or "cnn"
    classes: int = 10
    hidden: int = 128
    channels: tuple[int, ...] = (16, 16, 32, 32, 64, 64)


@dataclass(frozen=True)
class BenchSettings:
    dims: str | tuple[tuple[int, int, int], ...] = "resnet20"
    sparsities: tuple[float, ...] = (0.5, 0.76, 0.9, 0.99)
    repeats: int = 5


@dataclass(frozen=True)
class MapsSettings:
    layer: str = ""
    count: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    output_dir: Path
    checkpoint: Path | None = None
    dataset: DatasetPaths | None = None
    model: ModelSettings | None = None
    pg: PGLayerConfig | None = None
    train: TrainConfig | None = None
    bench: BenchSettings = BenchSettings()
    sweep_thresholds: tuple[float, ...] = (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
    maps: MapsSettings = MapsSettings()


_SCHEMA: dict[str, tuple[str, ...]] = {
    "experiment": ("name", "output_dir", "checkpoint"),
    "dataset": ("train_images", "train_labels", "test_images", "test_labels"),
    "model": ("arch", "classes", "hidden", "channels"),
    "pg": ("bits", "msb_bits", "penalty", "threshold_target", "surrogate_slope",
           "mode", "fixed_threshold", "quantize_weights"),
    "train": ("epochs", "batch_size", "lr", "momentum", "lr_decay_epochs",
              "lr_decay_factor", "seed", "sparse_backprop", "shuffle"),
    "bench": ("dims", "sparsities", "repeats"),
    "sweep": ("thresholds",),
    "maps": ("layer", "count"),
}


def _resolve_input_path(raw: str, base: Path) -> Path:
    p = Path(raw)
    if p.is_absolute():
        return p
    env = os.environ.get("PG_DATA_DIR")
    return (Path(env) / p) if env else (base / p)


class _Section:
    """Typed accessors over one parsed section."""

    def __init__(self, name: str, items: dict[str, str]):
        self.name = name
        self.items = items

    def require(self, key: str) -> str:
        if key not in self.items:
            raise ConfigError(f"[{self.name}] is missing required key {key!r}")
        return self.items[key]

    def get(self, key: str, default: str) -> str:
        return self.items.get(key, default)

    def _convert(self, key: str, raw: str, conv, kind: str):
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} = {raw!r} is not {kind}") from None

    def get_int(self, key: str, default: int | None = None) -> int:
        raw = self.require(key) if default is None else self.get(key, str(default))
        return self._convert(key, raw, int, "an integer")

    def get_float(self, key: str, default: float | None = None) -> float:
        raw = self.require(key) if default is None else self.get(key, repr(default))
        return self._convert(key, raw, float, "a number")

    def get_bool(self, key: str, default: bool) -> bool:
        raw = self.get(key, "true" if default else "false").lower()
        if raw in ("true", "1", "yes", "on"):
            return True
        if raw in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a boolean")

    def get_int_list(self, key: str, default: str) -> tuple[int, ...]:
        raw = self.get(key, default).strip()
        if not raw:
            return ()
        return tuple(self._convert(key, v.strip(), int, "an integer") for v in raw.split(","))

    def get_float_list(self, key: str, default: str) -> tuple[float, ...]:
        raw = self.get(key, default).strip()
        if not raw:
            return ()
        return tuple(self._convert(key, v.strip(), float, "a number") for v in raw.split(","))


def _parse_sections(text: str, origin: str) -> dict[str, _Section]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as e:
        raise ConfigError(f"{origin}: {e}") from None
    sections = {}
    for sec in parser.sections():
        if sec not in _SCHEMA:
            raise ConfigError(f"{origin}: unknown section [{sec}]")
        for key in parser[sec]:
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"{origin}: unknown key {key!r} in [{sec}]")
        sections[sec] = _Section(sec, dict(parser[sec]))
    if "experiment" not in sections:
        raise ConfigError(f"{origin}: missing required section [experiment]")
    return sections


def _parse_dims(raw: str) -> str | tuple[tuple[int, int, int], ...]:
    raw = raw.strip()
    if raw == "resnet20":
        return raw
    dims = []
    for part in raw.split(";"):
        nums = [v.strip() for v in part.split(",")]
        if len(nums) != 3:
            raise ConfigError(f"bench dims entry {part!r} is not m,k,n")
        try:
            dims.append(tuple(int(v) for v in nums))
        except ValueError:
            raise ConfigError(f"bench dims entry {part!r} is not m,k,n") from None
    if not dims:
        raise ConfigError("bench dims is empty")
    return tuple(dims)


def load_config_text(text: str, base_dir: Path, origin: str = "<config>") -> ExperimentConfig:
    sections = _parse_sections(text, origin)

    exp = sections["experiment"]
    name = exp.require("name")
    output_dir = Path(exp.require("output_dir"))
    checkpoint = None
    if "checkpoint" in exp.items:
        # Existence is checked by the commands that read it; train writes
        # the same path, so one config can drive the whole workflow.
        checkpoint = _resolve_input_path(exp.items["checkpoint"], base_dir)

    dataset = None
    if "dataset" in sections:
        sec = sections["dataset"]
        paths = {}
        for key in _SCHEMA["dataset"]:
            p = _resolve_input_path(sec.require(key), base_dir)
            if not p.is_file():
                raise ConfigError(f"dataset file does not exist: {p}")
            paths[key] = p
        dataset = DatasetPaths(**paths)

    model = None
    if "model" in sections:
        sec = sections["model"]
        arch = sec.require("arch")
        if arch not in ("mlp", "cnn"):
            raise ConfigError(f"[model] arch must be mlp or cnn, got {arch!r}")
        model = ModelSettings(arch=arch, classes=sec.get_int("classes", 10),
                              hidden=sec.get_int("hidden", 128),
                              channels=sec.get_int_list("channels", "16,16,32,32,64,64"))

    pg = None
    if "pg" in sections:
        sec = sections["pg"]
        mode = sec.get("mode", "learnable")
        if mode not in GATE_MODES:
            raise ConfigError(f"[pg] mode must be one of {GATE_MODES}, got {mode!r}")
        try:
            pg = PGLayerConfig(bits=sec.get_int("bits"), msb_bits=sec.get_int("msb_bits"),
                               penalty=sec.get_float("penalty", 0.0),
                               threshold_target=sec.get_float("threshold_target", 0.0),
                               surrogate_slope=sec.get_float("surrogate_slope", 5.0),
                               mode=mode, fixed_threshold=sec.get_float("fixed_threshold", 0.0),
                               quantize_weights=sec.get_bool("quantize_weights", False))
        except ConfigError:
            raise  # accessor errors carry the section tag already
        except ValueError as e:
            raise ConfigError(f"[pg] {e}") from None

    train = None
    if "train" in sections:
        sec = sections["train"]
        try:
            train = TrainConfig(epochs=sec.get_int("epochs", 10),
                                batch_size=sec.get_int("batch_size", 64),
                                lr=sec.get_float("lr", 0.1),
                                momentum=sec.get_float("momentum", 0.9),
                                lr_decay_epochs=sec.get_int_list("lr_decay_epochs", ""),
                                lr_decay_factor=sec.get_float("lr_decay_factor", 0.1),
                                seed=sec.get_int("seed", 0),
                                sparse_backprop=sec.get_bool("sparse_backprop", True),
                                shuffle=sec.get_bool("shuffle", True))
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"[train] {e}") from None

    bench = BenchSettings()
    if "bench" in sections:
        sec = sections["bench"]
        repeats = sec.get_int("repeats", 5)
        if repeats < 3:
            raise ConfigError(f"[bench] repeats must be >= 3, got {repeats}")
        sparsities = sec.get_float_list("sparsities", "0.5,0.76,0.9,0.99")
        for sp in sparsities:
            if not 0.0 <= sp < 1.0:
                raise ConfigError(f"[bench] sparsity {sp} outside [0, 1)")
        bench = BenchSettings(dims=_parse_dims(sec.get("dims", "resnet20")),
                              sparsities=sparsities, repeats=repeats)

    sweep_thresholds = (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
    if "sweep" in sections:
        sweep_thresholds = sections["sweep"].get_float_list("thresholds", "-4,-2,-1,0,1,2,3")
        if not sweep_thresholds:
            raise ConfigError("[sweep] thresholds is empty")

    maps = MapsSettings()
    if "maps" in sections:
        sec = sections["maps"]
        count = sec.get_int("count", 8)
        if count < 1:
            raise ConfigError(f"[maps] count must be >= 1, got {count}")
        maps = MapsSettings(layer=sec.get("layer", ""), count=count)

    return ExperimentConfig(name=name, output_dir=output_dir, checkpoint=checkpoint,
                            dataset=dataset, model=model, pg=pg, train=train,
                            bench=bench, sweep_thresholds=sweep_thresholds, maps=maps)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file does not exist: {path}")
    return load_config_text(path.read_text(), base_dir=path.parent.resolve(), origin=str(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical, fully-explicit INI text for the config."""
    lines: list[str] = []

    def section(name: str, pairs: list[tuple[str, str]]):
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in pairs)

    exp_pairs = [("name", cfg.name), ("output_dir", str(cfg.output_dir))]
    if cfg.checkpoint is not None:
        exp_pairs.append(("checkpoint", str(cfg.checkpoint)))
    section("experiment", exp_pairs)

    if cfg.dataset is not None:
        section("dataset", [(k, str(getattr(cfg.dataset, k))) for k in _SCHEMA["dataset"]])
    if cfg.model is not None:
        section("model", [("arch", cfg.model.arch), ("classes", str(cfg.model.classes)),
                          ("hidden", str(cfg.model.hidden)),
                          ("channels", ",".join(map(str, cfg.model.channels)))])
    if cfg.pg is not None:
        section("pg", [("bits", str(cfg.pg.bits)), ("msb_bits", str(cfg.pg.msb_bits)),
                       ("penalty", _fmt(cfg.pg.penalty)),
                       ("threshold_target", _fmt(cfg.pg.threshold_target)),
                       ("surrogate_slope", _fmt(cfg.pg.surrogate_slope)),
                       ("mode", cfg.pg.mode),
                       ("fixed_threshold", _fmt(cfg.pg.fixed_threshold)),
                       ("quantize_weights", _fmt(cfg.pg.quantize_weights))])
    if cfg.train is not None:
        section("train", [("epochs", str(cfg.train.epochs)),
                          ("batch_size", str(cfg.train.batch_size)),
                          ("lr", _fmt(cfg.train.lr)), ("momentum", _fmt(cfg.train.momentum)),
                          ("lr_decay_epochs", ",".join(map(str, cfg.train.lr_decay_epochs))),
                          ("lr_decay_factor", _fmt(cfg.train.lr_decay_factor)),
                          ("seed", str(cfg.train.seed)),
                          ("sparse_backprop", _fmt(cfg.train.sparse_backprop)),
                          ("shuffle", _fmt(cfg.train.shuffle))])
    dims = cfg.bench.dims if isinstance(cfg.bench.dims, str) else \
        ";".join(",".join(map(str, d)) for d in cfg.bench.dims)
    section("bench", [("dims", dims),
                      ("sparsities", ",".join(repr(s) for s in cfg.bench.sparsities)),
                      ("repeats", str(cfg.bench.repeats))])
    section("sweep", [("thresholds", ",".join(repr(t) for t in cfg.sweep_thresholds))])
    section("maps", [("layer", cfg.maps.layer), ("count", str(cfg.maps.count))])
    return "\n".join(lines) + "\n"
