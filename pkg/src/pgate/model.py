"""Model assembly: declarative layer specs, the sequential container, and
the two reference architectures (a gated MLP and a gated CNN).

A ModelSpec is plain data (JSON-serializable) so checkpoints can rebuild
the exact architecture without executing anything; build_model turns it
into live layers with freshly initialized parameters drawn from the given
generator.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .gating import PGLayerConfig
from .layers import Dense, Flatten, GlobalAvgPool, Layer, MaxPool2d, Param, PGConv2d, PGDense
from .tensor import ShapeError

LAYER_KINDS = ("pg_conv", "pg_dense", "dense", "maxpool", "gap", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    kernel_size: int = 3
    stride: int = 1
    pad: int = 1
    pool_size: int = 2
    pg: PGLayerConfig | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind.startswith("pg_") and self.pg is None:
            raise ValueError(f"{self.kind} layer needs a gating config")
        if self.kind in ("pg_conv", "pg_dense", "dense"):
            if self.in_features < 1 or self.out_features < 1:
                raise ValueError(f"{self.kind} layer needs positive in/out sizes")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]  # per-example shape, e.g. (1, 28, 28)
    classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if not self.layers:
            raise ValueError("model needs at least one layer")

    def to_json(self) -> str:
        def encode(spec: LayerSpec) -> dict:
            d = dataclasses.asdict(spec)
            return d

        payload = {
            "layers": [encode(s) for s in self.layers],
            "input_shape": list(self.input_shape),
            "classes": self.classes,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        payload = json.loads(text)
        layers = []
        for d in payload["layers"]:
            pg = d.pop("pg", None)
            layers.append(LayerSpec(pg=PGLayerConfig(**pg) if pg else None, **d))
        return cls(layers=tuple(layers), input_shape=tuple(payload["input_shape"]),
                   classes=int(payload["classes"]))


class Model:
    """Sequential container with a reverse-order backward pass."""

    def __init__(self, spec: ModelSpec, layers: list[Layer]):
        self.spec = spec
        self.layers = layers

    def forward(self, x: np.ndarray, train: bool = False, recorder=None) -> np.ndarray:
        if x.shape[1:] != self.spec.input_shape:
            raise ShapeError(f"expected input shape (N, {', '.join(map(str, self.spec.input_shape))}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train=train, recorder=recorder)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def parameters(self) -> list[tuple[str, Param]]:
        out = []
        for layer in self.layers:
            for p in layer.params():
                out.append((f"{layer.name}.{p.name}", p))
        return out

    def zero_grads(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def pg_layers(self) -> list[tuple[str, Layer]]:
        return [(layer.name, layer) for layer in self.layers
                if isinstance(layer, (PGConv2d, PGDense))]

    def pg_widths(self) -> tuple[int, int]:
        """The (bits, msb_bits) pair shared by every gated layer."""
        pairs = {(l.cfg.bits, l.cfg.msb_bits) for _, l in self.pg_layers()}
        if not pairs:
            raise ValueError("model has no gated layers")
        if len(pairs) > 1:
            raise ValueError(f"gated layers use mixed widths: {sorted(pairs)}")
        return pairs.pop()

    def set_sparse_backprop(self, enabled: bool) -> None:
        for _, layer in self.pg_layers():
            layer.sparse_backprop = enabled

    def set_gating_mode(self, mode: str, fixed_threshold: float = 0.0) -> None:
        """Switch every gated layer between learnable and fixed thresholds."""
        for _, layer in self.pg_layers():
            layer.set_cfg(dataclasses.replace(layer.cfg, mode=mode,
                                              fixed_threshold=fixed_threshold))

    def set_fixed_threshold(self, value: float) -> None:
        for _, layer in self.pg_layers():
            if layer.cfg.mode != "fixed":
                raise ValueError(f"layer {layer.name} is not in fixed gating mode")
            layer.set_cfg(dataclasses.replace(layer.cfg, fixed_threshold=value))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {path: p.value.copy() for path, p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for path, p in params.items():
            arr = np.asarray(state[path], dtype=p.value.dtype)
            if arr.shape != p.value.shape:
                raise ValueError(f"{path}: shape {arr.shape} does not match {p.value.shape}")
            p.value[...] = arr


def build_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """Instantiate layers with deterministic, generator-driven init."""
    layers: list[Layer] = []
    counts: dict[str, int] = {}

    def named(layer: Layer, stem: str) -> Layer:
        counts[stem] = counts.get(stem, 0) + 1
        layer.name = f"{stem}{counts[stem]}"
        return layer

    for ls in spec.layers:
        if ls.kind == "pg_conv":
            layers.append(named(PGConv2d(ls.in_features, ls.out_features, ls.kernel_size,
                                         ls.pg, ls.stride, ls.pad, rng), "conv"))
        elif ls.kind == "pg_dense":
            layers.append(named(PGDense(ls.in_features, ls.out_features, ls.pg, rng), "fc"))
        elif ls.kind == "dense":
            layers.append(named(Dense(ls.in_features, ls.out_features, rng), "fc"))
        elif ls.kind == "maxpool":
            layers.append(named(MaxPool2d(ls.pool_size), "pool"))
        elif ls.kind == "gap":
            layers.append(named(GlobalAvgPool(), "gap"))
        elif ls.kind == "flatten":
            layers.append(named(Flatten(), "flatten"))
    return Model(spec, layers)


def mlp_spec(pg: PGLayerConfig, input_shape: tuple[int, int, int] = (1, 28, 28),
             hidden: int = 128, classes: int = 10) -> ModelSpec:
    """Gated two-layer perceptron; both products are gated."""
    features = int(np.prod(input_shape))
    return ModelSpec(layers=(
        LayerSpec("flatten"),
        LayerSpec("pg_dense", in_features=features, out_features=hidden, pg=pg),
        LayerSpec("pg_dense", in_features=hidden, out_features=classes, pg=pg),
    ), input_shape=input_shape, classes=classes)


def cnn_spec(pg: PGLayerConfig, input_shape: tuple[int, int, int] = (1, 8, 8),
             channels: tuple[int, ...] = (16, 16, 32, 32, 64, 64),
             classes: int = 10) -> ModelSpec:
    """Gated six-conv stack with pooling after each pair, plus a
    full-precision classifier head."""
    if len(channels) % 2:
        raise ValueError("channels must pair up (pooling follows each pair)")
    hw = input_shape[1]
    pools = len(channels) // 2 - 1
    if hw % (2 ** pools):
        raise ValueError(f"input size {hw} does not survive {pools} poolings")
    layers: list[LayerSpec] = []
    c_in = input_shape[0]
    for i, c_out in enumerate(channels):
        layers.append(LayerSpec("pg_conv", in_features=c_in, out_features=c_out,
                                kernel_size=3, stride=1, pad=1, pg=pg))
        c_in = c_out
        if i % 2 == 1 and i != len(channels) - 1:
            layers.append(LayerSpec("maxpool"))
    layers.append(LayerSpec("gap"))
    layers.append(LayerSpec("dense", in_features=c_in, out_features=classes))
    return ModelSpec(layers=tuple(layers), input_shape=input_shape, classes=classes)
