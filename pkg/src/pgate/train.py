"""Training loop for gated models: plain SGD with momentum, a step
schedule, and the threshold regularizer folded into the objective.

The trainer owns all randomness through a single seeded generator used for
both parameter init and batch shuffling, so one seed pins the entire run.
Evaluation reports task metrics together with the gate statistics (per
layer and model-level sparsity, average bitwidth) gathered over the whole
evaluation set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, iter_batches
from .kernels import MACS
from .layers import Param
from .metrics import EpochMetrics, GateStats, aggregate_model_metrics, avg_bitwidth
from .model import Model, ModelSpec, build_model
from .tensor import REAL_DTYPE


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the metrics gathered so far."""

    def __init__(self, message: str, metrics: list[EpochMetrics]):
        super().__init__(message)
        self.metrics = metrics


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    seed: int = 0
    sparse_backprop: bool = True
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor}")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its logits gradient, computed stably in float64."""
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(np.mean(logsum[np.arange(n), 0] - z[np.arange(n), labels]))
    probs = np.exp(z - logsum)
    probs[np.arange(n), labels] -= 1.0
    return loss, (probs / n).astype(REAL_DTYPE)


class SGD:
    """Momentum SGD over named parameters, with optional lower bounds
    (the quantizer clip must stay positive)."""

    def __init__(self, params: list[tuple[str, Param]], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = {path: np.zeros_like(p.value) for path, p in params}

    def step(self, lr: float) -> None:
        for path, p in self.params:
            v = self.velocity[path]
            v *= self.momentum
            v -= lr * p.grad
            p.value += v
            if p.lower_bound is not None:
                np.maximum(p.value, p.lower_bound, out=p.value)


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    drops = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * cfg.lr_decay_factor ** drops


def train(spec: ModelSpec, train_data: Dataset, eval_data: Dataset,
          cfg: TrainConfig, step_hook=None) -> tuple[Model, list[EpochMetrics]]:
    """Build a model from the spec and train it.

    step_hook, when given, is called after each backward pass and before
    the optimizer step with (step_index, model, MAC counter snapshot). The
    shared MAC counter is reset at the top of every step, so the snapshot
    attributes compute to exactly that forward/backward pair (evaluation
    passes between epochs cannot leak into it); tests use the hook to audit
    the per-step compute attribution.

    Raises TrainingDiverged as soon as the objective stops being finite.
    """
    rng = np.random.default_rng(cfg.seed)
    model = build_model(spec, rng)
    model.set_sparse_backprop(cfg.sparse_backprop)
    opt = SGD(model.parameters(), cfg.momentum)
    metrics: list[EpochMetrics] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = _epoch_lr(cfg, epoch)
        order = rng.permutation(len(train_data)) if cfg.shuffle else np.arange(len(train_data))
        losses = []
        for xb, yb in iter_batches(train_data, cfg.batch_size, order):
            MACS.reset()
            model.zero_grads()
            logits = model.forward(xb, train=True)
            loss, dlogits = softmax_cross_entropy(logits, yb)
            penalty = sum(layer.threshold_penalty_loss() for _, layer in model.pg_layers())
            total = loss + penalty
            if not np.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", metrics)
            model.backward(dlogits)
            if step_hook is not None:
                step_hook(step, model, MACS.snapshot())
            opt.step(lr)
            losses.append(total)
            step += 1
        ev = evaluate(model, eval_data, batch_size=cfg.batch_size)
        metrics.append(EpochMetrics(epoch=epoch, loss=float(np.mean(losses)),
                                    accuracy=ev.accuracy, per_layer_sp=ev.per_layer_sp,
                                    model_sp=ev.model_sp, b_avg=ev.b_avg))
    return model, metrics


def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> EpochMetrics:
    """Forward-only pass over the whole set; epoch field is left at 0."""
    stats = GateStats()
    correct = 0
    loss_sum = 0.0
    for xb, yb in iter_batches(data, batch_size):
        logits = model.forward(xb, train=False, recorder=stats)
        loss, _ = softmax_cross_entropy(logits, yb)
        loss_sum += loss * xb.shape[0]
        correct += int((logits.argmax(axis=1) == yb).sum())
    bits, msb_bits = model.pg_widths()
    per_layer, model_sp, b_avg = aggregate_model_metrics(stats, bits, msb_bits)
    n = len(data)
    return EpochMetrics(epoch=0, loss=loss_sum / n, accuracy=correct / n,
                        per_layer_sp=per_layer, model_sp=model_sp, b_avg=b_avg)


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    sparsity: float
    b_avg: float
    accuracy: float


def sweep_fixed_threshold(model: Model, data: Dataset, thresholds: list[float],
                          batch_size: int = 256) -> list[SweepPoint]:
    """Evaluate one fixed gate threshold after another on a trained model.

    The model must already be in fixed gating mode (learned thresholds, if
    any, are deliberately out of the picture so the sweep isolates the
    effect of the cutoff itself).
    """
    for name, layer in model.pg_layers():
        if layer.cfg.mode != "fixed":
            raise ValueError(f"layer {name} is not in fixed gating mode")
    bits, msb_bits = model.pg_widths()
    points = []
    for t in thresholds:
        model.set_fixed_threshold(float(t))
        ev = evaluate(model, data, batch_size)
        points.append(SweepPoint(threshold=float(t), sparsity=ev.model_sp,
                                 b_avg=avg_bitwidth(bits, msb_bits, ev.model_sp),
                                 accuracy=ev.accuracy))
    return points


def msb_code_histograms(model: Model, data: Dataset, batch_size: int = 64) -> dict[str, list[np.ndarray]]:
    """Per-batch MSB code histograms for every gated layer.

    Returns, for each layer, one bincount array per evaluation batch; the
    number of nonzero bins says how much of the few-bit prediction range a
    batch actually exercises.
    """
    _, msb_bits = model.pg_widths()
    n_codes = 1 << msb_bits

    class _Recorder:
        def __init__(self):
            self.hists: dict[str, list[np.ndarray]] = {}

        def record(self, name, mask, msb_codes):
            self.hists.setdefault(name, []).append(
                np.bincount(msb_codes.ravel(), minlength=n_codes))

    rec = _Recorder()
    for xb, _ in iter_batches(data, batch_size):
        model.forward(xb, train=False, recorder=rec)
    return rec.hists
