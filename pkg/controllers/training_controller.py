"""
Training controller: learning-rate schedule, Adam, L2 penalty, the epoch loop,
evaluation and the repeated-seed protocol.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import structlog

from config.settings import TrainConfig
from data.dataset.batching import augmented_batches, num_batches, prefetch
from data.enums import FileConstants, NormMode
from data.errors import NonFiniteLossError, ShapeError
from data.labeled_batch import LabeledBatch
from data.metrics import EpochMetrics, RunSummary
from models.arch_spec import build_arch_spec
from models.layers import softmax_cross_entropy
from models.network import ModelState, build_model, forward_pass, model_backward, model_forward
from utils.runtime import RuntimeContext

from .checkpoint_controller import checkpoint_save
from .export_controller import MetricsWriter, metrics_path, write_config, write_summary

log = structlog.get_logger(__name__)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """
    Step-decayed learning rate: lr0 * decay ** (epoch // decay_every).

    Raises:
        ValueError: If epoch is negative
    """
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


@dataclass
class AdamState:
    """
    First and second moment accumulators keyed by parameter name.

    Attributes:
        m: First moments
        v: Second moments, never negative
        t: Number of steps taken
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self) -> None:
        if self.t < 0:
            raise ValueError(f"step counter must be non-negative, got {self.t}")

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    Inputs are left untouched; new parameter and state dicts are returned.

    Raises:
        ShapeError: If a gradient or moment is missing or has the wrong shape
    """
    t = state.t + 1
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            raise ShapeError(f"No gradient for parameter {name}")
        if grad.shape != value.shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, parameter has {value.shape}")
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        if m.shape != value.shape or v.shape != value.shape:
            raise ShapeError(f"Optimizer moments for {name} do not match shape {value.shape}")

        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        step = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        new_params[name] = (value - step).astype(value.dtype, copy=False)
        new_m[name] = m.astype(value.dtype, copy=False)
        new_v[name] = v.astype(value.dtype, copy=False)
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def l2_penalty(
    params: dict[str, np.ndarray], names: list[str], l2: float
) -> tuple[float, dict[str, np.ndarray]]:
    """
    l2 * sum(w ** 2) over the named weights, and its gradient 2 * l2 * w.
    """
    if l2 == 0.0 or not names:
        return 0.0, {}
    penalty = l2 * float(sum(np.sum(np.square(params[name], dtype=np.float64)) for name in names))
    return penalty, {name: (2.0 * l2) * params[name] for name in names}


def penalized_names(model: ModelState, cfg: TrainConfig) -> list[str]:
    return model.names_with_roles(cfg.l2_scope.roles)


def evaluate(model: ModelState, data: LabeledBatch, batch_size: int = 500) -> tuple[float, float]:
    """
    Mean cross-entropy and accuracy in inference mode.

    Shards run through ``RuntimeContext.map``; per-shard sums are reduced in shard
    order so the result does not depend on the thread count.
    """
    starts = range(0, len(data), batch_size)

    def shard(start: int) -> tuple[float, int, int]:
        part = data.take(slice(start, start + batch_size))
        logits = model_forward(model, part.images, NormMode.INFER)
        loss, _ = softmax_cross_entropy(logits, part.labels)
        correct = int(np.sum(np.argmax(logits, axis=1) == part.labels))
        return loss * len(part), correct, len(part)

    results = RuntimeContext().map(shard, starts)
    total = sum(count for _, _, count in results)
    loss_sum = math.fsum(loss for loss, _, _ in results)
    correct = sum(hits for _, hits, _ in results)
    return loss_sum / total, correct / total


@dataclass
class TrainResult:
    """Final model, per-epoch metrics and the best epoch by test accuracy."""

    model: ModelState
    history: list[EpochMetrics]
    best_epoch: int = -1
    best_test_acc: float = 0.0
    best_model: Optional[ModelState] = None


def _train_epoch(
    model: ModelState,
    state: AdamState,
    data: LabeledBatch,
    cfg: TrainConfig,
    epoch: int,
    lr: float,
    penalized: list[str],
) -> tuple[AdamState, float, float, float]:
    loss_sum = 0.0
    penalty_sum = 0.0
    correct = 0
    seen = 0
    steps = 0
    batches = augmented_batches(data, cfg.batch_size, cfg.seed, epoch, cfg.augment)
    for batch_index, batch in enumerate(prefetch(batches)):
        forward = forward_pass(model, batch.images, NormMode.TRAIN)
        loss, grad_logits = softmax_cross_entropy(forward.logits, batch.labels)
        if not math.isfinite(loss):
            raise NonFiniteLossError(epoch, batch_index, loss)

        grads = model_backward(model, forward, grad_logits)
        penalty, penalty_grads = l2_penalty(model.params, penalized, cfg.l2)
        for name, extra in penalty_grads.items():
            grads[name] = grads[name] + extra
        model.params, state = adam_step(
            model.params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps
        )

        loss_sum += loss * len(batch)
        penalty_sum += penalty
        correct += int(np.sum(np.argmax(forward.logits, axis=1) == batch.labels))
        seen += len(batch)
        steps += 1

    if seen == 0:
        return state, 0.0, 0.0, 0.0
    return state, loss_sum / seen, correct / seen, penalty_sum / max(steps, 1)


def train(
    model: ModelState,
    train_data: LabeledBatch,
    test_data: LabeledBatch,
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> TrainResult:
    """
    Run the epoch loop: augment, train-mode forward, loss plus L2, backward and an
    Adam step per batch, then a full test evaluation in inference mode.

    The input model is not modified.

    Args:
        model: Initial model
        train_data: Training set
        test_data: Evaluation set
        cfg: Resolved training configuration
        out_dir: When given, receives metrics.csv, config.json, best.ckpt and
            on interrupt last.ckpt
        on_epoch: Called with each epoch's metrics

    Returns:
        TrainResult; with ``cfg.epochs == 0`` the initial model and an empty history

    Raises:
        NonFiniteLossError: If a batch loss is NaN or infinite
    """
    model = model.copy()
    result = TrainResult(model=model, history=[])
    if cfg.epochs == 0:
        return result

    state = AdamState.fresh(model.params)
    penalized = penalized_names(model, cfg)
    writer: Optional[MetricsWriter] = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_config(out_dir / FileConstants.CONFIG_FILE, cfg)
        writer = MetricsWriter(metrics_path(out_dir), cfg)

    log.info(
        "training started",
        arch=cfg.arch,
        attention=cfg.attention,
        epochs=cfg.epochs,
        train=len(train_data),
        test=len(test_data),
        batches_per_epoch=num_batches(len(train_data), cfg.batch_size),
        penalized=len(penalized),
    )
    epoch = 0
    try:
        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            lr = lr_at(epoch, cfg)
            state, train_loss, train_acc, penalty = _train_epoch(
                model, state, train_data, cfg, epoch, lr, penalized
            )
            test_loss, test_acc = evaluate(model, test_data, cfg.eval_batch_size)
            metrics = EpochMetrics(
                epoch=epoch,
                lr=lr,
                train_loss=train_loss,
                train_acc=train_acc,
                test_loss=test_loss,
                test_acc=test_acc,
                seconds=time.perf_counter() - started,
                l2_penalty=penalty,
            )
            result.history.append(metrics)
            log.info("epoch finished", **metrics.to_dict())
            if writer is not None:
                writer.append(metrics)
            if on_epoch is not None:
                on_epoch(metrics)

            if result.best_epoch < 0 or test_acc > result.best_test_acc:
                result.best_epoch = epoch
                result.best_test_acc = test_acc
                result.best_model = model.copy()
                if out_dir is not None:
                    checkpoint_save(model, out_dir / FileConstants.BEST_CHECKPOINT)
    except KeyboardInterrupt:
        if out_dir is not None:
            path = checkpoint_save(model, out_dir / FileConstants.LAST_CHECKPOINT)
            log.warning("interrupted, checkpoint flushed", epoch=epoch, path=str(path))
        raise
    finally:
        if writer is not None:
            writer.close()

    log.info("training finished", best_epoch=result.best_epoch, best_test_acc=result.best_test_acc)
    return result


def model_for(cfg: TrainConfig, seed: Optional[int] = None) -> ModelState:
    """Build the configured architecture, initialized from ``seed`` or ``cfg.seed``."""
    spec = build_arch_spec(cfg.arch, cfg.attention, cfg.strand_ratio, cfg.filter_ratio)
    return build_model(spec, seed=cfg.seed if seed is None else seed)


def run_protocol(
    cfg: TrainConfig,
    train_data: LabeledBatch,
    test_data: LabeledBatch,
    out_dir: Path,
    repeats: int = 1,
) -> list[RunSummary]:
    """
    Train ``repeats`` independently seeded runs (cfg.seed, cfg.seed + 1, ...).

    A single run writes straight into ``out_dir``; repeated runs go to
    ``out_dir/run_<seed>/`` and a ``summary.csv`` is written at the top.

    Raises:
        ValueError: If repeats < 1
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    out_dir = Path(out_dir)
    runs: list[RunSummary] = []
    for seed in range(cfg.seed, cfg.seed + repeats):
        run_cfg = replace(cfg, seed=seed)
        run_dir = out_dir if repeats == 1 else out_dir / f"run_{seed}"
        result = train(model_for(run_cfg), train_data, test_data, run_cfg, run_dir)
        final_acc = result.history[-1].test_acc if result.history else 0.0
        runs.append(
            RunSummary(
                seed=seed,
                best_test_acc=result.best_test_acc,
                best_epoch=result.best_epoch,
                final_test_acc=final_acc,
                epochs=len(result.history),
            )
        )
    if repeats > 1:
        write_summary(out_dir / FileConstants.SUMMARY_FILE, runs)
    return runs

