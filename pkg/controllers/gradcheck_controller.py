"""
Finite-difference validation of every analytic backward pass.

Each registered ``OpCase`` draws wide-precision inputs in [-1, 1], projects the op
output onto a fixed random direction to obtain a scalar objective, and compares
the analytic gradient of that objective against central differences for the
input and every parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

import numpy as np
import structlog

from data.enums import (
    GRADCHECK_SEEDS,
    GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
    KINK_MARGIN,
    PRECISION_AGREEMENT_TOLERANCE,
    NormMode,
)
from data.errors import GradcheckError
from data.tensor import BatchNormParams, ConvParams, DenseParams
from models import attention, layers
from utils.runtime import RuntimeContext

log = structlog.get_logger(__name__)

Inputs = dict[str, np.ndarray]

_MAX_RESAMPLES = 200


@dataclass(frozen=True)
class GradReport:
    """
    Outcome of one gradient comparison.

    Attributes:
        op: Op name; precision agreement rows carry a ``[f32]`` suffix
        target: Tensor the gradient was taken with respect to
        seed: Input seed
        max_rel_error: max |a - n| / max(1, |a|, |n|)
        worst_index: Index of the element with the largest error
        passed: Whether max_rel_error is below tolerance
        parts: Per-target reports when this report aggregates an op
    """

    op: str
    target: str
    seed: int
    max_rel_error: float
    worst_index: tuple[int, ...]
    passed: bool
    tolerance: float = GRADCHECK_TOLERANCE
    parts: tuple[GradReport, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if not self.max_rel_error >= 0.0:
            raise ValueError(f"relative error must be non-negative, got {self.max_rel_error}")

    def rows(self) -> tuple[GradReport, ...]:
        """Per-target rows, or this report when it is already a single row."""
        return self.parts or (self,)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = GRADCHECK_STEP) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Args:
        f: Scalar-valued function of one array
        x: Evaluation point, float64
        h: Step, positive

    Returns:
        Array shaped like x with (f(x + h e_i) - f(x - h e_i)) / 2h

    Raises:
        GradcheckError: If x is not float64, h is not positive, or f is not finite
    """
    if x.dtype != np.float64:
        raise GradcheckError(f"finite_diff needs float64 input, got {x.dtype}")
    if h <= 0:
        raise GradcheckError(f"step must be positive, got {h}")
    point = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = float(f(point))
        flat[i] = original - h
        minus = float(f(point))
        flat[i] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise GradcheckError(f"non-finite objective at element {i}: f+={plus}, f-={minus}")
        out[i] = (plus - minus) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class OpCase:
    """
    A differentiable op under test.

    Attributes:
        name: Registry key
        targets: Input names whose gradients are checked
        build: Draws the inputs (targets and constants) from a generator
        forward: Op output from the inputs
        backward: Gradients keyed by target given the inputs and an output gradient
        tie_free: Rejects inputs that sit near a kink of relu or max
    """

    name: str
    targets: tuple[str, ...]
    build: Callable[[np.random.Generator], Inputs]
    forward: Callable[[Inputs], np.ndarray]
    backward: Callable[[Inputs, np.ndarray], Inputs]
    tie_free: Callable[[Inputs], bool] = lambda inputs: True


def _u(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def _clear_of_zero(values: np.ndarray) -> bool:
    return bool(np.all(np.abs(values) > KINK_MARGIN))


def _top_two_gap(groups: np.ndarray) -> bool:
    """True when the largest entry of every group on the last axis leads by the margin."""
    ordered = np.sort(groups, axis=-1)
    return bool(np.all(ordered[..., -1] - ordered[..., -2] > KINK_MARGIN))


def _pool_windows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


# ---------------------------------------------------------------------------
# Core layer cases
# ---------------------------------------------------------------------------


def _conv_case(name: str, x_shape: tuple[int, ...], k_shape: tuple[int, ...], stride: int) -> OpCase:
    def params(inputs: Inputs) -> ConvParams:
        return ConvParams(inputs["kernels"], inputs["bias"], stride=stride)

    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        gx, gk, gb = layers.conv2d_bwd(inputs["x"], params(inputs), grad)
        return {"x": gx, "kernels": gk, "bias": gb}

    return OpCase(
        name=name,
        targets=("x", "kernels", "bias"),
        build=lambda rng: {"x": _u(rng, *x_shape), "kernels": _u(rng, *k_shape), "bias": _u(rng, k_shape[0])},
        forward=lambda inputs: layers.conv2d_fwd(inputs["x"], params(inputs)),
        backward=backward,
    )


def _maxpool_case() -> OpCase:
    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        _, argmax = layers.maxpool2x2(inputs["x"])
        return {"x": layers.maxpool2x2_bwd(grad, argmax)}

    return OpCase(
        name="maxpool2x2",
        targets=("x",),
        build=lambda rng: {"x": _u(rng, 2, 2, 4, 4)},
        forward=lambda inputs: layers.maxpool2x2(inputs["x"])[0],
        backward=backward,
        tie_free=lambda inputs: _top_two_gap(_pool_windows(inputs["x"])),
    )


def _batchnorm_case(mode: NormMode) -> OpCase:
    def params(inputs: Inputs) -> BatchNormParams:
        return BatchNormParams(inputs["gamma"], inputs["beta"], inputs["running_mean"], inputs["running_var"])

    def build(rng: np.random.Generator) -> Inputs:
        return {
            "x": _u(rng, 4, 3, 3, 3),
            "gamma": _u(rng, 3),
            "beta": _u(rng, 3),
            "running_mean": _u(rng, 3) * 0.5,
            "running_var": rng.uniform(0.5, 1.5, size=3),
        }

    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        _, cache, _ = layers.batchnorm(inputs["x"], params(inputs), mode)
        gx, gg, gb = layers.batchnorm_bwd(grad, cache, params(inputs))
        return {"x": gx, "gamma": gg, "beta": gb}

    return OpCase(
        name=f"batchnorm_{mode.value}",
        targets=("x", "gamma", "beta"),
        build=build,
        forward=lambda inputs: layers.batchnorm(inputs["x"], params(inputs), mode)[0],
        backward=backward,
    )


def _dense_case() -> OpCase:
    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        gx, gw, gb = layers.dense_bwd(inputs["x"], DenseParams(inputs["weight"], inputs["bias"]), grad)
        return {"x": gx, "weight": gw, "bias": gb}

    return OpCase(
        name="dense",
        targets=("x", "weight", "bias"),
        build=lambda rng: {"x": _u(rng, 4, 6), "weight": _u(rng, 5, 6), "bias": _u(rng, 5)},
        forward=lambda inputs: layers.dense(inputs["x"], DenseParams(inputs["weight"], inputs["bias"])),
        backward=backward,
    )


def _relu_case() -> OpCase:
    return OpCase(
        name="relu",
        targets=("x",),
        build=lambda rng: {"x": _u(rng, 3, 4, 2, 2)},
        forward=lambda inputs: layers.relu(inputs["x"]),
        backward=lambda inputs, grad: {"x": layers.relu_bwd(inputs["x"], grad)},
        tie_free=lambda inputs: _clear_of_zero(inputs["x"]),
    )


def _sigmoid_case() -> OpCase:
    return OpCase(
        name="sigmoid",
        targets=("x",),
        build=lambda rng: {"x": _u(rng, 3, 4)},
        forward=lambda inputs: layers.sigmoid(inputs["x"]),
        backward=lambda inputs, grad: {"x": layers.sigmoid_bwd(layers.sigmoid(inputs["x"]), grad)},
    )


def _softmax_case() -> OpCase:
    return OpCase(
        name="softmax",
        targets=("x",),
        build=lambda rng: {"x": _u(rng, 3, 5)},
        forward=lambda inputs: layers.softmax(inputs["x"]),
        backward=lambda inputs, grad: {"x": layers.softmax_bwd(layers.softmax(inputs["x"]), grad)},
    )


def _cross_entropy_case() -> OpCase:
    def build(rng: np.random.Generator) -> Inputs:
        return {"logits": _u(rng, 4, 10), "labels": rng.integers(0, 10, size=4)}

    def forward(inputs: Inputs) -> np.ndarray:
        loss, _ = layers.softmax_cross_entropy(inputs["logits"], inputs["labels"])
        return np.asarray(loss, dtype=inputs["logits"].dtype)

    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        _, grad_logits = layers.softmax_cross_entropy(inputs["logits"], inputs["labels"])
        return {"logits": grad_logits * grad}

    return OpCase(
        name="softmax_cross_entropy",
        targets=("logits",),
        build=build,
        forward=forward,
        backward=backward,
    )


# ---------------------------------------------------------------------------
# Attention block cases
# ---------------------------------------------------------------------------


def _descriptor_case() -> OpCase:
    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        _, argmax = attention.build_descriptor(inputs["x"])
        return {"x": attention.build_descriptor_bwd(grad, argmax, inputs["x"].shape)}

    return OpCase(
        name="build_descriptor",
        targets=("x",),
        build=lambda rng: {"x": _u(rng, 2, 4, 3, 3)},
        forward=lambda inputs: attention.build_descriptor(inputs["x"])[0],
        backward=backward,
        tie_free=lambda inputs: _top_two_gap(inputs["x"].reshape(*inputs["x"].shape[:2], -1)),
    )


def _stage1_case() -> OpCase:
    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        gd, gw, gb = attention.combine_stage1_bwd(inputs["descriptor"], inputs["stage1_w"], grad)
        return {"descriptor": gd, "stage1_w": gw, "stage1_b": gb}

    return OpCase(
        name="combine_stage1",
        targets=("descriptor", "stage1_w", "stage1_b"),
        build=lambda rng: {"descriptor": _u(rng, 2, 2, 8), "stage1_w": _u(rng, 2, 2), "stage1_b": _u(rng, 2)},
        forward=lambda inputs: attention.combine_stage1(inputs["descriptor"], inputs["stage1_w"], inputs["stage1_b"]),
        backward=backward,
    )


def _stage2_case() -> OpCase:
    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        gm, gw, gb = attention.strand_conv_stage2_bwd(inputs["m"], inputs["stage2_w"], grad)
        return {"m": gm, "stage2_w": gw, "stage2_b": gb}

    return OpCase(
        name="strand_conv_stage2",
        targets=("m", "stage2_w", "stage2_b"),
        build=lambda rng: {"m": _u(rng, 2, 8, 2), "stage2_w": _u(rng, 4, 2), "stage2_b": _u(rng, 1)},
        forward=lambda inputs: attention.strand_conv_stage2(inputs["m"], inputs["stage2_w"], inputs["stage2_b"]),
        backward=backward,
    )


def _gate_case() -> OpCase:
    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        gate = layers.sigmoid(inputs["pre_gate"])
        gx, gpre = attention.gate_and_scale_bwd(inputs["x"], gate, grad)
        return {"x": gx, "pre_gate": gpre}

    return OpCase(
        name="gate_and_scale",
        targets=("x", "pre_gate"),
        build=lambda rng: {"x": _u(rng, 2, 4, 3, 3), "pre_gate": _u(rng, 2, 4)},
        forward=lambda inputs: attention.gate_and_scale(inputs["x"], inputs["pre_gate"]),
        backward=backward,
    )


def _clocal_case(channels: int = 32) -> OpCase:
    def params(inputs: Inputs) -> attention.CLocalParams:
        return attention.CLocalParams(
            inputs["stage1_w"], inputs["stage1_b"], inputs["stage2_w"], inputs["stage2_b"], channels
        )

    def build(rng: np.random.Generator) -> Inputs:
        filters, length = attention.clocal_shape_rule(channels)
        return {
            "x": _u(rng, 2, channels, 4, 4),
            "stage1_w": _u(rng, filters, 2),
            "stage1_b": _u(rng, filters),
            "stage2_w": _u(rng, length, filters),
            "stage2_b": _u(rng, 1),
        }

    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        _, cache = attention.clocal_forward(inputs["x"], params(inputs))
        gx, grads = attention.clocal_backward(params(inputs), cache, grad)
        return {"x": gx, **grads}

    return OpCase(
        name="clocal_forward",
        targets=("x", "stage1_w", "stage1_b", "stage2_w", "stage2_b"),
        build=build,
        forward=lambda inputs: attention.clocal_forward(inputs["x"], params(inputs))[0],
        backward=backward,
        tie_free=lambda inputs: _top_two_gap(inputs["x"].reshape(*inputs["x"].shape[:2], -1)),
    )


def _se_case(channels: int = 32) -> OpCase:
    def params(inputs: Inputs) -> attention.SEParams:
        return attention.SEParams(inputs["w1"], inputs["b1"], inputs["w2"], inputs["b2"])

    def build(rng: np.random.Generator) -> Inputs:
        hidden = attention.se_hidden_width(channels)
        return {
            "x": _u(rng, 2, channels, 4, 4),
            "w1": _u(rng, hidden, channels),
            "b1": _u(rng, hidden),
            "w2": _u(rng, channels, hidden),
            "b2": _u(rng, channels),
        }

    def tie_free(inputs: Inputs) -> bool:
        _, extras = attention.se_gate(inputs["x"], params(inputs))
        return _clear_of_zero(extras["hidden"])

    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        _, cache = attention.se_forward(inputs["x"], params(inputs))
        gx, grads = attention.se_backward(params(inputs), cache, grad)
        return {"x": gx, **grads}

    return OpCase(
        name="se_forward",
        targets=("x", "w1", "b1", "w2", "b2"),
        build=build,
        forward=lambda inputs: attention.se_forward(inputs["x"], params(inputs))[0],
        backward=backward,
        tie_free=tie_free,
    )


OP_CASES: dict[str, OpCase] = {
    case.name: case
    for case in (
        _conv_case("conv2d", (1, 2, 4, 4), (3, 2, 3, 3), 1),
        _conv_case("conv2d_stride2", (2, 2, 5, 5), (2, 2, 3, 3), 2),
        _conv_case("conv2d_even_kernel", (1, 2, 4, 4), (2, 2, 2, 2), 1),
        _maxpool_case(),
        _batchnorm_case(NormMode.TRAIN),
        _batchnorm_case(NormMode.INFER),
        _dense_case(),
        _relu_case(),
        _sigmoid_case(),
        _softmax_case(),
        _cross_entropy_case(),
        _descriptor_case(),
        _stage1_case(),
        _stage2_case(),
        _gate_case(),
        _clocal_case(),
        _se_case(),
    )
}


def corrupted(case: OpCase) -> OpCase:
    """Copy of ``case`` whose backward flips the sign of every gradient."""

    def backward(inputs: Inputs, grad: np.ndarray) -> Inputs:
        return {name: -value for name, value in case.backward(inputs, grad).items()}

    return replace(case, name=f"{case.name}[corrupted]", backward=backward)


# ---------------------------------------------------------------------------
# Running checks
# ---------------------------------------------------------------------------


def draw_inputs(case: OpCase, seed: int) -> tuple[Inputs, np.ndarray]:
    """
    Tie-free float64 inputs and a projection direction for the output.

    Raises:
        GradcheckError: If no tie-free sample is found
    """
    rng = np.random.default_rng(seed)
    for attempt in range(_MAX_RESAMPLES):
        inputs = case.build(rng)
        if case.tie_free(inputs):
            if attempt:
                log.debug("resampled near-kink inputs", op=case.name, attempts=attempt + 1)
            projection = np.asarray(rng.standard_normal(np.shape(case.forward(inputs))))
            return inputs, projection
    raise GradcheckError(f"{case.name}: no tie-free inputs after {_MAX_RESAMPLES} draws")


def _objective(case: OpCase, inputs: Inputs, projection: np.ndarray, target: str) -> Callable[[np.ndarray], float]:
    def f(value: np.ndarray) -> float:
        return float(np.sum(case.forward({**inputs, target: value}) * projection))

    return f


def _summarize(op: str, seed: int, tol: float, parts: list[GradReport]) -> GradReport:
    worst = max(parts, key=lambda part: part.max_rel_error)
    return GradReport(
        op=op,
        target=worst.target,
        seed=seed,
        max_rel_error=worst.max_rel_error,
        worst_index=worst.worst_index,
        passed=all(part.passed for part in parts),
        tolerance=tol,
        parts=tuple(parts),
    )


def _compare(op: str, target: str, seed: int, analytic: np.ndarray, reference: np.ndarray, tol: float) -> GradReport:
    errors = relative_error(analytic, reference)
    flat_index = int(np.argmax(errors)) if errors.size else 0
    worst = tuple(int(i) for i in np.unravel_index(flat_index, errors.shape)) if errors.ndim else ()
    max_error = float(errors.reshape(-1)[flat_index]) if errors.size else 0.0
    if not np.isfinite(max_error):
        max_error = float("inf")
    return GradReport(op, target, seed, max_error, worst, max_error < tol, tol)


def check_op(
    case: OpCase,
    seed: int = 0,
    tol: float = GRADCHECK_TOLERANCE,
    h: float = GRADCHECK_STEP,
) -> GradReport:
    """
    Compare the analytic backward of ``case`` against central differences.

    Returns:
        Aggregate report with one part per target; a mismatch marks the report
        failed rather than raising
    """
    inputs, projection = draw_inputs(case, seed)
    analytic = case.backward(inputs, projection)
    parts = []
    for target in case.targets:
        numeric = finite_diff(_objective(case, inputs, projection, target), inputs[target], h)
        parts.append(_compare(case.name, target, seed, analytic[target], numeric, tol))
    return _summarize(case.name, seed, tol, parts)


def check_precision_agreement(
    case: OpCase, seed: int = 0, tol: float = PRECISION_AGREEMENT_TOLERANCE
) -> GradReport:
    """Standard-precision analytic gradients against the wide-precision ones."""
    inputs, projection = draw_inputs(case, seed)
    wide = case.backward(inputs, projection)
    narrow_inputs = {
        name: value.astype(np.float32) if np.issubdtype(value.dtype, np.floating) else value
        for name, value in inputs.items()
    }
    narrow = case.backward(narrow_inputs, projection.astype(np.float32))
    op = f"{case.name}[f32]"
    parts = [_compare(op, target, seed, narrow[target], wide[target], tol) for target in case.targets]
    return _summarize(op, seed, tol, parts)


def select_cases(op: str) -> list[OpCase]:
    """
    Raises:
        ValueError: For an unknown op name
    """
    if op == "all":
        return list(OP_CASES.values())
    if op not in OP_CASES:
        raise ValueError(f"Unknown op {op!r}; choose from: all, {', '.join(OP_CASES)}")
    return [OP_CASES[op]]


def run_suite(
    op: str = "all",
    seed: int = 0,
    seeds: int = GRADCHECK_SEEDS,
    tol: float = GRADCHECK_TOLERANCE,
    precision_check: bool = True,
    cases: Optional[Iterable[OpCase]] = None,
) -> list[GradReport]:
    """
    Check every selected op for ``seeds`` consecutive seeds starting at ``seed``.

    Work items run through ``RuntimeContext.map``; report order is fixed
    (op, then seed, then the precision row).
    """
    selected = list(cases) if cases is not None else select_cases(op)
    jobs: list[tuple[OpCase, int, bool]] = []
    for case in selected:
        for offset in range(seeds):
            jobs.append((case, seed + offset, False))
            if precision_check:
                jobs.append((case, seed + offset, True))

    def run(job: tuple[OpCase, int, bool]) -> GradReport:
        case, job_seed, agreement = job
        if agreement:
            return check_precision_agreement(case, job_seed)
        return check_op(case, job_seed, tol)

    reports = RuntimeContext().map(run, jobs)
    failed = [report for report in reports if not report.passed]
    log.info("gradient checks finished", checks=len(reports), failed=len(failed))
    for report in failed:
        log.warning(
            "gradient check failed",
            op=report.op,
            target=report.target,
            seed=report.seed,
            max_rel_error=report.max_rel_error,
        )
    return reports
