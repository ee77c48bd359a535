"""Gradient-based input perturbation toward a correct segmentation.

For an image ``I`` with ground truth ``S`` and current prediction ``S^`` (argmax
of the logits), the objective is::

    G(I) = sum_pixels  logit[S^](I) - logit[S](I)

which is >= 0 and zero exactly where the prediction already agrees with ``S``
(up to ties). Descent steps ``I <- I - gamma * grad / ||grad||_inf`` are
accumulated in ``delta``. ``S^`` is recomputed at every iteration. Pixel
values are never clamped, so ``I + delta`` may leave ``[0, 1]``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor_core as tc
from .data import DataLayout, Sample, atomic_write_bytes, read_tensor, write_tensor
from .metrics import dice
from .segnet import SegModel, seg_logits
from .tensor_core import ContractViolation, Tensor

log = logging.getLogger(__name__)

TERMINATIONS = ("tolerance", "max_iters", "already_correct", "stalled")


class NonFiniteError(ArithmeticError):
    """A logit or gradient became NaN or infinite during perturbation."""

    def __init__(self, iteration: int, what: str):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class PerturbConfig:
    gamma: float = 1.0
    max_iters: int = 100
    dice_tolerance: float = 0.995
    positive_class: int = 1

    def validate(self) -> None:
        if not self.gamma > 0:
            raise ContractViolation("step size gamma must be positive")
        if self.max_iters < 1:
            raise ContractViolation("max_iters must be at least 1")
        if not 0.0 < self.dice_tolerance <= 1.0:
            raise ContractViolation("dice_tolerance must lie in (0, 1]")


class TraceRow(NamedTuple):
    iteration: int
    objective: float
    dice: float
    delta_linf: float


class StepResult(NamedTuple):
    image: np.ndarray  # I^(k+1)
    direction: np.ndarray  # grad / ||grad||_inf, zeros if the gradient vanished
    objective: float  # G(I^(k))
    converged: bool  # gradient vanished, no further progress possible


@dataclass
class PerturbResult:
    id: str
    delta: np.ndarray
    perturbed: np.ndarray
    terminated_by: str
    initial_dice: float
    final_dice: float
    steps: int = 0
    trace: list[TraceRow] = field(default_factory=list)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "G", "dice", "delta_linf"])
        for r in self.trace:
            w.writerow([r.iteration, repr(r.objective), repr(r.dice), repr(r.delta_linf)])
        return buf.getvalue()


def objective_g(logits, prediction: np.ndarray, ground_truth: np.ndarray) -> Tensor:
    """``sum(logit[prediction] - logit[ground_truth])`` over pixels (and batch)."""
    logits = tc.as_tensor(logits)
    return tc.total(tc.select_labels(logits, prediction) - tc.select_labels(logits, ground_truth))


def _evaluate(model: SegModel, image: np.ndarray, gt: np.ndarray, iteration: int):
    """Logits, prediction, G and dG/dI at ``image``."""
    tape = tc.Tape()
    x = tape.leaf(image)
    logits = seg_logits(model, x)
    if not np.all(np.isfinite(logits.data)):
        tape.release()
        raise NonFiniteError(iteration, "logits")
    pred = np.argmax(logits.data, axis=0)
    g = objective_g(logits, pred, gt)
    grad = tc.backward(tape, g)[x.index]
    tape.release()
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(iteration, "gradient")
    return pred, g.item(), grad


def _direction(grad: np.ndarray) -> tuple[np.ndarray, bool]:
    norm = float(np.max(np.abs(grad)))
    if norm == 0.0:
        return np.zeros_like(grad), True
    return grad / norm, False


def _check(model: SegModel, image, gt) -> tuple[np.ndarray, np.ndarray]:
    image = np.asarray(image, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.int64)
    if image.ndim != 3:
        raise ContractViolation(f"perturbation works on one [C,H,W] image, got {image.shape}")
    if gt.shape != image.shape[1:]:
        raise ContractViolation(f"mask {gt.shape} does not match image {image.shape[1:]}")
    if gt.size and (gt.min() < 0 or gt.max() >= model.config.num_classes):
        raise ContractViolation(f"mask labels outside [0, {model.config.num_classes})")
    return image, gt


def perturbation_step(model: SegModel, image, ground_truth, gamma: float = 1.0,
                      iteration: int = 0) -> StepResult:
    """One normalized descent step on ``G`` from ``image``."""
    image, gt = _check(model, image, ground_truth)
    _, g, grad = _evaluate(model, image, gt, iteration)
    direction, flat = _direction(grad)
    return StepResult(image - gamma * direction, direction, g, flat)


def compute_perturbation(model: SegModel, image, ground_truth, cfg: PerturbConfig | None = None,
                         sample_id: str = "") -> PerturbResult:
    """Iterate descent steps until Dice reaches the tolerance or ``max_iters`` steps ran.

    Trace row ``k`` describes iterate ``I^(k)``: its objective, its Dice and the
    raw gradient norm ``||delta^(k)||_inf``. Rows are kept for iterates
    ``0 .. K-1`` only, so the trace never exceeds ``K`` rows; the image reached
    after the last step is scored in ``final_dice``.
    """
    cfg = cfg or PerturbConfig()
    cfg.validate()
    image, gt = _check(model, image, ground_truth)
    delta = np.zeros_like(image)
    trace: list[TraceRow] = []
    initial = None
    terminated = "max_iters"
    steps = 0
    for k in range(cfg.max_iters + 1):
        pred, g, grad = _evaluate(model, image + delta, gt, k)
        d = dice(pred, gt, cfg.positive_class)
        if initial is None:
            initial = d
        if k < cfg.max_iters:
            trace.append(TraceRow(k, g, d, float(np.max(np.abs(grad)))))
        if d >= cfg.dice_tolerance:
            terminated = "already_correct" if k == 0 else "tolerance"
            break
        if k == cfg.max_iters:
            break
        direction, flat = _direction(grad)
        if flat:
            terminated = "stalled"
            break
        delta = delta - cfg.gamma * direction
        steps += 1
    return PerturbResult(sample_id, delta, image + delta, terminated, initial, d, steps, trace)


@dataclass
class BatchSummary:
    results: list[PerturbResult]
    failures: dict[str, str]

    def terminations(self) -> dict[str, int]:
        out = {t: 0 for t in TERMINATIONS}
        for r in self.results:
            out[r.terminated_by] += 1
        return out


def batch_perturb(model: SegModel, samples: Sequence[Sample], cfg: PerturbConfig | None = None,
                  layout: DataLayout | None = None, split: str = "train") -> BatchSummary:
    """Perturb every sample in order. Failures are logged and skipped.

    With ``layout``, writes ``perturbed``, ``deltas`` and ``traces`` for ``split``.
    """
    cfg = cfg or PerturbConfig()
    cfg.validate()
    results, failures = [], {}
    for s in samples:
        try:
            r = compute_perturbation(model, s.image, s.mask, cfg, s.id)
        except (NonFiniteError, ContractViolation) as exc:
            log.warning("perturbation of %s failed: %s", s.id, exc)
            failures[s.id] = str(exc)
            continue
        results.append(r)
        if layout is not None:
            write_result(layout, split, r)
    return BatchSummary(results, failures)


def write_result(layout: DataLayout, split: str, r: PerturbResult) -> list:
    paths = [layout.dir(split, "perturbed") / f"{r.id}.tensor",
             layout.dir(split, "deltas") / f"{r.id}.tensor",
             layout.dir(split, "traces") / f"{r.id}.csv"]
    write_tensor(paths[0], r.perturbed)
    write_tensor(paths[1], r.delta)
    atomic_write_bytes(paths[2], r.trace_csv().encode("utf-8"))
    return paths


def read_deltas(layout: DataLayout, split: str, ids: Sequence[str]) -> list[np.ndarray]:
    """Deltas for ``ids``; every id must have one."""
    d = layout.dir(split, "deltas")
    missing = [i for i in ids if not (d / f"{i}.tensor").is_file()]
    if missing:
        raise ContractViolation(f"no stored perturbation for: {', '.join(missing)}")
    return [read_tensor(d / f"{i}.tensor") for i in ids]
