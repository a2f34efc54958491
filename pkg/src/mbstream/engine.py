"""Micro-batch streaming training loop.

One mini-batch is split into contiguous micro-batches, each is run
forward/backward in plan order, per-micro-batch losses are normalized so
the accumulated gradient reproduces the mini-batch gradient, and the
optimizer steps exactly once per mini-batch from the accumulated sum.

Normalization modes:

* ``paper_faithful`` scales every micro-batch loss by 1/N_sets (the number
  of micro-batches). Exact when all micro-batches are the same size.
* ``exact_weighted`` scales micro-batch k by size_k/N_batch, which stays
  exact for ragged splits (a trailing smaller micro-batch).
* ``off`` applies no scaling; the accumulated gradient is then N_sets
  times the mini-batch gradient for equal splits.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AccumulatorOverflowError
from .losses import LossValue, compute_loss
from .nn import Model, backward, forward
from .optim import OptimizerState, apply_update
from .rng import named_stream
from .tensor import GradientSet, ParameterSet

NORMALIZATION_MODES = ("paper_faithful", "exact_weighted", "off")


@dataclass(frozen=True)
class MicroBatchPlan:
    """Ordered split of one mini-batch into contiguous micro-batches."""

    n_b: int
    n_mu: int
    n_s_mu: int
    sizes: tuple[int, ...]
    index_ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if sum(self.sizes) != self.n_b:
            raise ValueError("micro-batch sizes must cover the mini-batch exactly")
        if any(s < 1 or s > self.n_mu for s in self.sizes):
            raise ValueError("every micro-batch size must lie in [1, n_mu]")
        if len(self.sizes) != self.n_s_mu or len(self.index_ranges) != self.n_s_mu:
            raise ValueError("plan length disagrees with n_s_mu")


def plan_split(n_b: int, n_mu: int) -> MicroBatchPlan:
    """Split a mini-batch of n_b samples into micro-batches of at most n_mu.

    If the mini-batch is smaller than the requested micro-batch size, the
    micro-batch size is clamped down to it. The count of micro-batches is
    the round-up ceil(n_b / n_mu); the final micro-batch carries the
    remainder when n_b is not divisible.
    """
    if n_b < 1 or n_mu < 1:
        raise ValueError(f"batch sizes must be positive, got n_b={n_b}, n_mu={n_mu}")
    if n_b < n_mu:
        n_mu = n_b
    n_s_mu = math.ceil(n_b / n_mu)
    sizes = [n_mu] * (n_b // n_mu)
    if n_b % n_mu:
        sizes.append(n_b % n_mu)
    ranges = []
    start = 0
    for size in sizes:
        ranges.append((start, start + size))
        start += size
    return MicroBatchPlan(n_b=n_b, n_mu=n_mu, n_s_mu=n_s_mu,
                          sizes=tuple(sizes), index_ranges=tuple(ranges))


def normalization_factor(plan: MicroBatchPlan, k: int, mode: str) -> float:
    """Scale applied to micro-batch k's loss before backward."""
    if not 0 <= k < plan.n_s_mu:
        raise ValueError(f"micro-batch index {k} outside plan of {plan.n_s_mu}")
    if mode == "paper_faithful":
        return 1.0 / plan.n_s_mu
    if mode == "exact_weighted":
        return plan.sizes[k] / plan.n_b
    if mode == "off":
        return 1.0
    raise ValueError(f"unknown normalization mode {mode!r}")


def normalize_loss(loss: LossValue, plan: MicroBatchPlan, k: int, mode: str) -> LossValue:
    """The loss of micro-batch k scaled by its normalization factor."""
    factor = normalization_factor(plan, k, mode)
    return LossValue(value=loss.value * factor, n_samples=loss.n_samples)


class GradientAccumulator:
    """Running per-parameter sum of micro-batch gradients within one mini-batch."""

    def __init__(self, params: ParameterSet, expected: int | None = None):
        self.sums: dict[str, np.ndarray] = {
            name: np.zeros(t.shape) for name, t in params.items() if t.grad_required
        }
        self.micro_batches_seen = 0
        self.expected = expected

    def begin(self, expected: int) -> None:
        """Reset for the next mini-batch; called once, after the optimizer step."""
        for arr in self.sums.values():
            arr.fill(0.0)
        self.micro_batches_seen = 0
        self.expected = expected

    def add(self, grads: GradientSet) -> None:
        if self.expected is not None and self.micro_batches_seen >= self.expected:
            raise AccumulatorOverflowError(
                f"already accumulated {self.micro_batches_seen} of {self.expected} micro-batches"
            )
        if set(grads.keys()) != set(self.sums):
            raise AccumulatorOverflowError(
                "gradient keys do not match accumulator parameters"
            )
        for name, grad in grads.items():
            self.sums[name] += grad
        self.micro_batches_seen += 1

    def as_gradient_set(self) -> GradientSet:
        return GradientSet(dict(self.sums))


def accumulate(acc: GradientAccumulator, grads: GradientSet) -> GradientAccumulator:
    """Element-wise add one micro-batch's gradients into the running sum."""
    acc.add(grads)
    return acc


def _micro_batches(x: np.ndarray, y: np.ndarray, plan: MicroBatchPlan, prefetch: bool):
    """Yield materialized micro-batch slices in plan order.

    With ``prefetch`` the next micro-batch is tensorized on a worker thread
    while the caller computes on the current one (two slots: one in
    flight, one in use). Slicing is deterministic, so results are
    bit-identical with prefetch on or off.
    """

    def materialize(k: int):
        lo, hi = plan.index_ranges[k]
        return np.ascontiguousarray(x[lo:hi]), np.ascontiguousarray(y[lo:hi])

    if not prefetch:
        for k in range(plan.n_s_mu):
            yield materialize(k)
        return
    with ThreadPoolExecutor(max_workers=1) as pool:
        pending = pool.submit(materialize, 0)
        for k in range(plan.n_s_mu):
            current = pending.result()
            if k + 1 < plan.n_s_mu:
                pending = pool.submit(materialize, k + 1)
            yield current


@dataclass
class MiniBatchStats:
    """Per-mini-batch observables: losses before/after normalization, grad norm."""

    losses_raw: list[float]
    losses_normalized: list[float]
    loss: float  # exact sample-weighted mean over the mini-batch
    grad_norm: float
    n_micro: int
    outputs: np.ndarray
    step_count: int = 0


def mini_batch_gradient(model: Model, params: ParameterSet,
                        x: np.ndarray, y: np.ndarray, plan: MicroBatchPlan,
                        normalization: str = "paper_faithful",
                        loss_kind: str = "mse", *,
                        loss_from_logits: bool = True,
                        dice_smoothing: float = 1.0,
                        prefetch: bool = False,
                        accumulator: GradientAccumulator | None = None,
                        normalize_via: str = "seed",
                        forward_mode: str = "train",
                        ) -> tuple[GradientSet, MiniBatchStats]:
    """Accumulated gradient of one mini-batch, computed micro-batch by micro-batch.

    ``normalize_via`` selects where the normalization factor enters:
    ``"seed"`` folds it into the backward seed, ``"loss_scale"`` scales the
    recorded loss before backward. Both produce identical gradients; the
    equivalence is asserted in the test suite.
    """
    if x.shape[0] != plan.n_b:
        raise ValueError(f"batch has {x.shape[0]} samples but plan expects {plan.n_b}")
    if normalize_via not in ("seed", "loss_scale"):
        raise ValueError(f"unknown normalize_via {normalize_via!r}")
    acc = accumulator if accumulator is not None else GradientAccumulator(params)
    acc.begin(plan.n_s_mu)
    losses_raw: list[float] = []
    losses_normalized: list[float] = []
    outputs: list[np.ndarray] = []
    for k, (xk, yk) in enumerate(_micro_batches(x, y, plan, prefetch)):
        out, tape = forward(model, params, xk, forward_mode)
        loss = compute_loss(loss_kind, out, yk, tape=tape,
                            from_logits=loss_from_logits, dice_smoothing=dice_smoothing)
        factor = normalization_factor(plan, k, normalization)
        if normalize_via == "loss_scale":
            tape.scale_loss(factor)
            grads = backward(tape, 1.0)
        else:
            grads = backward(tape, factor)
        accumulate(acc, grads)
        losses_raw.append(loss.value)
        losses_normalized.append(loss.value * factor)
        outputs.append(out)
    total = acc.as_gradient_set()
    mini_loss = float(sum(s * v for s, v in zip(plan.sizes, losses_raw)) / plan.n_b)
    stats = MiniBatchStats(
        losses_raw=losses_raw,
        losses_normalized=losses_normalized,
        loss=mini_loss,
        grad_norm=total.l2_norm(),
        n_micro=plan.n_s_mu,
        outputs=np.concatenate(outputs, axis=0),
    )
    return total, stats


def train_mini_batch(model: Model, params: ParameterSet,
                     batch: tuple[np.ndarray, np.ndarray], plan: MicroBatchPlan,
                     normalization: str, loss_kind: str,
                     optimizer_state: OptimizerState, *,
                     loss_from_logits: bool = True,
                     dice_smoothing: float = 1.0,
                     prefetch: bool = False,
                     accumulator: GradientAccumulator | None = None,
                     lr_for_step: Callable[[int], float] | None = None,
                     ) -> tuple[ParameterSet, MiniBatchStats]:
    """Train on one mini-batch: stream micro-batches, then update once.

    Every micro-batch runs forward -> loss -> normalize -> backward ->
    accumulate; the optimizer applies a single step from the accumulated
    gradient after the last micro-batch (the deferred update). The
    accumulated gradient is passed to the optimizer as-is; normalization
    already happened at the loss.
    """
    x, y = batch
    total, stats = mini_batch_gradient(
        model, params, x, y, plan, normalization, loss_kind,
        loss_from_logits=loss_from_logits, dice_smoothing=dice_smoothing,
        prefetch=prefetch, accumulator=accumulator,
    )
    if lr_for_step is not None:
        optimizer_state.lr = lr_for_step(optimizer_state.step_count)
    apply_update(params, total, optimizer_state)
    stats.step_count = optimizer_state.step_count
    return params, stats


@dataclass
class EpochStats:
    """One epoch's observables: per-mini-batch losses/metrics and totals."""

    mini_losses: list[float]
    mean_loss: float
    mini_metrics: list[float]
    mini_sizes: list[int]
    step_count: int
    mini_stats: list[MiniBatchStats] = field(default_factory=list)


def train_epoch(model: Model, params: ParameterSet,
                x: np.ndarray, y: np.ndarray, *,
                mini_batch_size: int, micro_batch_size: int | None,
                normalization: str, loss_kind: str,
                optimizer_state: OptimizerState,
                seed: int, epoch_index: int,
                shuffle: bool = True,
                loss_from_logits: bool = True,
                dice_smoothing: float = 1.0,
                prefetch: bool = False,
                lr_for_step: Callable[[int], float] | None = None,
                metric_fn: Callable[[np.ndarray, np.ndarray], float] | None = None,
                keep_mini_stats: bool = False,
                ) -> EpochStats:
    """One pass over the dataset in deterministic shuffled order.

    The last mini-batch may be smaller; the split plan is recomputed for
    it, so the normalization factor follows the actual micro-batch count.
    ``micro_batch_size=None`` disables splitting (plain mini-batch
    training, the no-MBS baseline).
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    if shuffle:
        order = named_stream(seed, f"shuffle/epoch{epoch_index}").permutation(n)
    else:
        order = np.arange(n)
    acc = GradientAccumulator(params)
    mini_losses: list[float] = []
    mini_metrics: list[float] = []
    mini_sizes: list[int] = []
    all_stats: list[MiniBatchStats] = []
    for start in range(0, n, mini_batch_size):
        idx = order[start : start + mini_batch_size]
        xb = x[idx]
        yb = y[idx]
        n_mu = micro_batch_size if micro_batch_size is not None else len(idx)
        plan = plan_split(len(idx), n_mu)
        params, stats = train_mini_batch(
            model, params, (xb, yb), plan, normalization, loss_kind,
            optimizer_state, loss_from_logits=loss_from_logits,
            dice_smoothing=dice_smoothing, prefetch=prefetch,
            accumulator=acc, lr_for_step=lr_for_step,
        )
        mini_losses.append(stats.loss)
        mini_sizes.append(len(idx))
        if metric_fn is not None:
            mini_metrics.append(float(metric_fn(stats.outputs, yb)))
        if keep_mini_stats:
            all_stats.append(stats)
    mean_loss = float(np.dot(mini_losses, mini_sizes) / n)
    return EpochStats(
        mini_losses=mini_losses,
        mean_loss=mean_loss,
        mini_metrics=mini_metrics,
        mini_sizes=mini_sizes,
        step_count=optimizer_state.step_count,
        mini_stats=all_stats,
    )
