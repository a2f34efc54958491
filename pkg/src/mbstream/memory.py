"""Analytic device-memory budget: parameter space vs data space.

The simulated device holds two domains: the model parameter space
(parameters, gradients, optimizer state) and the data space (the streamed
micro-batch plus every activation the tape retains). Accounting is purely
shape-derived at 8 bytes per element, and the activation term bills
exactly the buffers the autograd tape actually keeps, so "does not fit"
verdicts are deterministic on any host.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ModelDoesNotFitError
from .nn import Model, ModelSpec, Shape, spec_parameter_count

BYTES_PER_ELEMENT = 8  # 64-bit floats (and int64 pool switches) throughout

# parameters + gradients always live on-device; optimizer slots add more
_OPTIMIZER_SLOTS = {"sgd": 1, "adam": 2}


@dataclass(frozen=True)
class MemoryBudget:
    """Byte accounting against a fixed simulated device capacity."""

    capacity_bytes: int
    param_bytes: int
    data_bytes_per_sample: int
    fixed_overhead_bytes: int = 0

    def __post_init__(self):
        if self.capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be positive")
        if self.data_bytes_per_sample <= 0:
            raise ValueError("data_bytes_per_sample must be positive")
        if min(self.param_bytes, self.fixed_overhead_bytes) < 0:
            raise ValueError("byte counts must be non-negative")

    @property
    def resident_bytes(self) -> int:
        return self.param_bytes + self.fixed_overhead_bytes

    def bytes_for(self, n_samples: int) -> int:
        return self.resident_bytes + n_samples * self.data_bytes_per_sample

    def fits(self, n_samples: int) -> bool:
        return self.bytes_for(n_samples) <= self.capacity_bytes


def optimizer_state_multiplier(optimizer_kind: str) -> int:
    try:
        return _OPTIMIZER_SLOTS[optimizer_kind]
    except KeyError:
        raise ValueError(f"unknown optimizer kind {optimizer_kind!r}") from None


def parameter_space_bytes(spec: ModelSpec, optimizer_kind: str) -> int:
    """Bytes for parameters + gradients + optimizer slots (1 SGD, 2 Adam)."""
    slots = 2 + optimizer_state_multiplier(optimizer_kind)
    return BYTES_PER_ELEMENT * spec_parameter_count(spec) * slots


def data_space_bytes_per_sample(spec: ModelSpec, input_shape: Shape,
                                target_elements_per_sample: int = 0) -> int:
    """Bytes one sample occupies in data space: input, target, retained activations."""
    model = Model(spec, input_shape)
    elements = model.data_elements_per_sample() + target_elements_per_sample
    return BYTES_PER_ELEMENT * elements


def estimate_memory(spec: ModelSpec, input_shape: Shape, optimizer_kind: str,
                    capacity_bytes: int, *,
                    target_elements_per_sample: int = 0,
                    fixed_overhead_bytes: int = 0) -> MemoryBudget:
    """Shape-derived memory budget for training this model on the simulated device."""
    return MemoryBudget(
        capacity_bytes=capacity_bytes,
        param_bytes=parameter_space_bytes(spec, optimizer_kind),
        data_bytes_per_sample=data_space_bytes_per_sample(
            spec, input_shape, target_elements_per_sample
        ),
        fixed_overhead_bytes=fixed_overhead_bytes,
    )


def fit_micro_batch(budget: MemoryBudget) -> int:
    """Largest micro-batch size whose data space still fits beside the model.

    Raises ModelDoesNotFitError when not even one sample fits.
    """
    free = budget.capacity_bytes - budget.resident_bytes
    n = free // budget.data_bytes_per_sample
    if n < 1:
        raise ModelDoesNotFitError(
            f"device capacity {budget.capacity_bytes} cannot hold the model "
            f"({budget.resident_bytes} resident bytes) plus one sample "
            f"({budget.data_bytes_per_sample} bytes/sample)"
        )
    return int(n)
