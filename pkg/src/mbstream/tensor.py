"""Dense float64 tensors, named parameter sets, and gradient sets.

Everything runs in 64-bit floats: the engine's headline guarantees are
near-machine-precision gradient equalities, and wide floats keep the
rounding noise far below the asserted tolerances.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import GradientKeyMismatchError

ArrayLike = "np.ndarray | float | int | Iterable"


def as_array(values) -> np.ndarray:
    """Coerce to a C-contiguous float64 ndarray."""
    return np.ascontiguousarray(values, dtype=np.float64)


@dataclass
class Tensor:
    """An n-dimensional float64 value array.

    ``data`` is stored row-major (C order); ``grad_required`` marks tensors
    the backward pass must produce gradients for (parameters, typically).
    """

    data: np.ndarray
    grad_required: bool = False

    def __post_init__(self):
        self.data = as_array(self.data)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor data must be finite")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.grad_required)


class ParameterSet:
    """Ordered, uniquely named parameter tensors.

    Iteration order is insertion order and is stable for the life of the
    run, so sequential reductions over parameters are reproducible.
    """

    def __init__(self, tensors: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]] = ()):
        self._tensors: dict[str, Tensor] = {}
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        for name, tensor in items:
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name!r}")
        self._tensors[name] = tensor

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet((name, t.copy()) for name, t in self.items())

    def total_elements(self) -> int:
        return sum(t.numel for t in self._tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)


@dataclass
class GradientSet:
    """Per-parameter gradient arrays keyed by parameter name."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __len__(self) -> int:
        return len(self.arrays)

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()

    def copy(self) -> "GradientSet":
        return GradientSet({name: g.copy() for name, g in self.arrays.items()})

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet({name: g * factor for name, g in self.arrays.items()})

    def l2_norm(self) -> float:
        total = 0.0
        for g in self.arrays.values():
            total += float(np.dot(g.ravel(), g.ravel()))
        return float(np.sqrt(total))

    def validate_against(self, params: ParameterSet) -> None:
        """Keys must exactly equal the grad-required parameter names; shapes match."""
        expected = {name for name, t in params.items() if t.grad_required}
        got = set(self.arrays)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise GradientKeyMismatchError(
                f"gradient keys do not match parameters (missing={missing}, extra={extra})"
            )
        for name, grad in self.arrays.items():
            if grad.shape != params[name].shape:
                raise GradientKeyMismatchError(
                    f"gradient shape {grad.shape} != parameter shape {params[name].shape} for {name!r}"
                )
