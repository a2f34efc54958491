"""Exception types shared across the package."""

from __future__ import annotations


class ShapeCompositionError(ValueError):
    """Adjacent layers do not compose; carries the offending layer index."""

    def __init__(self, layer_index: int, message: str):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


class NonFiniteError(ArithmeticError):
    """A forward pass produced NaN/Inf; overflow is an error, never a value."""

    def __init__(self, layer_index: int, message: str = "non-finite values in forward output"):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


class TapeConsumedError(RuntimeError):
    """backward() was called twice on the same tape."""


class AccumulatorOverflowError(RuntimeError):
    """More micro-batch gradients accumulated than the plan allows."""


class GradientKeyMismatchError(KeyError):
    """Gradient names do not match the parameter set."""


class ModelDoesNotFitError(RuntimeError):
    """Even a single-sample micro-batch exceeds the simulated device capacity."""


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


class IdxFormatError(ValueError):
    """Malformed IDX file; message names the byte offset of the problem."""
