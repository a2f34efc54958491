"""Feed-forward model construction, forward evaluation, and reverse-mode gradients.

Models are ordered stacks of dense / conv2d / relu / batchnorm / flatten /
maxpool2d layers. A forward pass records every intermediate the backward
pass needs onto a tape (stored by value, no recomputation); ``backward``
then walks the tape in reverse and returns exact gradients of the scalar
loss attached to the tape.

The tape's retention policy is deliberately simple and observable: the
model input, every non-view layer output, and per-layer workspaces (conv
patch matrices, pooling switch indices) stay alive until backward runs.
The memory model in :mod:`mbstream.memory` bills exactly these buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, Union

import numpy as np

from .errors import NonFiniteError, ShapeCompositionError, TapeConsumedError
from .rng import named_stream
from .tensor import GradientSet, ParameterSet, Tensor, as_array

Shape = tuple[int, ...]


# ---------------------------------------------------------------------------
# Layer descriptors (the ModelSpec entries)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class BatchNorm:
    features: int
    epsilon: float = 1e-5
    momentum: float = 0.1


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int
    stride: int | None = None  # defaults to kernel


LayerSpec = Union[Dense, Conv2d, Relu, BatchNorm, Flatten, MaxPool2d]
ModelSpec = Sequence[LayerSpec]


def spec_parameter_count(spec: ModelSpec) -> int:
    """Total learnable scalars declared by a model spec."""
    total = 0
    for entry in spec:
        if isinstance(entry, Dense):
            total += entry.in_features * entry.out_features
            if entry.bias:
                total += entry.out_features
        elif isinstance(entry, Conv2d):
            total += entry.out_channels * entry.in_channels * entry.kernel * entry.kernel
            total += entry.out_channels
        elif isinstance(entry, BatchNorm):
            total += 2 * entry.features
    return total


# ---------------------------------------------------------------------------
# Runtime layers
# ---------------------------------------------------------------------------

class _Layer:
    """One executable layer; subclasses own their parameter naming and caches."""

    output_is_view = False

    def __init__(self, spec: LayerSpec, name: str):
        self.spec = spec
        self.name = name

    def out_shape(self, in_shape: Shape) -> Shape:
        raise NotImplementedError

    def param_shapes(self) -> dict[str, Shape]:
        return {}

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, arrays: dict[str, np.ndarray], mode: str):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache: dict[str, Any]):
        raise NotImplementedError

    def extra_retained_per_sample(self, in_shape: Shape) -> int:
        """Per-sample workspace elements kept on the tape beyond the layer output."""
        return 0


def _uniform_fan_in(seed: int, stream_name: str, shape: Shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return named_stream(seed, stream_name).uniform(-bound, bound, size=shape)


class _DenseLayer(_Layer):
    spec: Dense

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.spec.in_features:
            raise ValueError(
                f"dense expects per-sample shape ({self.spec.in_features},), got {in_shape}"
            )
        return (self.spec.out_features,)

    def param_shapes(self):
        shapes = {f"{self.name}.weight": (self.spec.in_features, self.spec.out_features)}
        if self.spec.bias:
            shapes[f"{self.name}.bias"] = (self.spec.out_features,)
        return shapes

    def init_params(self, seed):
        fan_in = self.spec.in_features
        out = {}
        for pname, shape in self.param_shapes().items():
            out[pname] = _uniform_fan_in(seed, f"init/{pname}", shape, fan_in)
        return out

    def forward(self, x, arrays, mode):
        w = arrays[f"{self.name}.weight"]
        y = x @ w
        if self.spec.bias:
            y = y + arrays[f"{self.name}.bias"]
        return y, {"x": x, "_w": w}

    def backward(self, dy, cache):
        x, w = cache["x"], cache["_w"]
        grads = {f"{self.name}.weight": x.T @ dy}
        if self.spec.bias:
            grads[f"{self.name}.bias"] = dy.sum(axis=0)
        return dy @ w.T, grads


def _conv_out_hw(h: int, w: int, k: int, s: int, p: int) -> tuple[int, int]:
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, k: int, s: int, h_out: int, w_out: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*k*k, h_out*w_out) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + s * h_out : s, j : j + s * w_out : s]
    return np.ascontiguousarray(cols.reshape(n, c * k * k, h_out * w_out))


def _col2im_add(dcols: np.ndarray, x_shape: Shape, k: int, s: int, p: int,
                h_out: int, w_out: int) -> np.ndarray:
    """Scatter-add (N, C*k*k, L) patch gradients back onto the input grid."""
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, k, k, h_out, w_out)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * h_out : s, j : j + s * w_out : s] += dcols[:, :, i, j]
    if p:
        return dxp[:, :, p : p + h, p : p + w]
    return dxp


class _Conv2dLayer(_Layer):
    spec: Conv2d

    def out_shape(self, in_shape):
        s = self.spec
        if len(in_shape) != 3 or in_shape[0] != s.in_channels:
            raise ValueError(
                f"conv2d expects per-sample shape ({s.in_channels}, H, W), got {in_shape}"
            )
        h_out, w_out = _conv_out_hw(in_shape[1], in_shape[2], s.kernel, s.stride, s.padding)
        if h_out < 1 or w_out < 1:
            raise ValueError(
                f"conv2d kernel {s.kernel} stride {s.stride} padding {s.padding} "
                f"does not fit input {in_shape}"
            )
        return (s.out_channels, h_out, w_out)

    def param_shapes(self):
        s = self.spec
        return {
            f"{self.name}.weight": (s.out_channels, s.in_channels, s.kernel, s.kernel),
            f"{self.name}.bias": (s.out_channels,),
        }

    def init_params(self, seed):
        s = self.spec
        fan_in = s.in_channels * s.kernel * s.kernel
        return {
            pname: _uniform_fan_in(seed, f"init/{pname}", shape, fan_in)
            for pname, shape in self.param_shapes().items()
        }

    def forward(self, x, arrays, mode):
        s = self.spec
        n, _, h, w = x.shape
        h_out, w_out = _conv_out_hw(h, w, s.kernel, s.stride, s.padding)
        xp = np.pad(x, ((0, 0), (0, 0), (s.padding,) * 2, (s.padding,) * 2)) if s.padding else x
        cols = _im2col(xp, s.kernel, s.stride, h_out, w_out)
        w_mat = arrays[f"{self.name}.weight"].reshape(s.out_channels, -1)
        y = np.matmul(w_mat, cols) + arrays[f"{self.name}.bias"][:, None]
        y = y.reshape(n, s.out_channels, h_out, w_out)
        # x is kept on the tape alongside the patch matrix: the streamed
        # activation occupies data space for the whole micro-step.
        return y, {"x": x, "cols": cols, "_w": w_mat,
                   "_dims": (x.shape, h_out, w_out)}

    def backward(self, dy, cache):
        s = self.spec
        x_shape, h_out, w_out = cache["_dims"]
        n = x_shape[0]
        dy_mat = dy.reshape(n, s.out_channels, h_out * w_out)
        cols = cache["cols"]
        dw = np.einsum("nfl,nkl->fk", dy_mat, cols)
        db = dy_mat.sum(axis=(0, 2))
        dcols = np.matmul(cache["_w"].T, dy_mat)
        dx = _col2im_add(dcols, x_shape, s.kernel, s.stride, s.padding, h_out, w_out)
        grads = {
            f"{self.name}.weight": dw.reshape(s.out_channels, s.in_channels, s.kernel, s.kernel),
            f"{self.name}.bias": db,
        }
        return dx, grads

    def extra_retained_per_sample(self, in_shape):
        s = self.spec
        h_out, w_out = _conv_out_hw(in_shape[1], in_shape[2], s.kernel, s.stride, s.padding)
        return s.in_channels * s.kernel * s.kernel * h_out * w_out


class _ReluLayer(_Layer):
    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, arrays, mode):
        return np.maximum(x, 0.0), {"x": x}

    def backward(self, dy, cache):
        return dy * (cache["x"] > 0), {}


class _BatchNormLayer(_Layer):
    """Normalizes over the batch (and spatial) axes per feature channel.

    Train mode uses the statistics of the batch it is given, which under
    micro-batch streaming is the micro-batch, not the mini-batch; this is
    the one place the engine is knowingly not equivalent to full-batch
    training. Running statistics use the biased variance.
    """

    spec: BatchNorm

    def __init__(self, spec, name):
        super().__init__(spec, name)
        self.running_mean = np.zeros(spec.features)
        self.running_var = np.ones(spec.features)

    def reset_state(self):
        self.running_mean = np.zeros(self.spec.features)
        self.running_var = np.ones(self.spec.features)

    def state_snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.running_mean.copy(), self.running_var.copy()

    def restore_state(self, snapshot) -> None:
        self.running_mean, self.running_var = snapshot[0].copy(), snapshot[1].copy()

    def out_shape(self, in_shape):
        f = self.spec.features
        if len(in_shape) not in (1, 3) or in_shape[0] != f:
            raise ValueError(
                f"batchnorm expects per-sample shape ({f},) or ({f}, H, W), got {in_shape}"
            )
        return in_shape

    def param_shapes(self):
        f = self.spec.features
        return {f"{self.name}.gamma": (f,), f"{self.name}.beta": (f,)}

    def init_params(self, seed):
        f = self.spec.features
        return {f"{self.name}.gamma": np.ones(f), f"{self.name}.beta": np.zeros(f)}

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bshape(self, x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def forward(self, x, arrays, mode):
        axes, bshape = self._axes(x), self._bshape(x)
        gamma = arrays[f"{self.name}.gamma"].reshape(bshape)
        beta = arrays[f"{self.name}.beta"].reshape(bshape)
        if mode == "train":
            mean = x.mean(axis=axes, keepdims=True)
            var = x.var(axis=axes, keepdims=True)
            m = self.spec.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean.ravel()
            self.running_var = (1.0 - m) * self.running_var + m * var.ravel()
        else:
            mean = self.running_mean.reshape(bshape)
            var = self.running_var.reshape(bshape)
        std = np.sqrt(var + self.spec.epsilon)
        y = gamma * (x - mean) / std + beta
        cache = {"x": x, "_mean": mean, "_std": std, "_gamma": gamma, "_mode": mode}
        return y, cache

    def backward(self, dy, cache):
        x, mean, std, gamma = cache["x"], cache["_mean"], cache["_std"], cache["_gamma"]
        axes = self._axes(x)
        x_hat = (x - mean) / std
        dgamma = (dy * x_hat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        if cache["_mode"] == "train":
            dx = (gamma / std) * (
                dy
                - dy.mean(axis=axes, keepdims=True)
                - x_hat * (dy * x_hat).mean(axis=axes, keepdims=True)
            )
        else:
            dx = dy * gamma / std
        return dx, {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}


class _FlattenLayer(_Layer):
    output_is_view = True

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, arrays, mode):
        return x.reshape(x.shape[0], -1), {"_x_shape": x.shape}

    def backward(self, dy, cache):
        return dy.reshape(cache["_x_shape"]), {}


class _MaxPool2dLayer(_Layer):
    spec: MaxPool2d

    def _stride(self):
        return self.spec.stride if self.spec.stride is not None else self.spec.kernel

    def out_shape(self, in_shape):
        k, s = self.spec.kernel, self._stride()
        if len(in_shape) != 3:
            raise ValueError(f"maxpool2d expects per-sample shape (C, H, W), got {in_shape}")
        h_out, w_out = _conv_out_hw(in_shape[1], in_shape[2], k, s, 0)
        if h_out < 1 or w_out < 1:
            raise ValueError(f"maxpool2d kernel {k} stride {s} does not fit input {in_shape}")
        return (in_shape[0], h_out, w_out)

    def forward(self, x, arrays, mode):
        k, s = self.spec.kernel, self._stride()
        n, c, h, w = x.shape
        h_out, w_out = _conv_out_hw(h, w, k, s, 0)
        cols = _im2col(x, k, s, h_out, w_out).reshape(n, c, k * k, h_out * w_out)
        switches = cols.argmax(axis=2)  # ties -> lowest window index
        y = np.take_along_axis(cols, switches[:, :, None, :], axis=2)[:, :, 0, :]
        y = y.reshape(n, c, h_out, w_out)
        return y, {"x": x, "switches": switches,
                   "_dims": (x.shape, k, s, h_out, w_out)}

    def backward(self, dy, cache):
        x_shape, k, s, h_out, w_out = cache["_dims"]
        n, c = x_shape[:2]
        switches = cache["switches"]
        dy_flat = dy.reshape(n, c, 1, h_out * w_out)
        window = np.arange(k * k).reshape(1, 1, k * k, 1)
        dcols = np.where(window == switches[:, :, None, :], dy_flat, 0.0)
        dx = _col2im_add(dcols.reshape(n, c * k * k, h_out * w_out),
                         x_shape, k, s, 0, h_out, w_out)
        return dx, {}

    def extra_retained_per_sample(self, in_shape):
        out = self.out_shape(in_shape)
        return int(np.prod(out))  # int64 switch indices, 8 bytes each


_LAYER_CLASSES: dict[type, type[_Layer]] = {
    Dense: _DenseLayer,
    Conv2d: _Conv2dLayer,
    Relu: _ReluLayer,
    BatchNorm: _BatchNormLayer,
    Flatten: _FlattenLayer,
    MaxPool2d: _MaxPool2dLayer,
}


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Model:
    """Validated layer stack bound to a declared per-sample input shape."""

    def __init__(self, spec: ModelSpec, input_shape: Shape):
        self.spec = tuple(spec)
        self.input_shape = tuple(int(d) for d in input_shape)
        if any(d < 1 for d in self.input_shape):
            raise ShapeCompositionError(0, f"input shape {self.input_shape} has non-positive dims")
        self.layers: list[_Layer] = []
        self.layer_in_shapes: list[Shape] = []
        shape = self.input_shape
        for i, entry in enumerate(self.spec):
            cls = _LAYER_CLASSES.get(type(entry))
            if cls is None:
                raise ShapeCompositionError(i, f"unknown layer descriptor {entry!r}")
            layer = cls(entry, f"layer{i}")
            try:
                out = layer.out_shape(shape)
            except ValueError as exc:
                raise ShapeCompositionError(i, str(exc)) from exc
            self.layers.append(layer)
            self.layer_in_shapes.append(shape)
            shape = out
        self.output_shape = shape

    @property
    def has_batchnorm(self) -> bool:
        return any(isinstance(e, BatchNorm) for e in self.spec)

    def param_shapes(self) -> dict[str, Shape]:
        shapes: dict[str, Shape] = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    def reset_state(self) -> None:
        for layer in self.layers:
            if isinstance(layer, _BatchNormLayer):
                layer.reset_state()

    def state_snapshot(self) -> dict[str, Any]:
        return {
            layer.name: layer.state_snapshot()
            for layer in self.layers
            if isinstance(layer, _BatchNormLayer)
        }

    def restore_state(self, snapshot: dict[str, Any]) -> None:
        for layer in self.layers:
            if isinstance(layer, _BatchNormLayer):
                layer.restore_state(snapshot[layer.name])

    def data_elements_per_sample(self) -> int:
        """Per-sample elements the tape retains: input, non-view outputs, workspaces."""
        total = int(np.prod(self.input_shape))
        shape = self.input_shape
        for layer in self.layers:
            out = layer.out_shape(shape)
            if not layer.output_is_view:
                total += int(np.prod(out))
            total += layer.extra_retained_per_sample(shape)
            shape = out
        return total


def build_model(spec: ModelSpec, input_shape: Shape, seed: int) -> tuple[ParameterSet, Model]:
    """Construct a model and deterministically initialized parameters.

    Weights draw from uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) on a named
    substream per parameter, so identical (spec, shape, seed) triples give
    bit-identical parameters regardless of build order.
    """
    model = Model(spec, input_shape)
    params = ParameterSet()
    for layer in model.layers:
        for pname, values in layer.init_params(seed).items():
            params.add(pname, Tensor(values, grad_required=True))
    return params, model


# ---------------------------------------------------------------------------
# Tape, forward, backward
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Record of one forward pass, consumed exactly once by backward."""

    steps: list[tuple[_Layer, dict[str, Any]]]
    params: ParameterSet
    output: np.ndarray
    batch_size: int
    loss_pullback: Callable[[float], np.ndarray] | None = None
    loss_value: float | None = None
    loss_scale: float = 1.0
    consumed: bool = False

    def attach_loss(self, value: float, pullback: Callable[[float], np.ndarray]) -> None:
        """Register the scalar loss and its gradient w.r.t. the forward output."""
        if self.loss_pullback is not None:
            raise RuntimeError("a loss is already attached to this tape")
        self.loss_value = float(value)
        self.loss_pullback = pullback

    def scale_loss(self, factor: float) -> None:
        """Fold a scalar multiplier into the recorded loss (e.g. 1/N_sets)."""
        if self.loss_pullback is None:
            raise RuntimeError("no loss attached to scale")
        self.loss_scale *= factor
        self.loss_value = self.loss_value * factor

    def retained_per_sample(self) -> int:
        """Actual per-sample elements held by this tape (views deduplicated)."""

        def root_base(a: np.ndarray) -> int:
            while isinstance(a.base, np.ndarray):
                a = a.base
            return id(a)

        seen: dict[int, int] = {}
        arrays = [self.output]
        for _, cache in self.steps:
            arrays.extend(v for k, v in cache.items()
                          if not k.startswith("_") and isinstance(v, np.ndarray))
        for a in arrays:
            if a.shape and a.shape[0] == self.batch_size:
                seen.setdefault(root_base(a), a.size // self.batch_size)
        return sum(seen.values())


def forward(model: Model, params: ParameterSet, inputs, mode: str = "train"
            ) -> tuple[np.ndarray, Tape]:
    """Run the model on a batch, recording everything backward will need.

    ``inputs`` may be a Tensor or array of shape (batch, *model.input_shape)
    with any batch size >= 1. Train mode normalizes batchnorm by the given
    batch's own statistics; eval mode uses running statistics and is pure.
    A non-finite intermediate raises, naming the layer that produced it.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = inputs.data if isinstance(inputs, Tensor) else as_array(inputs)
    expected = model.input_shape
    if x.ndim != len(expected) + 1 or x.shape[1:] != expected or x.shape[0] < 1:
        raise ValueError(
            f"input shape {x.shape} does not match (batch, *{expected})"
        )
    arrays = params.arrays()
    steps: list[tuple[_Layer, dict[str, Any]]] = []
    for i, layer in enumerate(model.layers):
        x, cache = layer.forward(x, arrays, mode)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(i)
        steps.append((layer, cache))
    return x, Tape(steps=steps, params=params, output=x, batch_size=x.shape[0])


def backward(tape: Tape, loss_grad_seed: float = 1.0) -> GradientSet:
    """Reverse-mode gradients of the tape's scalar loss w.r.t. the parameters.

    ``loss_grad_seed`` is dL/dL: 1 for the plain gradient, or a
    normalization factor folded directly into the seed. backward is linear
    in the seed. The tape is consumed; a second call raises.
    """
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward()")
    if tape.loss_pullback is None:
        raise RuntimeError("tape has no scalar loss attached; compute a loss first")
    tape.consumed = True
    dy = tape.loss_pullback(loss_grad_seed * tape.loss_scale)
    grads: dict[str, np.ndarray] = {}
    for layer, cache in reversed(tape.steps):
        dy, layer_grads = layer.backward(dy, cache)
        grads.update(layer_grads)
    wanted = {
        name: grads[name] for name, t in tape.params.items() if t.grad_required
    }
    result = GradientSet(wanted)
    result.validate_against(tape.params)
    return result


def finite_difference_gradients(model: Model, params: ParameterSet,
                                loss_fn: Callable[[np.ndarray, np.ndarray], float],
                                batch: tuple[np.ndarray, np.ndarray],
                                eps: float = 1e-6,
                                mode: str = "train") -> GradientSet:
    """Central-difference gradient oracle: (L(w+eps) - L(w-eps)) / (2 eps).

    Perturbs one parameter scalar at a time and re-runs the forward pass.
    Parameters and batchnorm running statistics are restored on exit.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs, targets = batch
    bn_state = model.state_snapshot()

    def evaluate() -> float:
        out, _ = forward(model, params, inputs, mode)
        return float(loss_fn(out, targets))

    grads: dict[str, np.ndarray] = {}
    try:
        for name, tensor in params.items():
            if not tensor.grad_required:
                continue
            flat = tensor.data.ravel()
            grad = np.zeros_like(flat)
            for idx in range(flat.size):
                original = flat[idx]
                flat[idx] = original + eps
                plus = evaluate()
                flat[idx] = original - eps
                minus = evaluate()
                flat[idx] = original
                grad[idx] = (plus - minus) / (2.0 * eps)
            grads[name] = grad.reshape(tensor.shape)
    finally:
        model.restore_state(bn_state)
    return GradientSet(grads)
