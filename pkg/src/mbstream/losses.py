"""Mean-reduced training losses and segmentation/classification metrics.

Every loss is the mean of per-sample losses over the batch dimension. That
mean reduction is what makes micro-batch gradient accumulation exact: the
mean over a batch decomposes into a weighted mean of per-part means, so a
correctly normalized sum of micro-batch gradients reproduces the
mini-batch gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Tape
from .tensor import Tensor, as_array

PROB_CLAMP = 1e-12

LOSS_KINDS = ("mse", "cross_entropy", "bce", "bce_dice")


@dataclass
class LossValue:
    """Scalar loss, always mean-reduced over the batch samples."""

    value: float
    n_samples: int
    reduction: str = "mean"

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"loss value must be finite, got {self.value}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be positive, got {self.n_samples}")


@dataclass
class MaskPair:
    """A predicted probability mask and its binary ground truth, same shape."""

    prediction: Tensor
    ground_truth: Tensor

    def __post_init__(self):
        if not isinstance(self.prediction, Tensor):
            self.prediction = Tensor(self.prediction)
        if not isinstance(self.ground_truth, Tensor):
            self.ground_truth = Tensor(self.ground_truth)
        if self.prediction.shape != self.ground_truth.shape:
            raise ValueError(
                f"mask shapes differ: {self.prediction.shape} vs {self.ground_truth.shape}"
            )
        p = self.prediction.data
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValueError("prediction entries must lie in [0, 1]")
        g = self.ground_truth.data
        if not np.all((g == 0.0) | (g == 1.0)):
            raise ValueError("ground truth must be binary")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _mse(output: np.ndarray, target: np.ndarray):
    diff = output - target
    value = float(np.mean(diff * diff))
    return value, 2.0 * diff / diff.size


def _cross_entropy(logits: np.ndarray, classes: np.ndarray):
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    idx = np.arange(n)
    value = float(-log_probs[idx, classes].mean())
    grad = np.exp(log_probs)
    grad[idx, classes] -= 1.0
    return value, grad / n


def _bce_probs(p: np.ndarray, target: np.ndarray):
    clamped = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    value = float(-np.mean(target * np.log(clamped) + (1.0 - target) * np.log1p(-clamped)))
    grad = (clamped - target) / (clamped * (1.0 - clamped)) / p.size
    grad[p != clamped] = 0.0  # clamp is flat
    return value, grad


def _bce_logits(z: np.ndarray, target: np.ndarray):
    # mean(max(z,0) - z*t + log(1 + exp(-|z|))), stable for large |z|
    value = float(np.mean(np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))))
    grad = (_sigmoid(z) - target) / z.size
    return value, grad


def _dice_soft(p: np.ndarray, target: np.ndarray, smoothing: float):
    """Per-sample soft dice loss, mean-reduced over the batch."""
    n = p.shape[0]
    pf = p.reshape(n, -1)
    gf = target.reshape(n, -1)
    num = 2.0 * (pf * gf).sum(axis=1) + smoothing
    den = pf.sum(axis=1) + gf.sum(axis=1) + smoothing
    value = float(np.mean(1.0 - num / den))
    grad_flat = -(2.0 * gf * den[:, None] - num[:, None]) / (den[:, None] ** 2) / n
    return value, grad_flat.reshape(p.shape)


def _check_same_shape(output, target, kind):
    if output.shape != target.shape:
        raise ValueError(f"{kind}: output shape {output.shape} != target shape {target.shape}")


def mean_loss(kind: str, output, target, *, tape: Tape | None = None,
              from_logits: bool = False) -> LossValue:
    """Batch-mean loss of the given kind, optionally recorded for backward.

    cross_entropy targets are integer class indices; bce targets are binary
    masks against probabilities (or logits when ``from_logits``). Passing
    the forward tape attaches the loss gradient so backward() can run.
    """
    output = as_array(output)
    if kind == "mse":
        target = as_array(target)
        _check_same_shape(output, target, kind)
        value, grad = _mse(output, target)
    elif kind == "cross_entropy":
        classes = np.asarray(target)
        if output.ndim != 2 or classes.ndim != 1 or classes.shape[0] != output.shape[0]:
            raise ValueError(
                f"cross_entropy expects logits (N, K) and class indices (N,), "
                f"got {output.shape} and {classes.shape}"
            )
        if classes.max(initial=0) >= output.shape[1] or classes.min(initial=0) < 0:
            raise ValueError("class index out of range")
        value, grad = _cross_entropy(output, classes.astype(np.int64))
    elif kind == "bce":
        target = as_array(target)
        _check_same_shape(output, target, kind)
        if from_logits:
            value, grad = _bce_logits(output, target)
        else:
            value, grad = _bce_probs(output, target)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    if tape is not None:
        tape.attach_loss(value, lambda seed, g=grad: seed * g)
    return LossValue(value=value, n_samples=output.shape[0])


def dice_loss(pair: MaskPair, *, smoothing: float = 1.0,
              tape: Tape | None = None) -> LossValue:
    """Soft dice loss 1 - (2*sum(p*g)+s)/(sum(p)+sum(g)+s), per sample then batch-mean."""
    p = pair.prediction.data
    g = pair.ground_truth.data
    value, grad = _dice_soft(p, g, smoothing)
    if tape is not None:
        tape.attach_loss(value, lambda seed, gr=grad: seed * gr)
    return LossValue(value=value, n_samples=p.shape[0])


def combined_bce_dice(pair: MaskPair, *, smoothing: float = 1.0,
                      tape: Tape | None = None) -> LossValue:
    """Binary cross-entropy plus soft dice loss, both batch-mean reduced."""
    p = pair.prediction.data
    g = pair.ground_truth.data
    bce_value, bce_grad = _bce_probs(p, g)
    dice_value, dice_grad = _dice_soft(p, g, smoothing)
    value = bce_value + dice_value
    if tape is not None:
        grad = bce_grad + dice_grad
        tape.attach_loss(value, lambda seed, gr=grad: seed * gr)
    return LossValue(value=value, n_samples=p.shape[0])


def compute_loss(kind: str, output, target, *, tape: Tape | None = None,
                 from_logits: bool = True, dice_smoothing: float = 1.0) -> LossValue:
    """Training-loop dispatch over all loss kinds, including bce_dice on logits."""
    if kind in ("mse", "cross_entropy", "bce"):
        return mean_loss(kind, output, target, tape=tape, from_logits=from_logits)
    if kind == "bce_dice":
        z = as_array(output)
        g = as_array(target)
        _check_same_shape(z, g, kind)
        if from_logits:
            p = _sigmoid(z)
            bce_value, bce_grad = _bce_logits(z, g)
            dice_value, dice_grad_p = _dice_soft(p, g, dice_smoothing)
            grad = bce_grad + dice_grad_p * p * (1.0 - p)
        else:
            p = z
            bce_value, bce_grad = _bce_probs(p, g)
            dice_value, dice_grad_p = _dice_soft(p, g, dice_smoothing)
            grad = bce_grad + dice_grad_p
        value = bce_value + dice_value
        if tape is not None:
            tape.attach_loss(value, lambda seed, gr=grad: seed * gr)
        return LossValue(value=value, n_samples=z.shape[0])
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _binarize(pair: MaskPair, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    a = pair.ground_truth.data > 0.5
    b = pair.prediction.data > threshold
    return a, b


def _set_ratio(a: np.ndarray, b: np.ndarray, kind: str) -> float:
    inter = float(np.logical_and(a, b).sum())
    if kind == "dice":
        total = float(a.sum() + b.sum())
        return 1.0 if total == 0.0 else 2.0 * inter / total
    union = float(np.logical_or(a, b).sum())
    return 1.0 if union == 0.0 else inter / union


def _mask_metric(pair: MaskPair, threshold: float, kind: str, per_image: bool) -> float:
    a, b = _binarize(pair, threshold)
    if not per_image:
        return _set_ratio(a, b, kind)
    values = [_set_ratio(a[i], b[i], kind) for i in range(a.shape[0])]
    return float(np.mean(values))


def dice_coefficient(pair: MaskPair, threshold: float = 0.5,
                     per_image: bool = False) -> float:
    """2|A.B| / (|A|+|B|) on thresholded masks; 1.0 when both masks are empty.

    ``per_image`` averages per-sample coefficients over the leading axis
    (macro averaging) instead of pooling all elements (micro averaging).
    """
    return _mask_metric(pair, threshold, "dice", per_image)


def iou(pair: MaskPair, threshold: float = 0.5, per_image: bool = False) -> float:
    """|A.B| / |A+B| on thresholded masks; 1.0 when both masks are empty."""
    return _mask_metric(pair, threshold, "iou", per_image)


def accuracy(output, target) -> float:
    """Fraction of argmax predictions matching target class indices.

    Ties break toward the lowest class index.
    """
    output = as_array(output)
    classes = np.asarray(target)
    if output.ndim != 2 or output.shape[1] < classes.max(initial=0) + 1:
        raise ValueError(f"output shape {output.shape} cannot score classes up to {classes.max(initial=0)}")
    return float(np.mean(np.argmax(output, axis=1) == classes))
