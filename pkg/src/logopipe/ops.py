"""Dense-tensor neural network primitives.

All tensors are C-contiguous float64 numpy arrays. Images and activations
use HWC layout (or NHWC when batched); convolution weights are
(k, k, c_in, c_out) and fully-connected weights are (n_in, n_out).

Every op here is a pure function of its inputs. Backward passes return
exact analytic gradients of the matching forward call; they are validated
against central finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

# log-loss clamp: keeps -log(p) finite for confidently-wrong predictions
PROB_FLOOR = 1e-12


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Promote a single HWC sample to NHWC. Returns (batched, was_single)."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected 3-d or 4-d input, got shape {x.shape}")


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Extract k x k patches from padded NHWC input as a 2-d matrix.

    Returns (N*H_out*W_out, k*k*C) with patch elements in (ky, kx, c) order,
    matching the (k, k, c_in, c_out) weight layout.
    """
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # win: (N, H_out_full, W_out_full, C, k, k) -> subsample by stride
    win = win[:, ::stride, ::stride]
    n, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, -1)
    return np.ascontiguousarray(cols), (n, ho, wo)


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                   stride: int = 1, padding: int = 0,
                   return_cols: bool = False):
    """Cross-correlation (no kernel flip) plus per-output-channel bias.

    x: (H, W, C_in) or (N, H, W, C_in); weights: (k, k, C_in, C_out).
    Output spatial extent is (H + 2*padding - k) / stride + 1, which must
    be integral. With return_cols the (output, column matrix) pair comes
    back; feeding the columns to conv2d_backward skips recomputing them.
    """
    xb, single = _as_batch(x)
    k, k2, cin, cout = weights.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if xb.shape[3] != cin:
        raise ValueError(
            f"input has {xb.shape[3]} channels, weights expect {cin}")
    h, w = xb.shape[1], xb.shape[2]
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride:
        raise ValueError("input extent, kernel, stride and padding mismatch")
    if padding:
        xb = np.pad(xb, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols, (n, ho, wo) = _im2col(xb, k, stride)
    y = cols @ weights.reshape(-1, cout) + bias
    y = y.reshape(n, ho, wo, cout)
    y = y[0] if single else y
    return (y, cols) if return_cols else y


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray,
                    stride: int = 1, padding: int = 0,
                    need_input_grad: bool = True, cols: np.ndarray = None):
    """Gradients of conv2d_forward w.r.t. input, weights and bias.

    x must be the cached forward input. Pass the column matrix from
    conv2d_forward(..., return_cols=True) to avoid rebuilding it. Set
    need_input_grad=False for the first layer to skip the col2im scatter.
    """
    if x is None or weights is None:
        raise ValueError("conv2d_backward requires the cached forward input and weights")
    gb, single = _as_batch(grad_out)
    xb, _ = _as_batch(x)
    k = weights.shape[0]
    cin, cout = weights.shape[2], weights.shape[3]
    n, ho, wo = gb.shape[:3]
    if cols is None:
        if padding:
            xp = np.pad(xb, ((0, 0), (padding, padding),
                             (padding, padding), (0, 0)))
        else:
            xp = xb
        cols, _ = _im2col(xp, k, stride)
    gmat = gb.reshape(n * ho * wo, cout)

    grad_w = (cols.T @ gmat).reshape(weights.shape)
    grad_b = gmat.sum(axis=0)

    grad_x = None
    if need_input_grad:
        gcols = gmat @ weights.reshape(-1, cout).T   # (N*ho*wo, k*k*cin)
        gcols = gcols.reshape(n, ho, wo, k, k, cin)
        hp = xb.shape[1] + 2 * padding
        wp = xb.shape[2] + 2 * padding
        gxp = np.zeros((n, hp, wp, cin))
        for ky in range(k):
            ys = slice(ky, ky + stride * ho, stride)
            for kx in range(k):
                xs = slice(kx, kx + stride * wo, stride)
                gxp[:, ys, xs, :] += gcols[:, :, :, ky, kx, :]
        if padding:
            gxp = gxp[:, padding:-padding, padding:-padding, :]
        grad_x = gxp[0] if single else gxp
    return grad_x, grad_w, grad_b


def _pool_quadrants(xb: np.ndarray):
    """The four strided views of each 2x2 window, in row-major order."""
    return (xb[:, 0::2, 0::2, :], xb[:, 0::2, 1::2, :],
            xb[:, 1::2, 0::2, :], xb[:, 1::2, 1::2, :])


def pool_forward(x: np.ndarray, kind: str, window: int = 2, stride: int = 2):
    """2x2 stride-2 max or average pooling; spatial extents halve exactly.

    Returns (output, cache); pass the cache to pool_backward. Max-pool
    gradient routing resolves ties to the first element in row-major
    window order.
    """
    if window != 2 or stride != 2:
        raise ValueError("pooling is fixed at 2x2 windows with stride 2")
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    xb, single = _as_batch(x)
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ValueError(f"pooling requires even spatial extents, got {h}x{w}")
    q = _pool_quadrants(xb)
    if kind == "max":
        y = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    else:
        y = (q[0] + q[1] + q[2] + q[3]) * 0.25
    cache = (kind, xb, y, single)
    return (y[0] if single else y), cache


def pool_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    """Route (max) or spread (avg) the upstream gradient into the input."""
    kind, xb, y, single = cache
    gb, _ = _as_batch(grad_out)
    gx = np.zeros_like(xb)
    gq = _pool_quadrants(gx)
    if kind == "max":
        # first matching quadrant in row-major window order takes the grad
        taken = np.zeros(y.shape, dtype=bool)
        for xq, gslot in zip(_pool_quadrants(xb), gq):
            hit = (xq == y) & ~taken
            gslot[...] = gb * hit
            taken |= hit
    else:
        quarter = gb * 0.25
        for gslot in gq:
            gslot[...] = quarter
    return gx[0] if single else gx


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pass the gradient where x > 0; the derivative at exactly 0 is 0."""
    return grad_out * (x > 0.0)


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map y = x @ W + b with W of shape (n_in, n_out)."""
    if x.shape[-1] != weights.shape[0]:
        raise ValueError(
            f"input length {x.shape[-1]} does not match weights {weights.shape}")
    return x @ weights + bias


def fc_backward(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray):
    """Gradients of fc_forward w.r.t. input, weights and bias."""
    if x.ndim == 1:
        grad_w = np.outer(x, grad_out)
        grad_b = grad_out.copy()
        grad_x = grad_out @ weights.T
    else:
        grad_w = x.T @ grad_out
        grad_b = grad_out.sum(axis=0)
        grad_x = grad_out @ weights.T
    return grad_x, grad_w, grad_b


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, stabilized by max subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(probs: np.ndarray, target_class: int, weight: float):
    """Weighted log loss for one sample and its gradient w.r.t. the logits.

    loss = -weight * log(p[target]); the gradient uses the softmax/CE
    shortcut weight * (p - onehot(target)). The target probability is
    clamped below at 1e-12 before the log.
    """
    c = probs.shape[-1]
    if not 0 <= target_class < c:
        raise ValueError(f"target class {target_class} out of range [0, {c})")
    if weight < 0:
        raise ValueError("sample weight must be nonnegative")
    p = max(float(probs[target_class]), PROB_FLOOR)
    loss = -weight * np.log(p)
    grad = weight * probs.copy()
    grad[target_class] -= weight
    return loss, grad


def weighted_cross_entropy_batch(probs: np.ndarray, targets: np.ndarray,
                                 weights: np.ndarray):
    """Mean weighted log loss over a batch and its gradient w.r.t. logits.

    probs: (N, C); targets: (N,) int; weights: (N,). The gradient is that
    of the batch mean, i.e. per-sample grads divided by N.
    """
    n = probs.shape[0]
    p = np.maximum(probs[np.arange(n), targets], PROB_FLOOR)
    loss = float(-(weights * np.log(p)).sum() / n)
    grad = probs * weights[:, None]
    grad[np.arange(n), targets] -= weights
    return loss, grad / n


@dataclass
class Param:
    """One learnable array with its gradient and momentum buffers."""
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    momentum: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum is None:
            self.momentum = np.zeros_like(self.value)


@dataclass
class LayerParams:
    """Weight/bias pair for one parameterized layer."""
    weight: Param
    bias: Param

    def params(self):
        return (self.weight, self.bias)


ParamBundle = list  # list[LayerParams]


def sgd_step(params, lr: float, momentum: float) -> None:
    """Classic momentum SGD, in place: v <- m*v - lr*g ; w <- w + v.

    No weight decay. The caller must serialize concurrent updates to the
    same bundle.
    """
    for layer in params:
        for p in layer.params():
            p.momentum *= momentum
            p.momentum -= lr * p.grad
            p.value += p.momentum
