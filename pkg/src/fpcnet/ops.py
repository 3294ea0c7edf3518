"""Forward and backward kernels for every layer the network uses.

All kernels are pure functions on numpy arrays in N x C x H x W layout and
preserve the input dtype (float32 normally, float64 in gradient-check mode).
Each backward returns gradients of identical shape to the corresponding
forward inputs and matches central finite differences on small cases.

Convolutions are evaluated tap by tap: for each kernel offset (a, b) the
dilated input slice is contracted against the weight slice with one BLAS
call. Taps are visited in a fixed row-major order, so the reduction order is
deterministic and results are reproducible run to run on one machine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


def effective_kernel_size(k: int, r: int) -> int:
    """Kernel extent after inserting (r-1) zeros between taps."""
    return k + (k - 1) * (r - 1)


def same_padding(k: int, r: int) -> int:
    """Padding that keeps H, W unchanged for odd k and stride 1."""
    if k % 2 == 0:
        raise ShapeError(f"same-resolution padding requires odd kernel size, got k={k}")
    return r * (k - 1) // 2


@dataclass
class ConvParams:
    """Learnable convolution parameters plus geometry.

    weight: [outC, inC, k, k]; bias: [outC]; dilation r >= 1 (r=1 is a
    standard convolution); stride is 1 everywhere in this network but the
    kernels accept any positive value.
    """

    weight: np.ndarray
    bias: np.ndarray
    dilation: int = 1
    padding: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"weight must be [outC, inC, k, k], got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match outC={self.weight.shape[0]}"
            )
        if self.dilation < 1:
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_output_hw(h: int, w: int, k: int, r: int, p: int, s: int = 1) -> tuple[int, int]:
    eff = effective_kernel_size(k, r)
    if h + 2 * p < eff or w + 2 * p < eff:
        raise ShapeError(
            f"effective kernel {eff} exceeds padded input {h + 2 * p}x{w + 2 * p}"
        )
    return (h + 2 * p - eff) // s + 1, (w + 2 * p - eff) // s + 1


def conv2d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Dilated 2-D convolution: out = bias + sum over taps of w[a,b] * x[i + r*a, j + r*b]."""
    if x.ndim != 4:
        raise ShapeError(f"input must be [N, C, H, W], got {x.shape}")
    w, b, r, p, s = params.weight, params.bias, params.dilation, params.padding, params.stride
    n, cin, h, wid = x.shape
    cout, cin_w, k, _ = w.shape
    if cin != cin_w:
        raise ShapeError(f"input has {cin} channels but weight expects {cin_w}")
    ho, wo = conv2d_output_hw(h, wid, k, r, p, s)
    xp = _pad_hw(x, p)
    acc = np.zeros((cout, n, ho, wo), dtype=x.dtype)
    for a in range(k):
        for bb in range(k):
            xs = xp[:, :, a * r : a * r + (ho - 1) * s + 1 : s,
                    bb * r : bb * r + (wo - 1) * s + 1 : s]
            acc += np.tensordot(w[:, :, a, bb], xs, axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    out += b.reshape(1, cout, 1, 1)
    return out


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, params: ConvParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of conv2d: returns (grad_x, grad_weight, grad_bias)."""
    w, r, p, s = params.weight, params.dilation, params.padding, params.stride
    n, cin, h, wid = x.shape
    cout, _, k, _ = w.shape
    ho, wo = conv2d_output_hw(h, wid, k, r, p, s)
    if grad_out.shape != (n, cout, ho, wo):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output {(n, cout, ho, wo)}"
        )
    xp = _pad_hw(x, p)
    grad_xp = np.zeros_like(xp)
    grad_w = np.empty_like(w)
    for a in range(k):
        for bb in range(k):
            hs = slice(a * r, a * r + (ho - 1) * s + 1, s)
            ws = slice(bb * r, bb * r + (wo - 1) * s + 1, s)
            xs = xp[:, :, hs, ws]
            grad_w[:, :, a, bb] = np.tensordot(grad_out, xs, axes=([0, 2, 3], [0, 2, 3]))
            contrib = np.tensordot(w[:, :, a, bb], grad_out, axes=([0], [1]))
            grad_xp[:, :, hs, ws] += contrib.transpose(1, 0, 2, 3)
    grad_x = grad_xp[:, :, p : p + h, p : p + wid] if p else grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def transposed_conv2d(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None
) -> np.ndarray:
    """2x2 stride-2 transposed convolution: doubles H and W.

    weight is [C, outC, 2, 2]; the op is the exact adjoint of a 2x2 stride-2
    convolution with the same weight. The network uses outC = C/2.
    """
    n, c, h, w = x.shape
    if c % 2 != 0:
        raise ShapeError(f"channel count must be even, got {c}")
    if weight.shape[0] != c or weight.shape[2:] != (2, 2):
        raise ShapeError(f"weight must be [{c}, outC, 2, 2], got {weight.shape}")
    cout = weight.shape[1]
    y6 = np.einsum("ncij,cdab->ndiajb", x, weight, optimize=True)
    y = np.ascontiguousarray(y6).reshape(n, cout, 2 * h, 2 * w)
    if bias is not None:
        y += bias.reshape(1, cout, 1, 1)
    return y


def transposed_conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, has_bias: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    n, c, h, w = x.shape
    cout = weight.shape[1]
    if grad_out.shape != (n, cout, 2 * h, 2 * w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match output {(n, cout, 2 * h, 2 * w)}"
        )
    g6 = grad_out.reshape(n, cout, h, 2, w, 2)
    grad_x = np.einsum("ndiajb,cdab->ncij", g6, weight, optimize=True)
    grad_w = np.einsum("ncij,ndiajb->cdab", x, g6, optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_w), grad_b


def _pool_windows(x: np.ndarray) -> np.ndarray:
    """View of the four elements of each 2x2 window in row-major window order."""
    n, c, h, w = x.shape
    return (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling. Returns (pooled, argmax indices in 0..3).

    Ties break to the first element in row-major window order, so backward
    routing is deterministic.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"H and W must be even for 2x2 pooling, got {h}x{w}")
    win = _pool_windows(x)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2x2_backward(grad_out: np.ndarray, idx: np.ndarray, input_hw: tuple[int, int]) -> np.ndarray:
    n, c, ho, wo = grad_out.shape
    h, w = input_hw
    g = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    return np.ascontiguousarray(
        g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    )


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over H x W per channel -> [N, C, 1, 1]."""
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: np.ndarray, input_hw: tuple[int, int]) -> np.ndarray:
    h, w = input_hw
    return np.broadcast_to(grad_out / (h * w), grad_out.shape[:2] + (h, w)).copy()


def broadcast_hw(x: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upsample of a [N, C, 1, 1] map to [N, C, h, w]."""
    if x.shape[2:] != (1, 1):
        raise ShapeError(f"expected [N, C, 1, 1], got {x.shape}")
    return np.broadcast_to(x, x.shape[:2] + tuple(hw)).copy()


def broadcast_hw_backward(grad_out: np.ndarray) -> np.ndarray:
    return grad_out.sum(axis=(2, 3), keepdims=True)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic; output clamped strictly inside (0, 1)."""
    out = np.empty_like(x)
    pos = x >= 0
    np.divide(1.0, 1.0 + np.exp(-x, where=pos, out=np.zeros_like(x)), where=pos, out=out)
    ex = np.exp(x, where=~pos, out=np.zeros_like(x))
    np.divide(ex, 1.0 + ex, where=~pos, out=out)
    one = x.dtype.type(1)
    return np.clip(out, np.finfo(x.dtype).tiny, np.nextafter(one, x.dtype.type(0)))


def sigmoid_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad_out * out * (1 - out)


def fully_connected(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map [N, Cin] -> [N, Cout] with weight [Cout, Cin]."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight.T + bias


def fully_connected_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def concat_channels(tensors: list[np.ndarray]) -> np.ndarray:
    if not tensors:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ShapeError(f"spatial/batch mismatch: {t.shape} vs {ref.shape}")
    return np.concatenate(tensors, axis=1)


def concat_channels_backward(grad_out: np.ndarray, channel_counts: list[int]) -> list[np.ndarray]:
    splits = np.cumsum(channel_counts)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, splits, axis=1)]


LOSS_EPS = 1e-7


def _soft_counts(pred_clipped: np.ndarray, target: np.ndarray):
    tp = float((pred_clipped * target).sum())
    fp = float((pred_clipped * (1 - target)).sum())
    fn = float(((1 - pred_clipped) * target).sum())
    return tp, fp, fn


def bce_dice_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross entropy plus soft dice complement.

    loss = mean(-[t*ln p + (1-t)*ln(1-p)]) + 1 - 2*TP / (2*TP + FP + FN)
    with soft counts TP = sum(p*t), FP = sum(p*(1-t)), FN = sum((1-p)*t).
    pred is clipped to [eps, 1-eps] before the logs. Always >= 0.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    if pred.size == 0:
        raise ShapeError("empty tensors")
    p = np.clip(pred, LOSS_EPS, 1 - LOSS_EPS)
    bce = float(-(target * np.log(p) + (1 - target) * np.log1p(-p)).mean())
    tp, fp, fn = _soft_counts(p, target)
    dice = 1.0 - 2.0 * tp / (2.0 * tp + fp + fn)
    return bce + dice


def bce_dice_loss_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d(loss)/d(pred); zero where pred sits in the clipped region."""
    p = np.clip(pred, LOSS_EPS, 1 - LOSS_EPS)
    n_pix = pred.size
    d_bce = (-(target / p) + (1 - target) / (1 - p)) / n_pix
    tp, fp, fn = _soft_counts(p, target)
    q = 2.0 * tp + fp + fn
    # d/dp_i of (2*tp/q) with tp = sum(p*t), q = sum(p*t) + sum(p) + sum(t)
    d_dice = -(2.0 * target * q - 2.0 * tp * (target + 1.0)) / (q * q)
    grad = (d_bce + d_dice).astype(pred.dtype)
    inside = (pred > LOSS_EPS) & (pred < 1 - LOSS_EPS)
    return np.where(inside, grad, 0)
