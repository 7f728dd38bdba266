"""Differentiable tensor operations recorded on the ambient tape.

Each function takes Tensors, computes the forward result with numpy or a
compiled kernel, and, when a tape is active and some input requires a
gradient, records a closure that routes the output gradient back to the
inputs. With no active tape nothing is recorded, so the same functions
double as the inference path.

Convolution weight layouts:
  conv2d        [out_ch, in_ch, k, k]
  pointwise     [out_ch, in_ch]
  depthwise3x3  [channels, 3, 3]
  up_conv2x2    [in_ch, out_ch, 2, 2]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import kernels
from .autodiff import Tensor, accumulate, active_tape, result_tensor

BN_EPS = 1e-5
BN_RETAIN = 0.9


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _maybe_record(name, out, fn):
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(name, fn)


# ---------------------------------------------------------------- arithmetic


def _routed(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Unbroadcast ``g`` to ``shape``, copying when that is a no-op.

    Gradients handed to ``accumulate`` must be owned by the caller; the
    upstream buffer itself may still be read by other consumers.
    """
    r = _unbroadcast(g, shape)
    return r.copy() if r is g else r


def add(a: Tensor, b: Tensor) -> Tensor:
    out = result_tensor(a.data + b.data, a, b)

    def backward():
        g = out.grad
        if g is None:
            return
        accumulate(a, _routed(g, a.data.shape))
        # The output gradient is dead once this closure finishes (every
        # consumer already ran), so the second branch may take ownership.
        accumulate(b, _unbroadcast(g, b.data.shape))
        out.grad = None

    _maybe_record("add", out, backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = result_tensor(a.data - b.data, a, b)

    def backward():
        g = out.grad
        if g is None:
            return
        accumulate(b, _unbroadcast(-g, b.data.shape))
        accumulate(a, _unbroadcast(g, a.data.shape))
        out.grad = None

    _maybe_record("sub", out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = result_tensor(a.data * b.data, a, b)

    def backward():
        if out.grad is None:
            return
        accumulate(a, _unbroadcast(out.grad * b.data, a.data.shape))
        accumulate(b, _unbroadcast(out.grad * a.data, b.data.shape))

    _maybe_record("mul", out, backward)
    return out


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """Elementwise ``x * scale + shift`` with python-scalar coefficients."""
    out = result_tensor(x.data * x.dtype.type(scale) + x.dtype.type(shift), x)

    def backward():
        if out.grad is None:
            return
        accumulate(x, out.grad * x.dtype.type(scale))

    _maybe_record("affine", out, backward)
    return out


def mean_all(x: Tensor) -> Tensor:
    out = result_tensor(np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype), x)
    n = x.data.size

    def backward():
        if out.grad is None:
            return
        accumulate(x, np.full_like(x.data, out.grad / n))

    _maybe_record("mean_all", out, backward)
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements, as a scalar tensor."""
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"mse needs matching shapes, got {a.data.shape} vs {b.data.shape}"
        )
    d = sub(a, b)
    return mean_all(mul(d, d))


# --------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    out = result_tensor(kernels.relu_fwd(x.data), x)

    def backward():
        if out.grad is None:
            return
        accumulate(x, kernels.relu_bwd(out.grad, x.data))

    _maybe_record("relu", out, backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    out = result_tensor(y, x)

    def backward():
        if out.grad is None:
            return
        accumulate(x, out.grad * (y * (1 - y)))

    _maybe_record("sigmoid", out, backward)
    return out


def clip01(x: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient flows only where the clamp is inactive."""
    out = result_tensor(np.clip(x.data, 0.0, 1.0), x)

    def backward():
        if out.grad is None:
            return
        mask = (x.data >= 0.0) & (x.data <= 1.0)
        accumulate(x, out.grad * mask)

    _maybe_record("clip01", out, backward)
    return out


# -------------------------------------------------------------- convolutions


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-d correlation; weight [O, C, K, K], input [B, C, H, W]."""
    B, C, H, W = x.data.shape
    O, Cw, Kh, Kw = w.data.shape
    if Cw != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, weight expects {Cw}")
    if (Kh, Kw) == (3, 3) and stride == 1 and padding == 1:
        return _conv3x3_same(x, w, bias)
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    Ho = (xp.shape[2] - Kh) // stride + 1
    Wo = (xp.shape[3] - Kw) // stride + 1
    win = sliding_window_view(xp, (Kh, Kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, C * Kh * Kw
    )
    wmat = w.data.reshape(O, C * Kh * Kw)
    y = cols @ wmat.T
    y += bias.data
    out = result_tensor(
        np.ascontiguousarray(y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)), x, w, bias
    )

    def backward():
        if out.grad is None:
            return
        g2 = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        accumulate(w, (g2.T @ cols).reshape(O, C, Kh, Kw))
        accumulate(bias, g2.sum(axis=0))
        if not x.requires_grad:
            return
        if stride == 1:
            # Input gradient of a stride-1 correlation is itself a
            # correlation: the output gradient, padded by k-1-p, against
            # the kernel flipped in both axes with in/out roles swapped.
            pb = Kh - 1 - padding
            pg = np.pad(out.grad, ((0, 0), (0, 0), (pb, pb), (pb, pb)))
            gw_win = sliding_window_view(pg, (Kh, Kw), axis=(2, 3))
            gcols = np.ascontiguousarray(gw_win.transpose(0, 2, 3, 1, 4, 5)).reshape(
                B * H * W, O * Kh * Kw
            )
            wflip = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            ).reshape(C, O * Kh * Kw)
            gx = (gcols @ wflip.T).reshape(B, H, W, C)
            accumulate(x, np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))
        else:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, Kh, Kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(Kh):
                for j in range(Kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
            if padding:
                accumulate(x, np.ascontiguousarray(
                    gxp[:, :, padding:padding + H, padding:padding + W]))
            else:
                accumulate(x, gxp)

    _maybe_record("conv2d", out, backward)
    return out


def _conv3x3_same(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Shape-preserving 3x3 correlation as one matrix product over a
    compiled patch matrix; both gradient routes are products too."""
    B, C, H, W = x.data.shape
    O = w.data.shape[0]
    cols = kernels.im2col3x3(x.data)
    wmat = w.data.reshape(O, C * 9)
    y = wmat @ cols
    y += bias.data[:, None]
    out = result_tensor(
        np.ascontiguousarray(y.reshape(O, B, H, W).transpose(1, 0, 2, 3)), x, w, bias
    )

    def backward():
        if out.grad is None:
            return
        g2 = np.ascontiguousarray(out.grad.transpose(1, 0, 2, 3)).reshape(O, -1)
        accumulate(w, (g2 @ cols.T).reshape(O, C, 3, 3))
        accumulate(bias, g2.sum(axis=1))
        if x.requires_grad:
            colsg = kernels.im2col3x3(out.grad)
            wflip = np.ascontiguousarray(
                w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            ).reshape(C, O * 9)
            gx = (wflip @ colsg).reshape(C, B, H, W)
            accumulate(x, np.ascontiguousarray(gx.transpose(1, 0, 2, 3)))

    _maybe_record("conv2d", out, backward)
    return out


def pointwise(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution as a batched matrix product; weight [O, C]."""
    B, C, H, W = x.data.shape
    O = w.data.shape[0]
    if w.data.shape[1] != C:
        raise ValueError(
            f"pointwise channel mismatch: input has {C}, weight expects {w.data.shape[1]}"
        )
    xr = x.data.reshape(B, C, H * W)
    y = np.matmul(w.data, xr)
    y += bias.data[:, None]
    out = result_tensor(y.reshape(B, O, H, W), x, w, bias)

    def backward():
        if out.grad is None:
            return
        gr = out.grad.reshape(B, O, H * W)
        accumulate(w, np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0))
        accumulate(bias, out.grad.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            accumulate(x, np.matmul(w.data.T, gr).reshape(B, C, H, W))

    _maybe_record("pointwise", out, backward)
    return out


def depthwise3x3(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 3x3 correlation, stride 1, zero padding 1."""
    C = x.data.shape[1]
    if w.data.shape != (C, 3, 3):
        raise ValueError(
            f"depthwise3x3 weight must be [{C}, 3, 3], got {w.data.shape}"
        )
    out = result_tensor(kernels.dw3x3(x.data, w.data, bias.data), x, w, bias)

    def backward():
        if out.grad is None:
            return
        gw, gb = kernels.dw3x3_param_grads(x.data, out.grad)
        accumulate(w, gw)
        accumulate(bias, gb)
        if x.requires_grad:
            accumulate(x, kernels.dw3x3_input_grad(out.grad, w.data))

    _maybe_record("depthwise3x3", out, backward)
    return out


def up_conv2x2(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Transposed 2x2 convolution with stride 2; weight [C, O, 2, 2].

    Each input pixel paints one non-overlapping 2x2 output tile, doubling
    both spatial dimensions.
    """
    B, C, H, W = x.data.shape
    if w.data.shape[0] != C:
        raise ValueError(
            f"up_conv2x2 channel mismatch: input has {C}, weight expects {w.data.shape[0]}"
        )
    O = w.data.shape[1]
    t = np.tensordot(x.data, w.data, axes=(1, 0))  # [B, H, W, O, 2, 2]
    y = np.ascontiguousarray(t.transpose(0, 3, 1, 4, 2, 5)).reshape(B, O, 2 * H, 2 * W)
    y += bias.data[:, None, None]
    out = result_tensor(y, x, w, bias)

    def backward():
        if out.grad is None:
            return
        g6 = out.grad.reshape(B, O, H, 2, W, 2)
        accumulate(bias, out.grad.sum(axis=(0, 2, 3)))
        accumulate(w, np.tensordot(x.data, g6, axes=([0, 2, 3], [0, 2, 4])))
        if x.requires_grad:
            gperm = np.ascontiguousarray(g6.transpose(0, 2, 4, 1, 3, 5))
            gx = np.tensordot(gperm, w.data, axes=([3, 4, 5], [1, 2, 3]))
            accumulate(x, np.ascontiguousarray(gx.transpose(0, 3, 1, 2)))

    _maybe_record("up_conv2x2", out, backward)
    return out


# ------------------------------------------------------- pooling and layout


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {H}x{W}")
    out = result_tensor(kernels.pool2_fwd(x.data), x)

    def backward():
        if out.grad is None:
            return
        accumulate(x, kernels.pool2_bwd(out.grad))

    _maybe_record("avg_pool2", out, backward)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(
            f"concat_channels needs matching batch and spatial dims, "
            f"got {a.data.shape} vs {b.data.shape}"
        )
    ca = a.data.shape[1]
    out = result_tensor(np.concatenate([a.data, b.data], axis=1), a, b)

    def backward():
        if out.grad is None:
            return
        accumulate(a, np.ascontiguousarray(out.grad[:, :ca]))
        accumulate(b, np.ascontiguousarray(out.grad[:, ca:]))

    _maybe_record("concat_channels", out, backward)
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    out = result_tensor(np.ascontiguousarray(x.data[:, start:stop]), x)

    def backward():
        if out.grad is None:
            return
        g = np.zeros_like(x.data)
        g[:, start:stop] = out.grad
        accumulate(x, g)

    _maybe_record("slice_channels", out, backward)
    return out


# ------------------------------------------------------------- warping & BN


def grid_warp(img: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp ``img`` by a per-pixel flow field in pixel units.

    flow is [B, 2, H, W]: channel 0 horizontal, channel 1 vertical. The
    output at (y, x) samples the input at (y + flow1, x + flow0) with
    bilinear interpolation and clamp-to-edge handling. A zero flow field
    returns the input bit for bit.
    """
    if img.data.shape[0] != flow.data.shape[0] or img.data.shape[2:] != flow.data.shape[2:]:
        raise ValueError(
            f"grid_warp needs matching batch and spatial dims, "
            f"got image {img.data.shape} vs flow {flow.data.shape}"
        )
    if flow.data.shape[1] != 2:
        raise ValueError(f"flow must have 2 channels, got {flow.data.shape[1]}")
    out = result_tensor(kernels.warp_bilinear(img.data, flow.data), img, flow)

    def backward():
        if out.grad is None:
            return
        gimg, gflow = kernels.warp_bilinear_grads(img.data, flow.data, out.grad)
        accumulate(img, gimg)
        accumulate(flow, gflow)

    _maybe_record("grid_warp", out, backward)
    return out


@dataclass
class BNState:
    """Running statistics owned by one normalization layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels: int) -> "BNState":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BNState,
    training: bool,
    update_stats: bool = True,
) -> Tensor:
    """Channel-wise batch normalization with learned scale and shift.

    Training mode normalizes by the current batch's per-channel mean and
    biased variance and (optionally) folds them into the running state
    with retain factor 0.9. Inference mode normalizes by the running
    statistics; gradients still flow to gamma, beta, and the input, which
    is what fine-tuning with frozen statistics needs.
    """
    dt = x.dtype
    if training:
        mean, var = kernels.channel_stats(x.data)
        if update_stats:
            state.mean = (BN_RETAIN * state.mean + (1 - BN_RETAIN) * mean).astype(
                np.float32
            )
            state.var = (BN_RETAIN * state.var + (1 - BN_RETAIN) * var).astype(
                np.float32
            )
    else:
        mean = state.mean.astype(dt)
        var = state.var.astype(dt)
    inv = 1.0 / np.sqrt(var.astype(np.float64) + BN_EPS)
    inv = inv.astype(dt)
    recording = active_tape() is not None and (
        x.requires_grad or gamma.requires_grad or beta.requires_grad
    )
    if recording:
        xhat, y = kernels.scale_shift_pair(
            x.data, inv, (-mean * inv).astype(dt), gamma.data, beta.data
        )
    else:
        # Nothing to save for backward: fold both affines into one pass.
        a = (gamma.data * inv).astype(dt)
        xhat = None
        y = kernels.scale_shift(x.data, a, (beta.data - mean * a).astype(dt))
    out = result_tensor(y, x, gamma, beta)

    def backward():
        if out.grad is None:
            return
        g = out.grad
        ggamma, gbeta = kernels.per_channel_dot_sum(xhat, g)
        accumulate(gamma, ggamma)
        accumulate(beta, gbeta)
        if not x.requires_grad:
            return
        coef = (gamma.data * inv).astype(dt)
        if training:
            n = x.data.size // x.data.shape[1]
            accumulate(x, kernels.normalize_input_grad(
                g, xhat, coef, (gbeta / n).astype(dt), (ggamma / n).astype(dt)))
        else:
            zero = np.zeros_like(coef)
            accumulate(x, kernels.scale_shift(g, coef, zero))

    _maybe_record("batch_norm", out, backward)
    return out
