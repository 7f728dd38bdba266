"""Compiled inner loops for the convolution and warping hot paths.

Everything here is plain numerical code over contiguous arrays, jitted
with numba for single-core speed. Loop order is fixed and fastmath stays
off, so results are bit-reproducible across runs on the same machine.
Kernels are dtype-generic: float32 in production, float64 when the same
graph is replayed for finite-difference gradient checks.

Array layout is batch x channels x height x width throughout. Depthwise
kernels take inputs already zero-padded by one pixel on each spatial
edge, which keeps the loops branchless.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _dw_pixel(x, b, c, y, xx, H, W, w):
    """One guarded depthwise tap sum at a border pixel (zero padding)."""
    s = x.dtype.type(0)
    for i in range(3):
        yy = y + i - 1
        if 0 <= yy < H:
            for j in range(3):
                xj = xx + j - 1
                if 0 <= xj < W:
                    s += w[c, i, j] * x[b, c, yy, xj]
    return s


@njit(cache=True)
def dw3x3(x, w, bias):
    """Depthwise 3x3 correlation, stride 1, zero padding 1.

    x: [B, C, H, W]; w: [C, 3, 3]; bias: [C]. Interior pixels run a
    branchless 9-tap sum; the one-pixel border uses guarded taps, which
    is what zero padding reduces to.
    """
    B, C, H, W = x.shape
    out = np.empty((B, C, H, W), x.dtype)
    for b in range(B):
        for c in range(C):
            w00 = w[c, 0, 0]; w01 = w[c, 0, 1]; w02 = w[c, 0, 2]
            w10 = w[c, 1, 0]; w11 = w[c, 1, 1]; w12 = w[c, 1, 2]
            w20 = w[c, 2, 0]; w21 = w[c, 2, 1]; w22 = w[c, 2, 2]
            bc = bias[c]
            for xx in range(W):
                out[b, c, 0, xx] = bc + _dw_pixel(x, b, c, 0, xx, H, W, w)
                out[b, c, H - 1, xx] = bc + _dw_pixel(x, b, c, H - 1, xx, H, W, w)
            for y in range(1, H - 1):
                out[b, c, y, 0] = bc + _dw_pixel(x, b, c, y, 0, H, W, w)
                out[b, c, y, W - 1] = bc + _dw_pixel(x, b, c, y, W - 1, H, W, w)
                for xx in range(1, W - 1):
                    out[b, c, y, xx] = (bc
                        + w00 * x[b, c, y - 1, xx - 1] + w01 * x[b, c, y - 1, xx] + w02 * x[b, c, y - 1, xx + 1]
                        + w10 * x[b, c, y, xx - 1] + w11 * x[b, c, y, xx] + w12 * x[b, c, y, xx + 1]
                        + w20 * x[b, c, y + 1, xx - 1] + w21 * x[b, c, y + 1, xx] + w22 * x[b, c, y + 1, xx + 1])
    return out


@njit(cache=True)
def dw3x3_input_grad(g, w):
    """Input gradient of dw3x3: correlate ``g`` with the flipped kernel.

    Flipping is folded into the indexing, so no weight copy is made.
    """
    B, C, H, W = g.shape
    wf = np.empty_like(w)
    for c in range(w.shape[0]):
        for i in range(3):
            for j in range(3):
                wf[c, i, j] = w[c, 2 - i, 2 - j]
    zero = np.zeros(w.shape[0], g.dtype)
    return dw3x3(g, wf, zero)


@njit(cache=True, inline="always")
def _pg_guarded(x, g, gw, b, c, y, xx, H, W):
    gv = g[b, c, y, xx]
    for i in range(3):
        yy = y + i - 1
        if 0 <= yy < H:
            for j in range(3):
                xj = xx + j - 1
                if 0 <= xj < W:
                    gw[c, i, j] += gv * x[b, c, yy, xj]


@njit(cache=True)
def dw3x3_param_grads(x, g):
    """Weight and bias gradients of the depthwise 3x3 correlation.

    x: [B, C, H, W] forward input; g: [B, C, H, W] output gradient.
    Returns ([C, 3, 3], [C]). Interior pixels feed ten independent
    row chains in the input dtype (keeping the loop superscalar); border
    pixels use guarded float64 adds, and rows fold into float64 totals.
    """
    B, C, H, W = x.shape
    zero = x.dtype.type(0)
    gw = np.zeros((C, 3, 3), np.float64)
    gb = np.zeros(C, np.float64)
    for b in range(B):
        for c in range(C):
            for y in range(H):
                ab = zero
                for xx in range(W):
                    ab += g[b, c, y, xx]
                gb[c] += ab
                if y == 0 or y == H - 1:
                    for xx in range(W):
                        _pg_guarded(x, g, gw, b, c, y, xx, H, W)
                    continue
                _pg_guarded(x, g, gw, b, c, y, 0, H, W)
                _pg_guarded(x, g, gw, b, c, y, W - 1, H, W)
                a00 = zero; a01 = zero; a02 = zero
                a10 = zero; a11 = zero; a12 = zero
                a20 = zero; a21 = zero; a22 = zero
                for xx in range(1, W - 1):
                    gv = g[b, c, y, xx]
                    a00 += gv * x[b, c, y - 1, xx - 1]
                    a01 += gv * x[b, c, y - 1, xx]
                    a02 += gv * x[b, c, y - 1, xx + 1]
                    a10 += gv * x[b, c, y, xx - 1]
                    a11 += gv * x[b, c, y, xx]
                    a12 += gv * x[b, c, y, xx + 1]
                    a20 += gv * x[b, c, y + 1, xx - 1]
                    a21 += gv * x[b, c, y + 1, xx]
                    a22 += gv * x[b, c, y + 1, xx + 1]
                gw[c, 0, 0] += a00; gw[c, 0, 1] += a01; gw[c, 0, 2] += a02
                gw[c, 1, 0] += a10; gw[c, 1, 1] += a11; gw[c, 1, 2] += a12
                gw[c, 2, 0] += a20; gw[c, 2, 1] += a21; gw[c, 2, 2] += a22
    return gw.astype(x.dtype), gb.astype(x.dtype)


@njit(cache=True)
def channel_stats(x):
    """Per-channel mean and biased variance over batch and space.

    x: [B, C, H, W]. Returns ([C], [C]) in x's dtype. One pass with
    float64 sum and sum-of-squares; float64 headroom keeps the
    E[x^2] - m^2 form stable for the activation scales seen here.
    """
    B, C, H, W = x.shape
    n = B * H * W
    s1 = np.zeros(C, np.float64)
    s2 = np.zeros(C, np.float64)
    flat = x.reshape(B, C, H * W)
    m = (H * W) & ~3
    for b in range(B):
        for c in range(C):
            # Four interleaved chains hide the add latency; the order is
            # fixed, so results stay reproducible.
            p0 = 0.0; p1 = 0.0; p2 = 0.0; p3 = 0.0
            q0 = 0.0; q1 = 0.0; q2 = 0.0; q3 = 0.0
            for i in range(0, m, 4):
                v0 = flat[b, c, i]
                v1 = flat[b, c, i + 1]
                v2 = flat[b, c, i + 2]
                v3 = flat[b, c, i + 3]
                p0 += v0; q0 += v0 * v0
                p1 += v1; q1 += v1 * v1
                p2 += v2; q2 += v2 * v2
                p3 += v3; q3 += v3 * v3
            for i in range(m, H * W):
                v = flat[b, c, i]
                p0 += v
                q0 += v * v
            s1[c] += (p0 + p1) + (p2 + p3)
            s2[c] += (q0 + q1) + (q2 + q3)
    mean = s1 / n
    var = s2 / n - mean * mean
    return mean.astype(x.dtype), np.maximum(var, 0.0).astype(x.dtype)


@njit(cache=True)
def scale_shift(x, a, b):
    """out[b,c,y,x] = x[b,c,y,x] * a[c] + b[c]."""
    B, C, H, W = x.shape
    out = np.empty((B, C, H, W), x.dtype)
    for bb in range(B):
        for c in range(C):
            ac = a[c]
            bc = b[c]
            for y in range(H):
                for xx in range(W):
                    out[bb, c, y, xx] = x[bb, c, y, xx] * ac + bc
    return out


@njit(cache=True)
def per_channel_dot_sum(x, g):
    """Returns (sum_c of g*x, sum_c of g) per channel, float64 inside.

    Shared by the scale-and-shift backward, where the scale gradient is
    the per-channel dot product and the shift gradient is the plain sum.
    """
    B, C, H, W = x.shape
    zero = x.dtype.type(0)
    ga = np.zeros(C, np.float64)
    gb = np.zeros(C, np.float64)
    xf = x.reshape(B, C, H * W)
    gf = g.reshape(B, C, H * W)
    m = (H * W) & ~1
    for b in range(B):
        for c in range(C):
            a0 = zero; a1 = zero
            s0 = zero; s1 = zero
            for i in range(0, m, 2):
                g0 = gf[b, c, i]
                g1 = gf[b, c, i + 1]
                a0 += g0 * xf[b, c, i]
                a1 += g1 * xf[b, c, i + 1]
                s0 += g0
                s1 += g1
            if m < H * W:
                g0 = gf[b, c, m]
                a0 += g0 * xf[b, c, m]
                s0 += g0
            ga[c] += a0 + a1
            gb[c] += s0 + s1
    return ga.astype(x.dtype), gb.astype(x.dtype)


@njit(cache=True)
def warp_bilinear(img, flow):
    """Backward-warp ``img`` by per-pixel sampling offsets.

    img: [B, C, H, W]; flow: [B, 2, H, W] with channel 0 the horizontal
    offset and channel 1 the vertical offset, both in pixels. Output
    pixel (y, x) samples img at (y + flow[1], x + flow[0]) with bilinear
    interpolation; sample positions are clamped to the image rectangle,
    so edge pixels extend outward. Zero flow reproduces ``img`` exactly:
    the interpolation weights collapse to 0 and 1 with no rounding.
    """
    B, C, H, W = img.shape
    out = np.empty((B, C, H, W), img.dtype)
    for b in range(B):
        for y in range(H):
            for x in range(W):
                sx = x + flow[b, 0, y, x]
                sy = y + flow[b, 1, y, x]
                cx = min(max(sx, 0.0), W - 1.0)
                cy = min(max(sy, 0.0), H - 1.0)
                x0 = int(np.floor(cx))
                y0 = int(np.floor(cy))
                x1 = min(x0 + 1, W - 1)
                y1 = min(y0 + 1, H - 1)
                wx = cx - x0
                wy = cy - y0
                for c in range(C):
                    v00 = img[b, c, y0, x0]
                    v01 = img[b, c, y0, x1]
                    v10 = img[b, c, y1, x0]
                    v11 = img[b, c, y1, x1]
                    top = v00 + wx * (v01 - v00)
                    bot = v10 + wx * (v11 - v10)
                    out[b, c, y, x] = top + wy * (bot - top)
    return out


@njit(cache=True)
def warp_bilinear_grads(img, flow, g):
    """Gradients of ``warp_bilinear`` with respect to image and flow.

    Returns (gimg [B,C,H,W], gflow [B,2,H,W]). Image gradients scatter
    into the four sampled corners; flow gradients are the interpolation
    derivative along each axis, zeroed where the unclamped sample
    position left the image rectangle (the clamp makes output constant
    there).
    """
    B, C, H, W = img.shape
    gimg = np.zeros((B, C, H, W), img.dtype)
    gflow = np.zeros((B, 2, H, W), img.dtype)
    for b in range(B):
        for y in range(H):
            for x in range(W):
                sx = x + flow[b, 0, y, x]
                sy = y + flow[b, 1, y, x]
                cx = min(max(sx, 0.0), W - 1.0)
                cy = min(max(sy, 0.0), H - 1.0)
                x0 = int(np.floor(cx))
                y0 = int(np.floor(cy))
                x1 = min(x0 + 1, W - 1)
                y1 = min(y0 + 1, H - 1)
                wx = cx - x0
                wy = cy - y0
                in_x = (sx > 0.0) and (sx < W - 1.0)
                in_y = (sy > 0.0) and (sy < H - 1.0)
                gx = 0.0
                gy = 0.0
                for c in range(C):
                    gv = g[b, c, y, x]
                    gimg[b, c, y0, x0] += gv * (1.0 - wx) * (1.0 - wy)
                    gimg[b, c, y0, x1] += gv * wx * (1.0 - wy)
                    gimg[b, c, y1, x0] += gv * (1.0 - wx) * wy
                    gimg[b, c, y1, x1] += gv * wx * wy
                    v00 = img[b, c, y0, x0]
                    v01 = img[b, c, y0, x1]
                    v10 = img[b, c, y1, x0]
                    v11 = img[b, c, y1, x1]
                    gx += gv * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10))
                    gy += gv * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01))
                if in_x:
                    gflow[b, 0, y, x] = gx
                if in_y:
                    gflow[b, 1, y, x] = gy
    return gimg, gflow


@njit(cache=True)
def pool2_fwd(x):
    """2x2 mean pooling with stride 2; dims must be even."""
    B, C, H, W = x.shape
    q = x.dtype.type(0.25)
    out = np.empty((B, C, H // 2, W // 2), x.dtype)
    for b in range(B):
        for c in range(C):
            for y in range(H // 2):
                for xx in range(W // 2):
                    out[b, c, y, xx] = (x[b, c, 2 * y, 2 * xx]
                                        + x[b, c, 2 * y, 2 * xx + 1]
                                        + x[b, c, 2 * y + 1, 2 * xx]
                                        + x[b, c, 2 * y + 1, 2 * xx + 1]) * q
    return out


@njit(cache=True)
def pool2_bwd(g):
    """Spread each pooled gradient evenly over its 2x2 source window."""
    B, C, H2, W2 = g.shape
    q = g.dtype.type(0.25)
    out = np.empty((B, C, 2 * H2, 2 * W2), g.dtype)
    for b in range(B):
        for c in range(C):
            for y in range(H2):
                for xx in range(W2):
                    v = g[b, c, y, xx] * q
                    out[b, c, 2 * y, 2 * xx] = v
                    out[b, c, 2 * y, 2 * xx + 1] = v
                    out[b, c, 2 * y + 1, 2 * xx] = v
                    out[b, c, 2 * y + 1, 2 * xx + 1] = v
    return out


@njit(cache=True)
def scale_shift_pair(x, a1, b1, a2, b2):
    """Two stacked per-channel affine maps in one pass.

    Returns (y1, y2) with y1 = x*a1[c] + b1[c] and y2 = y1*a2[c] + b2[c];
    the normalization forward needs both the normalized activations and
    the scaled output.
    """
    B, C, H, W = x.shape
    y1 = np.empty((B, C, H, W), x.dtype)
    y2 = np.empty((B, C, H, W), x.dtype)
    for b in range(B):
        for c in range(C):
            a1c = a1[c]; b1c = b1[c]; a2c = a2[c]; b2c = b2[c]
            for y in range(H):
                for xx in range(W):
                    v = x[b, c, y, xx] * a1c + b1c
                    y1[b, c, y, xx] = v
                    y2[b, c, y, xx] = v * a2c + b2c
    return y1, y2


@njit(cache=True)
def relu_fwd(x):
    zero = x.dtype.type(0)
    out = np.empty_like(x)
    xf = x.reshape(-1)
    of = out.reshape(-1)
    for i in range(xf.size):
        v = xf[i]
        of[i] = v if v > zero else zero
    return out


@njit(cache=True)
def relu_bwd(g, x):
    """Gradient mask fused with the product: g where x > 0, else 0."""
    zero = x.dtype.type(0)
    out = np.empty_like(g)
    gf = g.reshape(-1)
    xf = x.reshape(-1)
    of = out.reshape(-1)
    for i in range(gf.size):
        of[i] = gf[i] if xf[i] > zero else zero
    return out


@njit(cache=True)
def normalize_input_grad(g, xhat, coef, mean_g, mean_gx):
    """Input gradient of batch normalization, fused into one pass.

    out = (g - mean_g[c] - xhat * mean_gx[c]) * coef[c], where the means
    are over batch and space and coef folds gamma with the inverse
    standard deviation.
    """
    B, C, H, W = g.shape
    out = np.empty((B, C, H, W), g.dtype)
    for b in range(B):
        for c in range(C):
            mg = mean_g[c]
            mgx = mean_gx[c]
            cc = coef[c]
            for y in range(H):
                for x in range(W):
                    out[b, c, y, x] = (g[b, c, y, x] - mg - xhat[b, c, y, x] * mgx) * cc
    return out


@njit(cache=True)
def im2col3x3(x):
    """Patch matrix [C*9, B*H*W] of a 3x3 stride-1 pad-1 correlation.

    Row c*9 + i*3 + j holds channel c shifted by tap (i, j); columns run
    over (b, y, x). Built with contiguous row copies so a dense 3x3
    convolution becomes one matrix product against [O, C*9] weights.
    """
    B, C, H, W = x.shape
    cols = np.empty((C * 9, B * H * W), x.dtype)
    zero = x.dtype.type(0)
    for c in range(C):
        for i in range(3):
            for j in range(3):
                r = c * 9 + i * 3 + j
                for b in range(B):
                    for y in range(H):
                        yy = y + i - 1
                        base = (b * H + y) * W
                        if yy < 0 or yy >= H:
                            cols[r, base:base + W] = zero
                        elif j == 0:
                            cols[r, base] = zero
                            cols[r, base + 1:base + W] = x[b, c, yy, :W - 1]
                        elif j == 1:
                            cols[r, base:base + W] = x[b, c, yy, :]
                        else:
                            cols[r, base:base + W - 1] = x[b, c, yy, 1:]
                            cols[r, base + W - 1] = zero
    return cols


def warmup() -> None:
    """Trigger compilation of every kernel on tiny inputs."""
    for dt in (np.float32, np.float64):
        x = np.ones((1, 2, 4, 6), dt)
        w = np.ones((2, 3, 3), dt)
        b = np.zeros(2, dt)
        g = np.ones((1, 2, 4, 6), dt)
        dw3x3(x, w, b)
        dw3x3_input_grad(g, w)
        dw3x3_param_grads(x, g)
        im2col3x3(x)
        relu_fwd(x)
        relu_bwd(g, x)
        channel_stats(x)
        scale_shift(x, b, b)
        scale_shift_pair(x, b, b, b, b)
        per_channel_dot_sum(x, g)
        pool2_fwd(x)
        pool2_bwd(g)
        flow = np.zeros((1, 2, 4, 6), dt)
        img = np.ones((1, 3, 4, 6), dt)
        warp_bilinear(img, flow)
        warp_bilinear_grads(img, flow, np.ones_like(img))
        normalize_input_grad(g, x, b, b, b)
