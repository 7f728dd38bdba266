"""Install verification: a registry of fast end-to-end checks.

Covers the gradient correctness of every differentiable op and the full
network pass, the exactness guarantees (zero-flow warp, zero-strength
pass-through, mirror protocol), filter convergence, metric properties,
format round-trips, and the per-frame latency budget. Each check runs
in a few seconds at most; the CLI surfaces them as a pass/fail report.
"""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tape, Tensor, gradient_check
from .control import AlphaBetaFilter, FrameFilter, FrameSignals, flow_strength, scene_strength
from .eccw import load_weights, save_weights
from .imutil import read_ppm, write_ppm
from .metrics import mse, tolerant_mse
from .model import EccNet, apply_correction, correct_patch, flip_lr
from .ops import BNState


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def gradient_suite(tolerance: float = 1e-3, include_broken: bool = False) -> list:
    """Finite-difference reports for every differentiable operation.

    include_broken appends a deliberately wrong backward rule; a healthy
    checker must flag it, so its report is expected to fail.
    """
    rng = np.random.default_rng(7)
    reports = []

    def check(name, fn, inputs, coords=None, seed=0):
        reports.append(gradient_check(
            fn, inputs, tolerance=tolerance,
            max_coords_per_input=coords, seed=seed, name=name,
        ))

    def proj(t, seed=11):
        w = Tensor(np.random.default_rng(seed).normal(0.5, 1.0, t.data.shape))
        return ops.mean_all(ops.mul(t, w))

    check("add_broadcast", lambda t: proj(ops.add(t["a"], t["b"])),
          {"a": _t(rng, 2, 3, 4, 4), "b": _t(rng, 3, 1, 1)})
    check("sub", lambda t: proj(ops.sub(t["a"], t["b"])),
          {"a": _t(rng, 2, 5), "b": _t(rng, 2, 5)})
    check("mul", lambda t: proj(ops.mul(t["a"], t["b"])),
          {"a": _t(rng, 3, 4), "b": _t(rng, 3, 4)})
    check("affine", lambda t: proj(ops.affine(t["x"], 1.7, -0.3)),
          {"x": _t(rng, 4, 4)})
    check("mean_all", lambda t: ops.mean_all(t["x"]), {"x": _t(rng, 3, 5)})
    check("mse", lambda t: ops.mse(t["a"], t["b"]),
          {"a": _t(rng, 2, 6), "b": _t(rng, 2, 6)})
    check("relu", lambda t: proj(ops.relu(t["x"])),
          {"x": Tensor(rng.uniform(0.2, 1.5, (3, 8)) * rng.choice([-1, 1], (3, 8)))})
    check("sigmoid", lambda t: proj(ops.sigmoid(t["x"])), {"x": _t(rng, 3, 8)})
    check("clip01", lambda t: proj(ops.clip01(t["x"])),
          {"x": Tensor(rng.uniform(0.1, 0.9, (3, 8)))})
    check("conv2d_s2p1", lambda t: proj(ops.conv2d(t["x"], t["w"], t["b"], stride=2, padding=1)),
          {"x": _t(rng, 1, 3, 6, 6), "w": _t(rng, 4, 3, 3, 3), "b": _t(rng, 4)})
    check("conv2d_3x3_same", lambda t: proj(ops.conv2d(t["x"], t["w"], t["b"], stride=1, padding=1)),
          {"x": _t(rng, 2, 3, 5, 6), "w": _t(rng, 2, 3, 3, 3), "b": _t(rng, 2)})
    check("pointwise", lambda t: proj(ops.pointwise(t["x"], t["w"], t["b"])),
          {"x": _t(rng, 2, 3, 4, 5), "w": _t(rng, 4, 3), "b": _t(rng, 4)})
    check("depthwise3x3", lambda t: proj(ops.depthwise3x3(t["x"], t["w"], t["b"])),
          {"x": _t(rng, 2, 3, 5, 6), "w": _t(rng, 3, 3, 3), "b": _t(rng, 3)})
    check("up_conv2x2", lambda t: proj(ops.up_conv2x2(t["x"], t["w"], t["b"])),
          {"x": _t(rng, 2, 4, 3, 4), "w": _t(rng, 4, 2, 2, 2), "b": _t(rng, 2)})
    check("avg_pool2", lambda t: proj(ops.avg_pool2(t["x"])), {"x": _t(rng, 2, 3, 6, 8)})
    check("concat_slice", lambda t: proj(ops.slice_channels(
        ops.concat_channels(t["a"], t["b"]), 1, 4)),
        {"a": _t(rng, 2, 3, 4, 4), "b": _t(rng, 2, 2, 4, 4)})
    # fractional flow keeps sample points off the bilinear cell corners
    check("grid_warp", lambda t: proj(ops.grid_warp(t["img"], t["flow"])),
          {"img": Tensor(rng.uniform(0.1, 0.9, (1, 3, 6, 8))),
           "flow": Tensor(rng.uniform(0.2, 0.8, (1, 2, 6, 8)) * rng.choice([-1, 1], (1, 2, 6, 8)))})

    bn_state = BNState.create(3)

    def bn_train(t):
        y = ops.batch_norm(t["x"], t["g"], t["b"], bn_state,
                           training=True, update_stats=False)
        return proj(y)

    check("batch_norm_train", bn_train,
          {"x": _t(rng, 4, 3, 4, 4), "g": Tensor(rng.uniform(0.5, 1.5, 3)),
           "b": _t(rng, 3)})

    infer_state = BNState(np.array([0.1, -0.2, 0.3]), np.array([0.5, 1.2, 0.8]))

    def bn_infer(t):
        y = ops.batch_norm(t["x"], t["g"], t["b"], infer_state, training=False)
        return proj(y)

    check("batch_norm_inference", bn_infer,
          {"x": _t(rng, 2, 3, 4, 4), "g": Tensor(rng.uniform(0.5, 1.5, 3)),
           "b": _t(rng, 3)})

    model = EccNet(seed=3).cast_(np.float64)
    model.params["head.w"].data[:2] *= 0.1
    model.params["head.b"].data[:2] = 0.5
    img = 0.2 + 0.6 * rng.random((2, 3, 8, 16))
    gaze = rng.uniform(-1, 1, (2, 2))
    target = 0.2 + 0.6 * rng.random((2, 3, 8, 16))
    picked = ["enc1.l1.pw.w", "enc3.l2.dw.w", "mid.l3.pw.w", "up2.w",
              "dec1.l1.bn.gamma", "head.w", "head.b"]

    def full_net(t):
        for k in picked:
            model.params[k] = t[k]
        flow, bright = model.forward(t["img"], gaze, training=True,
                                     update_stats=False)
        corrected = apply_correction(t["img"], flow, bright)
        return ops.mse(corrected, Tensor(target))

    inputs = {"img": Tensor(img)}
    inputs.update({k: model.params[k] for k in picked})
    check("full_network", full_net, inputs, coords=20, seed=1)

    if include_broken:
        def scale_wrong(x):
            out = Tensor(x.data * 3.0, requires_grad=x.requires_grad)
            from .autodiff import accumulate, active_tape
            tape = active_tape()
            if tape is not None and x.requires_grad:
                # wrong on purpose: claims d(3x)/dx == 1.5
                tape.record("scale_wrong",
                            lambda: accumulate(x, out.grad * 1.5))
            return out

        check("injected_broken_backward",
              lambda t: ops.mean_all(scale_wrong(t["x"])), {"x": _t(rng, 3, 3)})

    return reports


@dataclass
class CheckResult:
    name: str
    ok: bool
    seconds: float
    detail: str

    def line(self) -> str:
        mark = "PASS" if self.ok else "FAIL"
        return f"{mark} {self.name} ({self.seconds:.2f}s) {self.detail}"


def _check_gradients(include_broken=False):
    reports = gradient_suite(include_broken=include_broken)
    bad = [r for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    if bad:
        raise AssertionError("; ".join(r.summary() for r in bad))
    return f"{len(reports)} ops, worst rel err {worst:.2e}"


def _check_exactness():
    rng = np.random.default_rng(0)
    img = rng.random((1, 3, 32, 64)).astype(np.float32)
    zero_flow = np.zeros((1, 2, 32, 64), np.float32)
    warped = ops.grid_warp(Tensor(img), Tensor(zero_flow)).data
    if not np.array_equal(warped, img):
        raise AssertionError("zero-flow warp altered pixels")

    model = EccNet(seed=1)
    flow = Tensor(rng.normal(0, 3, (1, 2, 32, 64)).astype(np.float32))
    bright = Tensor(rng.random((1, 1, 32, 64)).astype(np.float32))
    out = apply_correction(Tensor(img), flow, bright, strength=0.0).data
    if not np.array_equal(out, img):
        raise AssertionError("zero strength is not a bitwise pass-through")

    patch = rng.random((3, 32, 64)).astype(np.float32)
    left, _ = correct_patch(model, patch, (0.3, -0.2), left=True)
    manual, _ = correct_patch(model, flip_lr(patch), (-0.3, -0.2), left=False)
    if not np.array_equal(left, flip_lr(manual)):
        raise AssertionError("mirror protocol is not exact")
    return "zero-flow, zero-strength, mirror: all bitwise"


def _check_filter():
    f = AlphaBetaFilter()
    if f.update(4.25) != 4.25 or f.v != 0.0:
        raise AssertionError("first observation not adopted exactly")
    for t in range(100):
        out = f.update(1.0 + 0.25 * t)
    if abs(out - (1.0 + 0.25 * 99)) > 1e-3:
        raise AssertionError("ramp tracking error above 1e-3 after 100 steps")
    g = AlphaBetaFilter()
    for _ in range(20):
        g.update(2.0)
    g.update(12.0)  # 10-unit outlier
    recovered = None
    for k in range(10):
        recovered = g.update(2.0)
    if abs(recovered - 2.0) > 0.05 * 10.0:
        raise AssertionError("outlier not recovered to 5% within 10 frames")
    return "adoption exact, ramp tracked, outlier recovered"


def _check_metrics():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = rng.random((3, 8, 8))
        b = rng.random((3, 8, 8))
        if tolerant_mse(a, b) > mse(a, b) + 1e-15:
            raise AssertionError("tolerant error exceeded plain error")
        if abs(tolerant_mse(a, b) - tolerant_mse(b, a)) > 1e-15:
            raise AssertionError("tolerant error asymmetric")
    a = rng.random((3, 16, 20))
    shifted = np.empty_like(a)
    shifted[..., 1:] = a[..., :-1]
    shifted[..., 0] = a[..., 0]
    if tolerant_mse(a, shifted) != 0.0:
        raise AssertionError("one-pixel shift not forgiven")
    return "100 pairs: bound + symmetry; 1-px shift forgiven"


def _check_round_trips():
    rng = np.random.default_rng(2)
    model = EccNet(seed=4)
    with tempfile.TemporaryDirectory() as d:
        wpath = os.path.join(d, "w.eccw")
        save_weights(wpath, model.weights())
        back = load_weights(wpath)
        for name, arr in model.weights().items():
            if not np.array_equal(back[name], arr):
                raise AssertionError(f"weight entry {name} changed in round trip")
        save_weights(wpath + "2", back)
        if open(wpath, "rb").read() != open(wpath + "2", "rb").read():
            raise AssertionError("weight file bytes not stable")
        img = rng.integers(0, 256, (32, 64, 3), dtype=np.uint8)
        ppath = os.path.join(d, "p.ppm")
        write_ppm(ppath, img)
        if not np.array_equal(read_ppm(ppath), img):
            raise AssertionError("PPM round trip changed pixels")
    return "ECCW and PPM round-trip bitwise"


def _check_latency(budget_ms: float = 33.0):
    rng = np.random.default_rng(3)
    model = EccNet(seed=5)
    patch = rng.random((3, 32, 64)).astype(np.float32)
    ff = FrameFilter()
    times = []
    for i in range(25):
        t0 = time.perf_counter()
        out = model.infer(patch[None], np.zeros((1, 2), np.float32))
        flow, bright = ff.update(out.flow[0], out.brightness[0])
        s = scene_strength(FrameSignals()) * flow_strength(flow)
        apply_correction(
            Tensor(patch[None]), Tensor(flow[None]), Tensor(bright[None]),
            strength=s if s > 0 else 1.0,
        )
        if i >= 5:  # skip warmup
            times.append((time.perf_counter() - t0) * 1e3)
    med = float(np.median(times))
    if med > budget_ms:
        raise AssertionError(f"median frame time {med:.1f} ms over {budget_ms} ms budget")
    return f"median {med:.2f} ms per frame (budget {budget_ms:.0f} ms)"


def run_selfcheck(include_broken: bool = False) -> list:
    """Run every registered check; returns CheckResults in order."""
    from .kernels import warmup

    warmup()
    checks = [
        ("gradients", lambda: _check_gradients(include_broken=include_broken)),
        ("exactness", _check_exactness),
        ("alpha_beta_filter", _check_filter),
        ("metric_properties", _check_metrics),
        ("format_round_trips", _check_round_trips),
        ("frame_latency", _check_latency),
    ]
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            detail = fn()
            ok = True
        except AssertionError as e:
            detail = str(e)
            ok = False
        results.append(CheckResult(name, ok, time.perf_counter() - t0, detail))
    return results
