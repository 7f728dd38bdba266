"""Encoder-decoder network predicting warp flow and brightness maps.

The network consumes a 5-channel tensor: an RGB eye patch plus two
constant channels tiling the target gaze direction. It emits three
channels at input resolution: horizontal and vertical flow in pixels,
and a brightness-adjustment map squashed through a sigmoid.

Structure: three encoder stages of depthwise-separable conv blocks with
2x2 average pooling between them, a bottleneck block, and a decoder that
mirrors the encoder with 2x2 transposed convolutions and skip
concatenations from the matching encoder stage. Every conv block runs
three depthwise-separable layers; the third one sees the sum of the
first two layers' outputs, a residual that skips the middle layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor

PATCH_H = 32
PATCH_W = 64

# name -> (in_channels, out_channels)
_BLOCKS = {
    "enc1": (5, 16),
    "enc2": (16, 32),
    "enc3": (32, 64),
    "mid": (64, 64),
    "dec1": (64, 32),
    "dec2": (32, 16),
}
_UPS = {"up1": (64, 32), "up2": (32, 16)}
_HEAD_CH = 16

# Fine-tuning trains only the first encoder block; everything after it,
# including all running statistics, stays fixed.
FINETUNE_PREFIX = "enc1."


@dataclass
class EccOutput:
    """Raw network outputs for a batch of patches.

    flow: [B, 2, H, W] sampling offsets in pixels (x then y channel).
    brightness: [B, 1, H, W] in (0, 1), the blend weight toward white.
    """

    flow: np.ndarray
    brightness: np.ndarray

    def mean_flow(self) -> np.ndarray:
        """Per-item mean flow vector, [B, 2]."""
        return self.flow.mean(axis=(2, 3))

    def flow_magnitudes(self) -> np.ndarray:
        """Per-pixel flow vector lengths, [B, H, W]."""
        return np.sqrt(self.flow[:, 0] ** 2 + self.flow[:, 1] ** 2)


class EccNet:
    """The correction network: parameters, running stats, and forward."""

    def __init__(self, seed: int = 0):
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, ops.BNState] = {}
        rng = np.random.default_rng(seed)
        for name, (cin, cout) in _BLOCKS.items():
            widths = [(cin, cout), (cout, cout), (cout, cout)]
            for i, (a, b) in enumerate(widths, start=1):
                self._add_sep_layer(f"{name}.l{i}", a, b, rng)
        for name, (cin, cout) in _UPS.items():
            self._add_param(f"{name}.w", self._he((cin, cout, 2, 2), cin, rng))
            self._add_param(f"{name}.b", np.zeros(cout, np.float32))
            self._add_bn(f"{name}.bn", cout)
        self._add_param("head.w", self._he((3, _HEAD_CH, 3, 3), _HEAD_CH * 9, rng))
        # Start near the identity correction: zero-ish flow and a small
        # brightness weight (sigmoid(-2) ~ 0.12).
        self._add_param("head.b", np.array([0.0, 0.0, -2.0], np.float32))

    @staticmethod
    def _he(shape, fan_in, rng) -> np.ndarray:
        std = np.sqrt(2.0 / fan_in)
        return (rng.standard_normal(shape) * std).astype(np.float32)

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def _add_bn(self, name: str, channels: int) -> None:
        self._add_param(f"{name}.gamma", np.ones(channels, np.float32))
        self._add_param(f"{name}.beta", np.zeros(channels, np.float32))
        self.bn_states[name] = ops.BNState.create(channels)

    def _add_sep_layer(self, prefix: str, cin: int, cout: int, rng) -> None:
        self._add_param(f"{prefix}.dw.w", self._he((cin, 3, 3), 9, rng))
        self._add_param(f"{prefix}.dw.b", np.zeros(cin, np.float32))
        self._add_param(f"{prefix}.pw.w", self._he((cout, cin), cin, rng))
        self._add_param(f"{prefix}.pw.b", np.zeros(cout, np.float32))
        self._add_bn(f"{prefix}.bn", cout)

    # ------------------------------------------------------------- forward

    def _sep_layer(self, x: Tensor, prefix: str, training: bool,
                   update_stats: bool) -> Tensor:
        p = self.params
        h = ops.depthwise3x3(x, p[f"{prefix}.dw.w"], p[f"{prefix}.dw.b"])
        h = ops.pointwise(h, p[f"{prefix}.pw.w"], p[f"{prefix}.pw.b"])
        h = ops.batch_norm(h, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"],
                           self.bn_states[f"{prefix}.bn"], training, update_stats)
        return ops.relu(h)

    def _block(self, x: Tensor, name: str, training: bool,
               update_stats: bool) -> Tensor:
        h1 = self._sep_layer(x, f"{name}.l1", training, update_stats)
        h2 = self._sep_layer(h1, f"{name}.l2", training, update_stats)
        return self._sep_layer(ops.add(h1, h2), f"{name}.l3", training, update_stats)

    def _up(self, x: Tensor, name: str, training: bool, update_stats: bool) -> Tensor:
        p = self.params
        h = ops.up_conv2x2(x, p[f"{name}.w"], p[f"{name}.b"])
        h = ops.batch_norm(h, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                           self.bn_states[f"{name}.bn"], training, update_stats)
        return ops.relu(h)

    def forward(self, img: Tensor, gaze: np.ndarray, training: bool = False,
                update_stats: bool = True) -> tuple[Tensor, Tensor]:
        """Run the network; returns (flow, brightness) Tensors.

        img: [B, 3, H, W] with H, W divisible by 4; gaze: [B, 2] target
        direction tiled into two extra input channels.
        """
        B, C, H, W = img.data.shape
        if C != 3:
            raise ValueError(f"expected 3 input channels, got {C}")
        if H % 4 or W % 4:
            raise ValueError(f"spatial dims must be divisible by 4, got {H}x{W}")
        gaze = np.asarray(gaze)
        if gaze.shape != (B, 2):
            raise ValueError(f"gaze must be [{B}, 2], got {gaze.shape}")
        tile = np.ascontiguousarray(
            np.broadcast_to(gaze.astype(img.dtype)[:, :, None, None], (B, 2, H, W))
        )
        x = ops.concat_channels(img, Tensor(tile))

        e1 = self._block(x, "enc1", training, update_stats)
        e2 = self._block(ops.avg_pool2(e1), "enc2", training, update_stats)
        e3 = self._block(ops.avg_pool2(e2), "enc3", training, update_stats)
        m = self._block(e3, "mid", training, update_stats)
        u1 = self._up(m, "up1", training, update_stats)
        d1 = self._block(ops.concat_channels(u1, e2), "dec1", training, update_stats)
        u2 = self._up(d1, "up2", training, update_stats)
        d2 = self._block(ops.concat_channels(u2, e1), "dec2", training, update_stats)
        h = ops.conv2d(d2, self.params["head.w"], self.params["head.b"],
                       stride=1, padding=1)
        flow = ops.slice_channels(h, 0, 2)
        brightness = ops.sigmoid(ops.slice_channels(h, 2, 3))
        return flow, brightness

    def infer(self, img: np.ndarray, gaze: np.ndarray) -> EccOutput:
        """Forward pass outside any tape, using running statistics."""
        out = self.forward(Tensor(img), gaze, training=False)
        return EccOutput(flow=out[0].data, brightness=out[1].data)

    # ---------------------------------------------------------- parameters

    def trainable(self, finetune: bool = False) -> dict[str, Tensor]:
        """Parameters receiving gradient updates; fine-tuning restricts
        them to the first encoder block."""
        if finetune:
            return {k: v for k, v in self.params.items()
                    if k.startswith(FINETUNE_PREFIX)}
        return dict(self.params)

    def weights(self) -> dict[str, np.ndarray]:
        """All arrays defining the network, running statistics included."""
        out = {k: v.data for k, v in self.params.items()}
        for k, st in self.bn_states.items():
            out[f"{k}.running_mean"] = st.mean
            out[f"{k}.running_var"] = st.var
        return out

    def load_weights(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.weights()
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise ValueError(f"missing weight entry '{missing[0]}'")
        unknown = sorted(set(arrays) - set(expected))
        if unknown:
            raise ValueError(f"unknown weight entry '{unknown[0]}'")
        for k, v in arrays.items():
            want = expected[k].shape
            if tuple(v.shape) != tuple(want):
                raise ValueError(
                    f"weight '{k}' has shape {tuple(v.shape)}, expected {tuple(want)}"
                )
        for k in self.params:
            self.params[k].data = np.asarray(arrays[k], dtype=np.float32).copy()
        for k, st in self.bn_states.items():
            st.mean = np.asarray(arrays[f"{k}.running_mean"], np.float32).copy()
            st.var = np.asarray(arrays[f"{k}.running_var"], np.float32).copy()

    def cast_(self, dtype) -> "EccNet":
        """Convert parameters and statistics in place (float64 for checks)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        for st in self.bn_states.values():
            st.mean = st.mean.astype(dtype)
            st.var = st.var.astype(dtype)
        return self


# ------------------------------------------------------- output application


def apply_correction(img: Tensor, flow: Tensor, brightness: Tensor,
                     strength: float = 1.0) -> Tensor:
    """Warp the patch by the flow and blend toward white by the map.

    O = W + s*M * (1 - W) with W the warped patch, M the brightness map
    and s the correction strength; the result is clamped to [0, 1]. At
    s = 0 the output is the input, bit for bit.
    """
    if strength != 1.0:
        flow = ops.affine(flow, strength)
        brightness = ops.affine(brightness, strength)
    warped = ops.grid_warp(img, flow)
    lift = ops.mul(brightness, ops.affine(warped, -1.0, 1.0))
    return ops.clip01(ops.add(warped, lift))


def predict_gaze(flow: np.ndarray, k: tuple[float, float] = (1.0, 1.0)) -> np.ndarray:
    """Implicit gaze estimate from a flow field: the negated mean flow
    vector, scaled per axis. flow [B, 2, H, W] -> [B, 2]."""
    mean = flow.mean(axis=(2, 3))
    return -mean * np.asarray(k, dtype=mean.dtype)


def flip_lr(img: np.ndarray) -> np.ndarray:
    """Mirror the trailing width axis (works for CHW and HWC alike given
    the caller knows the layout; width must be last)."""
    return np.ascontiguousarray(img[..., ::-1])


def correct_patch(model: EccNet, patch: np.ndarray, gaze,
                  strength: float = 1.0, left: bool = False):
    """Correct a single [3, H, W] patch toward the target gaze.

    Left-eye patches are mirrored into right-eye orientation (negating
    the horizontal gaze component), corrected, and mirrored back.
    Returns (corrected [3, H, W], EccOutput for the single item).
    """
    patch = np.asarray(patch, np.float32)
    gh, gv = float(gaze[0]), float(gaze[1])
    if left:
        work, g = flip_lr(patch), (-gh, gv)
    else:
        work, g = patch, (gh, gv)
    out = model.infer(work[None], np.array([g], np.float32))
    corrected = apply_correction(
        Tensor(work[None]), Tensor(out.flow), Tensor(out.brightness), strength
    ).data[0]
    if left:
        corrected = flip_lr(corrected)
    return corrected, out
