"""Correction gating and temporal smoothing.

Correction strength is a product of smooth gates over frame signals
(face size and position, head pose, lid openness) and over the predicted
flow itself, so the effect fades in and out instead of snapping when a
signal crosses a threshold. Strength 1 applies the full correction,
0 passes the frame through untouched.

The predicted flow and brightness fields are smoothed over time with an
alpha-beta filter before being applied, which suppresses frame-to-frame
jitter of the estimates while still tracking steady motion without lag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def smoothstep(t):
    """Cubic ease 3t^2 - 2t^3, clamped to [0, 1]."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def gate_above(x: float, lo: float, hi: float) -> float:
    """1 when x is comfortably above hi, 0 below lo, eased between."""
    if hi <= lo:
        raise ValueError("need lo < hi")
    return float(smoothstep((x - lo) / (hi - lo)))


def gate_below(x: float, lo: float, hi: float) -> float:
    """1 when x is comfortably below lo, 0 above hi, eased between."""
    return 1.0 - gate_above(x, lo, hi)


def gate_band(x: float, rise: tuple, fall: tuple) -> float:
    """Rises over rise=(lo, hi), stays 1, falls over fall=(lo, hi)."""
    return gate_above(x, *rise) * gate_below(x, *fall)


@dataclass
class ControlThresholds:
    """Gate edges; each pair is the (start, end) of a smooth transition."""

    face_size_rise: tuple = (0.08, 0.12)
    face_size_fall: tuple = (0.45, 0.6)
    center_offset: tuple = (0.25, 0.4)
    pitch_deg: tuple = (15.0, 25.0)
    yaw_deg: tuple = (15.0, 25.0)
    roll_deg: tuple = (20.0, 30.0)
    eye_open: tuple = (0.15, 0.25)
    mean_flow_px: tuple = (4.0, 6.0)
    max_flow_px: tuple = (8.0, 12.0)


@dataclass
class FrameSignals:
    """Per-frame scene measurements driving the gates.

    face_size is the face box width as a fraction of the frame width;
    center_offset is the face center distance from the frame center,
    also as a fraction of frame width; angles are degrees; eye_open is
    the landmark bounding-box height/width ratio of the eye.
    """

    face_size: float = 0.25
    center_offset: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    eye_open: float = 0.5


def scene_strength(signals: FrameSignals, th: ControlThresholds | None = None) -> float:
    """Gate product over the pre-inference signals, in [0, 1]."""
    th = th or ControlThresholds()
    s = gate_band(signals.face_size, th.face_size_rise, th.face_size_fall)
    s *= gate_below(abs(signals.center_offset), *th.center_offset)
    s *= gate_below(abs(signals.pitch), *th.pitch_deg)
    s *= gate_below(abs(signals.yaw), *th.yaw_deg)
    s *= gate_below(abs(signals.roll), *th.roll_deg)
    s *= gate_above(signals.eye_open, *th.eye_open)
    return s


def flow_strength(flow: np.ndarray, th: ControlThresholds | None = None) -> float:
    """Gate product over predicted flow magnitudes, [2, H, W] in px."""
    th = th or ControlThresholds()
    mag = np.sqrt(flow[0].astype(np.float64) ** 2 + flow[1].astype(np.float64) ** 2)
    s = gate_below(float(mag.mean()), *th.mean_flow_px)
    s *= gate_below(float(mag.max()), *th.max_flow_px)
    return s


class AlphaBetaFilter:
    """Constant-velocity tracker for a (possibly array-valued) signal.

    update(z) predicts x + v, corrects by alpha times the residual, and
    integrates beta times the residual into the velocity. The first
    sample is adopted exactly with zero velocity. Tracks linear motion
    with no steady-state lag.
    """

    def __init__(self, alpha: float = 0.5, beta: float = 0.1):
        if not (0.0 < alpha <= 1.0) or not (0.0 <= beta <= 2.0):
            raise ValueError("need 0 < alpha <= 1 and 0 <= beta <= 2")
        self.alpha = alpha
        self.beta = beta
        self.x = None
        self.v = None

    def reset(self) -> None:
        self.x = None
        self.v = None

    def update(self, z):
        z = np.asarray(z, np.float64)
        # a shape change between frames starts tracking afresh
        if self.x is None or self.x.shape != z.shape:
            self.x = z.copy()
            self.v = np.zeros_like(z)
        else:
            pred = self.x + self.v
            r = z - pred
            self.x = pred + self.alpha * r
            self.v = self.v + self.beta * r
        return self.x.copy()


class FrameFilter:
    """Alpha-beta smoothing of the stacked [flow(2), brightness(1)] maps."""

    def __init__(self, alpha: float = 0.5, beta: float = 0.1):
        self._f = AlphaBetaFilter(alpha, beta)

    def reset(self) -> None:
        self._f.reset()

    def update(self, flow: np.ndarray, brightness: np.ndarray) -> tuple:
        stacked = np.concatenate([flow, brightness], axis=0)
        out = self._f.update(stacked).astype(np.float32)
        return out[:2], out[2:3]
