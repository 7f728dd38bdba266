"""Evaluation metrics and the held-out evaluation loop.

The headline number is the relative error: the squared error of the
corrected patch against the target patch, divided by the squared error
of doing nothing. Both sides use a misalignment-tolerant variant that
takes the minimum over integer shifts within a 3x3 pixel slack, scoring
each shift on the overlapping region only; a one-pixel crop misalignment
then costs almost nothing, while a wrong iris costs full price.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control import ControlThresholds, FrameSignals, flow_strength, scene_strength
from .model import EccNet, apply_correction, predict_gaze
from .autodiff import Tensor
from .synthdata import make_pairs, open_ratio


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def tolerant_mse(a: np.ndarray, b: np.ndarray, radius: int = 1) -> float:
    """Minimum MSE over shifts of b within +-radius px, per-overlap mean.

    a and b have spatial layout [..., H, W]; a shift that helps is only
    scored where the two images still overlap.
    """
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    H, W = a.shape[-2], a.shape[-1]
    if H <= radius or W <= radius:
        raise ValueError("images too small for the shift radius")
    best = np.inf
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ay0, by0 = max(dy, 0), max(-dy, 0)
            ax0, bx0 = max(dx, 0), max(-dx, 0)
            hh, ww = H - abs(dy), W - abs(dx)
            pa = a[..., ay0:ay0 + hh, ax0:ax0 + ww]
            pb = b[..., by0:by0 + hh, bx0:bx0 + ww]
            err = float(np.mean((pa - pb) ** 2))
            if err < best:
                best = err
    return best


def relative_error(corrected, ground_truth, input_img, radius: int = 1) -> float:
    """Tolerant error of the correction over that of doing nothing.

    1.0 means the correction changed nothing of consequence; 0 means a
    perfect match to the ground truth. Raises when the input already
    equals the ground truth (no error left to reduce).
    """
    den = tolerant_mse(input_img, ground_truth, radius)
    if den == 0.0:
        raise ValueError("input equals ground truth; relative error undefined")
    return tolerant_mse(corrected, ground_truth, radius) / den


def pearson(x, y) -> float:
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("need two same-length sequences")
    sx = x.std()
    sy = y.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def fit_gain(pred_raw, true) -> float:
    """Least-squares slope through the origin mapping raw -> true."""
    pred_raw = np.asarray(pred_raw, np.float64)
    true = np.asarray(true, np.float64)
    denom = float((pred_raw ** 2).sum())
    if denom == 0.0:
        return 0.0
    return float((pred_raw * true).sum() / denom)


@dataclass
class EvalReport:
    n_pairs: int
    relative_error: float
    relative_error_median: float
    pair_errors: list
    n_excluded: int
    pearson_h: float
    pearson_v: float
    gain_h: float
    gain_v: float
    mean_abs_flow_px: float
    gated_fraction: float
    with_control: bool

    def as_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "relative_error": round(self.relative_error, 6),
            "relative_error_median": round(self.relative_error_median, 6),
            "pair_errors": [round(e, 6) for e in self.pair_errors],
            "n_excluded": self.n_excluded,
            "pearson_h": round(self.pearson_h, 4),
            "pearson_v": round(self.pearson_v, 4),
            "gain_h": round(self.gain_h, 4),
            "gain_v": round(self.gain_v, 4),
            "mean_abs_flow_px": round(self.mean_abs_flow_px, 4),
            "gated_fraction": round(self.gated_fraction, 4),
            "with_control": self.with_control,
        }


def _batched(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def evaluate(
    model: EccNet,
    sets: list,
    max_pairs: int = 400,
    seed: int = 0,
    with_control: bool = False,
    thresholds: ControlThresholds | None = None,
    radius: int = 1,
    batch: int = 32,
) -> EvalReport:
    """Score a model on in-set pairs drawn from held-out sets.

    Each pair is scored as its own relative error and the scores are
    averaged. Pairs whose input already equals the target (nothing to
    reduce) are excluded and counted in n_excluded; when control is on,
    pairs the gates fully disable are likewise excluded and counted in
    gated_fraction. Gaze prediction probes every sampled input with a
    centered target gaze and correlates the implied gaze with the label.
    """
    pairs = []
    for si, es in enumerate(sets):
        for i, j in make_pairs(len(es.samples)):
            pairs.append((si, i, j))
    if not pairs:
        raise ValueError("no evaluation pairs available")
    rng = np.random.default_rng(seed)
    rng.shuffle(pairs)
    pairs = pairs[:max_pairs]

    ratios = []
    flows = []
    gated = 0
    excluded = 0
    for chunk in _batched(pairs, batch):
        imgs = np.stack([sets[si].samples[i].image for si, i, _ in chunk])
        tgts = np.stack([sets[si].samples[j].image for si, _, j in chunk])
        gaze_t = np.stack([sets[si].samples[j].gaze for si, _, j in chunk])
        out = model.infer(imgs, gaze_t)
        for b, (si, i, j) in enumerate(chunk):
            flow = out.flow[b]
            flows.append(np.abs(flow).mean())
            strength = 1.0
            if with_control:
                sig = FrameSignals(eye_open=open_ratio(sets[si].samples[i].landmarks))
                strength = scene_strength(sig, thresholds)
                strength *= flow_strength(flow, thresholds)
                if strength < 0.05:
                    gated += 1
                    continue
            corrected = apply_correction(
                Tensor(imgs[b:b + 1], requires_grad=False),
                Tensor(out.flow[b:b + 1], requires_grad=False),
                Tensor(out.brightness[b:b + 1], requires_grad=False),
                strength=strength,
            ).data[0]
            try:
                ratios.append(relative_error(corrected, tgts[b], imgs[b], radius))
            except ValueError:
                excluded += 1

    # probe each distinct input with a centered target to read gaze back
    sample_ids = sorted({(si, i) for si, i, _ in pairs})
    raw_h, raw_v, true_h, true_v = [], [], [], []
    for chunk in _batched(sample_ids, batch):
        imgs = np.stack([sets[si].samples[i].image for si, i in chunk])
        zeros = np.zeros((len(chunk), 2), np.float32)
        out = model.infer(imgs, zeros)
        raw = predict_gaze(out.flow)
        for b, (si, i) in enumerate(chunk):
            raw_h.append(float(raw[b, 0]))
            raw_v.append(float(raw[b, 1]))
            true_h.append(float(sets[si].samples[i].gaze[0]))
            true_v.append(float(sets[si].samples[i].gaze[1]))
    gain_h = fit_gain(raw_h, true_h)
    gain_v = fit_gain(raw_v, true_v)
    r_h = pearson(np.multiply(raw_h, gain_h), true_h) if gain_h else 0.0
    r_v = pearson(np.multiply(raw_v, gain_v), true_v) if gain_v else 0.0

    return EvalReport(
        n_pairs=len(ratios),
        relative_error=float(np.mean(ratios)) if ratios else float("nan"),
        relative_error_median=float(np.median(ratios)) if ratios else float("nan"),
        pair_errors=ratios,
        n_excluded=excluded,
        pearson_h=r_h,
        pearson_v=r_v,
        gain_h=gain_h,
        gain_v=gain_v,
        mean_abs_flow_px=float(np.mean(flows)) if flows else 0.0,
        gated_fraction=gated / len(pairs),
        with_control=with_control,
    )
