"""Procedural synthetic eye-patch dataset.

Each *set* is one rendered eye with fixed appearance (skin, iris color,
lid aperture, lighting, optional glasses) and a per-set random seed;
within a set only the gaze direction changes, so any two samples differ
only where the iris and its catchlight moved. That invariant is what
makes in-set pairs usable as (input, target) supervision: the correct
flow moves the iris, and everything else is reconstruction.

Geometry is built from signed distances on a 96x56 canvas: an ellipse
for the visible eye opening (lid aperture scales the vertical semi-axis),
discs for iris and pupil clipped to the opening, and a gaze-independent
catchlight. Gaze in [-1, 1] per axis maps linearly to iris-center travel;
+h looks toward +x (image right), +v looks up (toward -y).

Samples are cropped around the eye with a 2:1 box twice the landmark
width, resized to 64x32, quantized to u8, and written as PPM files with
a JSON manifest. Quantized patches round-trip bitwise through the
float pipeline.

Landmark order (canvas px, x right, y down):
  0 left corner, 1 right corner,
  2 upper lid left, 3 upper lid right,
  4 lower lid left, 5 lower lid right.
The lid points sit at x = cx +- 0.4a where the ellipse height is
sqrt(1 - 0.4^2) = 0.917 of the open semi-axis.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .imutil import bilinear_resize, chw, read_ppm, to_float, to_uint8, write_ppm

CANVAS_H = 56
CANVAS_W = 96
PATCH_H = 32
PATCH_W = 64

_LID_X = 0.4  # lid landmarks at +-0.4 * half-width
_LID_Y = float(np.sqrt(1.0 - _LID_X * _LID_X))

_IRIS_PALETTE = (
    (0.36, 0.22, 0.12),
    (0.20, 0.12, 0.08),
    (0.34, 0.50, 0.62),
    (0.30, 0.45, 0.28),
    (0.44, 0.47, 0.50),
)


@dataclass
class RenderConfig:
    """Knobs for dataset generation; defaults match training data.

    The aperture floor is 0.2: the generator never renders fully closed
    eyes, those are handled downstream by the control gates.
    """

    gazes_per_set: int = 40
    gaze_sigma: float = 0.4
    aperture_range: tuple = (0.7, 1.0)
    glasses_prob: float = 0.3
    jitter_amp_range: tuple = (0.005, 0.025)

    def __post_init__(self):
        lo, hi = self.aperture_range
        if not (0.2 <= lo <= hi <= 1.0):
            raise ValueError("aperture_range must satisfy 0.2 <= lo <= hi <= 1.0")
        if self.gazes_per_set < 1:
            raise ValueError("gazes_per_set must be at least 1")
        if not (0.0 <= self.glasses_prob <= 1.0):
            raise ValueError("glasses_prob must be in [0, 1]")


@dataclass
class SetParams:
    """Appearance of one rendered eye, fixed across gazes."""

    cx: float
    cy: float
    a: float            # half-width of the eye opening, px
    b0: float           # fully-open vertical semi-axis, px
    aperture: float     # lid openness in (0, 1]
    iris_r: float
    pupil_ratio: float
    skin: np.ndarray
    sclera: np.ndarray
    iris: np.ndarray
    pupil: float
    light_u: float      # catchlight horizontal placement in [-1, 1]
    catch_r: float
    glasses: bool
    glasses_color: np.ndarray
    jitter: np.ndarray  # [CANVAS_H, CANVAS_W, 3] additive field

    @property
    def b_eff(self) -> float:
        return self.b0 * self.aperture


def sample_set_params(rng: np.random.Generator, cfg: RenderConfig) -> SetParams:
    a = rng.uniform(14.0, 20.0)
    b0 = a * rng.uniform(0.5, 0.62)
    skin = np.array([0.78, 0.60, 0.50]) * rng.uniform(0.55, 1.15)
    skin = np.clip(skin + rng.normal(0.0, 0.03, 3), 0.05, 1.0)
    sclera = np.clip(
        np.array([0.97, 0.96, 0.94]) * rng.uniform(0.88, 1.0), 0.0, 1.0
    )
    iris = np.asarray(_IRIS_PALETTE[rng.integers(len(_IRIS_PALETTE))], np.float64)
    iris = np.clip(iris + rng.normal(0.0, 0.04, 3), 0.02, 1.0)
    lo, hi = cfg.jitter_amp_range
    amp = rng.uniform(lo, hi)
    coarse = rng.normal(0.0, amp, (7, 10, 3))
    jitter = bilinear_resize(coarse, CANVAS_H, CANVAS_W)
    return SetParams(
        cx=CANVAS_W / 2.0 + rng.uniform(-4.0, 4.0),
        cy=CANVAS_H / 2.0 + rng.uniform(-4.0, 4.0),
        a=a,
        b0=b0,
        aperture=rng.uniform(*cfg.aperture_range),
        iris_r=b0 * rng.uniform(0.66, 0.78),
        pupil_ratio=rng.uniform(0.22, 0.30),
        skin=skin,
        sclera=sclera,
        iris=iris,
        pupil=rng.uniform(0.02, 0.07),
        light_u=rng.uniform(-1.0, 1.0),
        catch_r=rng.uniform(1.1, 1.6),
        glasses=bool(rng.random() < cfg.glasses_prob),
        glasses_color=np.array([0.1, 0.1, 0.12]) + rng.normal(0.0, 0.02, 3),
        jitter=jitter,
    )


def iris_center(p: SetParams, gaze) -> tuple:
    """Canvas position of the iris center for a gaze in [-1, 1]^2."""
    dx_max = max(0.92 * p.a - p.iris_r, 0.0)
    dy_max = 0.4 * p.b0
    return p.cx + float(gaze[0]) * dx_max, p.cy - float(gaze[1]) * dy_max


def landmarks_canvas(p: SetParams) -> np.ndarray:
    """The 6 gaze-independent landmarks in canvas pixels, [6, 2]."""
    ly = _LID_Y * p.b_eff
    return np.array(
        [
            [p.cx - p.a, p.cy],
            [p.cx + p.a, p.cy],
            [p.cx - _LID_X * p.a, p.cy - ly],
            [p.cx + _LID_X * p.a, p.cy - ly],
            [p.cx - _LID_X * p.a, p.cy + ly],
            [p.cx + _LID_X * p.a, p.cy + ly],
        ],
        np.float64,
    )


def open_ratio(landmarks: np.ndarray) -> float:
    """Lid openness proxy: landmark bounding-box height over width."""
    lm = np.asarray(landmarks, np.float64)
    w = float(lm[:, 0].max() - lm[:, 0].min())
    h = float(lm[:, 1].max() - lm[:, 1].min())
    return h / max(w, 1e-9)


def _disc(X, Y, cx, cy, r):
    # 1px-feathered coverage of a disc, via its signed distance
    d = r - np.sqrt((X - cx) ** 2 + (Y - cy) ** 2)
    return np.clip(d + 0.5, 0.0, 1.0)


def render_canvas(p: SetParams, gaze) -> np.ndarray:
    """Render one sample at full canvas resolution, float [H, W, 3]."""
    Y, X = np.mgrid[0:CANVAS_H, 0:CANVAS_W].astype(np.float64)
    nx = (X - p.cx) / p.a
    ny = (Y - p.cy) / max(p.b_eff, 1e-6)
    rho = np.sqrt(nx * nx + ny * ny)
    # approximate distance to the ellipse edge in px for the feather
    eye = np.clip((1.0 - rho) * min(p.a, p.b_eff) + 0.5, 0.0, 1.0)

    img = np.empty((CANVAS_H, CANVAS_W, 3), np.float64)
    img[:] = p.skin

    # sclera with a soft shadow band under the upper lid
    shadow = 1.0 - 0.18 * np.clip((-ny - 0.55) / 0.45, 0.0, 1.0)
    sclera = p.sclera[None, None, :] * shadow[:, :, None]
    img = img * (1.0 - eye[:, :, None]) + sclera * eye[:, :, None]

    icx, icy = iris_center(p, gaze)
    d_ir = np.sqrt((X - icx) ** 2 + (Y - icy) ** 2)
    cov_ir = np.clip(p.iris_r - d_ir + 0.5, 0.0, 1.0) * eye
    q = d_ir / p.iris_r
    shade = 0.75 + 0.25 * np.clip(1.0 - q, 0.0, 1.0)
    shade = shade - 0.35 * np.clip((q - 0.8) / 0.2, 0.0, 1.0)  # limbal rim
    iris_col = p.iris[None, None, :] * shade[:, :, None]
    img = img * (1.0 - cov_ir[:, :, None]) + iris_col * cov_ir[:, :, None]

    cov_pu = _disc(X, Y, icx, icy, p.pupil_ratio * p.iris_r) * eye
    img = img * (1.0 - cov_pu[:, :, None]) + p.pupil * cov_pu[:, :, None]

    # catchlight stays put while the iris moves under it
    clx = p.cx + 0.25 * p.light_u * p.a
    cly = p.cy - 0.3 * p.b_eff
    cov_cl = _disc(X, Y, clx, cly, p.catch_r) * eye * 0.85
    img = img * (1.0 - cov_cl[:, :, None]) + 0.95 * cov_cl[:, :, None]

    if p.glasses:
        gw = 1.35 * p.a
        gh = 1.35 * p.b0
        m = np.maximum(np.abs(X - p.cx) / gw, np.abs(Y - p.cy) / gh)
        band = np.clip((0.05 - np.abs(m - 0.95)) * min(gw, gh) * 0.2 + 0.5, 0.0, 1.0)
        img = img * (1.0 - band[:, :, None]) + p.glasses_color * band[:, :, None]

    img = img + p.jitter
    return np.clip(img, 0.0, 1.0)


def crop_box(p: SetParams) -> tuple:
    """Integer 2:1 crop (x, y, w, h): twice the landmark width, centered."""
    h = min(int(round(2.0 * p.a)), CANVAS_W // 2, CANVAS_H)
    w = 2 * h
    x = int(round(p.cx - w / 2.0))
    y = int(round(p.cy - h / 2.0))
    x = min(max(x, 0), CANVAS_W - w)
    y = min(max(y, 0), CANVAS_H - h)
    return x, y, w, h


def to_patch_coords(landmarks: np.ndarray, box) -> np.ndarray:
    x, y, w, h = box
    lm = np.asarray(landmarks, np.float64).copy()
    lm[:, 0] = (lm[:, 0] - x) * (PATCH_W / w)
    lm[:, 1] = (lm[:, 1] - y) * (PATCH_H / h)
    return lm


def truncated_gauss(rng: np.random.Generator, sigma: float, n: int) -> np.ndarray:
    """N(0, sigma^2) samples redrawn until inside [-1, 1], shape [n, 2]."""
    out = rng.normal(0.0, sigma, (n, 2))
    for _ in range(64):
        bad = np.abs(out) > 1.0
        if not bad.any():
            return out
        out[bad] = rng.normal(0.0, sigma, int(bad.sum()))
    return np.clip(out, -1.0, 1.0)


@dataclass
class EyeSample:
    image: np.ndarray       # float32 [3, PATCH_H, PATCH_W]
    gaze: np.ndarray        # float32 [2]
    landmarks: np.ndarray   # float32 [6, 2], patch coords


@dataclass
class EyeSet:
    name: str
    crop_box: tuple
    samples: list = field(default_factory=list)


def generate_set(rng: np.random.Generator, cfg: RenderConfig) -> tuple:
    """Render one set; returns (SetParams, box, [(patch_u8, gaze, lm)])."""
    p = sample_set_params(rng, cfg)
    box = crop_box(p)
    x, y, w, h = box
    lm = to_patch_coords(landmarks_canvas(p), box)
    gazes = truncated_gauss(rng, cfg.gaze_sigma, cfg.gazes_per_set)
    out = []
    for g in gazes:
        canvas = render_canvas(p, g)
        patch = bilinear_resize(canvas[y:y + h, x:x + w], PATCH_H, PATCH_W)
        out.append((to_uint8(patch), g.copy(), lm.copy()))
    return p, box, out


def write_dataset(root, n_sets: int, seed: int, cfg: RenderConfig | None = None) -> None:
    """Write n_sets set directories plus manifests under root."""
    cfg = cfg or RenderConfig()
    os.makedirs(root, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_sets)
    for i, ss in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(ss))
        _, box, samples = generate_set(rng, cfg)
        set_dir = os.path.join(root, f"set_{i:04d}")
        os.makedirs(set_dir, exist_ok=True)
        manifest = {"seed": seed, "set_index": i, "crop_box": list(box), "samples": []}
        for j, (patch, gaze, lm) in enumerate(samples):
            name = f"g{j:03d}.ppm"
            write_ppm(os.path.join(set_dir, name), patch)
            manifest["samples"].append(
                {
                    "file": name,
                    "gaze": [float(gaze[0]), float(gaze[1])],
                    "landmarks": [[float(a), float(b)] for a, b in lm],
                }
            )
        with open(os.path.join(set_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=1)
            f.write("\n")


def load_dataset(root) -> list:
    """Load every set directory under root into memory.

    Images come back float32 CHW in [0, 1]; loading then re-quantizing
    reproduces the files bitwise.
    """
    names = sorted(
        d for d in os.listdir(root)
        if os.path.isdir(os.path.join(root, d))
        and os.path.isfile(os.path.join(root, d, "manifest.json"))
    )
    if not names:
        raise ValueError(f"{root}: no set directories with manifests found")
    sets = []
    for name in names:
        set_dir = os.path.join(root, name)
        with open(os.path.join(set_dir, "manifest.json")) as f:
            manifest = json.load(f)
        for key in ("crop_box", "samples"):
            if key not in manifest:
                raise ValueError(f"{set_dir}: manifest missing '{key}'")
        es = EyeSet(name=name, crop_box=tuple(manifest["crop_box"]))
        for entry in manifest["samples"]:
            for key in ("file", "gaze", "landmarks"):
                if key not in entry:
                    raise ValueError(f"{set_dir}: sample entry missing '{key}'")
            img = read_ppm(os.path.join(set_dir, entry["file"]))
            gaze = np.asarray(entry["gaze"], np.float32)
            lm = np.asarray(entry["landmarks"], np.float32)
            if gaze.shape != (2,) or lm.shape != (6, 2):
                raise ValueError(f"{set_dir}/{entry['file']}: bad gaze or landmark shape")
            es.samples.append(
                EyeSample(image=chw(to_float(img)), gaze=gaze, landmarks=lm)
            )
        sets.append(es)
    return sets


def make_pairs(n: int) -> list:
    """All ordered (input, target) index pairs inside one set."""
    return [(i, j) for i in range(n) for j in range(n) if i != j]


@dataclass
class AugParams:
    """One draw of the shared photometric conditions: the processing
    order, noise level, brightness/contrast shift, and blur radius.
    Frames captured under the same conditions share one draw; the noise
    realization itself is per frame."""

    order: tuple
    noise_sigma: float
    contrast: float
    bias: float
    blur_sigma: float


def sample_aug(rng: np.random.Generator) -> AugParams:
    return AugParams(
        order=tuple(int(k) for k in rng.permutation(3)),
        noise_sigma=float(rng.uniform(0.0, 0.03)),
        contrast=float(rng.uniform(0.85, 1.15)),
        bias=float(rng.uniform(-0.1, 0.1)),
        blur_sigma=float(rng.uniform(0.0, 1.0)),
    )


def augment(img: np.ndarray, rng: np.random.Generator,
            params: AugParams | None = None) -> np.ndarray:
    """Photometric augmentation of a float32 CHW patch.

    Noise, brightness/contrast, and blur, each with random strength
    (possibly zero) and applied in random order; output stays in [0, 1].
    Passing params pins everything but the noise realization, so the two
    sides of a training pair can share their capture conditions.
    """
    p = params if params is not None else sample_aug(rng)
    out = img.astype(np.float32, copy=True)
    for op in p.order:
        if op == 0:
            out = out + rng.normal(0.0, p.noise_sigma, out.shape).astype(np.float32)
        elif op == 1:
            out = (out - 0.5) * np.float32(p.contrast) + np.float32(0.5 + p.bias)
        else:
            if p.blur_sigma > 1e-3:
                out = gaussian_filter(out, sigma=(0.0, p.blur_sigma, p.blur_sigma))
    return np.clip(out, 0.0, 1.0, out=out)
