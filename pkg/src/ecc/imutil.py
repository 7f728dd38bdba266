"""Image files and resampling helpers.

Images move through the pipeline as float32 arrays in [0, 1]. On disk
they are binary PPM (P6, maxval 255); converting u8 -> float -> u8
round-trips exactly, so written datasets are stable byte for byte.
"""

from __future__ import annotations

import numpy as np


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM with maxval 255 into uint8 [H, W, 3]."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        return data[start:pos]

    if token() != b"P6":
        raise ValueError(f"{path}: not a binary P6 PPM")
    w = int(token())
    h = int(token())
    maxval = int(token())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace byte after the header
    need = w * h * 3
    pixels = data[pos:pos + need]
    if len(pixels) != need:
        raise ValueError(
            f"{path}: expected {need} pixel bytes, found {len(pixels)}"
        )
    return np.frombuffer(pixels, np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm needs uint8 [H, W, 3], got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [0, 1]."""
    return np.asarray(img, np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """float [0, 1] -> uint8, rounding to nearest; inverse of to_float."""
    return np.clip(np.rint(np.asarray(img, np.float64) * 255.0), 0, 255).astype(np.uint8)


def chw(img: np.ndarray) -> np.ndarray:
    """[H, W, 3] -> [3, H, W], contiguous."""
    return np.ascontiguousarray(np.transpose(img, (2, 0, 1)))


def hwc(img: np.ndarray) -> np.ndarray:
    """[3, H, W] -> [H, W, 3], contiguous."""
    return np.ascontiguousarray(np.transpose(img, (1, 2, 0)))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [H, W, C] (or [H, W]) with bilinear sampling.

    Sample positions use half-pixel centers and clamp to the edge, the
    same convention the warp kernel uses.
    """
    img = np.asarray(img)
    H, W = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * (H / out_h) - 0.5, 0, H - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (W / out_w) - 0.5, 0, W - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0).astype(img.dtype if img.dtype.kind == "f" else np.float32)
    wx = (xs - x0).astype(wy.dtype)
    if img.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    top = a + wx * (b - a)
    bot = c + wx * (d - c)
    return (top + wy * (bot - top)).astype(img.dtype, copy=False)
