"""Command-line interface.

Six subcommands: datagen, train, eval, correct, predict-gaze, and
selfcheck. Machine-readable JSON goes to stdout, human logs to stderr,
and the exit code is 0 only when the command fully succeeded.

Frame sequences are directories of frame_{index:05}.ppm files plus a
landmarks.json of the form

    {"frames": [{"index": 0,
                 "face_box": [x, y, w, h],
                 "pose": [pitch, roll, yaw],
                 "eyes": {"left": [[x, y] * 6], "right": [[x, y] * 6]}}]}

with pixel coordinates in the frame, pose in degrees, and eye landmarks
ordered corner, corner, upper lid x2, lower lid x2. "left" marks the
eye that runs through the mirror path. A single image with one such
frame object (index ignored) works the same way through --image.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import runconfig
from .autodiff import Tensor
from .control import FrameFilter, FrameSignals, flow_strength, scene_strength
from .eccw import load_weights, save_weights
from .imutil import bilinear_resize, chw, hwc, read_ppm, to_float, to_uint8, write_ppm
from .model import EccNet, apply_correction, flip_lr, predict_gaze
from .synthdata import PATCH_H, PATCH_W, open_ratio


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(obj: dict) -> None:
    print(json.dumps(obj), flush=True)


def _load_model(path) -> EccNet:
    model = EccNet(seed=0)
    model.load_weights(load_weights(path))
    return model


def cmd_datagen(args) -> int:
    from .synthdata import write_dataset

    cfg = runconfig.load_config(args.config)
    seed = args.seed if args.seed is not None else cfg["data"]["seed"]
    rc = runconfig.render_config(cfg)
    _log(f"rendering {cfg['data']['n_sets']} sets x {rc.gazes_per_set} gazes (seed {seed})")
    write_dataset(args.out, cfg["data"]["n_sets"], seed=seed, cfg=rc)
    _emit({
        "sets": cfg["data"]["n_sets"],
        "gazes_per_set": rc.gazes_per_set,
        "seed": seed,
        "out": args.out,
    })
    return 0


def cmd_train(args) -> int:
    from .kernels import warmup
    from .synthdata import load_dataset
    from .training import train

    cfg = runconfig.load_config(args.config)
    tc = runconfig.train_config(cfg)
    if args.seed is not None:
        tc.seed = args.seed
    if args.iterations is not None:
        if args.iterations <= 0:
            raise ValueError("--iterations must be positive")
        tc.iterations = args.iterations
    warmup()
    sets = load_dataset(args.data)
    _log(f"training {tc.iterations} iterations on {len(sets)} sets")
    model = EccNet(seed=cfg["model"]["seed"])
    log_path = args.out + ".log.jsonl"
    with open(log_path, "w") as log_file:
        def on_report(r):
            log_file.write(json.dumps(r.as_dict()) + "\n")
            log_file.flush()
            _log(f"iter {r.iteration} loss {r.loss:.6f}")

        history = train(model, sets, tc, out_dir=args.checkpoint_dir,
                        on_report=on_report)
    save_weights(args.out, model.weights())
    _emit({
        "iterations": tc.iterations,
        "final_loss": history[-1].loss if history else None,
        "weights": args.out,
        "log": log_path,
    })
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .synthdata import load_dataset

    cfg = runconfig.load_config(args.config)
    model = _load_model(args.weights)
    sets = load_dataset(args.data)
    report = evaluate(
        model,
        sets,
        max_pairs=cfg["eval"]["max_pairs"],
        seed=args.seed if args.seed is not None else cfg["eval"]["seed"],
        with_control=args.with_control,
        thresholds=runconfig.control_thresholds(cfg),
        radius=runconfig.slack_radius(cfg),
    )
    _emit(report.as_dict())
    return 0


def _read_landmarks_file(path, single: bool) -> list:
    with open(path) as f:
        doc = json.load(f)
    frames = [doc] if single else doc.get("frames")
    if not isinstance(frames, list) or not frames:
        raise ValueError(f"{path}: expected a 'frames' list")
    out = []
    for k, fr in enumerate(frames):
        for key in ("face_box", "pose", "eyes"):
            if key not in fr:
                raise ValueError(f"{path}: frame {k} missing '{key}'")
        eyes = {}
        for side in ("left", "right"):
            if side in fr["eyes"]:
                lm = np.asarray(fr["eyes"][side], np.float64)
                if lm.shape != (6, 2):
                    raise ValueError(
                        f"{path}: frame {k} {side} eye needs 6 [x, y] points"
                    )
                eyes[side] = lm
        # a sequence may have dropout frames with no landmarks; those
        # pass through untouched, but a single image must name an eye
        if not eyes and single:
            raise ValueError(f"{path}: frame {k} lists no eyes")
        out.append({
            "index": int(fr.get("index", k)),
            "face_box": [float(v) for v in fr["face_box"]],
            "pose": [float(v) for v in fr["pose"]],
            "eyes": eyes,
        })
    return out


def _eye_box(lm: np.ndarray, frame_w: int, frame_h: int) -> tuple:
    """2:1 crop box around one eye's landmarks, clamped into the frame."""
    x_lo, y_lo = lm.min(axis=0)
    x_hi, y_hi = lm.max(axis=0)
    half = int(round(x_hi - x_lo))  # box height = landmark width
    h = max(min(half, frame_h, frame_w // 2), 4)
    w = 2 * h
    cx = (x_lo + x_hi) / 2.0
    cy = (y_lo + y_hi) / 2.0
    x = int(round(cx - w / 2.0))
    y = int(round(cy - h / 2.0))
    x = min(max(x, 0), frame_w - w)
    y = min(max(y, 0), frame_h - h)
    return x, y, w, h


def _frame_signals(rec: dict, frame_w: int, frame_h: int,
                   lm: np.ndarray) -> FrameSignals:
    fx, fy, fw, fh = rec["face_box"]
    pitch, roll, yaw = rec["pose"]
    cx = fx + fw / 2.0
    cy = fy + fh / 2.0
    offset = float(np.hypot(cx - frame_w / 2.0, cy - frame_h / 2.0))
    return FrameSignals(
        face_size=fw / frame_w,
        center_offset=offset / frame_w,
        pitch=pitch,
        yaw=yaw,
        roll=roll,
        eye_open=open_ratio(lm),
    )


class _EyeStream:
    """Per-eye correction pipeline with temporal filter state."""

    def __init__(self, model: EccNet, side: str, thresholds, alpha: float, beta: float):
        self.model = model
        self.left = side == "left"
        self.th = thresholds
        self.filter = FrameFilter(alpha, beta)

    def process(self, frame: np.ndarray, rec: dict, override) -> np.ndarray:
        """Correct one eye in place on the float HWC frame; returns it."""
        lm = rec["eyes"]["left" if self.left else "right"]
        fh, fw = frame.shape[:2]
        x, y, w, h = _eye_box(lm, fw, fh)
        crop = frame[y:y + h, x:x + w]
        patch = bilinear_resize(crop.astype(np.float32), PATCH_H, PATCH_W)
        work = chw(patch)
        if self.left:
            work = flip_lr(work)
        out = self.model.infer(work[None], np.zeros((1, 2), np.float32))
        flow, bright = self.filter.update(out.flow[0], out.brightness[0])
        if override is not None:
            strength = float(override)
        else:
            strength = scene_strength(_frame_signals(rec, fw, fh, lm), self.th)
            strength *= flow_strength(flow, self.th)
        if strength <= 0.0:
            return frame
        corrected = apply_correction(
            Tensor(work[None]), Tensor(flow[None]), Tensor(bright[None]),
            strength=strength,
        ).data[0]
        if self.left:
            corrected = flip_lr(corrected)
        patch_out = hwc(corrected)
        up = bilinear_resize(patch_out, h, w).astype(np.float64)
        ax = np.minimum.reduce([np.arange(w), (w - 1) - np.arange(w), np.full(w, 2)]) / 2.0
        ay = np.minimum.reduce([np.arange(h), (h - 1) - np.arange(h), np.full(h, 2)]) / 2.0
        alpha = np.minimum(ay[:, None], ax[None, :])[:, :, None]
        frame[y:y + h, x:x + w] = crop * (1.0 - alpha) + up * alpha
        return frame


def _side_by_side(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    gap = np.full((before.shape[0], 4, 3), 255, np.uint8)
    return np.concatenate([before, gap, after], axis=1)


def cmd_correct(args) -> int:
    cfg = runconfig.load_config(args.config)
    model = _load_model(args.weights)
    thresholds = runconfig.control_thresholds(cfg)
    alpha = cfg["control"]["alpha"]
    beta = cfg["control"]["beta"]
    os.makedirs(args.out, exist_ok=True)

    if args.image is not None:
        frames = _read_landmarks_file(args.landmarks, single=True)
        sources = [(frames[0], args.image, os.path.basename(args.image))]
    else:
        frames = _read_landmarks_file(
            os.path.join(args.frames, "landmarks.json"), single=False
        )
        sources = []
        for rec in frames:
            name = f"frame_{rec['index']:05d}.ppm"
            path = os.path.join(args.frames, name)
            if not os.path.isfile(path):
                raise FileNotFoundError(f"frame {rec['index']}: missing {path}")
            sources.append((rec, path, name))

    streams = {}
    n_done = 0
    for rec, path, name in sources:
        try:
            original = read_ppm(path)
        except ValueError as e:
            raise ValueError(f"frame {rec['index']}: {e}") from None
        frame = to_float(original).astype(np.float64)
        for side in ("right", "left"):
            if side not in rec["eyes"]:
                continue
            if side not in streams:
                streams[side] = _EyeStream(model, side, thresholds, alpha, beta)
            frame = streams[side].process(frame, rec, args.strength)
        result = to_uint8(frame)
        write_ppm(os.path.join(args.out, name), result)
        if args.side_by_side:
            write_ppm(os.path.join(args.out, "side_" + name),
                      _side_by_side(original, result))
        n_done += 1
        _log(f"frame {rec['index']}: done")
    _emit({"frames": n_done, "out": args.out})
    return 0


def cmd_predict_gaze(args) -> int:
    model = _load_model(args.weights)
    cfg = runconfig.load_config(args.config)
    thresholds = runconfig.control_thresholds(cfg)
    rec = _read_landmarks_file(args.landmarks, single=True)[0]
    frame = to_float(read_ppm(args.image))
    fh, fw = frame.shape[:2]
    estimates = []
    strengths = []
    for side, lm in rec["eyes"].items():
        x, y, w, h = _eye_box(lm, fw, fh)
        patch = bilinear_resize(frame[y:y + h, x:x + w], PATCH_H, PATCH_W)
        work = chw(patch)
        if side == "left":
            work = flip_lr(work)
        out = model.infer(work[None], np.zeros((1, 2), np.float32))
        raw = predict_gaze(out.flow, k=(args.gain_h, args.gain_v))[0]
        if side == "left":
            raw = np.array([-raw[0], raw[1]])
        estimates.append(raw)
        s = scene_strength(_frame_signals(rec, fw, fh, lm), thresholds)
        strengths.append(s * flow_strength(out.flow[0], thresholds))
    gaze = np.mean(estimates, axis=0)
    _emit({
        "gaze": [round(float(gaze[0]), 4), round(float(gaze[1]), 4)],
        "strength": round(float(min(strengths)), 4),
    })
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    results = run_selfcheck()
    for r in results:
        _log(r.line())
    ok = all(r.ok for r in results)
    _emit({
        "ok": ok,
        "checks": [
            {"name": r.name, "ok": r.ok, "seconds": round(r.seconds, 3),
             "detail": r.detail}
            for r in results
        ],
    })
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecc", description="Eye-contact correction toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="render a synthetic eye dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.set_defaults(fn=cmd_datagen)

    t = sub.add_parser("train", help="train correction weights")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int, help="override config iteration count")
    t.add_argument("--checkpoint-dir")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score weights on a dataset")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--with-control", action="store_true")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("correct", help="correct eye contact in images")
    c.add_argument("--weights", required=True)
    c.add_argument("--out", required=True)
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="single PPM image")
    src.add_argument("--frames", help="directory with frame_*.ppm + landmarks.json")
    c.add_argument("--landmarks", help="landmarks JSON for --image mode")
    c.add_argument("--strength", type=float,
                   help="override gated strength (0 disables, 1 full)")
    c.add_argument("--side-by-side", action="store_true")
    c.add_argument("--config")
    c.set_defaults(fn=cmd_correct)

    g = sub.add_parser("predict-gaze", help="estimate input gaze from an image")
    g.add_argument("--weights", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--landmarks", required=True)
    g.add_argument("--gain-h", type=float, default=1.0)
    g.add_argument("--gain-v", type=float, default=1.0)
    g.add_argument("--config")
    g.set_defaults(fn=cmd_predict_gaze)

    s = sub.add_parser("selfcheck", help="verify the installation")
    s.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "correct" and args.image is not None and not args.landmarks:
        build_parser().error("--image mode requires --landmarks")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, OSError) as e:
        _log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
