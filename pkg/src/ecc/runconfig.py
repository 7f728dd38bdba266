"""Strict JSON run configuration.

One document configures data generation, training, control, model, and
evaluation. Unknown keys anywhere in the tree are rejected (typos must
not silently fall back to defaults); missing keys take the defaults
below. Section values translate into the dataclasses the modules use.
"""

from __future__ import annotations

import copy
import json

from .control import ControlThresholds
from .synthdata import RenderConfig
from .training import TrainConfig

DEFAULTS = {
    "data": {
        "n_sets": 200,
        "gazes_per_set": 10,
        "seed": 100,
    },
    "train": {
        "loss_weight_correction": 0.8,
        "loss_weight_reconstruction": 0.2,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 0.1,
        "lr_min": 0.002,
        "lr_max": 0.01,
        "lr_cycle_len": 2000,
        "batch_size": 16,
        "total_iters": 20000,
        "finetune_first_layers_only": False,
        "rng_seed": 0,
    },
    "control": {
        "alpha": 0.5,
        "beta": 0.1,
        "face_size_rise": [0.08, 0.12],
        "face_size_fall": [0.45, 0.6],
        "center_offset": [0.25, 0.4],
        "pitch_deg": [15.0, 25.0],
        "yaw_deg": [15.0, 25.0],
        "roll_deg": [20.0, 30.0],
        "eye_open": [0.15, 0.25],
        "mean_flow_px": [4.0, 6.0],
        "max_flow_px": [8.0, 12.0],
    },
    "model": {
        "seed": 0,
    },
    "eval": {
        "slack_window": 3,
        "max_pairs": 400,
        "seed": 0,
    },
}

_GATE_KEYS = (
    "face_size_rise", "face_size_fall", "center_offset", "pitch_deg",
    "yaw_deg", "roll_deg", "eye_open", "mean_flow_px", "max_flow_px",
)


class ConfigError(ValueError):
    """Malformed run configuration."""


def _merge(defaults: dict, user: dict, path: str) -> dict:
    out = {}
    for key, dval in defaults.items():
        if key not in user:
            out[key] = copy.deepcopy(dval)
            continue
        uval = user[key]
        here = f"{path}.{key}" if path else key
        if isinstance(dval, dict):
            if not isinstance(uval, dict):
                raise ConfigError(f"{here}: expected an object")
            out[key] = _merge(dval, uval, here)
        elif isinstance(dval, bool):
            if not isinstance(uval, bool):
                raise ConfigError(f"{here}: expected true/false")
            out[key] = uval
        elif isinstance(dval, int):
            if isinstance(uval, bool) or not isinstance(uval, int):
                raise ConfigError(f"{here}: expected an integer")
            out[key] = uval
        elif isinstance(dval, float):
            if isinstance(uval, bool) or not isinstance(uval, (int, float)):
                raise ConfigError(f"{here}: expected a number")
            out[key] = float(uval)
        elif isinstance(dval, list):
            if (not isinstance(uval, list) or len(uval) != len(dval)
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                               for v in uval)):
                raise ConfigError(f"{here}: expected a list of {len(dval)} numbers")
            out[key] = [float(v) for v in uval]
        else:
            out[key] = uval
    unknown = set(user) - set(defaults)
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}' in {where}")
    return out


def load_config(path=None) -> dict:
    """Read and validate a config file; None gives pure defaults."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    with open(path) as f:
        try:
            user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = _merge(DEFAULTS, user, "")
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    window = cfg["eval"]["slack_window"]
    if window < 1 or window % 2 == 0:
        raise ConfigError("eval.slack_window must be odd and positive")
    for key in _GATE_KEYS:
        lo, hi = cfg["control"][key]
        if not lo < hi:
            raise ConfigError(f"control.{key}: edges must be strictly increasing")


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        iterations=t["total_iters"],
        batch_size=t["batch_size"],
        lr_min=t["lr_min"],
        lr_max=t["lr_max"],
        lr_cycle=t["lr_cycle_len"],
        beta1=t["adam_beta1"],
        beta2=t["adam_beta2"],
        eps=t["adam_eps"],
        correction_weight=t["loss_weight_correction"],
        reconstruction_weight=t["loss_weight_reconstruction"],
        seed=t["rng_seed"],
        finetune=t["finetune_first_layers_only"],
    )


def render_config(cfg: dict) -> RenderConfig:
    return RenderConfig(gazes_per_set=cfg["data"]["gazes_per_set"])


def control_thresholds(cfg: dict) -> ControlThresholds:
    c = cfg["control"]
    return ControlThresholds(
        face_size_rise=tuple(c["face_size_rise"]),
        face_size_fall=tuple(c["face_size_fall"]),
        center_offset=tuple(c["center_offset"]),
        pitch_deg=tuple(c["pitch_deg"]),
        yaw_deg=tuple(c["yaw_deg"]),
        roll_deg=tuple(c["roll_deg"]),
        eye_open=tuple(c["eye_open"]),
        mean_flow_px=tuple(c["mean_flow_px"]),
        max_flow_px=tuple(c["max_flow_px"]),
    )


def slack_radius(cfg: dict) -> int:
    return (cfg["eval"]["slack_window"] - 1) // 2
