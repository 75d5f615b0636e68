"""Flat JSON run configuration.

Every numeric knob of the pipeline appears here with its default; config
files may set any subset, and CLI --key=value overrides take precedence.
"""
from __future__ import annotations

import json
from pathlib import Path

DEFAULTS = {
    # simulator scene
    "seed": 0,
    "width": 64, "height": 64,
    "fx": 70.0, "fy": 70.0, "cx": 32.0, "cy": 32.0,
    "n_frames": 60,
    "n_background": 200,
    "object_gaussians": 30,
    "object_extent": 0.55,
    # simulator sensor noise
    "flow_sigma": 0.25,
    "depth_noise_rel": 0.02,
    "depth_scale_lo": 0.7, "depth_scale_hi": 1.4,
    "mask_flip_fp": 0.05, "mask_flip_fn": 0.05,
    # mask building and fusion
    "mask_fusion": "on",            # "on" | "off" (ablation: no dynamic masking)
    "flow_mask_source": "file",     # "file" | "residual"
    "tau_f": 1.0,                   # px, residual-flow threshold
    "tau_d": 0.1,                   # relative depth threshold
    "prior": 0.3,
    "tpr_f": 0.9, "fpr_f": 0.05,
    "tpr_d": 0.9, "fpr_d": 0.05,
    "fusion_threshold": 0.95,
    "k_max": 5,
    # tracking
    "lambda1": 1.0, "lambda2": 1.0, "epsilon": 1e-6,
    "huber_delta": 1.0,
    "track_max_iters": 30,
    "track_min_pixels": 200,
    "track_stride": 1,
    "scale_ref": "map",             # "map" | "gt" (simulator bundles only)
    "keyframe_every": 10,
    # bundle adjustment
    "ba_window": 4,
    "ba_max_iters": 10,
    # mapping
    "mapping": "on",                # "off" = tracking-only run
    "lambda_d": 0.0, "lambda_s": 1.0,
    "lambda_t": 0.0, "lambda_m": 1.0,
    "lambda_g": 1.0,
    "insert_stride": 4,
    "insert_opacity": 0.5,
    "prune_tau_w": 0.1,
    "map_iters_per_keyframe": 40,
    "map_window": 3,
    "lr_position": 1.6e-4,          # scaled by scene extent
    "lr_color": 2.5e-3,
    "lr_opacity": 5e-2,
    "lr_scale": 5e-3,
    "lr_rotation": 1e-3,
    # renderer
    "near_plane": 0.01,
    "cov_inflation": 0.3,
    "support_sigma": 3.0,
    "term_transmittance": 1e-4,
    "opacity_clamp": 0.999,
    # execution / evaluation
    "threads": "sync",              # "sync" (deterministic) | "threaded"
    "align": "similarity",          # ATE alignment: none | rigid | similarity
}


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        loaded = json.loads(Path(path).read_text())
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    if overrides:
        for key, value in overrides.items():
            if key not in DEFAULTS:
                raise KeyError(f"unknown config key: {key}")
            cfg[key] = _coerce(value, DEFAULTS[key])
    return cfg


def _coerce(value, template):
    if isinstance(value, str) and not isinstance(template, str):
        if isinstance(template, bool):
            return value.lower() in ("1", "true", "yes", "on")
        if isinstance(template, int):
            return int(value)
        if isinstance(template, float):
            return float(value)
    return value


def save_config(path, cfg: dict) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
