"""Trajectory and rendering metrics: ATE RMSE with rigid/similarity
alignment, PSNR over a region, and the structured evaluation report."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .trajectory import Trajectory

PSNR_INF = float("inf")


class InsufficientOverlap(ValueError):
    pass


def associate(est: Trajectory, gt: Trajectory, max_gap: float = 0.02):
    """Nearest-neighbor timestamp association; pairs further than max_gap apart
    are dropped."""
    te, tg = est.timestamps(), gt.timestamps()
    if len(te) == 0 or len(tg) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    j = np.searchsorted(tg, te)
    j_lo = np.clip(j - 1, 0, len(tg) - 1)
    j_hi = np.clip(j, 0, len(tg) - 1)
    pick = np.where(np.abs(tg[j_hi] - te) < np.abs(tg[j_lo] - te), j_hi, j_lo)
    ok = np.abs(tg[pick] - te) <= max_gap
    return np.flatnonzero(ok), pick[ok]


def umeyama_alignment(src: np.ndarray, dst: np.ndarray, with_scale: bool):
    """Closed-form least-squares s, R, t with dst ~ s R src + t."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs ** 2).sum() / len(src)
        s = float(np.trace(np.diag(D) @ S) / var_s) if var_s > 0 else 1.0
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def ate_rmse(est: Trajectory, gt: Trajectory, align: str = "similarity",
             max_gap: float = 0.02) -> float:
    """RMSE of translation residuals after aligning est onto gt.

    align: "none", "rigid" (6 DoF) or "similarity" (7 DoF, the monocular
    default). Needs at least 3 associated pairs.
    """
    if align not in ("none", "rigid", "similarity"):
        raise ValueError(f"unknown alignment {align!r}")
    ie, ig = associate(est, gt, max_gap)
    if len(ie) < 3:
        raise InsufficientOverlap(f"only {len(ie)} associated pose pairs (need 3)")
    pe = est.positions()[ie]
    pg = gt.positions()[ig]
    if align == "none":
        resid = pe - pg
    else:
        s, R, t = umeyama_alignment(pe, pg, with_scale=(align == "similarity"))
        resid = (s * (R @ pe.T)).T + t - pg
    return float(np.sqrt((resid ** 2).sum(axis=1).mean()))


def psnr(a: np.ndarray, b: np.ndarray, region_mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB over the masked region, peak 1.0.

    Identical inputs return the +inf sentinel.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if region_mask is not None:
        sel = np.asarray(region_mask).astype(bool)
        if not sel.any():
            raise ValueError("empty region")
        a, b = a[sel], b[sel]
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class EvalReport:
    ate_rmse_keyframes: float = float("nan")
    ate_rmse_all: float = float("nan")
    alignment: str = "similarity"
    psnr_static: float = float("nan")
    mask_iou: float = float("nan")
    mask_precision: float = float("nan")
    mask_recall: float = float("nan")
    n_frames: int = 0
    n_keyframes: int = 0
    n_gaussians: int = 0
    n_pruned: int = 0
    runtime_seconds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float):
                if math.isnan(v):
                    return None
                if math.isinf(v):
                    return "inf" if v > 0 else "-inf"
            return v
        d = {k: (clean(v) if not isinstance(v, dict)
                 else {kk: clean(vv) for kk, vv in v.items()})
             for k, v in asdict(self).items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")
