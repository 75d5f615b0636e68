"""Dynamic-mask fusion: combine a flow-derived and a depth-derived binary
mask into one per-pixel dynamic labeling.

Candidate pixels (union of the two masks) are grouped into moving objects by
K-means seeded from connected components; within each object every pixel is
kept iff its Bayesian posterior P(dynamic | flow bit, depth bit) clears the
threshold, and the final mask is the union over objects.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import FlowField, MaskImage


class CalibrationError(ValueError):
    pass


@dataclass
class PosteriorParams:
    """Bernoulli sensor model for the two mask modalities.

    prior is P(dynamic) over the domain where the posterior is evaluated
    (candidate pixels), not over whole images.
    """

    prior: float = 0.3
    tpr_f: float = 0.9
    fpr_f: float = 0.05
    tpr_d: float = 0.9
    fpr_d: float = 0.05
    threshold: float = 0.95

    def __post_init__(self):
        for name in ("prior", "tpr_f", "fpr_f", "tpr_d", "fpr_d", "threshold"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name}={v} must be in the open interval (0, 1)")


@dataclass
class ClusterSet:
    k: int
    centroids: np.ndarray          # k x 2, (x, y) pixel coordinates
    assignment: np.ndarray         # H x W int, -1 outside candidates
    sse: float


@dataclass
class ObjectSet:
    objects: list = field(default_factory=list)  # list of (N_i, 2) pixel index arrays (x, y)

    def __len__(self):
        return len(self.objects)


def flow_mask(flow: FlowField, rigid_flow: FlowField, tau_f: float = 1.0) -> MaskImage:
    """Pixels whose observed flow deviates from the camera-induced rigid flow."""
    if flow.shape != rigid_flow.shape:
        raise ValueError("flow and rigid_flow shapes differ")
    residual = np.linalg.norm(flow.vectors - rigid_flow.vectors, axis=2)
    return MaskImage((residual > tau_f).astype(np.uint8))


def depth_mask(d_curr: np.ndarray, d_prev_warped: np.ndarray, tau_d: float = 0.1) -> MaskImage:
    """Temporal-consistency residual: relative depth change above tau_d.

    d_prev_warped is the previous frame's scaled depth carried into the
    current view; NaN marks pixels the warp did not reach (labelled static).
    """
    d_curr = np.asarray(d_curr, dtype=np.float64)
    d_prev_warped = np.asarray(d_prev_warped, dtype=np.float64)
    if d_curr.shape != d_prev_warped.shape:
        raise ValueError("depth shapes differ")
    if np.any(d_curr <= 0) or not np.all(np.isfinite(d_curr)):
        raise ValueError("current depth must be positive and finite")
    defined = np.isfinite(d_prev_warped)
    if np.any(d_prev_warped[defined] <= 0):
        raise ValueError("warped depth must be positive where defined")
    bits = np.zeros(d_curr.shape, dtype=np.uint8)
    rel = np.abs(d_curr[defined] - d_prev_warped[defined]) / d_curr[defined]
    bits[defined] = rel > tau_d
    return MaskImage(bits)


_CONN8 = np.ones((3, 3), dtype=int)


def cluster_dynamic(candidates: MaskImage, k_max: int = 5) -> tuple[ClusterSet, ObjectSet]:
    """Lloyd K-means over candidate pixels, k = min(#8-connected components, k_max).

    Deterministic: centroids seed at component centroids (largest components
    first) and ties in the nearest-centroid assignment go to the lowest index.
    """
    bits = candidates.bits
    H, W = bits.shape
    assignment = np.full((H, W), -1, dtype=np.int64)
    ys, xs = np.nonzero(bits)
    if len(xs) == 0:
        return ClusterSet(0, np.zeros((0, 2)), assignment, 0.0), ObjectSet([])

    labels, n_comp = ndimage.label(bits, structure=_CONN8)
    k = min(n_comp, k_max)
    sizes = ndimage.sum_labels(np.ones_like(bits), labels, index=np.arange(1, n_comp + 1))
    seed_labels = np.argsort(-sizes, kind="stable")[:k] + 1
    cy, cx = zip(*ndimage.center_of_mass(bits, labels, index=seed_labels))
    centroids = np.stack([np.asarray(cx, dtype=np.float64),
                          np.asarray(cy, dtype=np.float64)], axis=1)

    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    assign = None
    prev_sse = np.inf
    for _it in range(50):
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)   # argmin takes the lowest index on ties
        sse = float(d2[np.arange(len(pts)), new_assign].sum())
        assert sse <= prev_sse + 1e-9, "K-means SSE increased"
        prev_sse = sse
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for i in range(k):
            sel = assign == i
            if sel.any():
                centroids[i] = pts[sel].mean(axis=0)

    assignment[ys, xs] = assign
    objects = [pts[assign == i].astype(np.int64) for i in range(k) if (assign == i).any()]
    d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    sse = float(d2[np.arange(len(pts)), assign].sum())
    return ClusterSet(k, centroids, assignment, sse), ObjectSet(objects)


def posterior(f: int, d: int, params: PosteriorParams) -> float:
    """P(dynamic | flow bit f, depth bit d) under conditionally independent sensors."""
    lf1 = params.tpr_f if f else 1.0 - params.tpr_f
    lf0 = params.fpr_f if f else 1.0 - params.fpr_f
    ld1 = params.tpr_d if d else 1.0 - params.tpr_d
    ld0 = params.fpr_d if d else 1.0 - params.fpr_d
    num = params.prior * ld1 * lf1
    den = num + (1.0 - params.prior) * ld0 * lf0
    return num / den


def fuse(f_m: MaskImage, d_m: MaskImage, params: PosteriorParams,
         k_max: int = 5) -> tuple[MaskImage, ObjectSet]:
    """Fused dynamic mask: per-object posterior thresholding over the candidate union."""
    if f_m.shape != d_m.shape:
        raise ValueError("mask shapes differ")
    candidates = MaskImage(f_m.bits | d_m.bits)
    clusters, objects = cluster_dynamic(candidates, k_max)

    # posterior depends only on the two bits: evaluate the 4 combinations once
    post = {(f, d): posterior(f, d, params) for f in (0, 1) for d in (0, 1)}
    keep = {fd for fd, p in post.items() if p > params.threshold}

    fused = np.zeros(f_m.shape, dtype=np.uint8)
    for obj in objects.objects:
        x, y = obj[:, 0], obj[:, 1]
        fbits = f_m.bits[y, x]
        dbits = d_m.bits[y, x]
        sel = np.zeros(len(obj), dtype=bool)
        for (fb, db) in keep:
            sel |= (fbits == fb) & (dbits == db)
        fused[y[sel], x[sel]] = 1
    return MaskImage(fused), objects


def calibrate(params_init: PosteriorParams,
              labeled: list[tuple[MaskImage, MaskImage, MaskImage]],
              clamp: float = 1e-3) -> PosteriorParams:
    """Estimate sensor rates and the candidate-domain prior by counting against GT.

    labeled: (flow mask, depth mask, ground-truth dynamic mask) triples.
    """
    if not labeled:
        raise CalibrationError("no labeled pairs given")
    f_all = np.concatenate([f.bits.ravel() for f, _, _ in labeled])
    d_all = np.concatenate([d.bits.ravel() for _, d, _ in labeled])
    gt_all = np.concatenate([g.bits.ravel() for _, _, g in labeled])
    n_dyn = int(gt_all.sum())
    n_stat = len(gt_all) - n_dyn
    if n_dyn == 0 or n_stat == 0:
        raise CalibrationError("ground truth must contain both classes")

    def rate(bits, mask):
        return float(bits[mask].mean())

    dyn = gt_all == 1
    stat = ~dyn
    cand = (f_all | d_all) == 1
    if not cand.any():
        raise CalibrationError("no candidate pixels to estimate the prior over")
    lo, hi = clamp, 1.0 - clamp
    cl = lambda v: min(max(v, lo), hi)
    return PosteriorParams(
        prior=cl(rate(gt_all, cand)),
        tpr_f=cl(rate(f_all, dyn)), fpr_f=cl(rate(f_all, stat)),
        tpr_d=cl(rate(d_all, dyn)), fpr_d=cl(rate(d_all, stat)),
        threshold=params_init.threshold)


def mask_iou(pred: MaskImage, gt: MaskImage) -> float:
    inter = int((pred.bits & gt.bits).sum())
    union = int((pred.bits | gt.bits).sum())
    return inter / union if union else 1.0


def mask_precision_recall(pred: MaskImage, gt: MaskImage) -> tuple[float, float]:
    tp = int((pred.bits & gt.bits).sum())
    p = int(pred.bits.sum())
    g = int(gt.bits.sum())
    return (tp / p if p else 1.0, tp / g if g else 1.0)
