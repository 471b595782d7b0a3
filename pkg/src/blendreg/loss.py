"""Registration loss terms and their gradients with respect to points.

Every term returns ``(value, gradient)``. Image terms average over pixels
and over views so their size does not depend on the image resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .render import Raster, RasterConfig, backward_depth, backward_mask


class VisibilityError(RuntimeError):
    """No pixel is valid in both the deformed and the target depth maps."""


@dataclass(frozen=True)
class LossWeights:
    mask: float = 0.1
    arap: float = 0.01
    tran: float = 0.1
    sparse: float = 10.0
    stage_gamma: float = 1.0

    def __post_init__(self):
        if min(self.mask, self.arap, self.tran, self.sparse) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.stage_gamma <= 0:
            raise ValueError("stage_gamma must be positive")

    @classmethod
    def rigid(cls):
        # depth + mask only, later stages weighted up
        return cls(mask=0.1, arap=0.0, tran=0.0, sparse=0.0, stage_gamma=0.8)


@dataclass(frozen=True)
class StageLoss:
    depth: float = 0.0
    mask: float = 0.0
    arap: float = 0.0
    tran: float = 0.0
    sparse: float = 0.0
    stage_total: float = 0.0


TERMS = ("depth", "mask", "arap", "tran", "sparse")
# mask residuals this small count as ties and take the zero subgradient
MASK_TIE = 1e-9


@dataclass(frozen=True)
class LossBreakdown:
    stages: tuple
    final_total: float

    def as_rows(self):
        return [
            {"stage": k + 1, **{f.name: getattr(s, f.name) for f in fields(StageLoss)}}
            for k, s in enumerate(self.stages)
        ]


@dataclass(frozen=True)
class EdgeSet:
    i: np.ndarray
    j: np.ndarray
    rest: np.ndarray

    def __len__(self):
        return len(self.rest)


def build_edges(source, k=8):
    """Undirected KNN graph on the source cloud with rest lengths.

    Coincident points are skipped so every rest length is positive.
    """
    pts = np.asarray(source, dtype=np.float64)
    m = len(pts)
    k = min(k, m - 1)
    if k < 1:
        return EdgeSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    _, nbr = cKDTree(pts).query(pts, k=k + 1)
    ii = np.repeat(np.arange(m), k)
    jj = nbr[:, 1:].ravel()
    lo, hi = np.minimum(ii, jj), np.maximum(ii, jj)
    pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    rest = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    ok = rest > 0
    return EdgeSet(pairs[ok, 0], pairs[ok, 1], rest[ok])


def arap_loss(deformed, edges):
    """Sum over edges of (current length - rest length)^2."""
    pts = np.asarray(deformed, dtype=np.float64)
    diff = pts[edges.i] - pts[edges.j]
    length = np.linalg.norm(diff, axis=1)
    dev = length - edges.rest
    value = float(np.sum(dev * dev))
    safe = np.where(length > 0, length, 1.0)
    # coincident endpoints: direction undefined, take zero gradient
    coef = np.where(length > 0, 2.0 * dev / safe, 0.0)[:, None] * diff
    grad = np.zeros_like(pts)
    for axis in range(3):
        grad[:, axis] = np.bincount(edges.i, coef[:, axis], minlength=len(pts)) - np.bincount(
            edges.j, coef[:, axis], minlength=len(pts)
        )
    return value, grad


def tran_loss(translation):
    t = np.asarray(translation, dtype=np.float64)
    return float(t @ t), 2.0 * t


def sparse_loss(w_kk):
    """Mean of the stage weights (their L1 norm over the point count)."""
    w = np.asarray(w_kk, dtype=np.float64)
    return float(w.sum() / w.size), np.full(w.shape, 1.0 / w.size)


@dataclass(frozen=True)
class TargetImages:
    """Depth, validity and mask images of the target, shape (V, H, W)."""

    depth: np.ndarray
    valid: np.ndarray
    mask: np.ndarray

    @classmethod
    def render(cls, target, views, cfg):
        r = Raster(target, views, cfg)
        return cls(r.depth, r.valid, r.mask)

    def subset(self, idx):
        return TargetImages(self.depth[idx], self.valid[idx], self.mask[idx])


def _depth_term(raster, target):
    both = raster.valid & target.valid
    counts = both.reshape(len(both), -1).sum(axis=1)
    seen = counts > 0
    if not seen.any():
        raise VisibilityError("no pixel is valid in both the deformed and target depth maps")
    diff = np.where(both, np.nan_to_num(raster.depth) - np.nan_to_num(target.depth), 0.0)
    per_view = np.zeros(len(counts))
    per_view[seen] = (diff[seen] ** 2).reshape(seen.sum(), -1).sum(axis=1) / counts[seen]
    n_seen = seen.sum()
    value = float(per_view.sum() / n_seen)
    scale = np.where(seen, 1.0 / (np.maximum(counts, 1) * n_seen), 0.0)
    upstream = 2.0 * diff * scale[:, None, None]
    return value, backward_depth(raster, upstream)


def _mask_term(raster, target):
    diff = raster.mask - target.mask
    value = float(np.abs(diff).mean())
    upstream = np.where(np.abs(diff) > MASK_TIE, np.sign(diff), 0.0) / diff.size
    return value, backward_mask(raster, upstream)


def image_terms(deformed, views, cfg, target, depth=True, mask=True):
    """Depth and mask losses of ``deformed`` against pre-rendered ``target``.

    Returns ``(depth_value, depth_grad, mask_value, mask_grad)``; skipped
    terms come back as ``(0.0, None)``.
    """
    raster = Raster(deformed, views, cfg, depth=depth, mask=mask)
    dv, dg = _depth_term(raster, target) if depth else (0.0, None)
    mv, mg = _mask_term(raster, target) if mask else (0.0, None)
    return dv, dg, mv, mg


def depth_loss(deformed, target, views, cfg=RasterConfig()):
    """Mean over views of the mean squared depth difference on pixels valid in both."""
    tgt = target if isinstance(target, TargetImages) else TargetImages.render(target, views, cfg)
    value, grad, _, _ = image_terms(deformed, views, cfg, tgt, depth=True, mask=False)
    return value, grad


def mask_loss(deformed, target, views, cfg=RasterConfig()):
    """Mean absolute soft-mask difference over all pixels of all views."""
    tgt = target if isinstance(target, TargetImages) else TargetImages.render(target, views, cfg)
    _, _, value, grad = image_terms(deformed, views, cfg, tgt, depth=False, mask=True)
    return value, grad


def chamfer_loss(deformed, target_tree, target):
    """Chamfer distance (squared, both directions) as a training term.

    Only used for the loss ablation; nearest neighbours are held fixed
    when differentiating.
    """
    a = np.asarray(deformed, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    d_ab, nn_ab = target_tree.query(a)
    d_ba, nn_ba = cKDTree(a).query(b)
    value = float(np.mean(d_ab**2) + np.mean(d_ba**2))
    grad = 2.0 * (a - b[nn_ab]) / len(a)
    back = 2.0 * (a[nn_ba] - b) / len(b)
    for axis in range(3):
        grad[:, axis] += np.bincount(nn_ba, back[:, axis], minlength=len(a))
    return value, grad


def stage_loss(depth, mask, arap, tran, sparse, weights):
    total = (
        depth
        + weights.mask * mask
        + weights.arap * arap
        + weights.tran * tran
        + weights.sparse * sparse
    )
    return StageLoss(depth, mask, arap, tran, sparse, total)


def stage_factors(num_stages, stage_gamma):
    """gamma^(K - i) for i = 1..K."""
    return stage_gamma ** np.arange(num_stages - 1, -1, -1, dtype=np.float64)


def total_loss(stage_totals, stage_gamma):
    vals = np.asarray([getattr(s, "stage_total", s) for s in stage_totals], dtype=np.float64)
    return float(stage_factors(len(vals), stage_gamma) @ vals)
