"""Evaluation metrics: Chamfer, Earth Mover's, point-wise MSE, rigid pose error.

Conventions
-----------
chamfer
    mean over ``a`` of the squared distance to the nearest point of ``b``
    plus the same term with ``a`` and ``b`` swapped.
emd
    mean Euclidean (not squared) distance under the minimum-cost perfect
    matching. Unequal sizes are equalized by resampling the smaller cloud
    with replacement from a fixed seed.
pose_error
    residuals of ``zyx`` Euler angles in degrees, wrapped to (-180, 180],
    and per-component translation residuals, pooled over a batch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import as_cloud


@dataclass
class MetricReport:
    cd: float
    emd: float | None
    mse: float | None = None
    pose_err: dict | None = None

    def to_json(self, **kw):
        return json.dumps(asdict(self), **kw)


def chamfer(a, b):
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    # squared distances recomputed from the neighbour indices, not the tree's norms
    _, i_ab = cKDTree(b).query(a)
    _, i_ba = cKDTree(a).query(b)
    d_ab = np.sum((a - b[i_ab]) ** 2, axis=1)
    d_ba = np.sum((b - a[i_ba]) ** 2, axis=1)
    return float(np.mean(d_ab) + np.mean(d_ba))


def _equalize(a, b, seed):
    if len(a) == len(b):
        return a, b
    rng = np.random.default_rng(seed)
    if len(a) < len(b):
        a = np.concatenate([a, a[rng.integers(0, len(a), len(b) - len(a))]])
    else:
        b = np.concatenate([b, b[rng.integers(0, len(b), len(a) - len(b))]])
    return a, b


def emd(a, b, resample_seed=0):
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    a, b = _equalize(a, b, resample_seed)
    if len(a) != len(b):
        raise ValueError("clouds still differ in size after resampling")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def pointwise_mse(a, b):
    """Mean over points of the squared per-point displacement."""
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"same-topology clouds must match in size: {len(a)} vs {len(b)}")
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def _matrix(t):
    return t.matrix if hasattr(t, "matrix") else np.asarray(t[0], dtype=np.float64)


def _translation(t):
    return t.translation if hasattr(t, "translation") else np.asarray(t[1], dtype=np.float64)


def pose_error(est, gt):
    """RMSE/MAE of Euler-angle and translation residuals.

    ``est`` and ``gt`` are single transforms or equal-length sequences of
    them; anything with ``.matrix``/``.translation`` or an ``(R, t)`` pair
    works.
    """
    if hasattr(est, "matrix") or (isinstance(est, tuple) and np.ndim(est[0]) == 2):
        est, gt = [est], [gt]
    if len(est) != len(gt) or not est:
        raise ValueError("pose batches must be nonempty and of equal length")
    eul_e = Rotation.from_matrix(np.stack([_matrix(t) for t in est])).as_euler("zyx", degrees=True)
    eul_g = Rotation.from_matrix(np.stack([_matrix(t) for t in gt])).as_euler("zyx", degrees=True)
    d_rot = (eul_e - eul_g + 180.0) % 360.0 - 180.0
    d_tr = np.stack([_translation(t) for t in est]) - np.stack([_translation(t) for t in gt])
    return {
        "rmse_R": float(np.sqrt(np.mean(d_rot**2))),
        "mae_R": float(np.mean(np.abs(d_rot))),
        "rmse_t": float(np.sqrt(np.mean(d_tr**2))),
        "mae_t": float(np.mean(np.abs(d_tr))),
    }


def rotation_angle_deg(R_a, R_b):
    """Geodesic angle between two rotations, in degrees."""
    c = (np.trace(np.asarray(R_a).T @ np.asarray(R_b)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def evaluate(a, b, same_topology=False, emd_limit=4096):
    """Metric report of ``a`` against ``b``; EMD is skipped above ``emd_limit`` points."""
    cd = chamfer(a, b)
    e = emd(a, b) if max(len(a), len(b)) <= emd_limit else None
    mse = pointwise_mse(a, b) if same_topology else None
    return MetricReport(cd=cd, emd=e, mse=mse)
