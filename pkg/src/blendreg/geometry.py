"""Point clouds, rigid transforms and the blended-rigid deformation model.

A deformation is a per-point convex combination of rigid motions built
stage by stage::

    S^1 = psi_1(S)
    S^k = (1 - w_k^k) * S^{k-1} + w_k^k * psi_k(S)

with the cumulative weights rescaled at every stage so that each point's
weights keep summing to one. The rigid-composed mode drops the weights and
chains the motions instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BLENDED = "blended"
RIGID = "rigid"

# below this angle the exponential map switches to its Taylor expansion
SMALL_ANGLE = 1e-4


def as_cloud(points, name="cloud"):
    """Validate and return an (M, 3) float64 array."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name}: expected an (M, 3) array, got shape {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError(f"{name}: point cloud is empty")
    if not np.all(np.isfinite(pts)):
        bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
        raise ValueError(f"{name}: non-finite coordinate at point {bad}")
    return pts


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(rvec, jacobian=False):
    """Rotation matrix of an axis-angle vector.

    With ``jacobian=True`` also returns ``dR`` of shape (3, 3, 3) where
    ``dR[i]`` is the derivative of R with respect to ``rvec[i]``.
    """
    r = np.asarray(rvec, dtype=np.float64)
    theta = np.linalg.norm(r)
    K = skew(r)
    eye = np.eye(3)
    if theta < SMALL_ANGLE:
        R = eye + K + 0.5 * K @ K
        if not jacobian:
            return R
        dR = np.empty((3, 3, 3))
        for i in range(3):
            Ei = skew(eye[i])
            dR[i] = Ei + 0.5 * (Ei @ K + K @ Ei)
        return R, dR

    s, c = np.sin(theta), np.cos(theta)
    R = eye + (s / theta) * K + ((1.0 - c) / theta**2) * K @ K
    if not jacobian:
        return R
    # Gallego & Yezzi closed form for the derivative of the exponential map
    dR = np.empty((3, 3, 3))
    I_minus_R = eye - R
    for i in range(3):
        dR[i] = (r[i] * K + skew(np.cross(r, I_minus_R[:, i]))) @ R / theta**2
    return R, dR


def rotation_to_axis_angle(R):
    """Inverse of :func:`rodrigues` for angles in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < SMALL_ANGLE:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off sym(R) + I
        B = (R + R.T) / 4.0 + np.eye(3) / 2.0
        axis = B[np.argmax(np.diag(B))]
        axis = axis / np.linalg.norm(axis)
        # the tiny antisymmetric part still fixes the sign below pi
        anti = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if anti @ axis < 0:
            axis = -axis
        return theta * axis
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta * axis / (2.0 * np.sin(theta))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (axis-angle, radians) followed by translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tr))):
            raise ValueError("RigidTransform parameters must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t):
        return cls(rotation_to_axis_angle(R), t)

    @property
    def matrix(self):
        return rodrigues(self.rotation)

    def homogeneous(self):
        T = np.eye(4)
        T[:3, :3] = self.matrix
        T[:3, 3] = self.translation
        return T

    def compose(self, inner):
        """``self ∘ inner``: apply ``inner`` first."""
        R_o, R_i = self.matrix, inner.matrix
        return RigidTransform.from_matrix(R_o @ R_i, R_o @ inner.translation + self.translation)


def apply_rigid(transform, points):
    pts = np.asarray(points, dtype=np.float64)
    return pts @ transform.matrix.T + transform.translation


@dataclass(frozen=True)
class DeformationState:
    """All stages of a deformation.

    ``weights`` holds the cumulative skinning weights w_r^k as an (M, k)
    matrix in blended mode and is ``None`` in rigid-composed mode.
    """

    transforms: tuple
    weights: np.ndarray | None = None
    mode: str = BLENDED

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if self.mode not in (BLENDED, RIGID):
            raise ValueError(f"unknown deformation mode {self.mode!r}")
        if self.mode == RIGID:
            if self.weights is not None:
                raise ValueError("rigid-composed state carries no weights")
            return
        if self.weights is None:
            raise ValueError("blended state needs skinning weights")
        W = np.asarray(self.weights, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] != len(self.transforms):
            raise ValueError(
                f"weights shape {W.shape} does not match {len(self.transforms)} stages"
            )
        object.__setattr__(self, "weights", W)

    @property
    def num_stages(self):
        return len(self.transforms)

    @classmethod
    def first_stage(cls, transform, num_points, mode=BLENDED):
        if mode == RIGID:
            return cls((transform,), None, RIGID)
        return cls((transform,), np.ones((num_points, 1)), BLENDED)


def _check_stage_weights(w_kk, num_points):
    w = np.asarray(w_kk, dtype=np.float64)
    if w.ndim == 0:
        w = np.full(num_points, float(w))
    if w.shape != (num_points,):
        raise ValueError(f"stage weights have shape {w.shape}, expected ({num_points},)")
    if np.any(~np.isfinite(w)) or np.any(w < 0.0) or np.any(w > 1.0):
        raise ValueError("stage weights must lie in [0, 1]")
    return w


def advance_stage(state, psi_k, w_kk, source, prev_deformed):
    """Introduce stage k: rescale old weights and blend in ``psi_k(source)``.

    Returns the new state and S^k. In rigid-composed mode ``w_kk`` is
    ignored and S^k = psi_k(S^{k-1}).
    """
    source = np.asarray(source, dtype=np.float64)
    prev = np.asarray(prev_deformed, dtype=np.float64)
    if source.shape != prev.shape:
        raise ValueError("source and previous deformed cloud differ in shape")
    if state.mode == RIGID:
        new_state = DeformationState(state.transforms + (psi_k,), None, RIGID)
        return new_state, apply_rigid(psi_k, prev)

    M = source.shape[0]
    if state.weights.shape[0] != M:
        raise ValueError(f"state has {state.weights.shape[0]} points, source has {M}")
    w = _check_stage_weights(w_kk, M)
    scaled = state.weights * (1.0 - w)[:, None]
    weights = np.concatenate([scaled, w[:, None]], axis=1)
    deformed = (1.0 - w)[:, None] * prev + w[:, None] * apply_rigid(psi_k, source)
    return DeformationState(state.transforms + (psi_k,), weights, BLENDED), deformed


def apply_deformation(state, source):
    source = np.asarray(source, dtype=np.float64)
    if state.num_stages < 1:
        raise ValueError("deformation has no stages")
    if state.mode == RIGID:
        out = source
        for psi in state.transforms:
            out = apply_rigid(psi, out)
        return out
    if state.weights.shape[0] != source.shape[0]:
        raise ValueError(
            f"weights cover {state.weights.shape[0]} points but source has {source.shape[0]}"
        )
    out = np.zeros_like(source)
    for r, psi in enumerate(state.transforms):
        out += state.weights[:, r : r + 1] * apply_rigid(psi, source)
    return out


def composed_transform(state):
    """Net rigid motion psi_K ∘ ... ∘ psi_1 of a rigid-composed state."""
    net = RigidTransform.identity()
    for psi in state.transforms:
        net = psi.compose(net)
    return net


def normalize(points):
    """Center a cloud and scale it into the radius-0.5 sphere.

    Returns ``(normalized, centroid, scale)`` with
    ``original = normalized * scale + centroid``.
    """
    pts = as_cloud(points)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if radius <= 1e-12 * max(1.0, np.abs(pts).max()):
        raise ValueError("cannot normalize a degenerate cloud (all points coincide)")
    scale = 2.0 * radius
    return centered / scale, centroid, scale


def denormalize(points, centroid, scale):
    return np.asarray(points, dtype=np.float64) * scale + centroid
