"""Soft multi-view rasterization of point clouds into depth and mask images.

Cameras are orthographic. Pixel centres sit on integer coordinates, so a
camera-frame point ``(x, y, z)`` lands at::

    u = (x / extent + 0.5) * W - 0.5
    v = (y / extent + 0.5) * H - 0.5

and ``z`` grows away from the camera. Each pixel gathers the points whose
nearest pixel lies in its ``window x window`` neighbourhood, drops the ones
behind the midpoint of the gathered depth range, and averages the rest
with softmax weights on squared pixel distance. The mask is a soft
occupancy ``1 - prod(1 - exp(-rho / sharpness))`` over points within
``mask_radius`` pixels.

All views of a call are rasterized together. The forward pass keeps the
per-pixel reductions (depth range, nearest distance, softmax normalizer,
log of the complement product) so the backward pass can revisit each
pair without storing it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import as_cloud


@dataclass(frozen=True)
class RasterConfig:
    window: int = 5
    depth_sharpness: float = 2.0
    mask_sharpness: float = 1.0
    mask_radius: float = 3.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd integer, got {self.window}")
        if self.depth_sharpness <= 0 or self.mask_sharpness <= 0:
            raise ValueError("sharpness values must be strictly positive")
        if self.mask_radius <= 0:
            raise ValueError("mask_radius must be positive")


@dataclass(frozen=True)
class CameraView:
    """World-to-camera pose plus an orthographic viewing window."""

    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple = (64, 64)
    ortho_extent: float = 1.2
    azimuth: float = 0.0
    elevation: float = 0.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")
        H, W = (int(s) for s in self.image_size)
        if H < 4 or W < 4:
            raise ValueError(f"image size must be at least 4x4, got {H}x{W}")
        if self.ortho_extent <= 0:
            raise ValueError("ortho_extent must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "image_size", (H, W))

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @property
    def forward(self):
        return self.rotation[2]


@dataclass(frozen=True)
class DepthImage:
    values: np.ndarray  # NaN where invalid
    validity: np.ndarray


@dataclass(frozen=True)
class MaskImage:
    values: np.ndarray


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """World-to-camera (R, t) for a camera at ``eye`` facing ``target``.

    Camera axes: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("up vector is parallel to the viewing direction")
    right /= norm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ eye


def sample_views(n_az, n_el, radius=1.5, image_size=(64, 64), ortho_extent=1.2):
    """Cameras on a sphere around the origin.

    Azimuths are ``2*pi*i/n_az``; elevations are the midpoints of ``n_el``
    equal slices of (-pi/2, pi/2), so the poles are never hit. The single
    view of a 1x1 grid sits on +z looking down -z.
    """
    if n_az < 1 or n_el < 1:
        raise ValueError("n_az and n_el must be >= 1")
    views = []
    for j in range(n_el):
        el = -np.pi / 2 + np.pi * (j + 0.5) / n_el
        for i in range(n_az):
            az = 2.0 * np.pi * i / n_az
            eye = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
            R, t = look_at(eye)
            views.append(CameraView(R, t, image_size, ortho_extent, az, el))
    return views


def _stack_views(views):
    views = list(views)
    if not views:
        raise ValueError("at least one view is required")
    size = views[0].image_size
    if any(v.image_size != size for v in views):
        raise ValueError("all views of one rasterization must share an image size")
    Rs = np.stack([v.rotation for v in views])
    ts = np.stack([v.translation for v in views])
    ext = np.array([v.ortho_extent for v in views], dtype=np.float64)
    return Rs, ts, ext, size


def _project_all(points, Rs, ts, ext, size):
    H, W = size
    cam = np.einsum("vij,mj->vmi", Rs, points) + ts[:, None, :]
    u = (cam[..., 0] / ext[:, None] + 0.5) * W - 0.5
    v = (cam[..., 1] / ext[:, None] + 0.5) * H - 0.5
    return np.ascontiguousarray(u), np.ascontiguousarray(v), np.ascontiguousarray(cam[..., 2])


def project(points, view):
    """Pixel coordinates (M, 2) and camera depths (M,) of every point."""
    pts = as_cloud(points)
    Rs, ts, ext, size = _stack_views([view])
    u, v, z = _project_all(pts, Rs, ts, ext, size)
    return np.stack([u[0], v[0]], axis=1), z[0]


def _window_offsets(half):
    offs = np.arange(-half, half + 1)
    ox, oy = np.meshgrid(offs, offs, indexing="xy")
    return ox.ravel(), oy.ravel()


def _gather_pairs(u, v, offsets, size):
    """(view, point, pixel, du, dv) for every pixel at ``offsets`` from a point's cell.

    ``du``/``dv`` are the point's pixel coordinates minus the pixel centre.
    """
    H, W = size
    nv, m = u.shape
    ox, oy = offsets
    n_off = len(ox)
    cu = np.floor(u + 0.5).astype(np.int64)
    cv = np.floor(v + 0.5).astype(np.int64)
    px = (cu[..., None] + ox).ravel()
    py = (cv[..., None] + oy).ravel()
    du = (u[..., None] - (cu[..., None] + ox)).ravel()
    dv = (v[..., None] - (cv[..., None] + oy)).ravel()
    keep = (px >= 0) & (px < W) & (py >= 0) & (py < H)
    idx = np.flatnonzero(keep)
    vm = idx // n_off
    vi = vm // m
    pi = vm - vi * m
    pixel = vi * (H * W) + py[idx] * W + px[idx]
    return vi, pi, pixel, du[idx], dv[idx]


class Raster:
    """Forward result of rasterizing one cloud into a set of views.

    ``depth``/``valid``/``mask`` have shape (V, H, W). Per-pixel
    reductions are kept for :func:`backward_depth` and
    :func:`backward_mask`.
    """

    def __init__(self, points, views, cfg, depth=True, mask=True):
        self.points = as_cloud(points)
        self.views = list(views)
        self.cfg = cfg
        Rs, ts, ext, size = _stack_views(self.views)
        self._Rs = Rs
        H, W = size
        self.shape = (len(self.views), H, W)
        self._u, self._v, self._z = _project_all(self.points, Rs, ts, ext, size)
        # d(u, v)/d(x, y) in camera frame
        self._su = W / ext
        self._sv = H / ext
        self.depth = self.valid = self.mask = None
        if depth:
            d, count, *self._dcache = _kernels.depth_forward(
                self._u, self._v, self._z, H, W, cfg.window // 2, float(cfg.depth_sharpness)
            )
            self._depth_flat = d
            self.depth = d.reshape(self.shape)
            self.valid = (count > 0).reshape(self.shape)
        if mask:
            c, *self._mcache = _kernels.mask_forward(
                self._u, self._v, H, W, float(cfg.mask_radius), float(cfg.mask_sharpness)
            )
            self.mask = c.reshape(self.shape)

    def visible_pairs(self):
        """(view, point, flat pixel, weight) of every visible pair, recomputed in numpy."""
        H, W = self.shape[1:]
        vi, pi, pixel, du, dv = _gather_pairs(
            self._u, self._v, _window_offsets(self.cfg.window // 2), (H, W)
        )
        zmin, zmax, rho_min, denom = self._dcache
        zp = self._z[vi, pi]
        keep = zp <= 0.5 * (zmin[pixel] + zmax[pixel])
        vi, pi, pixel, du, dv = vi[keep], pi[keep], pixel[keep], du[keep], dv[keep]
        rho = du * du + dv * dv
        w = np.exp(-(rho - rho_min[pixel]) / self.cfg.depth_sharpness) / denom[pixel]
        return vi, pi, pixel, w

    def _to_world(self, gu, gv, gz):
        g_cam = np.stack([gu * self._su[:, None], gv * self._sv[:, None], gz], axis=-1)
        # camera = R p + t, so dL/dp = R^T dL/dcamera, summed over views in order
        return np.einsum("vij,vmi->mj", self._Rs, g_cam)

    def _check_upstream(self, grad, what):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ValueError(f"{what} gradient has shape {grad.shape}, raster is {self.shape}")
        return np.ascontiguousarray(grad.reshape(-1))


def backward_depth(raster, grad_depth):
    """Per-point (M, 3) gradient from per-pixel depth gradients.

    Gradients on invalid pixels are ignored. Visibility and the window
    membership are held fixed.
    """
    if raster.depth is None:
        raise ValueError("raster was built without a depth pass")
    g = raster._check_upstream(grad_depth, "depth")
    g = np.where(raster.valid.reshape(-1), g, 0.0)
    H, W = raster.shape[1:]
    zmin, zmax, rho_min, denom = raster._dcache
    gu, gv, gz = _kernels.depth_backward(
        raster._u, raster._v, raster._z, H, W, raster.cfg.window // 2,
        float(raster.cfg.depth_sharpness), zmin, zmax, rho_min, denom, raster._depth_flat, g,
    )
    return raster._to_world(gu, gv, gz)


def backward_mask(raster, grad_mask):
    """Per-point (M, 3) gradient of the soft mask; z receives none."""
    if raster.mask is None:
        raise ValueError("raster was built without a mask pass")
    g = raster._check_upstream(grad_mask, "mask")
    H, W = raster.shape[1:]
    gu, gv = _kernels.mask_backward(
        raster._u, raster._v, H, W, float(raster.cfg.mask_radius),
        float(raster.cfg.mask_sharpness), *raster._mcache, g,
    )
    return raster._to_world(gu, gv, np.zeros_like(gu))


def render_depth(points, view, cfg=RasterConfig()):
    r = Raster(points, [view], cfg, depth=True, mask=False)
    return DepthImage(r.depth[0], r.valid[0])


def render_mask(points, view, cfg=RasterConfig()):
    r = Raster(points, [view], cfg, depth=False, mask=True)
    return MaskImage(r.mask[0])


def visible_set(pixel_xy, z, pixel, cfg=RasterConfig()):
    """Indices of points visible at ``pixel`` = (column, row).

    ``pixel_xy`` and ``z`` are the outputs of :func:`project`.
    """
    pixel_xy = np.asarray(pixel_xy, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    cells = np.floor(pixel_xy + 0.5).astype(np.int64)
    half = cfg.window // 2
    near = np.all(np.abs(cells - np.asarray(pixel, dtype=np.int64)) <= half, axis=1)
    idx = np.flatnonzero(near)
    if idx.size == 0:
        return idx
    mid = 0.5 * (z[idx].min() + z[idx].max())
    return idx[z[idx] <= mid]


def hard_mask(mask, threshold=0.5):
    """Binary export of a soft mask, for visualization only."""
    return np.asarray(mask.values if isinstance(mask, MaskImage) else mask) >= threshold


# --- image export -----------------------------------------------------------

def write_pfm(path, image):
    """Little-endian single-channel PFM (rows stored bottom-up)."""
    img = np.asarray(image, dtype="<f4")
    H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a single-channel PFM file")
        W, H = (int(s) for s in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != W * H:
        raise ValueError(f"{path}: expected {W * H} floats, found {data.size}")
    return data.reshape(H, W)[::-1].astype(np.float32)


def write_depth_png(path, depth, sidecar=True):
    """16-bit PNG of valid depths mapped affinely onto 1..65535 (0 = invalid).

    With ``sidecar`` the mapping goes to ``<path>.txt`` holding ``zmin zmax``.
    """
    from PIL import Image

    img = depth.values if isinstance(depth, DepthImage) else np.asarray(depth)
    valid = np.isfinite(img)
    lo, hi = (float(img[valid].min()), float(img[valid].max())) if valid.any() else (0.0, 0.0)
    span = hi - lo if hi > lo else 1.0
    out = np.zeros(img.shape, dtype=np.uint16)
    out[valid] = np.round(1 + (img[valid] - lo) / span * 65534).astype(np.uint16)
    Image.fromarray(out).save(path)
    if not sidecar:
        return lo, hi
    with open(str(path) + ".txt", "w") as f:
        f.write("# depth = zmin + (pixel - 1) / 65534 * (zmax - zmin); pixel 0 is invalid\n")
        f.write(f"{lo!r} {hi!r}\n")
    return lo, hi


def write_mask_png(path, mask):
    from PIL import Image

    img = mask.values if isinstance(mask, MaskImage) else np.asarray(mask)
    Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)).save(path)
