"""Compiled pair loops for the soft rasterizer.

Each kernel walks every (view, point, pixel-offset) triple, so nothing of
size V*M*window^2 is ever materialized. The backward kernels re-derive the
pairs and the visibility test from the cached per-pixel reductions of the
forward pass using the same expressions, so both passes agree on the
pair set exactly.

Views own disjoint pixel blocks, so the outer loops run in parallel over
views without write conflicts and with a fixed summation order.
"""

import importlib.util
import math
import os

import numba
import numpy as np
from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # skip the probe of an outdated TBB, which only emits a warning
    has_omp = importlib.util.find_spec("numba.np.ufunc.omppool") is not None
    numba.config.THREADING_LAYER = "omp" if has_omp else "workqueue"


@njit(cache=True, parallel=True)
def depth_forward(u, v, z, H, W, half, gamma):
    nv, m = u.shape
    npix = nv * H * W
    zmin = np.full(npix, np.inf)
    zmax = np.full(npix, -np.inf)
    for a in prange(nv):
        base = a * H * W
        for j in range(m):
            cu = int(math.floor(u[a, j] + 0.5))
            cv = int(math.floor(v[a, j] + 0.5))
            zj = z[a, j]
            for py in range(max(cv - half, 0), min(cv + half + 1, H)):
                for px in range(max(cu - half, 0), min(cu + half + 1, W)):
                    p = base + py * W + px
                    if zj < zmin[p]:
                        zmin[p] = zj
                    if zj > zmax[p]:
                        zmax[p] = zj

    rho_min = np.full(npix, np.inf)
    for a in prange(nv):
        base = a * H * W
        for j in range(m):
            cu = int(math.floor(u[a, j] + 0.5))
            cv = int(math.floor(v[a, j] + 0.5))
            zj = z[a, j]
            for py in range(max(cv - half, 0), min(cv + half + 1, H)):
                dv = v[a, j] - py
                for px in range(max(cu - half, 0), min(cu + half + 1, W)):
                    p = base + py * W + px
                    if zj <= 0.5 * (zmin[p] + zmax[p]):
                        du = u[a, j] - px
                        rho = du * du + dv * dv
                        if rho < rho_min[p]:
                            rho_min[p] = rho

    denom = np.zeros(npix)
    num = np.zeros(npix)
    count = np.zeros(npix, dtype=np.int64)
    for a in prange(nv):
        base = a * H * W
        for j in range(m):
            cu = int(math.floor(u[a, j] + 0.5))
            cv = int(math.floor(v[a, j] + 0.5))
            zj = z[a, j]
            for py in range(max(cv - half, 0), min(cv + half + 1, H)):
                dv = v[a, j] - py
                for px in range(max(cu - half, 0), min(cu + half + 1, W)):
                    p = base + py * W + px
                    if zj <= 0.5 * (zmin[p] + zmax[p]):
                        du = u[a, j] - px
                        e = math.exp(-(du * du + dv * dv - rho_min[p]) / gamma)
                        denom[p] += e
                        num[p] += e * zj
                        count[p] += 1

    depth = np.full(npix, np.nan)
    for p in range(npix):
        if count[p] > 0:
            depth[p] = num[p] / denom[p]
    return depth, count, zmin, zmax, rho_min, denom


@njit(cache=True, parallel=True)
def depth_backward(u, v, z, H, W, half, gamma, zmin, zmax, rho_min, denom, depth, g):
    nv, m = u.shape
    gu = np.zeros((nv, m))
    gv = np.zeros((nv, m))
    gz = np.zeros((nv, m))
    for a in prange(nv):
        base = a * H * W
        for j in range(m):
            cu = int(math.floor(u[a, j] + 0.5))
            cv = int(math.floor(v[a, j] + 0.5))
            zj = z[a, j]
            su = 0.0
            sv = 0.0
            sz = 0.0
            for py in range(max(cv - half, 0), min(cv + half + 1, H)):
                dv = v[a, j] - py
                for px in range(max(cu - half, 0), min(cu + half + 1, W)):
                    p = base + py * W + px
                    gp = g[p]
                    if gp == 0.0 or not zj <= 0.5 * (zmin[p] + zmax[p]):
                        continue
                    du = u[a, j] - px
                    w = math.exp(-(du * du + dv * dv - rho_min[p]) / gamma) / denom[p]
                    sz += gp * w
                    # d depth / d rho = -(w / gamma) (z - depth); d rho / d u = 2 du
                    g_rho = -gp * w * (zj - depth[p]) / gamma
                    su += 2.0 * g_rho * du
                    sv += 2.0 * g_rho * dv
            gu[a, j] = su
            gv[a, j] = sv
            gz[a, j] = sz
    return gu, gv, gz


@njit(cache=True, parallel=True)
def mask_forward(u, v, H, W, radius, sharpness):
    """Soft occupancy per pixel.

    The complement product is kept as (product of nonzero factors, number
    of zero factors) so the backward pass can divide a factor out exactly.
    """
    nv, m = u.shape
    npix = nv * H * W
    reach = int(math.floor(radius + 0.5))
    r2 = radius * radius
    prod = np.ones(npix)
    zeros = np.zeros(npix, dtype=np.int64)
    for a in prange(nv):
        base = a * H * W
        for j in range(m):
            cu = int(math.floor(u[a, j] + 0.5))
            cv = int(math.floor(v[a, j] + 0.5))
            for py in range(max(cv - reach, 0), min(cv + reach + 1, H)):
                dv = v[a, j] - py
                for px in range(max(cu - reach, 0), min(cu + reach + 1, W)):
                    du = u[a, j] - px
                    rho = du * du + dv * dv
                    if rho <= r2:
                        q = -math.expm1(-rho / sharpness)
                        p = base + py * W + px
                        if q > 0.0:
                            prod[p] *= q
                        else:
                            zeros[p] += 1
    mask = np.empty(npix)
    for p in range(npix):
        mask[p] = 1.0 if zeros[p] > 0 else 1.0 - prod[p]
    return mask, prod, zeros


@njit(cache=True, parallel=True)
def mask_backward(u, v, H, W, radius, sharpness, prod, zeros, g):
    nv, m = u.shape
    reach = int(math.floor(radius + 0.5))
    r2 = radius * radius
    gu = np.zeros((nv, m))
    gv = np.zeros((nv, m))
    for a in prange(nv):
        base = a * H * W
        for j in range(m):
            cu = int(math.floor(u[a, j] + 0.5))
            cv = int(math.floor(v[a, j] + 0.5))
            su = 0.0
            sv = 0.0
            for py in range(max(cv - reach, 0), min(cv + reach + 1, H)):
                dv = v[a, j] - py
                for px in range(max(cu - reach, 0), min(cu + reach + 1, W)):
                    p = base + py * W + px
                    gp = g[p]
                    if gp == 0.0:
                        continue
                    du = u[a, j] - px
                    rho = du * du + dv * dv
                    if rho > r2:
                        continue
                    q = -math.expm1(-rho / sharpness)
                    # occupancy = 1 - prod(q); d/dq_j = -(product over the other points)
                    if q > 0.0:
                        others = 0.0 if zeros[p] > 0 else prod[p] / q
                    else:
                        others = prod[p] if zeros[p] == 1 else 0.0
                    # dq/drho = (1 - q) / sharpness
                    g_rho = -gp * others * (1.0 - q) / sharpness
                    su += 2.0 * g_rho * du
                    sv += 2.0 * g_rho * dv
            gu[a, j] = su
            gv[a, j] = sv
    return gu, gv
