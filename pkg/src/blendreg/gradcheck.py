"""Central finite-difference checks of every analytic gradient.

The rasterizer is only piecewise smooth. A point can change window cell,
cross the visibility midpoint or enter the mask radius, and the L1 mask
loss has a kink where the rendered and target masks agree. At those
events the analytic gradient (which holds the discrete structure fixed) and
a finite difference legitimately disagree. Each coordinate is therefore
probed at ``x - h``, ``x`` and ``x + h``. If the discrete structure differs
between the three, the coordinate is skipped and counted.

The error of a check is ``max_i |a_i - n_i| / max(max_i |n_i|, tiny)``
with ``a`` analytic and ``n`` numeric, taken over the compared coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import normalize
from .loss import (
    LossWeights,
    TargetImages,
    arap_loss,
    depth_loss,
    mask_loss,
    sparse_loss,
    tran_loss,
)
from .render import Raster, _gather_pairs, _window_offsets

THRESHOLD = 1e-3
DEFAULT_STEP = 1e-6
_TINY = 1e-12


@dataclass
class CheckResult:
    name: str
    error: float
    compared: int
    skipped: int

    @property
    def passed(self):
        # a check that compared nothing proves nothing
        return self.compared > 0 and self.error < THRESHOLD


@dataclass
class GradcheckReport:
    seed: int
    step: float
    results: list = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    @property
    def max_error(self):
        return max(r.error for r in self.results)

    def lines(self):
        out = [f"gradcheck seed={self.seed} step={self.step:g} threshold={THRESHOLD:g}"]
        for r in self.results:
            status = "ok" if r.passed else "FAIL"
            out.append(
                f"  {r.name:<8} max_rel_err={r.error:.3e} compared={r.compared} "
                f"skipped={r.skipped} {status}"
            )
        return out


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n)) / max(float(np.max(np.abs(n))), _TINY))


def raster_signature(points, views, cfg, target_mask=None):
    """Bytes that change whenever the rasterizer's discrete structure does."""
    r = Raster(points, views, cfg)
    H, W = r.shape[1:]
    cu = np.floor(r._u + 0.5).astype(np.int64)
    cv = np.floor(r._v + 0.5).astype(np.int64)
    vi, pi, pixel, _ = r.visible_pairs()
    reach = int(np.floor(cfg.mask_radius + 0.5))
    _, _, mpix, du, dv = _gather_pairs(r._u, r._v, _window_offsets(reach), (H, W))
    inside = du * du + dv * dv <= cfg.mask_radius**2
    parts = [cu, cv, vi, pi, pixel, mpix[inside], np.flatnonzero(inside)]
    if target_mask is not None:
        parts.append(np.sign(r.mask - target_mask).astype(np.int8))
    return b"|".join(np.ascontiguousarray(p).tobytes() for p in parts)


def finite_difference(f, x, step, signature=None):
    """Central differences of scalar ``f`` at ``x``.

    Returns ``(grad, ok)``; ``ok[i]`` is False where ``signature`` differs
    between ``x - h e_i``, ``x`` and ``x + h e_i``.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    grad = np.zeros(flat.size)
    ok = np.ones(flat.size, dtype=bool)
    base = signature(x) if signature is not None else None
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        xh, xl = hi.reshape(x.shape), lo.reshape(x.shape)
        if signature is not None and not (signature(xh) == base == signature(xl)):
            ok[i] = False
            continue
        grad[i] = (f(xh) - f(xl)) / (2.0 * step)
    return grad.reshape(x.shape), ok.reshape(x.shape)


def compare(name, analytic, numeric, ok):
    a = np.asarray(analytic)[ok]
    n = np.asarray(numeric)[ok]
    return CheckResult(name, relative_error(a, n), int(ok.sum()), int((~ok).sum()))


def make_problem(seed, num_points=16, image_size=(16, 16), num_views=2, num_stages=2):
    """Small random registration problem for gradient checks."""
    from .solver import Objective, Params, SolverConfig

    rng = np.random.default_rng(seed)
    source, _, _ = normalize(rng.normal(size=(num_points, 3)) * [1.0, 0.6, 0.4])
    target = source + rng.normal(scale=0.05, size=source.shape)
    cfg = SolverConfig(
        max_stages=num_stages,
        views=(num_views, 1),
        image_size=image_size,
        # small positive weights keep every term in the end-to-end check
        weights=LossWeights(mask=0.1, arap=0.01, tran=0.1, sparse=0.1, stage_gamma=0.8),
        knn=4,
    )
    objective = Objective(source, target, cfg)
    params = Params(num_stages, num_points, cfg.init_weight)
    params.rot[:] = rng.normal(scale=0.2, size=params.rot.shape)
    params.trans[:] = rng.normal(scale=0.05, size=params.trans.shape)
    params.logits[1:] = rng.normal(scale=1.0, size=params.logits[1:].shape)
    return objective, params, rng


def run(seed=0, step=DEFAULT_STEP):
    """All gradient checks on the problem drawn from ``seed``."""
    from .solver import Params

    objective, params, rng = make_problem(seed)
    cfg = objective.cfg
    views, rcfg = objective.views, cfg.raster
    report = GradcheckReport(seed, step)
    pts = objective.deformed_stages(params, cfg.max_stages)[-1]
    target = TargetImages.render(objective.target, views, rcfg)

    def sig_depth(x):
        return raster_signature(x, views, rcfg)

    def sig_mask(x):
        return raster_signature(x, views, rcfg, target.mask)

    _, g = depth_loss(pts, target, views, rcfg)
    n, ok = finite_difference(lambda x: depth_loss(x, target, views, rcfg)[0], pts, step, sig_depth)
    report.results.append(compare("depth", g, n, ok))

    _, g = mask_loss(pts, target, views, rcfg)
    n, ok = finite_difference(lambda x: mask_loss(x, target, views, rcfg)[0], pts, step, sig_mask)
    report.results.append(compare("mask", g, n, ok))

    _, g = arap_loss(pts, objective.edges)
    n, ok = finite_difference(lambda x: arap_loss(x, objective.edges)[0], pts, step)
    report.results.append(compare("arap", g, n, ok))

    t = rng.normal(size=3)
    _, g = tran_loss(t)
    n, ok = finite_difference(lambda x: tran_loss(x)[0], t, step)
    report.results.append(compare("tran", g, n, ok))

    w = rng.uniform(0.05, 0.95, size=len(pts))
    _, g = sparse_loss(w)
    n, ok = finite_difference(lambda x: sparse_loss(x)[0], w, step)
    report.results.append(compare("sparse", g, n, ok))

    K, M = params.K, params.M

    def total(x):
        return objective.evaluate(Params(K, M, data=x), K)[0].final_total

    def sig_total(x):
        stages = objective.deformed_stages(Params(K, M, data=x), K)
        return b"#".join(raster_signature(s, views, rcfg, target.mask) for s in stages)

    _, g = objective.evaluate(params, K)
    n, ok = finite_difference(total, params.data, step, sig_total)
    report.results.append(compare("total", g, n, ok))
    return report
