"""Per-pair registration by first-order optimization of a staged deformation.

Variables per stage k: an axis-angle rotation, a translation and (for
k >= 2 in blended mode) one logit per point whose logistic value is the
stage weight w_k^k. With warm-up, stage k+1 is switched on after
``iterations_per_stage`` iterations while every earlier stage keeps
training.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .geometry import BLENDED, RIGID, DeformationState, RigidTransform, rodrigues
from .loss import (
    LossBreakdown,
    LossWeights,
    TargetImages,
    arap_loss,
    build_edges,
    chamfer_loss,
    image_terms,
    sparse_loss,
    stage_factors,
    stage_loss,
    tran_loss,
)
from .metrics import MetricReport, evaluate
from .render import RasterConfig, sample_views

MULTIVIEW = "multiview"
CHAMFER = "chamfer"


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class SolverConfig:
    max_stages: int = 7
    iterations_per_stage: int = 300
    step_size: float = 5e-3
    weight_step_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    min_step_fraction: float = 0.05
    clip_norm: float = 1.0
    warmup: bool = True
    mode: str = BLENDED
    views: tuple = (11, 11)
    view_batch: int | None = None
    image_size: tuple = (64, 64)
    ortho_extent: float = 1.2
    camera_radius: float = 1.5
    raster: RasterConfig = field(default_factory=RasterConfig)
    weights: LossWeights | None = None
    objective: str = MULTIVIEW
    freeze_earlier: bool = False
    init_weight: float = 0.1
    knn: int = 8
    seed: int = 0
    rel_tol: float = 1e-6
    patience: int = 0
    # stop once every active stage's data residual is at most this
    data_tol: float = 1e-20

    def __post_init__(self):
        if self.max_stages < 1:
            raise ValueError("max_stages must be >= 1")
        if self.iterations_per_stage < 1:
            raise ValueError("iterations_per_stage must be >= 1")
        if self.step_size <= 0 or self.weight_step_scale <= 0:
            raise ValueError("step_size and weight_step_scale must be positive")
        if self.mode not in (BLENDED, RIGID):
            raise ValueError(f"mode must be {BLENDED!r} or {RIGID!r}")
        if self.objective not in (MULTIVIEW, CHAMFER):
            raise ValueError(f"objective must be {MULTIVIEW!r} or {CHAMFER!r}")
        if not 0.0 < self.init_weight < 1.0:
            raise ValueError("init_weight must lie strictly inside (0, 1)")
        if len(self.views) != 2 or min(self.views) < 1:
            raise ValueError("views must be a pair of positive counts")
        if self.view_batch is not None and self.view_batch < 1:
            raise ValueError("view_batch must be positive")

    @property
    def loss_weights(self):
        if self.weights is not None:
            return self.weights
        return LossWeights.rigid() if self.mode == RIGID else LossWeights()

    def to_dict(self):
        d = asdict(self)
        d["weights"] = asdict(self.loss_weights)
        return d


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    return math.log(p / (1.0 - p))


class Params:
    """Flat parameter vector with per-stage views."""

    def __init__(self, num_stages, num_points, init_weight=0.1, data=None):
        self.K, self.M = num_stages, num_points
        size = num_stages * (6 + num_points)
        if data is None:
            data = np.zeros(size)
            data[6 * num_stages :] = logit(init_weight)
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.shape != (size,):
            raise ValueError("parameter vector has the wrong size")

    @property
    def rot(self):
        return self.data[: 3 * self.K].reshape(self.K, 3)

    @property
    def trans(self):
        return self.data[3 * self.K : 6 * self.K].reshape(self.K, 3)

    @property
    def logits(self):
        return self.data[6 * self.K :].reshape(self.K, self.M)

    def copy(self):
        return Params(self.K, self.M, data=self.data.copy())

    def mask(self, active, only_last=False, with_weights=True):
        """Boolean mask over ``data`` of the trainable entries."""
        m = Params(self.K, self.M, data=np.zeros(self.data.size))
        first = active - 1 if only_last else 0
        m.rot[first:active] = 1.0
        m.trans[first:active] = 1.0
        if with_weights:
            # stage 1 weights are fixed to one
            m.logits[max(first, 1) : active] = 1.0
        return m.data > 0

    def transforms(self, active):
        return tuple(RigidTransform(self.rot[k], self.trans[k]) for k in range(active))

    def state(self, active, mode):
        tf = self.transforms(active)
        if mode == RIGID:
            return DeformationState(tf, None, RIGID)
        w = np.ones((self.M, 1))
        for k in range(1, active):
            wk = sigmoid(self.logits[k])
            w = np.concatenate([w * (1.0 - wk)[:, None], wk[:, None]], axis=1)
        return DeformationState(tf, w, BLENDED)


class Objective:
    """Stage-weighted registration loss of one normalized pair and its gradient."""

    def __init__(self, source, target, cfg):
        self.source = geometry.as_cloud(source, "source")
        self.target = geometry.as_cloud(target, "target")
        self.cfg = cfg
        self.weights = cfg.loss_weights
        n_az, n_el = cfg.views
        self.views = sample_views(n_az, n_el, cfg.camera_radius, cfg.image_size, cfg.ortho_extent)
        self.edges = build_edges(self.source, cfg.knn)
        if cfg.objective == CHAMFER:
            self.tree = cKDTree(self.target)
            self.target_images = None
        else:
            self.target_images = TargetImages.render(self.target, self.views, cfg.raster)

    def _data_terms(self, pts, view_idx):
        if self.cfg.objective == CHAMFER:
            value, grad = chamfer_loss(pts, self.tree, self.target)
            return value, grad, 0.0, np.zeros_like(pts)
        views, tgt = self.views, self.target_images
        if view_idx is not None:
            views = [views[i] for i in view_idx]
            tgt = tgt.subset(view_idx)
        need_mask = self.weights.mask > 0
        dv, dg, mv, mg = image_terms(pts, views, self.cfg.raster, tgt, depth=True, mask=need_mask)
        return dv, dg, mv, (mg if mg is not None else np.zeros_like(pts))

    def deformed_stages(self, params, active):
        S = self.source
        out = []
        if self.cfg.mode == RIGID:
            cur = S
            for k in range(active):
                cur = cur @ rodrigues(params.rot[k]).T + params.trans[k]
                out.append(cur)
            return out
        for k in range(active):
            P = S @ rodrigues(params.rot[k]).T + params.trans[k]
            if k == 0:
                cur = P
            else:
                w = sigmoid(params.logits[k])[:, None]
                cur = (1.0 - w) * cur + w * P
            out.append(cur)
        return out

    def evaluate(self, params, active, view_idx=None):
        """LossBreakdown and flat gradient for the first ``active`` stages."""
        cfg, lw = self.cfg, self.weights
        S = self.source
        M = len(S)
        rigid = cfg.mode == RIGID
        rots = [rodrigues(params.rot[k], jacobian=True) for k in range(active)]
        ws = [None] + [sigmoid(params.logits[k]) for k in range(1, active)]

        # forward through the recurrence
        P, stages_pts = [], []
        cur = S
        for k in range(active):
            R = rots[k][0]
            if rigid:
                cur = cur @ R.T + params.trans[k]
                P.append(None)
            else:
                Pk = S @ R.T + params.trans[k]
                P.append(Pk)
                cur = Pk if k == 0 else (1.0 - ws[k])[:, None] * cur + ws[k][:, None] * Pk
            stages_pts.append(cur)

        rows, dS = [], []
        for k in range(active):
            pts = stages_pts[k]
            dv, dg, mv, mg = self._data_terms(pts, view_idx)
            if lw.arap > 0:
                av, ag = arap_loss(pts, self.edges)
            else:
                av, ag = 0.0, 0.0
            tv, _ = tran_loss(params.trans[k])
            if rigid:
                sv = 0.0
            else:
                sv = 1.0 if k == 0 else sparse_loss(ws[k])[0]
            rows.append(stage_loss(dv, mv, av, tv, sv, lw))
            dS.append(dg + lw.mask * mg + lw.arap * ag)
        factors = stage_factors(active, lw.stage_gamma)
        final = float(factors @ np.array([r.stage_total for r in rows]))
        breakdown = LossBreakdown(tuple(rows), final)

        grad = Params(params.K, params.M, data=np.zeros(params.data.size))
        carry = 0.0
        for k in range(active - 1, -1, -1):
            f = factors[k]
            G = f * dS[k] + carry
            R, dR = rots[k]
            if rigid:
                prev = stages_pts[k - 1] if k > 0 else S
                gR = G.T @ prev
                gt = G.sum(axis=0)
                carry = G @ R
            else:
                if k == 0:
                    gP = G
                else:
                    w = ws[k]
                    gw = (G * (P[k] - stages_pts[k - 1])).sum(axis=1) + f * lw.sparse / M
                    grad.logits[k] = gw * w * (1.0 - w)
                    gP = w[:, None] * G
                    carry = (1.0 - w)[:, None] * G
                gR = gP.T @ S
                gt = gP.sum(axis=0)
            grad.trans[k] = gt + f * lw.tran * 2.0 * params.trans[k]
            grad.rot[k] = np.einsum("ij,kij->k", gR, dR)
        return breakdown, grad.data


def clip_by_norm(grad, max_norm):
    norm = float(np.linalg.norm(grad))
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grad
    return grad * (max_norm / norm)


class Adam:
    """Bias-corrected Adam with a step counter per entry.

    Entries that join late (new stages) get their own bias correction.
    """

    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = np.zeros(size)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, x, grad, lr, active=None):
        active = np.ones(x.shape, bool) if active is None else active
        g = np.where(active, grad, 0.0)
        self.t = self.t + active
        self.m = np.where(active, self.beta1 * self.m + (1 - self.beta1) * g, self.m)
        self.v = np.where(active, self.beta2 * self.v + (1 - self.beta2) * g * g, self.v)
        t = np.maximum(self.t, 1)
        m_hat = self.m / (1 - self.beta1**t)
        v_hat = self.v / (1 - self.beta2**t)
        return np.where(active, x - lr * m_hat / (np.sqrt(v_hat) + self.eps), x)


def step(params, grad, optimizer, lr, cfg, active=None):
    """One clipped Adam update of ``params`` (a :class:`Params` or an array)."""
    data = params.data if isinstance(params, Params) else np.asarray(params, dtype=np.float64)
    if active is not None:
        grad = np.where(active, grad, 0.0)
    if isinstance(params, Params) and cfg.weight_step_scale != 1.0:
        scale = np.ones(data.size)
        scale[6 * params.K :] = cfg.weight_step_scale
        lr = lr * scale
    new = optimizer.step(data, clip_by_norm(grad, cfg.clip_norm), lr, active)
    if isinstance(params, Params):
        return Params(params.K, params.M, data=new)
    return new


def cosine_step(cfg, it, length):
    lo = cfg.min_step_fraction
    return cfg.step_size * (lo + (1.0 - lo) * 0.5 * (1.0 + math.cos(math.pi * it / length)))


def initialize_stage(state, k, num_points, init_weight=0.1, source=None, prev_deformed=None):
    """Append stage ``k`` at the identity with uniform weight ``init_weight``.

    With ``source``/``prev_deformed`` given, also returns S^k.
    """
    if k != state.num_stages + 1:
        raise ValueError(f"state has {state.num_stages} stages; cannot initialize stage {k}")
    psi = RigidTransform.identity()
    w = np.full(num_points, init_weight)
    if source is None:
        src = np.zeros((num_points, 3))
        new_state, _ = geometry.advance_stage(state, psi, w, src, src)
        return new_state
    return geometry.advance_stage(state, psi, w, source, prev_deformed)


@dataclass
class TraceRow:
    iteration: int
    active_stages: int
    breakdown: LossBreakdown
    best_loss: float


@dataclass
class RegistrationResult:
    final_state: DeformationState
    deformed: np.ndarray
    loss_trace: list
    metrics: MetricReport
    wall_time: float
    pose: RigidTransform | None = None
    normalization: dict = field(default_factory=dict)
    initial_metrics: MetricReport | None = None
    config: dict = field(default_factory=dict)

    @property
    def best_loss(self):
        return self.loss_trace[-1].best_loss if self.loss_trace else float("nan")


TRACE_COLUMNS = (
    "iteration", "active_stages", "stage", "depth", "mask", "arap", "tran", "sparse",
    "stage_total", "final_total", "best_loss",
)


def trace_csv(trace, config=None):
    """CSV text with one row per active stage per iteration."""
    buf = _io.StringIO()
    if config is not None:
        buf.write("# config: " + json.dumps(config, sort_keys=True, default=list) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for row in trace:
        for s in row.breakdown.as_rows():
            writer.writerow([
                row.iteration, row.active_stages, s["stage"],
                *(repr(float(s[c])) for c in ("depth", "mask", "arap", "tran", "sparse", "stage_total")),
                repr(row.breakdown.final_total), repr(row.best_loss),
            ])
    return buf.getvalue()


def _phases(cfg):
    K, T = cfg.max_stages, cfg.iterations_per_stage
    if cfg.warmup:
        return [(n, T) for n in range(1, K + 1)]
    return [(K, T * K)]


def _dump(breakdown, params, active):
    return {
        "active_stages": active,
        "stages": breakdown.as_rows(),
        "rotations": params.rot[:active].tolist(),
        "translations": params.trans[:active].tolist(),
        "nonfinite_params": int((~np.isfinite(params.data)).sum()),
    }


def optimize(objective, cfg, callback=None):
    """Run the curriculum on an :class:`Objective`; returns (best params, trace)."""
    M = len(objective.source)
    params = Params(cfg.max_stages, M, cfg.init_weight)
    adam = Adam(params.data.size, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    n_views = len(objective.views)
    trace = []
    it_global = 0
    best_params = params.copy()
    converged = False
    for active, length in _phases(cfg):
        if converged:
            break
        trainable = params.mask(active, cfg.freeze_earlier, cfg.mode == BLENDED)
        best = math.inf
        best_params = params.copy()
        stale = 0
        for it in range(length):
            view_idx = None
            if cfg.view_batch is not None and cfg.view_batch < n_views:
                view_idx = np.sort(rng.choice(n_views, cfg.view_batch, replace=False))
            breakdown, grad = objective.evaluate(params, active, view_idx)
            if not (math.isfinite(breakdown.final_total) and np.all(np.isfinite(grad))):
                raise NonFiniteLossError(
                    f"non-finite loss at iteration {it_global} with {active} active stages",
                    _dump(breakdown, params, active),
                )
            if breakdown.final_total < best:
                improved = best - breakdown.final_total > cfg.rel_tol * abs(breakdown.final_total)
                best = breakdown.final_total
                best_params = params.copy()
                stale = 0 if improved else stale + 1
            else:
                stale += 1
            trace.append(TraceRow(it_global, active, breakdown, best))
            if callback is not None:
                callback(trace[-1])
            it_global += 1
            if all(r.depth + r.mask <= cfg.data_tol for r in breakdown.stages):
                converged = True
                break
            if cfg.patience and stale >= cfg.patience:
                break
            lr = cosine_step(cfg, it, length)
            params = step(params, grad, adam, lr, cfg, trainable)
        # carry the best iterate of this phase into the next one
        params = best_params.copy()
    return best_params, trace


def register(source, target, cfg=SolverConfig(), callback=None):
    """Register ``source`` onto ``target``; both are (M, 3)/(N, 3) arrays."""
    t0 = time.perf_counter()
    source = geometry.as_cloud(source, "source")
    target = geometry.as_cloud(target, "target")
    src_n, c_s, s_s = geometry.normalize(source)
    tgt_n, c_t, s_t = geometry.normalize(target)
    objective = Objective(src_n, tgt_n, cfg)
    best, trace = optimize(objective, cfg, callback)

    state = best.state(cfg.max_stages, cfg.mode)
    deformed_n = geometry.apply_deformation(state, src_n)
    deformed = geometry.denormalize(deformed_n, c_t, s_t)
    same = len(source) == len(target)
    metrics = evaluate(deformed, target, same_topology=same)
    initial = evaluate(geometry.denormalize(src_n, c_t, s_t), target, same_topology=same)

    pose = None
    if cfg.mode == RIGID:
        net = geometry.composed_transform(state)
        ratio = s_t / s_s
        R = net.matrix
        pose = RigidTransform.from_matrix(R, c_t + s_t * net.translation - ratio * R @ c_s)
    return RegistrationResult(
        final_state=state,
        deformed=deformed,
        loss_trace=trace,
        metrics=metrics,
        wall_time=time.perf_counter() - t0,
        pose=pose,
        normalization={"source_centroid": c_s, "source_scale": s_s,
                       "target_centroid": c_t, "target_scale": s_t},
        initial_metrics=initial,
        config=cfg.to_dict(),
    )


def config_from_dict(values, base=None):
    """Build a SolverConfig from flat keys (as found in a config file)."""
    base = base or SolverConfig()
    values = dict(values)
    weights = values.pop("weights", None)
    raster = values.pop("raster", None)
    known = {f for f in asdict(base)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown solver config keys: {sorted(unknown)}")
    for key in ("views", "image_size"):
        if key in values:
            values[key] = tuple(values[key])
    cfg = replace(base, **values)
    if weights is not None:
        cfg = replace(cfg, weights=LossWeights(**{**asdict(cfg.loss_weights), **weights}))
    if raster is not None:
        cfg = replace(cfg, raster=RasterConfig(**{**asdict(cfg.raster), **raster}))
    return cfg
