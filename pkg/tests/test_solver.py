import json

import numpy as np
import pytest

from blendreg import gradcheck
from blendreg.geometry import BLENDED, RIGID, DeformationState, RigidTransform, apply_rigid
from blendreg.io import SyntheticPairSpec, make_pair
from blendreg.loss import LossWeights
from blendreg.solver import (
    CHAMFER,
    Adam,
    NonFiniteLossError,
    Objective,
    Params,
    SolverConfig,
    clip_by_norm,
    config_from_dict,
    cosine_step,
    initialize_stage,
    optimize,
    register,
    step,
    trace_csv,
)

SMALL = dict(
    views=(2, 1), image_size=(16, 16), iterations_per_stage=5, max_stages=2, knn=4
)


def small_pair(seed=0):
    src, tgt, _ = make_pair(SyntheticPairSpec(num_points=64, seed=seed))
    return src, tgt


def blob(seed, m):
    pts = np.random.default_rng(seed).normal(size=(m, 3))
    return pts / np.linalg.norm(pts, axis=1).max() * 0.45


class TestAdam:
    def test_first_step_is_signed_lr(self):
        opt = Adam(3)
        x = opt.step(np.zeros(3), np.array([2.0, -0.5, 1e-3]), 0.1)
        np.testing.assert_allclose(x, [-0.1, 0.1, -0.1], rtol=1e-4)

    def test_two_steps_closed_form(self):
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
        g1, g2 = 1.0, 3.0
        opt = Adam(1, b1, b2, eps)
        x = opt.step(np.zeros(1), np.array([g1]), lr)
        x = opt.step(x, np.array([g2]), lr)
        m = (b1 * (1 - b1) * g1 + (1 - b1) * g2) / (1 - b1**2)
        v = (b2 * (1 - b2) * g1**2 + (1 - b2) * g2**2) / (1 - b2**2)
        x1 = -lr * g1 / (abs(g1) + eps)
        assert x[0] == pytest.approx(x1 - lr * m / (np.sqrt(v) + eps), rel=1e-12)

    def test_zero_gradient_is_no_op(self):
        opt = Adam(4)
        x0 = np.arange(4.0)
        np.testing.assert_array_equal(opt.step(x0, np.zeros(4), 0.5), x0)

    def test_inactive_entries_untouched_and_uncounted(self):
        opt = Adam(2)
        active = np.array([True, False])
        x = opt.step(np.zeros(2), np.ones(2), 0.1, active)
        assert x[1] == 0.0 and opt.t[1] == 0
        x = opt.step(x, np.ones(2), 0.1)
        # the late entry gets a full bias-corrected first step
        assert x[1] == pytest.approx(-0.1, rel=1e-6)


class TestStepping:
    def test_clip(self):
        g = np.array([3.0, 4.0])
        np.testing.assert_allclose(clip_by_norm(g, 1.0), [0.6, 0.8])
        np.testing.assert_array_equal(clip_by_norm(g, 10.0), g)

    def test_step_on_params_scales_weight_entries(self):
        cfg = SolverConfig(weight_step_scale=4.0)
        p = Params(2, 3)
        new = step(p, np.full(p.data.size, 1e-3), Adam(p.data.size), 0.01, cfg)
        d = new.data - p.data
        np.testing.assert_allclose(d[:12], -0.01, rtol=1e-4)
        np.testing.assert_allclose(d[12:], -0.04, rtol=1e-4)

    def test_cosine_schedule(self):
        cfg = SolverConfig(step_size=1.0, min_step_fraction=0.05)
        assert cosine_step(cfg, 0, 10) == pytest.approx(1.0)
        assert cosine_step(cfg, 5, 10) == pytest.approx(0.525)
        assert cosine_step(cfg, 10, 10) == pytest.approx(0.05)


class TestParams:
    def test_layout_and_init(self):
        p = Params(3, 5, init_weight=0.1)
        assert p.data.size == 3 * 11
        np.testing.assert_array_equal(p.rot, 0.0)
        np.testing.assert_allclose(1 / (1 + np.exp(-p.logits)), 0.1)

    def test_mask_excludes_stage_one_weights(self):
        p = Params(3, 4)
        m = Params(3, 4, data=p.mask(2).astype(float))
        assert m.rot[:2].all() and not m.rot[2].any()
        assert not m.logits[0].any() and m.logits[1].all() and not m.logits[2].any()

    def test_mask_only_last(self):
        m = Params(3, 4, data=Params(3, 4).mask(3, only_last=True).astype(float))
        assert not m.rot[:2].any() and m.rot[2].all()

    def test_state_weights_sum_to_one(self):
        p = Params(4, 6, data=np.random.default_rng(0).normal(size=4 * 12))
        s = p.state(4, BLENDED)
        np.testing.assert_allclose(s.weights.sum(axis=1), 1.0)


class TestInitializeStage:
    def test_ninety_ten_blend(self):
        src = np.random.default_rng(1).normal(size=(10, 3))
        tf = RigidTransform([0.2, 0.1, -0.3], [1.0, 0.0, 0.0])
        state = DeformationState.first_stage(tf, 10)
        prev = apply_rigid(tf, src)
        new, s2 = initialize_stage(state, 2, 10, 0.1, src, prev)
        assert new.num_stages == 2
        np.testing.assert_allclose(s2, 0.9 * prev + 0.1 * src)
        np.testing.assert_allclose(new.weights[:, 1], 0.1)

    def test_wrong_index(self):
        state = DeformationState.first_stage(RigidTransform.identity(), 3)
        with pytest.raises(ValueError):
            initialize_stage(state, 3, 3)


class TestObjective:
    @pytest.mark.parametrize("mode", [BLENDED, RIGID])
    def test_end_to_end_gradient(self, mode):
        src, tgt = blob(2, 16), blob(12, 16)
        cfg = SolverConfig(
            **SMALL, mode=mode, weights=LossWeights(0.1, 0.01, 0.1, 0.1, 0.8)
        )
        obj = Objective(src, tgt, cfg)
        rng = np.random.default_rng(3)
        p = Params(2, 16, data=rng.normal(scale=0.2, size=2 * 22))
        _, g = obj.evaluate(p, 2)

        def f(x):
            return obj.evaluate(Params(2, 16, data=x), 2)[0].final_total

        def sig(x):
            stages = obj.deformed_stages(Params(2, 16, data=x), 2)
            return b"#".join(
                gradcheck.raster_signature(s, obj.views, cfg.raster, obj.target_images.mask)
                for s in stages
            )

        num, ok = gradcheck.finite_difference(f, p.data, 1e-6, sig)
        if mode == RIGID:
            ok[2 * 6 :] = False
        res = gradcheck.compare("total", g, num, ok)
        assert res.passed, res

    def test_chamfer_objective_gradient(self):
        cfg = SolverConfig(**SMALL, objective=CHAMFER)
        obj = Objective(blob(4, 32), blob(14, 32), cfg)
        p = Params(2, 32, data=np.random.default_rng(5).normal(scale=0.2, size=2 * 38))
        _, g = obj.evaluate(p, 2)
        num, _ = gradcheck.finite_difference(
            lambda x: obj.evaluate(Params(2, 32, data=x), 2)[0].final_total, p.data, 1e-7
        )
        assert gradcheck.relative_error(g, num) < 1e-4


class TestOptimize:
    def test_best_loss_non_increasing_within_each_stage(self):
        src, tgt = small_pair()
        res = register(src, tgt, SolverConfig(**SMALL))
        assert len(res.loss_trace) == 10
        for k in (1, 2):
            best = [r.best_loss for r in res.loss_trace if r.active_stages == k]
            assert len(best) == 5
            assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))

    def test_deterministic(self):
        src, tgt = small_pair()
        cfg = SolverConfig(**SMALL, view_batch=1, seed=7)
        a, b = register(src, tgt, cfg), register(src, tgt, cfg)
        assert trace_csv(a.loss_trace) == trace_csv(b.loss_trace)
        np.testing.assert_array_equal(a.deformed, b.deformed)

    def test_identity_pair_stays_put(self):
        src, _ = small_pair()
        res = register(src, src, SolverConfig(**SMALL))
        assert res.metrics.cd <= res.initial_metrics.cd + 1e-12
        # aligned data stops the run at the first iterate
        assert len(res.loss_trace) == 1

    def test_rigid_pose_reported(self):
        src, _ = small_pair()
        tf = RigidTransform([0.0, 0.0, 0.1], [0.05, 0.0, 0.0])
        res = register(src, apply_rigid(tf, src), SolverConfig(**SMALL, mode=RIGID))
        assert res.pose is not None
        net = res.final_state.transforms
        assert len(net) == 2

    def test_nonfinite_abort_carries_dump(self):
        src, tgt = small_pair()
        cfg = SolverConfig(**SMALL)
        obj = Objective(src / 3, tgt / 3, cfg)
        data_terms = obj._data_terms

        def poisoned(pts, view_idx):
            dv, dg, mv, mg = data_terms(pts, view_idx)
            return np.nan, dg, mv, mg

        obj._data_terms = poisoned
        with pytest.raises(NonFiniteLossError) as err:
            optimize(obj, cfg)
        assert err.value.dump["active_stages"] == 1
        json.dumps(err.value.dump)

    def test_trace_csv_layout(self):
        src, tgt = small_pair()
        res = register(src, tgt, SolverConfig(**SMALL))
        lines = trace_csv(res.loss_trace, {"seed": 0}).splitlines()
        assert lines[0].startswith("# config:")
        assert lines[1].startswith("iteration,active_stages,stage")
        # 5 rows with one stage, then 5 rows with two
        assert len(lines) == 2 + 5 + 10


class TestConfig:
    def test_from_dict(self):
        cfg = config_from_dict({"max_stages": 3, "views": [4, 2], "weights": {"mask": 0.5}})
        assert cfg.max_stages == 3 and cfg.views == (4, 2)
        assert cfg.loss_weights.mask == 0.5 and cfg.loss_weights.sparse == 10.0

    def test_rigid_mode_uses_rigid_weights(self):
        assert SolverConfig(mode=RIGID).loss_weights == LossWeights.rigid()

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            config_from_dict({"bogus": 1})

    @pytest.mark.parametrize(
        "kw", [dict(max_stages=0), dict(mode="soft"), dict(objective="l2"), dict(init_weight=1.0)]
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)
