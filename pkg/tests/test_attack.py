import dataclasses

import numpy as np
import pytest

from latentshield.attack import (
    AsplSchedule,
    AttackConfig,
    ProtectedResult,
    aspl_protect,
    fsgm_protect,
    pgd_protect,
    quantize_roundtrip,
)
from latentshield.analytics import Trajectory
from latentshield.diffusion import DEFAULT_PROMPTS, TrainConfig
from latentshield.encoder import init_encoder
from latentshield.losses import LossKind, loss_kind_from_name
from latentshield.synthdata import make_test_image

TRAIN = TrainConfig(steps=60, lr=3e-3, T=20)


class TestAttackConfig:
    def test_default_pid_matches_shipped_numbers(self):
        cfg = AttackConfig.default_pid()
        assert cfg.epsilon == 0.05
        assert cfg.iterations == 1000
        assert cfg.step_size == pytest.approx(0.005)
        assert cfg.loss.kind == "add_log"

    def test_validation(self):
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.7, step_size=0.01, iterations=10)
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.05, step_size=0.2, iterations=10)
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.05, step_size=0.005, iterations=0)
        with pytest.raises(ValueError):
            AttackConfig(epsilon=0.05, step_size=0.005, iterations=5,
                         quantize_output="tiff")

    def test_result_invariants_enforced(self, image16):
        cfg = AttackConfig(epsilon=0.01, step_size=0.001, iterations=1)
        with pytest.raises(ValueError, match="budget"):
            ProtectedResult(x_protected=image16, delta=np.full_like(image16, 0.02),
                            trajectory=Trajectory(), config_echo=cfg)


class TestPgdProtect:
    def test_zero_budget_is_identity(self, micro_encoder, image16):
        cfg = AttackConfig(epsilon=0.0, step_size=0.0, iterations=3)
        res = pgd_protect(micro_encoder, image16, cfg)
        assert np.array_equal(res.x_protected, image16)
        assert np.all(res.delta == 0.0)

    def test_budget_and_box_hold_at_every_record(self, micro_encoder, image16):
        cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=40)
        res = pgd_protect(micro_encoder, image16, cfg)
        assert float(np.max(np.abs(res.delta))) <= 0.05
        assert res.x_protected.min() >= 0.0 and res.x_protected.max() <= 1.0
        for p in res.trajectory.points:
            assert p.delta_linf <= 0.05

    def test_final_loss_at_least_initial(self, micro_encoder, image16):
        for name in ("mean", "var", "add", "add-log", "mean-target"):
            cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=30,
                               loss=loss_kind_from_name(name))
            res = pgd_protect(micro_encoder, image16, cfg)
            pts = res.trajectory.points
            assert pts[-1].loss >= pts[0].loss, name

    def test_single_pixel_linear_encoder_saturates_budget(self):
        # positive-weight 1-pixel case: ascent must reach +eps, matching
        # exhaustive search over the step grid
        params = init_encoder(0, "debug-linear", image_shape=(1, 1, 1),
                              latent_channels=1)
        params.head_mu.data[:] = abs(params.head_mu.data)
        x = np.full((1, 1, 1), 0.5)
        cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=50,
                           loss=LossKind("mean"))
        res = pgd_protect(params, x, cfg)
        assert res.delta[0, 0, 0] == pytest.approx(0.05, abs=1e-12)
        w = float(params.head_mu.data.reshape(-1)[0])
        grid = np.linspace(-0.05, 0.05, 101)
        best = max((w * d) ** 2 for d in grid)
        assert (w * res.delta[0, 0, 0]) ** 2 >= 0.99 * best

    def test_deterministic_given_seed(self, micro_encoder, image16):
        cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=15,
                           loss=LossKind("sample"), seed=9)
        a = pgd_protect(micro_encoder, image16, cfg)
        b = pgd_protect(micro_encoder, image16, cfg)
        assert a.x_protected.tobytes() == b.x_protected.tobytes()

    def test_combo_rejected(self, micro_encoder, image16):
        cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=5,
                           loss=loss_kind_from_name("combo-fsgm"))
        with pytest.raises(ValueError, match="surrogate"):
            pgd_protect(micro_encoder, image16, cfg)

    def test_trajectory_cadence(self, micro_encoder, image16):
        short = pgd_protect(micro_encoder, image16,
                            AttackConfig(0.02, 0.002, 12))
        assert [p.iteration for p in short.trajectory.points] == list(range(13))
        long = pgd_protect(micro_encoder, image16,
                           AttackConfig(0.02, 0.002, 205))
        its = [p.iteration for p in long.trajectory.points]
        assert its[0] == 0 and its[-1] == 205
        assert all(i % 5 == 0 or i == 205 for i in its)


class TestFsgmProtect:
    def test_defaults_and_budget(self, micro_encoder, subject16):
        cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=10, seed=1)
        results = fsgm_protect(micro_encoder, subject16, DEFAULT_PROMPTS[0], cfg, TRAIN)
        assert len(results) == len(subject16)
        for r in results:
            assert float(np.max(np.abs(r.delta))) <= 0.05
            assert r.x_protected.min() >= 0.0 and r.x_protected.max() <= 1.0

    def test_same_seed_identical_protected_set(self, micro_encoder, subject16):
        cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=6, seed=4)
        a = fsgm_protect(micro_encoder, subject16, DEFAULT_PROMPTS[0], cfg, TRAIN)
        b = fsgm_protect(micro_encoder, subject16, DEFAULT_PROMPTS[0], cfg, TRAIN)
        for ra, rb in zip(a, b):
            assert ra.x_protected.tobytes() == rb.x_protected.tobytes()

    def test_zero_weight_surrogate_still_respects_contract(self, micro_encoder, subject16):
        frozen_train = dataclasses.replace(TRAIN, steps=0)
        theta = frozen_train.new_denoiser(0, micro_encoder.latent_channels)
        for w in theta.layers:
            w.data[:] = 0.0
        cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=5, seed=0)
        results = fsgm_protect(micro_encoder, subject16[:2], DEFAULT_PROMPTS[0], cfg,
                               frozen_train, theta_init=theta)
        for r in results:
            assert np.all(np.isfinite([p.loss for p in r.trajectory.points]))
            assert float(np.max(np.abs(r.delta))) <= 0.05

    def test_empty_dataset_rejected(self, micro_encoder):
        cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=5)
        with pytest.raises(ValueError, match="nonempty"):
            fsgm_protect(micro_encoder, [], DEFAULT_PROMPTS[0], cfg, TRAIN)


class TestAsplProtect:
    def test_default_schedule_values(self):
        sched = AsplSchedule()
        assert (sched.outer, sched.model_steps, sched.delta_steps) == (50, 3, 6)

    def test_degenerate_schedule_is_pgd_against_initial_surrogate(self, micro_encoder, subject16):
        cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=1, seed=2)
        degenerate = AsplSchedule(outer=1, model_steps=0, delta_steps=6)
        results = aspl_protect(micro_encoder, subject16[:2], DEFAULT_PROMPTS[0], cfg,
                               TRAIN, schedule=degenerate)
        for r in results:
            assert r.trajectory.points[-1].iteration == 6
            assert float(np.max(np.abs(r.delta))) <= 0.05

    def test_budget_holds_every_outer_iteration(self, micro_encoder, subject16):
        # in-loop assertion plus final check
        cfg = AttackConfig(epsilon=0.03, step_size=0.003, iterations=1, seed=5)
        results = aspl_protect(micro_encoder, subject16[:2], DEFAULT_PROMPTS[0], cfg,
                               TRAIN, schedule=AsplSchedule(outer=4, model_steps=1,
                                                            delta_steps=3))
        for r in results:
            for p in r.trajectory.points:
                assert p.delta_linf <= 0.03 + 1e-15

    def test_deterministic(self, micro_encoder, subject16):
        cfg = AttackConfig(epsilon=0.05, step_size=0.005, iterations=1, seed=8)
        sched = AsplSchedule(outer=3, model_steps=1, delta_steps=2)
        a = aspl_protect(micro_encoder, subject16[:2], DEFAULT_PROMPTS[0], cfg, TRAIN,
                         schedule=sched)
        b = aspl_protect(micro_encoder, subject16[:2], DEFAULT_PROMPTS[0], cfg, TRAIN,
                         schedule=sched)
        for ra, rb in zip(a, b):
            assert ra.x_protected.tobytes() == rb.x_protected.tobytes()

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ValueError):
            AsplSchedule(outer=0)
        with pytest.raises(ValueError):
            AsplSchedule(delta_steps=0)


class TestQuantizeRoundtrip:
    def test_png8_idempotent(self, image16):
        once = quantize_roundtrip(image16, "png8")
        twice = quantize_roundtrip(once, "png8")
        assert np.array_equal(once, twice)

    def test_png8_error_bound(self, rng):
        x = rng.random((3, 8, 8))
        q = quantize_roundtrip(x, "png8")
        assert float(np.max(np.abs(q - x))) <= 1.0 / 510.0 + 1e-15

    def test_jpeg_q100_noisier_than_png8(self):
        x = make_test_image(3, 32)
        png_err = float(np.max(np.abs(quantize_roundtrip(x, "png8") - x)))
        jpg_err = float(np.max(np.abs(quantize_roundtrip(x, "jpeg", quality=100) - x)))
        assert jpg_err > png_err

    def test_jpeg_quality_bounds(self, image16):
        with pytest.raises(ValueError, match="quality"):
            quantize_roundtrip(image16, "jpeg", quality=0)
        with pytest.raises(ValueError, match="quality"):
            quantize_roundtrip(image16, "jpeg", quality=101)

    def test_range_maps_to_unit_interval(self, image16):
        for mode, q in (("png8", 75), ("jpeg", 30)):
            out = quantize_roundtrip(image16, mode, quality=q)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_out_of_range_input_rejected(self):
        with pytest.raises(ValueError, match="lie in"):
            quantize_roundtrip(np.full((1, 4, 4), 1.5), "png8")


class TestBudgetSweep:
    def test_randomized_driver_runs_never_violate(self, micro_encoder):
        # randomized configs across all three drivers, every recorded step
        rng = np.random.default_rng(2024)
        imgs = [make_test_image(int(rng.integers(100)), 16) for _ in range(3)]
        for trial in range(10):
            eps = float(rng.uniform(0.01, 0.1))
            cfg = AttackConfig(epsilon=eps, step_size=eps / 10, iterations=6,
                               loss=loss_kind_from_name(
                                   str(rng.choice(["mean", "add-log", "sample"]))),
                               seed=int(rng.integers(1 << 16)))
            res = pgd_protect(micro_encoder, imgs[trial % 3], cfg)
            assert all(p.delta_linf <= eps for p in res.trajectory.points)
            assert res.x_protected.min() >= 0.0 and res.x_protected.max() <= 1.0
