import numpy as np
import pytest

from latentshield.autodiff import Tensor, backward, grad_check, op_add
from latentshield.encoder import SigmaMode, encode, init_encoder
from latentshield.losses import (
    LossKind,
    checkerboard_target,
    clean_cache,
    loss_add,
    loss_add_log,
    loss_combo,
    loss_kind_from_name,
    loss_mean,
    loss_mean_targeted,
    loss_sample,
    loss_var,
    make_latent_evaluator,
)


def _pert_dist(params, x, delta):
    # present a box-feasible perturbed image, as the attack loop does
    x = np.asarray(x)
    delta = np.clip(x + np.asarray(delta), 0.0, 1.0) - x
    return encode(params, Tensor(x) + Tensor(delta))


class TestCleanCache:
    def test_reuse_on_same_inputs(self, micro_encoder, image16):
        c1 = clean_cache(micro_encoder, image16)
        c2 = clean_cache(micro_encoder, image16, cache=c1)
        assert c2 is c1

    def test_recompute_on_image_change(self, micro_encoder, image16):
        c1 = clean_cache(micro_encoder, image16)
        other = np.clip(image16 + 0.01, 0, 1)
        c2 = clean_cache(micro_encoder, other, cache=c1)
        assert c2 is not c1

    def test_recompute_on_encoder_change(self, image16):
        a = init_encoder(1, "micro-4x")
        b = init_encoder(2, "micro-4x")
        c1 = clean_cache(a, image16)
        c2 = clean_cache(b, image16, cache=c1)
        assert c2 is not c1


class TestLossMean:
    def test_zero_at_zero_delta(self, micro_encoder, image16):
        cache = clean_cache(micro_encoder, image16)
        dist = _pert_dist(micro_encoder, image16, np.zeros_like(image16))
        assert loss_mean(cache, dist).item() == 0.0

    def test_linear_encoder_closed_form(self, rng):
        params = init_encoder(3, "debug-linear", image_shape=(1, 2, 2), latent_channels=2)
        x = rng.random((1, 2, 2))
        delta = rng.uniform(-0.05, 0.05, size=x.shape)
        cache = clean_cache(params, x)
        got = loss_mean(cache, _pert_dist(params, x, delta)).item()
        w = params.head_mu.data.reshape(2, -1)
        expected = float(np.sum((w @ delta.reshape(-1)) ** 2))
        assert got == pytest.approx(expected, rel=1e-12)

    def test_doubling_delta_quadruples(self, rng):
        params = init_encoder(3, "debug-linear", image_shape=(1, 2, 2), latent_channels=2)
        x = np.full((1, 2, 2), 0.5)
        delta = rng.uniform(-0.02, 0.02, size=x.shape)
        cache = clean_cache(params, x)
        one = loss_mean(cache, _pert_dist(params, x, delta)).item()
        two = loss_mean(cache, _pert_dist(params, x, 2 * delta)).item()
        assert two == pytest.approx(4 * one, rel=1e-10)

    def test_closed_form_gradient_linear_encoder(self, rng):
        # analytic gradient of |W d|^2 is 2 W^T W d
        params = init_encoder(3, "debug-linear", image_shape=(1, 2, 2), latent_channels=2)
        x = rng.random((1, 2, 2))
        delta = rng.uniform(-0.05, 0.05, size=x.shape)
        cache = clean_cache(params, x)
        d = Tensor(delta, requires_grad=True)
        loss = loss_mean(cache, encode(params, op_add(Tensor(x), d)))
        backward(loss)
        w = params.head_mu.data.reshape(2, -1)
        expected = 2.0 * w.T @ (w @ delta.reshape(-1))
        assert np.allclose(d.grad.reshape(-1), expected, rtol=1e-10, atol=1e-12)
        # finite differences confirm the same gradient at tight tolerance
        report = grad_check(
            lambda t: loss_mean(cache, encode(params, op_add(Tensor(x), t))),
            Tensor(delta), h=1e-4, tol=1e-5)
        assert report.passed, report

    def test_shape_mismatch_rejected(self, micro_encoder, tiny_encoder, image16, image32):
        cache = clean_cache(micro_encoder, image16)
        dist = encode(tiny_encoder, image32)
        with pytest.raises(ValueError, match="latent shape"):
            loss_mean(cache, dist)


class TestLossVar:
    def test_zero_at_zero_delta(self, micro_encoder, image16):
        cache = clean_cache(micro_encoder, image16)
        assert loss_var(cache, _pert_dist(micro_encoder, image16,
                                          np.zeros_like(image16))).item() == 0.0

    def test_doubled_sigma_gives_sum_of_squares(self, micro_encoder, image16):
        # logvar + 2 ln 2 doubles sigma, so the gap is sigma0 itself
        cache = clean_cache(micro_encoder, image16)
        dist = encode(micro_encoder, image16)
        shifted = type(dist)(mu=dist.mu,
                             logvar=dist.logvar + 2 * np.log(2.0))
        got = loss_var(cache, shifted).item()
        assert got == pytest.approx(float(np.sum(cache.sigma0 ** 2)), rel=1e-12)

    def test_gradient_finite_differences(self, rng, micro_encoder, image16):
        cache = clean_cache(micro_encoder, image16)

        def f(d):
            return loss_var(cache, encode(micro_encoder, op_add(Tensor(image16), d)))

        report = grad_check(f, Tensor(rng.uniform(-0.02, 0.02, image16.shape)),
                            tol=1e-4, indices=[(0, 1, 2), (1, 8, 8), (2, 15, 0)])
        assert report.passed, report


class TestLossSample:
    def test_tied_noise_zero_delta_is_exactly_zero(self, micro_encoder, image16):
        val = loss_sample(micro_encoder, image16, np.zeros_like(image16),
                          np.random.default_rng(0), tied_noise=True)
        assert val.item() == 0.0

    def test_independent_noise_expectation(self, micro_encoder, image16):
        # at zero delta the expected value is 2 * sum(sigma0^2)
        cache = clean_cache(micro_encoder, image16)
        rng = np.random.default_rng(7)
        n = 10_000
        sig2 = cache.sigma0 ** 2
        vals = sig2[None] * (rng.standard_normal((n,) + sig2.shape)
                             - rng.standard_normal((n,) + sig2.shape)) ** 2
        # spot-check the op against its formula on one pair
        pair = (rng.standard_normal(sig2.shape), rng.standard_normal(sig2.shape))
        got = loss_sample(micro_encoder, image16, np.zeros_like(image16),
                          rng, cache=cache, noise_pair=pair).item()
        manual = float(np.sum((cache.sigma0 * pair[0] - cache.sigma0 * pair[1]) ** 2))
        assert got == pytest.approx(manual, rel=1e-12)
        expected = 2.0 * float(np.sum(sig2))
        mc = float(np.mean(np.sum(vals, axis=(1, 2, 3))))
        se = float(np.std(np.sum(vals, axis=(1, 2, 3)))) / np.sqrt(n)
        assert abs(mc - expected) < 3 * se

    def test_fixed_rng_deterministic(self, micro_encoder, image16, rng):
        delta = rng.uniform(-0.01, 0.01, image16.shape)
        v1 = loss_sample(micro_encoder, image16, delta, np.random.default_rng(5)).item()
        v2 = loss_sample(micro_encoder, image16, delta, np.random.default_rng(5)).item()
        assert v1 == v2


class TestLossAdd:
    def test_zero_at_zero_delta(self, micro_encoder, image16):
        cache = clean_cache(micro_encoder, image16)
        dist = _pert_dist(micro_encoder, image16, np.zeros_like(image16))
        assert loss_add(cache, dist).item() == 0.0

    def test_equals_sum_of_parts_bitwise(self, micro_encoder, image16, rng):
        cache = clean_cache(micro_encoder, image16)
        dist = _pert_dist(micro_encoder, image16, rng.uniform(-0.05, 0.05, image16.shape))
        total = loss_add(cache, dist).item()
        dist2 = _pert_dist(micro_encoder, image16, np.zeros_like(image16))
        # recompute parts on the same dist object
        assert total == loss_mean(cache, dist).item() + loss_var(cache, dist).item()
        assert loss_add(cache, dist2).item() == 0.0

    def test_reduces_to_mean_when_logvar_unchanged(self, micro_encoder, image16, rng):
        cache = clean_cache(micro_encoder, image16)
        dist = _pert_dist(micro_encoder, image16, rng.uniform(-0.05, 0.05, image16.shape))
        frozen_logvar = type(dist)(mu=dist.mu, logvar=Tensor(cache.logvar0))
        assert loss_add(cache, frozen_logvar).item() == \
               loss_mean(cache, frozen_logvar).item()


class TestLossAddLog:
    def test_zero_at_zero_delta(self, micro_encoder, image16):
        cache = clean_cache(micro_encoder, image16)
        dist = _pert_dist(micro_encoder, image16, np.zeros_like(image16))
        assert loss_add_log(cache, dist).item() == 0.0

    def test_pure_log_term_counts_elements(self, micro_encoder, image16):
        cache = clean_cache(micro_encoder, image16)
        dist = encode(micro_encoder, image16)
        shifted = type(dist)(mu=dist.mu, logvar=dist.logvar + 1.0)
        assert loss_add_log(cache, shifted).item() == pytest.approx(
            float(dist.mu.data.size), rel=1e-12)

    def test_log_term_can_go_negative(self, micro_encoder, image16):
        cache = clean_cache(micro_encoder, image16)
        dist = encode(micro_encoder, image16)
        shrunk = type(dist)(mu=dist.mu, logvar=dist.logvar + (-0.5))
        assert loss_add_log(cache, shrunk).item() < 0.0

    def test_bitwise_decomposition(self, micro_encoder, image16, rng):
        cache = clean_cache(micro_encoder, image16)
        dist = _pert_dist(micro_encoder, image16, rng.uniform(-0.05, 0.05, image16.shape))
        whole = loss_add_log(cache, dist).item()
        mean_part = loss_mean(cache, dist).item()
        log_part = float(np.sum(dist.logvar.data - cache.logvar0))
        assert whole == mean_part + log_part  # exact, same op order

    def test_mean_mode_flag(self, micro_encoder, image16, rng):
        cache = clean_cache(micro_encoder, image16)
        dist = _pert_dist(micro_encoder, image16, rng.uniform(-0.05, 0.05, image16.shape))
        summed = loss_add_log(cache, dist, log_term="sum").item()
        meaned = loss_add_log(cache, dist, log_term="mean").item()
        mean_part = loss_mean(cache, dist).item()
        n = dist.mu.data.size
        assert meaned - mean_part == pytest.approx((summed - mean_part) / n, rel=1e-9)

    def test_gradient_on_toy_image(self, micro_encoder, rng):
        x = 0.1 + 0.8 * rng.random((3, 8, 8))  # interior so probes stay in range
        cache = clean_cache(micro_encoder, x)

        def f(d):
            return loss_add_log(cache, encode(micro_encoder, op_add(Tensor(x), d)))

        report = grad_check(f, Tensor(rng.uniform(-0.03, 0.03, x.shape)), tol=1e-4)
        assert report.passed, report


class TestLossMeanTargeted:
    def test_zero_when_on_target(self, micro_encoder, image16):
        val = loss_mean_targeted(micro_encoder, image16,
                                 np.zeros_like(image16), image16)
        assert val.item() == 0.0

    def test_nonpositive_everywhere(self, micro_encoder, image16, rng):
        target = checkerboard_target(image16.shape)
        for _ in range(3):
            delta = np.clip(image16 + rng.uniform(-0.05, 0.05, image16.shape),
                            0, 1) - image16
            assert loss_mean_targeted(micro_encoder, image16, delta, target).item() <= 0.0

    def test_increases_along_ray_to_target_linear_encoder(self, rng):
        # quadratic along a ray: moving mu toward the target raises the value
        params = init_encoder(9, "debug-linear", image_shape=(1, 2, 2), latent_channels=2)
        x = np.full((1, 2, 2), 0.4)
        target = np.full((1, 2, 2), 0.6)
        vals = [loss_mean_targeted(params, x, alpha * (target - x), target).item()
                for alpha in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        assert vals[-1] == 0.0

    def test_dim_mismatch_rejected(self, micro_encoder, image16):
        with pytest.raises(ValueError, match="target shape"):
            loss_mean_targeted(micro_encoder, image16, np.zeros_like(image16),
                               np.zeros((3, 8, 8)))

    def test_checkerboard_is_deterministic(self):
        a = checkerboard_target((3, 16, 16))
        b = checkerboard_target((3, 16, 16))
        assert np.array_equal(a, b)
        assert set(np.unique(a)) == {0.25, 0.75}


class TestLossCombo:
    def test_lambda_zero_equals_base(self, micro_encoder, image16, rng):
        cache = clean_cache(micro_encoder, image16)

        def t_eval(xp):
            return loss_mean(cache, encode(micro_encoder, xp))

        def l_eval(xp):
            return loss_add_log(cache, encode(micro_encoder, xp))

        xp = Tensor(np.clip(image16 + rng.uniform(-0.05, 0.05, image16.shape), 0, 1))
        combo = loss_combo(t_eval, l_eval, 0.0)
        assert combo(xp).item() == t_eval(xp).item()

    def test_default_lambda(self):
        assert loss_kind_from_name("combo-fsgm").lam == 0.05

    def test_large_lambda_dominates_gradient_direction(self, micro_encoder, image16, rng):
        cache = clean_cache(micro_encoder, image16)

        def t_eval(xp):
            return loss_mean(cache, encode(micro_encoder, xp))

        def l_eval(xp):
            return loss_add_log(cache, encode(micro_encoder, xp))

        delta = rng.uniform(-0.03, 0.03, image16.shape)

        def grad_of(fn):
            d = Tensor(delta.copy(), requires_grad=True)
            loss = fn(op_add(Tensor(image16), d))
            backward(loss)
            return d.grad.reshape(-1)

        g_combo = grad_of(loss_combo(t_eval, l_eval, 1e6))
        g_l = grad_of(l_eval)
        cos = float(g_combo @ g_l / (np.linalg.norm(g_combo) * np.linalg.norm(g_l)))
        assert cos > 0.999

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            loss_combo(lambda x: x, lambda x: x, -0.1)


class TestLossKind:
    def test_cli_name_roundtrip(self):
        for name in ("mean", "var", "sample", "add", "add-log", "mean-target",
                     "combo-fsgm", "combo-aspl"):
            assert loss_kind_from_name(name).name == name

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError, match="unknown loss"):
            loss_kind_from_name("psycho")

    def test_combo_needs_base(self):
        with pytest.raises(ValueError, match="combo_base"):
            LossKind("combo")

    def test_evaluator_factory_covers_latent_losses(self, micro_encoder, image16, rng):
        for name in ("mean", "var", "sample", "add", "add-log", "mean-target"):
            ev = make_latent_evaluator(micro_encoder, image16,
                                       loss_kind_from_name(name),
                                       np.random.default_rng(0))
            val = ev(Tensor(np.clip(image16 + 0.01, 0, 1))).item()
            assert np.isfinite(val)

    def test_evaluator_rejects_combo(self, micro_encoder, image16):
        with pytest.raises(ValueError, match="combo"):
            make_latent_evaluator(micro_encoder, image16,
                                  loss_kind_from_name("combo-fsgm"),
                                  np.random.default_rng(0))

    def test_sigma_mode_changes_sample_loss_only(self, micro_encoder, image16, rng):
        delta = rng.uniform(-0.02, 0.02, image16.shape)
        xp = Tensor(np.clip(image16 + delta, 0, 1))
        for name in ("mean", "add-log"):
            nat = make_latent_evaluator(micro_encoder, image16, loss_kind_from_name(name),
                                        np.random.default_rng(0))(xp).item()
            zero = make_latent_evaluator(micro_encoder, image16, loss_kind_from_name(name),
                                         np.random.default_rng(0),
                                         sigma_mode=SigmaMode.zero())(xp).item()
            assert nat == zero
