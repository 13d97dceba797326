"""Optimization drivers that turn a protection objective into a
protected image.

All three drivers run signed-gradient ascent under an L-infinity budget:

    pgd_protect   ascent on a latent-distribution objective, per image
    fsgm_protect  train a surrogate denoiser on clean data, then ascend
                  its conditional denoising loss per image
    aspl_protect  alternate surrogate descent steps with perturbation
                  ascent steps (min-max), warm-starting the perturbation
                  across outer iterations

Per step: delta <- clip(delta + step * sign(grad), -eps, eps), then the
pixel box clamp so x + delta stays in [0, 1]. Both projections are
elementwise, so their order commutes; ball-then-box is fixed here for
reproducibility. Sign ties resolve to +1: the quadratic latent
objectives have an exactly zero gradient at delta = 0, and the positive
branch lets ascent leave that stationary point deterministically.

Results carry the optimized float delta; 8-bit quantization is an I/O
concern (see quantize_roundtrip and the CLI).
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable

import numpy as np
from PIL import Image

from latentshield.analytics import Trajectory, TrajectoryPoint, latent_shift
from latentshield.autodiff import Tensor, backward, op_add, op_elementwise
from latentshield.diffusion import (
    DenoiserParams,
    PromptId,
    TrainConfig,
    loss_cond,
    train_denoiser,
)
from latentshield.encoder import EncoderParams, SigmaMode, apply_sigma_mode, encode, sample
from latentshield.losses import LossKind, loss_combo, make_latent_evaluator

__all__ = [
    "AttackConfig",
    "AsplSchedule",
    "ProtectedResult",
    "AttackError",
    "pgd_protect",
    "fsgm_protect",
    "aspl_protect",
    "quantize_roundtrip",
]

BUDGET_SLACK = 1e-12


class AttackError(RuntimeError):
    """Raised when an attack hits a non-finite loss."""


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float
    iterations: int
    loss: LossKind = LossKind("add_log")
    sigma_mode: SigmaMode = SigmaMode.natural()
    seed: int = 0
    quantize_output: str = "png8"
    objective_draws: int = 1   # stochastic objectives: draws averaged per step

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 0.5):
            raise ValueError(f"epsilon must lie in [0, 0.5], got {self.epsilon}")
        if self.epsilon > 0 and not (0.0 < self.step_size <= self.epsilon):
            raise ValueError(f"need 0 < step_size <= epsilon, got step_size="
                             f"{self.step_size}, epsilon={self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.quantize_output not in ("png8", "none"):
            raise ValueError(f"quantize_output must be 'png8' or 'none', "
                             f"got {self.quantize_output!r}")
        if self.objective_draws < 1:
            raise ValueError(f"objective_draws must be >= 1, got {self.objective_draws}")

    @classmethod
    def default_pid(cls, epsilon: float = 0.05, iterations: int = 1000,
                    seed: int = 0) -> "AttackConfig":
        """The shipped default: 1000 ascent steps at budget 0.05 with
        step size epsilon/10 on the add-log objective."""
        return cls(epsilon=epsilon, step_size=epsilon / 10.0, iterations=iterations,
                   loss=LossKind("add_log"), seed=seed)


@dataclass(frozen=True)
class AsplSchedule:
    outer: int = 50
    model_steps: int = 3
    delta_steps: int = 6

    def __post_init__(self):
        if self.outer < 1 or self.delta_steps < 1 or self.model_steps < 0:
            raise ValueError(f"bad schedule {self}")


@dataclass
class ProtectedResult:
    x_protected: np.ndarray
    delta: np.ndarray
    trajectory: Trajectory
    config_echo: AttackConfig

    def __post_init__(self):
        eps = self.config_echo.epsilon
        linf = float(np.max(np.abs(self.delta))) if self.delta.size else 0.0
        if linf > eps + BUDGET_SLACK:
            raise ValueError(f"budget violated: |delta|_inf={linf} > eps={eps}")
        lo, hi = float(self.x_protected.min()), float(self.x_protected.max())
        if lo < -BUDGET_SLACK or hi > 1.0 + BUDGET_SLACK:
            raise ValueError(f"protected image escapes [0, 1]: [{lo}, {hi}]")


def _signed(g: np.ndarray) -> np.ndarray:
    return np.where(g >= 0.0, 1.0, -1.0)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(key)))


def _run_ascent(evaluator: Callable[[Tensor], Tensor], params: EncoderParams,
                x: np.ndarray, cfg: AttackConfig, iterations: int,
                delta: np.ndarray, traj: Trajectory, start_iter: int,
                record_every: int) -> np.ndarray:
    """Shared ascent loop. Mutates nothing; returns the updated delta."""
    eps, step = cfg.epsilon, cfg.step_size
    x_const = Tensor(x)

    def evaluate(dlt: np.ndarray, with_grad: bool) -> tuple[float, np.ndarray | None]:
        d = Tensor(dlt.copy(), requires_grad=with_grad)
        loss = evaluator(op_add(x_const, d))
        val = loss.item()
        if with_grad:
            backward(loss)
            g = d.grad if d.grad is not None else np.zeros_like(dlt)
            return val, g
        return val, None

    def record(iteration: int, loss_val: float, dlt: np.ndarray) -> None:
        shift = latent_shift(params, x, np.clip(x + dlt, 0.0, 1.0))
        traj.append(TrajectoryPoint(
            iteration=iteration, loss=loss_val,
            mu_shift=shift.mu_shift_l2sq, sigma_shift=shift.sigma_shift_l2sq,
            logvar_gap=shift.logvar_gap_mean,
            delta_linf=float(np.max(np.abs(dlt)))))

    for j in range(iterations):
        it = start_iter + j
        val, g = evaluate(delta, with_grad=True)
        if not np.isfinite(val):
            raise AttackError(f"non-finite loss at step {it}; config: {cfg}")
        if it % record_every == 0:
            record(it, val, delta)
        if eps > 0.0:
            delta = np.clip(delta + step * _signed(g), -eps, eps)
            # box clamp, then a ball re-clip: the subtraction can exceed
            # eps by an ulp, and the budget must hold exactly
            delta = np.clip(np.clip(x + delta, 0.0, 1.0) - x, -eps, eps)
    final_val, _ = evaluate(delta, with_grad=False)
    if not np.isfinite(final_val):
        raise AttackError(f"non-finite loss at final evaluation; config: {cfg}")
    record(start_iter + iterations, final_val, delta)
    return delta


def _record_cadence(iterations: int) -> int:
    # every step for short runs, every 5th above 200 to bound log size
    return 1 if iterations <= 200 else 5


def pgd_protect(params: EncoderParams, x, cfg: AttackConfig,
                record_every: int | None = None) -> ProtectedResult:
    """L-infinity projected ascent on a latent-distribution objective.

    Starts from delta = 0; epsilon = 0 degenerates to the identity.
    Combo objectives need a surrogate and live in fsgm/aspl drivers.
    """
    if cfg.loss.kind == "combo":
        raise ValueError("combo objectives need a surrogate model; "
                         "use fsgm_protect or aspl_protect")
    x_arr = np.asarray(x, dtype=np.float64)
    rng = _stream(cfg.seed, 0)
    evaluator = make_latent_evaluator(params, x_arr, cfg.loss, rng, cfg.sigma_mode)
    traj = Trajectory()
    every = record_every or _record_cadence(cfg.iterations)
    delta = _run_ascent(evaluator, params, x_arr, cfg, cfg.iterations,
                        np.zeros_like(x_arr), traj, 0, every)
    return ProtectedResult(x_protected=np.clip(x_arr + delta, 0.0, 1.0),
                           delta=delta, trajectory=traj, config_echo=cfg)


def _conditional_evaluator(params: EncoderParams, theta: DenoiserParams,
                           c: PromptId, sched, rng: np.random.Generator,
                           sigma_mode: SigmaMode,
                           draws: int = 1) -> Callable[[Tensor], Tensor]:
    """Per-step objective against a frozen surrogate; averaging several
    draws estimates the expected conditional loss rather than one
    realization."""
    frozen = theta.frozen()

    def evaluator(xp: Tensor) -> Tensor:
        dist = apply_sigma_mode(encode(params, xp), sigma_mode)
        total = None
        for _ in range(draws):
            z0 = sample(dist, rng.standard_normal(dist.mu.shape))
            term = loss_cond(frozen, c, z0, sched, rng)
            total = term if total is None else op_add(total, term)
        if draws > 1:
            total = op_elementwise(total, "mul_const", const=1.0 / draws)
        return total

    return evaluator


def _maybe_combo(base_eval, params, x_arr, cfg, rng, flavor: str):
    if cfg.loss.kind == "combo" and cfg.loss.combo_base == flavor:
        latent_eval = make_latent_evaluator(params, x_arr,
                                            LossKind(cfg.loss.latent_part),
                                            rng, cfg.sigma_mode)
        return loss_combo(base_eval, latent_eval, cfg.loss.lam)
    return base_eval


def fsgm_protect(params: EncoderParams, dataset, c_prot: PromptId,
                 cfg: AttackConfig, train_cfg: TrainConfig,
                 record_every: int | None = None,
                 theta_init: DenoiserParams | None = None) -> list[ProtectedResult]:
    """Surrogate-then-attack: fit a denoiser to the clean images under
    the protection prompt, then ascend its conditional loss per image.

    ``theta_init`` seeds the surrogate (the shared "pretrained" toy
    model of the threat model); it is copied, never mutated. With a
    combo-fsgm LossKind in cfg, the objective gains the weighted
    add-log latent term.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    images = [np.asarray(im, dtype=np.float64) for im in dataset]
    sched = train_cfg.schedule()
    theta = (theta_init.copy() if theta_init is not None
             else train_cfg.new_denoiser(cfg.seed, params.latent_channels))
    if train_cfg.steps > 0:
        train_denoiser(theta, [(im, c_prot) for im in images], params, sched,
                       train_cfg.steps, train_cfg.lr, _stream(cfg.seed, 1))
    every = record_every or _record_cadence(cfg.iterations)
    results = []
    for idx, x_arr in enumerate(images):
        rng = _stream(cfg.seed, 2, idx)
        base = _conditional_evaluator(params, theta, c_prot, sched, rng,
                                      cfg.sigma_mode, draws=cfg.objective_draws)
        evaluator = _maybe_combo(base, params, x_arr, cfg, rng, "fsgm_surrogate")
        traj = Trajectory()
        delta = _run_ascent(evaluator, params, x_arr, cfg, cfg.iterations,
                            np.zeros_like(x_arr), traj, 0, every)
        results.append(ProtectedResult(np.clip(x_arr + delta, 0.0, 1.0), delta,
                                       traj, cfg))
    return results


def aspl_protect(params: EncoderParams, dataset, c_prot: PromptId,
                 cfg: AttackConfig, train_cfg: TrainConfig,
                 schedule: AsplSchedule = AsplSchedule(),
                 record_every: int | None = None,
                 theta_init: DenoiserParams | None = None) -> list[ProtectedResult]:
    """Min-max protection: alternate a few denoiser descent steps on the
    current protected images with a few ascent steps on each delta.

    cfg.iterations is ignored; the schedule fixes outer * delta_steps
    ascent steps per image. The running deltas warm-start every outer
    iteration, and the budget is asserted in-loop. ``theta_init`` seeds
    the surrogate and is copied, never mutated.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    images = [np.asarray(im, dtype=np.float64) for im in dataset]
    sched = train_cfg.schedule()
    theta = (theta_init.copy() if theta_init is not None
             else train_cfg.new_denoiser(cfg.seed, params.latent_channels))
    train_rng = _stream(cfg.seed, 1)
    image_rngs = [_stream(cfg.seed, 2, idx) for idx in range(len(images))]
    deltas = [np.zeros_like(im) for im in images]
    trajs = [Trajectory() for _ in images]
    total_steps = schedule.outer * schedule.delta_steps
    every = record_every or _record_cadence(total_steps)

    for outer in range(schedule.outer):
        if schedule.model_steps > 0:
            protected_now = [(np.clip(im + d, 0.0, 1.0), c_prot)
                             for im, d in zip(images, deltas)]
            train_denoiser(theta, protected_now, params, sched,
                           schedule.model_steps, train_cfg.lr, train_rng)
        for idx, x_arr in enumerate(images):
            rng = image_rngs[idx]
            base = _conditional_evaluator(params, theta, c_prot, sched, rng,
                                          cfg.sigma_mode, draws=cfg.objective_draws)
            evaluator = _maybe_combo(base, params, x_arr, cfg, rng, "aspl_inner")
            deltas[idx] = _run_ascent(evaluator, params, x_arr, cfg,
                                      schedule.delta_steps, deltas[idx],
                                      trajs[idx], outer * schedule.delta_steps,
                                      every)
            # final-eval record of this inner run occupies the next slot;
            # drop it except on the last outer pass so iterations stay strict
            if outer < schedule.outer - 1:
                trajs[idx].points.pop()
        assert all(float(np.max(np.abs(d))) <= cfg.epsilon + BUDGET_SLACK
                   for d in deltas), f"budget violated at outer iteration {outer}"

    return [ProtectedResult(np.clip(im + d, 0.0, 1.0), d, traj, cfg)
            for im, d, traj in zip(images, deltas, trajs)]


def quantize_roundtrip(x, mode: str = "png8", quality: int = 75) -> np.ndarray:
    """Round-trip an image through 8-bit quantization.

    png8 maps each channel to round(x * 255) / 255 exactly (idempotent,
    max error 1/510). jpeg encodes through a baseline JPEG codec at the
    given quality.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValueError(f"image values must lie in [0, 1], got "
                         f"[{arr.min()}, {arr.max()}]")
    arr = np.clip(arr, 0.0, 1.0)
    if mode == "png8":
        return np.round(arr * 255.0) / 255.0
    if mode == "jpeg":
        if not (1 <= int(quality) <= 100):
            raise ValueError(f"jpeg quality must lie in [1, 100], got {quality}")
        u8 = np.round(arr * 255.0).astype(np.uint8)
        if u8.shape[0] == 1:
            img = Image.fromarray(u8[0], mode="L")
        elif u8.shape[0] == 3:
            img = Image.fromarray(np.moveaxis(u8, 0, 2), mode="RGB")
        else:
            raise ValueError(f"jpeg round-trip needs 1 or 3 channels, got {u8.shape[0]}")
        buf = io.BytesIO()
        img.save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        back = np.asarray(Image.open(buf), dtype=np.float64) / 255.0
        if back.ndim == 2:
            back = back[None]
        else:
            back = np.moveaxis(back, 2, 0)
        return back
    raise ValueError(f"unknown quantization mode {mode!r}")
