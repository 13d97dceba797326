"""Stress tests for protections: data corruptions, sigma-substitution
adaptive attacks, imperceptibility metrics, and the prompt-mismatch
fine-tuning experiment.

The desk-scale proxy for "fine-tuning succeeded" is the held-out
conditional denoising loss of the toy model on clean latents of the
same subject: higher loss after training on protected data means the
protection worked. Reports label the proxy explicitly; no pretrained
perceptual metrics are involved.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from latentshield.analytics import latent_shift
from latentshield.attack import (
    AsplSchedule,
    AttackConfig,
    ProtectedResult,
    aspl_protect,
    fsgm_protect,
    pgd_protect,
    quantize_roundtrip,
)
from latentshield.diffusion import (
    DenoiserParams,
    PromptId,
    TrainConfig,
    denoise,
    encode_latent,
    forward_noise,
    train_denoiser,
)
from latentshield.encoder import EncoderParams, SigmaMode, encode
from latentshield.losses import LossKind
from latentshield.runconfig import config_hash

__all__ = [
    "CorruptionSpec",
    "ReportRow",
    "ExperimentReport",
    "corrupt",
    "ssim",
    "psnr",
    "heldout_denoise_loss",
    "run_mismatch_experiment",
    "run_adaptive_experiment",
    "run_corruption_experiment",
]

PSNR_CAP_DB = 99.0


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionSpec:
    """One of: resize_crop | smooth_uniform | gaussian_denoise | jpeg."""

    kind: str
    scale_min: float = 1.0
    scale_max: float = 1.0
    amplitude: float = 0.0
    sigma: float = 1.0
    quality: int = 75
    seed: int = 0

    def __post_init__(self):
        if self.kind == "resize_crop":
            if not (0.0 < self.scale_min <= self.scale_max <= 1.0):
                raise ValueError(f"scale range must sit inside (0, 1], got "
                                 f"[{self.scale_min}, {self.scale_max}]")
        elif self.kind == "smooth_uniform":
            if self.amplitude < 0:
                raise ValueError(f"amplitude must be nonnegative, got {self.amplitude}")
        elif self.kind == "gaussian_denoise":
            if self.sigma <= 0:
                raise ValueError(f"blur sigma must be positive, got {self.sigma}")
        elif self.kind == "jpeg":
            if not (1 <= self.quality <= 100):
                raise ValueError(f"jpeg quality must lie in [1, 100], got {self.quality}")
        else:
            raise ValueError(f"unknown corruption kind {self.kind!r}")

    @classmethod
    def resize_crop(cls, scale_min: float, scale_max: float, seed: int = 0):
        return cls("resize_crop", scale_min=scale_min, scale_max=scale_max, seed=seed)

    @classmethod
    def smooth_uniform(cls, amplitude: float, seed: int = 0):
        return cls("smooth_uniform", amplitude=amplitude, seed=seed)

    @classmethod
    def gaussian_denoise(cls, sigma: float):
        return cls("gaussian_denoise", sigma=sigma)

    @classmethod
    def jpeg(cls, quality: int = 75):
        return cls("jpeg", quality=quality)

    def label(self) -> str:
        if self.kind == "resize_crop":
            return f"resize_crop[{self.scale_min:g},{self.scale_max:g}]"
        if self.kind == "smooth_uniform":
            return f"smooth_uniform({self.amplitude:g})"
        if self.kind == "gaussian_denoise":
            return f"gaussian_denoise({self.sigma:g})"
        return f"jpeg(q={self.quality})"

    def reseeded(self, seed: int) -> "CorruptionSpec":
        return dataclasses.replace(self, seed=seed)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize of a (C, H, W) image. Same-size
    calls return the input exactly."""
    c, h, w = img.shape
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[None, :, None]
    wx = (sx - x0)[None, None, :]
    p00 = img[:, y0][:, :, x0]
    p01 = img[:, y0][:, :, x1]
    p10 = img[:, y1][:, :, x0]
    p11 = img[:, y1][:, :, x1]
    top = p00 * (1.0 - wx) + p01 * wx
    bot = p10 * (1.0 - wx) + p11 * wx
    return top * (1.0 - wy) + bot * wy


def _gauss_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if radius is None:
        radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _sep_filter_same(ch: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable same-size filtering with reflect padding, one channel."""
    r = (k.size - 1) // 2
    padded = np.pad(ch, ((0, 0), (r, r)), mode="reflect")
    out = np.lib.stride_tricks.sliding_window_view(padded, k.size, axis=1) @ k
    padded = np.pad(out, ((r, r), (0, 0)), mode="reflect")
    return np.lib.stride_tricks.sliding_window_view(padded, k.size, axis=0) @ k


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = _gauss_kernel1d(sigma)
    return np.stack([_sep_filter_same(ch, k) for ch in img])


def corrupt(x, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption; always maps [0,1] images to [0,1] images."""
    img = np.asarray(x, dtype=np.float64)
    if spec.kind == "resize_crop":
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 11)))
        _, h, w = img.shape
        s = rng.uniform(spec.scale_min, spec.scale_max)
        ch = max(1, int(round(s * h)))
        cw = max(1, int(round(s * w)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        crop = img[:, y0:y0 + ch, x0:x0 + cw]
        return np.clip(bilinear_resize(crop, h, w), 0.0, 1.0)
    if spec.kind == "smooth_uniform":
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 12)))
        noisy = img + rng.uniform(-spec.amplitude, spec.amplitude, size=img.shape)
        return np.clip(noisy, 0.0, 1.0)
    if spec.kind == "gaussian_denoise":
        return np.clip(gaussian_blur(img, spec.sigma), 0.0, 1.0)
    # jpeg
    return quantize_roundtrip(img, "jpeg", quality=spec.quality)


# ---------------------------------------------------------------------------
# imperceptibility metrics
# ---------------------------------------------------------------------------

def _valid_filter(ch: np.ndarray, k: np.ndarray) -> np.ndarray:
    v = np.lib.stride_tricks.sliding_window_view(ch, k.size, axis=1) @ k
    return np.lib.stride_tricks.sliding_window_view(v, k.size, axis=0) @ k


def ssim(x, y, k1: float = 0.01, k2: float = 0.03, win: int = 11,
         sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean local structural similarity over channels (Gaussian window,
    valid region). Exactly 1.0 for identical inputs, symmetric."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[1] < win or a.shape[2] < win:
        raise ValueError(f"need a (C, H, W) image with H, W >= {win}, got {a.shape}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    k = _gauss_kernel1d(sigma, radius=(win - 1) // 2)
    vals = []
    for ca, cb in zip(a, b):
        mu_a = _valid_filter(ca, k)
        mu_b = _valid_filter(cb, k)
        var_a = _valid_filter(ca * ca, k) - mu_a * mu_a
        var_b = _valid_filter(cb * cb, k) - mu_b * mu_b
        cov = _valid_filter(ca * cb, k) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        vals.append(num / den)
    return float(np.mean(vals))


def psnr(x, y, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB over unit-range images. Zero MSE
    stands for +inf and reports the cap (99 dB in CSVs)."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(-10.0 * np.log10(mse), cap)


# ---------------------------------------------------------------------------
# experiment reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    defense: str
    condition: str
    seed: int
    final_loss: float        # held-out conditional denoise loss, this run
    clean_final_loss: float  # paired clean-data baseline, same condition/seed
    mu_shift: float
    sigma_shift: float
    logvar_gap: float
    ssim: float
    psnr: float
    config_hash: str


REPORT_HEADER = ("defense,condition,seed,final_loss,clean_final_loss,"
                 "mu_shift,sigma_shift,logvar_gap,ssim,psnr,config_hash")


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        lines = [REPORT_HEADER]
        for r in self.rows:
            lines.append(",".join([
                r.defense, r.condition, str(r.seed), repr(r.final_loss),
                repr(r.clean_final_loss), repr(r.mu_shift), repr(r.sigma_shift),
                repr(r.logvar_gap), repr(r.ssim), repr(r.psnr), r.config_hash,
            ]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def group_mean(self, defense: str, condition: str | None = None,
                   column: str = "final_loss") -> float:
        picked = [getattr(r, column) for r in self.rows
                  if r.defense == defense and (condition is None or r.condition == condition)]
        if not picked:
            raise KeyError(f"no rows for defense={defense!r} condition={condition!r}")
        return float(np.mean(picked))

    def summary(self) -> dict:
        groups: dict[tuple[str, str], list[ReportRow]] = {}
        for r in self.rows:
            groups.setdefault((r.defense, r.condition), []).append(r)
        table = {}
        for (d, c), rows in sorted(groups.items()):
            table[f"{d}/{c}"] = {
                "final_loss_mean": float(np.mean([r.final_loss for r in rows])),
                "clean_final_loss_mean": float(np.mean([r.clean_final_loss for r in rows])),
                "mu_shift_mean": float(np.mean([r.mu_shift for r in rows])),
                "logvar_gap_mean": float(np.mean([r.logvar_gap for r in rows])),
                "ssim_mean": float(np.mean([r.ssim for r in rows])),
                "psnr_mean": float(np.mean([r.psnr for r in rows])),
                "n": len(rows),
            }
        return {"groups": table, "meta": self.meta,
                "proxy_note": "final_loss is the held-out conditional denoise loss "
                              "of the toy model; higher after training on protected "
                              "data means stronger protection"}

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _subseed(*key) -> int:
    return int(np.random.SeedSequence(tuple(int(k) for k in key)).generate_state(1)[0])


def heldout_denoise_loss(theta: DenoiserParams, images: Sequence[np.ndarray],
                         prompt: PromptId, params: EncoderParams, sched,
                         rng: np.random.Generator, draws: int = 32,
                         t_max: int | None = None) -> float:
    """Mean conditional denoising loss on clean latents of the subject.

    ``t_max`` caps the evaluated timestep: low-t losses are where a
    model's grasp of the specific subject shows, high-t losses are
    mostly generic noise prediction.
    """
    cap = sched.T if t_max is None else min(t_max, sched.T)
    frozen = theta.frozen()
    total = 0.0
    for k in range(draws):
        z0 = encode_latent(params, images[k % len(images)], rng)
        t = int(rng.integers(1, cap + 1))
        eps = rng.standard_normal(z0.shape)
        zt = forward_noise(z0, t, eps, sched)
        pred = denoise(frozen, zt, prompt, t)
        total += float(np.sum((eps - pred.data) ** 2))
    return total / draws


def _image_stats(params: EncoderParams, clean: Sequence[np.ndarray],
                 modified: Sequence[np.ndarray]) -> tuple[float, float, float, float, float]:
    shifts = [latent_shift(params, c, m) for c, m in zip(clean, modified)]
    ssims = [ssim(c, m) for c, m in zip(clean, modified)]
    psnrs = [psnr(c, m) for c, m in zip(clean, modified)]
    return (float(np.mean([s.mu_shift_l2sq for s in shifts])),
            float(np.mean([s.sigma_shift_l2sq for s in shifts])),
            float(np.mean([s.logvar_gap_mean for s in shifts])),
            float(np.mean(ssims)), float(np.mean(psnrs)))


def pretrained_base(params: EncoderParams, train_cfg: TrainConfig, seed: int = 1234,
                    steps: int = 800, corpus_size: int = 16,
                    lr: float | None = None) -> DenoiserParams:
    """The shared "pretrained" toy denoiser both sides start from.

    Stands in for the public base model of the threat model: protector
    surrogates and exploiter fine-tuning must share initial weights for
    attack transfer to mean anything. Pretraining pairs each prompt
    with its own generic synthetic subject, so the condition channels
    carry real information and prompt pathways exist for poisoning to
    couple to.
    """
    from latentshield.synthdata import make_subject_images

    theta = train_cfg.new_denoiser(seed, params.latent_channels)
    if steps > 0:
        fy, _ = params.downsample
        size = corpus_size - corpus_size % fy
        corpus = []
        for pid in range(train_cfg.vocab):
            for im in make_subject_images(seed + 1 + pid, 4, size):
                corpus.append((im, PromptId(pid)))
        base_lr = min(train_cfg.lr, 5e-3) if lr is None else lr
        train_denoiser(theta, corpus, params, train_cfg.schedule(), steps,
                       base_lr,
                       np.random.default_rng(np.random.SeedSequence((seed, 90))))
    return theta


def _protect_set(defense: str, params: EncoderParams, images: list[np.ndarray],
                 c_prot: PromptId, protect_cfg: AttackConfig, train_cfg: TrainConfig,
                 seed: int, fsgm_iterations: int, aspl_schedule: AsplSchedule,
                 theta_init: DenoiserParams | None = None,
                 fsgm_surrogate: DenoiserParams | None = None) -> list[np.ndarray]:
    if defense == "none":
        return [im.copy() for im in images]
    if defense == "random":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 40)))
        eps = protect_cfg.epsilon
        return [np.clip(im + rng.uniform(-eps, eps, size=im.shape), 0.0, 1.0)
                for im in images]
    if defense == "pid":
        out = []
        for idx, im in enumerate(images):
            cfg = dataclasses.replace(protect_cfg, loss=LossKind("add_log"),
                                      seed=_subseed(seed, 41, idx))
            out.append(pgd_protect(params, im, cfg).x_protected)
        return out
    if defense == "fsgm":
        cfg = dataclasses.replace(protect_cfg, loss=LossKind("mean"),
                                  iterations=fsgm_iterations, seed=_subseed(seed, 42))
        if fsgm_surrogate is not None:
            # surrogate already fine-tuned on the clean data; skip the
            # driver's own training pass
            return [r.x_protected for r in fsgm_protect(
                params, images, c_prot, cfg,
                dataclasses.replace(train_cfg, steps=0),
                theta_init=fsgm_surrogate)]
        return [r.x_protected for r in fsgm_protect(params, images, c_prot, cfg,
                                                    train_cfg, theta_init=theta_init)]
    if defense == "aspl":
        cfg = dataclasses.replace(protect_cfg, loss=LossKind("mean"),
                                  iterations=max(1, protect_cfg.iterations),
                                  seed=_subseed(seed, 43))
        return [r.x_protected for r in aspl_protect(params, images, c_prot, cfg,
                                                    train_cfg, schedule=aspl_schedule,
                                                    theta_init=theta_init)]
    raise ValueError(f"unknown defense {defense!r}")


def run_mismatch_experiment(params: EncoderParams, dataset: Sequence[np.ndarray],
                            c_prot: PromptId, c_explo_set: Sequence[PromptId],
                            protect_cfg: AttackConfig, train_cfg: TrainConfig,
                            defenses: Sequence[str] = ("none", "fsgm", "aspl", "pid"),
                            seeds: Sequence[int] = (0, 1, 2, 3, 4),
                            fsgm_iterations: int = 100,
                            aspl_schedule: AsplSchedule = AsplSchedule(),
                            eval_draws: int = 32,
                            pretrain_steps: int = 800,
                            base_seed: int = 1234) -> ExperimentReport:
    """Protect with c_prot, fine-tune under each c_explo, measure the
    held-out loss gap. The pid defense ignores prompts by construction.

    Surrogates and exploiter fine-tunes all start from the same
    pretrained toy base model. Fine-tuning rngs depend only on
    (seed, c_explo), so rows are paired across defenses. Row count is
    len(defenses) * len(c_explo_set) * len(seeds).
    """
    if not c_explo_set:
        raise ValueError("c_explo_set must be nonempty")
    if c_prot.id >= train_cfg.vocab:
        raise ValueError(f"c_prot id {c_prot.id} outside vocabulary {train_cfg.vocab}")
    images = [np.asarray(im, dtype=np.float64) for im in dataset]
    sched = train_cfg.schedule()
    digest = config_hash({
        "experiment": "mismatch", "defenses": ",".join(defenses),
        "seeds": ",".join(map(str, seeds)), "c_prot": str(c_prot.id),
        "c_explo": ",".join(str(c.id) for c in c_explo_set),
        "protect": repr(protect_cfg), "train": repr(train_cfg),
        "fsgm_iterations": str(fsgm_iterations), "aspl": repr(aspl_schedule),
        "eval_draws": str(eval_draws), "pretrain_steps": str(pretrain_steps),
        "base_seed": str(base_seed),
    })
    base = pretrained_base(params, train_cfg, seed=base_seed, steps=pretrain_steps)

    def finetune(data: list[np.ndarray], c: PromptId, seed: int) -> DenoiserParams:
        # common random numbers: the draw streams depend on the seed only,
        # so matched/mismatched and across-defense differences are paired
        theta = base.copy()
        train_denoiser(theta, [(im, c) for im in data], params, sched,
                       train_cfg.steps, train_cfg.lr,
                       np.random.default_rng(np.random.SeedSequence((seed, 51))),
                       batch=train_cfg.batch)
        return theta

    def evaluate(theta: DenoiserParams, c: PromptId, seed: int) -> float:
        return heldout_denoise_loss(
            theta, images, c, params, sched,
            np.random.default_rng(np.random.SeedSequence((seed, 52))),
            draws=eval_draws)

    report = ExperimentReport(meta={
        "experiment": "mismatch", "c_prot": c_prot.id,
        "matched_condition": f"c_explo={c_prot.id}", "config_hash": digest,
    })
    for seed in seeds:
        clean_models = {c.id: finetune(images, c, seed) for c in c_explo_set}
        clean_losses = {cid: evaluate(m, PromptId(cid), seed)
                        for cid, m in clean_models.items()}
        # the fsgm surrogate is the clean-data fine-tune at the protection
        # prompt, i.e. exactly the model a matched exploiter would reach
        surrogate = clean_models.get(c_prot.id) or finetune(images, c_prot, seed)
        for defense in defenses:
            protected = _protect_set(defense, params, images, c_prot, protect_cfg,
                                     train_cfg, seed, fsgm_iterations, aspl_schedule,
                                     theta_init=base, fsgm_surrogate=surrogate)
            mu_s, sig_s, gap, ssim_m, psnr_m = _image_stats(params, images, protected)
            for c in c_explo_set:
                final = evaluate(finetune(protected, c, seed), c, seed)
                report.rows.append(ReportRow(
                    defense=defense, condition=f"c_explo={c.id}", seed=seed,
                    final_loss=final, clean_final_loss=clean_losses[c.id],
                    mu_shift=mu_s, sigma_shift=sig_s, logvar_gap=gap,
                    ssim=ssim_m, psnr=psnr_m, config_hash=digest))
    return report


def mismatch_gap_shrink(report: ExperimentReport, defense: str, seed: int,
                        matched_condition: str) -> float:
    """Relative loss-gap shrink from matched to mismatched prompts for
    one defense at one seed (1.0 means the effect vanished)."""
    rows = [r for r in report.rows if r.defense == defense and r.seed == seed]
    matched = [r.final_loss - r.clean_final_loss for r in rows
               if r.condition == matched_condition]
    mismatched = [r.final_loss - r.clean_final_loss for r in rows
                  if r.condition != matched_condition]
    if not matched or not mismatched:
        raise KeyError(f"missing rows for defense={defense!r} seed={seed}")
    g_match = float(np.mean(matched))
    g_mis = float(np.mean(mismatched))
    if g_match == 0.0:
        return 0.0
    return (g_match - g_mis) / abs(g_match)


def run_adaptive_experiment(params: EncoderParams, protected_set: Sequence[ProtectedResult],
                            sigma_modes: Sequence[SigmaMode], train_cfg: TrainConfig,
                            prompt: PromptId = PromptId(0),
                            seeds: Sequence[int] = (0, 1, 2, 3, 4),
                            eval_draws: int = 32,
                            defense_label: str = "pid") -> ExperimentReport:
    """Fine-tune the toy denoiser on latents drawn under each sigma mode
    and record losses plus latent statistics.

    Also logs how often the natural sigma falls below the clip/fix
    threshold, since clipped and fixed coincide only above it.
    """
    allowed = ("natural", "zero", "clipped", "fixed")
    for mode in sigma_modes:
        if mode.kind not in allowed:
            raise ValueError(f"unsupported sigma mode {mode.kind!r}")
    if not protected_set:
        raise ValueError("protected_set must be nonempty")
    protected = [np.asarray(r.x_protected, dtype=np.float64) for r in protected_set]
    clean = [np.clip(p - r.delta, 0.0, 1.0) for p, r in zip(protected, protected_set)]
    sched = train_cfg.schedule()
    digest = config_hash({
        "experiment": "adaptive",
        "modes": ",".join(m.label() for m in sigma_modes),
        "seeds": ",".join(map(str, seeds)), "train": repr(train_cfg),
        "prompt": str(prompt.id), "eval_draws": str(eval_draws),
    })
    report = ExperimentReport(meta={"experiment": "adaptive", "config_hash": digest})

    thresholds = [m.value for m in sigma_modes if m.kind in ("clipped", "fixed")]
    if thresholds:
        thr = min(thresholds)
        below = []
        for p in protected:
            sig = np.exp(0.5 * encode(params, p).logvar.data)
            below.append(float(np.mean(sig < thr)))
        report.meta["sigma_below_threshold_rate"] = float(np.mean(below))
        report.meta["sigma_threshold"] = thr

    mu_s, sig_s, gap, ssim_m, psnr_m = _image_stats(params, clean, protected)
    for mode in sigma_modes:
        for seed in seeds:
            theta = train_cfg.new_denoiser(_subseed(seed, 60), params.latent_channels)
            train_denoiser(theta, [(p, prompt) for p in protected], params, sched,
                           train_cfg.steps, train_cfg.lr,
                           np.random.default_rng(np.random.SeedSequence((seed, 61))),
                           sigma_mode=mode)
            final = heldout_denoise_loss(
                theta, clean, prompt, params, sched,
                np.random.default_rng(np.random.SeedSequence((seed, 62))),
                draws=eval_draws)
            theta_clean = train_cfg.new_denoiser(_subseed(seed, 60), params.latent_channels)
            train_denoiser(theta_clean, [(cimg, prompt) for cimg in clean], params, sched,
                           train_cfg.steps, train_cfg.lr,
                           np.random.default_rng(np.random.SeedSequence((seed, 61))),
                           sigma_mode=mode)
            clean_final = heldout_denoise_loss(
                theta_clean, clean, prompt, params, sched,
                np.random.default_rng(np.random.SeedSequence((seed, 62))),
                draws=eval_draws)
            report.rows.append(ReportRow(
                defense=defense_label, condition=mode.label(), seed=seed,
                final_loss=final, clean_final_loss=clean_final,
                mu_shift=mu_s, sigma_shift=sig_s, logvar_gap=gap,
                ssim=ssim_m, psnr=psnr_m, config_hash=digest))
    return report


def run_corruption_experiment(params: EncoderParams, dataset: Sequence[np.ndarray],
                              protect_cfg: AttackConfig, train_cfg: TrainConfig,
                              corruptions: Sequence[CorruptionSpec],
                              prompt: PromptId = PromptId(0),
                              seeds: Sequence[int] = (0, 1, 2, 3, 4),
                              eval_draws: int = 32) -> ExperimentReport:
    """Fine-tune on corrupted protected data (and corrupted clean data as
    the paired baseline) for each corruption, plus an identity condition."""
    images = [np.asarray(im, dtype=np.float64) for im in dataset]
    sched = train_cfg.schedule()
    digest = config_hash({
        "experiment": "corruption",
        "corruptions": ",".join(c.label() for c in corruptions),
        "seeds": ",".join(map(str, seeds)), "protect": repr(protect_cfg),
        "train": repr(train_cfg), "prompt": str(prompt.id),
        "eval_draws": str(eval_draws),
    })
    report = ExperimentReport(meta={"experiment": "corruption", "config_hash": digest})
    conditions: list[tuple[str, CorruptionSpec | None]] = [("identity", None)]
    conditions += [(spec.label(), spec) for spec in corruptions]

    for seed in seeds:
        protected = []
        for idx, im in enumerate(images):
            cfg = dataclasses.replace(protect_cfg, loss=LossKind("add_log"),
                                      seed=_subseed(seed, 70, idx))
            protected.append(pgd_protect(params, im, cfg).x_protected)
        for label, spec in conditions:
            if spec is None:
                prot_in = protected
                clean_in = images
            else:
                prot_in = [corrupt(p, spec.reseeded(_subseed(seed, 71, i)))
                           for i, p in enumerate(protected)]
                clean_in = [corrupt(im, spec.reseeded(_subseed(seed, 71, i)))
                            for i, im in enumerate(images)]
            losses = {}
            for name, data in (("none", clean_in), ("pid", prot_in)):
                theta = train_cfg.new_denoiser(_subseed(seed, 72), params.latent_channels)
                train_denoiser(theta, [(im, prompt) for im in data], params, sched,
                               train_cfg.steps, train_cfg.lr,
                               np.random.default_rng(np.random.SeedSequence((seed, 73))))
                losses[name] = heldout_denoise_loss(
                    theta, images, prompt, params, sched,
                    np.random.default_rng(np.random.SeedSequence((seed, 74))),
                    draws=eval_draws)
            for name, data in (("none", clean_in), ("pid", prot_in)):
                mu_s, sig_s, gap, ssim_m, psnr_m = _image_stats(params, images, data)
                report.rows.append(ReportRow(
                    defense=name, condition=label, seed=seed,
                    final_loss=losses[name], clean_final_loss=losses["none"],
                    mu_shift=mu_s, sigma_shift=sig_s, logvar_gap=gap,
                    ssim=ssim_m, psnr=psnr_m, config_hash=digest))
    return report
