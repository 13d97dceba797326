"""Command-line interface: batch protection, latent analytics,
robustness experiments, and the gradient-check gate.

Exit codes: 0 success, 1 partial failure (some inputs skipped or
unmatched), 2 configuration error. Every command writes a resolved
configuration echo with a stable hash next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from latentshield.analytics import export_trajectory, latent_shift
from latentshield.attack import (
    AsplSchedule,
    AttackConfig,
    aspl_protect,
    fsgm_protect,
    pgd_protect,
    quantize_roundtrip,
)
from latentshield.autodiff import Tensor, grad_check
from latentshield.diffusion import (
    DEFAULT_PROMPTS,
    PromptId,
    TrainConfig,
    init_denoiser,
    loss_cond,
    loss_uncond,
)
from latentshield.encoder import SigmaMode, encode, init_encoder, load_encoder, sample
from latentshield.imageio import load_image, save_float_sidecar, save_image_png
from latentshield.losses import (
    COMBO_LOSS_NAMES,
    LATENT_LOSS_NAMES,
    clean_cache,
    loss_add,
    loss_add_log,
    loss_kind_from_name,
    loss_mean,
    loss_mean_targeted,
    loss_sample,
    loss_var,
    checkerboard_target,
)
from latentshield.robustness import (
    CorruptionSpec,
    psnr,
    run_adaptive_experiment,
    run_corruption_experiment,
    run_mismatch_experiment,
    ssim,
)
from latentshield.runconfig import (
    ConfigError,
    env_seed,
    load_config_file,
    resolve_config,
    write_config_echo,
)
from latentshield.synthdata import make_subject_images

LOSS_CHOICES = LATENT_LOSS_NAMES + COMBO_LOSS_NAMES


def _subseed(*key) -> int:
    return int(np.random.SeedSequence(tuple(int(k) for k in key)).generate_state(1)[0])


def _build_encoder(preset: str, seed: int, weights: str | None):
    if weights:
        return load_encoder(weights)
    return init_encoder(seed, preset)


# ---------------------------------------------------------------------------
# protect
# ---------------------------------------------------------------------------

PROTECT_DEFAULTS = {
    "protect.loss": "add-log",
    "protect.epsilon": "0.05",
    "protect.steps": "1000",
    "protect.step_size": "",      # empty -> epsilon / 10
    "protect.seed": "",           # empty -> env fallback
    "protect.quantize": "png8",
    "protect.keep_float": "false",
    "protect.jobs": "1",
    "protect.figures": "true",
    "protect.c_prot": "0",
    "encoder.preset": "tiny-8x",
    "encoder.seed": "7",
    "encoder.weights": "",
    "train.steps": "150",
    "train.lr": "0.002",
    "train.T": "50",
    "train.beta_start": "0.0001",
    "train.beta_end": "0.02",
}


def _protect_task(task: dict) -> dict:
    """One image end to end; runs in the worker process."""
    try:
        params = _build_encoder(task["preset"], task["encoder_seed"], task["weights"])
        x = load_image(task["input"])
        cfg = AttackConfig(epsilon=task["epsilon"], step_size=task["step_size"],
                           iterations=task["steps"],
                           loss=loss_kind_from_name(task["loss"]),
                           seed=task["seed"], quantize_output=task["quantize"])
        result = pgd_protect(params, x, cfg)
        return _emit_protected(task, x, result)
    except Exception as exc:  # surfaced as a skip in the manifest
        return {"input": task["input"], "error": f"{type(exc).__name__}: {exc}"}


def _emit_protected(task: dict, x: np.ndarray, result) -> dict:
    out_dir = Path(task["out_dir"])
    stem = Path(task["input"]).stem
    out_png = out_dir / f"{stem}.png"
    x_out = result.x_protected
    if task["quantize"] == "png8":
        x_out = quantize_roundtrip(x_out, "png8")
    save_image_png(out_png, x_out)
    traj_csv = out_dir / f"{stem}_trajectory.csv"
    export_trajectory(result.trajectory, traj_csv)
    if task["figures"]:
        from latentshield.figures import plot_trajectory
        plot_trajectory(result.trajectory, out_dir / f"{stem}_trajectory.png", title=stem)
    if task["keep_float"]:
        save_float_sidecar(out_dir / f"{stem}_float.lse1", stem,
                           {"delta": result.delta, "x_protected": result.x_protected},
                           seed=task["seed"])
    return {"input": task["input"], "output": str(out_png), "trajectory": str(traj_csv)}


def cmd_protect(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    flags = {
        "protect.loss": args.loss,
        "protect.epsilon": args.epsilon,
        "protect.steps": args.steps,
        "protect.step_size": args.step_size,
        "protect.seed": args.seed,
        "protect.quantize": args.quantize,
        "protect.keep_float": "true" if args.keep_float else None,
        "protect.jobs": args.jobs,
        "protect.figures": "false" if args.no_figures else None,
        "protect.c_prot": args.c_prot,
        "encoder.preset": args.preset,
        "encoder.seed": args.encoder_seed,
        "encoder.weights": args.weights,
    }
    flags = {k: str(v) for k, v in flags.items() if v is not None}
    resolved = resolve_config(PROTECT_DEFAULTS, file_cfg, flags)

    loss_name = resolved["protect.loss"]
    if loss_name not in LOSS_CHOICES:
        raise ConfigError(f"unknown loss {loss_name!r}; choices: {', '.join(LOSS_CHOICES)}")
    epsilon = float(resolved["protect.epsilon"])
    steps = int(resolved["protect.steps"])
    step_size = (float(resolved["protect.step_size"])
                 if resolved["protect.step_size"] else epsilon / 10.0)
    master_seed = (int(resolved["protect.seed"]) if resolved["protect.seed"]
                   else env_seed(0))
    resolved["protect.seed"] = str(master_seed)
    resolved["protect.step_size"] = repr(step_size)

    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    inputs = sorted(p for p in in_dir.glob("*.png"))
    if not inputs:
        raise ConfigError(f"no PNG inputs in {in_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = write_config_echo(out_dir, resolved)

    common = {
        "out_dir": str(out_dir),
        "loss": loss_name,
        "epsilon": epsilon,
        "steps": steps,
        "step_size": step_size,
        "quantize": resolved["protect.quantize"],
        "keep_float": resolved["protect.keep_float"].lower() == "true",
        "figures": resolved["protect.figures"].lower() == "true",
        "preset": resolved["encoder.preset"],
        "encoder_seed": int(resolved["encoder.seed"]),
        "weights": resolved["encoder.weights"] or None,
    }

    rows: list[dict]
    if loss_name in COMBO_LOSS_NAMES:
        rows = _protect_combo_batch(inputs, common, resolved, master_seed)
    else:
        tasks = [dict(common, input=str(p), seed=_subseed(master_seed, idx))
                 for idx, p in enumerate(inputs)]
        jobs = max(1, int(resolved["protect.jobs"]))
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                rows = list(pool.map(_protect_task, tasks))
        else:
            rows = [_protect_task(t) for t in tasks]

    failed = [r for r in rows if "error" in r]
    for r in failed:
        print(f"warning: skipped {r['input']}: {r['error']}", file=sys.stderr)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w") as fh:
        # outputs are recorded relative to the manifest so reruns into a
        # different directory stay byte-identical
        fh.write("input,output,trajectory,config_hash\n")
        for r in rows:
            if "error" not in r:
                out_name = Path(r["output"]).name
                traj_name = Path(r["trajectory"]).name
                fh.write(f"{Path(r['input']).name},{out_name},{traj_name},{digest}\n")
    print(f"protected {len(rows) - len(failed)}/{len(rows)} images -> {out_dir}")
    return 1 if failed else 0


def _protect_combo_batch(inputs, common: dict, resolved: dict, master_seed: int) -> list[dict]:
    """Combo objectives need a surrogate over the whole batch."""
    params = _build_encoder(common["preset"], common["encoder_seed"], common["weights"])
    images, rows, readable = [], [], []
    for p in inputs:
        try:
            images.append(load_image(p))
            readable.append(p)
        except Exception as exc:
            rows.append({"input": str(p), "error": f"{type(exc).__name__}: {exc}"})
    if not images:
        return rows
    train_cfg = TrainConfig(steps=int(resolved["train.steps"]),
                            lr=float(resolved["train.lr"]),
                            T=int(resolved["train.T"]),
                            beta_start=float(resolved["train.beta_start"]),
                            beta_end=float(resolved["train.beta_end"]))
    c_prot = PromptId(int(resolved["protect.c_prot"]))
    cfg = AttackConfig(epsilon=common["epsilon"], step_size=common["step_size"],
                       iterations=common["steps"],
                       loss=loss_kind_from_name(common["loss"]),
                       seed=master_seed, quantize_output=common["quantize"])
    driver = fsgm_protect if common["loss"] == "combo-fsgm" else aspl_protect
    results = driver(params, images, c_prot, cfg, train_cfg)
    for p, img, res in zip(readable, images, results):
        task = dict(common, input=str(p), seed=master_seed)
        rows.append(_emit_protected(task, img, res))
    return rows


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------

STATS_DEFAULTS = {
    "stats.svg": "false",
    "stats.figures": "true",
    "encoder.preset": "tiny-8x",
    "encoder.seed": "7",
    "encoder.weights": "",
}


def _shift_svg(stem: str, shift, path) -> None:
    bars = [("mu_shift", shift.mu_shift_l2sq), ("sigma_shift", shift.sigma_shift_l2sq),
            ("logvar_gap", abs(shift.logvar_gap_mean))]
    peak = max(v for _, v in bars) or 1.0
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="320" height="200" '
             'viewBox="0 0 320 200">', '<rect width="320" height="200" fill="white"/>']
    for i, (name, val) in enumerate(bars):
        h = 140.0 * val / peak
        x0 = 40 + i * 90
        parts.append(f'<rect x="{x0}" y="{170 - h:.2f}" width="60" height="{h:.2f}" '
                     f'fill="#4878a8"/>')
        parts.append(f'<text x="{x0}" y="185" font-size="10">{name}</text>')
        parts.append(f'<text x="{x0}" y="{165 - h:.2f}" font-size="9">{val:.3g}</text>')
    parts.append(f'<text x="10" y="16" font-size="11">{stem}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def cmd_stats(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    flags = {
        "stats.svg": "true" if args.svg else None,
        "stats.figures": "false" if args.no_figures else None,
        "encoder.preset": args.preset,
        "encoder.seed": args.encoder_seed,
        "encoder.weights": args.weights,
    }
    flags = {k: str(v) for k, v in flags.items() if v is not None}
    resolved = resolve_config(STATS_DEFAULTS, file_cfg, flags)

    clean_dir, pert_dir, out_dir = Path(args.clean_dir), Path(args.pert_dir), Path(args.out_dir)
    clean_files = {p.name: p for p in clean_dir.glob("*.png")}
    pert_files = {p.name: p for p in pert_dir.glob("*.png")}
    matched = sorted(set(clean_files) & set(pert_files))
    unmatched = sorted(set(clean_files) ^ set(pert_files))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config_echo(out_dir, resolved)
    for name in unmatched:
        print(f"warning: unmatched file {name}", file=sys.stderr)

    params = _build_encoder(resolved["encoder.preset"], int(resolved["encoder.seed"]),
                            resolved["encoder.weights"] or None)
    lines = ["file,mu_shift,sigma_shift,logvar_gap,ssim,psnr"]
    names, mus, sigs = [], [], []
    for name in matched:
        x = load_image(clean_files[name])
        y = load_image(pert_files[name])
        shift = latent_shift(params, x, y)
        lines.append(",".join([name, repr(shift.mu_shift_l2sq), repr(shift.sigma_shift_l2sq),
                               repr(shift.logvar_gap_mean), repr(ssim(x, y)), repr(psnr(x, y))]))
        names.append(name)
        mus.append(shift.mu_shift_l2sq)
        sigs.append(shift.sigma_shift_l2sq)
        if resolved["stats.svg"].lower() == "true":
            _shift_svg(name, shift, out_dir / f"{Path(name).stem}_shift.svg")
    (out_dir / "stats.csv").write_text("\n".join(lines) + "\n")
    if names and resolved["stats.figures"].lower() == "true":
        from latentshield.figures import plot_shift_summary
        plot_shift_summary(names, mus, sigs, out_dir / "latent_shift_summary.png")
    print(f"stats for {len(matched)} pairs -> {out_dir}")
    return 1 if unmatched else 0


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

EXPERIMENT_DEFAULTS = {
    "experiment.seeds": "3,4,5,6,7",
    "experiment.figures": "true",
    "data.images": "4",
    "data.size": "16",
    "data.seed": "5",
    "data.dir": "",
    "encoder.preset": "micro-4x",
    "encoder.seed": "7",
    "train.steps": "150",
    "train.lr": "0.005",
    "train.T": "50",
    "train.beta_start": "0.0001",
    "train.beta_end": "0.02",
    "train.hidden": "16",
    "train.t_channels": "4",
    "train.vocab": "4",
    "train.cond_gain": "4.0",
    "train.batch": "4",
    "protect.epsilon": "0.05",
    "protect.steps": "200",
    "protect.step_size": "",
    "protect.objective_draws": "4",
    "eval.draws": "128",
    "mismatch.c_prot": "0",
    "mismatch.c_explo": "0,1,2,3",
    "mismatch.defenses": "none,fsgm,aspl,pid",
    "mismatch.fsgm_iterations": "100",
    "mismatch.aspl_outer": "50",
    "mismatch.aspl_model_steps": "3",
    "mismatch.aspl_delta_steps": "6",
    "mismatch.pretrain_steps": "800",
    "mismatch.base_seed": "1234",
    "adaptive.modes": "natural,zero,clipped,fixed",
    "adaptive.sigma_value": "1e-7",
    "corruption.kinds": "resize_crop,smooth_uniform,gaussian_denoise,jpeg",
    "corruption.jpeg_quality": "75",
    "corruption.scale_min": "0.8",
    "corruption.scale_max": "1.0",
    "corruption.amplitude": "0.05",
    "corruption.blur_sigma": "1.0",
}


def _experiment_dataset(resolved: dict) -> list[np.ndarray]:
    if resolved["data.dir"]:
        paths = sorted(Path(resolved["data.dir"]).glob("*.png"))
        if not paths:
            raise ConfigError(f"no PNG inputs in {resolved['data.dir']}")
        return [load_image(p) for p in paths]
    return make_subject_images(int(resolved["data.seed"]), int(resolved["data.images"]),
                               int(resolved["data.size"]))


def cmd_experiment(args) -> int:
    file_cfg = load_config_file(args.config) if args.config else {}
    resolved = resolve_config(EXPERIMENT_DEFAULTS, file_cfg, {})
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved["experiment.kind"] = args.kind
    write_config_echo(out_dir, resolved)

    seeds = [int(s) for s in resolved["experiment.seeds"].split(",") if s]
    dataset = _experiment_dataset(resolved)
    params = init_encoder(int(resolved["encoder.seed"]), resolved["encoder.preset"])
    train_cfg = TrainConfig(
        steps=int(resolved["train.steps"]), lr=float(resolved["train.lr"]),
        T=int(resolved["train.T"]), beta_start=float(resolved["train.beta_start"]),
        beta_end=float(resolved["train.beta_end"]), hidden=int(resolved["train.hidden"]),
        t_channels=int(resolved["train.t_channels"]), vocab=int(resolved["train.vocab"]),
        cond_gain=float(resolved["train.cond_gain"]), batch=int(resolved["train.batch"]))
    epsilon = float(resolved["protect.epsilon"])
    step_size = (float(resolved["protect.step_size"]) if resolved["protect.step_size"]
                 else epsilon / 10.0)
    protect_cfg = AttackConfig(epsilon=epsilon, step_size=step_size,
                               iterations=int(resolved["protect.steps"]),
                               objective_draws=int(resolved["protect.objective_draws"]))
    draws = int(resolved["eval.draws"])

    if args.kind == "mismatch":
        c_prot = PromptId(int(resolved["mismatch.c_prot"]))
        c_explo = [PromptId(int(s)) for s in resolved["mismatch.c_explo"].split(",") if s]
        defenses = [d for d in resolved["mismatch.defenses"].split(",") if d]
        schedule = AsplSchedule(outer=int(resolved["mismatch.aspl_outer"]),
                                model_steps=int(resolved["mismatch.aspl_model_steps"]),
                                delta_steps=int(resolved["mismatch.aspl_delta_steps"]))
        report = run_mismatch_experiment(
            params, dataset, c_prot, c_explo, protect_cfg, train_cfg,
            defenses=defenses, seeds=seeds,
            fsgm_iterations=int(resolved["mismatch.fsgm_iterations"]),
            aspl_schedule=schedule, eval_draws=draws,
            pretrain_steps=int(resolved["mismatch.pretrain_steps"]),
            base_seed=int(resolved["mismatch.base_seed"]))
    elif args.kind == "adaptive":
        value = float(resolved["adaptive.sigma_value"])
        mode_table = {"natural": SigmaMode.natural(), "zero": SigmaMode.zero(),
                      "clipped": SigmaMode.clipped(value), "fixed": SigmaMode.fixed(value)}
        names = [m for m in resolved["adaptive.modes"].split(",") if m]
        bad = [m for m in names if m not in mode_table]
        if bad:
            raise ConfigError(f"unknown sigma modes: {', '.join(bad)}")
        protected = []
        for idx, im in enumerate(dataset):
            cfg = dataclasses.replace(protect_cfg, seed=_subseed(seeds[0], 80, idx))
            protected.append(pgd_protect(params, im, cfg))
        report = run_adaptive_experiment(params, protected,
                                         [mode_table[m] for m in names],
                                         train_cfg, seeds=seeds, eval_draws=draws)
    elif args.kind == "corruption":
        kinds = [k for k in resolved["corruption.kinds"].split(",") if k]
        table = {
            "resize_crop": CorruptionSpec.resize_crop(
                float(resolved["corruption.scale_min"]),
                float(resolved["corruption.scale_max"])),
            "smooth_uniform": CorruptionSpec.smooth_uniform(
                float(resolved["corruption.amplitude"])),
            "gaussian_denoise": CorruptionSpec.gaussian_denoise(
                float(resolved["corruption.blur_sigma"])),
            "jpeg": CorruptionSpec.jpeg(int(resolved["corruption.jpeg_quality"])),
        }
        bad = [k for k in kinds if k not in table]
        if bad:
            raise ConfigError(f"unknown corruption kinds: {', '.join(bad)}")
        report = run_corruption_experiment(params, dataset, protect_cfg, train_cfg,
                                           [table[k] for k in kinds], seeds=seeds,
                                           eval_draws=draws)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown experiment kind {args.kind!r}")

    report.write_csv(out_dir / "report.csv")
    report.write_summary(out_dir / "summary.json")
    if resolved["experiment.figures"].lower() == "true":
        from latentshield.figures import plot_report_bars
        plot_report_bars(report, out_dir / "report_summary.png")
    print(f"{args.kind} experiment: {len(report.rows)} rows -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _gradcheck_suite(params, seed: int, tol: float) -> list[tuple[str, object]]:
    """grad_check every objective wrt the input image at a random
    in-budget perturbation."""
    rng = np.random.default_rng(seed)
    fy, fx = params.downsample
    size = max(fy, fx, 8)
    size += (-size) % fy
    x = np.clip(0.3 + 0.4 * rng.random((3, size, size)), 0.0, 1.0)
    if params.preset == "debug-linear":
        x = rng.random((params.head_mu.shape[1], params.head_mu.shape[2],
                        params.head_mu.shape[3]))
    delta0 = rng.uniform(-0.03, 0.03, size=x.shape)
    cache = clean_cache(params, x)
    target = checkerboard_target(x.shape)
    theta = init_denoiser(seed, params.latent_channels)
    sched = TrainConfig().schedule()
    frozen_pair = (rng.standard_normal(cache.mu0.shape),
                   rng.standard_normal(cache.mu0.shape))

    def through_encoder(fn):
        def f(d):
            return fn(encode(params, Tensor(x) + d))
        return f

    def diffusion_loss(conditional: bool):
        def f(d):
            dist = encode(params, Tensor(x) + d)
            z0 = sample(dist, frozen_pair[0])
            fixed_rng = np.random.default_rng(seed + 1)
            if conditional:
                return loss_cond(theta.frozen(), DEFAULT_PROMPTS[0], z0, sched, fixed_rng)
            return loss_uncond(theta.frozen(), z0, sched, fixed_rng)
        return f

    suite = [
        ("mean", through_encoder(lambda dist: loss_mean(cache, dist))),
        ("var", through_encoder(lambda dist: loss_var(cache, dist))),
        ("sample", lambda d: loss_sample(params, x, d, rng, cache=cache,
                                         noise_pair=frozen_pair)),
        ("add", through_encoder(lambda dist: loss_add(cache, dist))),
        ("add-log", through_encoder(lambda dist: loss_add_log(cache, dist))),
        ("mean-target", lambda d: loss_mean_targeted(params, x, d, target)),
        ("uncond", diffusion_loss(False)),
        ("cond", diffusion_loss(True)),
    ]
    reports = []
    coords = [tuple(c) for c in rng.integers(0, np.array(x.shape),
                                             size=(24, x.ndim))]
    for name, f in suite:
        reports.append((name, grad_check(f, Tensor(delta0), h=1e-4, tol=tol,
                                         indices=coords)))
    return reports


def cmd_gradcheck(args) -> int:
    presets = ["tiny-8x", "micro-4x"] if args.preset == "all" else [args.preset]
    all_ok = True
    for preset in presets:
        try:
            params = _build_encoder(preset, args.seed, args.weights)
        except Exception as exc:
            print(f"error: failed to load encoder: {exc}", file=sys.stderr)
            return 2
        for name, report in _gradcheck_suite(params, args.seed, args.tol):
            print(f"preset={params.preset:<12} loss={name:<12} {report}")
            all_ok = all_ok and report.passed
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentshield",
        description="Prompt-independent protective perturbations for images")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("protect", help="craft protected copies of a directory of PNGs")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--loss", choices=LOSS_CHOICES)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=["tiny-8x", "micro-4x"])
    p.add_argument("--encoder-seed", dest="encoder_seed", type=int)
    p.add_argument("--weights", help="LSE1 encoder weight file")
    p.add_argument("--keep-float", action="store_true",
                   help="write the unquantized delta as an LSE1 sidecar")
    p.add_argument("--quantize", choices=["png8", "none"])
    p.add_argument("--jobs", type=int, help="parallel per-image jobs")
    p.add_argument("--c-prot", dest="c_prot", type=int,
                   help="protection prompt id (combo losses)")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("stats", help="latent-shift statistics for clean/perturbed pairs")
    p.add_argument("--clean", dest="clean_dir", required=True)
    p.add_argument("--pert", dest="pert_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--preset", choices=["tiny-8x", "micro-4x"])
    p.add_argument("--encoder-seed", dest="encoder_seed", type=int)
    p.add_argument("--weights")
    p.add_argument("--svg", action="store_true", help="one SVG per pair")
    p.add_argument("--config")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("experiment", help="robustness experiment grids")
    p.add_argument("kind", choices=["mismatch", "adaptive", "corruption"])
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference gate for every objective")
    p.add_argument("--preset", default="all", choices=["all", "tiny-8x", "micro-4x"])
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--weights")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
