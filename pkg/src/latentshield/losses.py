"""Protection objectives evaluated through the encoder with autodiff.

Every objective compares the latent distribution of the perturbed image
against detached clean-image statistics (the clean side is a constant:
differentiating through both sides would double the cost and cancel
nothing useful). All norms are sums over elements, not means.

Catalog:

    mean           squared L2 between latent means
    var            squared L2 between latent standard deviations
    sample         squared L2 between independent reparameterized draws
    add            mean + var
    add_log        mean + summed log-variance gap (the flagship target)
    mean_targeted  negated squared L2 to a target image's mean
    combo          conditional-denoising term + lambda * latent term
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from latentshield.autodiff import (
    Tensor,
    as_tensor,
    op_add,
    op_elementwise,
    op_mul,
    op_reduce,
    op_sub,
)
from latentshield.encoder import (
    EncoderParams,
    LatentDistribution,
    SigmaMode,
    apply_sigma_mode,
    encode,
)

__all__ = [
    "CleanLatentCache",
    "LossKind",
    "clean_cache",
    "loss_mean",
    "loss_var",
    "loss_add",
    "loss_add_log",
    "loss_sample",
    "loss_mean_targeted",
    "loss_combo",
    "checkerboard_target",
    "loss_kind_from_name",
    "make_latent_evaluator",
    "LATENT_LOSS_NAMES",
]

LATENT_LOSS_NAMES = ("mean", "var", "sample", "add", "add-log", "mean-target")
COMBO_LOSS_NAMES = ("combo-fsgm", "combo-aspl")
DEFAULT_LAMBDA = 0.05


@dataclass
class CleanLatentCache:
    """Detached clean-image latent statistics, keyed on (image, encoder)."""

    mu0: np.ndarray
    logvar0: np.ndarray
    sigma0: np.ndarray
    key: str


def _cache_key(params: EncoderParams, x: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(params.fingerprint().encode())
    h.update(np.ascontiguousarray(x).tobytes())
    return h.hexdigest()[:16]


def clean_cache(params: EncoderParams, x, cache: CleanLatentCache | None = None) -> CleanLatentCache:
    """Return a cache for (params, x), reusing ``cache`` when its key matches."""
    arr = np.asarray(x, dtype=np.float64)
    key = _cache_key(params, arr)
    if cache is not None and cache.key == key:
        return cache
    dist = encode(params, arr)
    logvar0 = dist.logvar.data.copy()
    return CleanLatentCache(mu0=dist.mu.data.copy(), logvar0=logvar0,
                            sigma0=np.exp(0.5 * logvar0), key=key)


def _sum_sq(diff: Tensor) -> Tensor:
    return op_reduce(op_elementwise(diff, "square"), "sum")


def loss_mean(cache: CleanLatentCache, dist_pert: LatentDistribution) -> Tensor:
    """Sum of squared differences between perturbed and clean means."""
    if dist_pert.mu.shape != cache.mu0.shape:
        raise ValueError(f"latent shape {dist_pert.mu.shape} != cached {cache.mu0.shape}")
    return _sum_sq(op_sub(dist_pert.mu, Tensor(cache.mu0)))


def loss_var(cache: CleanLatentCache, dist_pert: LatentDistribution) -> Tensor:
    """Sum of squared differences between perturbed and clean sigmas."""
    sigma = op_elementwise(op_elementwise(dist_pert.logvar, "mul_const", const=0.5), "exp")
    return _sum_sq(op_sub(sigma, Tensor(cache.sigma0)))


def loss_add(cache: CleanLatentCache, dist_pert: LatentDistribution) -> Tensor:
    return op_add(loss_mean(cache, dist_pert), loss_var(cache, dist_pert))


def loss_add_log(cache: CleanLatentCache, dist_pert: LatentDistribution,
                 log_term: str = "sum") -> Tensor:
    """Mean term plus the log-variance gap.

    The log of the variance ratio is computed as a logvar subtraction,
    no exponentials involved; it can be negative when the variance
    shrinks. ``log_term`` picks the elementwise reduction ("sum",
    default, or "mean").
    """
    if log_term not in ("sum", "mean"):
        raise ValueError(f"log_term must be 'sum' or 'mean', got {log_term!r}")
    gap = op_reduce(op_sub(dist_pert.logvar, Tensor(cache.logvar0)), log_term)
    return op_add(loss_mean(cache, dist_pert), gap)


def loss_sample(params: EncoderParams, x, delta, rng: np.random.Generator,
                cache: CleanLatentCache | None = None,
                tied_noise: bool = False,
                noise_pair: tuple[np.ndarray, np.ndarray] | None = None,
                sigma_mode: SigmaMode | None = None) -> Tensor:
    """Squared L2 between a perturbed-image draw and a clean-image draw.

    One fresh noise pair per evaluation (single-sample estimator);
    ``tied_noise`` reuses the first draw for both sides, ``noise_pair``
    freezes the draws entirely. The clean side is detached.
    """
    x_arr = np.asarray(x, dtype=np.float64)
    cache = clean_cache(params, x_arr, cache)
    xp = op_add(as_tensor(x_arr), as_tensor(delta))
    dist = encode(params, xp)
    if sigma_mode is not None:
        dist = apply_sigma_mode(dist, sigma_mode)

    if noise_pair is not None:
        eps1, eps2 = noise_pair
    else:
        eps1 = rng.standard_normal(cache.mu0.shape)
        eps2 = eps1 if tied_noise else rng.standard_normal(cache.mu0.shape)

    if dist.sigma_override is not None:
        z_pert = op_add(dist.mu, Tensor(dist.sigma_override * eps1))
        sigma0 = dist.sigma_override if sigma_mode is not None and sigma_mode.kind != "natural" \
            else cache.sigma0
    else:
        sigma = op_elementwise(op_elementwise(dist.logvar, "mul_const", const=0.5), "exp")
        z_pert = op_add(dist.mu, op_mul(sigma, Tensor(eps1)))
        sigma0 = cache.sigma0
    z_clean = cache.mu0 + sigma0 * eps2
    return _sum_sq(op_sub(z_pert, Tensor(z_clean)))


def loss_mean_targeted(params: EncoderParams, x, delta, x_target) -> Tensor:
    """Negated squared distance from the perturbed mean to the target
    image's mean; maximizing pulls the latent mean onto the target."""
    x_arr = np.asarray(x, dtype=np.float64)
    tgt = np.asarray(x_target, dtype=np.float64)
    if tgt.shape != x_arr.shape:
        raise ValueError(f"target shape {tgt.shape} != image shape {x_arr.shape}")
    mu_target = encode(params, tgt).mu.data
    xp = op_add(as_tensor(x_arr), as_tensor(delta))
    dist = encode(params, xp)
    return op_elementwise(_sum_sq(op_sub(dist.mu, Tensor(mu_target))), "mul_const", const=-1.0)


def loss_combo(t_eval: Callable[[Tensor], Tensor], l_eval: Callable[[Tensor], Tensor],
               lam: float) -> Callable[[Tensor], Tensor]:
    """Weighted combination of a conditional-denoising defense term and a
    latent-distribution term: T(xp) + lam * L(xp)."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")

    def evaluator(xp: Tensor) -> Tensor:
        return op_add(t_eval(xp), op_elementwise(l_eval(xp), "mul_const", const=lam))

    return evaluator


def checkerboard_target(shape: tuple[int, int, int], tile: int | None = None,
                        low: float = 0.25, high: float = 0.75) -> np.ndarray:
    """Deterministic checkerboard image, the default target for the
    targeted-mean objective."""
    c, h, w = shape
    if tile is None:
        tile = max(1, h // 8)
    ys, xs = np.indices((h, w))
    board = ((ys // tile + xs // tile) % 2).astype(np.float64)
    img = low + (high - low) * board
    return np.broadcast_to(img, (c, h, w)).copy()


@dataclass(frozen=True, eq=False)
class LossKind:
    """Selector for a protection objective.

    ``kind`` is one of mean | var | sample | add | add_log |
    mean_targeted | combo. Combo carries the surrogate flavor
    (fsgm_surrogate or aspl_inner) and the tradeoff lambda.
    """

    kind: str
    lam: float = DEFAULT_LAMBDA
    combo_base: str | None = None
    latent_part: str = "add_log"   # combo only; "mean" gives the older
                                   # surrogate-plus-textural formulation
    target: np.ndarray | None = None
    sample_fixed_noise: bool = False
    log_term: str = "sum"

    def __post_init__(self):
        valid = ("mean", "var", "sample", "add", "add_log", "mean_targeted", "combo")
        if self.kind not in valid:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {valid}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.kind == "combo":
            if self.combo_base not in ("fsgm_surrogate", "aspl_inner"):
                raise ValueError("combo needs combo_base in {'fsgm_surrogate', 'aspl_inner'}")
            if self.latent_part not in ("mean", "var", "add", "add_log"):
                raise ValueError(f"combo latent_part must be a deterministic latent "
                                 f"objective, got {self.latent_part!r}")

    @property
    def name(self) -> str:
        if self.kind == "combo":
            return {"fsgm_surrogate": "combo-fsgm", "aspl_inner": "combo-aspl"}[self.combo_base]
        return {"add_log": "add-log", "mean_targeted": "mean-target"}.get(self.kind, self.kind)


def loss_kind_from_name(name: str, lam: float = DEFAULT_LAMBDA,
                        target: np.ndarray | None = None) -> LossKind:
    """Map a CLI loss name to its selector."""
    table = {
        "mean": LossKind("mean"),
        "var": LossKind("var"),
        "sample": LossKind("sample"),
        "add": LossKind("add"),
        "add-log": LossKind("add_log"),
        "mean-target": LossKind("mean_targeted", target=target),
        "combo-fsgm": LossKind("combo", lam=lam, combo_base="fsgm_surrogate"),
        "combo-aspl": LossKind("combo", lam=lam, combo_base="aspl_inner"),
    }
    if name not in table:
        raise ValueError(f"unknown loss {name!r}; expected one of "
                         f"{LATENT_LOSS_NAMES + COMBO_LOSS_NAMES}")
    return table[name]


def make_latent_evaluator(params: EncoderParams, x, kind: LossKind,
                          rng: np.random.Generator,
                          sigma_mode: SigmaMode | None = None) -> Callable[[Tensor], Tensor]:
    """Build an evaluator mapping a perturbed image tensor to a scalar
    objective, with the clean-image statistics cached once."""
    x_arr = np.asarray(x, dtype=np.float64)
    cache = clean_cache(params, x_arr)

    if kind.kind == "sample":
        frozen_pair = None
        if kind.sample_fixed_noise:
            eps1 = rng.standard_normal(cache.mu0.shape)
            eps2 = rng.standard_normal(cache.mu0.shape)
            frozen_pair = (eps1, eps2)

        def evaluator(xp: Tensor) -> Tensor:
            delta = op_sub(xp, Tensor(x_arr))
            return loss_sample(params, x_arr, delta, rng, cache=cache,
                               noise_pair=frozen_pair, sigma_mode=sigma_mode)

        return evaluator

    if kind.kind == "mean_targeted":
        target = kind.target if kind.target is not None else checkerboard_target(x_arr.shape)
        mu_target = encode(params, np.asarray(target, dtype=np.float64)).mu.data

        def evaluator(xp: Tensor) -> Tensor:
            dist = encode(params, xp)
            return op_elementwise(_sum_sq(op_sub(dist.mu, Tensor(mu_target))),
                                  "mul_const", const=-1.0)

        return evaluator

    if kind.kind in ("mean", "var", "add", "add_log"):
        fns = {
            "mean": lambda d: loss_mean(cache, d),
            "var": lambda d: loss_var(cache, d),
            "add": lambda d: loss_add(cache, d),
            "add_log": lambda d: loss_add_log(cache, d, log_term=kind.log_term),
        }
        fn = fns[kind.kind]

        def evaluator(xp: Tensor) -> Tensor:
            return fn(encode(params, xp))

        return evaluator

    raise ValueError(f"{kind.kind!r} is not a pure latent objective; "
                     "combo objectives are wired by the attack drivers")
