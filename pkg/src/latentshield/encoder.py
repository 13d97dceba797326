"""Convolutional Gaussian image encoder with reparameterized sampling.

The encoder maps a (C, H, W) image in [0, 1] to a diagonal Gaussian
over latent elements, parameterized as (mu, logvar). Predicting the
log-variance keeps log-ratio objectives a plain subtraction and makes
sigma = exp(logvar / 2) positive by construction.

Presets:

    tiny-8x       3 stride-2 conv layers, x8 downsample, 4 latent channels
    micro-4x      2 stride-2 conv layers, x4 downsample, 2 latent channels
    debug-linear  a single dense map per head (mu = W x exactly), for
                  closed-form oracles; requires the image shape up front

Sigma modes model an exploiter substituting the predicted standard
deviation before sampling (zeroing, clipping, or fixing it). The
substitution is applied at the sampling site as an explicit sigma
array; logvar is never pushed to -inf.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from latentshield.autodiff import Tensor, as_tensor, op_add, op_conv2d, op_elementwise, op_mul
from latentshield.container import SECTION_ENCODER, load_container, save_container

__all__ = [
    "ConvSpec",
    "EncoderParams",
    "LatentDistribution",
    "SigmaMode",
    "init_encoder",
    "encode",
    "sample",
    "apply_sigma_mode",
    "save_encoder",
    "load_encoder",
]

VERSION_TAG = "lse-enc-1"

# (in_ch, out_ch, kernel, stride, padding) per backbone layer, the
# latent channel count fed by the two 1x1 heads, and the head output
# gain. The fan-in uniform init shrinks activations layer over layer;
# the gain restores latents to the O(1) scale a trained variational
# encoder produces, without which downstream diffusion training is
# insensitive to the data.
_PRESETS: dict[str, tuple[tuple[tuple[int, int, int, int, int], ...], int, float]] = {
    "tiny-8x": (((3, 8, 3, 2, 1), (8, 12, 3, 2, 1), (12, 16, 3, 2, 1)), 4, 125.0),
    "micro-4x": (((3, 6, 3, 2, 1), (6, 8, 3, 2, 1)), 2, 50.0),
}


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    padding: int


@dataclass
class EncoderParams:
    preset: str
    seed: int
    arch: tuple[ConvSpec, ...]
    weights: list[Tensor]          # backbone kernels, one per arch entry
    head_mu: Tensor
    head_logvar: Tensor
    output_gain: float = 1.0
    version_tag: str = VERSION_TAG

    def __post_init__(self):
        if self.head_mu.shape != self.head_logvar.shape:
            raise ValueError("head_mu and head_logvar must share a shape")

    @property
    def downsample(self) -> tuple[int, int]:
        if self.preset == "debug-linear":
            # the dense heads consume the whole image
            _, _, kh, kw = self.head_mu.shape
            return (kh, kw)
        f = 1
        for spec in self.arch:
            f *= spec.stride
        return (f, f)

    @property
    def latent_channels(self) -> int:
        return self.head_mu.shape[0]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.preset.encode())
        h.update(str(self.seed).encode())
        h.update(repr(self.output_gain).encode())
        for w in self.weights:
            h.update(w.data.tobytes())
        h.update(self.head_mu.data.tobytes())
        h.update(self.head_logvar.data.tobytes())
        return h.hexdigest()[:16]


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over latent elements, as (mu, logvar) tensors.

    ``sigma_override``, when set, replaces exp(logvar/2) at the sampling
    site; it is an exploiter-side constant and may contain zeros.
    """

    mu: Tensor
    logvar: Tensor
    sigma_override: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError(f"mu/logvar shape mismatch: {self.mu.shape} vs {self.logvar.shape}")
        if not np.all(np.isfinite(self.logvar.data)):
            raise ValueError("logvar contains non-finite values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    def sigma_values(self) -> np.ndarray:
        """Effective standard deviation as a plain array."""
        if self.sigma_override is not None:
            return self.sigma_override
        return np.exp(0.5 * self.logvar.data)


@dataclass(frozen=True)
class SigmaMode:
    """How the latent standard deviation is treated when sampling."""

    kind: str                      # natural | zero | clipped | fixed
    value: float | None = None     # cap for clipped, constant for fixed

    def __post_init__(self):
        if self.kind not in ("natural", "zero", "clipped", "fixed"):
            raise ValueError(f"unknown sigma mode {self.kind!r}")
        if self.kind == "clipped" and (self.value is None or self.value <= 0):
            raise ValueError("clipped mode needs a positive cap")
        if self.kind == "fixed" and (self.value is None or self.value < 0):
            raise ValueError("fixed mode needs a nonnegative value")

    @classmethod
    def natural(cls) -> "SigmaMode":
        return cls("natural")

    @classmethod
    def zero(cls) -> "SigmaMode":
        return cls("zero")

    @classmethod
    def clipped(cls, cap: float) -> "SigmaMode":
        return cls("clipped", float(cap))

    @classmethod
    def fixed(cls, value: float) -> "SigmaMode":
        return cls("fixed", float(value))

    def label(self) -> str:
        if self.kind in ("clipped", "fixed"):
            return f"{self.kind}({self.value:g})"
        return self.kind


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(seed: int, preset: str,
                 image_shape: tuple[int, int, int] | None = None,
                 latent_channels: int | None = None) -> EncoderParams:
    """Build a seeded encoder. Weights are scaled-uniform, 1/sqrt(fan_in).

    ``debug-linear`` needs ``image_shape`` (its heads are dense maps over
    the whole image) and accepts ``latent_channels`` (default 3).
    """
    rng = np.random.default_rng(seed)
    if preset in _PRESETS:
        layer_specs, lat_ch, gain = _PRESETS[preset]
        arch = tuple(ConvSpec(*s) for s in layer_specs)
        weights = [Tensor(_uniform_fan_in(rng, (s.out_ch, s.in_ch, s.kernel, s.kernel)))
                   for s in arch]
        last = arch[-1].out_ch
        head_mu = Tensor(_uniform_fan_in(rng, (lat_ch, last, 1, 1)))
        head_logvar = Tensor(_uniform_fan_in(rng, (lat_ch, last, 1, 1)))
        return EncoderParams(preset, seed, arch, weights, head_mu, head_logvar,
                             output_gain=gain)
    if preset == "debug-linear":
        if image_shape is None:
            raise ValueError("debug-linear needs image_shape=(C, H, W)")
        c, h, w = image_shape
        lat_ch = 3 if latent_channels is None else int(latent_channels)
        head_mu = Tensor(_uniform_fan_in(rng, (lat_ch, c, h, w)))
        head_logvar = Tensor(_uniform_fan_in(rng, (lat_ch, c, h, w)))
        return EncoderParams(preset, seed, (), [], head_mu, head_logvar)
    raise ValueError(f"unknown preset {preset!r}; available: "
                     f"{sorted(_PRESETS) + ['debug-linear']}")


def encode(params: EncoderParams, x) -> LatentDistribution:
    """Map an image to its latent Gaussian. Differentiable wrt x.

    The image dims must be divisible by the downsample factor. Values
    are expected in [0, 1]; excursions beyond 1e-6 only warn.
    """
    xt = as_tensor(x)
    if xt.data.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {xt.shape}")
    fy, fx = params.downsample
    _, h, w = xt.shape
    if h % fy or w % fx:
        raise ValueError(f"image dims {h}x{w} must be multiples of {fy}x{fx} "
                         f"for preset {params.preset!r}")
    lo, hi = float(xt.data.min()), float(xt.data.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        warnings.warn(f"image values outside [0, 1]: min={lo:.3g} max={hi:.3g}",
                      stacklevel=2)
    hidden = xt
    for spec, kernel in zip(params.arch, params.weights):
        hidden = op_elementwise(
            op_conv2d(hidden, kernel, stride=spec.stride, padding=spec.padding), "silu")
    mu = op_conv2d(hidden, params.head_mu, stride=1, padding=0)
    logvar = op_conv2d(hidden, params.head_logvar, stride=1, padding=0)
    if params.output_gain != 1.0:
        mu = op_elementwise(mu, "mul_const", const=params.output_gain)
        logvar = op_elementwise(logvar, "mul_const", const=params.output_gain)
    return LatentDistribution(mu=mu, logvar=logvar)


def sample(dist: LatentDistribution, noise) -> Tensor:
    """Reparameterized draw z = mu + sigma * noise.

    Differentiable through mu and logvar; the noise is a constant. When
    a sigma override is present it is used verbatim (zero sigma returns
    mu exactly).
    """
    noise_arr = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    if noise_arr.shape != dist.mu.shape:
        raise ValueError(f"noise shape {noise_arr.shape} != latent shape {dist.mu.shape}")
    if dist.sigma_override is not None:
        return op_add(dist.mu, Tensor(dist.sigma_override * noise_arr))
    sigma = op_elementwise(op_elementwise(dist.logvar, "mul_const", const=0.5), "exp")
    return op_add(dist.mu, op_mul(sigma, Tensor(noise_arr)))


def apply_sigma_mode(dist: LatentDistribution, mode: SigmaMode) -> LatentDistribution:
    """Substitute the latent standard deviation per the given mode.

    mu passes through untouched (same object, bitwise identical).
    natural is the identity. zero / clipped / fixed install an explicit
    sigma array so logvar never needs -inf.
    """
    if mode.kind == "natural":
        return dist
    if mode.kind == "zero":
        override = np.zeros(dist.mu.shape)
    elif mode.kind == "clipped":
        override = np.minimum(np.exp(0.5 * dist.logvar.data), mode.value)
    else:  # fixed
        override = np.full(dist.mu.shape, mode.value)
    return LatentDistribution(mu=dist.mu, logvar=dist.logvar, sigma_override=override)


def save_encoder(params: EncoderParams, path) -> None:
    label = f"{params.preset};gain={params.output_gain!r}"
    arrays = [(f"conv{i}", w.data) for i, w in enumerate(params.weights)]
    arrays += [("head_mu", params.head_mu.data), ("head_logvar", params.head_logvar.data)]
    save_container(path, SECTION_ENCODER, label, params.seed, arrays)


def load_encoder(path) -> EncoderParams:
    payload = load_container(path, expect_section=SECTION_ENCODER)
    preset, _, extra = payload.label.partition(";")
    gain = 1.0
    if extra.startswith("gain="):
        gain = float(extra[len("gain="):])
    seed = payload.seed
    if preset in _PRESETS:
        layer_specs, lat_ch, _ = _PRESETS[preset]
        arch = tuple(ConvSpec(*s) for s in layer_specs)
    elif preset == "debug-linear":
        arch = ()
    else:
        raise ValueError(f"{path}: unknown preset {preset!r} in weight file")
    weights = []
    for i, spec in enumerate(arch):
        arr = payload.arrays.get(f"conv{i}")
        want = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
        if arr is None or arr.shape != want:
            raise ValueError(f"{path}: layer conv{i} has shape "
                             f"{None if arr is None else arr.shape}, expected {want}")
        weights.append(Tensor(arr))
    for name in ("head_mu", "head_logvar"):
        if name not in payload.arrays:
            raise ValueError(f"{path}: missing array {name!r}")
    head_mu = Tensor(payload.arrays["head_mu"])
    head_logvar = Tensor(payload.arrays["head_logvar"])
    return EncoderParams(preset, seed, arch, weights, head_mu, head_logvar,
                         output_gain=gain)
