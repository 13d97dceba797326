"""Desk-scale DDPM machinery: schedule, forward noising, a tiny
conditional denoiser, and the denoising losses used by the surrogate
defenses and the fine-tuning simulator.

The denoiser is a 3-layer conv net over the latent, with the textual
condition standing in as one-hot channels over a small fixed prompt
vocabulary and the timestep as sinusoidal feature channels. A zero
condition embedding gives the unconditional path of the same net.

Timestep convention: we noise to step t and denoise at step t, for
t in {1..T}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from latentshield.autodiff import (
    Tensor,
    as_tensor,
    backward,
    op_add,
    op_concat_channels,
    op_conv2d,
    op_elementwise,
    op_reduce,
    op_sub,
)
from latentshield.container import SECTION_DENOISER, load_container, save_container
from latentshield.encoder import EncoderParams, SigmaMode, apply_sigma_mode, encode, sample

__all__ = [
    "NoiseSchedule",
    "PromptId",
    "DenoiserParams",
    "TrainConfig",
    "DEFAULT_PROMPTS",
    "make_schedule",
    "forward_noise",
    "denoise",
    "loss_uncond",
    "loss_cond",
    "train_denoiser",
    "TrainingDivergence",
    "save_denoiser",
    "load_denoiser",
]

DEFAULT_VOCAB = 4


class TrainingDivergence(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


@dataclass(frozen=True)
class PromptId:
    """Index into the finite prompt vocabulary."""

    id: int
    display: str = ""

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"prompt id must be nonnegative, got {self.id}")


DEFAULT_PROMPTS = (
    PromptId(0, "photo"),
    PromptId(1, "portrait"),
    PromptId(2, "selfie"),
    PromptId(3, "sketch"),
)


@dataclass
class DenoiserParams:
    latent_channels: int
    vocab: int
    t_channels: int
    hidden: int
    seed: int
    layers: list[Tensor]
    cond_gain: float = 4.0
    loss_trace: list[float] = field(default_factory=list)

    def frozen(self) -> "DenoiserParams":
        """View with gradient tracking off; shares the weight buffers."""
        return DenoiserParams(self.latent_channels, self.vocab, self.t_channels,
                              self.hidden, self.seed,
                              [Tensor(w.data) for w in self.layers], self.cond_gain)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.latent_channels, self.vocab, self.t_channels,
                              self.hidden, self.seed,
                              [Tensor(w.data.copy(), requires_grad=w.requires_grad)
                               for w in self.layers], self.cond_gain)


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for the toy fine-tuning loop."""

    steps: int = 150
    lr: float = 2e-3
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    hidden: int = 16
    t_channels: int = 4
    vocab: int = DEFAULT_VOCAB
    cond_gain: float = 4.0
    batch: int = 1

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)

    def new_denoiser(self, seed: int, latent_channels: int) -> "DenoiserParams":
        return init_denoiser(seed, latent_channels, vocab=self.vocab,
                             t_channels=self.t_channels, hidden=self.hidden,
                             cond_gain=self.cond_gain)


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar is the exact running product."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, "
                         f"got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_noise(z0, t: int, noise, sched: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise, differentiable in z0."""
    if not (1 <= t <= sched.T):
        raise ValueError(f"t must lie in [1, {sched.T}], got {t}")
    z0t = as_tensor(z0)
    noise_arr = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=np.float64)
    if noise_arr.shape != z0t.shape:
        raise ValueError(f"noise shape {noise_arr.shape} != latent shape {z0t.shape}")
    ab = sched.alpha_bar[t - 1]
    scaled = op_elementwise(z0t, "mul_const", const=float(np.sqrt(ab)))
    return op_add(scaled, Tensor(np.sqrt(1.0 - ab) * noise_arr))


def init_denoiser(seed: int, latent_channels: int, vocab: int = DEFAULT_VOCAB,
                  t_channels: int = 4, hidden: int = 16,
                  cond_gain: float = 4.0) -> DenoiserParams:
    """``cond_gain`` scales the one-hot condition channels; prompts must
    shift the network's operating point hard enough that conditioning
    actually steers prediction at this scale."""
    if t_channels % 2:
        raise ValueError("t_channels must be even (sin/cos pairs)")
    rng = np.random.default_rng(seed)
    in_ch = latent_channels + vocab + t_channels

    def draw(shape):
        fan_in = int(np.prod(shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    layers = [
        draw((hidden, in_ch, 3, 3)),
        draw((hidden, hidden, 3, 3)),
        draw((latent_channels, hidden, 1, 1)),
    ]
    return DenoiserParams(latent_channels, vocab, t_channels, hidden, seed, layers,
                          cond_gain)


def _time_embedding(t: int, t_channels: int, hw: tuple[int, int]) -> np.ndarray:
    half = t_channels // 2
    feats = np.empty(t_channels)
    for i in range(half):
        w = 1.0 / (50.0 ** (i / max(half, 1)))
        feats[2 * i] = np.sin(t * w)
        feats[2 * i + 1] = np.cos(t * w)
    return np.broadcast_to(feats[:, None, None], (t_channels, *hw)).copy()


def _condition_embedding(c: PromptId | None, vocab: int, hw: tuple[int, int],
                         gain: float = 1.0) -> np.ndarray:
    emb = np.zeros((vocab, *hw))
    if c is not None:
        emb[c.id] = gain
    return emb


def denoise(theta: DenoiserParams, z_t, c: PromptId | None, t: int) -> Tensor:
    """Predict the noise inside z_t. c=None runs the unconditional path
    (all-zero condition channels)."""
    if c is not None and c.id >= theta.vocab:
        raise ValueError(f"prompt id {c.id} outside vocabulary of size {theta.vocab}")
    zt = as_tensor(z_t)
    hw = zt.shape[1:]
    cond = Tensor(_condition_embedding(c, theta.vocab, hw, gain=theta.cond_gain))
    temb = Tensor(_time_embedding(t, theta.t_channels, hw))
    h = op_concat_channels([zt, cond, temb])
    h = op_elementwise(op_conv2d(h, theta.layers[0], stride=1, padding=1), "silu")
    h = op_elementwise(op_conv2d(h, theta.layers[1], stride=1, padding=1), "silu")
    return op_conv2d(h, theta.layers[2], stride=1, padding=0)


def _denoise_loss(theta: DenoiserParams, c: PromptId | None, z0,
                  sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    z0t = as_tensor(z0)
    t = int(rng.integers(1, sched.T + 1))
    eps = rng.standard_normal(z0t.shape)
    zt = forward_noise(z0t, t, eps, sched)
    pred = denoise(theta, zt, c, t)
    diff = op_sub(Tensor(eps), pred)
    return op_reduce(op_elementwise(diff, "square"), "sum")


def loss_uncond(theta: DenoiserParams, z0, sched: NoiseSchedule,
                rng: np.random.Generator) -> Tensor:
    """Squared L2 between drawn and predicted noise, t uniform in {1..T}.

    Single-draw estimator; differentiable wrt theta and z0.
    """
    return _denoise_loss(theta, None, z0, sched, rng)


def loss_cond(theta: DenoiserParams, c: PromptId, z0, sched: NoiseSchedule,
              rng: np.random.Generator) -> Tensor:
    """Conditional variant of :func:`loss_uncond`."""
    if c is None or c.id >= theta.vocab:
        raise ValueError(f"invalid prompt {c!r} for vocabulary of size {theta.vocab}")
    return _denoise_loss(theta, c, z0, sched, rng)


def encode_latent(params: EncoderParams, image, rng: np.random.Generator,
                  sigma_mode: SigmaMode | None = None) -> np.ndarray:
    """Sample a detached latent for an image (training-data path).

    ``sigma_mode`` models an exploiter substituting the latent standard
    deviation before sampling.
    """
    dist = encode(params, np.asarray(image, dtype=np.float64))
    if sigma_mode is not None:
        dist = apply_sigma_mode(dist, sigma_mode)
    noise = rng.standard_normal(dist.mu.shape)
    return sample(dist, noise).data


def train_denoiser(theta: DenoiserParams, dataset, params: EncoderParams,
                   sched: NoiseSchedule, steps: int, lr: float,
                   rng: np.random.Generator,
                   sigma_mode: SigmaMode | None = None,
                   batch: int = 1) -> DenoiserParams:
    """Plain SGD on the conditional denoising loss over encoder latents.

    ``dataset`` is a nonempty list of (image, PromptId). ``batch``
    averages the gradient over that many independent draws per step.
    Weights update in place; the per-step losses append to
    ``theta.loss_trace``. A non-finite loss aborts with the offending
    step index.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not dataset:
        raise ValueError("dataset must be nonempty")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    for step in range(steps):
        grads = [np.zeros_like(w.data) for w in theta.layers]
        step_loss = 0.0
        for _ in range(batch):
            image, prompt = dataset[int(rng.integers(len(dataset)))]
            z0 = encode_latent(params, image, rng, sigma_mode=sigma_mode)
            loss = loss_cond(theta, prompt, z0, sched, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergence(f"non-finite loss at step {step}")
            step_loss += value
            if lr != 0.0:
                backward(loss)
                for g, w in zip(grads, theta.layers):
                    if w.grad is not None:
                        g += w.grad
        theta.loss_trace.append(step_loss / batch)
        if lr != 0.0:
            for g, w in zip(grads, theta.layers):
                w.data -= (lr / batch) * g
    return theta


def save_denoiser(theta: DenoiserParams, path) -> None:
    label = (f"den:lc={theta.latent_channels}:vocab={theta.vocab}"
             f":tch={theta.t_channels}:hidden={theta.hidden}"
             f":cgain={theta.cond_gain!r}")
    arrays = [(f"layer{i}", w.data) for i, w in enumerate(theta.layers)]
    save_container(path, SECTION_DENOISER, label, theta.seed, arrays)


def load_denoiser(path) -> DenoiserParams:
    payload = load_container(path, expect_section=SECTION_DENOISER)
    fields = dict(part.split("=") for part in payload.label.split(":")[1:])
    lc, vocab = int(fields["lc"]), int(fields["vocab"])
    tch, hidden = int(fields["tch"]), int(fields["hidden"])
    cgain = float(fields.get("cgain", "1.0"))
    layers = []
    for i in range(3):
        arr = payload.arrays.get(f"layer{i}")
        if arr is None:
            raise ValueError(f"{path}: missing array layer{i}")
        layers.append(Tensor(arr, requires_grad=True))
    want0 = (hidden, lc + vocab + tch, 3, 3)
    if layers[0].shape != want0:
        raise ValueError(f"{path}: layer0 shape {layers[0].shape}, expected {want0}")
    return DenoiserParams(lc, vocab, tch, hidden, payload.seed, layers, cgain)
