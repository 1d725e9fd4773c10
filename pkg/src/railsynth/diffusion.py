"""Forward/reverse diffusion, the noise-prediction objective and the sampler.

Math helpers accept numpy arrays or torch tensors.  Model-facing code works
on NCHW float tensors with images scaled to [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DivisionByZeroGuard, InvalidSchedule, NonFiniteLoss, NonFiniteSample, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: tuple
    kind: str = "linear"

    def __post_init__(self):
        if len(self.betas) < 1:
            raise InvalidSchedule("schedule needs at least one step")
        for t, b in enumerate(self.betas, 1):
            if not 0.0 < b < 1.0:
                raise InvalidSchedule(f"beta_{t} = {b} outside (0, 1)", t=t, beta=b)

    @property
    def T(self):
        return len(self.betas)

    def beta(self, t):
        """Noise fraction of step ``t`` (1-based)."""
        return self.betas[t - 1]

    def to_dict(self):
        return {"kind": self.kind, "betas": list(self.betas)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["betas"]), d.get("kind", "linear"))


def make_schedule(kind="linear", T=50, beta_start=1e-4, beta_end=0.02):
    if T < 1:
        raise InvalidSchedule(f"T must be >= 1, got {T}", T=T)
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidSchedule(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind != "linear":
        raise InvalidSchedule(f"unknown schedule kind {kind!r}", kind=kind)
    if T == 1:
        return NoiseSchedule((float(beta_start),), kind)
    betas = tuple(float(beta_start + (t - 1) / (T - 1) * (beta_end - beta_start)) for t in range(1, T + 1))
    return NoiseSchedule(betas, kind)


def _check_shapes(a, b, what):
    sa, sb = tuple(np.shape(a)), tuple(np.shape(b))
    if sa != sb:
        raise ShapeError(f"{what}: shapes {sa} and {sb} differ")


def forward_step(x_prev, beta_t, epsilon):
    """``x_t = sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * eps``."""
    _check_shapes(x_prev, epsilon, "forward_step")
    if not 0.0 < beta_t <= 1.0:
        raise InvalidSchedule(f"beta must lie in (0, 1], got {beta_t}", beta=beta_t)
    return math.sqrt(1.0 - beta_t) * x_prev + math.sqrt(beta_t) * epsilon


def reverse_step(x_t, epsilon_hat, beta_t):
    """``x_{t-1} = (x_t - sqrt(beta_t) * eps_hat) / sqrt(1 - beta_t)``."""
    _check_shapes(x_t, epsilon_hat, "reverse_step")
    if beta_t >= 1.0:
        raise DivisionByZeroGuard(f"beta_t = {beta_t} makes the reverse step divide by zero", beta=beta_t)
    if beta_t <= 0.0:
        raise InvalidSchedule(f"beta must be positive, got {beta_t}", beta=beta_t)
    return (x_t - math.sqrt(beta_t) * epsilon_hat) / math.sqrt(1.0 - beta_t)


def dm_loss(epsilon, epsilon_hat):
    """Mean squared error over every element (batch estimate of the expectation)."""
    _check_shapes(epsilon, epsilon_hat, "dm_loss")
    return ((epsilon - epsilon_hat) ** 2).mean()


def diffuse(x0, schedule, t, generator):
    """Run ``forward_step`` per item up to its own timestep.

    ``t`` holds one timestep in ``[1, T]`` per batch item.  Returns ``x_t`` and
    the noise injected at the final step, which is the prediction target.
    Noise is drawn for the whole batch at every step so the random stream
    does not depend on the sampled timesteps.
    """
    x = x0
    target = torch.zeros_like(x0)
    t = torch.as_tensor(t)
    shape = (-1,) + (1,) * (x0.dim() - 1)
    for s in range(1, int(t.max()) + 1):
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        stepped = forward_step(x, schedule.beta(s), eps)
        active = (t >= s).view(shape)
        x = torch.where(active, stepped, x)
        target = torch.where((t == s).view(shape), eps, target)
    return x, target


def _predict(denoiser, x_t, t, prompts, condition):
    if condition is None:
        return denoiser.predict(x_t, t, prompts)
    return denoiser.predict(x_t, t, prompts, condition)


def trainable_parameters(denoiser):
    return [p for p in denoiser.parameters() if p.requires_grad]


def training_step(
    denoiser,
    codec,
    schedule,
    batch,
    prompts,
    conditions,
    generator,
    optimizer=None,
    step=0,
    prompt_dropout=0.0,
    uncond_prompts=None,
):
    """One optimisation step of the noise-prediction objective.

    ``batch`` is an NCHW tensor in [-1, 1].  Timesteps are uniform in
    ``[1, T]``; noise is standard normal.  Only parameters with
    ``requires_grad`` are touched by the optimiser.  Returns the loss as a
    float.
    """
    if batch.shape[0] == 0:
        raise ShapeError("empty batch")
    prompts = list(prompts)
    t = torch.randint(1, schedule.T + 1, (batch.shape[0],), generator=generator)
    if prompt_dropout > 0.0:
        drop = torch.rand(len(prompts), generator=generator) < prompt_dropout
        fallback = uncond_prompts or [""] * len(prompts)
        prompts = [fallback[i] if drop[i] else p for i, p in enumerate(prompts)]
    x0 = codec.encode(batch)
    x_t, eps = diffuse(x0, schedule, t, generator)
    eps_hat = _predict(denoiser, x_t, t, prompts, conditions)
    loss = dm_loss(eps, eps_hat)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss at step {step}", step=step)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return float(loss.detach())


class Trainer:
    """Owns the optimiser and random stream for a training run."""

    def __init__(self, denoiser, codec, schedule, seed=0, lr=1e-3, prompt_dropout=0.0):
        self.denoiser = denoiser
        self.codec = codec
        self.schedule = schedule
        self.generator = torch.Generator().manual_seed(seed)
        params = trainable_parameters(denoiser)
        self.optimizer = torch.optim.Adam(params, lr=lr) if params else None
        self.prompt_dropout = prompt_dropout
        self.losses = []

    def step(self, batch, prompts, conditions=None, uncond_prompts=None):
        loss = training_step(
            self.denoiser,
            self.codec,
            self.schedule,
            batch,
            prompts,
            conditions,
            self.generator,
            self.optimizer,
            step=len(self.losses),
            prompt_dropout=self.prompt_dropout,
            uncond_prompts=uncond_prompts,
        )
        self.losses.append(loss)
        return loss

    def write_loss_csv(self, path):
        with open(path, "w") as fh:
            fh.write("step,loss\n")
            for i, loss in enumerate(self.losses):
                fh.write(f"{i},{loss:.8f}\n")


@torch.no_grad()
def reverse_loop(denoiser, schedule, x_T, prompts, condition=None, negatives=None, guidance_scale=1.0,
                 generator=None, stochastic=False, steps=None):
    """Apply ``reverse_step`` from ``t = steps`` (default ``T``) down to 1."""
    x = x_T
    steps = schedule.T if steps is None else steps
    use_guidance = negatives is not None and guidance_scale != 1.0
    for t in range(steps, 0, -1):
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        eps_hat = _predict(denoiser, x, tt, prompts, condition)
        if use_guidance:
            eps_neg = _predict(denoiser, x, tt, negatives, condition)
            eps_hat = eps_neg + guidance_scale * (eps_hat - eps_neg)
        x = reverse_step(x, eps_hat, schedule.beta(t))
        if stochastic and t > 1:
            x = x + math.sqrt(schedule.beta(t)) * torch.randn(x.shape, generator=generator, dtype=x.dtype)
        if not torch.isfinite(x).all():
            raise NonFiniteSample(f"non-finite sample at t={t}", t=t)
    return x


@torch.no_grad()
def sample(denoiser, codec, schedule, shape, bundles, condition=None, generator=None, guidance_scale=1.0,
           stochastic=False, x_init=None, steps=None):
    """Draw ``x_T ~ N(0, 1)`` of latent ``shape`` and run the reverse loop.

    ``bundles`` is one :class:`PromptBundle` per batch item.  A non-empty
    negative prompt takes the unconditional role in classifier-free guidance
    when ``guidance_scale != 1``.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    if x_init is None:
        x_init = torch.randn(tuple(shape), generator=generator)
    elif tuple(x_init.shape) != tuple(shape):
        raise ShapeError(f"x_init shape {tuple(x_init.shape)} != {tuple(shape)}")
    positives = [b.positive for b in bundles]
    negatives = None
    if any(b.negative for b in bundles):
        negatives = [b.negative for b in bundles]
    x = reverse_loop(denoiser, schedule, x_init, positives, condition, negatives, guidance_scale,
                     generator, stochastic, steps)
    return codec.decode(x)


def images_to_tensor(images):
    """uint8 HxWx3 images -> float32 NCHW in [-1, 1]."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous() / 127.5 - 1.0


def conditions_to_tensor(conditions):
    """ConditionImages (or HxWx3 uint8) -> float32 NCHW in [0, 1]."""
    arr = np.stack([np.asarray(getattr(c, "channels", c), dtype=np.float32) for c in conditions])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous() / 255.0


def tensor_to_images(x):
    x = x.detach().float().clamp(-1.0, 1.0)
    arr = ((x + 1.0) * 127.5).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    return [a.copy() for a in arr]
