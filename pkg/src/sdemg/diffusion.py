"""Forward diffusion, the noise-prediction objective and the ancestral sampler.

Models are any callable ``model(x_t, x_tilde, sqrt_alpha_bar) -> eps_hat``
operating on ``(batch, length)`` tensors; :class:`~sdemg.score_net.ScoreNet`
is the trained one, tests also plug in closed-form oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

from .errors import ContractError, NumericalDivergenceError, ParameterError
from .schedules import NoiseSchedule, draw_alpha_bar

SIGMA_MODES = ("beta_tilde", "beta", "zero")


@dataclass
class TrainingBatch:
    """One minibatch for the objective.

    ``alpha_bar`` holds the drawn noise-scale values on the sqrt(alpha_bar)
    scale, one per row; the diffused input uses their square as variance
    complement.
    """

    x0: torch.Tensor
    x_tilde: torch.Tensor
    alpha_bar: torch.Tensor
    eps: torch.Tensor

    def __post_init__(self):
        if not (self.x0.shape == self.x_tilde.shape == self.eps.shape):
            raise ContractError("x0, x_tilde and eps must share one shape")
        if self.alpha_bar.shape != self.x0.shape[:1]:
            raise ContractError("alpha_bar needs one value per batch row")
        if torch.any(self.alpha_bar <= 0) or torch.any(self.alpha_bar > 1):
            raise ParameterError("noise-scale values must lie in (0, 1]")


@dataclass(frozen=True)
class SamplerConfig:
    schedule: NoiseSchedule
    sigma_mode: Literal["beta_tilde", "beta", "zero"] = "beta_tilde"
    seed: int = 0
    # bound on |x0 estimate| inside each step; None applies the bare update
    clip_x0: float | None = 1.0

    def __post_init__(self):
        if self.sigma_mode not in SIGMA_MODES:
            raise ParameterError(f"sigma_mode must be one of {SIGMA_MODES}")
        if self.clip_x0 is not None and not self.clip_x0 > 0:
            raise ParameterError("clip_x0 must be positive or None")


def q_sample(x0, alpha_bar, eps):
    """Draw from q(x_t | x_0): ``sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps``.

    ``alpha_bar`` is a scalar or a per-row tensor for batched ``x0``.
    """
    if x0.shape != eps.shape:
        raise ContractError("x0 and eps must share one shape")
    ab = torch.as_tensor(alpha_bar, dtype=x0.dtype, device=x0.device)
    if torch.any(ab <= 0) or torch.any(ab > 1):
        raise ParameterError("alpha_bar must lie in (0, 1]")
    if ab.dim() == 1 and x0.dim() > 1:
        ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def make_batch(x0, x_tilde, sched: NoiseSchedule, generator: torch.Generator) -> TrainingBatch:
    """Draw step, noise scale and noise for one minibatch."""
    b = x0.shape[0]
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    u = torch.rand(b, generator=generator, dtype=torch.float64)
    scale = draw_alpha_bar(sched, t.numpy(), u.numpy())
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    return TrainingBatch(x0, x_tilde, torch.as_tensor(np.atleast_1d(scale), dtype=x0.dtype), eps)


def training_loss(model, batch: TrainingBatch):
    """Mean squared error between the true noise and the model's prediction."""
    x_t = q_sample(batch.x0, batch.alpha_bar**2, batch.eps)
    eps_hat = model(x_t, batch.x_tilde, batch.alpha_bar)
    if eps_hat.shape != batch.eps.shape:
        raise ContractError(f"model output {tuple(eps_hat.shape)} does not match {tuple(batch.eps.shape)}")
    return torch.mean((batch.eps - eps_hat) ** 2)


def sigma(sched: NoiseSchedule, t: int, sigma_mode: str) -> float:
    if sigma_mode == "zero":
        return 0.0
    if sigma_mode == "beta":
        return float(np.sqrt(sched.beta(t)))
    if sigma_mode == "beta_tilde":
        return float(np.sqrt((1 - sched.alpha_bar(t - 1)) / (1 - sched.alpha_bar(t)) * sched.beta(t)))
    raise ParameterError(f"sigma_mode must be one of {SIGMA_MODES}")


def reverse_step(model, x_t, x_tilde, t: int, sched: NoiseSchedule, sigma_mode: str, z, clip_x0=None):
    """One ancestral step ``x_t -> x_{t-1}``.

    Without ``clip_x0`` this is
    ``(x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * z``.
    With it, the implied clean estimate is clamped to ``[-clip_x0, clip_x0]``
    and the posterior mean is formed from that estimate; both forms agree
    whenever the clamp is inactive. The clamp keeps a near-one final beta
    from amplifying prediction error by ``1 / sqrt(alpha_T)``.
    """
    if not 1 <= t <= sched.T:
        raise IndexError(f"step {t} outside [1, {sched.T}]")
    if t == 1 and torch.any(z != 0):
        raise ParameterError("the final step takes no noise (z must be zero at t == 1)")
    alpha, beta = sched.alpha(t), sched.beta(t)
    alpha_bar, alpha_bar_prev = sched.alpha_bar(t), sched.alpha_bar(t - 1)
    eps_hat = model(x_t, x_tilde, float(np.sqrt(alpha_bar)))
    if clip_x0 is None:
        mean = (x_t - (1 - alpha) / np.sqrt(1 - alpha_bar) * eps_hat) / np.sqrt(alpha)
    else:
        x0_hat = ((x_t - np.sqrt(1 - alpha_bar) * eps_hat) / np.sqrt(alpha_bar)).clamp(-clip_x0, clip_x0)
        mean = (np.sqrt(alpha_bar_prev) * beta * x0_hat + np.sqrt(alpha) * (1 - alpha_bar_prev) * x_t) / (1 - alpha_bar)
    return mean + sigma(sched, t, sigma_mode) * z


def _generators(seed, n):
    seeds = np.atleast_1d(seed)
    if seeds.size == 1:
        seeds = np.repeat(seeds, n)
    if seeds.size != n:
        raise ContractError("need one seed per batch row")
    return [torch.Generator().manual_seed(int(s)) for s in seeds]


def _draw(generators, shape, dtype):
    return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in generators])


@torch.no_grad()
def sample(model, x_tilde, cfg: SamplerConfig, seeds=None, x_T=None):
    """Run the reverse chain from ``x_T ~ N(0, I)`` down to an ``x_0`` estimate.

    ``x_tilde`` is ``(length,)`` or ``(batch, length)``. Every row draws its
    noise from its own generator, seeded from ``seeds`` (one per row) or from
    ``cfg.seed``, so results do not depend on how rows are batched. ``x_T``
    overrides the initial draw.
    """
    single = x_tilde.dim() == 1
    xt = x_tilde.unsqueeze(0) if single else x_tilde
    n, length = xt.shape
    gens = _generators(cfg.seed if seeds is None else seeds, n)
    x = _draw(gens, (length,), xt.dtype)
    if x_T is not None:
        x = x_T.reshape(n, length).to(xt.dtype)
    sched = cfg.schedule
    for t in range(sched.T, 0, -1):
        z = _draw(gens, (length,), xt.dtype) if t > 1 else torch.zeros_like(x)
        try:
            x = reverse_step(model, x, xt, t, sched, cfg.sigma_mode, z, cfg.clip_x0)
        except NumericalDivergenceError:
            raise NumericalDivergenceError(f"sampler diverged at step t={t}", step=t) from None
        if not torch.all(torch.isfinite(x)):
            raise NumericalDivergenceError(f"sampler diverged at step t={t}", step=t)
    return x.squeeze(0) if single else x
