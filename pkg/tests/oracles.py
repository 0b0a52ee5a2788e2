"""Closed-form stand-ins and checks shared by the unit and acceptance suites."""

import numpy as np
import torch

from sdemg.diffusion import SamplerConfig, q_sample, sample, training_loss, TrainingBatch
from sdemg.schedules import cosine_schedule
from sdemg.score_net import ScoreNet, ScoreNetConfig


class OracleEps:
    """Returns the exact noise that separates ``x_t`` from a known ``x0``."""

    def __init__(self, x0):
        self.x0 = x0

    def __call__(self, x_t, x_tilde, sqrt_alpha_bar):
        g = torch.as_tensor(sqrt_alpha_bar, dtype=x_t.dtype)
        if g.dim() == 1:
            g = g[:, None]
        return (x_t - g * self.x0) / torch.sqrt(1 - g**2)


class ZeroEps:
    def __call__(self, x_t, x_tilde, sqrt_alpha_bar):
        return torch.zeros_like(x_t)


def oracle_inversion_error(T, length=512, batch=3, seed=0, clip_x0=None):
    """Max relative error of deterministic sampling with the exact-noise oracle."""
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.rand((batch, length), generator=gen, dtype=torch.float64) * 2 - 1
    eps = torch.randn((batch, length), generator=gen, dtype=torch.float64)
    sched = cosine_schedule(T)
    x_T = q_sample(x0, sched.alpha_bar(T), eps)
    out = sample(OracleEps(x0), torch.zeros_like(x0), SamplerConfig(sched, "zero", seed, clip_x0), x_T=x_T)
    return float(torch.linalg.norm(out - x0) / torch.linalg.norm(x0))


def forward_marginal_zscores(alpha_bar, n=100_000, x0_value=0.7, seed=0):
    """Standardized deviations of the q_sample mean and variance from theory."""
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(n, generator=gen, dtype=torch.float64)
    x = q_sample(torch.full((n,), x0_value, dtype=torch.float64), alpha_bar, eps)
    mean_t, var_t = np.sqrt(alpha_bar) * x0_value, 1 - alpha_bar
    z_mean = (x.mean().item() - mean_t) / np.sqrt(var_t / n)
    z_var = (x.var().item() - var_t) / (var_t * np.sqrt(2 / (n - 1)))
    return z_mean, z_var


def tiny_net(segment_len=256, seed=0, dtype=torch.float64):
    """Small network with every zero-initialized layer perturbed so all paths carry gradient."""
    torch.manual_seed(seed)
    net = ScoreNet(ScoreNetConfig(segment_len=segment_len, base_channels=8, n_blocks=1, embed_dim=16)).to(dtype)
    with torch.no_grad():
        for p in net.parameters():
            if torch.all(p == 0):
                p.normal_(0.0, 0.1)
    return net


def gradient_check(n_params=60, seed=0, h=1e-4):
    """Relative errors between autodiff and central differences on random scalar parameters."""
    net = tiny_net(seed=seed)
    gen = torch.Generator().manual_seed(seed)
    shape = (2, 256)
    batch = TrainingBatch(
        x0=torch.randn(shape, generator=gen, dtype=torch.float64),
        x_tilde=torch.randn(shape, generator=gen, dtype=torch.float64),
        alpha_bar=torch.tensor([0.3, 0.8], dtype=torch.float64),
        eps=torch.randn(shape, generator=gen, dtype=torch.float64),
    )
    net.zero_grad()
    training_loss(net, batch).backward()
    params = list(net.parameters())
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_params):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        idx = int(rng.integers(params[k].numel()))
        flat = params[k].data.view(-1)
        auto = params[k].grad.view(-1)[idx].item()
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + h
            up = training_loss(net, batch).item()
            flat[idx] = orig - h
            down = training_loss(net, batch).item()
            flat[idx] = orig
        fd = (up - down) / (2 * h)
        errors.append(abs(fd - auto) / max(abs(fd), abs(auto), 1e-8))
    return np.array(errors)
