"""Cosine noise schedule and the noise-scale table used for conditioning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step tables for ``T`` diffusion steps.

    ``betas``, ``alphas`` and ``alpha_bars`` are indexed by step ``t - 1`` for
    ``t = 1..T``. ``gammas`` has ``T + 1`` entries: ``gammas[0] == 1`` and
    ``gammas[t] == sqrt(alpha_bars[t - 1])``.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    gammas: np.ndarray

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "gammas"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at step ``t``; ``alpha_bar(0) == 1``."""
        if not 0 <= t <= self.T:
            raise IndexError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def _check(self, t):
        if not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside [1, {self.T}]")


def cosine_schedule(T: int, s: float = 0.008, beta_clip: float = 0.999) -> NoiseSchedule:
    if T < 1 or int(T) != T:
        raise ParameterError("T must be a positive integer")
    if not 0 < s < 1:
        raise ParameterError("offset s must lie in (0, 1)")
    if not 0 < beta_clip < 1:
        raise ParameterError("beta_clip must lie in (0, 1)")

    def f(t):
        return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    f0 = f(0)
    ratio = np.array([f(t) / f0 for t in range(T + 1)])
    betas = np.minimum(1.0 - ratio[1:] / ratio[:-1], beta_clip)
    alphas = 1.0 - betas
    # telescoping product, so unclipped steps reproduce f(t)/f(0) up to rounding
    alpha_bars = np.cumprod(alphas)
    gammas = np.concatenate([[1.0], np.sqrt(alpha_bars)])
    return NoiseSchedule(int(T), betas, alphas, alpha_bars, gammas)


def draw_alpha_bar(sched: NoiseSchedule, t, u):
    """Continuous noise-scale value for step ``t``: uniform on ``[gamma_t, gamma_{t-1})``.

    The returned value lives on the sqrt(alpha_bar) scale. ``t`` and ``u`` may be
    scalars or equally shaped arrays.
    """
    t_arr = np.asarray(t)
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise IndexError(f"step outside [1, {sched.T}]")
    if np.any(u_arr < 0) or np.any(u_arr >= 1):
        raise ParameterError("u must lie in [0, 1)")
    lo = sched.gammas[t_arr]
    hi = sched.gammas[t_arr - 1]
    # rounding must not reach the open upper end
    out = np.minimum(lo + u_arr * (hi - lo), np.nextafter(hi, lo))
    return float(out) if np.ndim(out) == 0 else out
