"""Forward diffusion process and the deterministic DDIM reverse update.

Timesteps are 1-based: ``t`` runs over ``1..n_steps`` and ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t):
        """``alpha_bar`` at 1-based ``t`` (scalar or integer array); ``t == 0`` gives 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.n_steps):
            raise ValueError(f"timestep out of range [0, {self.n_steps}]: {t}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 1:
        raise ValueError("betas must be a non-empty 1-d array")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("every beta must lie in (0, 1)")
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def make_linear_schedule(n_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, n_steps))


@dataclass
class ForwardSample:
    x_t: np.ndarray
    eps: np.ndarray
    t: int | np.ndarray
    x0_ref: np.ndarray


def _per_item(values: np.ndarray, ndim: int) -> np.ndarray:
    # scalar stays scalar; a per-batch vector broadcasts over trailing [C, L]
    return values if values.ndim == 0 else values.reshape(values.shape + (1,) * (ndim - 1))


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> ForwardSample:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be an int, or an integer array with one entry per leading batch item.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.n_steps):
        raise ValueError(f"timestep out of range [1, {sched.n_steps}]: {t}")
    ab = _per_item(sched.alpha_bar(t_arr), x0.ndim)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return ForwardSample(x_t=x_t, eps=eps, t=t, x0_ref=x0)


def predicted_noise(x_t: np.ndarray, t: int, x0_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bar(t)
    return (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, x0_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev`` given an x0 estimate."""
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if x0_hat.shape != x_t.shape:
        raise ValueError(f"x0_hat shape {x0_hat.shape} differs from x_t shape {x_t.shape}")
    if t_prev == 0:
        return x0_hat.copy()
    eps_hat = predicted_noise(x_t, t, x0_hat, sched)
    ab_prev = sched.alpha_bar(t_prev)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timestep_grid(n_steps: int, n_infer: int) -> list[tuple[int, int]]:
    """Evenly spaced descending ``(t, t_prev)`` pairs from ``n_steps`` down to 0."""
    if not 1 <= n_infer <= n_steps:
        raise ValueError(f"n_infer must lie in [1, {n_steps}], got {n_infer}")
    ts = [round(n_steps * (n_infer - i) / n_infer) for i in range(n_infer + 1)]
    return list(zip(ts[:-1], ts[1:]))
