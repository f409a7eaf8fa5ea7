"""Closed-form DDPM algebra: linear beta schedules, forward corruption,
clean-sample projection and the ancestral reverse step.

Steps are 1-based (``t = 1 .. T``) everywhere in the public API; the
arrays on :class:`NoiseSchedule` are 0-based, so ``betas[t - 1]`` is the
value for step ``t``.

All operations accept numpy arrays or torch tensors; coefficients are read
from the schedule as Python floats so the result keeps the input's type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SIGMA_MODES = ("beta", "beta_tilde")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    # training-step index (1-based) each step corresponds to; identity for a
    # full schedule, strided for a respaced inference schedule
    timesteps: np.ndarray = field(repr=False)
    sigma_mode: str = "beta_tilde"

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise ScheduleError(f"step t={t} outside [1, {self.T}]")
        return int(t) - 1

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_t(t)])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to step ``t``; ``alpha_bar(0)`` is 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bars[self._check_t(t)])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._check_t(t)])

    def model_timestep(self, t: int) -> int:
        """Step index to feed the denoiser's step embedding."""
        return int(self.timesteps[self._check_t(t)])

    def respace(self, num_steps: int, sigma_mode: str | None = None) -> "NoiseSchedule":
        """Sub-schedule on every ``T // num_steps``-th step.

        Inference step ``k`` maps to training step ``(k - 1) * stride + 1``
        and keeps that step's alpha-bar; per-step alphas are re-derived as
        ratios of consecutive kept alpha-bars.
        """
        if num_steps < 1 or num_steps > self.T:
            raise ScheduleError(f"cannot respace T={self.T} to {num_steps} steps")
        sigma_mode = sigma_mode or self.sigma_mode
        stride = self.T // num_steps
        idx = np.arange(num_steps) * stride  # 0-based
        kept = self.alpha_bars[idx]
        prev = np.concatenate([[1.0], kept[:-1]])
        alphas = kept / prev
        betas = 1.0 - alphas
        return NoiseSchedule(
            betas=betas,
            alphas=alphas,
            alpha_bars=kept.copy(),
            sigmas=_sigmas(betas, kept, sigma_mode),
            timesteps=self.timesteps[idx].copy(),
            sigma_mode=sigma_mode,
        )


def _sigmas(betas: np.ndarray, alpha_bars: np.ndarray, sigma_mode: str) -> np.ndarray:
    if sigma_mode == "beta":
        var = betas.copy()
    elif sigma_mode == "beta_tilde":
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        var = betas * (1.0 - prev) / (1.0 - alpha_bars)
    else:
        raise ScheduleError(f"unknown sigma_mode {sigma_mode!r}; expected one of {SIGMA_MODES}")
    sigmas = np.sqrt(var)
    # the step producing x_0 never adds noise
    sigmas[0] = 0.0
    return sigmas


def build_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    sigma_mode: str = "beta_tilde",
) -> NoiseSchedule:
    """Linear beta schedule over ``T`` steps (float64 throughout)."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=_sigmas(betas, alpha_bars, sigma_mode),
        timesteps=np.arange(1, int(T) + 1),
        sigma_mode=sigma_mode,
    )


def _check_shape(a, b, what: str) -> None:
    sa, sb = tuple(getattr(a, "shape", ())), tuple(getattr(b, "shape", ()))
    if sa != sb:
        raise ScheduleError(f"{what} shape {sb} does not match {sa}")


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps."""
    _check_shape(x0, eps, "eps")
    ab = float(sched.alpha_bars[sched._check_t(t)])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def project_x0(x_t, t: int, eps_hat, sched: NoiseSchedule, min_alpha_bar: float = 1e-12):
    """Estimate the clean sample from a noisy one and a noise prediction."""
    _check_shape(x_t, eps_hat, "eps_hat")
    ab = float(sched.alpha_bars[sched._check_t(t)])
    if ab < min_alpha_bar:
        raise ScheduleError(
            f"alpha_bar at t={t} is {ab:.3e}; projection to x_0 would divide by ~0"
        )
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def reverse_step(x_t, t: int, eps_hat, z, sched: NoiseSchedule):
    """One ancestral step x_t -> x_{t-1}.

    ``z`` may be ``None`` (treated as zero). At ``t == 1`` a nonzero ``z``
    is rejected.
    """
    _check_shape(x_t, eps_hat, "eps_hat")
    i = sched._check_t(t)
    a = float(sched.alphas[i])
    ab = float(sched.alpha_bars[i])
    mean = (x_t - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(a)
    if z is None:
        return mean
    _check_shape(x_t, z, "z")
    if t == 1:
        if bool(np.any(np.asarray(z != 0))):
            raise ScheduleError("the final reverse step (t=1) must not add noise; pass z=0 or None")
        return mean
    return mean + float(sched.sigmas[i]) * z
