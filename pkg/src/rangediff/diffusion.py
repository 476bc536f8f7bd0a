"""DDPM/DDIM machinery: noise schedules, forward noising, the exact Gaussian
posterior, the epsilon-prediction loss, ancestral and strided samplers, and
classifier-free guidance.

Timesteps are 1-based (t = 1..T) and the convention alpha_bar_0 = 1 is used
throughout, so t = 1 and t_prev = 0 need no special cases.  Every sampler takes
its noise from the caller; nothing in this module draws random numbers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidRange, InvalidStepPair, InvalidStride

SIGMA_CHOICES = ("beta_tilde", "beta")


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        beta = np.asarray(betas, dtype=np.float64).ravel()
        if beta.size < 1:
            raise InvalidRange("schedule needs at least one step")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise InvalidRange("every beta must lie in (0, 1)")
        if np.any(np.diff(beta) < 0):
            raise InvalidRange("betas must be nondecreasing")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        denom = 1.0 - alpha_bar
        # betas so small that alpha_bar rounds to 1 leave a zero denominator
        safe = np.where(denom > 0, denom, 1.0)
        beta_tilde = np.where(denom > 0, (1.0 - prev) / safe * beta, 0.0)
        assert np.all(beta_tilde <= beta), "posterior variance exceeds forward variance"
        return cls(beta, alpha, alpha_bar, beta_tilde)

    @property
    def T(self) -> int:
        return self.beta.size

    def _check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise InvalidRange(f"timestep {t} outside [1, {self.T}]")
        return t - 1

    def ab(self, t: int) -> float:
        """alpha_bar_t with alpha_bar_0 = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self._check(t)])

    def b(self, t: int) -> float:
        return float(self.beta[self._check(t)])

    def a(self, t: int) -> float:
        return float(self.alpha[self._check(t)])

    def bt(self, t: int) -> float:
        return float(self.beta_tilde[self._check(t)])


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 2e-2) -> NoiseSchedule:
    """Betas spaced linearly from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise InvalidRange("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def _same_shape(*arrays):
    arrs = [np.asarray(a, dtype=np.float64) for a in arrays]
    if any(a.shape != arrs[0].shape for a in arrs[1:]):
        raise DimensionMismatch(f"shape mismatch: {[a.shape for a in arrs]}")
    return arrs


def _per_sample(values, like: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-row array of coefficients against ``like``."""
    v = np.asarray(values, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def forward_sample(x0, t, noise, s: NoiseSchedule):
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise.

    ``t`` may be an int or an integer array with one step per leading row.
    """
    x0, noise = _same_shape(x0, noise)
    if np.ndim(t) == 0:
        ab = s.ab(int(t))
    else:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > s.T):
            raise InvalidRange("timestep outside [1, T]")
        ab = _per_sample(s.alpha_bar[t - 1], x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def posterior_params(x0, xt, t: int, s: NoiseSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x_0)."""
    x0, xt = _same_shape(x0, xt)
    ab, ab_prev, b, a = s.ab(t), s.ab(t - 1), s.b(t), s.a(t)
    mean = np.sqrt(ab_prev) * b / (1.0 - ab) * x0 + np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab) * xt
    return mean, s.bt(t)


def mu_from_eps(xt, eps, t: int, s: NoiseSchedule):
    """Posterior mean written in terms of the noise: (x_t - b_t/sqrt(1-ab_t) eps)/sqrt(a_t)."""
    xt, eps = _same_shape(xt, eps)
    return (xt - s.b(t) / np.sqrt(1.0 - s.ab(t)) * eps) / np.sqrt(s.a(t))


def sigma(t: int, s: NoiseSchedule, sigma_choice: str = "beta_tilde") -> float:
    if sigma_choice == "beta_tilde":
        return float(np.sqrt(s.bt(t)))
    if sigma_choice == "beta":
        return float(np.sqrt(s.b(t)))
    raise ValueError(f"sigma_choice must be one of {SIGMA_CHOICES}")


def ddpm_step(xt, eps_pred, t: int, z, s: NoiseSchedule, sigma_choice: str = "beta_tilde"):
    """One ancestral step x_t -> x_{t-1}; ``z`` is ignored at t = 1."""
    xt, eps_pred, z = _same_shape(xt, eps_pred, z)
    mean = mu_from_eps(xt, eps_pred, t, s)
    if t == 1:
        return mean
    return mean + sigma(t, s, sigma_choice) * z


def predict_x0(xt, eps_pred, t: int, s: NoiseSchedule):
    ab = s.ab(t)
    return (xt - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)


def ddim_step(xt, eps_pred, t: int, t_prev: int, s: NoiseSchedule):
    """Deterministic (eta = 0) jump from step t to any earlier step t_prev >= 0."""
    if not (0 <= t_prev < t <= s.T):
        raise InvalidStepPair(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    xt, eps_pred = _same_shape(xt, eps_pred)
    x0_hat = predict_x0(xt, eps_pred, t, s)
    if t_prev == 0:
        return x0_hat
    ab_prev = s.ab(t_prev)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_pred


def cfg_combine(eps_cond, eps_uncond, scale: float):
    """Classifier-free guidance: eps_u + scale (eps_c - eps_u)."""
    eps_cond, eps_uncond = _same_shape(eps_cond, eps_uncond)
    return eps_uncond + scale * (eps_cond - eps_uncond)


def simple_loss(eps_true, eps_pred) -> float:
    """Squared Euclidean norm of the noise residual, summed over all entries."""
    eps_true, eps_pred = _same_shape(eps_true, eps_pred)
    diff = eps_true - eps_pred
    return float(np.sum(diff * diff))


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniform stride T, T-k, ..., k, 0 with k = T / steps."""
    if steps < 1 or steps > T or T % steps:
        raise InvalidStride(f"{steps} steps do not divide T={T} into a uniform stride")
    k = T // steps
    return list(range(T, -1, -k))


def ddpm_sample(eps_fn, x_T, s: NoiseSchedule, noises, sigma_choice: str = "beta_tilde"):
    """Run the ancestral chain from x_T down to x_0.

    ``eps_fn(x, t)`` returns the noise prediction; ``noises`` yields one
    standard-normal array per step, consumed for t = T..2.
    """
    x = np.asarray(x_T, dtype=np.float64)
    it = iter(noises) if noises is not None else None
    for t in range(s.T, 0, -1):
        z = next(it) if (it is not None and t > 1) else np.zeros_like(x)
        x = ddpm_step(x, eps_fn(x, t), t, z, s, sigma_choice)
    return x


def ddim_sample(eps_fn, x_T, s: NoiseSchedule, steps: int):
    x = np.asarray(x_T, dtype=np.float64)
    ts = ddim_timesteps(s.T, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        x = ddim_step(x, eps_fn(x, t), t, t_prev, s)
    return x
