"""Forward corruption processes and score-driven samplers.

Two SDE families are supported: variance-exploding (VE) with a geometric
noise schedule, and sub-variance-preserving (sub-VP). Sampling combines a
reverse-time Euler-Maruyama predictor with an annealed Langevin corrector
whose step size follows the dynamic signal-to-noise rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Smallest sampling time; the kernel std collapses towards t=0 and the score
# scale diverges, so "t = 0" operations execute here instead.
T_MIN = 1e-3


@dataclass(frozen=True)
class DiffusionSpec:
    """Forward corruption process q_t(x_tilde | x) and its prior."""

    kind: str = "ve"  # "ve" | "subvp"
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.kind not in ("ve", "subvp"):
            raise ValueError(f"unknown SDE kind: {self.kind!r}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not 0 < self.beta_min < self.beta_max:
            raise ValueError("need 0 < beta_min < beta_max")

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def beta_integral(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def prior_std(self):
        if self.kind == "ve":
            return self.sigma_max
        return 1.0 - math.exp(-self.beta_integral(1.0))

    def to_dict(self):
        return {
            "kind": self.kind,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class SamplerConfig:
    predictor_steps: int = 1000
    corrector_steps_per_t: int = 1
    snr: float = 0.16
    langevin_steps: int = 0
    langevin_snr: float = 0.16
    rng_seed: int = 0

    def __post_init__(self):
        if self.predictor_steps < 0 or self.corrector_steps_per_t < 0 or self.langevin_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.snr <= 0 or self.langevin_snr <= 0:
            raise ValueError("snr must be positive")

    def to_dict(self):
        return {
            "predictor_steps": self.predictor_steps,
            "corrector_steps_per_t": self.corrector_steps_per_t,
            "snr": self.snr,
            "langevin_steps": self.langevin_steps,
            "langevin_snr": self.langevin_snr,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def kernel_params(spec: DiffusionSpec, t):
    """(mean_scale, sigma_t) of the corruption kernel at time t in [0, 1]."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if spec.kind == "ve":
        sigma = spec.sigma_min * (spec.sigma_max / spec.sigma_min) ** t
        mean_scale = np.ones_like(sigma)
    else:
        integral = spec.beta_integral(t)
        mean_scale = np.exp(-0.5 * integral)
        sigma = 1.0 - np.exp(-integral)
    if t.ndim == 0:
        return float(mean_scale), float(sigma)
    return mean_scale, sigma


def perturb(spec: DiffusionSpec, x, t, z):
    """Draw from q_t(. | x) given standard normal noise z."""
    x, z = np.asarray(x), np.asarray(z)
    if x.shape != z.shape:
        raise ValueError(f"x shape {x.shape} != z shape {z.shape}")
    mean_scale, sigma = kernel_params(spec, t)
    if np.ndim(mean_scale) == 1:  # per-row t on a (batch, d) array
        mean_scale = np.asarray(mean_scale)[:, None]
        sigma = np.asarray(sigma)[:, None]
    return mean_scale * x + sigma * z


def dsm_target(spec: DiffusionSpec, x, x_tilde, t, sigma_floor=1e-12):
    """Score of the corruption kernel: -(x_tilde - mean_scale*x) / sigma_t^2."""
    x, x_tilde = np.asarray(x), np.asarray(x_tilde)
    if x.shape != x_tilde.shape:
        raise ValueError("x and x_tilde shapes differ")
    mean_scale, sigma = kernel_params(spec, t)
    if np.any(np.asarray(sigma) < sigma_floor):
        raise ValueError(f"sigma_t below floor {sigma_floor}")
    if np.ndim(mean_scale) == 1:
        mean_scale = np.asarray(mean_scale)[:, None]
        sigma = np.asarray(sigma)[:, None]
    return -(x_tilde - mean_scale * x) / (sigma * sigma)


def predictor_step(spec: DiffusionSpec, score_fn, x, t, dt, z):
    """One reverse-time Euler-Maruyama step from t to t - dt."""
    if dt <= 0 or t - dt < 0:
        raise ValueError("need dt > 0 and t - dt >= 0")
    x = np.asarray(x, dtype=np.float64)
    score = np.asarray(score_fn(x, t))
    if not np.all(np.isfinite(score)):
        raise FloatingPointError(f"non-finite score at t={t}")
    if spec.kind == "ve":
        _, sig_t = kernel_params(spec, t)
        _, sig_s = kernel_params(spec, t - dt)
        var_gap = sig_t * sig_t - sig_s * sig_s
        return x + var_gap * score + math.sqrt(var_gap) * z
    beta = spec.beta(t)
    g2 = beta * (1.0 - math.exp(-2.0 * spec.beta_integral(t)))
    drift = 0.5 * beta * x + g2 * score
    return x + drift * dt + math.sqrt(g2 * dt) * z


def corrector_step(score_fn, x, t, snr, z):
    """Annealed Langevin step with the dynamic step-size rule.

    eps = 2 * (snr * ||z|| / ||score||)^2 with the norms averaged over the
    batch, matching the reference convention the step-size rule comes
    from; a shared step size also keeps a single near-stationary chain
    from receiving an unbounded kick. Chains whose own score norm is zero
    are skipped (their step size is undefined).
    """
    if snr <= 0:
        raise ValueError("snr must be positive")
    x = np.asarray(x, dtype=np.float64)
    score = np.asarray(score_fn(x, t))
    if not np.all(np.isfinite(score)):
        raise FloatingPointError(f"non-finite score at t={t}")
    if x.ndim == 1:
        s_norm = np.linalg.norm(score)
        if s_norm == 0.0:
            return x
        eps = 2.0 * (snr * np.linalg.norm(z) / s_norm) ** 2
        return x + eps * score + math.sqrt(2.0 * eps) * z
    s_norm = np.linalg.norm(score, axis=1)
    live = s_norm > 0.0
    if not live.any():
        return x
    z_norm = np.linalg.norm(z, axis=1)
    eps = 2.0 * (snr * z_norm[live].mean() / s_norm[live].mean()) ** 2
    out = x.copy()
    out[live] = x[live] + eps * score[live] + math.sqrt(2.0 * eps) * z[live]
    return out


def langevin_chain(score_fn, x, t, n_steps, snr, rng):
    """n_steps of Langevin MCMC at fixed t with the dynamic step size."""
    for _ in range(n_steps):
        z = rng.standard_normal(x.shape)
        x = corrector_step(score_fn, x, t, snr, z)
    return x


def pc_sample(spec: DiffusionSpec, score_fn, config: SamplerConfig, dim, count, rng=None, t_min=T_MIN):
    """Predictor-corrector sampling down a uniform time grid from t=1 to t_min.

    Returns a (count, dim) array; deterministic given config.rng_seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    x = rng.standard_normal((count, dim)) * spec.prior_std()
    n = config.predictor_steps
    grid = np.linspace(1.0, t_min, n + 1)
    for i in range(n):
        t = grid[i]
        for _ in range(config.corrector_steps_per_t):
            z = rng.standard_normal(x.shape)
            x = corrector_step(score_fn, x, t, config.snr, z)
        z = rng.standard_normal(x.shape)
        x = predictor_step(spec, score_fn, x, t, t - grid[i + 1], z)
    return x
