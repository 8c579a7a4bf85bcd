"""Forward corruption, clean-image estimation and ancestral sampling.

The array functions broadcast over leading axes; ``t`` may be a scalar or an
integer array with one entry per leading (batch) element.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import philox
from .schedule import NoiseSchedule
from .volume import TRAIN, Volume3

SIGMA_MODES = ("posterior", "beta", "none")


class SamplingError(RuntimeError):
    pass


@dataclass
class SampleConfig:
    schedule: NoiseSchedule
    mc_repeats: int = 1
    seed: int = 0
    clamp_x0: bool = False
    final_noise_zero: bool = True
    # "none" forces z = 0 at every step (used by the oracle checks)
    sigma: str = "posterior"

    def __post_init__(self):
        if self.mc_repeats < 1:
            raise ValueError("mc_repeats must be at least 1")
        if self.sigma not in SIGMA_MODES:
            raise ValueError(f"sigma must be one of {SIGMA_MODES}")


def _coef(values, t, ndim):
    c = np.asarray(values[t], dtype=np.float64)
    if c.ndim:
        c = c.reshape(c.shape + (1,) * (ndim - c.ndim))
    return c


def _check_t(sched, t):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"timestep outside [1, {sched.T}]")


def _unwrap(x):
    return x.voxels if isinstance(x, Volume3) else np.asarray(x, dtype=np.float64)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def corrupt(x0, eps, t, sched):
    """Noise a clean image to timestep ``t`` in closed form."""
    if isinstance(x0, Volume3) and x0.range_tag != TRAIN:
        raise ValueError("corrupt expects a train-range volume")
    a, e = _unwrap(x0), _unwrap(eps)
    _same_shape(a, e, "corrupt")
    _check_t(sched, t)
    ab = _coef(sched.alpha_bar, t, a.ndim)
    return np.sqrt(ab) * a + np.sqrt(1.0 - ab) * e


def estimate_x0(x_t, eps_hat, t, sched, clamp=False):
    """Invert :func:`corrupt` with a predicted noise."""
    x, e = _unwrap(x_t), _unwrap(eps_hat)
    _same_shape(x, e, "estimate_x0")
    _check_t(sched, t)
    ab = _coef(sched.alpha_bar, t, x.ndim)
    x0 = (x - np.sqrt(1.0 - ab) * e) / np.sqrt(ab)
    return np.clip(x0, -1.0, 1.0) if clamp else x0


def posterior_mean(x_t, x0_hat, t, sched):
    x, x0 = _unwrap(x_t), _unwrap(x0_hat)
    _same_shape(x, x0, "posterior_mean")
    c0, ct, _ = sched.posterior_coeffs(t)
    return c0 * x0 + ct * x


def sigma_at(sched, t, mode="posterior"):
    if mode == "posterior":
        return float(np.sqrt(sched.posterior_var[t]))
    if mode == "beta":
        return float(np.sqrt(sched.beta[t]))
    return 0.0


def ancestral_step(x_t, eps_hat, t, z, sched, sigma="posterior"):
    """One reverse step x_t -> x_{t-1} from the predicted noise."""
    x, e = _unwrap(x_t), _unwrap(eps_hat)
    _same_shape(x, e, "ancestral_step")
    _check_t(sched, t)
    a, ab = sched.alpha[t], sched.alpha_bar[t]
    mean = (x - (1.0 - a) / np.sqrt(1.0 - ab) * e) / np.sqrt(a)
    if z is None:
        return mean
    z = _unwrap(z)
    _same_shape(x, z, "ancestral_step")
    return mean + sigma_at(sched, t, sigma) * z


def _step_noise(rng, cfg, t, shape):
    if cfg.sigma == "none" or (t == 1 and cfg.final_noise_zero):
        return None
    return rng.standard_normal(shape)


def _reverse(denoiser, cond, cfg, seed, shape):
    sched = cfg.schedule
    rng = philox(seed)
    x = rng.standard_normal(shape)
    for t in range(sched.T, 0, -1):
        try:
            eps = np.asarray(denoiser(x, cond, t), dtype=np.float64)
        except Exception as exc:
            raise SamplingError(f"denoiser failed at timestep {t}: {exc}") from exc
        if eps.shape != x.shape:
            raise SamplingError(f"denoiser returned shape {eps.shape} at timestep {t}, expected {x.shape}")
        z = _step_noise(rng, cfg, t, shape)
        if cfg.clamp_x0:
            x = posterior_mean(x, estimate_x0(x, eps, t, sched, clamp=True), t, sched)
            if z is not None:
                x = x + sigma_at(sched, t, cfg.sigma) * z
        else:
            x = ancestral_step(x, eps, t, z, sched, cfg.sigma)
    return x


def _as_output(condition, x):
    if isinstance(condition, Volume3):
        return Volume3(np.clip(x, -1.0, 1.0), TRAIN, condition.stored_min, condition.stored_max)
    return x


def reverse_sample(denoiser, condition, cfg: SampleConfig, shape=None):
    """Run the full T-step chain from seeded Gaussian noise.

    ``denoiser(x_t, condition, t)`` must return the predicted noise with the
    shape of ``x_t``.  ``shape`` defaults to the condition's shape.  Given a
    :class:`Volume3` condition the result is a train-range volume (clipped
    to [-1, 1]); given an array the raw chain output is returned.
    """
    cond = _unwrap(condition)
    shape = cond.shape if shape is None else tuple(shape)
    return _as_output(condition, _reverse(denoiser, cond, cfg, cfg.seed, shape))


def repeat_seed(seed, i):
    return int(seed) + i


def mc_sample(denoiser, condition, cfg: SampleConfig, shape=None):
    """Voxelwise mean of ``cfg.mc_repeats`` independent reverse chains."""
    cond = _unwrap(condition)
    shape = cond.shape if shape is None else tuple(shape)
    total = None
    for i in range(cfg.mc_repeats):
        x = _reverse(denoiser, cond, cfg, repeat_seed(cfg.seed, i), shape)
        total = x if total is None else total + x
    return _as_output(condition, total / cfg.mc_repeats)
