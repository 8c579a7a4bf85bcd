"""Linear variance schedule and the coefficients derived from it.

Arrays are stored with a leading sentinel so that ``alpha_bar[0] == 1`` and
index ``t`` means timestep ``t`` (1-based), matching the usual notation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PAPER_T = 1000
PAPER_BETA = (0.0005, 0.0195)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def _check(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")

    def signal_noise_coeffs(self, t):
        self._check(t)
        ab = self.alpha_bar[t]
        return np.sqrt(ab), np.sqrt(1.0 - ab)

    def posterior_coeffs(self, t):
        """Weights of x0 and x_t in the posterior mean, and its variance."""
        self._check(t)
        a, ab, ab_prev = self.alpha[t], self.alpha_bar[t], self.alpha_bar[t - 1]
        c0 = np.sqrt(ab_prev) * (1.0 - a) / (1.0 - ab)
        ct = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
        return c0, ct, self.posterior_var[t]

    def params(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def linear_schedule(T, beta_start, beta_end) -> NoiseSchedule:
    T = int(T)
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    steps = np.arange(T, dtype=np.float64)
    beta = np.empty(T + 1)
    beta[0] = 0.0
    beta[1:] = beta_start + steps / (T - 1) * (beta_end - beta_start)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    post = np.zeros(T + 1)
    post[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    for arr in (beta, alpha, alpha_bar, post):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha, alpha_bar, post)


def paper_schedule() -> NoiseSchedule:
    return linear_schedule(PAPER_T, *PAPER_BETA)


def desk_schedule(T=200) -> NoiseSchedule:
    """Shorter chain over the same beta endpoints.

    At T=200 the chain ends at sqrt(alpha_bar) ~ 0.37 rather than ~0.007, which
    keeps the x0-estimate weight sqrt(1 - alpha_bar) / sqrt(alpha_bar) below 3.
    """
    return linear_schedule(T, *PAPER_BETA)
