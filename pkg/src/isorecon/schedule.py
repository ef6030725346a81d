"""Diffusion-time coefficients: cosine schedule, forward marginal, DDIM noise scale.

Arrays are indexed by level ``t`` in ``0..T`` with ``alpha_bars[0] == 1`` stored
explicitly, so ``alpha_bars[t]`` is the cumulative product up to step ``t``.
All coefficients are float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s: float
    betas: np.ndarray = field(repr=False)  # index 0 unused (0.0)
    alphas: np.ndarray = field(repr=False)  # index 0 unused (1.0)
    alpha_bars: np.ndarray = field(repr=False)
    kind: str = "cosine"

    def check_level(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"step index {t} outside [{lo}, {self.T}]")
        return t

    def params(self) -> dict:
        """What a checkpoint stores; coefficients are rebuilt from these."""
        return {"kind": self.kind, "T": self.T, "s": self.s}

    @classmethod
    def from_params(cls, params: dict) -> "NoiseSchedule":
        if params.get("kind", "cosine") != "cosine":
            raise ValueError(f"unsupported schedule kind {params['kind']!r}")
        return make_cosine_schedule(int(params["T"]), float(params["s"]))


def cosine_alpha_bar(t: float | np.ndarray, T: int, s: float) -> np.ndarray:
    """Closed-form g(t)/g(0) with g(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)."""
    g = lambda u: np.cos((np.asarray(u, dtype=np.float64) / T + s) / (1 + s) * math.pi / 2) ** 2
    return g(t) / g(0.0)


def make_cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not s > 0:
        raise ValueError(f"offset s must be positive, got {s}")
    T = int(T)
    target = cosine_alpha_bar(np.arange(T + 1), T, s)
    betas = np.zeros(T + 1)
    betas[1:] = np.minimum(1.0 - target[1:] / target[:-1], BETA_MAX)
    alphas = 1.0 - betas
    alpha_bars = np.ones(T + 1)
    for t in range(1, T + 1):
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t]
    for a in (betas, alphas, alpha_bars):
        a.setflags(write=False)
    return NoiseSchedule(T=T, s=float(s), betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_perturb(x0, t: int, eps, sched: NoiseSchedule):
    """Sample x_t from q(x_t | x_0): sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    Works on numpy arrays and torch tensors alike.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    t = sched.check_level(t)
    ab = sched.alpha_bars[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddim_sigma(sched: NoiseSchedule, t: int, deterministic: bool = False, t_prev: int | None = None) -> float:
    """Noise scale for the step from level ``t`` to ``t_prev`` (default ``t - 1``).

    sigma = sqrt((1 - abar_prev) / (1 - abar_t)) * sqrt(1 - abar_t / abar_prev)
    """
    t = sched.check_level(t)
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ValueError(f"previous level {t_prev} must lie in [0, {t})")
    if deterministic:
        return 0.0
    ab_t = sched.alpha_bars[t]
    ab_p = sched.alpha_bars[t_prev]
    var = (1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)
    return math.sqrt(max(var, 0.0))
