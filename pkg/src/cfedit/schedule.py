"""Diffusion variance schedule, forward noising, and the deterministic DDIM update.

All functions are pure: they never mutate their inputs and are safe to call
from any number of concurrent workers. ``alphas`` always means the cumulative
product (alpha-bar) sequence indexed by timestep t in [0, T_max], with
alphas[0] = 1 (no noise) and values monotone non-increasing in t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch

from cfedit.errors import SamplingDiverged, ShapeError, TimestepError

Tensor = torch.Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative-alpha sequence plus the parameters that generated it."""

    alphas: Tensor  # float64, shape (T_max + 1,)
    kind: str = "linear"
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        a = self.alphas
        if a.ndim != 1 or a.numel() < 2:
            raise ValueError("alphas must be a 1-D sequence with at least two entries")
        if not torch.all(a > 0):
            raise ValueError("alphas must be strictly positive")
        if a[0] > 1.0:
            raise ValueError("alphas[0] must be <= 1")
        if not torch.all(a[:-1] >= a[1:]):
            raise ValueError("alphas must be monotone non-increasing")
        object.__setattr__(self, "alphas", a.to(torch.float64))

    @property
    def T_max(self) -> int:
        return self.alphas.numel() - 1

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.T_max:
            raise TimestepError(f"timestep {t} outside [0, {self.T_max}]")
        return float(self.alphas[t])

    @classmethod
    def linear(cls, T_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        """Linear-beta schedule; alphas[t] = prod_{s<=t} (1 - beta_s), alphas[0] = 1."""
        betas = torch.linspace(beta_start, beta_end, T_max, dtype=torch.float64)
        alphas = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
        return cls(alphas=alphas, kind="linear",
                   parameters={"beta_start": beta_start, "beta_end": beta_end, "T_max": T_max})

    def to_manifest(self) -> dict:
        return {"kind": self.kind, "T_max": self.T_max, "parameters": dict(self.parameters)}

    @classmethod
    def from_manifest(cls, record: dict) -> "NoiseSchedule":
        if record["kind"] != "linear":
            raise ValueError(f"unknown schedule kind {record['kind']!r}")
        p = record["parameters"]
        return cls.linear(T_max=record["T_max"], beta_start=p["beta_start"], beta_end=p["beta_end"])


def _coeffs(sched: NoiseSchedule, t: int) -> tuple[float, float]:
    """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)); the complement is clamped at 0
    so the alpha_bar = 1 case stays an exact identity."""
    ab = sched.alpha_bar(t)
    return math.sqrt(ab), math.sqrt(max(1.0 - ab, 0.0))


def forward_noise(x0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    sa, sc = _coeffs(sched, t)
    return sa * x0 + sc * eps


def ddim_step(x_t: Tensor, t: int, eps_pred: Tensor, sched: NoiseSchedule,
              t_prev: int | None = None) -> Tensor:
    """One deterministic reverse update from t to t_prev (default t - 1).

    x_prev = sqrt(ab_prev) * (x_t - sqrt(1-ab_t) eps) / sqrt(ab_t) + sqrt(1-ab_prev) eps
    """
    if t < 1:
        raise TimestepError("ddim_step requires t >= 1")
    if eps_pred.shape != x_t.shape:
        raise ShapeError(f"eps_pred shape {tuple(eps_pred.shape)} != x_t shape {tuple(x_t.shape)}")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise TimestepError(f"t_prev {t_prev} must lie in [0, {t})")
    sa_t, sc_t = _coeffs(sched, t)
    sa_p, sc_p = _coeffs(sched, t_prev)
    x0_hat = (x_t - sc_t * eps_pred) / sa_t
    return sa_p * x0_hat + sc_p * eps_pred


def sampling_timesteps(T_max: int, steps: int) -> list[int]:
    """Uniform stride from T_max down to exactly 0, inclusive; steps+1 points."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    pts = [round(T_max * (1.0 - i / steps)) for i in range(steps + 1)]
    # guard against rounding collisions on coarse schedules
    for i in range(1, len(pts)):
        pts[i] = min(pts[i], pts[i - 1] - 1)
    if pts[-1] != 0:
        raise ValueError("stride does not reach t=0; reduce steps")
    return pts


def ddim_sample(x_T: Tensor, steps: int, predict: Callable[[Tensor, int], Tensor],
                sched: NoiseSchedule) -> Tensor:
    """Iterate ddim_step along a uniform stride from T_max to 0.

    Bit-reproducible for identical (x_T, predictor, schedule, stride).
    """
    if steps > sched.T_max:
        raise ValueError(f"steps {steps} exceeds T_max {sched.T_max}")
    ts = sampling_timesteps(sched.T_max, steps)
    x = x_T
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        eps = predict(x, t_cur)
        x = ddim_step(x, t_cur, eps, sched, t_prev=t_next)
        if not torch.isfinite(x).all():
            raise SamplingDiverged(t_next)
    return x
