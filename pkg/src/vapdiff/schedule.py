"""Noise schedule and the forward/reverse diffusion updates.

Step indices are 1-based everywhere in this module (``1 <= t <= T``); the
arrays on :class:`NoiseSchedule` are 0-based, so ``betas[t - 1]`` is the
variance added at step ``t``.  Every function takes its randomness as an
explicit argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np
import torch

from .errors import NumericError, ValidationError

StepIndex = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if self.T < 1:
            raise ValidationError("must be >= 1", field="T")
        if betas.shape != (self.T,) or alpha_bars.shape != (self.T,):
            raise ValidationError(f"expected {self.T} entries", field="betas")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValidationError("every beta must lie strictly in (0, 1)", field="betas")
        if not np.all((alpha_bars > 0) & (alpha_bars < 1)):
            raise ValidationError("every alpha_bar must lie strictly in (0, 1)", field="alpha_bars")
        if self.T > 1 and not np.all(np.diff(alpha_bars) < 0):
            raise ValidationError("alpha_bars must be strictly decreasing", field="alpha_bars")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def beta(self, t: int) -> float:
        return float(self.betas[self._index(t)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._index(t)])

    def _index(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise ValidationError(f"step {t} outside [1, {self.T}]", field="t")
        return int(t) - 1

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist()}


def build_schedule(
    kind: Literal["linear", "constant"] = "linear",
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Build a beta schedule and its cumulative signal factors.

    ``linear`` interpolates from ``beta_start`` to ``beta_end`` inclusive;
    ``constant`` repeats ``beta_start``.
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ValidationError(f"must be a positive integer, got {T!r}", field="T")
    if not 0 < beta_start < 1:
        raise ValidationError(f"must lie in (0, 1), got {beta_start}", field="beta_start")
    if not 0 < beta_end < 1:
        raise ValidationError(f"must lie in (0, 1), got {beta_end}", field="beta_end")
    if beta_start > beta_end:
        raise ValidationError("beta_start must not exceed beta_end", field="beta_end")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    elif kind == "constant":
        betas = np.full(int(T), beta_start, dtype=np.float64)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}", field="kind")
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=int(T), betas=betas, alpha_bars=alpha_bars)


def _check_shapes(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}", field=what)


def _coef(values: np.ndarray, t: StepIndex, sched: NoiseSchedule, like: torch.Tensor) -> torch.Tensor | float:
    """Look up a per-step coefficient, broadcasting per-sample steps over the batch."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.min() < 1 or t.max() > sched.T:
            raise ValidationError(f"steps outside [1, {sched.T}]", field="t")
        table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
        out = table[t.long() - 1]
        return out.view(-1, *([1] * (like.ndim - 1)))
    return float(values[sched._index(int(t))])


def forward_diffuse(x0: torch.Tensor, t: StepIndex, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Jump straight from ``x0`` to step ``t``: sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    _check_shapes(x0, eps, "eps")
    signal = _coef(np.sqrt(sched.alpha_bars), t, sched, x0)
    noise = _coef(np.sqrt(1.0 - sched.alpha_bars), t, sched, x0)
    return signal * x0 + noise * eps


def forward_step(x_prev: torch.Tensor, t: StepIndex, z: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One Markov noising step from ``t-1`` to ``t`` with a supplied standard-normal draw."""
    _check_shapes(x_prev, z, "z")
    keep = _coef(np.sqrt(1.0 - sched.betas), t, sched, x_prev)
    add = _coef(np.sqrt(sched.betas), t, sched, x_prev)
    return keep * x_prev + add * z


def diffusion_loss(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element (batch included)."""
    _check_shapes(eps_pred, eps, "eps_pred")
    return torch.mean((eps - eps_pred) ** 2)


def reverse_step(
    xt: torch.Tensor,
    eps_pred: torch.Tensor,
    t: int,
    z: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """DDPM ancestral update producing ``x_{t-1}``; the final step (t=1) ignores ``z``."""
    _check_shapes(xt, eps_pred, "eps_pred")
    _check_shapes(xt, z, "z")
    if not torch.isfinite(eps_pred).all():
        raise NumericError(f"non-finite noise prediction at step {t}; sampling diverged")
    beta = sched.beta(t)
    ab = sched.alpha_bar(t)
    mean = (xt - (beta / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(1.0 - beta)
    if t == 1:
        return mean
    return mean + math.sqrt(beta) * z


def clip_noise_estimate(xt: torch.Tensor, eps_pred: torch.Tensor, t: int, sched: NoiseSchedule, bound: float) -> torch.Tensor:
    """Noise estimate consistent with the clamped clean-sample estimate at step ``t``."""
    ab = sched.alpha_bar(t)
    x0 = ((xt - math.sqrt(1 - ab) * eps_pred) / math.sqrt(ab)).clamp(-bound, bound)
    return (xt - math.sqrt(ab) * x0) / math.sqrt(1 - ab)


def sample_loop(
    predict,
    shape: tuple[int, ...],
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
    clip_x0: float | None = None,
) -> torch.Tensor:
    """Run the full reverse chain from pure noise.

    ``predict(x_t, t)`` receives a batch and an int step and returns the noise
    estimate.  All draws come from ``generator``.

    With ``clip_x0`` set, the clean-sample estimate implied by each noise
    prediction is clamped to ``[-clip_x0, clip_x0]`` and the noise estimate is
    re-derived from it before the step.  This keeps short chains on bounded
    data from drifting out of range.
    """
    x = torch.randn(shape, generator=generator, dtype=dtype)
    for t in range(sched.T, 0, -1):
        eps_pred = predict(x, t)
        if clip_x0 is not None:
            eps_pred = clip_noise_estimate(x, eps_pred, t, sched, clip_x0)
        z = torch.randn(shape, generator=generator, dtype=dtype) if t > 1 else torch.zeros(shape, dtype=dtype)
        x = reverse_step(x, eps_pred, t, z, sched)
    return x
