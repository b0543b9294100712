"""Noise schedule and deterministic DDIM stepping.

Timestep indices follow the convention ``alpha_bar[0] == 1``: index 0 is the
clean latent and indices ``1..total_train_steps`` are the noisy training
levels. All stepping functions are pure and differentiable in their tensor
arguments, which the null-text optimizer relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch

from agediff.errors import DirectionError, RangeError, ShapeError, SingularityError


@dataclass(frozen=True)
class NoiseSchedule:
    total_train_steps: int = 1000
    beta_min: float = 0.00085
    beta_max: float = 0.012
    kind: Literal["linear", "scaled_linear"] = "scaled_linear"
    alpha_bar_table: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.total_train_steps < 1:
            raise RangeError("total_train_steps must be >= 1")
        if not 0 < self.beta_min <= self.beta_max < 1:
            raise RangeError(f"invalid beta endpoints {self.beta_min}, {self.beta_max}")
        n = self.total_train_steps
        if self.kind == "linear":
            betas = np.linspace(self.beta_min, self.beta_max, n, dtype=np.float64)
        elif self.kind == "scaled_linear":
            betas = np.linspace(self.beta_min**0.5, self.beta_max**0.5, n, dtype=np.float64) ** 2
        else:
            raise RangeError(f"unknown schedule kind {self.kind!r}")
        table = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        table.setflags(write=False)
        object.__setattr__(self, "alpha_bar_table", table)

    def to_dict(self) -> dict:
        return {
            "total_train_steps": self.total_train_steps,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "kind": self.kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


def toy_schedule() -> NoiseSchedule:
    """Schedule used by the toy backbone (same family as the default)."""
    return NoiseSchedule()


@dataclass(frozen=True)
class StepPlan:
    """Evenly strided inference timesteps, largest first.

    ``timestep_list[i]`` is denoised towards ``prev_timestep(i)``; the last
    entry steps to index 0.
    """

    inference_steps: int
    timestep_list: tuple[int, ...]
    eta: float = 0.0

    def __post_init__(self):
        if self.eta != 0.0:
            raise RangeError("only deterministic DDIM (eta = 0) is supported")
        ts = self.timestep_list
        if len(ts) != self.inference_steps:
            raise RangeError("timestep_list length must equal inference_steps")
        if any(a <= b for a, b in zip(ts, ts[1:])) or (ts and ts[-1] < 1):
            raise RangeError("timestep_list must be strictly decreasing and >= 1")

    def prev_timestep(self, i: int) -> int:
        return self.timestep_list[i + 1] if i + 1 < self.inference_steps else 0

    def sampling_pairs(self) -> list[tuple[int, int]]:
        """(t, s) pairs in sampling order, t > s."""
        return [(t, self.prev_timestep(i)) for i, t in enumerate(self.timestep_list)]

    def ascending(self) -> list[int]:
        """Trajectory timesteps 0, t_1, ..., t_T (length T + 1)."""
        return [0] + list(reversed(self.timestep_list))

    def to_dict(self) -> dict:
        return {"inference_steps": self.inference_steps, "timestep_list": list(self.timestep_list)}

    @classmethod
    def from_dict(cls, d: dict) -> "StepPlan":
        return cls(d["inference_steps"], tuple(d["timestep_list"]))


def make_plan(schedule: NoiseSchedule, inference_steps: int = 50) -> StepPlan:
    n = schedule.total_train_steps
    if not 1 <= inference_steps <= n:
        raise RangeError(f"inference_steps must be in [1, {n}]")
    stride = n // inference_steps
    ts = tuple(stride * k for k in range(inference_steps, 0, -1))
    return StepPlan(inference_steps, ts)


def alpha_bar(schedule: NoiseSchedule, t: int) -> float:
    t = int(t)
    if not 0 <= t <= schedule.total_train_steps:
        raise RangeError(f"timestep {t} outside [0, {schedule.total_train_steps}]")
    return float(schedule.alpha_bar_table[t])


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def q_sample(z0: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    _check_shapes(z0, eps, "q_sample")
    a = alpha_bar(schedule, t)
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def predict_x0(z_t: torch.Tensor, eps: torch.Tensor, a_t: float) -> torch.Tensor:
    if a_t <= 0.0:
        raise SingularityError("alpha_bar_t == 0")
    return (z_t - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)


def _transfer(z: torch.Tensor, eps: torch.Tensor, a_from: float, a_to: float) -> torch.Tensor:
    z0_hat = predict_x0(z, eps, a_from)
    return math.sqrt(a_to) * z0_hat + math.sqrt(1.0 - a_to) * eps


def ddim_step(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, s: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic DDIM move from timestep ``t`` down to ``s < t``."""
    if s >= t:
        raise DirectionError(f"ddim_step needs s < t, got s={s}, t={t}")
    _check_shapes(z_t, eps_pred, "ddim_step")
    return _transfer(z_t, eps_pred, alpha_bar(schedule, t), alpha_bar(schedule, s))


def ddim_invert_step(z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, u: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Same map as :func:`ddim_step`, run upwards to ``u > t``."""
    if u <= t:
        raise DirectionError(f"ddim_invert_step needs u > t, got u={u}, t={t}")
    _check_shapes(z_t, eps_pred, "ddim_invert_step")
    return _transfer(z_t, eps_pred, alpha_bar(schedule, t), alpha_bar(schedule, u))


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    _check_shapes(eps_uncond, eps_cond, "cfg_combine")
    if w < 0:
        raise RangeError("guidance scale must be >= 0")
    if w == 1.0:
        return eps_cond
    return eps_uncond + w * (eps_cond - eps_uncond)
