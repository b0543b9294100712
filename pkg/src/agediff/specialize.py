"""Age-aware fine-tuning with the double-prompt objective.

Every training image contributes two noise-prediction terms that share the
clean latent but draw independent noise and timesteps: one conditioned on the
age-agnostic prompt and one on the age-specific prompt.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from typing import Literal

import torch

from agediff.errors import InputError, RangeError, TrainingError
from agediff.prompt import age_group_of, build_training_prompts, check_age

log = logging.getLogger(__name__)


@dataclass
class SpecializationConfig:
    steps: int = 150
    batch_size: int = 2
    learning_rate: float = 5e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    double_prompt: bool = True
    rng_seed: int = 0
    # "group_center" maps each label to the central age of its group
    age_labels: Literal["exact", "group_center"] = "group_center"

    def __post_init__(self):
        if self.steps < 0:
            raise InputError("steps must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise InputError("learning_rate must be > 0 and batch_size >= 1")
        if self.age_labels not in ("exact", "group_center"):
            raise InputError(f"unknown age_labels mode {self.age_labels!r}")


def training_age(age: int, mode: str) -> int:
    if mode == "group_center":
        return age_group_of(age).central_age
    return check_age(age)


def _sq_norm(x: torch.Tensor) -> torch.Tensor:
    return x.pow(2).flatten(1).sum(1)


def _check_t(backbone, t):
    t = torch.as_tensor(t).reshape(-1)
    if int(t.min()) < 1 or int(t.max()) > backbone.schedule.total_train_steps:
        raise RangeError(f"timestep outside [1, {backbone.schedule.total_train_steps}]")
    return t


def double_prompt_terms(backbone, z0, ages, eps, eps_prime, t, t_prime, double_prompt: bool = True):
    """Per-sample (age-agnostic term, age-specific term); the first is zero when disabled."""
    if z0.dim() == 3:
        z0, eps, eps_prime = z0[None], eps[None], eps_prime[None]
    if isinstance(ages, int):
        ages = [ages]
    t = _check_t(backbone, t).expand(z0.shape[0])
    t_prime = _check_t(backbone, t_prime).expand(z0.shape[0])
    table = torch.tensor(backbone.schedule.alpha_bar_table, dtype=torch.float32)
    pairs = [build_training_prompts(a) for a in ages]

    def noisy(e, tt):
        a = table[tt][:, None, None, None]
        return a.sqrt() * z0 + (1 - a).sqrt() * e

    ctx_age = torch.stack([backbone.encode_prompt(p_age).embedding for _, p_age in pairs])
    term_age = _sq_norm(eps_prime - backbone.predict_noise(noisy(eps_prime, t_prime), t_prime, ctx_age))
    if not double_prompt:
        return torch.zeros_like(term_age), term_age
    ctx_plain = torch.stack([backbone.encode_prompt(p).embedding for p, _ in pairs])
    term_plain = _sq_norm(eps - backbone.predict_noise(noisy(eps, t), t, ctx_plain))
    return term_plain, term_age


def double_prompt_loss(backbone, z0, age, eps, eps_prime, t, t_prime, double_prompt: bool = True) -> torch.Tensor:
    """Squared-error objective summed over both prompts, averaged over the batch."""
    a, b = double_prompt_terms(backbone, z0, age, eps, eps_prime, t, t_prime, double_prompt)
    return (a + b).mean()


def finetune(backbone, dataset, config: SpecializationConfig = SpecializationConfig()):
    """Return ``(specialized_copy, run_log)``; ``run_log`` rows are (step, loss_P, loss_P_age)."""
    if len(dataset) == 0:
        raise InputError("cannot specialize on an empty dataset")
    model = backbone.clone()
    if config.steps == 0:
        return model, []
    gen = torch.Generator().manual_seed(config.rng_seed)
    params = model.noise_parameters()
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2))
    z_all = model.encode_image(dataset.images)
    ages = [training_age(a, config.age_labels) for a in dataset.ages]
    T = model.schedule.total_train_steps
    rows = []
    model.unet.train()
    for step in range(config.steps):
        idx = torch.randint(0, len(dataset), (config.batch_size,), generator=gen)
        z0 = z_all[idx]
        eps = torch.randn(z0.shape, generator=gen)
        eps_prime = torch.randn(z0.shape, generator=gen)
        t = torch.randint(1, T + 1, (config.batch_size,), generator=gen)
        t_prime = torch.randint(1, T + 1, (config.batch_size,), generator=gen)
        term_p, term_a = double_prompt_terms(
            model, z0, [ages[i] for i in idx.tolist()], eps, eps_prime, t, t_prime, config.double_prompt
        )
        loss = (term_p + term_a).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite specialization loss at step {step}", step, {"recent": rows[-5:]})
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append((step, term_p.mean().item(), term_a.mean().item()))
    model.unet.eval()
    model.meta = dict(backbone.meta, specialization=asdict(config))
    return model, rows


@torch.no_grad()
def heldout_double_prompt_loss(backbone, dataset, draws: int = 4, seed: int = 1234, age_labels: str = "exact") -> float:
    """Mean double-prompt loss on fixed noise/timestep draws (common random numbers)."""
    gen = torch.Generator().manual_seed(seed)
    z0 = backbone.encode_image(dataset.images)
    ages = [training_age(a, age_labels) for a in dataset.ages]
    T = backbone.schedule.total_train_steps
    total = 0.0
    for _ in range(draws):
        eps = torch.randn(z0.shape, generator=gen)
        eps_prime = torch.randn(z0.shape, generator=gen)
        t = torch.randint(1, T + 1, (z0.shape[0],), generator=gen)
        t_prime = torch.randint(1, T + 1, (z0.shape[0],), generator=gen)
        total += double_prompt_loss(backbone, z0, ages, eps, eps_prime, t, t_prime).item()
    return total / draws


def write_run_log(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss_P", "loss_P_age"])
        for step, lp, la in rows:
            w.writerow([step, repr(lp), repr(la)])
