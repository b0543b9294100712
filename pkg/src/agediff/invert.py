"""DDIM inversion and per-step null-text optimization.

The inversion produces a pivot trajectory ``z_0 .. z_T``. Null-text
optimization then walks the sampling direction ``t = T .. 1`` and, at each
step, tunes the unconditional embedding so that one guided DDIM step from the
current latent lands on the pivot latent of the next step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from agediff.backbone.base import AttentionProbeContext, Backbone
from agediff.errors import ConsistencyError, InputError, OptimizationError, ShapeError
from agediff.prompt import PromptSpec, build_prompt, classify_gender, estimate_age, parse_prompt
from agediff.schedule import StepPlan, cfg_combine, ddim_invert_step, ddim_step

log = logging.getLogger(__name__)


@dataclass
class NullOptConfig:
    inner_iterations: int = 10
    learning_rate: float = 1e-2
    early_stop: float = 1e-5
    guidance_w: float = 7.5

    def __post_init__(self):
        if self.inner_iterations < 0 or self.learning_rate <= 0 or self.early_stop < 0 or self.guidance_w < 0:
            raise InputError(f"invalid null-text config {self}")


@dataclass
class DiffusionTrajectory:
    latents: list[torch.Tensor]  # z_0 .. z_T, each (1, C, H, W)
    prompt: PromptSpec
    guidance_w_inv: float
    plan: StepPlan
    source_hash: str = ""

    def __post_init__(self):
        if len(self.latents) != self.plan.inference_steps + 1:
            raise ConsistencyError("trajectory length does not match the step plan")


@dataclass
class NullTextSchedule:
    embeddings: list[torch.Tensor]  # one per sampling step, largest t first
    per_step_final_loss: list[float]
    per_step_initial_loss: list[float] = field(default_factory=list)
    audit: list[tuple[int, int]] = field(default_factory=list)  # (step index, timestep) in visit order

    def __len__(self):
        return len(self.embeddings)


@dataclass
class InversionBundle:
    z_T: torch.Tensor
    null_schedule: NullTextSchedule
    prompt: PromptSpec
    estimated_age: Optional[int]
    plan: StepPlan
    guidance_w: float
    gender: Optional[str] = None
    config: dict = field(default_factory=dict)
    psnr: Optional[float] = None
    source: Optional[torch.Tensor] = None  # original image (C, H, W), if kept


def tensor_hash(x: torch.Tensor) -> str:
    return hashlib.sha256(x.detach().contiguous().numpy().astype("<f4").tobytes()).hexdigest()


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    mse = float((a.double() - b.double()).pow(2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def guided_noise(backbone, z, t, cond, null, w, probe=None):
    """Classifier-free guided noise; the probe only sees the conditional branch."""
    eps_c = backbone.predict_noise(z, t, cond, probe)
    if w == 1.0:
        return eps_c
    eps_u = backbone.predict_noise(z, t, null)
    return cfg_combine(eps_u, eps_c, w)


@torch.no_grad()
def ddim_invert(
    backbone: Backbone, image: torch.Tensor, prompt: PromptSpec, plan: StepPlan, guidance_w: float = 1.0
) -> DiffusionTrajectory:
    """Deterministic image-to-noise trajectory.

    Each upward step evaluates the noise at the *target* timestep from the
    current latent, the usual first-order approximation.
    """
    z = backbone.encode_image(image)
    if z.shape[0] != 1:
        raise ShapeError("ddim_invert takes a single image")
    cond = backbone.encode_prompt(prompt)
    null = backbone.null_embedding()
    ts = plan.ascending()
    latents = [z]
    for t, u in zip(ts[:-1], ts[1:]):
        eps = guided_noise(backbone, z, u, cond, null, guidance_w)
        z = ddim_invert_step(z, eps, t, u, backbone.schedule)
        latents.append(z)
    return DiffusionTrajectory(latents, prompt, guidance_w, plan, tensor_hash(image))


def optimize_null_text(
    backbone: Backbone, trajectory: DiffusionTrajectory, prompt: PromptSpec, config: NullOptConfig = NullOptConfig()
) -> NullTextSchedule:
    plan = trajectory.plan
    T = plan.inference_steps
    cond = backbone.encode_prompt(prompt).embedding
    null = backbone.null_embedding().embedding.clone()
    w = config.guidance_w
    z_bar = trajectory.latents[T]
    embeddings, finals, initials, audit = [], [], [], []
    for i, (t, s) in enumerate(plan.sampling_pairs()):
        target = trajectory.latents[T - 1 - i]
        audit.append((i, t))
        with torch.no_grad():
            eps_c = backbone.predict_noise(z_bar, t, cond)

        def replay(emb):
            eps_u = backbone.predict_noise(z_bar, t, emb)
            return ddim_step(z_bar, cfg_combine(eps_u, eps_c, w), t, s, backbone.schedule)

        null = null.detach().clone().requires_grad_(True)
        opt = torch.optim.Adam([null], lr=config.learning_rate)
        best_loss, best_null, best_z = math.inf, None, None
        initial = None
        for j in range(config.inner_iterations + 1):
            z_prev = replay(null)
            loss = (z_prev - target).pow(2).mean()
            value = loss.item()
            if not math.isfinite(value):
                raise OptimizationError(f"non-finite null-text loss at step {i} (t={t})", step=i)
            if initial is None:
                initial = value
            if value < best_loss:
                best_loss, best_null, best_z = value, null.detach().clone(), z_prev.detach()
            if value < config.early_stop or j == config.inner_iterations:
                break
            (null.grad,) = torch.autograd.grad(loss, [null])
            opt.step()
        null = best_null
        z_bar = best_z
        embeddings.append(best_null)
        finals.append(best_loss)
        initials.append(initial)
    return NullTextSchedule(embeddings, finals, initials, audit)


def sample_with_schedule(
    backbone: Backbone,
    z_T: torch.Tensor,
    null_embeddings: list[torch.Tensor],
    prompt: PromptSpec,
    plan: StepPlan,
    guidance_w: float,
    probe: Optional[AttentionProbeContext] = None,
) -> torch.Tensor:
    """Guided DDIM sampling with a per-step unconditional embedding; returns the final latent."""
    if len(null_embeddings) != plan.inference_steps:
        raise ConsistencyError(f"{len(null_embeddings)} null embeddings for {plan.inference_steps} steps")
    cond = backbone.encode_prompt(prompt)
    z = z_T
    with torch.no_grad():
        for i, (t, s) in enumerate(plan.sampling_pairs()):
            if probe is not None:
                probe.step_cursor = i
            eps = guided_noise(backbone, z, t, cond, null_embeddings[i], guidance_w, probe)
            z = ddim_step(z, eps, t, s, backbone.schedule)
    return z


def reconstruct(backbone: Backbone, bundle: InversionBundle, plan: Optional[StepPlan] = None, probe=None) -> torch.Tensor:
    plan = plan or bundle.plan
    if plan != bundle.plan:
        raise ConsistencyError("bundle was inverted with a different step plan")
    z = sample_with_schedule(
        backbone, bundle.z_T, bundle.null_schedule.embeddings, bundle.prompt, plan, bundle.guidance_w, probe
    )
    return backbone.decode_latent(z)


def baseline_schedule(backbone: Backbone, plan: StepPlan) -> NullTextSchedule:
    """Unoptimized schedule: the default null embedding at every step."""
    null = backbone.null_embedding().embedding
    return NullTextSchedule([null] * plan.inference_steps, [0.0] * plan.inference_steps)


def invert_image(
    backbone: Backbone,
    image: torch.Tensor,
    plan: StepPlan,
    null_config: NullOptConfig = NullOptConfig(),
    age_adapter=None,
    gender_adapter=None,
    estimated_age: Optional[int] = None,
    enhanced: bool = False,
    use_initial_age: bool = True,
    inversion_w: float = 1.0,
) -> InversionBundle:
    """Estimate the age, build P_inv, invert, optimize null-text and stamp the PSNR."""
    if image.dim() == 4:
        if image.shape[0] != 1:
            raise ShapeError("invert_image takes a single image")
        image = image[0]
    gender = None
    if use_initial_age and estimated_age is None:
        if age_adapter is None:
            raise InputError("no age estimator configured and no age override given")
        estimated_age = estimate_age(age_adapter, image)
    if enhanced:
        if gender_adapter is None:
            raise InputError("enhanced prompts need a gender classifier")
        gender, _ = classify_gender(gender_adapter, image)
    prompt = build_prompt(estimated_age if use_initial_age else None, gender, enhanced)
    traj = ddim_invert(backbone, image, prompt, plan, inversion_w)
    schedule = optimize_null_text(backbone, traj, prompt, null_config)
    bundle = InversionBundle(
        z_T=traj.latents[-1],
        null_schedule=schedule,
        prompt=prompt,
        estimated_age=estimated_age,
        plan=plan,
        guidance_w=null_config.guidance_w,
        gender=gender,
        config={"null_opt": asdict(null_config), "inversion_w": inversion_w, "enhanced": enhanced,
                "use_initial_age": use_initial_age},
        source=image.clone(),
    )
    bundle.psnr = psnr(reconstruct(backbone, bundle)[0], image)
    return bundle


# -- bundle serialization -----------------------------------------------------

BUNDLE_FORMAT = "agediff-inversion-bundle/1"


def _write_blob(path: Path, x: torch.Tensor):
    path.write_bytes(x.detach().contiguous().numpy().astype("<f4").tobytes())


def _read_blob(path: Path, shape) -> torch.Tensor:
    arr = np.frombuffer(path.read_bytes(), dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ConsistencyError(f"blob {path.name} has {arr.size} values, expected shape {shape}")
    return torch.from_numpy(arr.reshape(shape).astype(np.float32))


def schedule_hash(embeddings: list[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for e in embeddings:
        h.update(e.detach().contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_bundle(bundle: InversionBundle, out_dir, record=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_blob(out / "z_T.f32", bundle.z_T)
    null_files = []
    for i, e in enumerate(bundle.null_schedule.embeddings):
        name = f"null_{i:03d}.f32"
        _write_blob(out / name, e)
        null_files.append(name)
    manifest = {
        "format": BUNDLE_FORMAT,
        "prompt": bundle.prompt.rendered,
        "estimated_age": bundle.estimated_age,
        "gender": bundle.gender,
        "guidance_w": bundle.guidance_w,
        "config": bundle.config,
        "psnr": bundle.psnr,
        "plan": bundle.plan.to_dict(),
        "latent_shape": list(bundle.z_T.shape),
        "embedding_shape": list(bundle.null_schedule.embeddings[0].shape),
        "null_files": null_files,
        "schedule_hash": schedule_hash(bundle.null_schedule.embeddings),
        "per_step_final_loss": bundle.null_schedule.per_step_final_loss,
        "per_step_initial_loss": bundle.null_schedule.per_step_initial_loss,
    }
    if bundle.source is not None:
        _write_blob(out / "source.f32", bundle.source)
        manifest["source_shape"] = list(bundle.source.shape)
        manifest["source_hash"] = tensor_hash(bundle.source)
    if record is not None:
        from agediff.edit import save_record

        manifest["attention_record"] = save_record(record, out / "attention")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_bundle(path) -> InversionBundle:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise InputError(f"no bundle manifest at {mpath}")
    m = json.loads(mpath.read_text())
    if m.get("format") != BUNDLE_FORMAT:
        raise InputError(f"unsupported bundle format {m.get('format')!r}")
    plan = StepPlan.from_dict(m["plan"])
    embs = [_read_blob(root / f, m["embedding_shape"]) for f in m["null_files"]]
    if len(embs) != plan.inference_steps:
        raise ConsistencyError("null schedule length does not match the plan")
    if schedule_hash(embs) != m["schedule_hash"]:
        raise ConsistencyError("null schedule hash mismatch")
    source = None
    if "source_shape" in m:
        source = _read_blob(root / "source.f32", m["source_shape"])
    sched = NullTextSchedule(embs, m["per_step_final_loss"], m.get("per_step_initial_loss", []))
    return InversionBundle(
        z_T=_read_blob(root / "z_T.f32", m["latent_shape"]),
        null_schedule=sched,
        prompt=parse_prompt(m["prompt"]),
        estimated_age=m["estimated_age"],
        plan=plan,
        guidance_w=m["guidance_w"],
        gender=m.get("gender"),
        config=m["config"],
        psnr=m["psnr"],
        source=source,
    )
